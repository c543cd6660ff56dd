//! The network: atom embedding, encoder blocks whose attention mixes the
//! softmax scores with a distance kernel and the adjacency matrix, mean
//! pooling and a linear head.

mod checkpoint;
mod record;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointMeta, Standardization, CHECKPOINT_VERSION};
pub use record::{write_attention_dump, AttentionDump, AttentionRecord, HeadAttention};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurize::{
    distance_kernel, pair_features, row_normalize, DistanceFallback, Kernel, MolTensors, ATOM_FEATURES, INPUT_DIM,
};
use crate::tensor::{ParamId, ParamStore, Rng, Stream, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite attention in layer {layer}, head {head}")]
    NonFiniteAttention { layer: usize, head: usize },
    #[error("missing parameter '{0}'")]
    MissingParam(String),
    #[error("parameter '{name}' has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencySource {
    #[default]
    #[serde(alias = "A")]
    A,
    /// Learned per-bond scalars replace the adjacency matrix.
    EdgeFeatures,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Regression,
    Binary,
    NodePretrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    LeakyRelu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_pff: usize,
    pub lambda_a: f64,
    pub lambda_d: f64,
    pub lambda_g: f64,
    pub kernel: Kernel,
    pub dropout: f64,
    pub adjacency_source: AdjacencySource,
    pub task: Task,
    pub activation: Activation,
    /// Include the dummy node in the mean pooling.
    pub pool_dummy: bool,
    /// Append the dummy node during featurization.
    pub dummy_node: bool,
    pub distance_fallback: DistanceFallback,
    pub layer_norm_eps: f64,
}

impl Default for MatConfig {
    fn default() -> Self {
        MatConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            n_pff: 1,
            lambda_a: 0.33,
            lambda_d: 0.33,
            lambda_g: 0.33,
            kernel: Kernel::Exp,
            dropout: 0.0,
            adjacency_source: AdjacencySource::A,
            task: Task::Regression,
            activation: Activation::Relu,
            pool_dummy: true,
            dummy_node: true,
            distance_fallback: DistanceFallback::Error,
            layer_norm_eps: 1e-6,
        }
    }
}

impl MatConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 {
            return bad("d_model and n_heads must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        for (name, v) in [("lambda_a", self.lambda_a), ("lambda_d", self.lambda_d), ("lambda_g", self.lambda_g)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive".into());
        }
        if self.distance_fallback == DistanceFallback::ZeroLambdaOnly && self.lambda_d != 0.0 {
            return bad("the zero distance fallback requires lambda_d = 0".into());
        }
        Ok(())
    }

    /// Output width of the head.
    pub fn head_width(&self) -> usize {
        match self.task {
            Task::NodePretrain => ATOM_FEATURES,
            _ => 1,
        }
    }

    /// Parameter names and shapes in creation order.
    pub fn param_shapes(&self) -> Vec<(String, [usize; 2])> {
        let d = self.d_model;
        let mut out = Vec::new();
        let linear = |out: &mut Vec<(String, [usize; 2])>, name: &str, fan_in: usize, fan_out: usize| {
            out.push((format!("{name}.weight"), [fan_in, fan_out]));
            out.push((format!("{name}.bias"), [1, fan_out]));
        };
        linear(&mut out, "embed", INPUT_DIM, d);
        for l in 0..self.n_layers {
            for p in ["q", "k", "v", "o"] {
                linear(&mut out, &format!("layers.{l}.attn.{p}"), d, d);
            }
            out.push((format!("layers.{l}.norm1.gamma"), [1, d]));
            out.push((format!("layers.{l}.norm1.beta"), [1, d]));
            for k in 0..self.n_pff {
                linear(&mut out, &format!("layers.{l}.ff.{k}"), d, d);
            }
            out.push((format!("layers.{l}.norm2.gamma"), [1, d]));
            out.push((format!("layers.{l}.norm2.beta"), [1, d]));
        }
        if self.adjacency_source == AdjacencySource::EdgeFeatures {
            linear(&mut out, "edge", 4, 1);
        }
        linear(&mut out, "head", d, self.head_width());
        out
    }
}

/// Glorot-uniform weights, zero biases, unit LayerNorm gains.
pub fn init_params(cfg: &MatConfig, rng: &mut Rng) -> Result<ParamStore, ModelError> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for (name, [r, c]) in cfg.param_shapes() {
        let t = if name.ends_with(".weight") {
            let bound = (6.0 / (r + c) as f64).sqrt();
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.uniform_range(-bound, bound)).collect())?
        } else if name.ends_with(".gamma") {
            Tensor::filled(r, c, 1.0)
        } else {
            Tensor::zeros(r, c)
        };
        store.insert(name, t)?;
    }
    Ok(store)
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm1: (ParamId, ParamId),
    ff: Vec<Linear>,
    norm2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct Layout {
    embed: Linear,
    blocks: Vec<Block>,
    edge: Option<Linear>,
    head: Linear,
}

impl Layout {
    fn resolve(cfg: &MatConfig, params: &ParamStore) -> Result<Layout, ModelError> {
        for (name, shape) in cfg.param_shapes() {
            let t = params.by_name(&name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if (t.rows(), t.cols()) != (shape[0], shape[1]) {
                return Err(ModelError::ParamShape {
                    name,
                    found: t.shape().to_vec(),
                    expected: shape.to_vec(),
                });
            }
        }
        let id = |n: String| params.id(&n).expect("checked above");
        let lin = |n: &str| Linear {
            w: id(format!("{n}.weight")),
            b: id(format!("{n}.bias")),
        };
        let blocks = (0..cfg.n_layers)
            .map(|l| Block {
                q: lin(&format!("layers.{l}.attn.q")),
                k: lin(&format!("layers.{l}.attn.k")),
                v: lin(&format!("layers.{l}.attn.v")),
                o: lin(&format!("layers.{l}.attn.o")),
                norm1: (id(format!("layers.{l}.norm1.gamma")), id(format!("layers.{l}.norm1.beta"))),
                ff: (0..cfg.n_pff).map(|k| lin(&format!("layers.{l}.ff.{k}"))).collect(),
                norm2: (id(format!("layers.{l}.norm2.gamma")), id(format!("layers.{l}.norm2.beta"))),
            })
            .collect();
        Ok(Layout {
            embed: lin("embed"),
            blocks,
            edge: (cfg.adjacency_source == AdjacencySource::EdgeFeatures).then(|| lin("edge")),
            head: lin("head"),
        })
    }
}

/// Configuration plus parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: MatConfig,
    pub params: ParamStore,
    layout: Layout,
}

impl Model {
    pub fn new(config: MatConfig, seed: u64) -> Result<Model, ModelError> {
        let params = init_params(&config, &mut Rng::new(seed, Stream::Init))?;
        Model::from_params(config, params)
    }

    pub fn from_params(config: MatConfig, params: ParamStore) -> Result<Model, ModelError> {
        config.validate()?;
        let layout = Layout::resolve(&config, &params)?;
        Ok(Model { config, params, layout })
    }

    /// Same config and layout with an empty parameter store. Forward passes
    /// only read parameters through the tape, so a shell can drive a tape
    /// over a store that is borrowed elsewhere.
    pub fn shell(&self) -> Model {
        Model {
            config: self.config.clone(),
            params: ParamStore::new(),
            layout: self.layout.clone(),
        }
    }

    /// Copies every parameter except the head from `source`. Returns the
    /// number of tensors copied.
    pub fn load_encoder(&mut self, source: &ParamStore) -> Result<usize, ModelError> {
        let mut copied = 0;
        let names: Vec<String> = self
            .params
            .iter()
            .map(|(_, n, _)| n.to_string())
            .filter(|n| !n.starts_with("head."))
            .collect();
        for name in names {
            let src = source.by_name(&name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            let id = self.params.id(&name).expect("own parameter");
            let dst = self.params.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(ModelError::ParamShape {
                    name,
                    found: src.shape().to_vec(),
                    expected: dst.shape().to_vec(),
                });
            }
            *dst = src.clone();
            copied += 1;
        }
        Ok(copied)
    }

    fn linear(&self, tape: &mut Tape<'_>, x: Var, l: Linear) -> Result<Var, ModelError> {
        let w = tape.param(l.w);
        let b = tape.param(l.b);
        let y = tape.matmul(x, w)?;
        Ok(tape.add_row(y, b)?)
    }

    fn activate(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        match self.config.activation {
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu => tape.leaky_relu(x, 0.01),
            Activation::Tanh => tape.tanh(x),
        }
    }

    fn check_input(&self, t: &MolTensors) -> Result<(), ModelError> {
        if t.distance_placeholder && self.config.lambda_d != 0.0 {
            return Err(ModelError::Config(format!(
                "molecule has placeholder distances but lambda_d = {}",
                self.config.lambda_d
            )));
        }
        if t.features.cols() != ATOM_FEATURES || t.adjacency.rows() != t.n_nodes() {
            return Err(ModelError::Config("malformed molecule tensors".into()));
        }
        Ok(())
    }

    /// Unweighted distance and adjacency addends. The adjacency addend is
    /// a tape value because edge features are learned.
    fn structural_terms(&self, tape: &mut Tape<'_>, t: &MolTensors) -> Result<(Tensor, Var), ModelError> {
        let n = t.n_nodes();
        let g = distance_kernel(&t.distance, self.config.kernel, &t.mask);
        let adj = match self.layout.edge {
            None => {
                let mut a = t.adjacency.clone();
                for (k, v) in a.data_mut().iter_mut().enumerate() {
                    if !t.mask[k / n] || !t.mask[k % n] {
                        *v = 0.0;
                    }
                }
                tape.constant(row_normalize(&a))
            }
            Some(lin) => {
                let f = tape.constant(pair_features(t));
                let z = self.linear(tape, f, lin)?;
                let r = tape.relu(z);
                let e = tape.reshape(r, n, n)?;
                let keep: Vec<f64> = (0..n * n)
                    .map(|k| if t.mask[k / n] && t.mask[k % n] { 1.0 } else { 0.0 })
                    .collect();
                let keep = tape.constant(Tensor::matrix(n, n, keep)?);
                tape.mul(e, keep)?
            }
        };
        Ok((g, adj))
    }

    /// Node embeddings `[n × d_model]` after the encoder stack. Dropout is
    /// active iff `rng` is given.
    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        t: &MolTensors,
        mut rng: Option<&mut Rng>,
        mut record: Option<&mut AttentionRecord>,
    ) -> Result<Var, ModelError> {
        self.check_input(t)?;
        let cfg = &self.config;
        let n = t.n_nodes();
        let p = cfg.dropout;

        let input = tape.constant(t.input());
        let x = self.linear(tape, input, self.layout.embed)?;
        let mut x = tape.dropout(x, p, rng.as_deref_mut())?;

        let (g, adj) = self.structural_terms(tape, t)?;
        // λ_d·g(D) + λ_g·A, shared by every head of every layer.
        let fixed = if cfg.lambda_d == 0.0 && cfg.lambda_g == 0.0 {
            None
        } else {
            let gd = tape.constant(g.clone());
            let gd = tape.scale(gd, cfg.lambda_d);
            let ga = tape.scale(adj, cfg.lambda_g);
            Some(tape.add(gd, ga)?)
        };
        if let Some(r) = record.as_deref_mut() {
            *r = AttentionRecord::new(n, [cfg.lambda_a, cfg.lambda_d, cfg.lambda_g], g, tape.value(adj).clone());
        }

        for (l, block) in self.layout.blocks.iter().enumerate() {
            let mut layer_record = Vec::new();
            let heads_out = if record.is_some() { Some(&mut layer_record) } else { None };
            let attn_out = self.molecule_attention(tape, l, x, fixed, &t.mask, heads_out)?;
            if let Some(r) = record.as_deref_mut() {
                r.layers.push(layer_record);
            }
            let attn_out = tape.dropout(attn_out, p, rng.as_deref_mut())?;
            let res = tape.add(x, attn_out)?;
            let (gm, bt) = (tape.param(block.norm1.0), tape.param(block.norm1.1));
            x = tape.layer_norm(res, gm, bt, cfg.layer_norm_eps)?;

            let mut h = x;
            for (i, lin) in block.ff.iter().enumerate() {
                h = self.linear(tape, h, *lin)?;
                h = self.activate(tape, h);
                if i + 1 < block.ff.len() {
                    h = tape.dropout(h, p, rng.as_deref_mut())?;
                }
            }
            let h = tape.dropout(h, p, rng.as_deref_mut())?;
            let res = tape.add(x, h)?;
            let (gm, bt) = (tape.param(block.norm2.0), tape.param(block.norm2.1));
            x = tape.layer_norm(res, gm, bt, cfg.layer_norm_eps)?;
        }
        Ok(x)
    }

    /// One attention sublayer of layer `layer`: per head
    /// `(λ_a·softmax(Q Kᵀ/√d_k) + fixed)·V`, heads concatenated, then the
    /// output projection. `fixed` is the precombined `λ_d·g(D) + λ_g·A`.
    pub fn molecule_attention(
        &self,
        tape: &mut Tape<'_>,
        layer: usize,
        x: Var,
        fixed: Option<Var>,
        mask: &[bool],
        mut record: Option<&mut Vec<HeadAttention>>,
    ) -> Result<Var, ModelError> {
        let cfg = &self.config;
        let dk = cfg.d_k();
        let block = self
            .layout
            .blocks
            .get(layer)
            .ok_or_else(|| ModelError::Config(format!("no layer {layer}")))?;
        let scale = 1.0 / (dk as f64).sqrt();
        let q = self.linear(tape, x, block.q)?;
        let k = self.linear(tape, x, block.k)?;
        let v = self.linear(tape, x, block.v)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, h * dk, dk)?;
            let kh = tape.slice_cols(k, h * dk, dk)?;
            let vh = tape.slice_cols(v, h * dk, dk)?;
            let scores = tape.matmul_t(qh, false, kh, true)?;
            let scores = tape.scale(scores, scale);
            let s = tape.masked_softmax_rows(scores, mask)?;
            let weighted = tape.scale(s, cfg.lambda_a);
            let att = match fixed {
                Some(f) => tape.add(weighted, f)?,
                None => weighted,
            };
            if tape.value(att).data().iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFiniteAttention { layer, head: h });
            }
            if let Some(r) = record.as_deref_mut() {
                r.push(HeadAttention {
                    softmax: tape.value(s).clone(),
                    composite: tape.value(att).clone(),
                });
            }
            heads.push(tape.matmul(att, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        self.linear(tape, cat, block.o)
    }

    /// Rows that enter the mean pooling.
    pub fn pooled_rows(&self, t: &MolTensors) -> Vec<usize> {
        let dummy = t.dummy_index();
        (0..t.n_nodes())
            .filter(|&i| t.mask[i] && (self.config.pool_dummy || Some(i) != dummy))
            .collect()
    }

    /// Mean pooling and the linear head: a `[1×1]` value (a logit for
    /// binary tasks).
    pub fn graph_head(&self, tape: &mut Tape<'_>, t: &MolTensors, emb: Var) -> Result<Var, ModelError> {
        let pooled = tape.mean_rows(emb, &self.pooled_rows(t))?;
        self.linear(tape, pooled, self.layout.head)
    }

    /// Per-node head on the listed rows: `[rows × 26]` logits.
    pub fn node_head(&self, tape: &mut Tape<'_>, emb: Var, rows: &[usize]) -> Result<Var, ModelError> {
        let picked = tape.gather_rows(emb, rows)?;
        self.linear(tape, picked, self.layout.head)
    }

    /// Full forward to a scalar output for graph-level tasks.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        t: &MolTensors,
        mut rng: Option<&mut Rng>,
        record: Option<&mut AttentionRecord>,
    ) -> Result<Var, ModelError> {
        if self.config.task == Task::NodePretrain {
            return Err(ModelError::Config("graph-level forward on a node_pretrain model".into()));
        }
        let emb = self.encode(tape, t, rng.as_deref_mut(), record)?;
        self.graph_head(tape, t, emb)
    }

    /// Eval-mode output: the regression value or the logit.
    pub fn predict(&self, t: &MolTensors) -> Result<f64, ModelError> {
        let mut tape = Tape::new(&self.params);
        let y = self.forward(&mut tape, t, None, None)?;
        Ok(tape.value(y).data()[0])
    }

    pub fn predict_many(&self, items: &[MolTensors]) -> Result<Vec<f64>, ModelError> {
        use rayon::prelude::*;
        items.par_iter().map(|t| self.predict(t)).collect()
    }

    /// Eval-mode attention for one molecule.
    pub fn attention(&self, t: &MolTensors) -> Result<AttentionRecord, ModelError> {
        let mut tape = Tape::new(&self.params);
        let mut rec = AttentionRecord::default();
        self.encode(&mut tape, t, None, Some(&mut rec))?;
        Ok(rec)
    }
}

#[cfg(test)]
mod tests;
