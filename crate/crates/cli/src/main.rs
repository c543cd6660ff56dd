use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use mat_core::analyze::{attention_stats, stats_tsv};
use mat_core::chem::PatternId;
use mat_core::featurize::{featurize_molecule, DistanceFallback, Kernel, MolTensors};
use mat_core::model::{write_attention_dump, Checkpoint, CheckpointMeta, MatConfig, Model, Task};
use mat_core::tensor::{grad_check, GradCheckConfig, Rng, Stream};
use mat_core::toy::{generate, random_molecule, write_dataset, ToyConfig};
use mat_core::train::{
    base_rate_loss, evaluate, finetune_trials, identity_accuracy, load_dataset, load_inputs, mask_batch, pretrain,
    pretrain_loss, random_split, sample_trial, train_loop, Dataset, InputRow, Split, SweepSpace, SweepTrial,
    TrainConfig,
};
use mat_core::{Classify, ErrorKind};

const BUILD_ID: &str = env!("MAT_BUILD_ID");

#[derive(Parser)]
#[command(name = "mat", version, about = "Molecule attention transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Masked-node pretraining on unlabeled molecules.
    Pretrain(PretrainArgs),
    /// Train a property predictor on a labeled table.
    Train(TrainArgs),
    /// Predict with a saved checkpoint.
    Predict(PredictArgs),
    /// Score a saved checkpoint on a labeled table.
    Eval(PredictArgs),
    /// Compare analytic and finite-difference gradients of the full model.
    Gradcheck(GradcheckArgs),
    /// Write per-molecule attention matrices and a top-k summary.
    AttnDump(AttnDumpArgs),
    /// Column-mean attention statistics for substructure patterns.
    AttnStats(AttnStatsArgs),
    /// Generate the synthetic distance toy dataset.
    Toygen(ToygenArgs),
    /// Seeded random hyperparameter search.
    Sweep(SweepArgs),
    /// Validation and test metric as λ_d varies.
    Ablate(AblateArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML file with [model] and [train] tables, or a manifest.json from an
    /// earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_a: Option<f64>,
    #[arg(long)]
    lambda_d: Option<f64>,
    #[arg(long)]
    lambda_g: Option<f64>,
    #[arg(long, value_enum)]
    kernel: Option<KernelArg>,
    #[arg(long, value_enum)]
    distance_fallback: Option<FallbackArg>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Softmax,
    Exp,
}

#[derive(Clone, Copy, ValueEnum)]
enum FallbackArg {
    Error,
    Zero,
    Topo,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Regression,
    Binary,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Regression => Task::Regression,
            TaskArg::Binary => Task::Binary,
        }
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    /// CSV/TSV with an `input` column, or an SDF file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 200)]
    steps: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// CSV/TSV with `input` and `label` columns.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// Encoder weights from `mat pretrain`.
    #[arg(long)]
    pretrained: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Molecule to run through the model; a random toy molecule otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct AttnDumpArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 3)]
    top_k: usize,
}

#[derive(Args)]
struct AttnStatsArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Pattern ids (cD2, S, NR0, O=, aD3, n); all six when omitted.
    #[arg(long, value_delimiter = ',')]
    pattern: Vec<String>,
}

#[derive(Args)]
struct ToygenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Requested threshold in Å; retuned when the classes come out unbalanced.
    #[arg(long, default_value_t = 20.0)]
    threshold: f64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// Number of trials. Ignored with --pretrained, which tries each
    /// fine-tuning learning rate once.
    #[arg(long, default_value_t = 20)]
    budget: usize,
    /// Use the full grids instead of the laptop-sized ones.
    #[arg(long)]
    full: bool,
    #[arg(long)]
    pretrained: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// λ_d values; the rest of the unit weight is split evenly between λ_a
    /// and λ_g.
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    lambda_d_grid: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: MatConfig,
    train: TrainConfig,
}

#[derive(Debug, Serialize)]
struct Manifest {
    command: String,
    argv: Vec<String>,
    config: RunConfig,
    seed: u64,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    build_id: &'static str,
    started: f64,
    finished: f64,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Config-file or input-format problem, reported with exit code 2.
#[derive(Debug)]
struct InputError(String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn input_error(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        let mut v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
        // A manifest carries the config under "config".
        if let Some(inner) = v.get_mut("config") {
            v = inner.take();
        }
        serde_json::from_value(v).map_err(|e| input_error(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| input_error(format!("{}: {e}", path.display())))?
    };
    Ok(parsed)
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => read_config(p)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg.model);
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        cfg.model.validate().map_err(|e| input_error(e.to_string()))?;
        cfg.train.validate().map_err(|e| input_error(e.to_string()))?;
        Ok(cfg)
    }

    fn apply(&self, m: &mut MatConfig) {
        if let Some(v) = self.lambda_a {
            m.lambda_a = v;
        }
        if let Some(v) = self.lambda_d {
            m.lambda_d = v;
        }
        if let Some(v) = self.lambda_g {
            m.lambda_g = v;
        }
        if let Some(k) = self.kernel {
            m.kernel = match k {
                KernelArg::Softmax => Kernel::SoftmaxRows,
                KernelArg::Exp => Kernel::Exp,
            };
        }
        if let Some(f) = self.distance_fallback {
            m.distance_fallback = match f {
                FallbackArg::Error => DistanceFallback::Error,
                FallbackArg::Zero => DistanceFallback::ZeroLambdaOnly,
                FallbackArg::Topo => DistanceFallback::TopoApprox,
            };
        }
    }
}

/// Output directory plus the bookkeeping for its manifest.
struct Run {
    out: PathBuf,
    command: &'static str,
    config: RunConfig,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: f64,
}

impl Run {
    fn start(command: &'static str, common: &Common, config: RunConfig, inputs: &[&Path]) -> Result<Run> {
        fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
        Ok(Run {
            out: common.out.clone(),
            command,
            config,
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
            outputs: Vec::new(),
            started: unix_now(),
        })
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(path.clone());
        Ok(path)
    }

    fn save_checkpoint(&mut self, name: &str, ck: &Checkpoint) -> Result<()> {
        let path = self.out.join(name);
        ck.save(&path)?;
        self.outputs.push(path);
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        let manifest = Manifest {
            command: self.command.to_string(),
            argv: std::env::args().collect(),
            seed: self.config.train.seed,
            config: self.config.clone(),
            inputs: std::mem::take(&mut self.inputs),
            outputs: std::mem::take(&mut self.outputs),
            build_id: BUILD_ID,
            started: self.started,
            finished: unix_now(),
        };
        let path = self.out.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn predictions_csv(inputs: &[String], labels: Option<&[f64]>, preds: &[f64]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    match labels {
        Some(_) => w.write_record(["input", "label", "prediction"])?,
        None => w.write_record(["input", "prediction"])?,
    }
    for (i, (input, p)) in inputs.iter().zip(preds).enumerate() {
        match labels {
            Some(l) => w.write_record([input.clone(), l[i].to_string(), p.to_string()])?,
            None => w.write_record([input.clone(), p.to_string()])?,
        }
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?)?)
}

fn featurize_rows(rows: &[InputRow], cfg: &MatConfig) -> Result<Vec<MolTensors>> {
    rows.par_iter()
        .map(|r| {
            featurize_molecule(&r.molecule, cfg.dummy_node, cfg.distance_fallback)
                .with_context(|| format!("featurizing {}", r.input))
        })
        .collect()
}

fn labeled(path: &Path, task: Option<TaskArg>, cfg: &mut RunConfig) -> Result<Dataset> {
    if let Some(t) = task {
        cfg.model.task = t.into();
    }
    if cfg.model.task == Task::NodePretrain {
        bail!(input_error("task node_pretrain is only valid for `mat pretrain`"));
    }
    Ok(load_dataset(path, cfg.model.task)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

#[derive(Serialize)]
struct FoldMetrics {
    loss: Option<f64>,
    metric: Option<f64>,
}

fn fold_metrics(model: &Model, split: &Split, which: &Dataset) -> Result<(FoldMetrics, Vec<f64>)> {
    if which.is_empty() {
        return Ok((
            FoldMetrics {
                loss: None,
                metric: None,
            },
            Vec::new(),
        ));
    }
    let x = which.featurize(&model.config)?;
    let r = evaluate(model, &x, &which.labels(), split.standardization)?;
    Ok((
        FoldMetrics {
            loss: Some(r.loss),
            metric: r.metric,
        },
        r.predictions,
    ))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.common.resolve()?;
    let ds = labeled(&a.data, a.task, &mut cfg)?;
    let pretrained = a.pretrained.as_deref().map(load_checkpoint).transpose()?;
    let mut inputs = vec![a.data.as_path()];
    inputs.extend(a.pretrained.as_deref());
    let mut run = Run::start("train", &a.common, cfg.clone(), &inputs)?;

    let split = random_split(&ds, cfg.train.split, cfg.train.seed)?;
    let out = train_loop(&split, &cfg.model, &cfg.train, pretrained.as_ref())?;
    let best = out.checkpoint.model()?;
    let (val, _) = fold_metrics(&best, &split, &split.val)?;
    let (test, preds) = fold_metrics(&best, &split, &split.test)?;

    run.save_checkpoint("model.ckpt", &out.checkpoint)?;
    run.write("history.jsonl", out.history.to_jsonl())?;
    run.write("curve.tsv", out.history.curve_tsv())?;
    let inputs: Vec<String> = split.test.records.iter().map(|r| r.input.clone()).collect();
    run.write("predictions.csv", predictions_csv(&inputs, Some(&split.test.labels()), &preds)?)?;
    let metrics = serde_json::json!({
        "best_epoch": out.checkpoint.meta.epoch,
        "sizes": [split.train.len(), split.val.len(), split.test.len()],
        "val": val,
        "test": test,
    });
    run.write("metrics.json", serde_json::to_string_pretty(&metrics)? + "\n")?;
    println!(
        "best epoch {:?}; val metric {:?}; test metric {:?}",
        out.checkpoint.meta.epoch, val.metric, test.metric
    );
    run.finish()
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = a.common.resolve()?;
    cfg.model.task = Task::NodePretrain;
    cfg.model.validate().map_err(|e| input_error(e.to_string()))?;
    let rows = load_inputs(&a.data)?;
    let mut run = Run::start("pretrain", &a.common, cfg.clone(), &[&a.data])?;
    let items = featurize_rows(&rows, &cfg.model)?;
    let out = pretrain(&items, &cfg.model, &cfg.train, a.steps)?;

    // Held-out masking draw over the whole corpus, for a quick report.
    let refs: Vec<&MolTensors> = items.iter().collect();
    let probe = mask_batch(&refs, cfg.train.mask_fraction, &Rng::new(cfg.train.seed, Stream::Masking).fork(u64::MAX), 0)?;
    let loss = pretrain_loss(&out.model, &probe)?;
    let (acc, majority) = identity_accuracy(&out.model, &probe)?;
    let report = serde_json::json!({
        "masked_loss": loss,
        "base_rate_loss": base_rate_loss(&probe)?,
        "identity_accuracy": acc,
        "majority_baseline": majority,
    });
    let ck = Checkpoint::from_model(
        &out.model,
        None,
        CheckpointMeta {
            step: Some(a.steps),
            ..CheckpointMeta::default()
        },
    );
    run.save_checkpoint("pretrained.ckpt", &ck)?;
    let steps: String = out
        .history
        .iter()
        .map(|s| serde_json::to_string(s).map(|l| l + "\n"))
        .collect::<Result<_, _>>()?;
    run.write("history.jsonl", steps)?;
    run.write("metrics.json", serde_json::to_string_pretty(&report)? + "\n")?;
    println!("masked loss {loss:.4}; identity accuracy {acc:.3} (majority {majority:.3})");
    run.finish()
}

fn cmd_predict(a: PredictArgs, with_labels: bool) -> Result<()> {
    let cfg = a.common.resolve()?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut model = ck.model()?;
    a.common.apply(&mut model.config);
    if model.config.task == Task::NodePretrain {
        bail!(input_error("a pretraining checkpoint has no property head"));
    }
    let rows = load_inputs(&a.data)?;
    let run_cfg = RunConfig {
        model: model.config.clone(),
        train: cfg.train,
    };
    let command = if with_labels { "eval" } else { "predict" };
    let mut run = Run::start(command, &a.common, run_cfg, &[&a.data, &a.checkpoint])?;
    let x = featurize_rows(&rows, &model.config)?;
    let inputs: Vec<String> = rows.iter().map(|r| r.input.clone()).collect();
    if with_labels {
        let labels: Vec<f64> = rows
            .iter()
            .map(|r| r.label.ok_or_else(|| input_error(format!("{}: missing label", r.input))))
            .collect::<Result<_>>()?;
        let r = evaluate(&model, &x, &labels, ck.standardization)?;
        run.write("predictions.csv", predictions_csv(&inputs, Some(&labels), &r.predictions)?)?;
        let metrics = FoldMetrics {
            loss: Some(r.loss),
            metric: r.metric,
        };
        run.write("metrics.json", serde_json::to_string_pretty(&metrics)? + "\n")?;
        println!("loss {:.6}; metric {:?}", r.loss, r.metric);
    } else {
        let raw = model.predict_many(&x)?;
        let preds: Vec<f64> = match model.config.task {
            Task::Regression => raw.iter().map(|&z| ck.standardization.map_or(z, |s| s.invert(z))).collect(),
            _ => raw.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect(),
        };
        run.write("predictions.csv", predictions_csv(&inputs, None, &preds)?)?;
        println!("{} predictions", preds.len());
    }
    run.finish()
}

#[derive(Debug)]
struct GradcheckFailed(String);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for GradcheckFailed {}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let t = match &a.data {
        Some(p) => {
            let rows = load_inputs(p)?;
            let first = rows.first().ok_or_else(|| input_error(format!("{}: no molecules", p.display())))?;
            featurize_molecule(&first.molecule, cfg.model.dummy_node, cfg.model.distance_fallback)?
        }
        None => {
            let mut rng = Rng::new(cfg.train.seed, Stream::GradCheck);
            let mol = random_molecule(&mut rng, 6, 12);
            featurize_molecule(&mol, cfg.model.dummy_node, cfg.model.distance_fallback)?
        }
    };
    let inputs: Vec<&Path> = a.data.as_deref().into_iter().collect();
    let mut run = Run::start("gradcheck", &a.common, cfg.clone(), &inputs)?;
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let shell = model.shell();
    let gc = GradCheckConfig {
        samples: a.samples,
        tol: a.tol,
        seed: cfg.train.seed,
        ..GradCheckConfig::default()
    };
    let report = grad_check::<mat_core::model::ModelError, _>(&mut model.params, &gc, |tape| {
        if shell.config.task == Task::NodePretrain {
            let emb = shell.encode(tape, &t, None, None)?;
            let rows: Vec<usize> = (0..t.n_atoms()).collect();
            let logits = shell.node_head(tape, emb, &rows)?;
            let target = vec![0.5; rows.len() * mat_core::featurize::ATOM_FEATURES];
            Ok(tape.bce_with_logits(logits, &target, 1.0)?)
        } else {
            let y = shell.forward(tape, &t, None, None)?;
            Ok(tape.squared_error(y, &[0.5], 1.0)?)
        }
    })?;
    let mut tsv = String::from("param\tindex\tanalytic\tnumeric\trel_error\n");
    for c in &report.checked {
        tsv.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", c.param, c.index, c.analytic, c.numeric, c.rel_error));
    }
    run.write("gradcheck.tsv", tsv)?;
    run.finish()?;
    println!("{} coordinates, max relative error {:.3e}", report.checked.len(), report.max_rel_error);
    if !report.passed() {
        bail!(GradcheckFailed(format!(
            "gradient check failed: {:.3e} > {:.1e}",
            report.max_rel_error, report.tol
        )));
    }
    Ok(())
}

fn cmd_attn_dump(a: AttnDumpArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut model = ck.model()?;
    a.common.apply(&mut model.config);
    let rows = load_inputs(&a.data)?;
    let mut run = Run::start(
        "attn-dump",
        &a.common,
        RunConfig {
            model: model.config.clone(),
            train: cfg.train,
        },
        &[&a.data, &a.checkpoint],
    )?;
    let x = featurize_rows(&rows, &model.config)?;
    let mut summary = String::new();
    for (k, (row, t)) in rows.iter().zip(&x).enumerate() {
        let rec = model.attention(t)?;
        let stem = format!("mol{k}");
        let paths = write_attention_dump(&rec, &run.out, &stem).with_context(|| format!("writing {stem}"))?;
        run.outputs.extend(paths);
        let mut labels: Vec<String> = row.molecule.atoms.iter().map(|at| at.element.symbol().to_string()).collect();
        if t.has_dummy {
            labels.push("dummy".into());
        }
        let real: Vec<usize> = (0..t.n_atoms()).collect();
        summary.push_str(&format!("# {stem} {}\n", row.input));
        summary.push_str(&rec.top_k_summary(&real, &labels, a.top_k));
    }
    run.write("summary.txt", summary)?;
    println!("{} molecules dumped", rows.len());
    run.finish()
}

fn parse_patterns(names: &[String]) -> Result<Vec<PatternId>> {
    if names.is_empty() {
        return Ok(PatternId::ALL.to_vec());
    }
    names
        .iter()
        .map(|n| {
            PatternId::ALL
                .into_iter()
                .find(|p| p.cli_name() == n)
                .ok_or_else(|| input_error(format!("unknown pattern '{n}'")))
        })
        .collect()
}

fn cmd_attn_stats(a: AttnStatsArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let patterns = parse_patterns(&a.pattern)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut model = ck.model()?;
    a.common.apply(&mut model.config);
    let rows = load_inputs(&a.data)?;
    let mut run = Run::start(
        "attn-stats",
        &a.common,
        RunConfig {
            model: model.config.clone(),
            train: cfg.train,
        },
        &[&a.data, &a.checkpoint],
    )?;
    let x = featurize_rows(&rows, &model.config)?;
    let records = x.par_iter().map(|t| model.attention(t)).collect::<Result<Vec<_>, _>>()?;
    let molecules: Vec<_> = rows.iter().map(|r| r.molecule.clone()).collect();
    let mut out = String::new();
    for (i, p) in patterns.iter().enumerate() {
        let table = stats_tsv(&attention_stats(&records, &molecules, *p)?);
        // One header for the whole file.
        out.push_str(if i == 0 { &table } else { table.split_once('\n').map_or("", |(_, rest)| rest) });
    }
    run.write("stats.tsv", out)?;
    run.finish()
}

fn cmd_toygen(a: ToygenArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let mut run = Run::start("toygen", &a.common, cfg.clone(), &[])?;
    let set = generate(&ToyConfig {
        n: a.n,
        threshold: a.threshold,
        seed: cfg.train.seed,
        ..ToyConfig::default()
    })?;
    let csv = write_dataset(&set, &run.out)?;
    run.outputs.push(csv);
    run.outputs.push(run.out.join("toy.sdf"));
    run.outputs.push(run.out.join("toy_info.txt"));
    println!(
        "{} molecules; threshold {:.3} Å{}; positive fraction {:.3}",
        set.samples.len(),
        set.threshold,
        if set.threshold_tuned { " (tuned)" } else { "" },
        set.positive_fraction
    );
    run.finish()
}

#[derive(Serialize)]
struct TrialResult {
    trial: SweepTrial,
    best_epoch: Option<usize>,
    val_loss: Option<f64>,
    val_metric: Option<f64>,
    error: Option<String>,
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = a.common.resolve()?;
    let ds = labeled(&a.data, a.task, &mut cfg)?;
    let pretrained = a.pretrained.as_deref().map(load_checkpoint).transpose()?;
    let mut inputs = vec![a.data.as_path()];
    inputs.extend(a.pretrained.as_deref());
    let mut run = Run::start("sweep", &a.common, cfg.clone(), &inputs)?;

    let trials: Vec<SweepTrial> = match &pretrained {
        // The encoder fixes the architecture; only the learning rate moves.
        Some(ck) => {
            let mut model = ck.config.clone();
            model.task = cfg.model.task;
            model.dropout = cfg.model.dropout;
            finetune_trials(&model, &cfg.train)
        }
        None => {
            let space = if a.full { SweepSpace::default() } else { SweepSpace::desk() };
            let rng = Rng::new(cfg.train.seed, Stream::Sweep);
            (0..a.budget).map(|i| sample_trial(&space, &cfg.model, &cfg.train, &rng, i)).collect()
        }
    };
    let split = random_split(&ds, cfg.train.split, cfg.train.seed)?;
    let results_path = run.out.join("sweep.jsonl");
    fs::write(&results_path, "").with_context(|| format!("writing {}", results_path.display()))?;
    let sink = Mutex::new(fs::OpenOptions::new().append(true).open(&results_path)?);
    let results: Vec<TrialResult> = trials
        .into_par_iter()
        .map(|trial| -> Result<TrialResult> {
            let outcome = train_loop(&split, &trial.model, &trial.train, pretrained.as_ref());
            let result = match outcome {
                Ok(o) => TrialResult {
                    best_epoch: o.checkpoint.meta.epoch,
                    val_loss: o.checkpoint.meta.val_loss,
                    val_metric: o.checkpoint.meta.val_metric,
                    error: None,
                    trial,
                },
                // A diverging trial is a result, not a reason to stop the search.
                Err(e) => TrialResult {
                    best_epoch: None,
                    val_loss: None,
                    val_metric: None,
                    error: Some(e.to_string()),
                    trial,
                },
            };
            let line = serde_json::to_string(&result)? + "\n";
            let mut f = sink.lock().expect("results lock");
            std::io::Write::write_all(&mut *f, line.as_bytes())?;
            Ok(result)
        })
        .collect::<Result<_>>()?;
    run.outputs.push(results_path);

    let task = cfg.model.task;
    let best = results
        .iter()
        .filter(|r| r.error.is_none())
        .filter_map(|r| r.val_metric.map(|m| (r, m)))
        .min_by(|(_, x), (_, y)| match task {
            Task::Regression => x.total_cmp(y),
            _ => y.total_cmp(x),
        })
        .map(|(r, _)| r);
    match best {
        Some(b) => {
            run.write("best.json", serde_json::to_string_pretty(b)? + "\n")?;
            println!("best trial {} with validation metric {:?}", b.trial.index, b.val_metric);
        }
        None => println!("no trial produced a validation metric"),
    }
    run.finish()
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = a.common.resolve()?;
    let ds = labeled(&a.data, a.task, &mut cfg)?;
    for &d in &a.lambda_d_grid {
        if !(0.0..=1.0).contains(&d) {
            bail!(input_error(format!("λ_d = {d} outside [0, 1]")));
        }
    }
    let mut run = Run::start("ablate", &a.common, cfg.clone(), &[&a.data])?;
    let split = random_split(&ds, cfg.train.split, cfg.train.seed)?;
    let mut tsv = String::from("lambda_a\tlambda_d\tlambda_g\tval_metric\ttest_metric\n");
    for &d in &a.lambda_d_grid {
        let mut model_cfg = cfg.model.clone();
        model_cfg.lambda_d = d;
        model_cfg.lambda_a = (1.0 - d) / 2.0;
        model_cfg.lambda_g = (1.0 - d) / 2.0;
        let out = train_loop(&split, &model_cfg, &cfg.train, None)?;
        let best = out.checkpoint.model()?;
        let (val, _) = fold_metrics(&best, &split, &split.val)?;
        let (test, _) = fold_metrics(&best, &split, &split.test)?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            model_cfg.lambda_a,
            d,
            model_cfg.lambda_g,
            opt(val.metric),
            opt(test.metric)
        ));
        println!("λ_d {d}: val {:?} test {:?}", val.metric, test.metric);
    }
    run.write("ablation.tsv", tsv)?;
    run.finish()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let kind = |k: ErrorKind| match k {
        ErrorKind::Input => 2,
        ErrorKind::Numeric => 3,
        ErrorKind::Io => 4,
    };
    for cause in err.chain() {
        if cause.is::<GradcheckFailed>() {
            return 3;
        }
        if cause.is::<InputError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<mat_core::train::TrainError>() {
            return kind(e.kind());
        }
        if let Some(e) = cause.downcast_ref::<mat_core::model::ModelError>() {
            return kind(e.kind());
        }
        if let Some(e) = cause.downcast_ref::<mat_core::model::CheckpointError>() {
            return kind(e.kind());
        }
        if let Some(e) = cause.downcast_ref::<mat_core::tensor::TensorError>() {
            return kind(e.kind());
        }
        if let Some(e) = cause.downcast_ref::<mat_core::analyze::AnalyzeError>() {
            return kind(e.kind());
        }
        if let Some(e) = cause.downcast_ref::<mat_core::toy::ToyError>() {
            return kind(e.kind());
        }
        if cause.is::<std::io::Error>() {
            return 4;
        }
    }
    2
}

/// The cause chain, skipping causes whose text the message already shows.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a, false),
        Command::Eval(a) => cmd_predict(a, true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::AttnDump(a) => cmd_attn_dump(a),
        Command::AttnStats(a) => cmd_attn_stats(a),
        Command::Toygen(a) => cmd_toygen(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
