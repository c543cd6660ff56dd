use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadAttention {
    /// Unweighted softmax scores.
    pub softmax: Tensor,
    /// The full weighted sum used by the head.
    pub composite: Tensor,
}

/// Attention matrices from one eval forward.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub n: usize,
    /// (λ_a, λ_d, λ_g).
    pub lambdas: [f64; 3],
    /// Unweighted g(D).
    pub distance_term: Tensor,
    /// Unweighted adjacency addend as used by the model (row-normalized A,
    /// or the learned edge matrix).
    pub adjacency_term: Tensor,
    /// `layers[l][h]`.
    pub layers: Vec<Vec<HeadAttention>>,
}

impl Default for AttentionRecord {
    fn default() -> Self {
        AttentionRecord::new(0, [0.0; 3], Tensor::zeros(0, 0), Tensor::zeros(0, 0))
    }
}

impl AttentionRecord {
    pub fn new(n: usize, lambdas: [f64; 3], distance_term: Tensor, adjacency_term: Tensor) -> AttentionRecord {
        AttentionRecord {
            n,
            lambdas,
            distance_term,
            adjacency_term,
            layers: Vec::new(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    /// `k` most attended columns per head, by column mean over `rows`.
    pub fn top_k_summary(&self, rows: &[usize], labels: &[String], k: usize) -> String {
        let mut out = String::new();
        for (l, heads) in self.layers.iter().enumerate() {
            for (h, head) in heads.iter().enumerate() {
                let mut cols: Vec<(usize, f64)> = (0..self.n)
                    .filter(|j| rows.contains(j))
                    .map(|j| {
                        let s: f64 = rows.iter().map(|&i| head.composite.at(i, j)).sum();
                        (j, s / rows.len().max(1) as f64)
                    })
                    .collect();
                cols.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                let _ = write!(out, "layer {l} head {h}:");
                for (j, w) in cols.into_iter().take(k) {
                    let label = labels.get(j).map_or("?", String::as_str);
                    let _ = write!(out, " {label}{j}={w:.4}");
                }
                out.push('\n');
            }
        }
        out
    }
}

fn header(rec: &AttentionRecord, term: &str) -> String {
    format!(
        "MATATTN term={term} layers={} heads={} n={} lambda_a={} lambda_d={} lambda_g={} dtype=f32le order=layer,head,row,col\n",
        rec.n_layers(),
        rec.n_heads(),
        rec.n,
        rec.lambdas[0],
        rec.lambdas[1],
        rec.lambdas[2]
    )
}

fn write_term(path: &Path, head: &str, values: impl Iterator<Item = f64>) -> io::Result<()> {
    let mut bytes = head.as_bytes().to_vec();
    for v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)
}

/// Writes `<stem>.{composite,softmax,distance,adjacency}.attn`. Every file
/// holds `layers × heads × n × n` values; the distance and adjacency terms
/// are repeated per head so the files line up.
pub fn write_attention_dump(rec: &AttentionRecord, dir: &Path, stem: &str) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    let heads = || rec.layers.iter().flat_map(|l| l.iter());
    let terms: [(&str, Box<dyn Iterator<Item = f64> + '_>); 4] = [
        ("composite", Box::new(heads().flat_map(|h| h.composite.data().iter().copied()))),
        ("softmax", Box::new(heads().flat_map(|h| h.softmax.data().iter().copied()))),
        (
            "distance",
            Box::new(heads().flat_map(|_| rec.distance_term.data().iter().copied())),
        ),
        (
            "adjacency",
            Box::new(heads().flat_map(|_| rec.adjacency_term.data().iter().copied())),
        ),
    ];
    for (term, values) in terms {
        let path = dir.join(format!("{stem}.{term}.attn"));
        write_term(&path, &header(rec, term), values)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Parsed dump file: header fields and the flat payload.
#[derive(Debug, Clone)]
pub struct AttentionDump {
    pub term: String,
    pub layers: usize,
    pub heads: usize,
    pub n: usize,
    pub lambdas: [f64; 3],
    pub values: Vec<f32>,
}

impl AttentionDump {
    pub fn read(path: &Path) -> io::Result<AttentionDump> {
        let bytes = fs::read(path)?;
        let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header"))?;
        let head = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not UTF-8"))?;
        let mut fields = head.split_whitespace();
        if fields.next() != Some("MATATTN") {
            return Err(bad("not an attention dump"));
        }
        let mut dump = AttentionDump {
            term: String::new(),
            layers: 0,
            heads: 0,
            n: 0,
            lambdas: [0.0; 3],
            values: Vec::new(),
        };
        for f in fields {
            let (k, v) = f.split_once('=').ok_or_else(|| bad("malformed header field"))?;
            let num = || v.parse::<f64>().map_err(|_| bad("bad number in header"));
            match k {
                "term" => dump.term = v.to_string(),
                "layers" => dump.layers = num()? as usize,
                "heads" => dump.heads = num()? as usize,
                "n" => dump.n = num()? as usize,
                "lambda_a" => dump.lambdas[0] = num()?,
                "lambda_d" => dump.lambdas[1] = num()?,
                "lambda_g" => dump.lambdas[2] = num()?,
                _ => {}
            }
        }
        let payload = &bytes[nl + 1..];
        let expected = dump.layers * dump.heads * dump.n * dump.n * 4;
        if payload.len() != expected {
            return Err(bad("payload size does not match the header"));
        }
        dump.values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(dump)
    }

    pub fn at(&self, layer: usize, head: usize, i: usize, j: usize) -> f32 {
        self.values[((layer * self.heads + head) * self.n + i) * self.n + j]
    }
}
