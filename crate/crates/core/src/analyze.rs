//! Evaluation metrics and per-head attention statistics.

use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::chem::{match_pattern, Molecule, PatternId};
use crate::model::AttentionRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyzeError {
    #[error("no values to evaluate")]
    Empty,
    #[error("{0} predictions for {1} labels")]
    Length(usize, usize),
    #[error("ROC AUC is undefined when only one class is present")]
    SingleClass,
    #[error("labels for ROC AUC must be 0 or 1, got {0}")]
    NotBinary(f64),
    #[error("non-finite value in metric input")]
    NonFinite,
    #[error("molecule {index}: {detail}")]
    Misaligned { index: usize, detail: String },
}

fn check(preds: &[f64], labels: &[f64]) -> Result<(), AnalyzeError> {
    if preds.len() != labels.len() {
        return Err(AnalyzeError::Length(preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(AnalyzeError::Empty);
    }
    if preds.iter().chain(labels).any(|v| !v.is_finite()) {
        return Err(AnalyzeError::NonFinite);
    }
    Ok(())
}

pub fn rmse(preds: &[f64], labels: &[f64]) -> Result<f64, AnalyzeError> {
    check(preds, labels)?;
    let ss: f64 = preds.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok((ss / preds.len() as f64).sqrt())
}

/// 1-based ranks with ties sharing their mean rank, plus the tie group sizes.
fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        ties.push(j - i);
        i = j;
    }
    (ranks, ties)
}

/// Mann–Whitney form of the ROC AUC; tied scores count one half.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Result<f64, AnalyzeError> {
    check(scores, labels)?;
    if let Some(&y) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(AnalyzeError::NotBinary(y));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(AnalyzeError::SingleClass);
    }
    let (ranks, _) = midranks(scores);
    let r_pos: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == 1.0).map(|(r, _)| r).sum();
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((r_pos - p * (p + 1.0) / 2.0) / (p * q))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KruskalWallis {
    pub h: f64,
    /// Upper tail of χ² with one degree of freedom.
    pub p: f64,
}

/// Two-group Kruskal–Wallis H with tie correction.
pub fn kruskal_wallis(a: &[f64], b: &[f64]) -> Result<KruskalWallis, AnalyzeError> {
    if a.is_empty() || b.is_empty() {
        return Err(AnalyzeError::Empty);
    }
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    if all.iter().any(|v| !v.is_finite()) {
        return Err(AnalyzeError::NonFinite);
    }
    let n = all.len() as f64;
    let (ranks, ties) = midranks(&all);
    let correction = 1.0 - ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * n * n - n);
    if correction <= 0.0 {
        return Ok(KruskalWallis { h: 0.0, p: 1.0 });
    }
    let centre = (n + 1.0) / 2.0;
    let group = |rs: &[f64]| {
        let m = rs.len() as f64;
        let mean = rs.iter().sum::<f64>() / m;
        m * (mean - centre) * (mean - centre)
    };
    let h = 12.0 / (n * (n + 1.0)) * (group(&ranks[..a.len()]) + group(&ranks[a.len()..])) / correction;
    let chi = ChiSquared::new(1.0).expect("one degree of freedom");
    Ok(KruskalWallis { h, p: chi.sf(h) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadStats {
    pub layer: usize,
    pub head: usize,
    pub pattern: PatternId,
    pub mu_plus: f64,
    pub sigma_plus: f64,
    pub mu_minus: f64,
    pub sigma_minus: f64,
    /// `None` when a group is empty.
    pub kruskal: Option<KruskalWallis>,
    pub n_plus: usize,
    pub n_minus: usize,
}

/// Mean and population standard deviation; (0, 0) for an empty slice.
fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

/// Column means of the composite matrix of (`layer`, `head`) over the real
/// atom rows `0..n_atoms`, one score per real atom.
pub fn column_scores(rec: &AttentionRecord, layer: usize, head: usize, n_atoms: usize) -> Vec<f64> {
    let m = &rec.layers[layer][head].composite;
    (0..n_atoms)
        .map(|j| (0..n_atoms).map(|i| m.at(i, j)).sum::<f64>() / n_atoms as f64)
        .collect()
}

/// Pools column-mean scores of matching and non-matching atoms across the
/// dataset for every (layer, head). Dummy and padding nodes take part in
/// neither group nor the row average.
pub fn attention_stats(records: &[AttentionRecord], molecules: &[Molecule], pattern: PatternId) -> Result<Vec<HeadStats>, AnalyzeError> {
    if records.len() != molecules.len() {
        return Err(AnalyzeError::Length(records.len(), molecules.len()));
    }
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    let (layers, heads) = (first.n_layers(), first.n_heads());
    for (index, (rec, mol)) in records.iter().zip(molecules).enumerate() {
        let misaligned = |detail: String| AnalyzeError::Misaligned { index, detail };
        if rec.n_layers() != layers || rec.layers.iter().any(|l| l.len() != heads) {
            return Err(misaligned("layer/head count differs from the first record".into()));
        }
        if rec.n < mol.atom_count() {
            return Err(misaligned(format!("{} attention rows for {} atoms", rec.n, mol.atom_count())));
        }
    }
    let matches: Vec<_> = molecules.iter().map(|m| match_pattern(m, pattern)).collect();
    let mut out = Vec::with_capacity(layers * heads);
    for layer in 0..layers {
        for head in 0..heads {
            let (mut plus, mut minus) = (Vec::new(), Vec::new());
            for ((rec, mol), hits) in records.iter().zip(molecules).zip(&matches) {
                for (j, s) in column_scores(rec, layer, head, mol.atom_count()).into_iter().enumerate() {
                    if hits.contains(&j) {
                        plus.push(s);
                    } else {
                        minus.push(s);
                    }
                }
            }
            let (mu_plus, sigma_plus) = mean_std(&plus);
            let (mu_minus, sigma_minus) = mean_std(&minus);
            out.push(HeadStats {
                layer,
                head,
                pattern,
                mu_plus,
                sigma_plus,
                mu_minus,
                sigma_minus,
                kruskal: kruskal_wallis(&plus, &minus).ok(),
                n_plus: plus.len(),
                n_minus: minus.len(),
            });
        }
    }
    Ok(out)
}

/// Tab-separated table, one row per head; empty H and p mark a pattern
/// with no matches.
pub fn stats_tsv(stats: &[HeadStats]) -> String {
    let mut out = String::from("layer\thead\tpattern\tmu_plus\tsigma_plus\tmu_minus\tsigma_minus\tH\tp\tn_plus\tn_minus\n");
    for s in stats {
        let (h, p) = s.kruskal.map_or((String::new(), String::new()), |k| (k.h.to_string(), k.p.to_string()));
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            s.layer,
            s.head,
            s.pattern.smarts(),
            s.mu_plus,
            s.sigma_plus,
            s.mu_minus,
            s.sigma_minus,
            h,
            p,
            s.n_plus,
            s.n_minus
        ));
    }
    out
}
