//! Representation-rank diagnostics and NLL tracking across training stages.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use tinylm::{output_embeddings, Checkpoint, HiddenTap, ModelConfig};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::training::{mean_nll, train_windows, TrainSettings};

/// Smoothing added to the normalised singular values inside the entropy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum Smoothing {
    /// Zero-probability terms contribute nothing.
    #[default]
    None,
    /// `-Σ p log(p + eps)`.
    Literal(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankMeReport {
    pub rows: usize,
    pub cols: usize,
    /// Descending; numerically-zero values are reported as 0.
    pub singular_values: Vec<f64>,
    pub score: f64,
}

/// Effective rank `exp(-Σ p_k log p_k)` of a row-major `rows × cols`
/// matrix, with `p_k = σ_k / Σσ`. Singular values come from the
/// eigenvalues of the smaller Gram matrix.
pub fn rankme(z: &[f64], rows: usize, cols: usize, smoothing: Smoothing) -> Result<RankMeReport> {
    if rows == 0 || cols == 0 || z.len() != rows * cols {
        return Err(Error::Invalid(format!("rankme input of length {} is not {rows}x{cols}", z.len())));
    }
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteMatrix { row: i / cols, col: i % cols });
    }
    let m = DMatrix::from_row_slice(rows, cols, z);
    let gram = if rows <= cols { &m * m.transpose() } else { m.transpose() * &m };
    let eig = SymmetricEigen::new(gram);
    let mut lambdas: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    lambdas.sort_by(|a, b| b.total_cmp(a));
    let cutoff = lambdas.first().copied().unwrap_or(0.0) * rows.max(cols) as f64 * 4.0 * f64::EPSILON;
    let singular_values: Vec<f64> = lambdas.iter().map(|&l| if l <= cutoff { 0.0 } else { l.sqrt() }).collect();
    let total: f64 = singular_values.iter().sum();
    if total == 0.0 {
        return Ok(RankMeReport { rows, cols, singular_values, score: 0.0 });
    }
    let entropy: f64 = singular_values
        .iter()
        .map(|&s| s / total)
        .map(|p| match smoothing {
            Smoothing::None if p == 0.0 => 0.0,
            Smoothing::None => -p * p.ln(),
            Smoothing::Literal(eps) => -p * (p + eps).ln(),
        })
        .sum();
    Ok(RankMeReport { rows, cols, singular_values, score: entropy.exp() })
}

/// RankMe over the hidden states of every position of every sample.
pub fn rankme_checkpoint(ckpt: &Checkpoint, samples: &[Vec<u32>], tap: HiddenTap, smoothing: Smoothing) -> Result<RankMeReport> {
    let mut z = Vec::new();
    for s in samples.iter().filter(|s| !s.is_empty()) {
        z.extend(output_embeddings(ckpt, &[s.as_slice()], tap)?);
    }
    let cols = ckpt.config.dim;
    rankme(&z, z.len() / cols, cols, smoothing)
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n < 2 {
        return None;
    }
    let (ma, mb) = (a[..n].iter().sum::<f64>() / n as f64, b[..n].iter().sum::<f64>() / n as f64);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (x, y) = (a[i] - ma, b[i] - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Spearman rank correlation with ties given their average rank.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub learning_rates: Vec<f64>,
    pub pretrain: TrainSettings,
    pub pretrain_steps: usize,
    pub midtrain: TrainSettings,
    pub midtrain_steps: usize,
    pub smoothing: Smoothing,
    pub tap: HiddenTap,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            learning_rates: vec![3e-4, 1e-3, 3e-3, 1e-2],
            pretrain: TrainSettings::default(),
            pretrain_steps: 200,
            midtrain: TrainSettings::default(),
            midtrain_steps: 100,
            smoothing: Smoothing::None,
            tap: HiddenTap::FinalNorm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub learning_rate: f64,
    pub rankme: f64,
    pub probe_nll_pretrained: f64,
    pub probe_nll_midtrained: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Spearman between pretrained RankMe and mid-trained `-probe NLL`,
    /// over runs that did not diverge.
    pub spearman: Option<f64>,
}

/// For each pretraining learning rate: pretrain from a shared init,
/// measure RankMe on the probe batch, mid-train with fixed settings, and
/// measure probe NLL.
pub fn lr_sweep_correlation(
    model: &ModelConfig,
    pretrain_windows: &[Vec<u32>],
    midtrain_windows: &[Vec<u32>],
    probe_batch: &[Vec<u32>],
    cfg: &SweepConfig,
    seed: u64,
) -> Result<SweepTable> {
    let init = Checkpoint::init(model.clone(), derive_seed(seed, "sweep/init"))?;
    let mut rows = Vec::new();
    for &lr in &cfg.learning_rates {
        let mut settings = cfg.pretrain.clone();
        settings.optim.schedule.peak_lr = lr;
        let row = match train_windows(&init, pretrain_windows, &settings, cfg.pretrain_steps, &Default::default(), None) {
            Ok(pre) => {
                let rank = rankme_checkpoint(&pre.final_checkpoint, probe_batch, cfg.tap, cfg.smoothing);
                let mid = train_windows(&pre.final_checkpoint, midtrain_windows, &cfg.midtrain, cfg.midtrain_steps, &Default::default(), None);
                match (rank, mid) {
                    (Ok(rank), Ok(mid)) => {
                        let before = mean_nll(&pre.final_checkpoint, probe_batch)?;
                        let after = mean_nll(&mid.final_checkpoint, probe_batch)?;
                        SweepRow { learning_rate: lr, rankme: rank.score, probe_nll_pretrained: before, probe_nll_midtrained: after, diverged: !after.is_finite() }
                    }
                    _ => diverged_row(lr),
                }
            }
            Err(e) => {
                log::warn!("pretraining at lr {lr} failed: {e}");
                diverged_row(lr)
            }
        };
        log::info!("lr {lr}: rankme {:.3}, mid-trained probe nll {:.4}", row.rankme, row.probe_nll_midtrained);
        rows.push(row);
    }
    let ok: Vec<&SweepRow> = rows.iter().filter(|r| !r.diverged).collect();
    let spearman = spearman(&ok.iter().map(|r| r.rankme).collect::<Vec<_>>(), &ok.iter().map(|r| -r.probe_nll_midtrained).collect::<Vec<_>>());
    Ok(SweepTable { rows, spearman })
}

fn diverged_row(lr: f64) -> SweepRow {
    SweepRow { learning_rate: lr, rankme: f64::NAN, probe_nll_pretrained: f64::NAN, probe_nll_midtrained: f64::NAN, diverged: true }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllRow {
    pub stage: String,
    pub step: usize,
    pub set: String,
    pub nll: f64,
}

/// NLL of every evaluation set at every `(stage, checkpoint)`, ordered by
/// the stage order given and then by step.
pub fn nll_tracker(stages: &[(String, Vec<Checkpoint>)], eval_sets: &BTreeMap<String, Vec<Vec<u32>>>) -> Result<Vec<NllRow>> {
    let mut rows = Vec::new();
    for (stage, ckpts) in stages {
        let mut ckpts: Vec<&Checkpoint> = ckpts.iter().collect();
        ckpts.sort_by_key(|c| c.step);
        for ck in ckpts {
            for (set, docs) in eval_sets {
                rows.push(NllRow { stage: stage.clone(), step: ck.step, set: set.clone(), nll: mean_nll(ck, docs)? });
            }
        }
    }
    Ok(rows)
}

pub fn write_nll_rows(path: &Path, rows: &[NllRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep(path: &Path, table: &SweepTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &table.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rankme_of_identity_is_dimension() {
        let n = 5;
        let mut z = vec![0.0; n * n];
        for i in 0..n {
            z[i * n + i] = 2.0;
        }
        let r = rankme(&z, n, n, Smoothing::None).unwrap();
        assert!((r.score - n as f64).abs() < 1e-9);
    }

    #[test]
    fn rankme_of_rank_one_is_one() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [0.3, 0.7, -1.1];
        let z: Vec<f64> = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        let r = rankme(&z, 4, 3, Smoothing::None).unwrap();
        assert!((r.score - 1.0).abs() < 1e-9, "{}", r.score);
        let lit = rankme(&z, 4, 3, Smoothing::Literal(1e-7)).unwrap();
        assert!((lit.score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rankme_rejects_nan() {
        let z = [1.0, f64::NAN, 0.0, 1.0];
        assert!(matches!(rankme(&z, 2, 2, Smoothing::None), Err(Error::NonFiniteMatrix { row: 0, col: 1 })));
    }

    #[test]
    fn spearman_handles_ties_and_monotone_maps() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [10.0, 20.0, 25.0, 100.0];
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(average_ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
        assert!(spearman(&a, &[1.0; 4]).is_none());
    }
}
