//! Thin layer over the tiny model: packing a drawn stream into windows,
//! running a fixed number of steps while capturing checkpoints, and
//! token-weighted evaluation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use tinylm::{pack_windows, Checkpoint, OptimConfig, Trainer};

use crate::corpus::StreamItem;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Token placed between documents when packing.
    pub separator: Option<u32>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { batch_size: 8, optim: OptimConfig::default(), separator: Some(b'\n' as u32) }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Captured checkpoints in step order.
    pub checkpoints: Vec<Checkpoint>,
    pub losses: Vec<f64>,
    pub final_checkpoint: Checkpoint,
}

/// `t` step indices (1-based, counted after the update) evenly spaced over
/// `steps`, always ending at `steps`.
pub fn evenly_spaced(steps: usize, t: usize) -> Vec<usize> {
    let t = t.min(steps).max(1);
    let mut out: Vec<usize> = (1..=t).map(|k| ((k * steps) as f64 / t as f64).round() as usize).collect();
    out.dedup();
    out
}

/// Packs stream documents into `seq_len + 1` windows.
pub fn stream_windows(stream: &[StreamItem<'_>], seq_len: usize, separator: Option<u32>) -> Vec<Vec<u32>> {
    let docs: Vec<&[u32]> = stream.iter().map(|s| s.sample.tokens.as_slice()).collect();
    pack_windows(&docs, seq_len, separator)
}

/// Number of full batches a window count supports (at least one).
pub fn steps_for(windows: usize, batch_size: usize) -> usize {
    (windows / batch_size.max(1)).max(1)
}

/// Runs `steps` optimizer steps over `windows` (wrapping around if needed),
/// capturing a checkpoint after every step listed in `capture`. With a
/// teacher, each step minimises KL to it instead of cross-entropy.
pub fn train_windows(
    init: &Checkpoint,
    windows: &[Vec<u32>],
    settings: &TrainSettings,
    steps: usize,
    capture: &BTreeSet<usize>,
    teacher: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    if windows.is_empty() {
        return Err(Error::Model(tinylm::Error::EmptyStream));
    }
    let b = settings.batch_size.max(1);
    let mut trainer = Trainer::new(init, settings.optim.clone(), steps)?;
    let mut checkpoints = Vec::new();
    let mut losses = Vec::with_capacity(steps);
    for s in 0..steps {
        let batch: Vec<&[u32]> = (0..b.min(windows.len())).map(|j| windows[(s * b + j) % windows.len()].as_slice()).collect();
        let loss = match teacher {
            None => trainer.step(&batch)?,
            Some(t) => trainer.distill_step(t, &batch)?,
        };
        losses.push(loss);
        if capture.contains(&(s + 1)) {
            checkpoints.push(trainer.checkpoint());
        }
    }
    Ok(TrainOutcome { checkpoints, losses, final_checkpoint: trainer.checkpoint() })
}

/// Token-weighted mean next-token NLL over a set of token sequences
/// (sequences shorter than two tokens are skipped).
pub fn mean_nll(ckpt: &Checkpoint, docs: &[Vec<u32>]) -> Result<f64> {
    let model = ckpt.model()?;
    let usable: Vec<&[u32]> = docs.iter().filter(|d| d.len() >= 2).map(Vec::as_slice).collect();
    if usable.is_empty() {
        return Err(Error::Invalid("evaluation set has no sequence of two or more tokens".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in usable.chunks(32) {
        let nll = model.nll(&ckpt.params, chunk)?;
        for (seq, v) in chunk.iter().zip(nll) {
            total += v * (seq.len() - 1) as f64;
            count += seq.len() - 1;
        }
    }
    Ok(total / count as f64)
}
