use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{Model, Reduction};
use crate::optim::{OptimConfig, OptimState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Emit a checkpoint every this many steps (the final step always emits).
    pub checkpoint_every: usize,
    /// Token inserted between documents when packing the stream.
    pub separator: Option<u32>,
    /// Upper bound on optimizer steps; by default one pass over the stream.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            optim: OptimConfig::default(),
            checkpoint_every: 50,
            separator: Some(b'\n' as u32),
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoints: Vec<Checkpoint>,
    /// Training loss of every step.
    pub losses: Vec<f64>,
}

impl TrainRun {
    pub fn last(&self) -> &Checkpoint {
        self.checkpoints.last().expect("a run emits at least one checkpoint")
    }
}

/// Concatenates documents (with an optional separator) and cuts the result
/// into non-overlapping windows of `seq_len + 1` tokens. A stream shorter
/// than one window yields a single short window.
pub fn pack_windows(stream: &[&[u32]], seq_len: usize, separator: Option<u32>) -> Vec<Vec<u32>> {
    let mut flat = Vec::new();
    for (i, doc) in stream.iter().enumerate() {
        if i > 0 {
            if let Some(sep) = separator {
                flat.push(sep);
            }
        }
        flat.extend_from_slice(doc);
    }
    let width = seq_len + 1;
    if flat.len() < width {
        return if flat.len() >= 2 { vec![flat] } else { Vec::new() };
    }
    flat.chunks_exact(width).map(<[u32]>::to_vec).collect()
}

/// A model plus optimizer state, advanced one batch at a time.
pub struct Trainer {
    model: Model,
    params: Vec<f64>,
    optim: OptimState,
    step: usize,
    rng_state: u64,
}

impl Trainer {
    pub fn new(init: &Checkpoint, optim: OptimConfig, total_steps: usize) -> Result<Self> {
        let model = init.model()?;
        let n = model.num_params();
        Ok(Self {
            model,
            params: init.params.clone(),
            optim: OptimState::new(optim, n, total_steps),
            step: init.step,
            rng_state: init.rng_state,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// One cross-entropy step; returns the batch loss before the update.
    pub fn step(&mut self, batch: &[&[u32]]) -> Result<f64> {
        let (loss, grad) = self.model.loss_grad(&self.params, batch, Reduction::TokenMean)?;
        self.apply(loss, &grad)?;
        Ok(loss)
    }

    /// One step on per-token `KL(teacher ‖ student)`; returns the KL before
    /// the update.
    pub fn distill_step(&mut self, teacher: &Checkpoint, batch: &[&[u32]]) -> Result<f64> {
        let tv = teacher.config.vocab_size;
        let sv = self.model.config().vocab_size;
        if tv != sv {
            return Err(Error::VocabMismatch { student: sv, teacher: tv });
        }
        let teacher_model = teacher.model()?;
        let target = teacher_model.batch_probs(&teacher.params, batch)?;
        let (kl, grad) = self.model.kl_grad(&self.params, batch, &target)?;
        self.apply(kl, &grad)?;
        Ok(kl)
    }

    fn apply(&mut self, loss: f64, grad: &[f64]) -> Result<()> {
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step: self.step, loss });
        }
        self.optim.apply(&mut self.params, grad);
        self.step += 1;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            params: self.params.clone(),
            config: self.model.config().clone(),
            rng_state: self.rng_state,
        }
    }
}

/// Cross-entropy training over a packed stream.
pub fn train(init: &Checkpoint, stream: &[&[u32]], cfg: &TrainConfig) -> Result<TrainRun> {
    run(init, None, stream, cfg)
}

/// Distillation from a fixed teacher over a packed stream.
pub fn train_distill(init: &Checkpoint, teacher: &Checkpoint, stream: &[&[u32]], cfg: &TrainConfig) -> Result<TrainRun> {
    run(init, Some(teacher), stream, cfg)
}

fn run(init: &Checkpoint, teacher: Option<&Checkpoint>, stream: &[&[u32]], cfg: &TrainConfig) -> Result<TrainRun> {
    let windows = pack_windows(stream, init.config.seq_len, cfg.separator);
    if windows.is_empty() {
        return Err(Error::EmptyStream);
    }
    let batch_size = cfg.batch_size.max(1);
    let mut steps = (windows.len() / batch_size).max(1);
    if let Some(cap) = cfg.max_steps {
        steps = steps.min(cap.max(1));
    }
    let every = cfg.checkpoint_every.max(1);
    let mut trainer = Trainer::new(init, cfg.optim.clone(), steps)?;
    let mut checkpoints = Vec::new();
    let mut losses = Vec::with_capacity(steps);
    for s in 0..steps {
        let lo = s * batch_size;
        let hi = (lo + batch_size).min(windows.len());
        let batch: Vec<&[u32]> = windows[lo..hi].iter().map(Vec::as_slice).collect();
        let loss = match teacher {
            None => trainer.step(&batch)?,
            Some(t) => trainer.distill_step(t, &batch)?,
        };
        losses.push(loss);
        if (s + 1) % every == 0 || s + 1 == steps {
            checkpoints.push(trainer.checkpoint());
        }
    }
    Ok(TrainRun { checkpoints, losses })
}
