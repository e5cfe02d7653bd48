//! A small decoder-only language model with exact analytic gradients in
//! double precision, an Adam/SGD training loop, distillation and a
//! content-addressed checkpoint format.

mod checkpoint;
mod config;
mod error;
mod layout;
mod linalg;
mod model;
mod optim;
mod train;

pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use error::{Error, Result};
pub use linalg::dot;
pub use model::{HiddenTap, Model, Reduction};
pub use optim::{LrSchedule, OptimConfig, OptimState, OptimizerKind};
pub use train::{pack_windows, train, train_distill, TrainConfig, TrainRun, Trainer};

/// Mean next-token NLL of one sample under a checkpoint.
pub fn forward_nll(ckpt: &Checkpoint, sample: &[u32]) -> Result<f64> {
    Ok(ckpt.model()?.nll(&ckpt.params, &[sample])?[0])
}

/// Gradient of [`forward_nll`] with respect to the parameters.
pub fn grad_nll(ckpt: &Checkpoint, sample: &[u32]) -> Result<Vec<f64>> {
    Ok(ckpt.model()?.loss_grad(&ckpt.params, &[sample], Reduction::SequenceMean)?.1)
}

/// Final hidden states for every position of every sample, stacked row-wise
/// (`positions × dim`, row-major).
pub fn output_embeddings(ckpt: &Checkpoint, samples: &[&[u32]], tap: HiddenTap) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptyStream);
    }
    ckpt.model()?.hidden_states(&ckpt.params, samples, tap)
}
