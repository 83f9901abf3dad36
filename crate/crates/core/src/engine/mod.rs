//! Optimization, training and sliding-window inference.

mod infer;
mod optim;
mod train;

pub use infer::{overlap_counts, predict_sliding, PatchModel};
pub use optim::{Adam, Plateau};
pub use train::{
    dice_on, format_log, log_header, split_validation, train, train_from, EpochLog, TrainConfig,
    TrainOutcome,
};

use crate::error::{Error, Result};

/// Runs `f` on a dedicated rayon pool with `workers` threads.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}
