//! Minibatch plumbing shared by the network trainers.

use crate::error::{Error, Result};
use crate::par;
use handcue_tensor::{Adam, AdamConfig, Gradients, Params, Rng, Stream};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Samples per gradient chunk; chunks are the unit of parallel work.
    pub chunk: usize,
    pub lr: f32,
    pub seed: u64,
    /// Multiply the learning rate by this factor for the final third.
    pub lr_decay: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            chunk: 4,
            lr: 1e-3,
            seed: 0,
            lr_decay: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Sum of per-chunk `(loss, grads)` in chunk order. Each chunk's loss is
/// already divided by the full batch size, so the sum is the batch mean.
pub fn batch_gradients<S: Sync>(
    batch: &[S],
    chunk: usize,
    f: impl Fn(&[S]) -> Result<(f64, Gradients)> + Sync + Send,
) -> Result<(f64, Gradients)> {
    let chunks: Vec<&[S]> = batch.chunks(chunk.max(1)).collect();
    let results = par::map(&chunks, |c| f(c));
    let mut total = 0.0;
    let mut grads = Gradients::default();
    for r in results {
        let (l, g) = r?;
        total += l;
        grads.accumulate(g)?;
    }
    Ok((total, grads))
}

/// Runs epochs of shuffled minibatches, calling `step_loss` for each batch
/// of sample indices. Returns the mean loss of every epoch.
pub fn run<F>(params: &mut Params, n_samples: usize, cfg: &TrainConfig, mut step_loss: F) -> Result<Vec<f64>>
where
    F: FnMut(&Params, &[usize]) -> Result<(f64, Gradients)>,
{
    if n_samples == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut adam = Adam::new(params, cfg.adam());
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut shuffle = Rng::new(cfg.seed, Stream::Shuffle);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let decay_from = cfg.epochs - cfg.epochs / 3;
    for epoch in 0..cfg.epochs {
        if epoch == decay_from && epoch > 0 {
            adam.cfg.lr *= cfg.lr_decay;
        }
        shuffle.shuffle(&mut order);
        let mut sum = 0.0;
        let mut count = 0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = step_loss(params, batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    seed: cfg.seed,
                    step,
                    reason: format!("loss {loss}"),
                });
            }
            adam.step(params, &grads).map_err(|e| Error::Diverged {
                seed: cfg.seed,
                step,
                reason: e.to_string(),
            })?;
            sum += loss;
            count += 1;
            step += 1;
        }
        history.push(sum / count as f64);
    }
    Ok(history)
}
