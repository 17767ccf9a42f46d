//! One agent's local training pass.
//!
//! Plain minibatch SGD: per epoch the shard order is reshuffled from the
//! agent's stream, split into batches of `batch_size` (final partial batch
//! kept), and each batch applies one gradient step. The global parameters
//! are never mutated; the updated set is returned.

use crate::error::{Error, Result};
use crate::model::{loss_and_grad, ModelSpec};
use crate::params::{axpy_combine, ParamSet};
use crate::scenario::Dataset;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    /// Local epochs E per round.
    #[serde(default = "default_epochs")]
    pub local_epochs: usize,
    /// Minibatch size B.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// SGD step size.
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
}

fn default_epochs() -> usize {
    1
}
fn default_batch() -> usize {
    128
}
fn default_lr() -> f64 {
    0.05
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            local_epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::Domain("local_epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Domain(format!(
                "learning_rate must be a finite positive real, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Run the local pass and return the agent's updated parameters.
pub fn client_update(
    spec: &ModelSpec,
    global: &ParamSet,
    shard: &Dataset,
    cfg: &TrainerConfig,
    rng: &mut ChaCha12Rng,
) -> Result<ParamSet> {
    if shard.is_empty() {
        return Err(Error::Scenario("cannot train on an empty shard".into()));
    }
    if cfg.local_epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Domain("local_epochs and batch_size must be at least 1".into()));
    }
    let mut params = global.clone();
    let mut indices: Vec<usize> = (0..shard.len()).collect();
    for _ in 0..cfg.local_epochs {
        indices.shuffle(rng);
        for chunk in indices.chunks(cfg.batch_size) {
            let batch = shard.batch(chunk)?;
            let (_, grad) = loss_and_grad(spec, &params, &batch)?;
            params = axpy_combine(&params, &[(-cfg.learning_rate, &grad)])?;
        }
    }
    Ok(params)
}
