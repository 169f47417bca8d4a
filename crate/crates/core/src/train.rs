//! Offline training of the tracker on a pool of videos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::mixed_batch_loss_and_grad;
use crate::data::Video;
use crate::error::{Error, Result};
use crate::loss::{LossReport, LossWeights};
use crate::net::{ParamSet, TrackerNet};
use crate::optim::{adam_step, AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Frame pairs per step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    /// Runtime value, not part of serialized configs.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 20,
            learning_rate: 1e-3,
            steps: 2000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "train.batch_size must be >= 1 and train.learning_rate > 0, got {} / {}",
                self.batch_size, self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainProgress {
    pub step: usize,
    /// Batch loss at the weights before this step.
    pub report: LossReport,
}

/// Adam on the mean pair loss. Each batch element picks a video uniformly,
/// then an ordered pair of distinct frames uniformly.
pub fn train(
    net: &TrackerNet,
    init: &ParamSet,
    videos: &[Video],
    cfg: &TrainConfig,
    w: LossWeights,
    mut progress: impl FnMut(&TrainProgress) -> Result<()>,
) -> Result<ParamSet> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamState::new(AdamConfig::with_lr(cfg.learning_rate))?;
    let mut params = init.clone();
    for step in 0..cfg.steps {
        let items: Vec<(&Video, usize, usize)> = (0..cfg.batch_size)
            .map(|_| {
                let v = &videos[rng.random_range(0..videos.len())];
                let t = v.len();
                let a = rng.random_range(0..t);
                let b = (a + 1 + rng.random_range(0..t - 1)) % t;
                (v, a, b)
            })
            .collect();
        let (report, grad) = mixed_batch_loss_and_grad(net, &params, &items, w)?;
        adam_step(&mut params, &grad, &mut opt)?;
        progress(&TrainProgress { step, report })?;
    }
    Ok(params)
}
