//! Online test-time adaptation and the first-order meta-learner that trains
//! its starting point.
//!
//! Online: clone θ, draw one batch of `K` frame pairs from the test video and
//! take `M` optimizer steps on the mean pair loss over that batch.
//!
//! Meta: per sampled training video, adapt a clone of θ with `m` plain SGD
//! steps, then take the gradient of the loss on a freshly drawn held-out
//! batch at the adapted weights. The per-video gradients are averaged and
//! applied to θ with Adam. Using the adapted-weight gradient in place of the
//! gradient through the inner loop is the first-order approximation.

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Video;
use crate::error::{Error, Result};
use crate::loss::{pair_loss, LossReport, LossWeights};
use crate::net::{BoundParams, Gradients, ParamSet, TrackerNet};
use crate::optim::{adam_step, sgd_step, AdamConfig, AdamState, Optimizer, OptimizerKind, SgdState};
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineConfig {
    pub steps_m: usize,
    pub pairs_k: usize,
    pub learning_rate: f64,
    pub optimizer_kind: OptimizerKind,
    /// Runtime value, not part of serialized configs.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            steps_m: 3,
            pairs_k: 24,
            learning_rate: 1e-4,
            optimizer_kind: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs_k == 0 {
            return Err(Error::Config("online.pairs_k must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("online.learning_rate must be > 0, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub videos_n: usize,
    /// Zero is accepted: the meta step then reduces to a plain step at θ.
    pub inner_steps_m: usize,
    pub pairs_k: usize,
    /// Inner SGD step size α.
    pub inner_lr: f64,
    /// Outer Adam step size β.
    pub meta_lr: f64,
    pub meta_steps: usize,
    /// Runtime value, not part of serialized configs.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            videos_n: 2,
            inner_steps_m: 5,
            pairs_k: 24,
            inner_lr: 1e-5,
            meta_lr: 1e-5,
            meta_steps: 6000,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.videos_n == 0 || self.pairs_k == 0 {
            return Err(Error::Config("meta.videos_n and meta.pairs_k must be >= 1".into()));
        }
        if !(self.inner_lr > 0.0 && self.meta_lr >= 0.0) {
            return Err(Error::Config(format!(
                "meta.inner_lr must be > 0 and meta.meta_lr >= 0, got {} / {}",
                self.inner_lr, self.meta_lr
            )));
        }
        Ok(())
    }
}

/// Ordered `(source, reference)` frame index pairs into one video.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairBatch {
    pub pairs: Vec<(usize, usize)>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// `k` ordered pairs of distinct frames, each uniform over the
/// `T·(T−1)` possibilities, drawn independently.
pub fn sample_pairs(video_len: usize, k: usize, rng: &mut impl Rng) -> Result<PairBatch> {
    if video_len < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 frames to sample pairs, got {video_len}")));
    }
    let pairs = (0..k)
        .map(|_| {
            let a = rng.random_range(0..video_len);
            // Skip over `a` so `b` is uniform on the other T-1 frames.
            let mut b = rng.random_range(0..video_len - 1);
            if b >= a {
                b += 1;
            }
            (a, b)
        })
        .collect();
    Ok(PairBatch { pairs })
}

fn check_batch(video: &Video, batch: &PairBatch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("pair batch is empty".into()));
    }
    let t = video.len();
    if let Some(&(a, b)) = batch.pairs.iter().find(|&&(a, b)| a >= t || b >= t || a == b) {
        return Err(Error::InvalidArgument(format!(
            "pair ({a}, {b}) invalid for video `{}` with {t} frames",
            video.id
        )));
    }
    Ok(())
}

fn pair_loss_and_grad(
    net: &TrackerNet,
    params: &ParamSet,
    video: &Video,
    (s, r): (usize, usize),
    w: LossWeights,
) -> Result<(LossReport, Gradients)> {
    let tape = Tape::new();
    let p = params.bind(&tape);
    let (loss, report) = pair_loss(net, &p, tape.constant(video.frame(s)), tape.constant(video.frame(r)), w)?;
    tape.backward(loss)?;
    Ok((report, p.grads(&tape)))
}

/// Mean loss over the batch and its gradient. Pairs are evaluated in
/// parallel; the reduction runs in batch order, so the result does not
/// depend on the thread count.
pub fn batch_loss_and_grad(
    net: &TrackerNet,
    params: &ParamSet,
    video: &Video,
    batch: &PairBatch,
    w: LossWeights,
) -> Result<(LossReport, Gradients)> {
    check_batch(video, batch)?;
    let items: Vec<(&Video, usize, usize)> = batch.pairs.iter().map(|&(s, r)| (video, s, r)).collect();
    mixed_batch_loss_and_grad(net, params, &items, w)
}

/// Like [`batch_loss_and_grad`] for pairs drawn from several videos.
pub fn mixed_batch_loss_and_grad(
    net: &TrackerNet,
    params: &ParamSet,
    items: &[(&Video, usize, usize)],
    w: LossWeights,
) -> Result<(LossReport, Gradients)> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("pair batch is empty".into()));
    }
    let per_pair: Vec<(LossReport, Gradients)> = items
        .par_iter()
        .map(|&(video, s, r)| pair_loss_and_grad(net, params, video, (s, r), w))
        .collect::<Result<_>>()?;
    let mut grad = params.zeros_like();
    for (_, g) in &per_pair {
        grad.axpy(1.0, g)?;
    }
    grad.scale_in_place(1.0 / items.len() as f64);
    let reports: Vec<LossReport> = per_pair.iter().map(|(r, _)| *r).collect();
    Ok((LossReport::mean(&reports), grad))
}

/// Mean loss over the batch without gradients.
pub fn batch_loss(net: &TrackerNet, params: &ParamSet, video: &Video, batch: &PairBatch, w: LossWeights) -> Result<LossReport> {
    check_batch(video, batch)?;
    let reports: Vec<LossReport> = batch
        .pairs
        .par_iter()
        .map(|&(s, r)| crate::loss::loss_total(net, params, &video.frame(s), &video.frame(r), w))
        .collect::<Result<_>>()?;
    Ok(LossReport::mean(&reports))
}

/// Adapted weights plus the batch they were fitted on.
#[derive(Clone, Debug)]
pub struct OnlineResult {
    pub params: ParamSet,
    pub batch: PairBatch,
    /// Batch loss before each step, in step order.
    pub step_losses: Vec<LossReport>,
}

/// Fits a copy of `base` to one video. `base` itself is never modified.
pub fn online_adapt(
    net: &TrackerNet,
    base: &ParamSet,
    video: &Video,
    cfg: &OnlineConfig,
    w: LossWeights,
) -> Result<OnlineResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = sample_pairs(video.len(), cfg.pairs_k, &mut rng)?;
    let mut params = base.clone();
    let mut opt = Optimizer::new(cfg.optimizer_kind, cfg.learning_rate)?;
    let mut step_losses = Vec::with_capacity(cfg.steps_m);
    for _ in 0..cfg.steps_m {
        let (report, grad) = batch_loss_and_grad(net, &params, video, &batch, w)?;
        opt.step(&mut params, &grad)?;
        step_losses.push(report);
    }
    Ok(OnlineResult {
        params,
        batch,
        step_losses,
    })
}

/// Inner loop for one training video: `m` SGD steps at α on a fresh batch,
/// then a second, independently drawn batch for the outer gradient.
pub fn meta_inner(
    net: &TrackerNet,
    theta: &ParamSet,
    video: &Video,
    cfg: &MetaConfig,
    w: LossWeights,
    rng: &mut impl Rng,
) -> Result<(ParamSet, PairBatch)> {
    let batch = sample_pairs(video.len(), cfg.pairs_k, rng)?;
    let sgd = SgdState::new(cfg.inner_lr)?;
    let mut theta_i = theta.clone();
    for _ in 0..cfg.inner_steps_m {
        let (_, grad) = batch_loss_and_grad(net, &theta_i, video, &batch, w)?;
        sgd_step(&mut theta_i, &grad, &sgd)?;
    }
    let heldout = sample_pairs(video.len(), cfg.pairs_k, rng)?;
    Ok((theta_i, heldout))
}

/// Held-out loss at the adapted weights and its gradient with respect to
/// those weights, used in place of the gradient with respect to θ.
pub fn meta_gradient(
    net: &TrackerNet,
    theta_i: &ParamSet,
    video: &Video,
    heldout: &PairBatch,
    w: LossWeights,
) -> Result<(LossReport, Gradients)> {
    batch_loss_and_grad(net, theta_i, video, heldout, w)
}

/// Gradient with respect to θ of `(1/N) Σ_i L_i`, recorded on one tape.
///
/// Each task's adapted weights enter as `θ + (θ′_i − θ)` with the offset held
/// constant, which is exactly the first-order treatment. This is the joint
/// counterpart of averaging [`meta_gradient`] results video by video.
pub fn joint_heldout_gradient(
    net: &TrackerNet,
    theta: &ParamSet,
    tasks: &[(&ParamSet, &Video, &PairBatch)],
    w: LossWeights,
) -> Result<(f64, Gradients)> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no tasks".into()));
    }
    let tape = Tape::new();
    let base = theta.bind(&tape);
    let mut total = None;
    for &(theta_i, video, batch) in tasks {
        check_batch(video, batch)?;
        if !theta_i.same_layout(theta) {
            return Err(Error::InvalidArgument("adapted weights do not match θ layout".into()));
        }
        let shifted = base
            .iter()
            .zip(theta_i.iter())
            .map(|((name, v), (_, adapted))| {
                let mut delta = adapted.clone();
                delta.axpy(-1.0, theta.get(name).expect("layout checked"));
                Ok((name.to_string(), v.add(tape.constant(delta))?))
            })
            .collect::<Result<Vec<_>>>()?;
        let p = BoundParams::from_vars(shifted);
        let mut task_sum = None;
        for &(s, r) in &batch.pairs {
            let (l, _) = pair_loss(net, &p, tape.constant(video.frame(s)), tape.constant(video.frame(r)), w)?;
            task_sum = Some(match task_sum {
                None => l,
                Some(acc) => l.add(acc)?,
            });
        }
        let task = task_sum.expect("batch checked non-empty").scale(1.0 / batch.len() as f64);
        total = Some(match total {
            None => task,
            Some(acc) => task.add(acc)?,
        });
    }
    let total = total.expect("tasks non-empty").scale(1.0 / tasks.len() as f64);
    tape.backward(total)?;
    Ok((total.item(), base.grads(&tape)))
}

/// Per-step record of the meta-learner.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaProgress {
    pub step: usize,
    /// Held-out report averaged over the step's videos.
    pub heldout: LossReport,
}

/// One outer update of θ from `videos.len() == cfg.videos_n` videos.
///
/// Each video gets its own generator seeded from `rng`, so the draws for one
/// video do not depend on how many the others consumed.
pub fn meta_train_step(
    net: &TrackerNet,
    theta: &mut ParamSet,
    videos: &[&Video],
    cfg: &MetaConfig,
    w: LossWeights,
    meta_opt: &mut AdamState,
    rng: &mut impl RngCore,
) -> Result<LossReport> {
    if videos.len() != cfg.videos_n {
        return Err(Error::InvalidArgument(format!(
            "meta step expects {} videos, got {}",
            cfg.videos_n,
            videos.len()
        )));
    }
    let seeds: Vec<u64> = videos.iter().map(|_| rng.next_u64()).collect();
    let mut sum = theta.zeros_like();
    let mut reports = Vec::with_capacity(videos.len());
    for (video, seed) in videos.iter().zip(seeds) {
        let mut video_rng = ChaCha8Rng::seed_from_u64(seed);
        let (theta_i, heldout) = meta_inner(net, theta, video, cfg, w, &mut video_rng)?;
        let (report, grad) = meta_gradient(net, &theta_i, video, &heldout, w)?;
        sum.axpy(1.0, &grad)?;
        reports.push(report);
    }
    sum.scale_in_place(1.0 / videos.len() as f64);
    adam_step(theta, &sum, meta_opt)?;
    Ok(LossReport::mean(&reports))
}

/// Runs `cfg.meta_steps` outer updates from `theta`, drawing `cfg.videos_n`
/// distinct videos per step (with replacement if the dataset is smaller).
/// `progress` is called once per completed step.
pub fn meta_train(
    net: &TrackerNet,
    theta: &ParamSet,
    dataset: &[Video],
    cfg: &MetaConfig,
    w: LossWeights,
    mut progress: impl FnMut(&MetaProgress) -> Result<()>,
) -> Result<ParamSet> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("meta-training dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut meta_opt = AdamState::new(AdamConfig::with_lr(cfg.meta_lr))?;
    let mut theta = theta.clone();
    for step in 0..cfg.meta_steps {
        let picks: Vec<usize> = if dataset.len() >= cfg.videos_n {
            index::sample(&mut rng, dataset.len(), cfg.videos_n).into_vec()
        } else {
            (0..cfg.videos_n).map(|_| rng.random_range(0..dataset.len())).collect()
        };
        let videos: Vec<&Video> = picks.iter().map(|&i| &dataset[i]).collect();
        let heldout = meta_train_step(net, &mut theta, &videos, cfg, w, &mut meta_opt, &mut rng)?;
        progress(&MetaProgress { step, heldout })?;
    }
    Ok(theta)
}
