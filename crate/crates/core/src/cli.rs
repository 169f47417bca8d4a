//! Pipeline commands behind the `foal` binary: synthesise a dataset, train
//! the baseline, meta-train it, evaluate with or without online adaptation,
//! and run the gradient suite.
//!
//! Every random choice is seeded from `RunConfig::seed` through a fixed
//! stream per purpose, so a command's outputs depend only on (config, seed).
//! Reductions keep a fixed order, so the thread count does not change them.

use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{batch_loss, meta_train, online_adapt, sample_pairs, MetaConfig, OnlineConfig};
use crate::data::format::{read_checkpoint, write_checkpoint, write_mask, write_video};
use crate::data::{generate_phantom, preprocess, sample_params, Manifest, ManifestEntry, Population, Sample, Split, Video};
use crate::error::{Error, Result};
use crate::gradsuite;
use crate::loss::{LossReport, LossWeights};
use crate::metrics::{evaluate_video, fmt_f64, label_name, MetricsReport, LABELS};
use crate::net::{NetConfig, ParamSet, TrackerNet};
use crate::tensor::gradcheck::GradCheck;
use crate::train::{train, TrainConfig};

const STREAM_SYNTH: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_META: u64 = 4;
const STREAM_ONLINE: u64 = 5;
const STREAM_HELDOUT: u64 = 6;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BASELINE_CHECKPOINT: &str = "baseline.fckp";
pub const META_CHECKPOINT: &str = "meta.fckp";
pub const TRAIN_LOSS_CSV: &str = "train_loss.csv";
pub const META_PROGRESS_CSV: &str = "meta_progress.csv";

/// First output of a ChaCha8 stream keyed by `(master, stream)`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Phantom dataset size. Test-outside videos come from the shifted population,
/// every other split from the training population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub frames: usize,
    pub baseline_train: usize,
    pub meta_train: usize,
    pub test_inside: usize,
    pub test_outside: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 9,
            baseline_train: 20,
            meta_train: 20,
            test_inside: 20,
            test_outside: 20,
        }
    }
}

impl SynthConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::BaselineTrain => self.baseline_train,
            Split::MetaTrain => self.meta_train,
            Split::TestInside => self.test_inside,
            Split::TestOutside => self.test_outside,
        }
    }
}

/// Defaults for flags that are not given on the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            out_dir: "runs".into(),
        }
    }
}

/// Everything a run depends on besides its input files.
///
/// The defaults are the desk-scale preset: 32×32 frames, 2000 baseline steps
/// and 300 meta steps, which finishes in well under half an hour on one core.
/// With 20x fewer meta steps than the library default, the meta step size is
/// raised 20x to 2e-4 so the outer optimiser's total step budget is unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub net: NetConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub online: OnlineConfig,
    pub meta: MetaConfig,
    pub synth: SynthConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            net: NetConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            online: OnlineConfig::default(),
            meta: MetaConfig {
                meta_steps: 300,
                meta_lr: 2e-4,
                ..MetaConfig::default()
            },
            synth: SynthConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.online.validate()?;
        self.meta.validate()?;
        let (h, w) = self.net.input_size;
        if h != w {
            return Err(Error::Config(format!("net.input_size must be square for phantoms, got {h}x{w}")));
        }
        if self.synth.frames < 2 {
            return Err(Error::Config(format!("synth.frames must be >= 2, got {}", self.synth.frames)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config is plain data");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    fn net(&self) -> Result<TrackerNet> {
        TrackerNet::new(self.net.clone())
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn finish_csv(mut wtr: csv::Writer<BufWriter<File>>, path: &Path) -> Result<()> {
    wtr.flush().map_err(|e| Error::io(path, e))
}

fn loss_fields(r: &LossReport) -> [String; 4] {
    [fmt_f64(r.total), fmt_f64(r.mse), fmt_f64(r.smooth), fmt_f64(r.consistency)]
}

fn check_videos(net: &TrackerNet, videos: &[Video]) -> Result<()> {
    let (h, w) = net.config().input_size;
    for v in videos {
        let (_, vh, vw) = v.dims();
        if (vh, vw) != (h, w) {
            return Err(Error::InvalidArgument(format!(
                "video `{}` is {vh}x{vw}, network expects {h}x{w}",
                v.id
            )));
        }
    }
    Ok(())
}

fn load_checkpoint_for(net: &TrackerNet, path: &Path) -> Result<ParamSet> {
    let params = read_checkpoint(path)?;
    let layout: Vec<(String, Vec<usize>)> = params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
    if layout != net.layout() {
        return Err(Error::Config(format!(
            "{}: checkpoint layout does not match the configured network",
            path.display()
        )));
    }
    Ok(params)
}

fn load_videos(manifest: &Manifest, split: Split) -> Result<Vec<Video>> {
    let videos: Vec<Video> = manifest.load_split(split)?.into_iter().map(|s| s.video).collect();
    if videos.is_empty() {
        return Err(Error::InvalidArgument(format!("split {split} is empty")));
    }
    Ok(videos)
}

/// Writes phantom videos, ED/ES masks and `manifest.json` under `out_dir`.
pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let size = cfg.net.input_size.0;
    let frames = cfg.synth.frames;
    let master = derive_seed(cfg.seed, STREAM_SYNTH);
    create_dir(&out_dir.join("videos"))?;
    create_dir(&out_dir.join("masks"))?;
    let mut entries = Vec::new();
    for (si, &split) in Split::ALL.iter().enumerate() {
        let population = match split {
            Split::TestOutside => Population::Outside,
            _ => Population::Inside,
        };
        for i in 0..cfg.synth.count(split) {
            let id = format!("{split}_{i:03}");
            let params = sample_params(population, size, frames, derive_seed(master, ((si as u64) << 32) | i as u64));
            let phantom = generate_phantom(&params)?;
            let mut video = preprocess(&phantom.video, (size, size))?.video;
            video.id = id.clone();
            let es = params.es_frame();
            let video_path = format!("videos/{id}.fvid");
            write_video(&out_dir.join(&video_path), &video)?;
            let mut mask_paths = Vec::new();
            for (tag, f) in [("ed", 0), ("es", es)] {
                let rel = format!("masks/{id}_{tag}.fmsk");
                write_mask(&out_dir.join(&rel), &phantom.masks[f])?;
                mask_paths.push(rel);
            }
            entries.push(ManifestEntry {
                id,
                video_path,
                mask_paths,
                mask_frames: vec![0, es],
                category: population.tag().to_string(),
                split,
            });
        }
    }
    let manifest = Manifest::new(entries, out_dir)?;
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Trains the baseline on `baseline_train`. Writes the checkpoint and a
/// per-step loss CSV.
pub fn cmd_train(cfg: &RunConfig, manifest: &Manifest, out_dir: &Path) -> Result<ParamSet> {
    cfg.validate()?;
    let net = cfg.net()?;
    let videos = load_videos(manifest, Split::BaselineTrain)?;
    check_videos(&net, &videos)?;
    create_dir(out_dir)?;
    let init = net.init_params(derive_seed(cfg.seed, STREAM_INIT));
    let tcfg = TrainConfig {
        seed: derive_seed(cfg.seed, STREAM_TRAIN),
        ..cfg.train.clone()
    };
    let csv_path = out_dir.join(TRAIN_LOSS_CSV);
    let mut wtr = csv_writer(&csv_path)?;
    wtr.write_record(["step", "total", "mse", "smooth", "consistency"])?;
    let params = train(&net, &init, &videos, &tcfg, cfg.loss, |p| {
        let [a, b, c, d] = loss_fields(&p.report);
        wtr.write_record([p.step.to_string(), a, b, c, d])?;
        Ok(())
    })?;
    finish_csv(wtr, &csv_path)?;
    write_checkpoint(&out_dir.join(BASELINE_CHECKPOINT), &params)?;
    Ok(params)
}

/// Meta-trains from `base_checkpoint` on `meta_train`. Writes the checkpoint
/// and the held-out loss of every meta step.
pub fn cmd_meta_train(cfg: &RunConfig, manifest: &Manifest, base_checkpoint: &Path, out_dir: &Path) -> Result<ParamSet> {
    cfg.validate()?;
    let net = cfg.net()?;
    let base = load_checkpoint_for(&net, base_checkpoint)?;
    let videos = load_videos(manifest, Split::MetaTrain)?;
    check_videos(&net, &videos)?;
    create_dir(out_dir)?;
    let mcfg = MetaConfig {
        seed: derive_seed(cfg.seed, STREAM_META),
        ..cfg.meta.clone()
    };
    let csv_path = out_dir.join(META_PROGRESS_CSV);
    let mut wtr = csv_writer(&csv_path)?;
    wtr.write_record(["step", "heldout_total", "heldout_mse", "heldout_smooth", "heldout_consistency"])?;
    let params = meta_train(&net, &base, &videos, &mcfg, cfg.loss, |p| {
        let [a, b, c, d] = loss_fields(&p.heldout);
        wtr.write_record([p.step.to_string(), a, b, c, d])?;
        Ok(())
    })?;
    finish_csv(wtr, &csv_path)?;
    write_checkpoint(&out_dir.join(META_CHECKPOINT), &params)?;
    Ok(params)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptMode {
    None,
    Foal,
}

impl AdaptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AdaptMode::None => "none",
            AdaptMode::Foal => "foal",
        }
    }
}

impl fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AdaptMode::None),
            "foal" => Ok(AdaptMode::Foal),
            _ => Err(Error::InvalidArgument(format!("--adapt must be `none` or `foal`, got `{s}`"))),
        }
    }
}

/// Held-out pair loss of one video before and after adaptation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeldoutLoss {
    pub before: f64,
    pub after: f64,
}

#[derive(Clone, Debug)]
pub struct EvalRow {
    pub id: String,
    pub split: Split,
    pub report: MetricsReport,
    /// Wall time of online adaptation, zero without adaptation.
    pub adapt_seconds: f64,
    pub heldout: Option<HeldoutLoss>,
}

/// Mean and sample standard deviation over videos.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// `std` uses the n−1 denominator and is 0 for a single value.
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len();
        if n == 0 {
            return MeanStd { n, mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanStd { n, mean, std }
    }
}

/// One summary row: a split and a label, or `label == None` for the mean
/// over the three labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub split: Split,
    pub label: Option<u8>,
    pub dice: MeanStd,
    /// Over the videos where both contours exist.
    pub hausdorff_mm: MeanStd,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub mode: AdaptMode,
    /// Manifest order.
    pub rows: Vec<EvalRow>,
    pub summary: Vec<SummaryRow>,
}

impl EvalOutcome {
    pub fn summary_for(&self, split: Split, label: Option<u8>) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.split == split && r.label == label)
    }

    pub fn adapt_time(&self) -> MeanStd {
        MeanStd::of(&self.rows.iter().map(|r| r.adapt_seconds).collect::<Vec<_>>())
    }

    pub fn metrics_file(&self) -> String {
        format!("eval_{}.csv", self.mode)
    }

    pub fn summary_file(&self) -> String {
        format!("eval_{}_summary.csv", self.mode)
    }

    pub fn heldout_file(&self) -> String {
        format!("eval_{}_heldout.csv", self.mode)
    }
}

fn summarise(rows: &[EvalRow]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for split in Split::ALL {
        let of_split: Vec<&EvalRow> = rows.iter().filter(|r| r.split == split).collect();
        if of_split.is_empty() {
            continue;
        }
        for label in LABELS.iter().copied().map(Some).chain([None]) {
            let (dice, hd): (Vec<f64>, Vec<Option<f64>>) = of_split
                .iter()
                .map(|r| match label {
                    Some(l) => {
                        let m = r.report.get(l).expect("every label is reported");
                        (m.dice, m.hausdorff_mm)
                    }
                    None => {
                        let hd: Option<Vec<f64>> = r.report.labels.iter().map(|m| m.hausdorff_mm).collect();
                        (r.report.mean_dice(), hd.map(|v| v.iter().sum::<f64>() / v.len() as f64))
                    }
                })
                .unzip();
            let hd: Vec<f64> = hd.into_iter().flatten().collect();
            out.push(SummaryRow {
                split,
                label,
                dice: MeanStd::of(&dice),
                hausdorff_mm: MeanStd::of(&hd),
            });
        }
    }
    out
}

fn eval_one(
    cfg: &RunConfig,
    net: &TrackerNet,
    base: &ParamSet,
    sample: &Sample,
    index: usize,
    mode: AdaptMode,
) -> Result<(MetricsReport, f64, Option<HeldoutLoss>)> {
    let [(src, mask_src), (dst, mask_ref), ..] = sample.masks.as_slice() else {
        return Err(Error::InvalidArgument(format!(
            "video `{}` needs ED and ES masks, has {}",
            sample.video.id,
            sample.masks.len()
        )));
    };
    let video = &sample.video;
    let (params, seconds, heldout) = match mode {
        AdaptMode::None => (base.clone(), 0.0, None),
        AdaptMode::Foal => {
            let ocfg = OnlineConfig {
                seed: derive_seed(derive_seed(cfg.seed, STREAM_ONLINE), index as u64),
                ..cfg.online.clone()
            };
            let start = Instant::now();
            let adapted = online_adapt(net, base, video, &ocfg, cfg.loss)?.params;
            let seconds = start.elapsed().as_secs_f64();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, STREAM_HELDOUT), index as u64));
            let batch = sample_pairs(video.len(), cfg.online.pairs_k, &mut rng)?;
            let heldout = HeldoutLoss {
                before: batch_loss(net, base, video, &batch, cfg.loss)?.total,
                after: batch_loss(net, &adapted, video, &batch, cfg.loss)?.total,
            };
            (adapted, seconds, Some(heldout))
        }
    };
    let report = evaluate_video(net, &params, video, mask_src, mask_ref, *src, *dst)?;
    Ok((report, seconds, heldout))
}

/// Evaluates every test video ED→ES, optionally after online adaptation.
///
/// Writes per-video metrics, a mean(std) summary per split and label, and
/// with adaptation the held-out pair loss before and after. Wall times are
/// returned but never written, so reruns produce identical files.
pub fn cmd_eval(cfg: &RunConfig, manifest: &Manifest, checkpoint: &Path, mode: AdaptMode, out_dir: &Path) -> Result<EvalOutcome> {
    cfg.validate()?;
    let net = cfg.net()?;
    let base = load_checkpoint_for(&net, checkpoint)?;
    let tests: Vec<(usize, &ManifestEntry)> = manifest
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| matches!(e.split, Split::TestInside | Split::TestOutside))
        .collect();
    if tests.is_empty() {
        return Err(Error::InvalidArgument("no test_inside or test_outside videos".into()));
    }
    let samples = tests.iter().map(|(_, e)| manifest.load_sample(e)).collect::<Result<Vec<_>>>()?;
    check_videos(&net, &samples.iter().map(|s| s.video.clone()).collect::<Vec<_>>())?;
    create_dir(out_dir)?;

    let results: Vec<Result<_>> = samples
        .par_iter()
        .zip(tests.par_iter())
        .map(|(s, (index, _))| eval_one(cfg, &net, &base, s, *index, mode))
        .collect();
    let mut rows = Vec::with_capacity(results.len());
    for ((result, (_, entry)), sample) in results.into_iter().zip(&tests).zip(&samples) {
        let (report, adapt_seconds, heldout) = result?;
        rows.push(EvalRow {
            id: sample.video.id.clone(),
            split: entry.split,
            report,
            adapt_seconds,
            heldout,
        });
    }
    let outcome = EvalOutcome {
        mode,
        summary: summarise(&rows),
        rows,
    };
    write_eval_csvs(&outcome, out_dir)?;
    Ok(outcome)
}

fn write_eval_csvs(outcome: &EvalOutcome, out_dir: &Path) -> Result<()> {
    let path = out_dir.join(outcome.metrics_file());
    let mut wtr = csv_writer(&path)?;
    wtr.write_record(["video", "split", "label", "present_pred", "present_ref", "dice", "hausdorff_mm"])?;
    for r in &outcome.rows {
        for m in &r.report.labels {
            wtr.write_record([
                r.id.as_str(),
                r.split.as_str(),
                label_name(m.label),
                if m.present_pred { "1" } else { "0" },
                if m.present_ref { "1" } else { "0" },
                &fmt_f64(m.dice),
                &m.hausdorff_mm.map(fmt_f64).unwrap_or_default(),
            ])?;
        }
    }
    finish_csv(wtr, &path)?;

    let path = out_dir.join(outcome.summary_file());
    let mut wtr = csv_writer(&path)?;
    wtr.write_record([
        "split",
        "label",
        "n",
        "dice_mean",
        "dice_std",
        "hausdorff_n",
        "hausdorff_mm_mean",
        "hausdorff_mm_std",
    ])?;
    for s in &outcome.summary {
        wtr.write_record([
            s.split.as_str().to_string(),
            s.label.map_or("MEAN", label_name).to_string(),
            s.dice.n.to_string(),
            fmt_f64(s.dice.mean),
            fmt_f64(s.dice.std),
            s.hausdorff_mm.n.to_string(),
            fmt_f64(s.hausdorff_mm.mean),
            fmt_f64(s.hausdorff_mm.std),
        ])?;
    }
    finish_csv(wtr, &path)?;

    if outcome.mode == AdaptMode::Foal {
        let path = out_dir.join(outcome.heldout_file());
        let mut wtr = csv_writer(&path)?;
        wtr.write_record(["video", "split", "heldout_before", "heldout_after"])?;
        for r in &outcome.rows {
            let h = r.heldout.expect("adapted rows carry held-out losses");
            wtr.write_record([r.id.clone(), r.split.as_str().to_string(), fmt_f64(h.before), fmt_f64(h.after)])?;
        }
        finish_csv(wtr, &path)?;
    }
    Ok(())
}

/// Runs the finite-difference suite seeded from the config.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<Vec<GradCheck>> {
    gradsuite::run(cfg.seed)
}

#[cfg(test)]
mod tests;
