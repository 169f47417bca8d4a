//! Label masks, mask propagation through a motion field, Dice overlap and
//! Hausdorff contour distance.

use std::io::Write;

use serde::Serialize;

use crate::data::Video;
use crate::error::{Error, Result};
use crate::loss::warp_image;
use crate::net::{MotionField, ParamSet, TrackerNet};
use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;
pub const RV: u8 = 1;
pub const MYO: u8 = 2;
pub const LV: u8 = 3;
/// Foreground labels in reporting order.
pub const LABELS: [u8; 3] = [RV, MYO, LV];

pub fn label_name(label: u8) -> &'static str {
    match label {
        BACKGROUND => "BG",
        RV => "RV",
        MYO => "MYO",
        LV => "LV",
        _ => "?",
    }
}

/// Per-pixel anatomical labels on an `H×W` grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    dims: (usize, usize),
    labels: Vec<u8>,
    /// (x, y) in millimetres.
    pub pixel_spacing_mm: (f64, f64),
}

impl LabelMask {
    pub fn new(dims: (usize, usize), labels: Vec<u8>, pixel_spacing_mm: (f64, f64)) -> Result<Self> {
        if labels.len() != dims.0 * dims.1 {
            return Err(Error::shape(
                "LabelMask::new",
                "labels",
                format!("{} values for {}x{}", labels.len(), dims.0, dims.1),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > LV) {
            return Err(Error::InvalidArgument(format!("label {bad} outside 0..=3")));
        }
        if !(pixel_spacing_mm.0 > 0.0 && pixel_spacing_mm.1 > 0.0) {
            return Err(Error::InvalidArgument(format!("pixel spacing must be > 0, got {pixel_spacing_mm:?}")));
        }
        Ok(Self {
            dims,
            labels,
            pixel_spacing_mm,
        })
    }

    /// (H, W).
    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.dims.1 + x]
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    fn one_hot(&self, label: u8) -> Tensor {
        let (h, w) = self.dims;
        Tensor::from_fn(&[h, w], |i| if self.labels[i] == label { 1.0 } else { 0.0 })
    }

    /// Label pixels with a 4-neighbour of another label or on the image border.
    pub fn contour(&self, label: u8) -> Vec<(usize, usize)> {
        let (h, w) = self.dims;
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if self.at(y, x) != label {
                    continue;
                }
                let edge = y == 0
                    || x == 0
                    || y + 1 == h
                    || x + 1 == w
                    || self.at(y - 1, x) != label
                    || self.at(y + 1, x) != label
                    || self.at(y, x - 1) != label
                    || self.at(y, x + 1) != label;
                if edge {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

fn check_pair(op: &'static str, a: &LabelMask, b: &LabelMask, label: u8) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::shape(op, "mask", format!("{:?} vs {:?}", a.dims, b.dims)));
    }
    if !LABELS.contains(&label) {
        return Err(Error::InvalidArgument(format!("{op}: label must be 1, 2 or 3, got {label}")));
    }
    Ok(())
}

/// Warps each label's indicator bilinearly and keeps the label with the
/// largest weight per pixel. Ties go to the lower label id.
pub fn warp_mask(mask: &LabelMask, flow: &MotionField) -> Result<LabelMask> {
    if flow.dims() != mask.dims {
        return Err(Error::shape(
            "warp_mask",
            "flow",
            format!("flow {:?} vs mask {:?}", flow.dims(), mask.dims),
        ));
    }
    let warped: Vec<Tensor> = (BACKGROUND..=LV)
        .map(|l| warp_image(&mask.one_hot(l), flow))
        .collect::<Result<_>>()?;
    let labels = (0..mask.labels.len())
        .map(|i| {
            let mut best = BACKGROUND;
            for l in 1..=LV {
                if warped[l as usize].data()[i] > warped[best as usize].data()[i] {
                    best = l;
                }
            }
            best
        })
        .collect();
    LabelMask::new(mask.dims, labels, mask.pixel_spacing_mm)
}

/// `2|A∩B| / (|A|+|B|)` for one label; 1.0 when both are empty.
pub fn dice(a: &LabelMask, b: &LabelMask, label: u8) -> Result<f64> {
    check_pair("dice", a, b, label)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels.iter().zip(&b.labels) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Largest squared distance from a point of `from` to its nearest point of `to`.
fn directed_sq(from: &[(usize, usize)], to: &[(usize, usize)], (sx, sy): (f64, f64)) -> f64 {
    from.iter()
        .map(|&(ay, ax)| {
            to.iter()
                .map(|&(by, bx)| {
                    let dx = (ax as f64 - bx as f64) * sx;
                    let dy = (ay as f64 - by as f64) * sy;
                    dx * dx + dy * dy
                })
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

/// Hausdorff distance in millimetres between the contours of `label`.
/// `symmetric = false` gives the directed distance from `a` to `b`.
pub fn hausdorff(a: &LabelMask, b: &LabelMask, label: u8, symmetric: bool) -> Result<f64> {
    check_pair("hausdorff", a, b, label)?;
    if a.pixel_spacing_mm != b.pixel_spacing_mm {
        return Err(Error::InvalidArgument(format!(
            "hausdorff: pixel spacings differ: {:?} vs {:?}",
            a.pixel_spacing_mm, b.pixel_spacing_mm
        )));
    }
    let ca = a.contour(label);
    let cb = b.contour(label);
    if ca.is_empty() || cb.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "hausdorff: empty contour for label {} ({})",
            label,
            label_name(label)
        )));
    }
    let mut d2 = directed_sq(&ca, &cb, a.pixel_spacing_mm);
    if symmetric {
        d2 = d2.max(directed_sq(&cb, &ca, a.pixel_spacing_mm));
    }
    Ok(d2.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LabelMetrics {
    pub label: u8,
    pub present_pred: bool,
    pub present_ref: bool,
    pub dice: f64,
    /// Symmetric distance; `None` unless the label is present in both masks.
    pub hausdorff_mm: Option<f64>,
}

/// Metrics for RV, MYO and LV in that order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub labels: [LabelMetrics; 3],
}

impl MetricsReport {
    pub fn get(&self, label: u8) -> Option<&LabelMetrics> {
        self.labels.iter().find(|m| m.label == label)
    }

    /// Mean Dice over the three foreground labels.
    pub fn mean_dice(&self) -> f64 {
        self.labels.iter().map(|m| m.dice).sum::<f64>() / 3.0
    }
}

/// Compares a propagated mask with the reference annotation.
pub fn compare_masks(pred: &LabelMask, reference: &LabelMask) -> Result<MetricsReport> {
    let mut out = Vec::with_capacity(3);
    for label in LABELS {
        let present_pred = pred.count(label) > 0;
        let present_ref = reference.count(label) > 0;
        let hausdorff_mm = if present_pred && present_ref {
            Some(hausdorff(pred, reference, label, true)?)
        } else {
            None
        };
        out.push(LabelMetrics {
            label,
            present_pred,
            present_ref,
            dice: dice(pred, reference, label)?,
            hausdorff_mm,
        });
    }
    Ok(MetricsReport {
        labels: [out[0], out[1], out[2]],
    })
}

/// Propagates `mask_src` along `flow` and scores it against `mask_ref`.
pub fn evaluate_with_flow(mask_src: &LabelMask, mask_ref: &LabelMask, flow: &MotionField) -> Result<MetricsReport> {
    compare_masks(&warp_mask(mask_src, flow)?, mask_ref)
}

/// Predicts the flow from frame `src_idx` to frame `ref_idx`, propagates the
/// source mask and scores it against the reference mask.
pub fn evaluate_video(
    net: &TrackerNet,
    params: &ParamSet,
    video: &Video,
    mask_src: &LabelMask,
    mask_ref: &LabelMask,
    src_idx: usize,
    ref_idx: usize,
) -> Result<MetricsReport> {
    if src_idx >= video.len() || ref_idx >= video.len() {
        return Err(Error::InvalidArgument(format!(
            "frame indices ({src_idx}, {ref_idx}) out of range for {} frames",
            video.len()
        )));
    }
    let flow = net.predict_flow(params, &video.frame(src_idx), &video.frame(ref_idx))?;
    evaluate_with_flow(mask_src, mask_ref, &flow)
}

/// Fixed-width scientific notation with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// One CSV row per (video, label): `video,label,present_pred,present_ref,dice,hausdorff_mm`.
/// A missing distance is written as an empty field.
pub fn write_metrics_csv<W: Write>(out: W, rows: &[(String, MetricsReport)]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["video", "label", "present_pred", "present_ref", "dice", "hausdorff_mm"])?;
    for (id, report) in rows {
        for m in &report.labels {
            wtr.write_record([
                id.as_str(),
                label_name(m.label),
                if m.present_pred { "1" } else { "0" },
                if m.present_ref { "1" } else { "0" },
                &fmt_f64(m.dice),
                &m.hausdorff_mm.map(fmt_f64).unwrap_or_default(),
            ])?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<metrics csv>", e))?;
    Ok(())
}
