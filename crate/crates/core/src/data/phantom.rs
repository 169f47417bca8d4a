//! Synthetic short-axis phantom: an LV blood pool, a myocardial ring and an
//! RV cavity, contracting radially about the LV center over one cycle.
//!
//! Frame `t` scales the geometry by `s(t) = 1 − A·sin(π·t/(T−1))`, so ED is
//! at both ends and ES at `t = (T−1)/2`. A material point at `q` in frame 0
//! sits at `c + s(t)·(q − c)` in frame `t`, so the backward flow on the
//! frame-`t` grid that pulls frame 0 onto frame `t` is
//! `v(p) = (p − c)·(1/s(t) − 1)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Video;
use crate::error::{Error, Result};
use crate::metrics::{warp_mask, LabelMask, BACKGROUND, LV, MYO, RV};
use crate::net::MotionField;
use crate::tensor::Tensor;

/// Sub-samples per pixel axis when rendering partial-volume intensities.
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intensities {
    pub background: f64,
    pub rv: f64,
    pub myo: f64,
    pub lv: f64,
}

impl Default for Intensities {
    fn default() -> Self {
        // Bright blood, dark muscle, as in bSSFP cine.
        Self {
            background: 40.0,
            rv: 190.0,
            myo: 70.0,
            lv: 210.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomParams {
    /// Square frame side in pixels.
    pub size: usize,
    pub frames: usize,
    /// LV center as (x, y) in pixel coordinates.
    pub center: (f64, f64),
    pub lv_radius: f64,
    pub myo_thickness: f64,
    /// Distance from the LV center to the RV center, towards −x.
    pub rv_offset: f64,
    pub rv_radius: f64,
    pub intensities: Intensities,
    /// Peak fractional radial contraction, in `[0, 1)`.
    pub contraction_amplitude: f64,
    pub noise_sigma: f64,
    /// Multiplicative falloff across x: the right edge is darker by this fraction.
    pub intensity_gradient_strength: f64,
    /// Amplitude of a smooth texture that moves with the tissue.
    pub texture_amplitude: f64,
    pub pixel_spacing_mm: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            size: 32,
            frames: 9,
            center: (18.0, 15.5),
            lv_radius: 5.0,
            myo_thickness: 2.5,
            rv_offset: 9.0,
            rv_radius: 5.0,
            intensities: Intensities::default(),
            contraction_amplitude: 0.3,
            noise_sigma: 3.0,
            intensity_gradient_strength: 0.0,
            texture_amplitude: 8.0,
            pixel_spacing_mm: 1.5,
            seed: 0,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("phantom: {msg}")));
        if self.frames < 2 {
            return bad(format!("need at least 2 frames, got {}", self.frames));
        }
        if !(0.0..1.0).contains(&self.contraction_amplitude) {
            return bad(format!("contraction_amplitude must lie in [0,1), got {}", self.contraction_amplitude));
        }
        if !(0.0..1.0).contains(&self.intensity_gradient_strength) {
            return bad(format!(
                "intensity_gradient_strength must lie in [0,1), got {}",
                self.intensity_gradient_strength
            ));
        }
        let positive = [self.lv_radius, self.myo_thickness, self.rv_radius, self.pixel_spacing_mm];
        if positive.iter().any(|v| !(*v > 0.0)) || self.rv_offset < 0.0 || self.noise_sigma < 0.0 {
            return bad("radii, thickness and spacing must be > 0; offset and noise >= 0".into());
        }
        // Frame 0 has the largest extent; keep one pixel clear of the border.
        let (cx, cy) = self.center;
        let epi = self.lv_radius + self.myo_thickness;
        let rv_x = cx - self.rv_offset;
        let min_x = (cx - epi).min(rv_x - self.rv_radius);
        let max_x = (cx + epi).max(rv_x + self.rv_radius);
        let min_y = (cy - epi).min(cy - self.rv_radius);
        let max_y = (cy + epi).max(cy + self.rv_radius);
        let hi = self.size as f64 - 2.0;
        if min_x < 1.0 || min_y < 1.0 || max_x > hi || max_y > hi {
            return bad(format!(
                "geometry spans x [{min_x:.2}, {max_x:.2}], y [{min_y:.2}, {max_y:.2}] outside [1, {hi}]"
            ));
        }
        Ok(())
    }

    pub fn scale_at(&self, t: usize) -> f64 {
        let phase = std::f64::consts::PI * t as f64 / (self.frames - 1) as f64;
        1.0 - self.contraction_amplitude * phase.sin()
    }

    /// Index of the end-systolic (most contracted) frame.
    pub fn es_frame(&self) -> usize {
        (self.frames - 1) / 2
    }

    /// Label of the undeformed geometry at continuous point `(x, y)`.
    fn label_at(&self, x: f64, y: f64) -> u8 {
        let (cx, cy) = self.center;
        let r2 = (x - cx).powi(2) + (y - cy).powi(2);
        let epi = self.lv_radius + self.myo_thickness;
        if r2 < self.lv_radius * self.lv_radius {
            LV
        } else if r2 < epi * epi {
            MYO
        } else if (x - (cx - self.rv_offset)).powi(2) + (y - cy).powi(2) < self.rv_radius * self.rv_radius {
            RV
        } else {
            BACKGROUND
        }
    }

    /// Frame-0 position of the material point seen at `(x, y)` in a frame with scale `s`.
    fn pull_back(&self, x: f64, y: f64, s: f64) -> (f64, f64) {
        let (cx, cy) = self.center;
        (cx + (x - cx) / s, cy + (y - cy) / s)
    }
}

/// Video, per-frame masks and per-frame ground-truth flow from frame 0.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub params: PhantomParams,
    pub video: Video,
    pub masks: Vec<LabelMask>,
    /// `flows[t]` maps frame 0 onto frame `t`; `flows[0]` is zero.
    pub flows: Vec<MotionField>,
}

/// Smooth random field: a few plane waves with random direction and phase.
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, amplitude: f64) -> Self {
        let waves = (0..6)
            .map(|_| {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let freq = rng.random_range(0.3..0.9);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (freq * angle.cos(), freq * angle.sin(), phase, amplitude / 6f64.sqrt())
            })
            .collect();
        Self { waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.waves.iter().map(|&(kx, ky, ph, a)| a * (kx * x + ky * y + ph).sin()).sum()
    }
}

/// Labels of frame `t` sampled at pixel centers from the continuous geometry.
pub fn analytic_mask(p: &PhantomParams, t: usize) -> Result<LabelMask> {
    let n = p.size;
    let s = p.scale_at(t);
    let labels = (0..n * n)
        .map(|i| {
            let (qx, qy) = p.pull_back((i % n) as f64, (i / n) as f64, s);
            p.label_at(qx, qy)
        })
        .collect();
    LabelMask::new((n, n), labels, (p.pixel_spacing_mm, p.pixel_spacing_mm))
}

pub fn generate_phantom(p: &PhantomParams) -> Result<Phantom> {
    p.validate()?;
    let n = p.size;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let texture = Texture::new(&mut rng, p.texture_amplitude);
    let noise = Normal::new(0.0, p.noise_sigma).map_err(|e| Error::InvalidArgument(format!("noise: {e}")))?;
    let level = |label: u8| match label {
        LV => p.intensities.lv,
        MYO => p.intensities.myo,
        RV => p.intensities.rv,
        _ => p.intensities.background,
    };

    let spacing = (p.pixel_spacing_mm, p.pixel_spacing_mm);
    let mask0 = analytic_mask(p, 0)?;

    let mut frames = Vec::with_capacity(p.frames * n * n);
    let mut masks = Vec::with_capacity(p.frames);
    let mut flows = Vec::with_capacity(p.frames);
    let step = 1.0 / SUPERSAMPLE as f64;
    for t in 0..p.frames {
        let s = p.scale_at(t);
        for y in 0..n {
            for x in 0..n {
                let mut acc = 0.0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 - 0.5 + (sx as f64 + 0.5) * step;
                        let py = y as f64 - 0.5 + (sy as f64 + 0.5) * step;
                        let (qx, qy) = p.pull_back(px, py, s);
                        let label = p.label_at(qx, qy);
                        let tissue = if label == BACKGROUND { 0.0 } else { texture.at(qx, qy) };
                        acc += level(label) + tissue;
                    }
                }
                let mean = acc / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                let coil = 1.0 - p.intensity_gradient_strength * x as f64 / (n - 1) as f64;
                let v = mean * coil + noise.sample(&mut rng);
                frames.push(v.clamp(0.0, 255.0) as f32);
            }
        }
        let k = 1.0 / s - 1.0;
        let (cx, cy) = p.center;
        let flow = MotionField {
            vx: Tensor::from_fn(&[n, n], |i| ((i % n) as f64 - cx) * k),
            vy: Tensor::from_fn(&[n, n], |i| ((i / n) as f64 - cy) * k),
        };
        // Sub-pixel boundary positions are lost once frame 0 is rasterised, so
        // later masks are frame 0 carried along the exact flow rather than
        // re-rasterised; see `analytic_mask` for the point-sampled version.
        masks.push(if t == 0 { mask0.clone() } else { warp_mask(&mask0, &flow)? });
        flows.push(flow);
    }
    let video = Video::new(format!("phantom-{}", p.seed), (p.frames, n, n), frames, spacing)?;
    Ok(Phantom {
        params: p.clone(),
        video,
        masks,
        flows,
    })
}

/// Which parameter range a phantom is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Population {
    /// Thin myocardium, uniform coil sensitivity.
    Inside,
    /// Thick myocardium and a strong coil-sensitivity falloff.
    Outside,
}

impl Population {
    pub fn tag(self) -> &'static str {
        match self {
            Population::Inside => "inside",
            Population::Outside => "outside",
        }
    }
}

/// Draws phantom parameters for a population. Ranges for the two
/// populations are disjoint in myocardial thickness and coil falloff.
pub fn sample_params(population: Population, size: usize, frames: usize, seed: u64) -> PhantomParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = size as f64 / 32.0;
    let (lv_radius, myo_thickness, rv_radius, gradient) = match population {
        Population::Inside => (
            rng.random_range(4.0..5.5) * z,
            rng.random_range(2.0..3.0) * z,
            rng.random_range(4.0..5.5) * z,
            0.0,
        ),
        Population::Outside => (
            rng.random_range(3.5..4.5) * z,
            rng.random_range(4.0..5.0) * z,
            rng.random_range(3.5..4.5) * z,
            rng.random_range(0.3..0.5),
        ),
    };
    let epi = lv_radius + myo_thickness;
    let rv_offset = epi + rng.random_range(0.0..1.0) * z;
    let center = (
        size as f64 / 2.0 + 2.0 * z + rng.random_range(-1.0..1.0) * z,
        size as f64 / 2.0 - 0.5 + rng.random_range(-1.0..1.0) * z,
    );
    let jitter = |rng: &mut ChaCha8Rng, v: f64| v + rng.random_range(-10.0..10.0);
    let d = Intensities::default();
    let intensities = Intensities {
        background: jitter(&mut rng, d.background),
        rv: jitter(&mut rng, d.rv),
        myo: jitter(&mut rng, d.myo),
        lv: jitter(&mut rng, d.lv),
    };
    PhantomParams {
        size,
        frames,
        center,
        lv_radius,
        myo_thickness,
        rv_offset,
        rv_radius,
        intensities,
        contraction_amplitude: rng.random_range(0.2..0.35),
        noise_sigma: 3.0,
        intensity_gradient_strength: gradient,
        texture_amplitude: 8.0,
        pixel_spacing_mm: 1.5 / z,
        seed: rng.random(),
    }
}
