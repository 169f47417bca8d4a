use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A cine sequence: `T` frames of `H×W` intensities, stored row-major as f32.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    /// Physical size of one pixel as (x, y) in millimetres.
    pub pixel_spacing_mm: (f64, f64),
    dims: (usize, usize, usize),
    frames: Vec<f32>,
}

impl Video {
    pub fn new(
        id: impl Into<String>,
        dims: (usize, usize, usize),
        frames: Vec<f32>,
        pixel_spacing_mm: (f64, f64),
    ) -> Result<Self> {
        let (t, h, w) = dims;
        if t < 2 {
            return Err(Error::InvalidArgument(format!("video needs at least 2 frames, got {t}")));
        }
        if frames.len() != t * h * w {
            return Err(Error::shape(
                "Video::new",
                "frames",
                format!("{} values for {t}x{h}x{w}", frames.len()),
            ));
        }
        if let Some(i) = frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite intensity at flat index {i}")));
        }
        if !(pixel_spacing_mm.0 > 0.0 && pixel_spacing_mm.1 > 0.0) {
            return Err(Error::InvalidArgument(format!("pixel spacing must be > 0, got {pixel_spacing_mm:?}")));
        }
        Ok(Self {
            id: id.into(),
            pixel_spacing_mm,
            dims,
            frames,
        })
    }

    /// (T, H, W).
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.0
    }

    pub fn is_empty(&self) -> bool {
        self.dims.0 == 0
    }

    pub fn raw(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame_slice(&self, t: usize) -> &[f32] {
        let n = self.dims.1 * self.dims.2;
        &self.frames[t * n..(t + 1) * n]
    }

    /// Frame `t` as an `[H, W]` tensor. Panics if `t` is out of range.
    pub fn frame(&self, t: usize) -> Tensor {
        let (_, h, w) = self.dims;
        let data = self.frame_slice(t).iter().map(|&v| v as f64).collect();
        Tensor::new(&[h, w], data).expect("frame length matches dims")
    }
}

/// Output of [`preprocess`]; `degenerate` is set when the input had no contrast.
#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub video: Video,
    pub degenerate: bool,
}

/// Rescales global min/max to `[0, 255]`, then center-crops or zero-pads each
/// axis to `target = (H, W)`. When the crop/pad amount is odd the extra pixel
/// goes to the bottom/right.
pub fn preprocess(video: &Video, target: (usize, usize)) -> Result<Preprocessed> {
    let (t, h, w) = video.dims();
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::InvalidArgument(format!("target size must be positive, got {th}x{tw}")));
    }
    let (lo, hi) = video
        .raw()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let degenerate = lo >= hi;
    let scale = if degenerate { 0.0 } else { 255.0 / (hi as f64 - lo as f64) };

    // Offset of the target window inside the source (negative means padding).
    let oy = (h as isize - th as isize).div_euclid(2);
    let ox = (w as isize - tw as isize).div_euclid(2);
    let mut out = vec![0f32; t * th * tw];
    for f in 0..t {
        let src = video.frame_slice(f);
        for y in 0..th {
            let sy = y as isize + oy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..tw {
                let sx = x as isize + ox;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let v = src[sy as usize * w + sx as usize] as f64;
                out[f * th * tw + y * tw + x] = ((v - lo as f64) * scale).clamp(0.0, 255.0) as f32;
            }
        }
    }
    Ok(Preprocessed {
        video: Video::new(video.id.clone(), (t, th, tw), out, video.pixel_spacing_mm)?,
        degenerate,
    })
}
