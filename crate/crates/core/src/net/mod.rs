//! Siamese encoder / decoder mapping a frame pair to a dense motion field.
//!
//! Each frame goes through the same strided-conv encoder. The two feature
//! maps are concatenated, fused by a 3x3 conv, and upsampled back to input
//! resolution by stride-2 transposed convolutions. A final linear conv emits
//! the two displacement channels (x rightward, y downward, in pixels).

mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use params::{BoundParams, Gradients, ParamSet};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const UPSAMPLE_KERNEL: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub encoder_channels: Vec<usize>,
    pub kernel: usize,
    pub leaky_slope: f64,
    /// Frame size as (H, W).
    pub input_size: (usize, usize),
    /// Multiplier applied to 0..255 intensities before the first layer.
    pub input_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            encoder_channels: vec![16, 32, 64],
            kernel: 3,
            leaky_slope: 0.1,
            input_size: (32, 32),
            input_scale: 1.0 / 255.0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::Config("encoder_channels must be non-empty and positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel must be odd, got {}", self.kernel)));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("leaky_slope must lie in (0,1), got {}", self.leaky_slope)));
        }
        let factor = 1usize << self.encoder_channels.len();
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Config(format!(
                "input_size {h}x{w} must be divisible by {factor} (2^levels)"
            )));
        }
        Ok(())
    }

    fn levels(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Output channels of each transposed-conv stage.
    fn upsample_channels(&self) -> Vec<usize> {
        let enc = &self.encoder_channels;
        let mut out: Vec<usize> = enc[..enc.len() - 1].iter().rev().copied().collect();
        out.push((enc[0] / 2).max(1));
        out
    }
}

/// Per-pixel displacement from a source frame onto a reference frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionField {
    pub vx: Tensor,
    pub vy: Tensor,
}

impl MotionField {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            vx: Tensor::zeros(&[h, w]),
            vy: Tensor::zeros(&[h, w]),
        }
    }

    pub fn constant(h: usize, w: usize, vx: f64, vy: f64) -> Self {
        Self {
            vx: Tensor::full(&[h, w], vx),
            vy: Tensor::full(&[h, w], vy),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.vx.shape()[0], self.vx.shape()[1])
    }

    pub fn is_finite(&self) -> bool {
        self.vx.all_finite() && self.vy.all_finite()
    }
}

/// A motion field living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FlowVars<'t> {
    pub vx: Var<'t>,
    pub vy: Var<'t>,
}

impl<'t> FlowVars<'t> {
    pub fn constant(tape: &'t Tape, flow: &MotionField) -> Self {
        Self {
            vx: tape.constant(flow.vx.clone()),
            vy: tape.constant(flow.vy.clone()),
        }
    }

    pub fn leaf(tape: &'t Tape, flow: &MotionField) -> Self {
        Self {
            vx: tape.leaf(flow.vx.clone()),
            vy: tape.leaf(flow.vy.clone()),
        }
    }

    pub fn detach(&self) -> MotionField {
        MotionField {
            vx: (*self.vx.value()).clone(),
            vy: (*self.vy.value()).clone(),
        }
    }
}

/// The dense tracker `F_θ`.
#[derive(Clone, Debug)]
pub struct TrackerNet {
    cfg: NetConfig,
}

impl TrackerNet {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// Weights uniform in `[-b, b]` with `b = fan_in^{-1/2}`; biases zero.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in self.layout() {
            let t = if name.ends_with(".weight") {
                let fan_in = shape[1] * shape[2] * shape[3];
                let bound = (fan_in as f64).powf(-0.5);
                Tensor::from_fn(&shape, |_| rng.random_range(-bound..=bound))
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, t).expect("layout names are unique");
        }
        params
    }

    /// Parameter names and shapes in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.cfg.kernel;
        let enc = &self.cfg.encoder_channels;
        let mut layout = Vec::new();
        let mut push = |name: String, w: Vec<usize>, bias: usize| {
            layout.push((format!("{name}.weight"), w));
            layout.push((format!("{name}.bias"), vec![bias]));
        };
        let mut c_in = 1;
        for (i, &c) in enc.iter().enumerate() {
            push(format!("encoder.{i}"), vec![c, c_in, k, k], c);
            c_in = c;
        }
        let deepest = enc[enc.len() - 1];
        push("decoder.fuse".into(), vec![deepest, 2 * deepest, k, k], deepest);
        let mut c = deepest;
        for (j, c_next) in self.cfg.upsample_channels().into_iter().enumerate() {
            push(
                format!("decoder.up.{j}"),
                vec![c, c_next, UPSAMPLE_KERNEL, UPSAMPLE_KERNEL],
                c_next,
            );
            c = c_next;
        }
        push("decoder.flow".into(), vec![2, c, k, k], 2);
        layout
    }

    fn check_frame(&self, frame: &Tensor) -> Result<()> {
        let (h, w) = self.cfg.input_size;
        if frame.shape() != [h, w] {
            return Err(Error::shape(
                "predict_flow",
                "frame",
                format!("expected [{h}, {w}], got {:?}", frame.shape()),
            ));
        }
        Ok(())
    }

    fn encode<'t>(&self, p: &BoundParams<'t>, frame: Var<'t>) -> Result<Var<'t>> {
        let pad = self.cfg.kernel / 2;
        let (h, w) = self.cfg.input_size;
        let mut x = frame.scale(self.cfg.input_scale).reshape(&[1, h, w])?;
        for i in 0..self.cfg.levels() {
            x = x
                .conv2d(p.get(&format!("encoder.{i}.weight"))?, p.get(&format!("encoder.{i}.bias"))?, 2, pad)?
                .leaky_relu(self.cfg.leaky_slope);
        }
        Ok(x)
    }

    /// Forward pass on a tape. Both frames pass through the same encoder weights.
    pub fn forward<'t>(&self, p: &BoundParams<'t>, source: Var<'t>, reference: Var<'t>) -> Result<FlowVars<'t>> {
        self.forward_branches(p, p, p, source, reference)
    }

    /// Forward pass with separately bound encoder weights per branch.
    pub(crate) fn forward_branches<'t>(
        &self,
        source_encoder: &BoundParams<'t>,
        reference_encoder: &BoundParams<'t>,
        p: &BoundParams<'t>,
        source: Var<'t>,
        reference: Var<'t>,
    ) -> Result<FlowVars<'t>> {
        self.check_frame(&source.value())?;
        self.check_frame(&reference.value())?;
        let pad = self.cfg.kernel / 2;
        let slope = self.cfg.leaky_slope;
        let fs = self.encode(source_encoder, source)?;
        let fr = self.encode(reference_encoder, reference)?;
        let mut x = Var::concat_channels(&[fs, fr])?
            .conv2d(p.get("decoder.fuse.weight")?, p.get("decoder.fuse.bias")?, 1, pad)?
            .leaky_relu(slope);
        for j in 0..self.cfg.levels() {
            x = x
                .conv_transpose2d(
                    p.get(&format!("decoder.up.{j}.weight"))?,
                    p.get(&format!("decoder.up.{j}.bias"))?,
                    2,
                    1,
                )?
                .leaky_relu(slope);
        }
        let out = x.conv2d(p.get("decoder.flow.weight")?, p.get("decoder.flow.bias")?, 1, pad)?;
        Ok(FlowVars {
            vx: out.select(0)?,
            vy: out.select(1)?,
        })
    }

    /// Motion field mapping `source` onto `reference`, without gradients.
    pub fn predict_flow(&self, params: &ParamSet, source: &Tensor, reference: &Tensor) -> Result<MotionField> {
        let tape = Tape::new();
        let p = params.bind_constant(&tape);
        let flow = self.forward(&p, tape.constant(source.clone()), tape.constant(reference.clone()))?;
        Ok(flow.detach())
    }
}
