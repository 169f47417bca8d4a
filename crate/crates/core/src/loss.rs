//! Differentiable backward warping and the self-supervised tracking loss
//! `L_total = L_mse + α_s·L_smooth + β_c·L_con`.
//!
//! Warping samples the source at reference-grid coordinates displaced by
//! the flow, bilinearly, with coordinates clamped to the image border.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{BoundParams, FlowVars, MotionField, ParamSet, TrackerNet};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha_s: f64,
    pub beta_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_s: 5e-5,
            beta_c: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_s >= 0.0 && self.beta_c >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got alpha_s={} beta_c={}",
                self.alpha_s, self.beta_c
            )));
        }
        Ok(())
    }
}

/// Values of the individual loss terms and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mse: f64,
    pub smooth: f64,
    pub consistency: f64,
    pub total: f64,
}

impl LossReport {
    /// Elementwise mean of several reports, summed in slice order.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut acc = LossReport::default();
        for r in reports {
            acc.mse += r.mse;
            acc.smooth += r.smooth;
            acc.consistency += r.consistency;
            acc.total += r.total;
        }
        LossReport {
            mse: acc.mse / n,
            smooth: acc.smooth / n,
            consistency: acc.consistency / n,
            total: acc.total / n,
        }
    }
}

/// Backward warp on a tape: `out(x,y) = image(x + vx, y + vy)`.
pub fn warp<'t>(image: Var<'t>, flow: FlowVars<'t>) -> Result<Var<'t>> {
    image.sample(flow.vx, flow.vy)
}

pub fn warp_image(image: &Tensor, flow: &MotionField) -> Result<Tensor> {
    let tape = Tape::new();
    let out = warp(tape.constant(image.clone()), FlowVars::constant(&tape, flow))?;
    Ok((*out.value()).clone())
}

/// Mean squared intensity difference.
pub fn mse<'t>(warped: Var<'t>, reference: Var<'t>) -> Result<Var<'t>> {
    if warped.shape() != reference.shape() {
        return Err(Error::shape(
            "loss_mse",
            "image",
            format!("{:?} vs {:?}", warped.shape(), reference.shape()),
        ));
    }
    Ok(warped.sub(reference)?.square().mean())
}

/// Mean over pixels of the summed squared forward differences of both
/// flow components along both axes. Differences leaving the grid count as 0.
pub fn smoothness<'t>(flow: FlowVars<'t>) -> Result<Var<'t>> {
    let terms = [
        flow.vx.diff_x().square(),
        flow.vx.diff_y().square(),
        flow.vy.diff_x().square(),
        flow.vy.diff_y().square(),
    ];
    Ok(terms[0].add(terms[1])?.add(terms[2])?.add(terms[3])?.mean())
}

fn one_way_consistency<'t>(a: FlowVars<'t>, b: FlowVars<'t>) -> Result<Var<'t>> {
    let bx = b.vx.sample(a.vx, a.vy)?;
    let by = b.vy.sample(a.vx, a.vy)?;
    let rx = a.vx.add(bx)?.square();
    let ry = a.vy.add(by)?.square();
    Ok(rx.add(ry)?.mean())
}

/// Forward-backward consistency: `‖V_f(p) + V_b(p + V_f(p))‖²` averaged over
/// pixels, symmetrised over the two directions.
pub fn consistency<'t>(fwd: FlowVars<'t>, bwd: FlowVars<'t>) -> Result<Var<'t>> {
    if fwd.vx.shape() != bwd.vx.shape() {
        return Err(Error::shape(
            "loss_consistency",
            "flow",
            format!("{:?} vs {:?}", fwd.vx.shape(), bwd.vx.shape()),
        ));
    }
    let f = one_way_consistency(fwd, bwd)?;
    let b = one_way_consistency(bwd, fwd)?;
    Ok(f.add(b)?.scale(0.5))
}

/// Bidirectional loss for one frame pair, recorded on the tape behind `p`.
pub fn pair_loss<'t>(
    net: &TrackerNet,
    p: &BoundParams<'t>,
    source: Var<'t>,
    reference: Var<'t>,
    w: LossWeights,
) -> Result<(Var<'t>, LossReport)> {
    let fwd = net.forward(p, source, reference)?;
    let bwd = net.forward(p, reference, source)?;
    let l_mse = mse(warp(source, fwd)?, reference)?
        .add(mse(warp(reference, bwd)?, source)?)?
        .scale(0.5);
    let l_smooth = smoothness(fwd)?.add(smoothness(bwd)?)?.scale(0.5);
    let l_con = consistency(fwd, bwd)?;
    let total = l_mse
        .add(l_smooth.scale(w.alpha_s))?
        .add(l_con.scale(w.beta_c))?;
    let report = LossReport {
        mse: l_mse.item(),
        smooth: l_smooth.item(),
        consistency: l_con.item(),
        total: total.item(),
    };
    Ok((total, report))
}

/// Loss value and report for one pair without recording gradients.
pub fn loss_total(
    net: &TrackerNet,
    params: &ParamSet,
    source: &Tensor,
    reference: &Tensor,
    w: LossWeights,
) -> Result<LossReport> {
    let tape = Tape::new();
    let p = params.bind_constant(&tape);
    let (_, report) = pair_loss(net, &p, tape.constant(source.clone()), tape.constant(reference.clone()), w)?;
    Ok(report)
}

pub fn loss_mse(warped: &Tensor, reference: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    Ok(mse(tape.constant(warped.clone()), tape.constant(reference.clone()))?.item())
}

pub fn loss_smooth(flow: &MotionField) -> Result<f64> {
    let tape = Tape::new();
    Ok(smoothness(FlowVars::constant(&tape, flow))?.item())
}

pub fn loss_consistency(fwd: &MotionField, bwd: &MotionField) -> Result<f64> {
    let tape = Tape::new();
    Ok(consistency(FlowVars::constant(&tape, fwd), FlowVars::constant(&tape, bwd))?.item())
}
