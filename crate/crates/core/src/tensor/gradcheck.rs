//! Central finite-difference checks of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub probes: usize,
    /// Probes whose step straddles a non-differentiable point, scored
    /// one-sided. See [`compare`].
    pub kinks: usize,
}

impl GradCheck {
    /// Kinks must stay rare: a wrong rule shows up on the smooth probes.
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.kinks * 10 <= self.probes
    }
}

/// `|analytic - fd| / max(1, |fd|)`.
pub fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(1.0)
}

/// Evaluates `f` on a fresh tape with `inputs` as leaves and returns the
/// scalar value and the gradient for each input.
pub fn value_and_grad<F>(inputs: &[Tensor], f: &F) -> Result<(f64, Vec<Tensor>)>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    Ok((loss.item(), vars.iter().map(|v| tape.grad(*v)).collect()))
}

/// Evaluates `f` without recording gradients.
pub fn value<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(f(&tape, &vars)?.item())
}

/// Compares a supplied gradient against central differences of `value_fn`.
///
/// `probe_stride` > 1 checks every n-th element of each input, which keeps
/// network-sized checks tractable.
///
/// Leaky-relu zeros and integer sample coordinates are kinks. When one lies
/// within a step of the probe, the central quotient mixes two slopes and is
/// no oracle. A failing probe whose forward and backward quotients disagree
/// beyond `tolerance` is re-measured with the step shrunk tenfold, at most
/// twice, until they agree; it then counts as a kink. If they still disagree,
/// the kink sits within the smallest step and the probe is scored against
/// the closer one-sided quotient.
pub fn compare(
    name: &str,
    inputs: &[Tensor],
    value_fn: &dyn Fn(&[Tensor]) -> Result<f64>,
    analytic: &[Tensor],
    tolerance: f64,
    probe_stride: usize,
) -> Result<GradCheck> {
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    let mut kinks = 0;
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let stride = probe_stride.max(1);
        // Offset by input index so strided probes do not always hit element 0.
        let start = if stride > 1 { (i * 7919) % stride.min(input.numel()) } else { 0 };
        for j in (start..input.numel()).step_by(stride) {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let plus = value_fn(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let minus = value_fn(&work)?;
            work[i].data_mut()[j] = orig;
            let a = analytic[i].data()[j];
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let mut err = relative_error(a, fd);
            if err >= tolerance {
                let f0 = value_fn(&work)?;
                let (mut h, mut plus, mut minus) = (FD_STEP, plus, minus);
                while relative_error((plus - f0) / h, (f0 - minus) / h) >= tolerance && h > FD_STEP * 0.011 {
                    h /= 10.0;
                    work[i].data_mut()[j] = orig + h;
                    plus = value_fn(&work)?;
                    work[i].data_mut()[j] = orig - h;
                    minus = value_fn(&work)?;
                    work[i].data_mut()[j] = orig;
                }
                if h < FD_STEP {
                    kinks += 1;
                    let (fwd, bwd) = ((plus - f0) / h, (f0 - minus) / h);
                    err = if relative_error(fwd, bwd) < tolerance {
                        relative_error(a, (plus - minus) / (2.0 * h))
                    } else {
                        relative_error(a, fwd).min(relative_error(a, bwd))
                    };
                }
            }
            worst = worst.max(err);
            probes += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_error: worst,
        tolerance,
        probes,
        kinks,
    })
}

/// Full check of a tape-built scalar function at `inputs`.
pub fn check<F>(name: &str, inputs: &[Tensor], f: F, tolerance: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let (_, analytic) = value_and_grad(inputs, &f)?;
    compare(name, inputs, &|x| value(x, &f), &analytic, tolerance, 1)
}
