//! The full finite-difference suite: every tape primitive, the warp, each
//! loss term, the tracker end to end, and the held-out meta gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapt::{batch_loss, meta_gradient, meta_inner, MetaConfig};
use crate::data::Video;
use crate::error::Result;
use crate::loss::{consistency, loss_total, mse, pair_loss, smoothness, warp, LossWeights};
use crate::net::{FlowVars, NetConfig, ParamSet, TrackerNet};
use crate::tensor::gradcheck::{check, compare, GradCheck};
use crate::tensor::{Tape, Tensor, Var};

/// Tolerance for single primitives and loss terms.
pub const PRIMITIVE_TOL: f64 = 1e-4;
/// Tolerance for checks through the whole network.
pub const NETWORK_TOL: f64 = 1e-3;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Sub-pixel displacements offset from integers, away from bilinear kinks.
fn field(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5) + 0.013)
}

fn primitives(rng: &mut ChaCha8Rng) -> Result<Vec<GradCheck>> {
    let a = random(&[3, 4], rng);
    let b = random(&[3, 4], rng);
    let s = random(&[], rng);
    let c = random(&[2, 3, 4], rng);
    let c1 = random(&[1, 3, 4], rng);
    let t = PRIMITIVE_TOL;
    let ab = [a.clone(), b.clone()];
    let mut out = vec![
        check("add", &ab, |_, v| Ok(v[0].add(v[1])?.square().sum()), t)?,
        check("sub", &ab, |_, v| Ok(v[0].sub(v[1])?.square().mean()), t)?,
        check("mul", &ab, |_, v| Ok(v[0].mul(v[1])?.sum()), t)?,
        check("mul_scalar_broadcast", &[a.clone(), s], |_, v| Ok(v[0].mul(v[1])?.square().sum()), t)?,
        check("scale", std::slice::from_ref(&a), |_, v| Ok(v[0].scale(-2.5).square().sum()), t)?,
        check("square", std::slice::from_ref(&a), |_, v| Ok(v[0].square().mean()), t)?,
        check("sum", std::slice::from_ref(&a), |_, v| Ok(v[0].sum().square()), t)?,
        check("mean", std::slice::from_ref(&a), |_, v| Ok(v[0].mean().square()), t)?,
        check("leaky_relu", std::slice::from_ref(&a), |_, v| Ok(v[0].leaky_relu(0.1).square().sum()), t)?,
        check("diff_x", std::slice::from_ref(&a), |_, v| Ok(v[0].diff_x().square().sum()), t)?,
        check("diff_y", &[a], |_, v| Ok(v[0].diff_y().square().sum()), t)?,
        check(
            "concat_select",
            &[c.clone(), c1],
            |_, v| {
                let cat = Var::concat_channels(&[v[0], v[1]])?;
                cat.select(2)?.square().sum().add(cat.select(0)?.sum())
            },
            t,
        )?,
        check("reshape", &[c], |_, v| Ok(v[0].reshape(&[6, 4])?.select(5)?.square().sum()), t)?,
    ];
    let conv_in = [random(&[2, 7, 6], rng), random(&[3, 2, 3, 3], rng), random(&[3], rng)];
    out.push(check("conv2d", &conv_in, |_, v| Ok(v[0].conv2d(v[1], v[2], 2, 1)?.square().mean()), t)?);
    out.push(check("conv2d_stride1", &conv_in, |_, v| Ok(v[0].conv2d(v[1], v[2], 1, 1)?.square().mean()), t)?);
    let convt_in = [random(&[3, 4, 4], rng), random(&[3, 2, 4, 4], rng), random(&[2], rng)];
    out.push(check(
        "conv_transpose2d",
        &convt_in,
        |_, v| Ok(v[0].conv_transpose2d(v[1], v[2], 2, 1)?.square().mean()),
        t,
    )?);
    let sample_in = [random(&[6, 7], rng), field(&[6, 7], rng), field(&[6, 7], rng)];
    out.push(check("sample", &sample_in, |_, v| Ok(v[0].sample(v[1], v[2])?.square().mean()), t)?);
    Ok(out)
}

fn losses(rng: &mut ChaCha8Rng) -> Result<Vec<GradCheck>> {
    let t = PRIMITIVE_TOL;
    let img = Tensor::from_fn(&[8, 8], |_| rng.random_range(0.0..10.0));
    let reference = Tensor::from_fn(&[8, 8], |_| rng.random_range(0.0..10.0));
    let warp_in = [img, field(&[8, 8], rng), field(&[8, 8], rng)];
    let flows = [field(&[8, 8], rng), field(&[8, 8], rng), field(&[8, 8], rng), field(&[8, 8], rng)];
    Ok(vec![
        check(
            "warp_image+loss_mse",
            &warp_in,
            |tape: &Tape, v: &[Var]| mse(warp(v[0], FlowVars { vx: v[1], vy: v[2] })?, tape.constant(reference.clone())),
            t,
        )?,
        check("loss_smooth", &flows[..2], |_: &Tape, v: &[Var]| smoothness(FlowVars { vx: v[0], vy: v[1] }), t)?,
        check(
            "loss_consistency",
            &flows,
            |_: &Tape, v: &[Var]| consistency(FlowVars { vx: v[0], vy: v[1] }, FlowVars { vx: v[2], vy: v[3] }),
            t,
        )?,
    ])
}

fn small_net() -> Result<TrackerNet> {
    TrackerNet::new(NetConfig {
        encoder_channels: vec![4, 8, 8],
        input_size: (16, 16),
        ..NetConfig::default()
    })
}

/// Weights at a generic point. At initialisation activations and flows are
/// tiny, so a 1e-5 step straddles leaky-relu and bilinear kinks.
fn generic_params(net: &TrackerNet, seed: u64) -> ParamSet {
    let mut p = net.init_params(seed);
    for (name, t) in p.iter_mut() {
        if name.ends_with(".weight") {
            t.scale_in_place(2.5);
        }
    }
    if let Some(b) = p.get_mut("decoder.flow.bias") {
        b.data_mut().copy_from_slice(&[0.37, -0.29]);
    }
    p
}

/// Smooth texture translated by `shift` pixels. Smooth images keep the slope
/// jump at each bilinear kink small.
fn texture(rng: &mut ChaCha8Rng, n: usize, frames: usize) -> Vec<Tensor> {
    let waves: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let f = rng.random_range(0.3..0.8);
            [f * a.cos(), f * a.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(20.0..50.0)]
        })
        .collect();
    (0..frames)
        .map(|t| {
            let (sx, sy) = (0.6 * t as f64, 0.35 * t as f64);
            Tensor::from_fn(&[n, n], |i| {
                let (x, y) = ((i % n) as f64 - sx, (i / n) as f64 - sy);
                128.0 + waves.iter().map(|w| w[3] * (w[0] * x + w[1] * y + w[2]).sin()).sum::<f64>()
            })
        })
        .collect()
}

fn textured_video(rng: &mut ChaCha8Rng, frames: usize) -> Result<Video> {
    let data = texture(rng, 16, frames).iter().flat_map(|f| f.data().iter().map(|&v| v as f32)).collect();
    Video::new("gradcheck", (frames, 16, 16), data, (1.0, 1.0))
}

fn network(rng: &mut ChaCha8Rng) -> Result<Vec<GradCheck>> {
    let net = small_net()?;
    let w = LossWeights::default();
    let params = generic_params(&net, 8);
    let [a, b]: [Tensor; 2] = texture(rng, 16, 2).try_into().expect("two frames");
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let (loss, _) = pair_loss(&net, &bound, tape.constant(a.clone()), tape.constant(b.clone()), w)?;
    tape.backward(loss)?;
    let full = compare(
        "tracker_net+loss_total",
        &params.tensors(),
        &|xs| Ok(loss_total(&net, &params.with_values(xs)?, &a, &b, w)?.total),
        &bound.grads(&tape).tensors(),
        NETWORK_TOL,
        37,
    )?;

    let video = textured_video(rng, 4)?;
    let cfg = MetaConfig {
        inner_steps_m: 2,
        pairs_k: 2,
        inner_lr: 1e-6,
        ..MetaConfig::default()
    };
    let theta = generic_params(&net, 6);
    let (theta_i, heldout) = meta_inner(&net, &theta, &video, &cfg, w, rng)?;
    let (_, grad) = meta_gradient(&net, &theta_i, &video, &heldout, w)?;
    let meta = compare(
        "meta_gradient",
        &theta_i.tensors(),
        &|xs| Ok(batch_loss(&net, &theta_i.with_values(xs)?, &video, &heldout, w)?.total),
        &grad.tensors(),
        NETWORK_TOL,
        53,
    )?;
    Ok(vec![full, meta])
}

/// Runs every check. Individual failures are reported in the results;
/// `Err` means a check could not be evaluated at all.
pub fn run(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = primitives(&mut rng)?;
    out.extend(losses(&mut rng)?);
    out.extend(network(&mut rng)?);
    Ok(out)
}
