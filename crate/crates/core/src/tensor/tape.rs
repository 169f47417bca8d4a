use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, Stencil, Window};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Square(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Concat(Vec<usize>),
    Select(usize, usize),
    LeakyRelu(usize, f64),
    DiffX(usize),
    DiffY(usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        geom: Window,
        cols: Rc<Vec<f64>>,
    },
    ConvTranspose2d {
        input: usize,
        weight: usize,
        bias: usize,
        geom: Window,
    },
    Sample {
        image: usize,
        vx: usize,
        vy: usize,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Records tensor operations for reverse-mode differentiation.
///
/// Operations append nodes in execution order, so the node list is a
/// topological order by construction. A tape is built per forward pass and
/// confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf whose gradient will be populated by [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a constant; no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(value, op, requires_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Accumulated gradient of a leaf, zero-filled if backward never reached it.
    pub fn grad(&self, var: Var<'_>) -> Tensor {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Back-propagates from a scalar `loss`, adding `d loss / d leaf` into
    /// every reachable leaf's gradient. Repeated calls accumulate.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                "loss",
                format!("expected a scalar, got shape {:?}", nodes[loss.id].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = nodes[id].op {
                match &mut nodes[id].grad {
                    Some(acc) => acc.axpy(1.0, &g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (input, contrib) in backward_rule(&nodes, id, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.axpy(1.0, &contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }
}

fn unbroadcast(g: &Tensor, target: &Tensor) -> Tensor {
    if g.shape() == target.shape() {
        g.clone()
    } else {
        Tensor::full(target.shape(), g.sum())
    }
}

fn backward_rule(nodes: &[Node], id: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
    let val = |i: usize| &*nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![(*a, unbroadcast(g, val(*a))), (*b, unbroadcast(g, val(*b)))],
        Op::Sub(a, b) => vec![
            (*a, unbroadcast(g, val(*a))),
            (*b, unbroadcast(&g.map(|x| -x), val(*b))),
        ],
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let ga = broadcast_mul(g, vb);
            let gb = broadcast_mul(g, va);
            vec![(*a, unbroadcast(&ga, va)), (*b, unbroadcast(&gb, vb))]
        }
        Op::Scale(a, s) => vec![(*a, g.map(|x| x * s))],
        Op::Square(a) => {
            let va = val(*a);
            let data = g.data().iter().zip(va.data()).map(|(g, x)| 2.0 * x * g).collect();
            vec![(*a, Tensor::new(va.shape(), data).unwrap())]
        }
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
        Op::Mean(a) => {
            let va = val(*a);
            vec![(*a, Tensor::full(va.shape(), g.item() / va.numel() as f64))]
        }
        Op::Reshape(a) => vec![(*a, g.clone().reshape(val(*a).shape()).unwrap())],
        Op::Concat(parts) => {
            let mut offset = 0;
            parts
                .iter()
                .map(|&p| {
                    let vp = val(p);
                    let n = vp.numel();
                    let piece = Tensor::new(vp.shape(), g.data()[offset..offset + n].to_vec()).unwrap();
                    offset += n;
                    (p, piece)
                })
                .collect()
        }
        Op::Select(a, index) => {
            let va = val(*a);
            let n = g.numel();
            let mut full = Tensor::zeros(va.shape());
            full.data_mut()[index * n..(index + 1) * n].copy_from_slice(g.data());
            vec![(*a, full)]
        }
        Op::LeakyRelu(a, slope) => {
            let va = val(*a);
            let data = g
                .data()
                .iter()
                .zip(va.data())
                .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                .collect();
            vec![(*a, Tensor::new(va.shape(), data).unwrap())]
        }
        Op::DiffX(a) => {
            let (h, w) = plane_dims(val(*a));
            let mut ga = Tensor::zeros(val(*a).shape());
            let d = ga.data_mut();
            for y in 0..h {
                for x in 0..w.saturating_sub(1) {
                    let gv = g.data()[y * w + x];
                    d[y * w + x + 1] += gv;
                    d[y * w + x] -= gv;
                }
            }
            vec![(*a, ga)]
        }
        Op::DiffY(a) => {
            let (h, w) = plane_dims(val(*a));
            let mut ga = Tensor::zeros(val(*a).shape());
            let d = ga.data_mut();
            for y in 0..h.saturating_sub(1) {
                for x in 0..w {
                    let gv = g.data()[y * w + x];
                    d[(y + 1) * w + x] += gv;
                    d[y * w + x] -= gv;
                }
            }
            vec![(*a, ga)]
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            cols,
        } => {
            let vw = val(*weight);
            let c_out = vw.shape()[0];
            let (rows, npix) = (geom.rows(), geom.cols());
            let mut result = Vec::with_capacity(3);
            if nodes[*input].requires_grad {
                let mut dcols = vec![0.0; rows * npix];
                kernels::gemm(rows, c_out, npix, vw.data(), true, g.data(), false, &mut dcols, false);
                let dx = kernels::col2im(&dcols, *geom);
                result.push((*input, Tensor::new(val(*input).shape(), dx).unwrap()));
            }
            if nodes[*weight].requires_grad {
                let mut dw = vec![0.0; c_out * rows];
                kernels::gemm(c_out, npix, rows, g.data(), false, cols, true, &mut dw, false);
                result.push((*weight, Tensor::new(vw.shape(), dw).unwrap()));
            }
            if nodes[*bias].requires_grad {
                result.push((*bias, channel_sums(g, c_out)));
            }
            result
        }
        Op::ConvTranspose2d {
            input,
            weight,
            bias,
            geom,
        } => {
            // `geom` describes the forward-conv view: output plane -> input plane.
            let vx = val(*input);
            let vw = val(*weight);
            let c_in = vw.shape()[0];
            let c_out = vw.shape()[1];
            let (rows, npix) = (geom.rows(), geom.cols());
            let dcols = kernels::im2col(g.data(), *geom);
            let mut result = Vec::with_capacity(3);
            if nodes[*input].requires_grad {
                let mut dx = vec![0.0; c_in * npix];
                kernels::gemm(c_in, rows, npix, vw.data(), false, &dcols, false, &mut dx, false);
                result.push((*input, Tensor::new(vx.shape(), dx).unwrap()));
            }
            if nodes[*weight].requires_grad {
                let mut dw = vec![0.0; c_in * rows];
                kernels::gemm(c_in, npix, rows, vx.data(), false, &dcols, true, &mut dw, false);
                result.push((*weight, Tensor::new(vw.shape(), dw).unwrap()));
            }
            if nodes[*bias].requires_grad {
                result.push((*bias, channel_sums(g, c_out)));
            }
            result
        }
        Op::Sample { image, vx, vy } => {
            let img = val(*image);
            let (h, w) = plane_dims(img);
            let (fx, fy) = (val(*vx), val(*vy));
            let mut g_img = Tensor::zeros(img.shape());
            let mut g_vx = Tensor::zeros(fx.shape());
            let mut g_vy = Tensor::zeros(fy.shape());
            let want_img = nodes[*image].requires_grad;
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let gv = g.data()[p];
                    let s = Stencil::at(x as f64 + fx.data()[p], y as f64 + fy.data()[p], h, w);
                    let (dx, dy) = s.coord_grad(img.data(), w);
                    g_vx.data_mut()[p] = gv * dx;
                    g_vy.data_mut()[p] = gv * dy;
                    if want_img {
                        let gi = g_img.data_mut();
                        for (idx, wt) in s.indices(w).into_iter().zip(s.weights()) {
                            gi[idx] += gv * wt;
                        }
                    }
                }
            }
            vec![(*image, g_img), (*vx, g_vx), (*vy, g_vy)]
        }
    }
}

fn broadcast_mul(g: &Tensor, other: &Tensor) -> Tensor {
    if other.numel() == 1 {
        let s = other.data()[0];
        g.map(|x| x * s)
    } else {
        let data = g.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Tensor::new(g.shape(), data).unwrap()
    }
}

fn channel_sums(g: &Tensor, channels: usize) -> Tensor {
    let per = g.numel() / channels;
    Tensor::from_fn(&[channels], |c| g.data()[c * per..(c + 1) * per].iter().sum())
}

fn plane_dims(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    (s[s.len() - 2], s[s.len() - 1])
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() || a.numel() == 1 || b.numel() == 1 {
        return Ok(());
    }
    if a.ndim() != b.ndim() {
        return Err(Error::shape(
            op,
            "rank",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let axis = (0..a.ndim()).find(|&i| a.shape()[i] != b.shape()[i]).unwrap();
    Err(Error::shape(
        op,
        format!("dim {axis}"),
        format!("{:?} vs {:?}", a.shape(), b.shape()),
    ))
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape(), data).unwrap()
    } else if b.numel() == 1 {
        let y = b.data()[0];
        a.map(|x| f(x, y))
    } else {
        let x = a.data()[0];
        b.map(|y| f(x, y))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_same(name, &a, &b)?;
        let out = zip_broadcast(&a, &b, f);
        Ok(self.tape.record(out, op, &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let out = self.value().map(|x| x * s);
        self.tape.record(out, Op::Scale(self.id, s), &[self.id])
    }

    pub fn square(self) -> Var<'t> {
        let out = self.value().map(|x| x * x);
        self.tape.record(out, Op::Square(self.id), &[self.id])
    }

    pub fn sum(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.record(out, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.value();
        let out = Tensor::scalar(v.sum() / v.numel() as f64);
        self.tape.record(out, Op::Mean(self.id), &[self.id])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.record(out, Op::Reshape(self.id), &[self.id]))
    }

    /// Elementwise `max(x, slope·x)`; the derivative at 0 is `slope`.
    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let out = self.value().map(|x| if x > 0.0 { x } else { slope * x });
        self.tape.record(out, Op::LeakyRelu(self.id, slope), &[self.id])
    }

    /// Slice `index` along the leading axis, dropping that axis.
    pub fn select(self, index: usize) -> Result<Var<'t>> {
        let v = self.value();
        let n = v.shape().first().copied().unwrap_or(0);
        if index >= n {
            return Err(Error::shape(
                "select",
                "dim 0",
                format!("index {index} out of range for {:?}", v.shape()),
            ));
        }
        let inner = &v.shape()[1..];
        let len: usize = inner.iter().product();
        let out = Tensor::new(inner, v.data()[index * len..(index + 1) * len].to_vec())?;
        Ok(self.tape.record(out, Op::Select(self.id, index), &[self.id]))
    }

    /// Forward difference along the last axis, zero in the final column.
    pub fn diff_x(self) -> Var<'t> {
        let v = self.value();
        let (h, w) = plane_dims(&v);
        let mut out = Tensor::zeros(v.shape());
        for y in 0..h {
            for x in 0..w.saturating_sub(1) {
                out.data_mut()[y * w + x] = v.data()[y * w + x + 1] - v.data()[y * w + x];
            }
        }
        self.tape.record(out, Op::DiffX(self.id), &[self.id])
    }

    /// Forward difference along the second-to-last axis, zero in the final row.
    pub fn diff_y(self) -> Var<'t> {
        let v = self.value();
        let (h, w) = plane_dims(&v);
        let mut out = Tensor::zeros(v.shape());
        for y in 0..h.saturating_sub(1) {
            for x in 0..w {
                out.data_mut()[y * w + x] = v.data()[(y + 1) * w + x] - v.data()[y * w + x];
            }
        }
        self.tape.record(out, Op::DiffY(self.id), &[self.id])
    }

    /// Stacks `[C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let tape = first.tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let spatial = &values[0].shape()[1..];
        let mut channels = 0;
        let mut data = Vec::new();
        for v in &values {
            if v.ndim() != 3 {
                return Err(Error::shape("concat_channels", "rank", format!("{:?}", v.shape())));
            }
            if &v.shape()[1..] != spatial {
                let axis = if v.shape()[1] != spatial[0] { 1 } else { 2 };
                return Err(Error::shape(
                    "concat_channels",
                    format!("dim {axis}"),
                    format!("{:?} vs {:?}", v.shape(), values[0].shape()),
                ));
            }
            channels += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(&[channels, spatial[0], spatial[1]], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.record(out, Op::Concat(ids.clone()), &ids))
    }

    /// 2-D convolution of `self[C_in,H,W]` by `weight[C_out,C_in,k,k]` with zero padding.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (c_out, c_in, k) = check_conv("conv2d", &x, &w, &b, 1, stride)?;
        if k % 2 == 0 {
            return Err(Error::shape("conv2d", "kernel", format!("kernel size {k} must be odd")));
        }
        let (h, wd) = (x.shape()[1], x.shape()[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                if h + 2 * pad < k { "dim 1" } else { "dim 2" },
                format!("input {h}x{wd} with pad {pad} smaller than kernel {k}"),
            ));
        }
        let geom = Window {
            channels: c_in,
            h,
            w: wd,
            k,
            stride,
            pad,
        };
        let cols = kernels::im2col(x.data(), geom);
        let npix = geom.cols();
        let mut out = vec![0.0; c_out * npix];
        kernels::gemm(c_out, geom.rows(), npix, w.data(), false, &cols, false, &mut out, false);
        for (c, chunk) in out.chunks_mut(npix).enumerate() {
            let bc = b.data()[c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        let out = Tensor::new(&[c_out, geom.out_h(), geom.out_w()], out)?;
        Ok(self.tape.record(
            out,
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                bias: bias.id,
                geom,
                cols: Rc::new(cols),
            },
            &[self.id, weight.id, bias.id],
        ))
    }

    /// Transposed convolution of `self[C_in,H,W]` by `weight[C_in,C_out,k,k]`;
    /// the adjoint of [`Var::conv2d`] with the same weight, plus bias.
    pub fn conv_transpose2d(
        self,
        weight: Var<'t>,
        bias: Var<'t>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (c_out, c_in, k) = check_conv("conv_transpose2d", &x, &w, &b, 0, stride)?;
        let (h, wd) = (x.shape()[1], x.shape()[2]);
        let full_h = (h - 1) * stride + k;
        let full_w = (wd - 1) * stride + k;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(Error::shape(
                "conv_transpose2d",
                if full_h <= 2 * pad { "dim 1" } else { "dim 2" },
                format!("padding {pad} consumes the whole {full_h}x{full_w} output"),
            ));
        }
        let geom = Window {
            channels: c_out,
            h: full_h - 2 * pad,
            w: full_w - 2 * pad,
            k,
            stride,
            pad,
        };
        debug_assert_eq!(geom.out_h(), h);
        debug_assert_eq!(geom.out_w(), wd);
        let mut cols = vec![0.0; geom.rows() * h * wd];
        kernels::gemm(geom.rows(), c_in, h * wd, w.data(), true, x.data(), false, &mut cols, false);
        let mut out = kernels::col2im(&cols, geom);
        let plane = geom.h * geom.w;
        for (c, chunk) in out.chunks_mut(plane).enumerate() {
            let bc = b.data()[c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        let out = Tensor::new(&[c_out, geom.h, geom.w], out)?;
        Ok(self.tape.record(
            out,
            Op::ConvTranspose2d {
                input: self.id,
                weight: weight.id,
                bias: bias.id,
                geom,
            },
            &[self.id, weight.id, bias.id],
        ))
    }

    /// Bilinear sample of `self[H,W]` at `(x + vx, y + vy)` for every pixel,
    /// with coordinates clamped to the image border.
    pub fn sample(self, vx: Var<'t>, vy: Var<'t>) -> Result<Var<'t>> {
        let (img, fx, fy) = (self.value(), vx.value(), vy.value());
        if img.ndim() != 2 {
            return Err(Error::shape("sample", "rank", format!("image {:?}", img.shape())));
        }
        check_same("sample", &img, &fx)?;
        check_same("sample", &img, &fy)?;
        if fx.shape() != img.shape() || fy.shape() != img.shape() {
            return Err(Error::shape("sample", "flow", "flow must match image shape"));
        }
        let (h, w) = (img.shape()[0], img.shape()[1]);
        let mut out = Tensor::zeros(img.shape());
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let s = Stencil::at(x as f64 + fx.data()[p], y as f64 + fy.data()[p], h, w);
                out.data_mut()[p] = s.sample(img.data(), w);
            }
        }
        Ok(self.tape.record(
            out,
            Op::Sample {
                image: self.id,
                vx: vx.id,
                vy: vy.id,
            },
            &[self.id, vx.id, vy.id],
        ))
    }
}

/// Validates conv operand ranks; returns (weight-declared C_out, C_in, k)
/// oriented for the op. `in_axis` is the weight axis matched to input channels.
fn check_conv(
    op: &'static str,
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    in_axis: usize,
    stride: usize,
) -> Result<(usize, usize, usize)> {
    if x.ndim() != 3 {
        return Err(Error::shape(op, "input rank", format!("expected [C,H,W], got {:?}", x.shape())));
    }
    if w.ndim() != 4 {
        return Err(Error::shape(op, "weight rank", format!("expected 4-D, got {:?}", w.shape())));
    }
    if w.shape()[2] != w.shape()[3] {
        return Err(Error::shape(op, "kernel", format!("non-square kernel {:?}", w.shape())));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument(format!("{op}: stride must be >= 1")));
    }
    let out_axis = 1 - in_axis;
    let (c_in, c_out, k) = (w.shape()[in_axis], w.shape()[out_axis], w.shape()[2]);
    if x.shape()[0] != c_in {
        return Err(Error::shape(
            op,
            "input channels",
            format!("input has {} channels, weight expects {c_in}", x.shape()[0]),
        ));
    }
    if b.shape() != [c_out] {
        return Err(Error::shape(
            op,
            "bias",
            format!("expected [{c_out}], got {:?}", b.shape()),
        ));
    }
    Ok((c_out, c_in, k))
}
