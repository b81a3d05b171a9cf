//! Reverse-mode automatic differentiation on a Wengert list.
//!
//! A [`Graph`] records every operation of one forward pass. Values are
//! immutable once recorded; [`Graph::backward`] walks the list in reverse and
//! returns gradients for every node that depends on a differentiable leaf.

use super::dense::Tensor;
use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Leaf,
    Add(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Tanh(Var),
    Conv { input: Var, weight: Var, bias: Var, layout: ConvLayout },
    AvgPool { input: Var, axes: Vec<usize>, factor: usize },
    Upsample { input: Var, axes: Vec<usize>, factor: usize },
    InstanceNorm { input: Var, spatial: usize, inv_std: Vec<f32> },
    SpectralNorm { weight: Var, u: Vec<f32>, v: Vec<f32>, sigma: f32 },
    Linear { input: Var, weight: Var, bias: Var },
    Reshape(Var),
    Permute { input: Var, axes: Vec<usize> },
    Affine { input: Var, scale: Vec<f32> },
    SumAbs(Var),
    MeanAbsError { pred: Var, target: Tensor, weights: Option<Vec<f32>> },
}

#[derive(Debug, Clone)]
struct ConvLayout {
    geom: ConvGeom,
    cin: usize,
    cout: usize,
    /// `Some(n)` when the input was `[n, cin, len]` and had to be moved to channel-first.
    batch: Option<usize>,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Epsilon guarding the spectral-norm denominator.
pub const SPECTRAL_EPS: f32 = 1e-12;
/// Epsilon added to the instance-norm variance.
pub const INSTANCE_NORM_EPS: f32 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], lazily allocated per node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, deps: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Input => false,
            _ => deps.iter().any(|d| self.nodes[d.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant: no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, &[])
    }

    /// A differentiable leaf (parameter or sensitivity input).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(format!("add: {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_fn(ta.shape(), |i| ta.data()[i] * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_fn(ta.shape(), |i| ta.data()[i].max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_fn(ta.shape(), |i| ta.data()[i].tanh());
        self.push(t, Op::Tanh(a), &[a])
    }

    /// 1D convolution, stride 1, zero "same" padding. Input is `[cin, len]`
    /// or batched `[n, cin, len]`; weight `[cout, cin, k]` with odd `k`.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if ws.len() != 3 || ws[2] % 2 == 0 {
            return Err(shape_err(format!("conv1d: weight must be [cout, cin, odd k], got {ws:?}")));
        }
        let (batch, cin, len) = match xs.as_slice() {
            [c, l] => (None, *c, *l),
            [n, c, l] => (Some(*n), *c, *l),
            _ => return Err(shape_err(format!("conv1d: input must be rank 2 or 3, got {xs:?}"))),
        };
        if cin != ws[1] {
            return Err(shape_err(format!(
                "conv1d: input has {cin} channels but weight expects {}",
                ws[1]
            )));
        }
        let (spatial, kernel) = match batch {
            None => (vec![len], vec![ws[2]]),
            Some(n) => (vec![n, len], vec![1, ws[2]]),
        };
        let layout = ConvLayout { geom: ConvGeom::new(&spatial, &kernel), cin, cout: ws[0], batch };
        self.conv(input, weight, bias, layout)
    }

    /// 3D convolution over `[cin, d1, d2, d3]`; weight `[cout, cin, k, k, k]`.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if xs.len() != 4 {
            return Err(shape_err(format!("conv3d: input must be [cin, d1, d2, d3], got {xs:?}")));
        }
        if ws.len() != 5 || ws[2..].iter().any(|k| k % 2 == 0) {
            return Err(shape_err(format!("conv3d: weight must be [cout, cin, k, k, k] with odd k, got {ws:?}")));
        }
        if xs[0] != ws[1] {
            return Err(shape_err(format!(
                "conv3d: input has {} channels but weight expects {}",
                xs[0], ws[1]
            )));
        }
        let layout = ConvLayout { geom: ConvGeom::new(&xs[1..], &ws[2..]), cin: xs[0], cout: ws[0], batch: None };
        self.conv(input, weight, bias, layout)
    }

    fn conv(&mut self, input: Var, weight: Var, bias: Var, layout: ConvLayout) -> Result<Var> {
        let b = self.value(bias);
        if b.len() != layout.cout {
            return Err(shape_err(format!("conv: bias has {} values for {} output channels", b.len(), layout.cout)));
        }
        let x = self.value(input);
        let spatial = layout.geom.spatial_len();
        let channel_first = match layout.batch {
            Some(n) => kernels::swap_leading(x.data(), n, layout.cin, spatial / n),
            None => x.data().to_vec(),
        };
        let out = kernels::conv_forward(
            &layout.geom,
            layout.cin,
            layout.cout,
            &channel_first,
            self.value(weight).data(),
            b.data(),
        );
        let mut shape = x.shape().to_vec();
        let t = match layout.batch {
            Some(n) => {
                shape[1] = layout.cout;
                Tensor::new(shape, kernels::swap_leading(&out, layout.cout, n, spatial / n))?
            }
            None => {
                shape[0] = layout.cout;
                Tensor::new(shape, out)?
            }
        };
        Ok(self.push(t, Op::Conv { input, weight, bias, layout }, &[input, weight, bias]))
    }

    fn check_axes(shape: &[usize], axes: &[usize], what: &str) -> Result<()> {
        if axes.is_empty() || axes.iter().any(|&a| a >= shape.len()) {
            return Err(shape_err(format!("{what}: axes {axes:?} invalid for shape {shape:?}")));
        }
        Ok(())
    }

    /// Average pooling by `factor` along each of `axes`.
    pub fn avg_pool(&mut self, input: Var, axes: &[usize], factor: usize) -> Result<Var> {
        let x = self.value(input);
        let mut shape = x.shape().to_vec();
        Self::check_axes(&shape, axes, "avg_pool")?;
        if factor == 0 {
            return Err(shape_err("avg_pool: factor must be positive".into()));
        }
        for &a in axes {
            if shape[a] % factor != 0 {
                return Err(shape_err(format!(
                    "avg_pool: extent {} of axis {a} not divisible by {factor}",
                    shape[a]
                )));
            }
        }
        let mut data = x.data().to_vec();
        for &a in axes {
            data = kernels::pool_axis(&data, &shape, a, factor);
            shape[a] /= factor;
        }
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::AvgPool { input, axes: axes.to_vec(), factor }, &[input]))
    }

    /// Nearest-neighbour up-sampling by `factor` along each of `axes`.
    pub fn upsample(&mut self, input: Var, axes: &[usize], factor: usize) -> Result<Var> {
        let x = self.value(input);
        let mut shape = x.shape().to_vec();
        Self::check_axes(&shape, axes, "upsample")?;
        if factor == 0 {
            return Err(shape_err("upsample: factor must be positive".into()));
        }
        let mut data = x.data().to_vec();
        for &a in axes {
            data = kernels::upsample_axis(&data, &shape, a, factor);
            shape[a] *= factor;
        }
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Upsample { input, axes: axes.to_vec(), factor }, &[input]))
    }

    /// Normalizes each instance over its trailing `spatial` axes to zero mean
    /// and unit variance. All leading axes index instances (batch × channel).
    pub fn instance_norm(&mut self, input: Var, spatial: usize) -> Result<Var> {
        let x = self.value(input);
        let rank = x.rank();
        if spatial == 0 || spatial >= rank {
            return Err(shape_err(format!(
                "instance_norm: need at least one channel axis and one spatial axis, got rank {rank} with {spatial} spatial"
            )));
        }
        let s: usize = x.shape()[rank - spatial..].iter().product();
        let mut out = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(x.len() / s);
        for (src, dst) in x.data().chunks(s).zip(out.chunks_mut(s)) {
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / s as f64;
            let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / s as f64;
            let r = 1.0 / (var + INSTANCE_NORM_EPS as f64).sqrt();
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = ((v as f64 - mean) * r) as f32;
            }
            inv_std.push(r as f32);
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(t, Op::InstanceNorm { input, spatial, inv_std }, &[input]))
    }

    /// Divides `weight` (viewed as `[rows, rest]`) by `‖Wᵀu‖`, its largest
    /// singular value estimate for the persistent left vector `u`.
    pub fn spectral_normalize(&mut self, weight: Var, u: &[f32]) -> Result<Var> {
        let w = self.value(weight);
        let rows = w.shape()[0];
        if u.len() != rows {
            return Err(shape_err(format!("spectral_normalize: u has {} entries for {rows} rows", u.len())));
        }
        let (v, sigma) = super::spectral::right_vector(w.data(), rows, u);
        let denom = sigma.max(SPECTRAL_EPS);
        let t = Tensor::from_fn(w.shape(), |i| w.data()[i] / denom);
        Ok(self.push(t, Op::SpectralNorm { weight, u: u.to_vec(), v, sigma }, &[weight]))
    }

    /// Fully connected layer: input `[in]` or `[n, in]`, weight `[out, in]`, bias `[out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let ws = w.shape();
        if ws.len() != 2 || b.len() != ws[0] {
            return Err(shape_err(format!("linear: weight {ws:?} / bias {:?} mismatch", b.shape())));
        }
        let (nout, nin) = (ws[0], ws[1]);
        let xs = x.shape();
        if *xs.last().unwrap() != nin || xs.len() > 2 {
            return Err(shape_err(format!("linear: input {xs:?} incompatible with weight {ws:?}")));
        }
        let n = x.len() / nin;
        let mut out = Vec::with_capacity(n * nout);
        for row in x.data().chunks(nin) {
            for o in 0..nout {
                out.push(b.data()[o] + kernels::dot(&w.data()[o * nin..(o + 1) * nin], row));
            }
        }
        let shape = if xs.len() == 1 { vec![nout] } else { vec![n, nout] };
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Linear { input, weight, bias }, &[input, weight, bias]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(input).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(input), &[input]))
    }

    pub fn permute(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(input).permute(axes)?;
        Ok(self.push(t, Op::Permute { input, axes: axes.to_vec() }, &[input]))
    }

    /// Elementwise `x * scale + shift` with constant `scale` and `shift`.
    pub fn affine(&mut self, input: Var, scale: &[f32], shift: &[f32]) -> Result<Var> {
        let x = self.value(input);
        if scale.len() != x.len() || shift.len() != x.len() {
            return Err(shape_err("affine: scale/shift length mismatch".into()));
        }
        let t = Tensor::from_fn(x.shape(), |i| x.data()[i] * scale[i] + shift[i]);
        Ok(self.push(t, Op::Affine { input, scale: scale.to_vec() }, &[input]))
    }

    /// L1 norm `Σ|x|` as a one-element tensor.
    pub fn sum_abs(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().map(|&v| v.abs() as f64).sum::<f64>();
        self.push(Tensor::scalar(s as f32), Op::SumAbs(input), &[input])
    }

    /// `mean(w · |pred − target|)`; `weights` default to 1.
    pub fn mean_abs_error(&mut self, pred: Var, target: &Tensor, weights: Option<Vec<f32>>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(shape_err(format!("loss: prediction {:?} vs target {:?}", p.shape(), target.shape())));
        }
        if let Some(w) = &weights {
            if w.len() != p.len() {
                return Err(shape_err("loss: weight count differs from sample count".into()));
            }
        }
        let n = p.len() as f64;
        let total: f64 = match &weights {
            Some(w) => p
                .data()
                .iter()
                .zip(target.data())
                .zip(w)
                .map(|((a, b), w)| (*w as f64) * (a - b).abs() as f64)
                .sum(),
            None => p.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs() as f64).sum(),
        };
        let op = Op::MeanAbsError { pred, target: target.clone(), weights };
        Ok(self.push(Tensor::scalar((total / n) as f32), op, &[pred]))
    }

    /// Reverse sweep seeded with d(root)/d(root) = 1 for every element of `root`.
    pub fn backward(&self, root: Var) -> Grads {
        let seed = Tensor::full(self.value(root).shape(), 1.0);
        self.backward_with(root, seed)
    }

    /// Reverse sweep with an explicit output cotangent `seed`.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Grads {
        assert_eq!(seed.shape(), self.value(root).shape(), "seed shape must match root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let mut acc = |v: Var, data: Vec<f32>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = &mut grads[v.0];
            match slot {
                Some(t) => t.data_mut().iter_mut().zip(&data).for_each(|(a, b)| *a += b),
                None => {
                    let shape = self.nodes[v.0].value.shape().to_vec();
                    *slot = Some(Tensor::new(shape, data).expect("gradient shape"));
                }
            }
        };
        match &node.op {
            Op::Input | Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.to_vec());
            }
            Op::Scale(a, s) => acc(*a, gd.iter().map(|g| g * s).collect()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, gd.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
            }
            Op::Conv { input, weight, bias, layout } => {
                let spatial = layout.geom.spatial_len();
                let x = self.value(*input).data();
                let (x_cf, g_cf) = match layout.batch {
                    Some(n) => (
                        kernels::swap_leading(x, n, layout.cin, spatial / n),
                        kernels::swap_leading(gd, n, layout.cout, spatial / n),
                    ),
                    None => (x.to_vec(), gd.to_vec()),
                };
                let cg = kernels::conv_backward(
                    &layout.geom,
                    layout.cin,
                    layout.cout,
                    &x_cf,
                    self.value(*weight).data(),
                    &g_cf,
                    self.nodes[input.0].needs_grad,
                    self.nodes[weight.0].needs_grad,
                );
                let gin = match layout.batch {
                    Some(n) if !cg.input.is_empty() => kernels::swap_leading(&cg.input, layout.cin, n, spatial / n),
                    _ => cg.input,
                };
                acc(*input, gin);
                acc(*weight, cg.weight);
                acc(*bias, cg.bias);
            }
            Op::AvgPool { input, axes, factor } => {
                let mut shape = node.value.shape().to_vec();
                let mut data = gd.to_vec();
                for &a in axes.iter().rev() {
                    data = kernels::pool_axis_backward(&data, &shape, a, *factor);
                    shape[a] *= factor;
                }
                acc(*input, data);
            }
            Op::Upsample { input, axes, factor } => {
                let mut shape = node.value.shape().to_vec();
                let mut data = gd.to_vec();
                for &a in axes.iter().rev() {
                    data = kernels::upsample_axis_backward(&data, &shape, a, *factor);
                    shape[a] /= factor;
                }
                acc(*input, data);
            }
            Op::InstanceNorm { input, spatial, inv_std } => {
                let shape = node.value.shape();
                let s: usize = shape[shape.len() - spatial..].iter().product();
                let y = node.value.data();
                let mut out = vec![0.0; y.len()];
                for (k, r) in inv_std.iter().enumerate() {
                    let range = k * s..(k + 1) * s;
                    let (yk, gk) = (&y[range.clone()], &gd[range.clone()]);
                    let mg = gk.iter().map(|&v| v as f64).sum::<f64>() / s as f64;
                    let mgy = gk.iter().zip(yk).map(|(g, y)| (*g as f64) * (*y as f64)).sum::<f64>() / s as f64;
                    for ((o, g), y) in out[range].iter_mut().zip(gk).zip(yk) {
                        *o = (*r as f64 * (*g as f64 - mg - *y as f64 * mgy)) as f32;
                    }
                }
                acc(*input, out);
            }
            Op::SpectralNorm { weight, u, v, sigma } => {
                let w = self.value(*weight).data();
                let cols = v.len();
                if *sigma <= SPECTRAL_EPS {
                    acc(*weight, gd.iter().map(|g| g / SPECTRAL_EPS).collect());
                    return;
                }
                let gw: f64 = gd.iter().zip(w).map(|(g, w)| (*g as f64) * (*w as f64)).sum();
                let coef = (gw / (*sigma as f64 * *sigma as f64)) as f32;
                let out = (0..w.len())
                    .map(|i| gd[i] / sigma - coef * u[i / cols] * v[i % cols])
                    .collect();
                acc(*weight, out);
            }
            Op::Linear { input, weight, bias } => {
                let (x, w) = (self.value(*input).data(), self.value(*weight).data());
                let ws = self.value(*weight).shape();
                let (nout, nin) = (ws[0], ws[1]);
                let mut gx = vec![0.0; x.len()];
                let mut gw = vec![0.0; w.len()];
                let mut gb = vec![0.0; nout];
                for (r, (xr, gr)) in x.chunks(nin).zip(gd.chunks(nout)).enumerate() {
                    for o in 0..nout {
                        let go = gr[o];
                        gb[o] += go;
                        for i in 0..nin {
                            gx[r * nin + i] += go * w[o * nin + i];
                            gw[o * nin + i] += go * xr[i];
                        }
                    }
                }
                acc(*input, gx);
                acc(*weight, gw);
                acc(*bias, gb);
            }
            Op::Reshape(a) => acc(*a, gd.to_vec()),
            Op::Permute { input, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (k, &a) in axes.iter().enumerate() {
                    inverse[a] = k;
                }
                let back = g.permute(&inverse).expect("inverse permutation");
                acc(*input, back.into_data());
            }
            Op::Affine { input, scale } => acc(*input, gd.iter().zip(scale).map(|(g, s)| g * s).collect()),
            Op::SumAbs(a) => {
                let x = self.value(*a).data();
                acc(*a, x.iter().map(|v| gd[0] * sign(*v)).collect());
            }
            Op::MeanAbsError { pred, target, weights } => {
                let p = self.value(*pred).data();
                let n = p.len() as f32;
                let out = p
                    .iter()
                    .zip(target.data())
                    .enumerate()
                    .map(|(i, (a, b))| {
                        let w = weights.as_ref().map_or(1.0, |w| w[i]);
                        gd[0] * w * sign(a - b) / n
                    })
                    .collect();
                acc(*pred, out);
            }
        }
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
