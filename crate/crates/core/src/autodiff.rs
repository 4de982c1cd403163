//! Reverse-mode differentiation over a recorded list of tensor operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and the
//! backward pass is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxColumns(Var),
    Sigmoid(Var),
    Relu(Var),
    Gap(Var),
    MulBroadcast(Var, Var),
    Mul(Var, Var),
    Add(Var, Var),
    OneMinus(Var),
    Sum(Var),
    AddChannelBias(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    Affinity {
        fm: Var,
        wp: Var,
        fn_: Var,
    },
    SigmoidCe {
        logits: Var,
        target: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Tensor>>>,
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), out))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), out))
    }

    pub fn softmax_columns(&mut self, a: Var) -> Result<Var> {
        let out = softmax_columns(self.value(a))?;
        Ok(self.push(Op::SoftmaxColumns(a), out))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::from_fn(x.shape(), |i| sigmoid(x.data()[i]));
        self.push(Op::Sigmoid(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i].max(0.0));
        self.push(Op::Relu(a), out)
    }

    /// Global average pooling `[K, H, W] -> [K]`.
    pub fn gap(&mut self, a: Var) -> Result<Var> {
        let out = gap(self.value(a))?;
        Ok(self.push(Op::Gap(a), out))
    }

    /// `f[c, h, w] * a[h, w]`, with `a` copied along the channel axis.
    pub fn mul_broadcast(&mut self, f: Var, a: Var) -> Result<Var> {
        let out = mul_broadcast(self.value(f), self.value(a))?;
        Ok(self.push(Op::MulBroadcast(f, a), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i] * y.data()[i]);
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i] + y.data()[i]);
        Ok(self.push(Op::Add(a, b), out))
    }

    /// `1 - a`; every input value must already lie in `[0, 1]`. NaN passes
    /// through so divergence is reported by the loss, not here.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if let Some(bad) = x.data().iter().find(|v| !v.is_nan() && !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!(
                "complement input must lie in [0, 1], found {bad}"
            )));
        }
        let out = Tensor::from_fn(x.shape(), |i| 1.0 - x.data()[i]);
        Ok(self.push(Op::OneMinus(a), out))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Adds `b[c]` to every spatial position of channel `c`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xt, bt) = (self.value(x), self.value(b));
        let (c, h, w) = xt.dims3()?;
        if bt.shape() != [c] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match {c} channels",
                bt.shape()
            )));
        }
        let hw = h * w;
        let out = Tensor::from_fn(xt.shape(), |i| xt.data()[i] + bt.data()[i / hw]);
        Ok(self.push(Op::AddChannelBias(x, b), out))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = conv2d(self.value(input), self.value(kernel), stride, pad)?;
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
            out,
        ))
    }

    /// Affinity `P = Fmᵀ · W · Fn` using the symmetric part of `W`.
    ///
    /// See [`affinity`] for the summation order.
    pub fn affinity(&mut self, fm: Var, wp: Var, fn_: Var) -> Result<Var> {
        let out = affinity(self.value(fm), self.value(wp), self.value(fn_))?;
        Ok(self.push(Op::Affinity { fm, wp, fn_ }, out))
    }

    /// Mean over classes of the sigmoid cross entropy between `logits` and a
    /// binary `target`.
    pub fn sigmoid_ce(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        let out = sigmoid_ce(self.value(logits).data(), target)?;
        Ok(self.push(
            Op::SigmoidCe {
                logits,
                target: target.to_vec(),
            },
            Tensor::scalar(out),
        ))
    }

    /// Accumulates gradients of the scalar `loss` into every node.
    ///
    /// A graph can be differentiated once; call [`Graph::reset_grads`] to
    /// run another backward pass over the same nodes.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Contract(
                "backward already ran on this graph; reset gradients first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    /// Gradient of the last backward loss with respect to `v`. Nodes the loss
    /// does not depend on get zeros.
    pub fn grad(&self, v: Var) -> Result<Tensor> {
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| Error::Contract("no backward pass has run".into()))?;
        Ok(grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape())))
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, matmul(g, &bv.transpose()?)?);
                accumulate(grads, *b, matmul(&av.transpose()?, g)?);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()?),
            Op::Reshape(a) => accumulate(grads, *a, g.reshape(self.value(*a).shape())?),
            Op::SoftmaxColumns(a) => {
                let (r, c) = y.dims2()?;
                let (yd, gd) = (y.data(), g.data());
                let mut dx = vec![0.0; r * c];
                for j in 0..c {
                    let dot: f64 = (0..r).map(|i| yd[i * c + j] * gd[i * c + j]).sum();
                    for i in 0..r {
                        dx[i * c + j] = yd[i * c + j] * (gd[i * c + j] - dot);
                    }
                }
                accumulate(grads, *a, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::Sigmoid(a) => {
                let dx = Tensor::from_fn(y.shape(), |i| {
                    let s = y.data()[i];
                    sigmoid_grad_scale() * g.data()[i] * s * (1.0 - s)
                });
                accumulate(grads, *a, dx);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let dx = Tensor::from_fn(x.shape(), |i| {
                    if x.data()[i] > 0.0 {
                        g.data()[i]
                    } else {
                        0.0
                    }
                });
                accumulate(grads, *a, dx);
            }
            Op::Gap(a) => {
                let x = self.value(*a);
                let (_, h, w) = x.dims3()?;
                let hw = h * w;
                let dx = Tensor::from_fn(x.shape(), |i| g.data()[i / hw] / hw as f64);
                accumulate(grads, *a, dx);
            }
            Op::MulBroadcast(f, a) => {
                let (fv, av) = (self.value(*f), self.value(*a));
                let (c, h, w) = fv.dims3()?;
                let hw = h * w;
                let df = Tensor::from_fn(fv.shape(), |i| g.data()[i] * av.data()[i % hw]);
                let mut da = vec![0.0; hw];
                for ch in 0..c {
                    for p in 0..hw {
                        da[p] += g.data()[ch * hw + p] * fv.data()[ch * hw + p];
                    }
                }
                accumulate(grads, *f, df);
                accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, Tensor::from_fn(av.shape(), |i| g.data()[i] * bv.data()[i]));
                accumulate(grads, *b, Tensor::from_fn(bv.shape(), |i| g.data()[i] * av.data()[i]));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::OneMinus(a) => accumulate(grads, *a, Tensor::from_fn(g.shape(), |i| -g.data()[i])),
            Op::Sum(a) => {
                let gv = g.data()[0];
                accumulate(grads, *a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::AddChannelBias(x, b) => {
                let (c, h, w) = y.dims3()?;
                let hw = h * w;
                let db: Vec<f64> = (0..c)
                    .map(|ch| g.data()[ch * hw..(ch + 1) * hw].iter().sum())
                    .collect();
                accumulate(grads, *x, g.clone());
                accumulate(grads, *b, Tensor::new(vec![c], db)?);
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let (dx, dk) =
                    conv2d_backward(self.value(*input), self.value(*kernel), g, *stride, *pad)?;
                accumulate(grads, *input, dx);
                accumulate(grads, *kernel, dk);
            }
            Op::Affinity { fm, wp, fn_ } => {
                let (dfm, dwp, dfn) =
                    affinity_backward(self.value(*fm), self.value(*wp), self.value(*fn_), g)?;
                accumulate(grads, *fm, dfm);
                accumulate(grads, *wp, dwp);
                accumulate(grads, *fn_, dfn);
            }
            Op::SigmoidCe { logits, target } => {
                let x = self.value(*logits);
                let k = x.numel() as f64;
                let gv = g.data()[0];
                let dx = Tensor::from_fn(x.shape(), |i| gv * (sigmoid(x.data()[i]) - target[i]) / k);
                accumulate(grads, *logits, dx);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

#[cfg(not(feature = "mutate-sigmoid-grad"))]
#[inline]
fn sigmoid_grad_scale() -> f64 {
    1.0
}

#[cfg(feature = "mutate-sigmoid-grad")]
#[inline]
fn sigmoid_grad_scale() -> f64 {
    1.01
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

// Plain tensor kernels. The graph methods above wrap these; inference and the
// test oracles call them directly.

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ((m, k), (k2, n)) = match (a.dims2(), b.dims2()) {
        (Ok(x), Ok(y)) => (x, y),
        _ => {
            return Err(Error::Dimension(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )))
        }
    };
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Column-wise softmax with per-column max subtraction.
pub fn softmax_columns(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    let xd = x.data();
    let mut out = vec![0.0; r * c];
    for j in 0..c {
        let max = (0..r).map(|i| xd[i * c + j]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for i in 0..r {
            let e = (xd[i * c + j] - max).exp();
            out[i * c + j] = e;
            total += e;
        }
        for i in 0..r {
            out[i * c + j] /= total;
        }
    }
    Tensor::new(vec![r, c], out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gap(s: &Tensor) -> Result<Tensor> {
    let (k, h, w) = s.dims3()?;
    let hw = h * w;
    let out = (0..k)
        .map(|c| s.data()[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::new(vec![k], out)
}

pub fn mul_broadcast(f: &Tensor, a: &Tensor) -> Result<Tensor> {
    let (_, h, w) = f.dims3()?;
    if a.shape() != [h, w] {
        return Err(Error::Dimension(format!(
            "attention shape {:?} does not match feature spatial size [{h}, {w}]",
            a.shape()
        )));
    }
    let hw = h * w;
    Ok(Tensor::from_fn(f.shape(), |i| f.data()[i] * a.data()[i % hw]))
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

fn conv_geometry(x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (cin, h, w) = x.dims3()?;
    let [cout, kcin, kh, kw] = kernel.shape()[..] else {
        return Err(Error::Dimension(format!(
            "conv kernel must be rank 4, got {:?}",
            kernel.shape()
        )));
    };
    if kcin != cin {
        return Err(Error::Dimension(format!(
            "conv kernel {:?} expects {kcin} input channels, input {:?} has {cin}",
            kernel.shape(),
            x.shape()
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::Dimension(format!(
            "conv kernel must be square with odd size, got {kh}x{kw}"
        )));
    }
    if stride == 0 {
        return Err(Error::Dimension("conv stride must be positive".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Dimension(format!(
            "conv output extent is empty for input {:?}, kernel {kh}, pad {pad}",
            x.shape()
        )));
    }
    Ok(ConvGeom {
        cin,
        h,
        w,
        cout,
        k: kh,
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (w + 2 * pad - kw) / stride + 1,
    })
}

/// Cross-correlation (no kernel flip) with zero padding.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let ConvGeom {
        cin,
        h,
        w,
        cout,
        k,
        oh,
        ow,
    } = conv_geometry(x, kernel, stride, pad)?;
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let xplane = &xd[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let kv = kd[((co * cin + ci) * k + ky) * k + kx];
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *o += kv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out)
}

fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let ConvGeom {
        cin,
        h,
        w,
        cout,
        k,
        oh,
        ow,
    } = conv_geometry(x, kernel, stride, pad)?;
    let (xd, kd, gd) = (x.data(), kernel.data(), g.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dk = vec![0.0; kd.len()];
    for co in 0..cout {
        let gplane = &gd[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let base = ci * h * w;
            for ky in 0..k {
                for kx in 0..k {
                    let kidx = ((co * cin + ci) * k + ky) * k + kx;
                    let kv = kd[kidx];
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = base + iy as usize * w;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let gv = gplane[oy * ow + ox];
                            acc += gv * xd[row + ix as usize];
                            dx[row + ix as usize] += gv * kv;
                        }
                    }
                    dk[kidx] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(kernel.shape().to_vec(), dk)?,
    ))
}

fn affinity_dims(fm: &Tensor, wp: &Tensor, fn_: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, n) = fm.dims2()?;
    let (c2, m) = fn_.dims2()?;
    if c != c2 || wp.shape() != [c, c] {
        return Err(Error::Dimension(format!(
            "affinity needs Fm [C, N], W [C, C], Fn [C, M]; got {:?}, {:?}, {:?}",
            fm.shape(),
            wp.shape(),
            fn_.shape()
        )));
    }
    Ok((c, n, m))
}

/// `P[i, j] = Σ_ab Fm[a, i] · S[a, b] · Fn[b, j]` with `S = (W + Wᵀ) / 2`.
///
/// Terms are grouped as `S[a,a]·(x·y)` and `S[a,b]·(x·y' + x'·y)` over `a < b`,
/// so swapping `Fm` and `Fn` yields exactly the transposed matrix.
pub fn affinity(fm: &Tensor, wp: &Tensor, fn_: &Tensor) -> Result<Tensor> {
    let (c, n, m) = affinity_dims(fm, wp, fn_)?;
    let (a_d, w_d, b_d) = (fm.data(), wp.data(), fn_.data());
    let sym = |a: usize, b: usize| 0.5 * (w_d[a * c + b] + w_d[b * c + a]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for a in 0..c {
                let xa = a_d[a * n + i];
                let ya = b_d[a * m + j];
                acc += w_d[a * c + a] * (xa * ya);
                for b in a + 1..c {
                    acc += sym(a, b) * (xa * b_d[b * m + j] + a_d[b * n + i] * ya);
                }
            }
            out[i * m + j] = acc;
        }
    }
    Tensor::new(vec![n, m], out)
}

fn affinity_backward(
    fm: &Tensor,
    wp: &Tensor,
    fn_: &Tensor,
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, _, _) = affinity_dims(fm, wp, fn_)?;
    let w = wp.data();
    let sym = Tensor::from_fn(&[c, c], |idx| {
        let (a, b) = (idx / c, idx % c);
        0.5 * (w[a * c + b] + w[b * c + a])
    });
    // dFm = S·Fn·Gᵀ, dFn = S·Fm·G, dS = Fm·G·Fnᵀ
    let dfm = matmul(&matmul(&sym, fn_)?, &g.transpose()?)?;
    let dfn = matmul(&matmul(&sym, fm)?, g)?;
    let ds = matmul(&matmul(fm, g)?, &fn_.transpose()?)?;
    let dsd = ds.data();
    let dw = Tensor::from_fn(&[c, c], |idx| {
        let (a, b) = (idx / c, idx % c);
        0.5 * (dsd[a * c + b] + dsd[b * c + a])
    });
    Ok((dfm, dw, dfn))
}

/// Mean over entries of `max(s, 0) - s·t + ln(1 + e^{-|s|})`.
pub fn sigmoid_ce(logits: &[f64], target: &[f64]) -> Result<f64> {
    if logits.len() != target.len() || logits.is_empty() {
        return Err(Error::Dimension(format!(
            "cross entropy over {} scores and {} targets",
            logits.len(),
            target.len()
        )));
    }
    let total: f64 = logits
        .iter()
        .zip(target)
        .map(|(&s, &t)| s.max(0.0) - s * t + (-s.abs()).exp().ln_1p())
        .sum();
    Ok(total / logits.len() as f64)
}

/// Central finite differences of a scalar function, one coordinate at a time.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut out = vec![0.0; x.numel()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        *o = (plus - minus) / (2.0 * eps);
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

/// Largest elementwise relative error, with magnitudes below `1e-6` treated
/// as `1e-6`.
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_expansion() {
        let b = t(&[2, 2], &[3.0, 0.0, 0.0, 5.0]);
        assert_eq!(matmul(&Tensor::eye(2), &b).unwrap(), b);
        let p = matmul(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(p.data(), &[11.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let err = matmul(&Tensor::ones(&[2, 3]), &Tensor::ones(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_columns(&Tensor::zeros(&[2, 2])).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.5));
        let s = softmax_columns(&t(&[2, 1], &[2f64.ln(), 0.0])).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let s = softmax_columns(&t(&[2, 1], &[1000.0, 0.0])).unwrap();
        assert!(s.is_finite());
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] < 1e-300);
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        let tiny = sigmoid(-800.0);
        assert!(tiny.is_finite() && tiny >= 0.0 && tiny < 1e-300);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn gap_examples() {
        let g = gap(&t(&[1, 2, 2], &[1.0, 3.0, 5.0, 7.0])).unwrap();
        assert_eq!(g.data(), &[4.0]);
        let g = gap(&Tensor::full(&[3, 2, 5], 2.5)).unwrap();
        assert_eq!(g.data(), &[2.5, 2.5, 2.5]);
    }

    #[test]
    fn mul_broadcast_identity_and_zero() {
        let f = Tensor::uniform(&[3, 2, 4], 1.0, &mut rng(1));
        assert_eq!(mul_broadcast(&f, &Tensor::ones(&[2, 4])).unwrap(), f);
        let z = mul_broadcast(&f, &Tensor::zeros(&[2, 4])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(mul_broadcast(&f, &Tensor::ones(&[4, 2])).is_err());
    }

    #[test]
    fn mul_broadcast_matches_triple_loop() {
        let mut r = rng(2);
        let f = Tensor::uniform(&[4, 3, 5], 2.0, &mut r);
        let a = Tensor::uniform(&[3, 5], 2.0, &mut r);
        let out = mul_broadcast(&f, &a).unwrap();
        for c in 0..4 {
            for y in 0..3 {
                for x in 0..5 {
                    let expect = f.data()[(c * 3 + y) * 5 + x] * a.data()[y * 5 + x];
                    assert_eq!(out.data()[(c * 3 + y) * 5 + x], expect);
                }
            }
        }
    }

    #[test]
    fn conv_one_by_one_identity() {
        let x = Tensor::uniform(&[3, 4, 5], 1.0, &mut rng(3));
        let mut k = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            k.data_mut()[c * 3 + c] = 1.0;
        }
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_all_ones_on_constant_image() {
        let c = 0.7;
        let x = Tensor::full(&[1, 5, 5], c);
        let out = conv2d(&x, &Tensor::ones(&[1, 1, 3, 3]), 1, 1).unwrap();
        assert_eq!(out.shape(), &[1, 5, 5]);
        // interior sees 9 taps, edges 6, corners 4
        assert!((out.data()[2 * 5 + 2] - 9.0 * c).abs() < 1e-12);
        assert!((out.data()[2] - 6.0 * c).abs() < 1e-12);
        assert!((out.data()[0] - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn conv_stride_output_size_and_errors() {
        let x = Tensor::ones(&[2, 8, 8]);
        let k = Tensor::ones(&[4, 2, 3, 3]);
        assert_eq!(conv2d(&x, &k, 2, 1).unwrap().shape(), &[4, 4, 4]);
        assert!(conv2d(&Tensor::ones(&[2, 1, 1]), &k, 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::ones(&[4, 2, 2, 2]), 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::ones(&[4, 3, 3, 3]), 1, 1).is_err());
    }

    #[test]
    fn sigmoid_ce_examples() {
        let l = sigmoid_ce(&[0.0; 4], &[1.0, 0.0, 1.0, 1.0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let l = sigmoid_ce(&[1e3, -1e3], &[1.0, 0.0]).unwrap();
        assert!(l.abs() < 1e-300);
        assert!(sigmoid_ce(&[0.0; 3], &[0.0; 2]).is_err());
    }

    #[test]
    fn sigmoid_ce_matches_direct_formula() {
        let mut r = rng(4);
        let s = Tensor::uniform(&[6], 4.0, &mut r);
        let tgt = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let direct: f64 = s
            .data()
            .iter()
            .zip(&tgt)
            .map(|(&x, &y)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 6.0;
        assert!((sigmoid_ce(s.data(), &tgt).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn backward_of_linear_sum() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[1, 3], &[0.5, -1.0, 2.0]));
        let x = g.leaf(t(&[3, 1], &[1.0, 2.0, 3.0]));
        let y = g.matmul(w, x).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));
        g.reset_grads();
        g.backward(s).unwrap();
    }

    #[test]
    fn one_minus_rejects_out_of_range() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2], &[0.2, 1.5]));
        assert!(matches!(g.one_minus(a), Err(Error::Contract(_))));
    }

    #[test]
    fn finite_diff_analytic_cases() {
        let x = t(&[2], &[1.0, 2.0]);
        let d = finite_diff_grad(|v| v.data().iter().map(|a| a * a).sum(), &x, 1e-5);
        assert!((d.data()[0] - 2.0).abs() < 1e-8 && (d.data()[1] - 4.0).abs() < 1e-8);
        let d = finite_diff_grad(
            |v| v.data().iter().map(|&a| sigmoid(a)).sum(),
            &Tensor::zeros(&[3]),
            1e-5,
        );
        assert!(d.data().iter().all(|v| (v - 0.25).abs() < 1e-9));
    }

    #[test]
    fn affinity_swap_is_exact_transpose() {
        let mut r = rng(5);
        let fm = Tensor::uniform(&[5, 6], 1.0, &mut r);
        let fn_ = Tensor::uniform(&[5, 6], 1.0, &mut r);
        let w = Tensor::uniform(&[5, 5], 1.0, &mut r);
        let p = affinity(&fm, &w, &fn_).unwrap();
        let q = affinity(&fn_, &w, &fm).unwrap();
        assert_eq!(p.transpose().unwrap(), q);
    }

    proptest! {
        #[test]
        fn softmax_columns_normalized(r in 1usize..8, c in 1usize..8, seed in any::<u64>(), scale in 0.1f64..50.0) {
            let x = Tensor::uniform(&[r, c], scale, &mut rng(seed));
            let s = softmax_columns(&x).unwrap();
            for j in 0..c {
                let col: f64 = (0..r).map(|i| s.data()[i * c + j]).sum();
                prop_assert!((col - 1.0).abs() < 1e-9);
            }
            prop_assert!(s.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn matmul_associative(m in 1usize..6, k in 1usize..6, n in 1usize..6, p in 1usize..6, seed in any::<u64>()) {
            let mut r = rng(seed);
            let a = Tensor::uniform(&[m, k], 1.0, &mut r);
            let b = Tensor::uniform(&[k, n], 1.0, &mut r);
            let c = Tensor::uniform(&[n, p], 1.0, &mut r);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            prop_assert!(max_rel_err(&left, &right) < 1e-9);
        }
    }
}
