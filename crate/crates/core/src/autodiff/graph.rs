use crate::autodiff::kernels::{self, ConvGeom, PoolGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Per-channel statistics of one training-mode batch norm call.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance over batch and spatial positions.
    pub var: Vec<f64>,
    /// Number of values averaged per channel.
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Silu(Var),
    Sigmoid(Var),
    Relu(Var),
    Atan(Var),
    MaxPool {
        input: Var,
        arg: Vec<u32>,
        geom: PoolGeom,
    },
    Upsample2x {
        input: Var,
        planes: usize,
        h: usize,
        w: usize,
    },
    Concat(Vec<Var>),
    SliceChannels {
        input: Var,
        start: usize,
    },
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        batch: usize,
        in_f: usize,
        out_f: usize,
    },
    ScaleChannels {
        input: Var,
        scale: Var,
    },
    Gather {
        input: Var,
        index: Vec<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Min(Var, Var),
    Max(Var, Var),
    Affine {
        input: Var,
        scale: f64,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A dynamically recorded computation. Operations append nodes; `backward`
/// walks them in reverse and accumulates gradients into the leaves.
///
/// Leaf gradients persist across `backward` calls and add up until
/// [`Graph::zero_grad`] is called. Interior nodes keep no gradient.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn add_owned(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.grad().is_none());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Gradients are tracked when the tensor requires them.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let rg = tensor.requires_grad();
        let value = Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec())
            .expect("tensor shape is already consistent");
        self.push(value, Op::Leaf, rg)
    }

    /// Records a leaf that takes ownership of `tensor`.
    pub fn input(&mut self, mut tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        tensor.take_grad();
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf, rg)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut t = tensor;
        t.take_grad();
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = &mut n.grad {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        };
        let (n, cin, h, wd) = x.dims4().map_err(|_| mismatch())?;
        let (cout, wcin, kh, kw) = w.dims4().map_err(|_| mismatch())?;
        if wcin != cin || kh != kw || kh == 0 {
            return Err(mismatch());
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kh {
            return Err(mismatch());
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![cout],
                    rhs: self.value(b).shape().to_vec(),
                });
            }
        }
        let geom = ConvGeom {
            batch: n,
            in_ch: cin,
            in_h: h,
            in_w: wd,
            out_ch: cout,
            kernel: kh,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (wd + 2 * pad - kh) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            x.data(),
            w.data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![n, cout, geom.out_h, geom.out_w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Batch normalization over (batch, height, width) per channel.
    ///
    /// In training mode the batch statistics are used and returned so the
    /// caller can update its running estimates; otherwise `running` supplies
    /// the mean and variance.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: (&[f64], &[f64]),
        eps: f64,
        training: bool,
    ) -> Result<(Var, Option<BatchStats>)> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "batchnorm eps must be > 0, got {eps}"
            )));
        }
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        for (name, len) in [
            ("gamma", self.value(gamma).numel()),
            ("beta", self.value(beta).numel()),
            ("running_mean", running.0.len()),
            ("running_var", running.1.len()),
        ] {
            if len != c {
                return Err(Error::InvalidArgument(format!(
                    "batchnorm {name} has {len} entries for {c} channels"
                )));
            }
        }
        let plane = h * w;
        let count = n * plane;
        let xd = x.data();
        let (mean, var) = if training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    let o = (b * c + ch) * plane;
                    s += xd[o..o + plane].iter().sum::<f64>();
                }
                let m = s / count as f64;
                let mut ss = 0.0;
                for b in 0..n {
                    let o = (b * c + ch) * plane;
                    ss += xd[o..o + plane].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = ss / count as f64;
            }
            (mean, var)
        } else {
            (running.0.to_vec(), running.1.to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * plane;
                for i in o..o + plane {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            rg,
        );
        let stats = training.then_some(BatchStats { mean, var, count });
        Ok((v, stats))
    }

    fn unary(&mut self, input: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(input);
        self.push(value, op, rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn atan(&mut self, x: Var) -> Var {
        self.unary(x, f64::atan, Op::Atan(x))
    }

    /// `scale·x + offset`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        self.unary(x, |v| scale * v + offset, Op::Affine { input: x, scale })
    }

    pub fn maxpool2d(&mut self, input: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        if kernel == 0 || stride == 0 {
            return Err(Error::InvalidArgument(
                "maxpool kernel and stride must be >= 1".into(),
            ));
        }
        if pad >= kernel || h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(Error::InvalidArgument(format!(
                "maxpool window {kernel} (pad {pad}) does not fit a {h}x{w} input"
            )));
        }
        let geom = PoolGeom {
            planes: n * c,
            in_h: h,
            in_w: w,
            kernel,
            stride,
            pad,
            out_h: (h + 2 * pad - kernel) / stride + 1,
            out_w: (w + 2 * pad - kernel) / stride + 1,
        };
        let (out, arg) = kernels::maxpool_forward(x.data(), &geom);
        let value = Tensor::new(vec![n, c, geom.out_h, geom.out_w], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::MaxPool { input, arg, geom }, rg))
    }

    pub fn upsample_nearest2x(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument("upsample of an empty map".into()));
        }
        let out = kernels::upsample2x_forward(self.value(input).data(), n * c, h, w);
        let value = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        let rg = self.rg(input);
        Ok(self.push(
            value,
            Op::Upsample2x {
                input,
                planes: n * c,
                h,
                w,
            },
            rg,
        ))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::Empty("concat_channels"))?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut total = 0;
        for &v in inputs {
            let (vn, vc, vh, vw) = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(v).shape().to_vec(),
                });
            }
            total += vc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = Tensor::new(vec![n, total, h, w], out)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::Concat(inputs.to_vec()), rg))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if start + len > c {
            return Err(Error::InvalidArgument(format!(
                "channel slice {start}..{} exceeds {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let o = (b * c + start) * plane;
            out.extend_from_slice(&x[o..o + len * plane]);
        }
        let value = Tensor::new(vec![n, len, h, w], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::SliceChannels { input, start }, rg))
    }

    /// Mean over each channel's spatial positions; output is `N×C×1×1`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let plane = h * w;
        if plane == 0 {
            return Err(Error::InvalidArgument("global pool of an empty map".into()));
        }
        let x = self.value(input).data();
        let out = (0..n * c)
            .map(|p| x[p * plane..(p + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(vec![n, c, 1, 1], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::GlobalAvgPool(input), rg))
    }

    /// Affine map `y = x·Wᵀ + b`. The input is read as `N×F` (trailing
    /// dimensions flattened); `weight` is `O×F`, `bias` is `O`.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let batch = *x.shape().first().ok_or(Error::Empty("fully_connected input"))?;
        let (out_f, in_f) = match w.shape() {
            &[o, f] => (o, f),
            other => {
                return Err(Error::ShapeMismatch {
                    op: "fully_connected",
                    lhs: x.shape().to_vec(),
                    rhs: other.to_vec(),
                })
            }
        };
        if batch == 0 || x.numel() != batch * in_f {
            return Err(Error::ShapeMismatch {
                op: "fully_connected",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; batch * out_f];
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [out_f] {
                return Err(Error::ShapeMismatch {
                    op: "fully_connected bias",
                    lhs: vec![out_f],
                    rhs: bv.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(out_f) {
                row.copy_from_slice(bv.data());
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        kernels::gemm(
            batch,
            in_f,
            out_f,
            x.data(),
            (in_f, 1),
            w.data(),
            (1, in_f),
            beta,
            &mut out,
        );
        let value = Tensor::new(vec![batch, out_f], out)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
                batch,
                in_f,
                out_f,
            },
            rg,
        ))
    }

    /// Multiplies channel `c` of batch item `n` by `scale[n, c]`.
    pub fn scale_channels(&mut self, input: Var, scale: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let s = self.value(scale);
        if s.numel() != n * c || s.shape().first() != Some(&n) {
            return Err(Error::ShapeMismatch {
                op: "scale_channels",
                lhs: self.value(input).shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let plane = h * w;
        let x = self.value(input).data();
        let sd = s.data();
        let mut out = vec![0.0; x.len()];
        for p in 0..n * c {
            for i in p * plane..(p + 1) * plane {
                out[i] = x[i] * sd[p];
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(input) || self.rg(scale);
        Ok(self.push(value, Op::ScaleChannels { input, scale }, rg))
    }

    /// Picks flat elements of `input` into a 1-d tensor.
    pub fn gather(&mut self, input: Var, index: Vec<usize>) -> Result<Var> {
        let x = self.value(input).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for {} elements",
                x.len()
            )));
        }
        let out: Vec<f64> = index.iter().map(|&i| x[i]).collect();
        let value = Tensor::new(vec![out.len()], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Gather { input, index }, rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; on ties the gradient flows to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("min", a, b, |x, y| if x <= y { x } else { y }, Op::Min(a, b))
    }

    /// Elementwise maximum; on ties the gradient flows to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("max", a, b, |x, y| if x >= y { x } else { y }, Op::Max(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean of all elements; the mean of an empty tensor is 0.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = if n == 0 {
            0.0
        } else {
            self.value(x).data().iter().sum::<f64>() / n as f64
        };
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Elementwise binary cross-entropy of `sigmoid(logits)` against fixed
    /// targets, computed in log-sum-exp form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<f64>) -> Result<Var> {
        let x = self.value(logits);
        if x.numel() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: x.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let data = x
            .data()
            .iter()
            .zip(&targets)
            .map(|(&z, &t)| softplus(z) - t * z)
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(logits);
        Ok(self.push(value, Op::BceWithLogits { logits, targets }, rg))
    }

    /// Space-to-depth 2×2 slicing: `N×C×H×W → N×4C×H/2×W/2`.
    pub fn space_to_depth(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "space-to-depth needs even spatial size, got {h}x{w}"
            )));
        }
        let index = kernels::space_to_depth_index(n, c, h, w);
        let g = self.gather(input, index)?;
        self.reshape(g, &[n, 4 * c, h / 2, w / 2])
    }

    /// Back-propagates from the scalar `output`, adding `∂output/∂leaf` into
    /// every gradient-tracking leaf.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(Error::NonScalarBackward(out.shape().to_vec()));
        }
        if !self.rg(output) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let y = node.value.data();
            let val = |v: Var| self.nodes[v.0].value.data();
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(dy);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let g = kernels::conv2d_backward(
                        val(*input),
                        val(*weight),
                        &dy,
                        geom,
                        rg(*input),
                        rg(*weight),
                        bias.is_some_and(rg),
                    );
                    if let Some(d) = g.input {
                        add_owned(&mut grads, *input, d);
                    }
                    if let Some(d) = g.weight {
                        add_owned(&mut grads, *weight, d);
                    }
                    if let (Some(b), Some(d)) = (bias, g.bias) {
                        add_owned(&mut grads, *b, d);
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    training,
                } => {
                    let (n, c, h, w) = self.nodes[input.0].value.dims4()?;
                    let plane = h * w;
                    let count = (n * plane) as f64;
                    let mut sum_dy = vec![0.0; c];
                    let mut sum_dy_xhat = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let o = (b * c + ch) * plane;
                            for k in o..o + plane {
                                sum_dy[ch] += dy[k];
                                sum_dy_xhat[ch] += dy[k] * xhat[k];
                            }
                        }
                    }
                    if rg(*input) {
                        let gm = val(*gamma);
                        let mut dx = vec![0.0; dy.len()];
                        for b in 0..n {
                            for ch in 0..c {
                                let o = (b * c + ch) * plane;
                                let s = gm[ch] * inv_std[ch];
                                for k in o..o + plane {
                                    dx[k] = if *training {
                                        s / count
                                            * (count * dy[k]
                                                - sum_dy[ch]
                                                - xhat[k] * sum_dy_xhat[ch])
                                    } else {
                                        s * dy[k]
                                    };
                                }
                            }
                        }
                        add_owned(&mut grads, *input, dx);
                    }
                    if rg(*gamma) {
                        add_owned(&mut grads, *gamma, sum_dy_xhat);
                    }
                    if rg(*beta) {
                        add_owned(&mut grads, *beta, sum_dy);
                    }
                }
                Op::Silu(x) => {
                    let d = val(*x)
                        .iter()
                        .zip(&dy)
                        .map(|(&v, &g)| {
                            let s = sigmoid(v);
                            g * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    add_owned(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let d = y.iter().zip(&dy).map(|(&s, &g)| g * s * (1.0 - s)).collect();
                    add_owned(&mut grads, *x, d);
                }
                Op::Relu(x) => {
                    let d = val(*x)
                        .iter()
                        .zip(&dy)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    add_owned(&mut grads, *x, d);
                }
                Op::Atan(x) => {
                    let d = val(*x)
                        .iter()
                        .zip(&dy)
                        .map(|(&v, &g)| g / (1.0 + v * v))
                        .collect();
                    add_owned(&mut grads, *x, d);
                }
                Op::Affine { input, scale } => {
                    let d = dy.iter().map(|g| g * scale).collect();
                    add_owned(&mut grads, *input, d);
                }
                Op::MaxPool { input, arg, geom } => {
                    add_owned(&mut grads, *input, kernels::maxpool_backward(&dy, arg, geom));
                }
                Op::Upsample2x {
                    input,
                    planes,
                    h,
                    w,
                } => {
                    add_owned(
                        &mut grads,
                        *input,
                        kernels::upsample2x_backward(&dy, *planes, *h, *w),
                    );
                }
                Op::Concat(inputs) => {
                    let (n, total, h, w) = node.value.dims4()?;
                    let plane = h * w;
                    let mut offset = 0;
                    for &v in inputs {
                        let c = self.nodes[v.0].value.shape()[1];
                        if rg(v) {
                            let mut d = Vec::with_capacity(n * c * plane);
                            for b in 0..n {
                                let o = (b * total + offset) * plane;
                                d.extend_from_slice(&dy[o..o + c * plane]);
                            }
                            add_owned(&mut grads, v, d);
                        }
                        offset += c;
                    }
                }
                Op::SliceChannels { input, start } => {
                    let (n, c, h, w) = self.nodes[input.0].value.dims4()?;
                    let len = node.value.shape()[1];
                    let plane = h * w;
                    let mut d = vec![0.0; n * c * plane];
                    for b in 0..n {
                        let o = (b * c + start) * plane;
                        d[o..o + len * plane]
                            .copy_from_slice(&dy[b * len * plane..(b + 1) * len * plane]);
                    }
                    add_owned(&mut grads, *input, d);
                }
                Op::GlobalAvgPool(x) => {
                    let (n, c, h, w) = self.nodes[x.0].value.dims4()?;
                    let plane = h * w;
                    let mut d = vec![0.0; n * c * plane];
                    for p in 0..n * c {
                        let g = dy[p] / plane as f64;
                        d[p * plane..(p + 1) * plane].iter_mut().for_each(|v| *v = g);
                    }
                    add_owned(&mut grads, *x, d);
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                    batch,
                    in_f,
                    out_f,
                } => {
                    let (batch, in_f, out_f) = (*batch, *in_f, *out_f);
                    if rg(*input) {
                        let mut d = vec![0.0; batch * in_f];
                        kernels::gemm(
                            batch,
                            out_f,
                            in_f,
                            &dy,
                            (out_f, 1),
                            val(*weight),
                            (in_f, 1),
                            0.0,
                            &mut d,
                        );
                        add_owned(&mut grads, *input, d);
                    }
                    if rg(*weight) {
                        let mut d = vec![0.0; out_f * in_f];
                        kernels::gemm(
                            out_f,
                            batch,
                            in_f,
                            &dy,
                            (1, out_f),
                            val(*input),
                            (in_f, 1),
                            0.0,
                            &mut d,
                        );
                        add_owned(&mut grads, *weight, d);
                    }
                    if let Some(b) = bias.filter(|b| rg(*b)) {
                        let mut d = vec![0.0; out_f];
                        for row in dy.chunks(out_f) {
                            d.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                        }
                        add_owned(&mut grads, b, d);
                    }
                }
                Op::ScaleChannels { input, scale } => {
                    let x = val(*input);
                    let s = val(*scale);
                    let plane = x.len() / s.len();
                    if rg(*input) {
                        let d = dy
                            .iter()
                            .enumerate()
                            .map(|(k, g)| g * s[k / plane])
                            .collect();
                        add_owned(&mut grads, *input, d);
                    }
                    if rg(*scale) {
                        let d = (0..s.len())
                            .map(|p| {
                                (p * plane..(p + 1) * plane)
                                    .map(|k| dy[k] * x[k])
                                    .sum::<f64>()
                            })
                            .collect();
                        add_owned(&mut grads, *scale, d);
                    }
                }
                Op::Gather { input, index } => {
                    let mut d = vec![0.0; self.nodes[input.0].value.numel()];
                    for (&k, g) in index.iter().zip(&dy) {
                        d[k] += g;
                    }
                    add_owned(&mut grads, *input, d);
                }
                Op::Add(a, b) => {
                    if rg(*a) {
                        add_into(&mut grads, *a, &dy);
                    }
                    if rg(*b) {
                        add_into(&mut grads, *b, &dy);
                    }
                }
                Op::Sub(a, b) => {
                    if rg(*a) {
                        add_into(&mut grads, *a, &dy);
                    }
                    if rg(*b) {
                        add_owned(&mut grads, *b, dy.iter().map(|g| -g).collect());
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if rg(*a) {
                        add_owned(&mut grads, *a, dy.iter().zip(bv).map(|(g, y)| g * y).collect());
                    }
                    if rg(*b) {
                        add_owned(&mut grads, *b, dy.iter().zip(av).map(|(g, x)| g * x).collect());
                    }
                }
                Op::Div(a, b) => {
                    let bv = val(*b);
                    if rg(*a) {
                        add_owned(&mut grads, *a, dy.iter().zip(bv).map(|(g, d)| g / d).collect());
                    }
                    if rg(*b) {
                        let d = dy
                            .iter()
                            .zip(y)
                            .zip(bv)
                            .map(|((g, q), d)| -g * q / d)
                            .collect();
                        add_owned(&mut grads, *b, d);
                    }
                }
                Op::Min(a, b) | Op::Max(a, b) => {
                    let is_min = matches!(node.op, Op::Min(..));
                    let (av, bv) = (val(*a), val(*b));
                    let pick_a: Vec<bool> = av
                        .iter()
                        .zip(bv)
                        .map(|(x, y)| if is_min { x <= y } else { x >= y })
                        .collect();
                    if rg(*a) {
                        let d = dy
                            .iter()
                            .zip(&pick_a)
                            .map(|(g, &p)| if p { *g } else { 0.0 })
                            .collect();
                        add_owned(&mut grads, *a, d);
                    }
                    if rg(*b) {
                        let d = dy
                            .iter()
                            .zip(&pick_a)
                            .map(|(g, &p)| if p { 0.0 } else { *g })
                            .collect();
                        add_owned(&mut grads, *b, d);
                    }
                }
                Op::Sum(x) => {
                    let n = self.nodes[x.0].value.numel();
                    add_owned(&mut grads, *x, vec![dy[0]; n]);
                }
                Op::Mean(x) => {
                    let n = self.nodes[x.0].value.numel();
                    if n > 0 {
                        add_owned(&mut grads, *x, vec![dy[0] / n as f64; n]);
                    }
                }
                Op::Reshape(x) => {
                    add_owned(&mut grads, *x, dy);
                }
                Op::BceWithLogits { logits, targets } => {
                    let d = val(*logits)
                        .iter()
                        .zip(targets)
                        .zip(&dy)
                        .map(|((&z, &t), g)| g * (sigmoid(z) - t))
                        .collect();
                    add_owned(&mut grads, *logits, d);
                }
            }
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut self.nodes[i];
                debug_assert!(matches!(node.op, Op::Leaf));
                match &mut node.grad {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}
