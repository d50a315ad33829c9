//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node that
//! holds its output value and the identities of its inputs. Because nodes
//! are appended as they are created, the tape is always in topological
//! order and [`Tape::backward`] is a single reverse sweep.
//!
//! Nodes whose inputs are all constants (or frozen parameters) are marked
//! as not needing a gradient and are skipped during the sweep, which is how
//! frozen modules cost nothing on the backward pass.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{numel, Tensor};

/// Lower and upper clamp applied to arccos inputs before differentiation.
pub const ACOS_CLAMP: f64 = 1.0 - 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleShift(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    MaxPool { x: Var, arg: Vec<usize> },
    AvgPool { x: Var, k: usize },
    Bilinear { x: Var, coords: Var },
    AffineGrid { theta: Var, h: usize, w: usize },
    ChannelAffine { x: Var, alpha: Var, beta: Var },
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Cos(Var),
    Acos(Var),
    TriangleWave(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SelectBatch { x: Var, index: usize },
    LogSoftmax(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
pub struct Gradients {
    leaves: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a leaf, `None` if the leaf does not require one.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (zeros when disconnected) into `t.grad`,
    /// provided `t` requires a gradient.
    pub fn accumulate(&self, v: Var, t: &mut Tensor) {
        if !t.requires_grad() {
            return;
        }
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![0.0; t.len()]),
        }
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::dim(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

/// Triangle wave `arccos(cos(pi p)) / pi`, evaluated through the
/// equivalent fold `|p - 2 round(p / 2)|` which is exact on `[0, 1]`.
pub fn triangle_wave_value(p: f64) -> f64 {
    (p - 2.0 * (p / 2.0).round()).abs()
}

/// `sign(sin(pi p))`, with value zero at integer `p`.
pub fn triangle_wave_slope(p: f64) -> f64 {
    let r = p - 2.0 * (p / 2.0).round();
    if r == 0.0 || r.abs() == 1.0 {
        0.0
    } else {
        r.signum()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. It participates in differentiation iff
    /// `t.requires_grad()`; the stored value drops any accumulated grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        value.set_requires_grad(t.requires_grad());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        t.zero_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op, &[a, b])
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `scale * a + shift`.
    pub fn scale_shift(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.unary(a, Op::ScaleShift(a, scale), |x| scale * x + shift)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.scale_shift(a, s, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.data(a),
            false,
            self.data(b),
            false,
            0.0,
            &mut out,
        );
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim(format!("transpose needs a matrix, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() || shape.contains(&0) {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let data = self.data(a).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), &[a]))
    }

    /// `x[m×n] + b[n]`, broadcasting `b` over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(shape_err("add_row_bias", sx, sb));
        }
        let n = sx[1];
        let bias = self.data(b);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % n])
            .collect();
        let shape = sx.to_vec();
        Ok(self.push(shape, data, Op::AddRowBias(x, b), &[x, b]))
    }

    /// `x[B×C×H×W] + b[C]`, broadcasting `b` over batch and space.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 4 || sb != [sx[1]] {
            return Err(shape_err("add_channel_bias", sx, sb));
        }
        let (c, hw) = (sx[1], sx[2] * sx[3]);
        let bias = self.data(b);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[(i / hw) % c])
            .collect();
        let shape = sx.to_vec();
        Ok(self.push(shape, data, Op::AddChannelBias(x, b), &[x, b]))
    }

    /// Cross-correlation of `x[B×C×H×W]` with `w[F×C×kh×kw]` and symmetric
    /// zero padding `pad` (0 for a valid convolution).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err("conv2d", sx, sw));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d: stride must be positive"));
        }
        let (h, wd) = (sx[2] + 2 * pad, sx[3] + 2 * pad);
        if sw[2] > h || sw[3] > wd {
            return Err(Error::dim(format!(
                "conv2d: kernel {}x{} larger than padded input {h}x{wd}",
                sw[2], sw[3]
            )));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            h: sx[2],
            w: sx[3],
            out_ch: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            oh: (h - sw[2]) / stride + 1,
            ow: (wd - sw[3]) / stride + 1,
        };
        let out = kernels::conv2d_forward(&geom, self.data(x), self.data(w));
        let shape = vec![geom.batch, geom.out_ch, geom.oh, geom.ow];
        Ok(self.push(shape, out, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    /// Non-overlapping `k×k` max pooling.
    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || !s[2].is_multiple_of(k) || !s[3].is_multiple_of(k) {
            return Err(Error::dim(format!(
                "maxpool2d: extents {s:?} not divisible by window {k}"
            )));
        }
        let (out, arg) = kernels::maxpool_forward(self.data(x), s[0] * s[1], s[2], s[3], k);
        let shape = vec![s[0], s[1], s[2] / k, s[3] / k];
        Ok(self.push(shape, out, Op::MaxPool { x, arg }, &[x]))
    }

    /// Non-overlapping `k×k` average pooling.
    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || !s[2].is_multiple_of(k) || !s[3].is_multiple_of(k) {
            return Err(Error::dim(format!(
                "avgpool2d: extents {s:?} not divisible by window {k}"
            )));
        }
        let out = kernels::avgpool_forward(self.data(x), s[0] * s[1], s[2], s[3], k);
        let shape = vec![s[0], s[1], s[2] / k, s[3] / k];
        Ok(self.push(shape, out, Op::AvgPool { x, k }, &[x]))
    }

    /// Samples `x[B×C×H×W]` at normalized positions `coords[B×H×W×2]`
    /// (last axis `(u, v)` = (column, row), align-corners, zero padding).
    pub fn bilinear_sample(&mut self, x: Var, coords: Var) -> Result<Var> {
        let (sx, sc) = (self.shape(x), self.shape(coords));
        if sx.len() != 4 || sc != [sx[0], sx[2], sx[3], 2] {
            return Err(shape_err("bilinear_sample", sx, sc));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let out = kernels::bilinear_forward(self.data(x), self.data(coords), b, c, h, w);
        Ok(self.push(
            vec![b, c, h, w],
            out,
            Op::Bilinear { x, coords },
            &[x, coords],
        ))
    }

    /// Sampling grid `coords[B×h×w×2]` with `coords = theta · (u, v, 1)`,
    /// `(u, v)` running over the normalized output pixel centres.
    pub fn affine_grid(&mut self, theta: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(theta);
        if s.len() != 3 || s[1] != 2 || s[2] != 3 || h == 0 || w == 0 {
            return Err(Error::dim(format!("affine_grid: theta shape {s:?}")));
        }
        let b = s[0];
        let th = self.data(theta);
        let mut out = Vec::with_capacity(b * h * w * 2);
        for bi in 0..b {
            let t = &th[bi * 6..bi * 6 + 6];
            for i in 0..h {
                let v = grid_coord(i, h);
                for j in 0..w {
                    let u = grid_coord(j, w);
                    out.push(t[0] * u + t[1] * v + t[2]);
                    out.push(t[3] * u + t[4] * v + t[5]);
                }
            }
        }
        Ok(self.push(
            vec![b, h, w, 2],
            out,
            Op::AffineGrid { theta, h, w },
            &[theta],
        ))
    }

    /// `alpha[b,c] * x[b,c,h,w] + beta[b,c]`.
    pub fn channel_affine(&mut self, x: Var, alpha: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 4 {
            return Err(Error::dim(format!("channel_affine: x shape {sx:?}")));
        }
        let bc = [sx[0], sx[1]];
        if self.shape(alpha) != bc || self.shape(beta) != bc {
            return Err(shape_err("channel_affine", self.shape(alpha), &bc));
        }
        let hw = sx[2] * sx[3];
        let (a, bt) = (self.data(alpha), self.data(beta));
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| a[i / hw] * v + bt[i / hw])
            .collect();
        let shape = sx.to_vec();
        Ok(self.push(
            shape,
            data,
            Op::ChannelAffine { x, alpha, beta },
            &[x, alpha, beta],
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.data(a).iter().find(|&&x| x.is_nan() || x <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    /// Arccos. Inputs must lie in `[-1, 1]` (up to rounding); the
    /// derivative is evaluated at the input clamped to `±ACOS_CLAMP`.
    pub fn acos(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self
            .data(a)
            .iter()
            .find(|x| x.is_nan() || x.abs() > 1.0 + 1e-12)
        {
            return Err(Error::Domain(format!("arccos of {bad} outside [-1, 1]")));
        }
        Ok(self.unary(a, Op::Acos(a), |x| x.clamp(-1.0, 1.0).acos()))
    }

    pub fn triangle_wave(&mut self, a: Var) -> Var {
        self.unary(a, Op::TriangleWave(a), triangle_wave_value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.data(a).iter().sum::<f64>() / n;
        self.push(Vec::new(), vec![s], Op::Mean(a), &[a])
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_cols of nothing"));
        };
        let rows = self.shape(first).first().copied().unwrap_or(0);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(shape_err("concat_cols", self.shape(first), s));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let n = self.shape(p)[1];
                out.extend_from_slice(&self.data(p)[r * n..(r + 1) * n]);
            }
        }
        Ok(self.push(
            vec![rows, total],
            out,
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(Error::dim(format!("slice_cols {start}..{end} of {s:?}")));
        }
        let (rows, n) = (s[0], s[1]);
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        Ok(self.push(
            vec![rows, end - start],
            out,
            Op::SliceCols { x, start },
            &[x],
        ))
    }

    /// Sample `index` of the leading axis, with that axis removed.
    pub fn select_batch(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() < 2 || index >= s[0] {
            return Err(Error::dim(format!("select_batch {index} of {s:?}")));
        }
        let inner = numel(&s[1..]);
        let shape = s[1..].to_vec();
        let data = self.data(x)[index * inner..(index + 1) * inner].to_vec();
        Ok(self.push(shape, data, Op::SelectBatch { x, index }, &[x]))
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim(format!("log_softmax needs a matrix, got {s:?}")));
        }
        let n = s[1];
        let shape = s.to_vec();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(self.push(shape, out, Op::LogSoftmax(x), &[x]))
    }

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires one. Leaves unreachable from `loss` get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut leaves: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                leaves[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        if self.needs(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                if let Some(acc) = leaves[i].as_mut() {
                    acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(Gradients { leaves })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        // Adds `f(k)` into the gradient of `v` at every flat index `k`.
        let mut send = |v: Var, f: &dyn Fn(usize) -> f64, len: usize| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            slot.iter_mut().enumerate().for_each(|(k, s)| *s += f(k));
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, &|k| g[k], g.len());
                send(*b, &|k| g[k], g.len());
            }
            Op::Sub(a, b) => {
                send(*a, &|k| g[k], g.len());
                send(*b, &|k| -g[k], g.len());
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                send(*a, &|k| g[k] * db[k], g.len());
                send(*b, &|k| g[k] * da[k], g.len());
            }
            Op::ScaleShift(a, s) => send(*a, &|k| g[k] * s, g.len()),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, kk, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * kk];
                    kernels::gemm(m, n, kk, g, false, self.data(*b), true, 0.0, &mut ga);
                    send(*a, &|k| ga[k], ga.len());
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; kk * n];
                    kernels::gemm(kk, m, n, self.data(*a), true, g, false, 0.0, &mut gb);
                    send(*b, &|k| gb[k], gb.len());
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (m, n) = (s[0], s[1]);
                send(*a, &|k| g[(k % n) * m + k / n], g.len());
            }
            Op::Reshape(a) => send(*a, &|k| g[k], g.len()),
            Op::AddRowBias(x, b) => {
                send(*x, &|k| g[k], g.len());
                let n = self.value(*b).len();
                let mut gb = vec![0.0; n];
                g.iter().enumerate().for_each(|(k, v)| gb[k % n] += v);
                send(*b, &|k| gb[k], n);
            }
            Op::AddChannelBias(x, b) => {
                send(*x, &|k| g[k], g.len());
                let s = self.shape(*x);
                let (c, hw) = (s[1], s[2] * s[3]);
                let mut gb = vec![0.0; c];
                g.iter()
                    .enumerate()
                    .for_each(|(k, v)| gb[(k / hw) % c] += v);
                send(*b, &|k| gb[k], c);
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    geom,
                    self.data(*x),
                    self.data(*w),
                    g,
                    self.needs(*x),
                    self.needs(*w),
                );
                if !dx.is_empty() {
                    send(*x, &|k| dx[k], dx.len());
                }
                if !dw.is_empty() {
                    send(*w, &|k| dw[k], dw.len());
                }
            }
            Op::MaxPool { x, arg } => {
                if self.needs(*x) {
                    let mut dx = vec![0.0; self.value(*x).len()];
                    arg.iter().zip(g).for_each(|(&a, v)| dx[a] += v);
                    send(*x, &|k| dx[k], dx.len());
                }
            }
            Op::AvgPool { x, k } => {
                let s = self.shape(*x);
                let dx = kernels::avgpool_backward(g, s[0] * s[1], s[2], s[3], *k);
                send(*x, &|i| dx[i], dx.len());
            }
            Op::Bilinear { x, coords } => {
                let s = self.shape(*x);
                let (dx, dc) = kernels::bilinear_backward(
                    self.data(*x),
                    self.data(*coords),
                    g,
                    s[0],
                    s[1],
                    s[2],
                    s[3],
                );
                send(*x, &|k| dx[k], dx.len());
                send(*coords, &|k| dc[k], dc.len());
            }
            Op::AffineGrid { theta, h, w } => {
                let b = self.shape(*theta)[0];
                let mut dt = vec![0.0; b * 6];
                for bi in 0..b {
                    for i in 0..*h {
                        let v = grid_coord(i, *h);
                        for j in 0..*w {
                            let u = grid_coord(j, *w);
                            let o = ((bi * h + i) * w + j) * 2;
                            let (gu, gv) = (g[o], g[o + 1]);
                            let t = &mut dt[bi * 6..bi * 6 + 6];
                            t[0] += gu * u;
                            t[1] += gu * v;
                            t[2] += gu;
                            t[3] += gv * u;
                            t[4] += gv * v;
                            t[5] += gv;
                        }
                    }
                }
                send(*theta, &|k| dt[k], dt.len());
            }
            Op::ChannelAffine { x, alpha, beta } => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let (xd, ad) = (self.data(*x), self.data(*alpha));
                send(*x, &|k| g[k] * ad[k / hw], g.len());
                let mut ga = vec![0.0; ad.len()];
                let mut gb = vec![0.0; ad.len()];
                for (k, &gk) in g.iter().enumerate() {
                    ga[k / hw] += gk * xd[k];
                    gb[k / hw] += gk;
                }
                send(*alpha, &|k| ga[k], ga.len());
                send(*beta, &|k| gb[k], gb.len());
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                send(*a, &|k| if x[k] > 0.0 { g[k] } else { 0.0 }, g.len());
            }
            Op::Tanh(a) => send(*a, &|k| g[k] * (1.0 - out[k] * out[k]), g.len()),
            Op::Exp(a) => send(*a, &|k| g[k] * out[k], g.len()),
            Op::Log(a) => {
                let x = self.data(*a);
                send(*a, &|k| g[k] / x[k], g.len());
            }
            Op::Cos(a) => {
                let x = self.data(*a);
                send(*a, &|k| -g[k] * x[k].sin(), g.len());
            }
            Op::Acos(a) => {
                let x = self.data(*a);
                send(
                    *a,
                    &|k| {
                        let c = x[k].clamp(-ACOS_CLAMP, ACOS_CLAMP);
                        -g[k] / (1.0 - c * c).sqrt()
                    },
                    g.len(),
                );
            }
            Op::TriangleWave(a) => {
                let x = self.data(*a);
                send(*a, &|k| g[k] * triangle_wave_slope(x[k]), g.len());
            }
            Op::Sum(a) => send(*a, &|_| g[0], self.value(*a).len()),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let s = g[0] / n as f64;
                send(*a, &|_| s, n);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let n = self.shape(p)[1];
                    let off = col;
                    send(
                        p,
                        &|k| g[(k / n) * total + off + k % n],
                        self.value(p).len(),
                    );
                    col += n;
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.shape(*x)[1];
                let width = node.value.shape()[1];
                let start = *start;
                send(
                    *x,
                    &|k| {
                        let c = k % n;
                        if c >= start && c < start + width {
                            g[(k / n) * width + c - start]
                        } else {
                            0.0
                        }
                    },
                    self.value(*x).len(),
                );
            }
            Op::SelectBatch { x, index } => {
                let inner = g.len();
                let lo = index * inner;
                send(
                    *x,
                    &|k| {
                        if k >= lo && k < lo + inner {
                            g[k - lo]
                        } else {
                            0.0
                        }
                    },
                    self.value(*x).len(),
                );
            }
            Op::LogSoftmax(x) => {
                let n = node.value.shape()[1];
                let mut dx = vec![0.0; g.len()];
                for ((drow, grow), orow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let gs: f64 = grow.iter().sum();
                    for j in 0..n {
                        drow[j] = grow[j] - orow[j].exp() * gs;
                    }
                }
                send(*x, &|k| dx[k], dx.len());
            }
        }
    }
}

/// Normalized coordinate of pixel `i` along an axis of extent `n`
/// (align-corners; a single pixel sits at 0).
pub(crate) fn grid_coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}
