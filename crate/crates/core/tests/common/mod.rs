//! Shared test support: finite-difference gradient checks and brute-force
//! reference implementations.
#![allow(dead_code)]

pub mod suites;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tosuda::style::StyleExtractor;
use tosuda::{Result, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Graph builder used by [`grad_check`]: receives one leaf per input.
pub type Build<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Largest elementwise relative error between the analytic gradient and a
/// central difference, over every input (or `sample` random coordinates
/// per input). Non-scalar outputs are reduced with fixed random weights.
/// Entries smaller than 1% of an input's largest gradient are compared on
/// that scale.
pub fn grad_check(
    inputs: &[Tensor],
    build: Build<'_>,
    eps: f64,
    sample: Option<usize>,
    seed: u64,
) -> f64 {
    let mut r = rng(seed);
    let probe_out = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars).expect("graph builds");
        tape.value(out).clone()
    };
    let weights = Tensor::rand_uniform(probe_out.shape(), -1.0, 1.0, &mut r);
    let scalar = |tape: &mut Tape, out: Var| -> Var {
        if tape.shape(out).is_empty() {
            return out;
        }
        let w = tape.constant(weights.clone());
        let p = tape.mul(out, w).expect("same shape");
        tape.sum(p)
    };
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars).expect("graph builds");
        let l = scalar(&mut tape, out);
        tape.value(l).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad()))
        .collect();
    let out = build(&mut tape, &vars).expect("graph builds");
    let l = scalar(&mut tape, out);
    let grads = tape.backward(l).expect("scalar loss");

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("leaf gradient").to_vec();
        let coords: Vec<usize> = match sample {
            Some(k) if k < input.len() => (0..k).map(|_| r.gen_range(0..input.len())).collect(),
            _ => (0..input.len()).collect(),
        };
        let mut numeric = Vec::with_capacity(coords.len());
        for &k in &coords {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[k] += eps;
            let up = eval(&xs);
            xs[i].data_mut()[k] -= 2.0 * eps;
            let down = eval(&xs);
            numeric.push((up - down) / (2.0 * eps));
        }
        let scale = coords
            .iter()
            .zip(&numeric)
            .map(|(&k, n)| analytic[k].abs().max(n.abs()))
            .fold(0.0f64, f64::max);
        for (&k, n) in coords.iter().zip(&numeric) {
            let a = analytic[k];
            let denom = a.abs().max(n.abs()).max(0.01 * scale).max(1e-12);
            worst = worst.max((a - n).abs() / denom);
        }
    }
    worst
}

/// Direct convolution: `out[b,o,i,j] = Σ w[o,c,p,q] · x[b,c,i·s+p−pad, j·s+q−pad]`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[b, o, oh, ow]);
    for bi in 0..b {
        for oi in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for p in 0..kh {
                            for q in 0..kw {
                                let y = (i * stride + p) as isize - pad as isize;
                                let xx = (j * stride + q) as isize - pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    acc += w.at(&[oi, ci, p, q])
                                        * x.at(&[bi, ci, y as usize, xx as usize]);
                                }
                            }
                        }
                    }
                    out.set(&[bi, oi, i, j], acc);
                }
            }
        }
    }
    out
}

/// Non-overlapping `k×k` max pooling.
pub fn maxpool2d(x: &Tensor, k: usize) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(&[s[0], s[1], s[2] / k, s[3] / k]);
    for b in 0..s[0] {
        for c in 0..s[1] {
            for i in 0..s[2] / k {
                for j in 0..s[3] / k {
                    let m = (0..k * k)
                        .map(|t| x.at(&[b, c, i * k + t / k, j * k + t % k]))
                        .fold(f64::NEG_INFINITY, f64::max);
                    out.set(&[b, c, i, j], m);
                }
            }
        }
    }
    out
}

/// Tent-kernel form of bilinear sampling with align-corners coordinates
/// and zero padding.
pub fn bilinear(x: &Tensor, coords: &Tensor) -> Tensor {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let mut out = Tensor::zeros(s);
    for b in 0..s[0] {
        for i in 0..h {
            for j in 0..w {
                let px = (coords.at(&[b, i, j, 0]) + 1.0) / 2.0 * (w - 1) as f64;
                let py = (coords.at(&[b, i, j, 1]) + 1.0) / 2.0 * (h - 1) as f64;
                for c in 0..s[1] {
                    let mut acc = 0.0;
                    for y in 0..h {
                        let wy = (1.0 - (py - y as f64).abs()).max(0.0);
                        if wy == 0.0 {
                            continue;
                        }
                        for xx in 0..w {
                            let wx = (1.0 - (px - xx as f64).abs()).max(0.0);
                            acc += wx * wy * x.at(&[b, c, y, xx]);
                        }
                    }
                    out.set(&[b, c, i, j], acc);
                }
            }
        }
    }
    out
}

/// `G[a,b] = Σ_{i,j} h[a,i,j] h[b,i,j] / (C H W)` for `h[C×H×W]`.
pub fn gram(h: &Tensor) -> Tensor {
    let s = h.shape();
    let (c, n) = (s[0], s[1] * s[2]);
    let d = h.data();
    Tensor::from_fn(&[c, c], |k| {
        let (a, b) = (k / c, k % c);
        (0..n).map(|p| d[a * n + p] * d[b * n + p]).sum::<f64>() / (c * n) as f64
    })
}

/// The extractor's tapped feature maps of one `[1×C×H×W]` image, computed
/// with direct convolution.
pub fn features(e: &StyleExtractor, x: &Tensor) -> Vec<Tensor> {
    let strides = [1, 2, 2, 2];
    let p: Vec<&Tensor> = e.params().tensors().iter().collect();
    let mut h = x.clone();
    let mut taps = Vec::new();
    for j in 0..4 {
        let conv = conv2d(&h, p[2 * j], strides[j], 1);
        let s = conv.shape().to_vec();
        let hw = s[2] * s[3];
        let bias = p[2 * j + 1].data();
        h = Tensor::from_fn(&s, |k| (conv.data()[k] + bias[(k / hw) % s[1]]).max(0.0));
        taps.push(h.clone().reshape(&s[1..]).unwrap());
    }
    taps
}

pub fn frobenius_sq(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Mean over the batch of the summed squared Gram distances to the target.
pub fn style_loss(e: &StyleExtractor, batch: &Tensor, target: &Tensor) -> f64 {
    let gt: Vec<Tensor> = features(e, target).iter().map(gram).collect();
    let n = batch.shape()[0];
    let mut total = 0.0;
    for b in 0..n {
        let x = batch.slice_batch(b..b + 1).unwrap();
        for (f, g) in features(e, &x).iter().zip(&gt) {
            total += frobenius_sq(&gram(f), g);
        }
    }
    total / n as f64
}
