//! Parameter containers, layer helpers and the momentum-SGD optimizer.

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Fnv, Tensor};

/// An ordered, named set of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.tensors
            .iter_mut()
            .for_each(|t| t.set_requires_grad(on));
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Records every parameter as a tape leaf, in order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t)).collect()
    }

    pub fn accumulate(&mut self, vars: &[Var], grads: &Gradients) {
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            grads.accumulate(v, t);
        }
    }

    /// Digest over names and exact parameter bits.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv::new();
        for (n, t) in self.iter() {
            h.write(n.as_bytes());
            h.write(&t.digest().to_le_bytes());
        }
        h.finish()
    }

    /// Digest over accumulated gradient buffers (absent buffers hash as
    /// a marker, so "never written" is distinguishable from zeros).
    pub fn grad_digest(&self) -> u64 {
        let mut h = Fnv::new();
        for t in &self.tensors {
            match t.grad() {
                None => h.write(b"-"),
                Some(g) => g.iter().for_each(|v| h.write(&v.to_bits().to_le_bytes())),
            }
        }
        h.finish()
    }

    /// Replaces values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = other
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::format(format!("missing tensor {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::format(format!(
                    "tensor {name}: expected shape {:?}, found {:?}",
                    t.shape(),
                    src.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// He-normal initialization for a weight with the given fan-in.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Dense layer `x[B×in] · w[in×out] + b[out]`.
pub fn dense(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row_bias(y, b)
}

/// Multilayer perceptron over `(weight, bias)` pairs, relu between layers
/// and none after the last.
pub fn mlp(tape: &mut Tape, x: Var, layers: &[Var]) -> Result<Var> {
    let mut h = x;
    let count = layers.len() / 2;
    for (i, wb) in layers.chunks(2).enumerate() {
        h = dense(tape, h, wb[0], wb[1])?;
        if i + 1 < count {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Adds `(w{i}, b{i})` dense layers for the given widths to `params`.
/// The final layer is zero-initialized when `zero_last` is set.
pub fn push_mlp(
    params: &mut Params,
    prefix: &str,
    widths: &[usize],
    zero_last: bool,
    rng: &mut impl Rng,
) {
    let layers = widths.len() - 1;
    for (i, pair) in widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let w = if zero_last && i + 1 == layers {
            Tensor::zeros(&[fan_in, fan_out])
        } else {
            he_normal(&[fan_in, fan_out], fan_in, rng)
        };
        params.push(format!("{prefix}.w{i}"), w.with_requires_grad());
        params.push(
            format!("{prefix}.b{i}"),
            Tensor::zeros(&[fan_out]).with_requires_grad(),
        );
    }
}

/// Stochastic gradient descent with heavy-ball momentum:
/// `v <- mu v + g; theta <- theta - lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumSgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl MomentumSgd {
    /// Zero velocity buffers shaped like `params`, in order.
    pub fn new<'a>(lr: f64, momentum: f64, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let velocity = params
            .into_iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            lr,
            momentum,
            velocity,
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn velocity_mut(&mut self) -> &mut [Tensor] {
        &mut self.velocity
    }

    /// Applies one update from the accumulated gradients and clears them.
    /// Parameters without a gradient are left untouched.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>) {
        let mut count = 0;
        for (t, v) in params.into_iter().zip(&mut self.velocity) {
            count += 1;
            assert_eq!(t.shape(), v.shape(), "optimizer/parameter mismatch");
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for (vk, gk) in v.data_mut().iter_mut().zip(&g) {
                *vk = self.momentum * *vk + gk;
            }
            for (pk, vk) in t.data_mut().iter_mut().zip(v.data()) {
                *pk -= self.lr * vk;
            }
            t.zero_grad();
        }
        assert_eq!(count, self.velocity.len(), "optimizer/parameter mismatch");
    }
}
