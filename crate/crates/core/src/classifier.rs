//! Digit-style classifier: two conv + max-pool blocks, three dense layers.

use rand::Rng;

use crate::augment::check_one_hot;
use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{dense, he_normal, Params};
use crate::tensor::Tensor;

/// Input side length expected by the classifier.
pub const INPUT_SIDE: usize = 32;
const CONV_WIDTHS: [usize; 2] = [32, 64];
const KERNEL: usize = 5;
const DENSE_WIDTHS: [usize; 2] = [384, 192];
// 32 -conv5-> 28 -pool-> 14 -conv5-> 10 -pool-> 5
const FLAT_SIDE: usize = 5;

/// `conv5×5(C→32)+relu+pool2 → conv5×5(32→64)+relu+pool2 → dense 384 →
/// dense 192 → dense K`, valid convolutions throughout.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub params: Params,
    channels: usize,
    classes: usize,
}

impl Classifier {
    pub fn new(channels: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let mut params = Params::new();
        let mut in_ch = channels;
        for (i, &out) in CONV_WIDTHS.iter().enumerate() {
            let fan_in = in_ch * KERNEL * KERNEL;
            params.push(
                format!("cls.conv{i}.w"),
                he_normal(&[out, in_ch, KERNEL, KERNEL], fan_in, rng).with_requires_grad(),
            );
            params.push(
                format!("cls.conv{i}.b"),
                Tensor::zeros(&[out]).with_requires_grad(),
            );
            in_ch = out;
        }
        let widths = [
            CONV_WIDTHS[1] * FLAT_SIDE * FLAT_SIDE,
            DENSE_WIDTHS[0],
            DENSE_WIDTHS[1],
            classes,
        ];
        for (i, pair) in widths.windows(2).enumerate() {
            params.push(
                format!("cls.fc{i}.w"),
                he_normal(&[pair[0], pair[1]], pair[0], rng).with_requires_grad(),
            );
            params.push(
                format!("cls.fc{i}.b"),
                Tensor::zeros(&[pair[1]]).with_requires_grad(),
            );
        }
        Self {
            params,
            channels,
            classes,
        }
    }

    /// Rebuilds a classifier from named tensors, inferring channel and class
    /// counts from the first conv and last dense weights.
    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::format(format!("missing tensor {name}")))
        };
        let conv0 = find("cls.conv0.w")?;
        let fc2 = find("cls.fc2.w")?;
        if conv0.rank() != 4 || fc2.rank() != 2 {
            return Err(Error::format("classifier tensors have unexpected rank"));
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = Self::new(conv0.shape()[1], fc2.shape()[1], &mut rng);
        net.params.load_from(tensors)?;
        Ok(net)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.params.set_trainable(on);
    }

    pub fn digest(&self) -> u64 {
        self.params.digest()
    }

    /// Records the logits `[B×K]` of `x[B×C×32×32]`; returns the bound
    /// parameter handles alongside for gradient accumulation.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<Var>)> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != self.channels || s[2] != INPUT_SIDE || s[3] != INPUT_SIDE {
            return Err(Error::dim(format!(
                "classifier expects [B×{}×{INPUT_SIDE}×{INPUT_SIDE}], got {s:?}",
                self.channels
            )));
        }
        let b = s[0];
        let v = self.params.bind(tape);
        let mut h = x;
        for blk in 0..2 {
            let c = tape.conv2d(h, v[2 * blk], 1, 0)?;
            let c = tape.add_channel_bias(c, v[2 * blk + 1])?;
            let r = tape.relu(c);
            h = tape.maxpool2d(r, 2)?;
        }
        let mut h = tape.reshape(h, &[b, CONV_WIDTHS[1] * FLAT_SIDE * FLAT_SIDE])?;
        for layer in 0..3 {
            h = dense(tape, h, v[4 + 2 * layer], v[5 + 2 * layer])?;
            if layer < 2 {
                h = tape.relu(h);
            }
        }
        Ok((h, v))
    }

    pub fn accumulate(&mut self, vars: &[Var], grads: &Gradients) {
        self.params.accumulate(vars, grads);
    }

    /// Logits for a whole set, evaluated in chunks.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        const CHUNK: usize = 256;
        let n = images.shape()[0];
        let mut data = Vec::with_capacity(n * self.classes);
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let mut tape = Tape::new();
            let x = tape.constant(images.slice_batch(start..end)?);
            let (l, _) = self.forward(&mut tape, x)?;
            data.extend_from_slice(tape.value(l).data());
            start = end;
        }
        Tensor::new(&[n, self.classes], data)
    }
}

/// Mean over the batch of `−log softmax(logits)[true class]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &Tensor) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || targets.shape() != s.as_slice() {
        return Err(Error::dim(format!(
            "cross_entropy: logits {s:?} against targets {:?}",
            targets.shape()
        )));
    }
    check_one_hot(targets, s[1])?;
    let lp = tape.log_softmax(logits)?;
    let y = tape.constant(targets.clone());
    let picked = tape.mul(lp, y)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / s[0] as f64))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let k = logits.len() / labels.len();
    let hits = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    hits as f64 / labels.len() as f64
}
