//! Style alignment: a frozen convolutional feature extractor, Gram matrices
//! of its tapped layers, and the style loss between augmented sources and a
//! target image.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{he_normal, Params};
use crate::tensor::Tensor;

/// Output widths of the four tapped blocks.
pub const TAP_WIDTHS: [usize; 4] = [16, 32, 64, 128];
const STRIDES: [usize; 4] = [1, 2, 2, 2];
/// Smallest input side that keeps the tap extents strictly decreasing.
pub const MIN_SIDE: usize = 8;

/// Four `3×3` conv + relu blocks (strides 1, 2, 2, 2, padding 1), each
/// output tapped. Weights never receive gradients.
#[derive(Debug)]
pub struct StyleExtractor {
    params: Params,
    evaluations: AtomicU64,
}

impl Clone for StyleExtractor {
    fn clone(&self) -> Self {
        Self {
            params: self.params.clone(),
            evaluations: AtomicU64::new(self.evaluations()),
        }
    }
}

/// Gram matrices of one image, one per tap.
#[derive(Clone, Debug, PartialEq)]
pub struct GramSet(pub Vec<Tensor>);

impl StyleExtractor {
    /// He-normal weights, zero biases.
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        let mut params = Params::new();
        let mut in_ch = channels;
        for (j, &out) in TAP_WIDTHS.iter().enumerate() {
            params.push(
                format!("style.conv{j}.w"),
                he_normal(&[out, in_ch, 3, 3], in_ch * 9, rng),
            );
            params.push(format!("style.conv{j}.b"), Tensor::zeros(&[out]));
            in_ch = out;
        }
        Self {
            params,
            evaluations: AtomicU64::new(0),
        }
    }

    /// Replaces the weights with externally supplied ones (same names and
    /// shapes as a freshly built extractor).
    pub fn load(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        self.params.load_from(tensors)?;
        self.params.set_trainable(false);
        Ok(())
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn channels(&self) -> usize {
        self.params.tensors()[0].shape()[1]
    }

    pub fn digest(&self) -> u64 {
        self.params.digest()
    }

    /// Number of feature extractions performed so far.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    /// Records the four tapped feature maps of `x[B×C×H×W]`.
    pub fn extract(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != self.channels() {
            return Err(Error::dim(format!(
                "style extractor expects [B×{}×H×W], got {s:?}",
                self.channels()
            )));
        }
        if s[2] < MIN_SIDE || s[3] < MIN_SIDE {
            return Err(Error::dim(format!(
                "style extractor needs at least {MIN_SIDE}x{MIN_SIDE} input, got {}x{}",
                s[2], s[3]
            )));
        }
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let vars = self.params.bind(tape);
        let mut h = x;
        let mut taps = Vec::with_capacity(TAP_WIDTHS.len());
        for (j, wb) in vars.chunks(2).enumerate() {
            let conv = tape.conv2d(h, wb[0], STRIDES[j], 1)?;
            let biased = tape.add_channel_bias(conv, wb[1])?;
            h = tape.relu(biased);
            taps.push(h);
        }
        Ok(taps)
    }

    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let taps = self.extract(&mut tape, xv)?;
        Ok(taps.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Gram sets of every image in a batch.
    pub fn grams(&self, x: &Tensor) -> Result<Vec<GramSet>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let taps = self.extract(&mut tape, xv)?;
        let batch = x.shape()[0];
        let mut out = Vec::with_capacity(batch);
        for b in 0..batch {
            let mut set = Vec::with_capacity(taps.len());
            for &t in &taps {
                let h = tape.select_batch(t, b)?;
                let g = gram_matrix(&mut tape, h)?;
                set.push(tape.value(g).clone());
            }
            out.push(GramSet(set));
        }
        Ok(out)
    }
}

/// `G = F Fᵀ / (C H W)` with `F` the `C×(H W)` flattening of `h[C×H×W]`.
pub fn gram_matrix(tape: &mut Tape, h: Var) -> Result<Var> {
    let s = tape.shape(h).to_vec();
    if s.len() != 3 {
        return Err(Error::dim(format!(
            "gram_matrix expects [C×H×W], got {s:?}"
        )));
    }
    let (c, hw) = (s[0], s[1] * s[2]);
    let f = tape.reshape(h, &[c, hw])?;
    let ft = tape.transpose(f)?;
    let g = tape.matmul(f, ft)?;
    Ok(tape.scale(g, 1.0 / (c * hw) as f64))
}

/// Mean over the batch of `Σ_j ‖G_j(x̂_i) − G_j(x_t)‖²_F`.
///
/// `target` is a single `[1×C×H×W]` image with the same extents as the
/// batch; it is treated as a constant.
pub fn style_loss(
    tape: &mut Tape,
    augmented: Var,
    target: &Tensor,
    extractor: &StyleExtractor,
) -> Result<Var> {
    let s = tape.shape(augmented).to_vec();
    if target.rank() != 4 || target.shape()[0] != 1 || s.len() != 4 || target.shape()[1..] != s[1..]
    {
        return Err(Error::dim(format!(
            "style_loss: batch {s:?} against target {:?}",
            target.shape()
        )));
    }
    let target_grams = extractor.grams(target)?.remove(0);
    let taps = extractor.extract(tape, augmented)?;
    let mut total: Option<Var> = None;
    for b in 0..s[0] {
        for (&t, gt) in taps.iter().zip(&target_grams.0) {
            let h = tape.select_batch(t, b)?;
            let g = gram_matrix(tape, h)?;
            let gt = tape.constant(gt.clone());
            let d = tape.sub(g, gt)?;
            let sq = tape.mul(d, d)?;
            let term = tape.sum(sq);
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
    }
    let total = total.expect("batch and tap list are non-empty");
    Ok(tape.scale(total, 1.0 / s[0] as f64))
}

/// Style loss of a batch against a target, outside of any training graph.
pub fn style_loss_value(augmented: &Tensor, target: &Tensor, e: &StyleExtractor) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(augmented.clone());
    let l = style_loss(&mut tape, x, target, e)?;
    Ok(tape.value(l).item())
}
