//! The learnable augmentation module.
//!
//! Two small perceptrons produce per-sample transform parameters:
//!
//! * [`ColorNet`] maps a pooled summary of the image, a noise vector and the
//!   one-hot class to a per-channel scale `alpha` and shift `beta`, applied as
//!   `TriangleWave(alpha * x + beta)`;
//! * [`GeoNet`] maps noise and class to a residual `2×3` matrix `A`, applied
//!   as an affine warp with matrix `A + I`.
//!
//! Colour is applied first, then geometry. Both output layers start at zero,
//! so a fresh [`Augmenter`] is the identity map.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{mlp, push_mlp, Params};
use crate::tensor::Tensor;

/// Side length of the pooled image summary fed to the colour network.
pub const POOLED_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub channels: usize,
    pub classes: usize,
    pub noise_dim: usize,
    pub hidden: usize,
    /// `alpha ∈ [1 - g, 1 + g]`, `beta ∈ [-g, g]`.
    pub gain_color: f64,
    /// `|A_ij| <= g`.
    pub gain_geo: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            classes: 5,
            noise_dim: 16,
            hidden: 128,
            gain_color: 0.5,
            gain_geo: 0.25,
        }
    }
}

/// Colour-transform perceptron `(x, z, c) -> (alpha, beta)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorNet {
    pub params: Params,
}

/// Geometric-transform perceptron `(z, c) -> A`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoNet {
    pub params: Params,
}

/// Per-sample transform parameters of one augmentation call.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationParams {
    /// `[B×C]`
    pub alpha: Tensor,
    /// `[B×C]`
    pub beta: Tensor,
    /// `[B×2×3]`, residual to the identity.
    pub affine: Tensor,
}

/// Checks that every row of a `[B×K]` matrix is a one-hot vector.
pub fn check_one_hot(c: &Tensor, classes: usize) -> Result<()> {
    if c.rank() != 2 || c.shape()[1] != classes {
        return Err(Error::contract(format!(
            "class context must be [B×{classes}], got {:?}",
            c.shape()
        )));
    }
    for (i, row) in c.data().chunks(classes).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != classes {
            return Err(Error::contract(format!(
                "class context row {i} is not one-hot"
            )));
        }
    }
    Ok(())
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * classes + l] = 1.0;
    }
    t
}

/// `z ~ N(0, I)` for each of `batch` samples.
pub fn sample_noise(batch: usize, dim: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(&[batch, dim], |_| rng.sample::<f64, _>(StandardNormal))
}

impl ColorNet {
    pub fn new(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let input = cfg.channels * POOLED_SIDE * POOLED_SIDE + cfg.noise_dim + cfg.classes;
        let mut params = Params::new();
        push_mlp(
            &mut params,
            "color",
            &[input, cfg.hidden, cfg.hidden, 2 * cfg.channels],
            true,
            rng,
        );
        Self { params }
    }

    /// `alpha = 1 + g tanh(a_raw)`, `beta = g tanh(b_raw)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        x: Var,
        z: Var,
        c: Var,
        gain: f64,
    ) -> Result<(Var, Var)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[2] != s[3] || !s[2].is_multiple_of(POOLED_SIDE) {
            return Err(Error::dim(format!(
                "colour network needs square images with side divisible by {POOLED_SIDE}, got {s:?}"
            )));
        }
        let (b, ch) = (s[0], s[1]);
        let pooled = tape.avgpool2d(x, s[2] / POOLED_SIDE)?;
        let flat = tape.reshape(pooled, &[b, ch * POOLED_SIDE * POOLED_SIDE])?;
        let input = tape.concat_cols(&[flat, z, c])?;
        let raw = mlp(tape, input, bound)?;
        let a_raw = tape.slice_cols(raw, 0, ch)?;
        let b_raw = tape.slice_cols(raw, ch, 2 * ch)?;
        let ta = tape.tanh(a_raw);
        let alpha = tape.scale_shift(ta, gain, 1.0);
        let tb = tape.tanh(b_raw);
        let beta = tape.scale(tb, gain);
        Ok((alpha, beta))
    }
}

impl GeoNet {
    pub fn new(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let mut params = Params::new();
        push_mlp(
            &mut params,
            "geo",
            &[cfg.noise_dim + cfg.classes, cfg.hidden, cfg.hidden, 6],
            true,
            rng,
        );
        Self { params }
    }

    /// `A = g tanh(raw)` reshaped to `[B×2×3]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        z: Var,
        c: Var,
        gain: f64,
    ) -> Result<Var> {
        let b = tape.shape(z)[0];
        let input = tape.concat_cols(&[z, c])?;
        let raw = mlp(tape, input, bound)?;
        let t = tape.tanh(raw);
        let a = tape.scale(t, gain);
        tape.reshape(a, &[b, 2, 3])
    }
}

/// `TriangleWave(alpha ⊙ x + beta)` with per-channel broadcast.
pub fn apply_color(tape: &mut Tape, x: Var, alpha: Var, beta: Var) -> Result<Var> {
    let p = tape.channel_affine(x, alpha, beta)?;
    Ok(tape.triangle_wave(p))
}

/// Warps `x` with `A + I`: every output pixel at normalized `(u, v)` reads
/// the input at `(A + I)(u, v, 1)`, bilinearly, zero outside.
pub fn apply_affine(tape: &mut Tape, x: Var, a: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || tape.shape(a) != [s[0], 2, 3] {
        return Err(Error::dim(format!(
            "apply_affine: image {s:?} with matrix {:?}",
            tape.shape(a)
        )));
    }
    let eye = Tensor::from_fn(&[s[0], 2, 3], |i| match i % 6 {
        0 | 4 => 1.0,
        _ => 0.0,
    });
    let eye = tape.constant(eye);
    let theta = tape.add(a, eye)?;
    let grid = tape.affine_grid(theta, s[2], s[3])?;
    tape.bilinear_sample(x, grid)
}

/// The augmentation module: colour then geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmenter {
    pub cfg: AugmentConfig,
    pub color: ColorNet,
    pub geo: GeoNet,
}

/// Tape handles produced by [`Augmenter::forward`].
#[derive(Clone, Debug)]
pub struct Augmented {
    pub image: Var,
    pub alpha: Var,
    pub beta: Var,
    pub affine: Var,
    color_vars: Vec<Var>,
    geo_vars: Vec<Var>,
}

impl Augmented {
    pub fn params(&self, tape: &Tape) -> AugmentationParams {
        AugmentationParams {
            alpha: tape.value(self.alpha).clone(),
            beta: tape.value(self.beta).clone(),
            affine: tape.value(self.affine).clone(),
        }
    }
}

impl Augmenter {
    pub fn new(cfg: AugmentConfig, rng: &mut impl Rng) -> Self {
        let color = ColorNet::new(&cfg, rng);
        let geo = GeoNet::new(&cfg, rng);
        Self { cfg, color, geo }
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.color.params.set_trainable(on);
        self.geo.params.set_trainable(on);
    }

    /// Colour parameters followed by geometric ones.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.color
            .params
            .tensors()
            .iter()
            .chain(self.geo.params.tensors())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.color
            .params
            .tensors_mut()
            .iter_mut()
            .chain(self.geo.params.tensors_mut().iter_mut())
    }

    pub fn zero_grad(&mut self) {
        self.color.params.zero_grad();
        self.geo.params.zero_grad();
    }

    pub fn digest(&self) -> u64 {
        self.color.params.digest() ^ self.geo.params.digest().rotate_left(1)
    }

    /// Records the augmentation of `x` with class context `c` and noise `z`
    /// (one `z` row per sample, shared by both sub-networks).
    pub fn forward(&self, tape: &mut Tape, x: Var, c: Var, z: Var) -> Result<Augmented> {
        check_one_hot(tape.value(c), self.cfg.classes)?;
        let b = tape.shape(x).first().copied().unwrap_or(0);
        if tape.shape(z) != [b, self.cfg.noise_dim] {
            return Err(Error::dim(format!(
                "noise must be [{b}×{}], got {:?}",
                self.cfg.noise_dim,
                tape.shape(z)
            )));
        }
        if tape.shape(x).get(1) != Some(&self.cfg.channels) {
            return Err(Error::dim(format!(
                "augmenter expects {} channels, got image {:?}",
                self.cfg.channels,
                tape.shape(x)
            )));
        }
        let color_vars = self.color.params.bind(tape);
        let geo_vars = self.geo.params.bind(tape);
        let (alpha, beta) = self
            .color
            .forward(tape, &color_vars, x, z, c, self.cfg.gain_color)?;
        let colored = apply_color(tape, x, alpha, beta)?;
        let affine = self.geo.forward(tape, &geo_vars, z, c, self.cfg.gain_geo)?;
        let image = apply_affine(tape, colored, affine)?;
        Ok(Augmented {
            image,
            alpha,
            beta,
            affine,
            color_vars,
            geo_vars,
        })
    }

    pub fn accumulate(&mut self, out: &Augmented, grads: &crate::autodiff::Gradients) {
        self.color.params.accumulate(&out.color_vars, grads);
        self.geo.params.accumulate(&out.geo_vars, grads);
    }

    /// Evaluates the augmentation outside of any training graph.
    pub fn apply(
        &self,
        x: &Tensor,
        c: &Tensor,
        z: &Tensor,
    ) -> Result<(Tensor, AugmentationParams)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let cv = tape.constant(c.clone());
        let zv = tape.constant(z.clone());
        let out = self.forward(&mut tape, xv, cv, zv)?;
        Ok((tape.value(out.image).clone(), out.params(&tape)))
    }
}
