//! Datasets: a synthetic two-domain glyph benchmark, an IDX reader and
//! seeded mini-batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::one_hot;
use crate::autodiff::Tape;
use crate::classifier::INPUT_SIDE;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of glyph classes in the synthetic benchmark.
pub const GLYPH_CLASSES: usize = 5;
pub const GLYPH_NAMES: [&str; GLYPH_CLASSES] = ["square", "disk", "triangle", "cross", "ring"];

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images in `[0, 1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    /// `[M×C×H×W]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledImageSet {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::contract(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("image values outside [0, 1]"));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    /// `(images, one-hot labels, labels)` for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Batch {
            images: self.images.gather_batch(indices)?,
            targets: one_hot(&labels, self.classes),
            labels,
        })
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let b = self.batch(indices)?;
        Ok(Self {
            images: b.images,
            labels: b.labels,
            classes: self.classes,
        })
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        self.labels.iter().for_each(|&l| h[l] += 1);
        h
    }
}

/// A mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub targets: Tensor,
    pub labels: Vec<usize>,
}

/// A fixed colour-affine plus rotation map defining the synthetic target
/// domain. Colour is applied first, then the rotation, matching the order
/// of the augmentation module, so the map lies inside the class of
/// transforms the augmenter can represent.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainStyle {
    pub color_scale: Vec<f64>,
    pub color_shift: Vec<f64>,
    pub rotation_deg: f64,
}

impl Default for DomainStyle {
    fn default() -> Self {
        Self {
            color_scale: vec![0.9, 0.4, 0.2],
            color_shift: vec![0.05, 0.10, 0.30],
            rotation_deg: 25.0,
        }
    }
}

impl DomainStyle {
    pub fn identity(channels: usize) -> Self {
        Self {
            color_scale: vec![1.0; channels],
            color_shift: vec![0.0; channels],
            rotation_deg: 0.0,
        }
    }

    /// `clamp(scale_c · x + shift_c, 0, 1)` per channel.
    pub fn apply_color(&self, images: &Tensor) -> Result<Tensor> {
        let s = images.shape();
        if s.len() != 4 || self.color_scale.len() != s[1] || self.color_shift.len() != s[1] {
            return Err(Error::dim(format!(
                "domain style with {} channels applied to {s:?}",
                self.color_scale.len()
            )));
        }
        let (c, hw) = (s[1], s[2] * s[3]);
        let mut out = images.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / hw) % c;
            *v = (self.color_scale[ch] * *v + self.color_shift[ch]).clamp(0.0, 1.0);
        }
        Ok(out)
    }

    /// Colour map, then rotation about the image centre (bilinear, zero
    /// outside the frame).
    pub fn apply(&self, images: &Tensor) -> Result<Tensor> {
        let colored = self.apply_color(images)?;
        if self.rotation_deg == 0.0 {
            return Ok(colored);
        }
        let s = colored.shape().to_vec();
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let theta = Tensor::from_fn(&[s[0], 2, 3], |i| [cos, -sin, 0.0, sin, cos, 0.0][i % 6]);
        let mut tape = Tape::new();
        let x = tape.constant(colored);
        let th = tape.constant(theta);
        let grid = tape.affine_grid(th, s[2], s[3])?;
        let y = tape.bilinear_sample(x, grid)?;
        Ok(tape.value(y).clone())
    }
}

fn inside(class: usize, dx: f64, dy: f64) -> bool {
    match class {
        0 => dx.abs() <= 0.85 && dy.abs() <= 0.85,
        1 => dx * dx + dy * dy <= 1.0,
        2 => (-1.0..=0.75).contains(&dy) && dx.abs() <= (dy + 1.0) / 1.75,
        3 => (dx.abs() <= 0.28 && dy.abs() <= 1.0) || (dy.abs() <= 0.28 && dx.abs() <= 1.0),
        4 => {
            let r2 = dx * dx + dy * dy;
            (0.36..=1.0).contains(&r2)
        }
        _ => unreachable!("glyph class {class}"),
    }
}

/// Rasterizes one glyph at intensity 1 on a black `side×side` canvas with
/// 4×4 supersampling.
pub fn rasterize_glyph(class: usize, cx: f64, cy: f64, radius: f64, side: usize) -> Vec<f64> {
    const SS: usize = 4;
    let mut out = vec![0.0; side * side];
    for i in 0..side {
        for j in 0..side {
            let mut hits = 0;
            for si in 0..SS {
                for sj in 0..SS {
                    let py = i as f64 + (si as f64 + 0.5) / SS as f64;
                    let px = j as f64 + (sj as f64 + 0.5) / SS as f64;
                    if inside(class, (px - cx) / radius, (py - cy) / radius) {
                        hits += 1;
                    }
                }
            }
            out[i * side + j] = hits as f64 / (SS * SS) as f64;
        }
    }
    out
}

/// Base glyph radius in pixels before the ±10% scale jitter.
pub const GLYPH_RADIUS: f64 = 10.0;

/// Source and target glyph sets generated sample for sample from one seed
/// stream: `target[i] = style(source[i])`. Sample order is shuffled, and
/// each class appears exactly `per_class` times.
pub fn gen_synthetic_pair(
    seed: u64,
    per_class: usize,
    style: &DomainStyle,
) -> Result<(LabeledImageSet, LabeledImageSet)> {
    if per_class == 0 {
        return Err(Error::contract("per_class must be at least 1"));
    }
    let channels = style.color_scale.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..GLYPH_CLASSES)
        .flat_map(|c| std::iter::repeat_n(c, per_class))
        .collect();
    labels.shuffle(&mut rng);
    let side = INPUT_SIDE;
    let centre = side as f64 / 2.0;
    let mut data = Vec::with_capacity(labels.len() * channels * side * side);
    for &class in &labels {
        let tx: f64 = rng.gen_range(-2.0..=2.0);
        let ty: f64 = rng.gen_range(-2.0..=2.0);
        let scale: f64 = rng.gen_range(0.9..=1.1);
        let plane = rasterize_glyph(class, centre + tx, centre + ty, GLYPH_RADIUS * scale, side);
        for _ in 0..channels {
            data.extend_from_slice(&plane);
        }
    }
    let images = Tensor::new(&[labels.len(), channels, side, side], data)?;
    let target = style.apply(&images)?;
    Ok((
        LabeledImageSet::new(images, labels.clone(), GLYPH_CLASSES)?,
        LabeledImageSet::new(target, labels, GLYPH_CLASSES)?,
    ))
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(format!("{what}: truncated header")))
}

/// Parses an IDX image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "idx images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!(
            "idx images: bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "idx images")? as usize;
    let rows = be_u32(bytes, 8, "idx images")? as usize;
    let cols = be_u32(bytes, 12, "idx images")? as usize;
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::format("idx images: size overflow"))?;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(Error::format(format!(
            "idx images: expected {need} pixel bytes, found {}",
            body.len()
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::format("idx images: zero image extent"));
    }
    Ok((n, rows, cols, body))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "idx labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!(
            "idx labels: bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "idx labels")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::format(format!(
            "idx labels: expected {n} label bytes, found {}",
            body.len()
        )));
    }
    Ok(body)
}

/// Bilinear resize of one plane (align-corners).
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let map = |i: usize, n: usize, on: usize| {
        if on == 1 || n == 1 {
            0.0
        } else {
            i as f64 * (n - 1) as f64 / (on - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let py = map(i, h, oh);
        let y0 = (py.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = py - y0 as f64;
        for j in 0..ow {
            let px = map(j, w, ow);
            let x0 = (px.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = px - x0 as f64;
            let top = (1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
            let bot = (1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
            out.push(((1.0 - fy) * top + fy * bot).clamp(0.0, 1.0));
        }
    }
    out
}

/// Decodes IDX image and label bytes into a set of `channels×32×32` images
/// (grayscale replicated across channels).
/// Resizes every `[C×H×W]` image of a batch to `h×w` (no-op when equal).
pub fn resize_batch(images: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::dim(format!(
            "resize_batch expects [B×C×H×W], got {s:?}"
        )));
    }
    if s[2] == h && s[3] == w {
        return Ok(images.clone());
    }
    let mut data = Vec::with_capacity(s[0] * s[1] * h * w);
    for plane in images.data().chunks(s[2] * s[3]) {
        data.extend(resize_bilinear(plane, s[2], s[3], h, w));
    }
    Tensor::new(&[s[0], s[1], h, w], data)
}

pub fn decode_idx(
    image_bytes: &[u8],
    label_bytes: &[u8],
    channels: usize,
    classes: usize,
) -> Result<LabeledImageSet> {
    let (n, rows, cols, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != n {
        return Err(Error::format(format!(
            "idx: {n} images but {} labels",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::format("idx: empty dataset"));
    }
    let side = INPUT_SIDE;
    let mut data = Vec::with_capacity(n * channels * side * side);
    for img in pixels.chunks(rows * cols) {
        let plane: Vec<f64> = img.iter().map(|&p| f64::from(p) / 255.0).collect();
        let resized = resize_bilinear(&plane, rows, cols, side, side);
        for _ in 0..channels {
            data.extend_from_slice(&resized);
        }
    }
    let labels: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    LabeledImageSet::new(
        Tensor::new(&[n, channels, side, side], data)?,
        labels,
        classes,
    )
    .map_err(|e| Error::format(format!("idx: {e}")))
}

pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    channels: usize,
    classes: usize,
) -> Result<LabeledImageSet> {
    let img = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lbl = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    decode_idx(&img, &lbl, channels, classes)
}

/// Mini-batches of a fresh permutation of `0..len` drawn from
/// `(seed, epoch)`. The final short batch is kept.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::contract("batch size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Seed offset separating the evaluation draw from the training draw.
pub const EVAL_SEED_OFFSET: u64 = 0x5EED_0001;

/// Everything a run consumes: labeled source data, the unlabeled target
/// images used for training, and held-out sets for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSplits {
    pub source: LabeledImageSet,
    pub source_test: Option<LabeledImageSet>,
    /// `[T×C×H×W]`; labels are never attached.
    pub targets: Tensor,
    /// Target samples not used for training.
    pub target_holdout: LabeledImageSet,
}

/// The first `num_targets` samples become training targets; the rest are
/// held out.
pub fn split_targets(
    target: &LabeledImageSet,
    num_targets: usize,
) -> Result<(Tensor, LabeledImageSet)> {
    if num_targets == 0 || num_targets >= target.len() {
        return Err(Error::contract(format!(
            "need 1 <= num_targets < {} target samples, got {num_targets}",
            target.len()
        )));
    }
    let images = target.images.slice_batch(0..num_targets)?;
    let rest: Vec<usize> = (num_targets..target.len()).collect();
    Ok((images, target.subset(&rest)?))
}

/// Synthetic splits: training source from `seed`, source test and target
/// sets from a second, independent draw.
pub fn synthetic_splits(
    seed: u64,
    per_class: usize,
    test_per_class: usize,
    style: &DomainStyle,
    num_targets: usize,
) -> Result<DomainSplits> {
    let (source, _) = gen_synthetic_pair(seed, per_class, style)?;
    let (source_test, target) =
        gen_synthetic_pair(seed.wrapping_add(EVAL_SEED_OFFSET), test_per_class, style)?;
    let (targets, target_holdout) = split_targets(&target, num_targets)?;
    Ok(DomainSplits {
        source,
        source_test: Some(source_test),
        targets,
        target_holdout,
    })
}
