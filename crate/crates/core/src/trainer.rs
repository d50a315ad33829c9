//! Two-step alternating optimization.
//!
//! Step 1 trains the classifier on augmented source batches with the
//! augmenter frozen. Step 2 trains the augmenter with the classifier frozen,
//! descending on `lambda_style · L_style − lambda_adv · L_class`: the
//! augmenter is pushed to make samples harder to classify while keeping
//! their Gram statistics close to the target image. Step 1 runs `n` times
//! for every step 2.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{sample_noise, AugmentConfig, Augmenter};
use crate::autodiff::Tape;
use crate::classifier::{accuracy, cross_entropy, Classifier};
use crate::data::{batches, resize_batch, Batch, LabeledImageSet};
use crate::error::{Error, Result};
use crate::nn::MomentumSgd;
use crate::style::{style_loss, StyleExtractor};
use crate::tensor::Tensor;

/// Which terms of the augmenter objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    Full,
    NoStyle,
    NoAdv,
    /// The augmenter is never trained (it stays the identity).
    SourceOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoStyle,
        Ablation::NoAdv,
        Ablation::SourceOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoStyle => "no_style",
            Ablation::NoAdv => "no_adv",
            Ablation::SourceOnly => "source_only",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown ablation {s:?} (full, no_style, no_adv, source_only)"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Classifier steps per augmenter step.
    pub n: usize,
    pub lambda_style: f64,
    pub lambda_adv: f64,
    pub lr_cls: f64,
    pub lr_aug: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub num_targets: usize,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n: 5,
            lambda_style: 1.0,
            lambda_adv: 1.0,
            lr_cls: 0.01,
            lr_aug: 0.005,
            momentum: 0.9,
            batch_size: 64,
            epochs: 30,
            seed: 0,
            num_targets: 1,
            ablation: Ablation::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::contract(m.to_string()));
        if self.n == 0 {
            return bad("n must be at least 1");
        }
        if !(self.lambda_style >= 0.0 && self.lambda_adv >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.lr_cls >= 0.0 && self.lr_aug >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.num_targets == 0 {
            return bad("num_targets must be at least 1");
        }
        Ok(())
    }

    /// `(lambda_style, lambda_adv)` after the ablation switch.
    pub fn effective_weights(&self) -> (f64, f64) {
        match self.ablation {
            Ablation::Full => (self.lambda_style, self.lambda_adv),
            Ablation::NoStyle => (0.0, self.lambda_adv),
            Ablation::NoAdv => (self.lambda_style, 0.0),
            Ablation::SourceOnly => (0.0, 0.0),
        }
    }
}

/// The three networks of the method.
#[derive(Clone, Debug)]
pub struct Models {
    pub classifier: Classifier,
    pub augmenter: Augmenter,
    pub extractor: StyleExtractor,
}

impl Models {
    /// Seeded initialization; each network draws from its own stream.
    pub fn new(aug: AugmentConfig, seed: u64) -> Self {
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        Self {
            classifier: Classifier::new(aug.channels, aug.classes, &mut stream(1)),
            extractor: StyleExtractor::new(aug.channels, &mut stream(3)),
            augmenter: Augmenter::new(aug, &mut stream(2)),
        }
    }
}

fn ensure_batch(batch: &Batch) -> Result<usize> {
    match batch.images.shape().first() {
        Some(&b) if b > 0 && batch.labels.len() == b => Ok(b),
        _ => Err(Error::contract("empty or inconsistent batch")),
    }
}

/// One classifier update on an augmented batch; the augmenter is frozen.
/// Returns the loss before the update.
pub fn step_classifier(
    models: &mut Models,
    opt: &mut MomentumSgd,
    batch: &Batch,
    z: &Tensor,
) -> Result<f64> {
    ensure_batch(batch)?;
    models.augmenter.set_trainable(false);
    models.classifier.set_trainable(true);
    let mut tape = Tape::new();
    let x = tape.constant(batch.images.clone());
    let c = tape.constant(batch.targets.clone());
    let zv = tape.constant(z.clone());
    let aug = models.augmenter.forward(&mut tape, x, c, zv)?;
    let (logits, vars) = models.classifier.forward(&mut tape, aug.image)?;
    let loss = cross_entropy(&mut tape, logits, &batch.targets)?;
    let grads = tape.backward(loss)?;
    models.classifier.accumulate(&vars, &grads);
    opt.step(models.classifier.params.tensors_mut());
    models.augmenter.set_trainable(true);
    Ok(tape.value(loss).item())
}

/// Losses reported by [`step_augmenter`], measured before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmenterLosses {
    /// `None` when the style term is ablated (the extractor is not run).
    pub style: Option<f64>,
    pub class: f64,
}

/// One augmenter update; the classifier and extractor are frozen.
/// `target` is a single `[1×C×H×W]` image matching the batch extents.
pub fn step_augmenter(
    models: &mut Models,
    opt: &mut MomentumSgd,
    batch: &Batch,
    target: &Tensor,
    z: &Tensor,
    cfg: &TrainConfig,
) -> Result<AugmenterLosses> {
    ensure_batch(batch)?;
    if target.rank() != 4 || target.shape()[0] != 1 {
        return Err(Error::contract(format!(
            "augmenter step needs exactly one target image, got {:?}",
            target.shape()
        )));
    }
    let (w_style, w_adv) = cfg.effective_weights();
    models.classifier.set_trainable(false);
    models.augmenter.set_trainable(true);

    let mut tape = Tape::new();
    let x = tape.constant(batch.images.clone());
    let c = tape.constant(batch.targets.clone());
    let zv = tape.constant(z.clone());
    let aug = models.augmenter.forward(&mut tape, x, c, zv)?;

    let style = if w_style > 0.0 {
        Some(style_loss(&mut tape, aug.image, target, &models.extractor)?)
    } else {
        None
    };
    // Without the adversarial term the classifier only reports, on a
    // detached copy of the augmented batch.
    let class_input = if w_adv > 0.0 {
        aug.image
    } else {
        tape.constant(tape.value(aug.image).clone())
    };
    let (logits, _) = models.classifier.forward(&mut tape, class_input)?;
    let class = cross_entropy(&mut tape, logits, &batch.targets)?;

    let adv = tape.scale(class, -w_adv);
    let objective = match style {
        Some(s) => {
            let s = tape.scale(s, w_style);
            tape.add(s, adv)?
        }
        None => adv,
    };
    let grads = tape.backward(objective)?;
    models.augmenter.accumulate(&aug, &grads);
    opt.step(models.augmenter.tensors_mut());
    models.classifier.set_trainable(true);

    Ok(AugmenterLosses {
        style: style.map(|s| tape.value(s).item()),
        class: tape.value(class).item(),
    })
}

/// Optimizer for the augmenter: colour parameters then geometric ones.
pub fn augmenter_optimizer(aug: &Augmenter, lr: f64, momentum: f64) -> MomentumSgd {
    MomentumSgd::new(lr, momentum, aug.tensors())
}

/// Classification accuracy over a whole set, without augmentation.
pub fn evaluate(classifier: &Classifier, set: &LabeledImageSet) -> Result<f64> {
    let logits = classifier.logits(&set.images)?;
    Ok(accuracy(&logits, &set.labels))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Classifier,
    Augmenter,
    Eval,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Classifier => "cls",
            Phase::Augmenter => "aug",
            Phase::Eval => "eval",
        }
    }
}

/// One metrics record: an optimizer step or an end-of-epoch evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub phase: Phase,
    pub l_class: Option<f64>,
    pub l_style: Option<f64>,
    pub source_acc: Option<f64>,
    pub target_acc: Option<f64>,
}

/// Counts classifier steps and says when an augmenter step is due.
/// The count carries over epoch boundaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    n: usize,
    count: usize,
}

impl Schedule {
    pub fn new(n: usize) -> Self {
        Self { n, count: 0 }
    }

    /// Registers one classifier step; true if an augmenter step follows.
    pub fn after_classifier_step(&mut self) -> bool {
        self.count += 1;
        self.count.is_multiple_of(self.n)
    }
}

/// Held-out sets evaluated at every epoch boundary.
#[derive(Clone, Copy, Debug, Default)]
pub struct EvalSets<'a> {
    pub source: Option<&'a LabeledImageSet>,
    pub target: Option<&'a LabeledImageSet>,
}

/// Stateful training loop.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub models: Models,
    pub opt_cls: MomentumSgd,
    pub opt_aug: MomentumSgd,
    rng: ChaCha8Rng,
    schedule: Schedule,
    epoch: usize,
    steps: usize,
    history: Vec<MetricsRow>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, models: Models) -> Result<Self> {
        cfg.validate()?;
        let opt_cls =
            MomentumSgd::new(cfg.lr_cls, cfg.momentum, models.classifier.params.tensors());
        let opt_aug = augmenter_optimizer(&models.augmenter, cfg.lr_aug, cfg.momentum);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(4);
        Ok(Self {
            schedule: Schedule::new(cfg.n),
            cfg,
            models,
            opt_cls,
            opt_aug,
            rng,
            epoch: 0,
            steps: 0,
            history: Vec::new(),
        })
    }

    pub fn history(&self) -> &[MetricsRow] {
        &self.history
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One pass over `source`, followed by an evaluation row.
    /// `targets` holds the unlabeled target images `[T×C×H×W]`.
    pub fn run_epoch(
        &mut self,
        source: &LabeledImageSet,
        targets: &Tensor,
        eval: EvalSets<'_>,
    ) -> Result<()> {
        if targets.rank() != 4 || targets.shape()[0] != self.cfg.num_targets {
            return Err(Error::contract(format!(
                "expected {} target images, got shape {:?}",
                self.cfg.num_targets,
                targets.shape()
            )));
        }
        let s = source.images.shape();
        let targets = resize_batch(targets, s[2], s[3])?;
        let noise_dim = self.models.augmenter.cfg.noise_dim;
        let order = batches(source.len(), self.cfg.batch_size, self.cfg.seed, self.epoch)?;
        for idx in &order {
            let batch = source.batch(idx)?;
            let z = sample_noise(idx.len(), noise_dim, &mut self.rng);
            let l = step_classifier(&mut self.models, &mut self.opt_cls, &batch, &z)?;
            self.push_step(Phase::Classifier, Some(l), None);
            if self.schedule.after_classifier_step() && self.cfg.ablation != Ablation::SourceOnly {
                let pick = self.rng.gen_range(0..targets.shape()[0]);
                let target = targets.slice_batch(pick..pick + 1)?;
                let z = sample_noise(idx.len(), noise_dim, &mut self.rng);
                let l = step_augmenter(
                    &mut self.models,
                    &mut self.opt_aug,
                    &batch,
                    &target,
                    &z,
                    &self.cfg,
                )?;
                self.push_step(Phase::Augmenter, Some(l.class), l.style);
            }
        }
        let source_acc = eval
            .source
            .map(|s| evaluate(&self.models.classifier, s))
            .transpose()?;
        let target_acc = eval
            .target
            .map(|s| evaluate(&self.models.classifier, s))
            .transpose()?;
        self.history.push(MetricsRow {
            epoch: self.epoch,
            step: self.steps,
            phase: Phase::Eval,
            l_class: None,
            l_style: None,
            source_acc,
            target_acc,
        });
        self.epoch += 1;
        Ok(())
    }

    fn push_step(&mut self, phase: Phase, l_class: Option<f64>, l_style: Option<f64>) {
        self.history.push(MetricsRow {
            epoch: self.epoch,
            step: self.steps,
            phase,
            l_class,
            l_style,
            source_acc: None,
            target_acc: None,
        });
        self.steps += 1;
    }
}

/// Runs `cfg.epochs` epochs from freshly seeded models.
pub fn train(
    source: &LabeledImageSet,
    targets: &Tensor,
    eval: EvalSets<'_>,
    aug: AugmentConfig,
    cfg: TrainConfig,
) -> Result<(Models, Vec<MetricsRow>)> {
    let models = Models::new(aug, cfg.seed);
    let mut trainer = Trainer::new(cfg, models)?;
    for _ in 0..trainer.cfg.epochs {
        trainer.run_epoch(source, targets, eval)?;
    }
    Ok((trainer.models, trainer.history))
}
