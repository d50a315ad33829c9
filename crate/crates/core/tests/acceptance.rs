//! Exit gate: one PASS/FAIL line per criterion, non-zero exit if any fails.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tosuda::augment::sample_noise;
use tosuda::classifier::Classifier;
use tosuda::cli::config::{DatasetSpec, RunConfig};
use tosuda::cli::{ablate_runs, checkpoint, load_splits, train_run, AblationRow};
use tosuda::data::{gen_synthetic_pair, DomainStyle};
use tosuda::nn::MomentumSgd;
use tosuda::style::style_loss_value;
use tosuda::trainer::{
    augmenter_optimizer, evaluate, step_augmenter, step_classifier, Ablation, EvalSets, Models,
    TrainConfig, Trainer,
};
use tosuda::{Tape, Tensor};

use common::suites::{
    identities, operation_gradients, oracles, perturbed_augmenter, pipeline_gradients, Check,
};

const GRADIENT_BUDGET: Duration = Duration::from_secs(60);
const SOURCE_BUDGET: Duration = Duration::from_secs(5 * 60);
const ABLATION_BUDGET: Duration = Duration::from_secs(15 * 60);
const DIRECTION_LR: f64 = 1e-5;
const DIRECTION_TOL: f64 = 1e-9;
const SOURCE_PER_CLASS: usize = 500;
const SOURCE_EPOCHS: usize = 30;
const SOURCE_ACC: f64 = 0.95;
const ADAPTATION_MARGIN: f64 = 0.10;
const FEW_SHOT_TARGETS: usize = 32;
const FEW_SHOT_SLACK: f64 = 0.01;

/// Desk-scale settings for the ablation grid and the few-shot runs.
const GRID_PER_CLASS: usize = 100;
const GRID_TEST_PER_CLASS: usize = 100;
const GRID_EPOCHS: usize = 10;

struct Outcome {
    passed: bool,
    detail: String,
}

fn checks(list: &[Check]) -> Outcome {
    let failed: Vec<String> = list
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{} = {:e} > {:e}", c.name, c.value, c.bound))
        .collect();
    let worst = list.iter().map(|c| c.value / c.bound).fold(0.0, f64::max);
    Outcome {
        passed: failed.is_empty(),
        detail: if failed.is_empty() {
            format!("{} checks, worst value/bound {worst:.3}", list.len())
        } else {
            failed.join("; ")
        },
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut list = operation_gradients();
    list.extend(pipeline_gradients());
    let elapsed = start.elapsed();
    let mut o = checks(&list);
    o.passed &= elapsed < GRADIENT_BUDGET;
    o.detail = format!("{}, {:.1}s", o.detail, elapsed.as_secs_f64());
    o
}

fn direction_checks() -> Outcome {
    let cfg = tosuda::augment::AugmentConfig {
        hidden: 8,
        noise_dim: 3,
        ..Default::default()
    };
    let mut models = Models::new(cfg, 11);
    models.augmenter = perturbed_augmenter(12);
    let (src, tgt) = gen_synthetic_pair(13, 2, &DomainStyle::default()).unwrap();
    let batch = src.batch(&(0..8).collect::<Vec<_>>()).unwrap();
    let target = tgt.images.slice_batch(0..1).unwrap();
    let z = sample_noise(8, 3, &mut ChaCha8Rng::seed_from_u64(14));

    let class_loss = |m: &Models| {
        let (x, _) = m
            .augmenter
            .apply(&batch.images, &batch.targets, &z)
            .unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (l, _) = m.classifier.forward(&mut tape, xv).unwrap();
        let ce = tosuda::classifier::cross_entropy(&mut tape, l, &batch.targets).unwrap();
        tape.value(ce).item()
    };
    let style = |m: &Models| {
        let (x, _) = m
            .augmenter
            .apply(&batch.images, &batch.targets, &z)
            .unwrap();
        style_loss_value(&x, &target, &m.extractor).unwrap()
    };

    let mut ascent = models.clone();
    let before = class_loss(&ascent);
    let cfg = TrainConfig {
        lambda_style: 0.0,
        ..Default::default()
    };
    let mut opt = augmenter_optimizer(&ascent.augmenter, DIRECTION_LR, 0.9);
    step_augmenter(&mut ascent, &mut opt, &batch, &target, &z, &cfg).unwrap();
    let after = class_loss(&ascent);

    let mut descent = models.clone();
    let s_before = style(&descent);
    let cfg = TrainConfig {
        lambda_adv: 0.0,
        ..Default::default()
    };
    let mut opt = augmenter_optimizer(&descent.augmenter, DIRECTION_LR, 0.9);
    step_augmenter(&mut descent, &mut opt, &batch, &target, &z, &cfg).unwrap();
    let s_after = style(&descent);

    Outcome {
        passed: after >= before - DIRECTION_TOL && s_after <= s_before + DIRECTION_TOL,
        detail: format!(
            "L_class {before:.12} -> {after:.12} (ascent), L_style {s_before:.12} -> {s_after:.12} (descent)"
        ),
    }
}

fn source_sanity() -> Outcome {
    let start = Instant::now();
    let (source, _) = gen_synthetic_pair(0, SOURCE_PER_CLASS, &DomainStyle::default()).unwrap();
    let (test, _) =
        gen_synthetic_pair(tosuda::data::EVAL_SEED_OFFSET, 100, &DomainStyle::default()).unwrap();
    let cfg = TrainConfig {
        ablation: Ablation::SourceOnly,
        epochs: 1,
        ..Default::default()
    };
    let models = Models::new(Default::default(), 0);
    let mut trainer = Trainer::new(cfg, models).unwrap();
    let unused = Tensor::zeros(&[1, 3, 32, 32]);
    let mut acc = 0.0;
    let mut epochs = 0;
    while epochs < SOURCE_EPOCHS && acc < SOURCE_ACC {
        trainer
            .run_epoch(
                &source,
                &unused,
                EvalSets {
                    source: Some(&test),
                    target: None,
                },
            )
            .unwrap();
        acc = trainer.history().last().unwrap().source_acc.unwrap();
        epochs += 1;
    }
    let elapsed = start.elapsed();
    Outcome {
        passed: acc >= SOURCE_ACC && elapsed < SOURCE_BUDGET,
        detail: format!(
            "source-test accuracy {acc:.4} after {epochs} epochs, {:.1}s",
            elapsed.as_secs_f64()
        ),
    }
}

fn grid_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    let DatasetSpec::Synthetic {
        per_class,
        test_per_class,
        ..
    } = &mut cfg.dataset
    else {
        unreachable!("default dataset is synthetic")
    };
    *per_class = GRID_PER_CLASS;
    *test_per_class = GRID_TEST_PER_CLASS;
    cfg.train.epochs = GRID_EPOCHS;
    cfg.train.num_targets = 1;
    cfg
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn adaptation(dir: &Path) -> (Outcome, Vec<AblationRow>) {
    let start = Instant::now();
    let cfg = grid_config();
    let rows = ablate_runs(&cfg, dir).map_err(|f| f.error).unwrap();
    let elapsed = start.elapsed();
    let acc = |a: Ablation| {
        rows.iter()
            .find(|r| r.ablation == a)
            .map(|r| r.mean())
            .unwrap()
    };
    let (full, no_style, no_adv, source) = (
        acc(Ablation::Full),
        acc(Ablation::NoStyle),
        acc(Ablation::NoAdv),
        acc(Ablation::SourceOnly),
    );
    let passed = full >= source + ADAPTATION_MARGIN
        && full >= no_style
        && full >= no_adv
        && elapsed < ABLATION_BUDGET;
    let detail = format!(
        "full {full:.4}, no_style {no_style:.4}, no_adv {no_adv:.4}, source_only {source:.4} (need full >= {:.4}), {:.0}s",
        source + ADAPTATION_MARGIN,
        elapsed.as_secs_f64()
    );
    (Outcome { passed, detail }, rows)
}

fn few_shot(dir: &Path, rows: &[AblationRow]) -> Outcome {
    let one_shot = rows.iter().find(|r| r.ablation == Ablation::Full).unwrap();
    let base = grid_config();
    let accs: Vec<f64> = base
        .ablate_seeds
        .iter()
        .map(|&seed| {
            let mut cfg = base.clone();
            cfg.train.seed = seed;
            cfg.train.num_targets = FEW_SHOT_TARGETS;
            train_run(&cfg, &dir.join(format!("few_shot_seed{seed}")), true)
                .map_err(|f| f.error)
                .unwrap()
                .0
        })
        .collect();
    let (few, one) = (mean(&accs), one_shot.mean());
    Outcome {
        passed: few >= one - FEW_SHOT_SLACK,
        detail: format!("{FEW_SHOT_TARGETS} targets {few:.4} vs one target {one:.4}"),
    }
}

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    let DatasetSpec::Synthetic {
        per_class,
        test_per_class,
        ..
    } = &mut cfg.dataset
    else {
        unreachable!("default dataset is synthetic")
    };
    *per_class = 8;
    *test_per_class = 4;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 8;
    cfg.train.n = 2;
    cfg.augment.hidden = 16;
    cfg
}

fn digests(m: &Models) -> [u64; 3] {
    [
        m.classifier.digest(),
        m.augmenter.digest(),
        m.extractor.digest(),
    ]
}

fn determinism_and_freezing(dir: &Path) -> Outcome {
    let cfg = small_config();
    let a = dir.join("a");
    let b = dir.join("b");
    train_run(&cfg, &a, true).map_err(|f| f.error).unwrap();
    train_run(&cfg, &b, true).map_err(|f| f.error).unwrap();
    let same = |f: &str| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap();
    let identical = same("metrics.csv") && same("final.tosu");

    // Step-by-step replay checking which module each step may touch.
    let splits = load_splits(&cfg).unwrap();
    let mut models = Models::new(cfg.augment.clone(), cfg.train.seed);
    let extractor = models.extractor.digest();
    let mut opt_cls = MomentumSgd::new(
        cfg.train.lr_cls,
        cfg.train.momentum,
        models.classifier.params.tensors(),
    );
    let mut opt_aug = augmenter_optimizer(&models.augmenter, cfg.train.lr_aug, cfg.train.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let target = splits.targets.slice_batch(0..1).unwrap();
    let mut violations = 0;
    for step in 0..6 {
        let idx: Vec<usize> = (step * 8..step * 8 + 8)
            .map(|i| i % splits.source.len())
            .collect();
        let batch = splits.source.batch(&idx).unwrap();
        let z = sample_noise(8, cfg.augment.noise_dim, &mut rng);
        let before = digests(&models);
        step_classifier(&mut models, &mut opt_cls, &batch, &z).unwrap();
        let mid = digests(&models);
        violations += usize::from(mid[1] != before[1] || mid[2] != before[2]);
        step_augmenter(&mut models, &mut opt_aug, &batch, &target, &z, &cfg.train).unwrap();
        let after = digests(&models);
        violations += usize::from(after[0] != mid[0] || after[2] != mid[2]);
    }
    let kept = models.extractor.digest() == extractor;

    let restored = checkpoint::load(&a.join("final.tosu")).unwrap();
    let trained_extractor = Models::new(cfg.augment.clone(), cfg.train.seed)
        .extractor
        .digest();
    let mut reloaded = Models::new(cfg.augment.clone(), cfg.train.seed);
    checkpoint::restore(&mut reloaded, &restored).unwrap();
    let run_kept = reloaded.extractor.digest() == trained_extractor;

    Outcome {
        passed: identical && violations == 0 && kept && run_kept,
        detail: format!(
            "bitwise-identical reruns: {identical}, frozen-module violations: {violations}, extractor unchanged: {}",
            kept && run_kept
        ),
    }
}

fn persistence(dir: &Path) -> Outcome {
    let cfg = small_config();
    let out = dir.join("persist");
    train_run(&cfg, &out, true).map_err(|f| f.error).unwrap();
    let path = out.join("final.tosu");
    let bytes = std::fs::read(&path).unwrap();
    let named = checkpoint::decode(&bytes).unwrap();
    let round_trip = checkpoint::encode(&named).unwrap() == bytes;

    let mut models = Models::new(cfg.augment.clone(), cfg.train.seed);
    checkpoint::restore(&mut models, &named).unwrap();
    let resnapshot = checkpoint::encode(&checkpoint::snapshot(&models, None)).unwrap();
    let without_opt: Vec<_> = named
        .iter()
        .filter(|(n, _)| !n.starts_with("opt."))
        .cloned()
        .collect();
    let models_round_trip = resnapshot == checkpoint::encode(&without_opt).unwrap();

    let splits = load_splits(&cfg).unwrap();
    let in_process = train_run(&cfg, &dir.join("persist2"), true)
        .map_err(|f| f.error)
        .unwrap()
        .0;
    let net = Classifier::from_tensors(&checkpoint::load(&path).unwrap()).unwrap();
    let reloaded = evaluate(&net, &splits.target_holdout).unwrap();
    let exact = reloaded.to_bits() == in_process.to_bits();
    Outcome {
        passed: round_trip && models_round_trip && exact,
        detail: format!(
            "byte round trip: {round_trip}, model round trip: {models_round_trip}, reload accuracy {reloaded} vs in-process {in_process}"
        ),
    }
}

fn main() {
    // `cargo test -- <filter>` style arguments are accepted and ignored.
    let dir = tempfile::tempdir().expect("temporary directory");
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!(
            "criterion {n}: {} {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o));
    };
    report(1, "gradient suite", gradient_suite());
    report(2, "exact identities", checks(&identities()));
    report(3, "oracle equivalence", checks(&oracles()));
    report(4, "adversarial directions", direction_checks());
    report(5, "source sanity", source_sanity());
    let (o, rows) = adaptation(&dir.path().join("grid"));
    report(6, "one-shot adaptation", o);
    report(
        7,
        "few-shot non-degradation",
        few_shot(&dir.path().join("few"), &rows),
    );
    report(
        8,
        "determinism and freezing",
        determinism_and_freezing(&dir.path().join("det")),
    );
    report(9, "persistence", persistence(&dir.path().join("persist")));
    let failed: Vec<usize> = results
        .iter()
        .filter(|r| !r.2.passed)
        .map(|r| r.0)
        .collect();
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
