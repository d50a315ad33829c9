//! Named checks shared by the integration tests and the acceptance runner.

use rand::Rng;
use tosuda::augment::{apply_affine, apply_color, one_hot, sample_noise, AugmentConfig, Augmenter};
use tosuda::autodiff::triangle_wave_value;
use tosuda::classifier::{cross_entropy, Classifier};
use tosuda::data::{gen_synthetic_pair, DomainStyle};
use tosuda::style::{gram_matrix, style_loss, StyleExtractor};
use tosuda::{Tape, Tensor, Var};

use super::*;

/// One measured quantity and the bound it must stay below.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: f64,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound,
        }
    }

    pub fn passed(&self) -> bool {
        self.value.is_finite() && self.value <= self.bound
    }
}

pub const OP_EPS: f64 = 1e-5;
pub const PIPELINE_EPS: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;

/// Uniform values bounded away from the integers (kinks of the wave and of
/// the bilinear kernel) by `margin`.
fn off_integers(shape: &[usize], lo: f64, hi: f64, margin: f64, r: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = r.gen_range(lo..hi);
        if (v - v.round()).abs() > margin {
            break v;
        }
    })
}

fn away_from_zero(shape: &[usize], r: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = r.gen_range(0.1..1.0);
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Normalized sampling coordinates whose pixel positions stay clear of
/// integer grid lines.
fn sample_coords(b: usize, h: usize, w: usize, r: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(&[b, h, w, 2]);
    for k in 0..b * h * w {
        for (axis, n) in [(0, w), (1, h)] {
            let p = off_integers(&[1], -0.9, n as f64 - 0.1, 0.05, r).data()[0];
            t.data_mut()[2 * k + axis] = 2.0 * p / (n - 1) as f64 - 1.0;
        }
    }
    t
}

fn op(name: &str, inputs: Vec<Tensor>, build: Build<'_>, seed: u64) -> Check {
    Check::new(
        format!("grad {name}"),
        grad_check(&inputs, build, OP_EPS, None, seed),
        GRAD_TOL,
    )
}

/// Finite-difference checks of every differentiable operation.
pub fn operation_gradients() -> Vec<Check> {
    let mut r = rng(100);
    let u = |s: &[usize], r: &mut _| Tensor::rand_uniform(s, -1.0, 1.0, r);
    let mut out = vec![
        op(
            "add",
            vec![u(&[2, 3], &mut r), u(&[2, 3], &mut r)],
            &|t, v| t.add(v[0], v[1]),
            1,
        ),
        op(
            "sub",
            vec![u(&[2, 3], &mut r), u(&[2, 3], &mut r)],
            &|t, v| t.sub(v[0], v[1]),
            2,
        ),
        op(
            "mul",
            vec![u(&[2, 3], &mut r), u(&[2, 3], &mut r)],
            &|t, v| t.mul(v[0], v[1]),
            3,
        ),
        op(
            "scale_shift",
            vec![u(&[4], &mut r)],
            &|t, v| Ok(t.scale_shift(v[0], -1.7, 0.3)),
            4,
        ),
        op(
            "matmul",
            vec![u(&[3, 4], &mut r), u(&[4, 2], &mut r)],
            &|t, v| t.matmul(v[0], v[1]),
            5,
        ),
        op(
            "transpose",
            vec![u(&[3, 2], &mut r)],
            &|t, v| t.transpose(v[0]),
            6,
        ),
        op(
            "reshape",
            vec![u(&[2, 6], &mut r)],
            &|t, v| t.reshape(v[0], &[3, 4]),
            7,
        ),
        op(
            "add_row_bias",
            vec![u(&[3, 4], &mut r), u(&[4], &mut r)],
            &|t, v| t.add_row_bias(v[0], v[1]),
            8,
        ),
        op(
            "add_channel_bias",
            vec![u(&[2, 3, 2, 2], &mut r), u(&[3], &mut r)],
            &|t, v| t.add_channel_bias(v[0], v[1]),
            9,
        ),
        op(
            "conv2d stride 1 pad 0",
            vec![u(&[2, 2, 5, 5], &mut r), u(&[3, 2, 3, 3], &mut r)],
            &|t, v| t.conv2d(v[0], v[1], 1, 0),
            10,
        ),
        op(
            "conv2d stride 2 pad 1",
            vec![u(&[1, 3, 6, 5], &mut r), u(&[2, 3, 3, 3], &mut r)],
            &|t, v| t.conv2d(v[0], v[1], 2, 1),
            11,
        ),
        op(
            "maxpool2d",
            vec![u(&[2, 2, 4, 4], &mut r)],
            &|t, v| t.maxpool2d(v[0], 2),
            12,
        ),
        op(
            "avgpool2d",
            vec![u(&[2, 2, 4, 4], &mut r)],
            &|t, v| t.avgpool2d(v[0], 2),
            13,
        ),
        op(
            "bilinear_sample",
            vec![u(&[2, 2, 4, 5], &mut r), sample_coords(2, 4, 5, &mut r)],
            &|t, v| t.bilinear_sample(v[0], v[1]),
            14,
        ),
        op(
            "affine_grid",
            vec![u(&[2, 2, 3], &mut r)],
            &|t, v| t.affine_grid(v[0], 3, 4),
            15,
        ),
        op(
            "channel_affine",
            vec![
                u(&[2, 3, 2, 2], &mut r),
                u(&[2, 3], &mut r),
                u(&[2, 3], &mut r),
            ],
            &|t, v| t.channel_affine(v[0], v[1], v[2]),
            16,
        ),
        op(
            "relu",
            vec![away_from_zero(&[10], &mut r)],
            &|t, v| Ok(t.relu(v[0])),
            17,
        ),
        op("tanh", vec![u(&[6], &mut r)], &|t, v| Ok(t.tanh(v[0])), 18),
        op("exp", vec![u(&[6], &mut r)], &|t, v| Ok(t.exp(v[0])), 19),
        op(
            "log",
            vec![Tensor::rand_uniform(&[6], 0.2, 3.0, &mut r)],
            &|t, v| t.log(v[0]),
            20,
        ),
        op(
            "cos",
            vec![u(&[6], &mut r).map(|x| 3.0 * x)],
            &|t, v| Ok(t.cos(v[0])),
            21,
        ),
        op(
            "acos",
            vec![u(&[6], &mut r).map(|x| 0.9 * x)],
            &|t, v| t.acos(v[0]),
            22,
        ),
        op(
            "triangle_wave",
            vec![off_integers(&[12], -3.0, 3.0, 0.01, &mut r)],
            &|t, v| Ok(t.triangle_wave(v[0])),
            23,
        ),
        op("sum", vec![u(&[2, 3], &mut r)], &|t, v| Ok(t.sum(v[0])), 24),
        op(
            "mean",
            vec![u(&[2, 3], &mut r)],
            &|t, v| Ok(t.mean(v[0])),
            25,
        ),
        op(
            "concat_cols",
            vec![u(&[2, 3], &mut r), u(&[2, 1], &mut r), u(&[2, 2], &mut r)],
            &|t, v| t.concat_cols(&[v[0], v[1], v[2]]),
            26,
        ),
        op(
            "slice_cols",
            vec![u(&[3, 5], &mut r)],
            &|t, v| t.slice_cols(v[0], 1, 4),
            27,
        ),
        op(
            "select_batch",
            vec![u(&[3, 2, 2], &mut r)],
            &|t, v| t.select_batch(v[0], 1),
            28,
        ),
        op(
            "log_softmax",
            vec![u(&[3, 4], &mut r).map(|x| 4.0 * x)],
            &|t, v| t.log_softmax(v[0]),
            29,
        ),
        op(
            "gram_matrix",
            vec![u(&[3, 2, 4], &mut r)],
            &|t, v| gram_matrix(t, v[0]),
            30,
        ),
        op(
            "apply_color",
            vec![
                Tensor::rand_uniform(&[2, 3, 3, 3], 0.05, 0.95, &mut r),
                Tensor::rand_uniform(&[2, 3], 0.6, 1.4, &mut r),
                Tensor::rand_uniform(&[2, 3], -0.4, 0.4, &mut r),
            ],
            &|t, v| apply_color(t, v[0], v[1], v[2]),
            31,
        ),
    ];

    let labels = one_hot(&[0, 2, 1], 3);
    out.push(op(
        "cross_entropy",
        vec![u(&[3, 3], &mut r).map(|x| 3.0 * x)],
        &move |t, v| cross_entropy(t, v[0], &labels),
        32,
    ));

    // Warps small enough that every sample position stays clear of pixel
    // boundaries under the difference step.
    let mut found = None;
    for attempt in 0..1000u64 {
        let a = Tensor::rand_uniform(&[2, 2, 3], -0.2, 0.2, &mut r);
        let x = u(&[2, 2, 5, 5], &mut r);
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let eye = tape.constant(Tensor::from_fn(&[2, 2, 3], |i| {
            if i % 6 == 0 || i % 6 == 4 {
                1.0
            } else {
                0.0
            }
        }));
        let th = tape.add(av, eye).unwrap();
        let g = tape.affine_grid(th, 5, 5).unwrap();
        let clear = tape.value(g).data().iter().all(|c| {
            let p = (c + 1.0) * 2.0;
            (p - p.round()).abs() > 0.02
        });
        if clear {
            found = Some((attempt, x, a));
            break;
        }
    }
    let (attempt, x, a) = found.expect("a warp clear of pixel boundaries");
    out.push(op(
        "apply_affine",
        vec![x, a],
        &|t, v| apply_affine(t, v[0], v[1]),
        33 + attempt,
    ));

    let e = StyleExtractor::new(3, &mut rng(34));
    let target = Tensor::rand_uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut r);
    out.push(Check::new(
        "grad style_loss",
        grad_check(
            &[Tensor::rand_uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut r)],
            &|t, v| style_loss(t, v[0], &target, &e),
            OP_EPS,
            None,
            35,
        ),
        GRAD_TOL,
    ));
    out
}

/// Augmenter with non-trivial output layers so that transforms differ
/// from the identity.
pub fn perturbed_augmenter(seed: u64) -> Augmenter {
    let cfg = AugmentConfig {
        hidden: 8,
        noise_dim: 3,
        ..Default::default()
    };
    let mut r = rng(seed);
    let mut aug = Augmenter::new(cfg, &mut r);
    for t in aug.tensors_mut() {
        for v in t.data_mut() {
            if *v == 0.0 {
                *v = r.gen_range(-0.05..0.05);
            }
        }
    }
    aug
}

/// Records the augmenter forward pass on caller-supplied parameter leaves.
fn augment_with(
    aug: &Augmenter,
    t: &mut Tape,
    params: &[Var],
    x: &Tensor,
    c: &Tensor,
    z: &Tensor,
) -> tosuda::Result<Var> {
    let n = aug.color.params.len();
    let (xv, cv, zv) = (
        t.constant(x.clone()),
        t.constant(c.clone()),
        t.constant(z.clone()),
    );
    let (alpha, beta) = aug
        .color
        .forward(t, &params[..n], xv, zv, cv, aug.cfg.gain_color)?;
    let colored = apply_color(t, xv, alpha, beta)?;
    let a = aug.geo.forward(t, &params[n..], zv, cv, aug.cfg.gain_geo)?;
    apply_affine(t, colored, a)
}

/// Finite-difference checks of the three training objectives with respect
/// to the augmenter parameters.
pub fn pipeline_gradients() -> Vec<Check> {
    let aug = perturbed_augmenter(40);
    let models = tosuda::trainer::Models::new(aug.cfg.clone(), 41);
    let classifier: Classifier = models.classifier;
    let extractor = models.extractor;
    let (src, tgt) = gen_synthetic_pair(42, 1, &DomainStyle::default()).unwrap();
    let batch = src.batch(&[0, 3]).unwrap();
    let target = tgt.images.slice_batch(1..2).unwrap();
    let z = sample_noise(2, aug.cfg.noise_dim, &mut rng(43));
    let params: Vec<Tensor> = aug.tensors().cloned().collect();
    let (x, y) = (&batch.images, &batch.targets);

    let style: Build<'_> = &|t, v| {
        let img = augment_with(&aug, t, v, x, y, &z)?;
        style_loss(t, img, &target, &extractor)
    };
    let class: Build<'_> = &|t, v| {
        let img = augment_with(&aug, t, v, x, y, &z)?;
        let (l, _) = classifier.forward(t, img)?;
        cross_entropy(t, l, y)
    };
    let combined: Build<'_> = &|t, v| {
        let img = augment_with(&aug, t, v, x, y, &z)?;
        let s = style_loss(t, img, &target, &extractor)?;
        let (l, _) = classifier.forward(t, img)?;
        let c = cross_entropy(t, l, y)?;
        let s = t.scale(s, 1.0);
        let c = t.scale(c, -1.0);
        t.add(s, c)
    };
    [
        ("style loss", style),
        ("cross-entropy", class),
        ("augmenter objective", combined),
    ]
    .into_iter()
    .enumerate()
    .map(|(i, (name, b))| {
        Check::new(
            format!("grad pipeline {name}"),
            grad_check(&params, b, PIPELINE_EPS, Some(12), 50 + i as u64),
            GRAD_TOL,
        )
    })
    .collect()
}

/// Closed-form identities.
pub fn identities() -> Vec<Check> {
    let mut r = rng(200);
    let mut out = Vec::new();
    for (p, want) in [(0.0, 0.0), (1.0, 1.0), (0.5, 0.5), (2.3, 0.3)] {
        out.push(Check::new(
            format!("triangle_wave({p}) = {want}"),
            (triangle_wave_value(p) - want).abs(),
            1e-10,
        ));
    }
    let grid: Vec<f64> = (0..1000).map(|_| r.gen_range(-50.0..50.0)).collect();
    out.push(Check::new(
        "triangle_wave periodicity",
        grid.iter()
            .map(|&p| (triangle_wave_value(p) - triangle_wave_value(p + 2.0)).abs())
            .fold(0.0, f64::max),
        1e-10,
    ));
    out.push(Check::new(
        "triangle_wave symmetry",
        grid.iter()
            .map(|&p| (triangle_wave_value(p) - triangle_wave_value(-p)).abs())
            .fold(0.0, f64::max),
        1e-10,
    ));

    let x = Tensor::rand_uniform(&[3, 3, 8, 8], 0.0, 1.0, &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let one = tape.constant(Tensor::ones(&[3, 3]));
    let zero = tape.constant(Tensor::zeros(&[3, 3]));
    let c = apply_color(&mut tape, xv, one, zero).unwrap();
    out.push(Check::new(
        "apply_color identity",
        tape.value(c).max_abs_diff(&x),
        1e-10,
    ));
    let a0 = tape.constant(Tensor::zeros(&[3, 2, 3]));
    let g = apply_affine(&mut tape, xv, a0).unwrap();
    out.push(Check::new(
        "apply_affine identity",
        tape.value(g).max_abs_diff(&x),
        1e-12,
    ));

    let e = StyleExtractor::new(3, &mut rng(201));
    let t1 = x.slice_batch(0..1).unwrap();
    let copies = t1.gather_batch(&[0, 0, 0]).unwrap();
    let mut tape = Tape::new();
    let cv = tape.constant(copies);
    let s = style_loss(&mut tape, cv, &t1, &e).unwrap();
    out.push(Check::new(
        "style_loss(x, x) = 0",
        tape.value(s).item().abs(),
        1e-10,
    ));

    for k in [2, 5, 10] {
        let logits = Tensor::full(&[4, k], r.gen_range(-3.0..3.0));
        let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..k)).collect();
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let ce = cross_entropy(&mut tape, l, &one_hot(&labels, k)).unwrap();
        out.push(Check::new(
            format!("cross_entropy(uniform) = ln {k}"),
            (tape.value(ce).item() - (k as f64).ln()).abs(),
            1e-10,
        ));
    }
    out
}

pub const ORACLE_CASES: usize = 20;
pub const ORACLE_TOL: f64 = 1e-8;

fn worst(cases: impl Iterator<Item = f64>) -> f64 {
    cases.fold(0.0, f64::max)
}

/// Library kernels against brute-force references on random small cases.
pub fn oracles() -> Vec<Check> {
    let mut r = rng(300);
    let mut out = Vec::new();

    let conv = worst((0..ORACLE_CASES).map(|_| {
        let (b, c, o) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
        let k = r.gen_range(1..4);
        let (h, w) = (r.gen_range(k..8), r.gen_range(k..8));
        let (stride, pad) = (r.gen_range(1..3), r.gen_range(0..2));
        let x = Tensor::rand_uniform(&[b, c, h, w], -1.0, 1.0, &mut r);
        let wt = Tensor::rand_uniform(&[o, c, k, k], -1.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(wt.clone()));
        let y = tape.conv2d(xv, wv, stride, pad).unwrap();
        tape.value(y).max_abs_diff(&conv2d(&x, &wt, stride, pad))
    }));
    out.push(Check::new(
        format!("oracle conv2d ({ORACLE_CASES} cases)"),
        conv,
        ORACLE_TOL,
    ));

    let pool = worst((0..ORACLE_CASES).map(|_| {
        let k = r.gen_range(1..4);
        let shape = [
            r.gen_range(1..3),
            r.gen_range(1..3),
            k * r.gen_range(1..4),
            k * r.gen_range(1..4),
        ];
        // quantized values produce ties
        let x = Tensor::from_fn(&shape, |_| r.gen_range(0..4) as f64);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.maxpool2d(xv, k).unwrap();
        tape.value(y).max_abs_diff(&maxpool2d(&x, k))
    }));
    out.push(Check::new(
        format!("oracle maxpool2d ({ORACLE_CASES} cases)"),
        pool,
        ORACLE_TOL,
    ));

    let bil = worst((0..ORACLE_CASES).map(|_| {
        let (b, c, h, w) = (
            r.gen_range(1..3),
            r.gen_range(1..3),
            r.gen_range(2..6),
            r.gen_range(2..6),
        );
        let x = Tensor::rand_uniform(&[b, c, h, w], -1.0, 1.0, &mut r);
        let coords = Tensor::rand_uniform(&[b, h, w, 2], -1.4, 1.4, &mut r);
        let mut tape = Tape::new();
        let (xv, cv) = (tape.constant(x.clone()), tape.constant(coords.clone()));
        let y = tape.bilinear_sample(xv, cv).unwrap();
        tape.value(y).max_abs_diff(&bilinear(&x, &coords))
    }));
    out.push(Check::new(
        format!("oracle bilinear_sample ({ORACLE_CASES} cases)"),
        bil,
        ORACLE_TOL,
    ));

    let gm = worst((0..ORACLE_CASES).map(|_| {
        let h = Tensor::rand_uniform(
            &[r.gen_range(1..6), r.gen_range(1..5), r.gen_range(1..5)],
            -2.0,
            2.0,
            &mut r,
        );
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let g = gram_matrix(&mut tape, hv).unwrap();
        tape.value(g).max_abs_diff(&gram(&h))
    }));
    out.push(Check::new(
        format!("oracle gram_matrix ({ORACLE_CASES} cases)"),
        gm,
        ORACLE_TOL,
    ));

    let sl = worst((0..ORACLE_CASES as u64).map(|case| {
        let e = StyleExtractor::new(3, &mut rng(400 + case));
        let side = r.gen_range(8..13);
        let b = r.gen_range(1..3);
        let x = Tensor::rand_uniform(&[b, 3, side, side], 0.0, 1.0, &mut r);
        let t = Tensor::rand_uniform(&[1, 3, side, side], 0.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let l = style_loss(&mut tape, xv, &t, &e).unwrap();
        (tape.value(l).item() - super::style_loss(&e, &x, &t)).abs()
    }));
    out.push(Check::new(
        format!("oracle style_loss ({ORACLE_CASES} cases)"),
        sl,
        ORACLE_TOL,
    ));
    out
}
