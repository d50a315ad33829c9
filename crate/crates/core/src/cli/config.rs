//! Line-oriented `key = value` run configuration.
//!
//! `#` starts a comment. Blank lines are ignored. Unknown and repeated keys
//! are errors, reported with their line number.

use std::path::{Path, PathBuf};

use crate::augment::AugmentConfig;
use crate::data::{DomainStyle, GLYPH_CLASSES};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// Environment variable naming the root for relative dataset paths.
pub const DATA_DIR_ENV: &str = "TOSUDA_DATA_DIR";

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Synthetic {
        per_class: usize,
        test_per_class: usize,
        style: DomainStyle,
    },
    Idx {
        source_images: PathBuf,
        source_labels: PathBuf,
        source_test: Option<(PathBuf, PathBuf)>,
        target_images: PathBuf,
        target_labels: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub dataset: DatasetSpec,
    pub ablate_seeds: Vec<u64>,
    /// Write one checkpoint file per epoch instead of overwriting `last.tosu`.
    pub keep_checkpoints: bool,
    /// Include optimizer velocities in checkpoints.
    pub save_optimizer: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            dataset: DatasetSpec::Synthetic {
                per_class: 500,
                test_per_class: 100,
                style: DomainStyle::default(),
            },
            ablate_seeds: vec![0, 1, 2],
            keep_checkpoints: false,
            save_optimizer: true,
        }
    }
}

/// Every accepted key with its default, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("epochs", "30"),
    ("batch_size", "64"),
    ("n", "5"),
    ("lambda_style", "1.0"),
    ("lambda_adv", "1.0"),
    ("lr_cls", "0.01"),
    ("lr_aug", "0.005"),
    ("momentum", "0.9"),
    ("num_targets", "1"),
    ("ablation", "full"),
    ("noise_dim", "16"),
    ("hidden", "128"),
    ("gain_color", "0.5"),
    ("gain_geo", "0.25"),
    ("dataset", "synthetic"),
    ("per_class", "500"),
    ("test_per_class", "100"),
    ("style_scale", "0.9,0.4,0.2"),
    ("style_shift", "0.05,0.10,0.30"),
    ("style_rotation", "25"),
    ("channels", "3"),
    ("classes", "5"),
    ("data_dir", ""),
    ("source_images", ""),
    ("source_labels", ""),
    ("source_test_images", ""),
    ("source_test_labels", ""),
    ("target_images", ""),
    ("target_labels", ""),
    ("ablate_seeds", "0,1,2"),
    ("keep_checkpoints", "false"),
    ("save_optimizer", "true"),
];

/// Parsed `key = value` pairs with their line numbers.
struct Fields<'a> {
    origin: &'a str,
    entries: Vec<(String, String, usize)>,
}

impl Fields<'_> {
    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Config {
            path: self.origin.to_string(),
            line,
            msg: msg.into(),
        }
    }

    /// Line where `key` was set, 0 when it holds its default.
    fn line(&self, key: &str) -> usize {
        self.entries.iter().find(|e| e.0 == key).map_or(0, |e| e.2)
    }

    fn raw(&self, key: &str) -> &str {
        match self.entries.iter().find(|e| e.0 == key) {
            Some(e) => &e.1,
            None => {
                KEYS.iter()
                    .find(|(k, _)| *k == key)
                    .expect("documented key")
                    .1
            }
        }
    }

    fn fail(&self, key: &str, msg: impl Into<String>) -> Error {
        self.err(self.line(key), msg)
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| self.fail(key, format!("invalid value {v:?} for {key}")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.raw(key);
        v.split(',')
            .map(|p| p.trim().parse().ok())
            .collect::<Option<Vec<T>>>()
            .filter(|l| !l.is_empty())
            .ok_or_else(|| self.fail(key, format!("invalid list {v:?} for {key}")))
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }
}

impl RunConfig {
    /// Reads and parses a configuration file. A missing or unreadable file
    /// is reported as a configuration error naming the path.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.display().to_string(),
            line: 0,
            msg: format!("cannot read config: {e}"),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut f = Fields {
            origin,
            entries: Vec::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| f.err(line, format!("expected key = value, found {body:?}")))?;
            let key = k.trim();
            if !KEYS.iter().any(|(known, _)| *known == key) {
                return Err(f.err(line, format!("unknown key {key:?}")));
            }
            if f.line(key) != 0 {
                return Err(f.err(
                    line,
                    format!("key {key:?} already set on line {}", f.line(key)),
                ));
            }
            f.entries
                .push((key.to_string(), v.trim().to_string(), line));
        }

        let train = TrainConfig {
            n: f.get("n")?,
            lambda_style: f.get("lambda_style")?,
            lambda_adv: f.get("lambda_adv")?,
            lr_cls: f.get("lr_cls")?,
            lr_aug: f.get("lr_aug")?,
            momentum: f.get("momentum")?,
            batch_size: f.get("batch_size")?,
            epochs: f.get("epochs")?,
            seed: f.get("seed")?,
            num_targets: f.get("num_targets")?,
            ablation: f
                .raw("ablation")
                .parse()
                .map_err(|m: String| f.fail("ablation", m))?,
        };
        let at_least_one = ["n", "batch_size", "num_targets", "epochs"];
        if let Some(k) = at_least_one
            .into_iter()
            .find(|k| f.get::<usize>(k).ok() == Some(0))
        {
            return Err(f.fail(k, format!("{k} must be at least 1")));
        }
        for k in ["lambda_style", "lambda_adv", "lr_cls", "lr_aug"] {
            let v: f64 = f.get(k)?;
            if !(v >= 0.0 && v.is_finite()) {
                return Err(f.fail(k, format!("{k} must be a finite non-negative number")));
            }
        }
        if !(0.0..1.0).contains(&train.momentum) {
            return Err(f.fail("momentum", "momentum must lie in [0, 1)"));
        }

        let (channels, classes, dataset) = match f.raw("dataset") {
            "synthetic" => {
                let style = DomainStyle {
                    color_scale: f.list("style_scale")?,
                    color_shift: f.list("style_shift")?,
                    rotation_deg: f.get("style_rotation")?,
                };
                if style.color_scale.len() != style.color_shift.len() {
                    return Err(f.fail(
                        "style_shift",
                        "style_scale and style_shift need the same length",
                    ));
                }
                let per_class: usize = f.get("per_class")?;
                let test_per_class: usize = f.get("test_per_class")?;
                if per_class == 0 {
                    return Err(f.fail("per_class", "per_class must be at least 1"));
                }
                if train.num_targets >= test_per_class * GLYPH_CLASSES {
                    return Err(f.fail(
                        "num_targets",
                        format!(
                            "num_targets must be below the {} target samples",
                            test_per_class * GLYPH_CLASSES
                        ),
                    ));
                }
                let channels = style.color_scale.len();
                (
                    channels,
                    GLYPH_CLASSES,
                    DatasetSpec::Synthetic {
                        per_class,
                        test_per_class,
                        style,
                    },
                )
            }
            "idx" => {
                let root = f
                    .path("data_dir")
                    .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from));
                let resolve = |key: &str| -> Result<PathBuf> {
                    let p = f.path(key).ok_or_else(|| {
                        f.fail("dataset", format!("dataset = idx requires {key}"))
                    })?;
                    Ok(match &root {
                        Some(r) if p.is_relative() => r.join(p),
                        _ => p,
                    })
                };
                let source_test = match (f.path("source_test_images"), f.path("source_test_labels"))
                {
                    (None, None) => None,
                    (Some(_), Some(_)) => Some((
                        resolve("source_test_images")?,
                        resolve("source_test_labels")?,
                    )),
                    (Some(_), None) => {
                        return Err(f.fail("source_test_images", "source_test_labels is missing"))
                    }
                    (None, Some(_)) => {
                        return Err(f.fail("source_test_labels", "source_test_images is missing"))
                    }
                };
                let dataset = DatasetSpec::Idx {
                    source_images: resolve("source_images")?,
                    source_labels: resolve("source_labels")?,
                    source_test,
                    target_images: resolve("target_images")?,
                    target_labels: resolve("target_labels")?,
                };
                (f.get("channels")?, f.get("classes")?, dataset)
            }
            other => {
                return Err(f.fail(
                    "dataset",
                    format!("unknown dataset {other:?} (synthetic, idx)"),
                ))
            }
        };
        if channels == 0 {
            return Err(f.fail("channels", "channels must be at least 1"));
        }
        if classes < 2 {
            return Err(f.fail("classes", "classes must be at least 2"));
        }

        let augment = AugmentConfig {
            channels,
            classes,
            noise_dim: f.get("noise_dim")?,
            hidden: f.get("hidden")?,
            gain_color: f.get("gain_color")?,
            gain_geo: f.get("gain_geo")?,
        };
        for k in ["noise_dim", "hidden"] {
            if f.get::<usize>(k)? == 0 {
                return Err(f.fail(k, format!("{k} must be at least 1")));
            }
        }
        for k in ["gain_color", "gain_geo"] {
            let v: f64 = f.get(k)?;
            if !(v >= 0.0 && v.is_finite()) {
                return Err(f.fail(k, format!("{k} must be a finite non-negative number")));
            }
        }

        Ok(Self {
            train,
            augment,
            dataset,
            ablate_seeds: f.list("ablate_seeds")?,
            keep_checkpoints: f.get("keep_checkpoints")?,
            save_optimizer: f.get("save_optimizer")?,
        })
    }
}
