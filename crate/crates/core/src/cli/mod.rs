//! Command-line surface: `train`, `eval`, `preview`, `ablate`, `gen-data`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error,
//! 3 I/O or dataset failure, 4 corrupt or incompatible checkpoint.

pub mod checkpoint;
pub mod config;
pub mod ppm;

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::sample_noise;
use crate::classifier::Classifier;
use crate::data::{
    gen_synthetic_pair, load_idx, resize_batch, split_targets, synthetic_splits, DomainSplits,
    LabeledImageSet,
};
use crate::error::Error;
use crate::trainer::{evaluate, Ablation, EvalSets, MetricsRow, Models, Phase, Trainer};
use config::{DatasetSpec, RunConfig};

pub const METRICS_HEADER: &str = "epoch,step,phase,l_class,l_style,source_acc,target_acc";

#[derive(Debug, Parser)]
#[command(
    name = "tosuda",
    version,
    about = "One-shot domain adaptation with learned augmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a run configuration; writes metrics.csv and checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Prints the classifier accuracy of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Split::Target)]
        split: Split,
    },
    /// Writes source | augmented | target triptychs as PPM files.
    Preview {
        /// Without a checkpoint the freshly initialized (identity) augmenter is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value = "preview")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Trains every ablation over the configured seeds; writes ablation.csv.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        /// Replaces the seed list with `seed, seed+1, …` of the same length.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Exports synthetic source and target samples as PPM directories.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "glyphs")]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    /// Labeled source training set.
    Train,
    /// Source test set.
    SourceTest,
    /// Held-out target samples.
    Target,
}

/// An error paired with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: Error,
}

type CmdResult<T = ()> = Result<T, Failure>;

fn fail(code: i32) -> impl Fn(Error) -> Failure {
    move |error| Failure { code, error }
}

/// Default mapping; dataset and checkpoint loading override it.
fn classify(error: Error) -> Failure {
    let code = match error {
        Error::Config { .. } => 2,
        Error::Io { .. } => 3,
        _ => 1,
    };
    Failure { code, error }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> CmdResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).map_err(fail(2))?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

/// Builds the run's datasets; any failure maps to exit code 3.
pub fn load_splits(cfg: &RunConfig) -> Result<DomainSplits, Failure> {
    let t = &cfg.train;
    let splits = match &cfg.dataset {
        DatasetSpec::Synthetic {
            per_class,
            test_per_class,
            style,
        } => synthetic_splits(t.seed, *per_class, *test_per_class, style, t.num_targets),
        DatasetSpec::Idx {
            source_images,
            source_labels,
            source_test,
            target_images,
            target_labels,
        } => (|| {
            let (c, k) = (cfg.augment.channels, cfg.augment.classes);
            let source = load_idx(source_images, source_labels, c, k)?;
            let source_test = match source_test {
                Some((i, l)) => Some(load_idx(i, l, c, k)?),
                None => None,
            };
            let target = load_idx(target_images, target_labels, c, k)?;
            let (targets, target_holdout) = split_targets(&target, t.num_targets)?;
            Ok(DomainSplits {
                source,
                source_test,
                targets,
                target_holdout,
            })
        })(),
    };
    splits.map_err(fail(3))
}

fn load_checkpoint(path: &Path) -> CmdResult<checkpoint::Named> {
    checkpoint::load(path).map_err(|e| match e {
        Error::Io { .. } => fail(3)(e),
        other => fail(4)(other),
    })
}

fn create_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| fail(3)(Error::io(dir, e)))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV line per row, without the header.
pub fn metrics_lines(rows: &[MetricsRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.step,
            r.phase.as_str(),
            opt(r.l_class),
            opt(r.l_style),
            opt(r.source_acc),
            opt(r.target_acc)
        );
    }
    s
}

struct MetricsFile {
    path: PathBuf,
    out: BufWriter<File>,
    written: usize,
}

impl MetricsFile {
    fn create(path: PathBuf) -> CmdResult<Self> {
        let file = File::create(&path).map_err(|e| fail(3)(Error::io(&path, e)))?;
        let mut m = Self {
            path,
            out: BufWriter::new(file),
            written: 0,
        };
        m.write(&format!("{METRICS_HEADER}\n"))?;
        Ok(m)
    }

    fn write(&mut self, s: &str) -> CmdResult {
        self.out
            .write_all(s.as_bytes())
            .and_then(|_| self.out.flush())
            .map_err(|e| fail(3)(Error::io(&self.path, e)))
    }

    fn sync(&mut self, rows: &[MetricsRow]) -> CmdResult {
        let fresh = metrics_lines(&rows[self.written..]);
        self.written = rows.len();
        self.write(&fresh)
    }
}

fn eval_sets(splits: &DomainSplits) -> EvalSets<'_> {
    EvalSets {
        source: splits.source_test.as_ref(),
        target: Some(&splits.target_holdout),
    }
}

fn save_state(path: &Path, trainer: &Trainer, with_opt: bool) -> CmdResult {
    let opts = with_opt.then_some((&trainer.opt_cls, &trainer.opt_aug));
    checkpoint::save(path, &checkpoint::snapshot(&trainer.models, opts)).map_err(classify)
}

/// Trains one configuration, streaming metrics and checkpoints into `out`.
/// Returns the final held-out target accuracy and the metrics history.
pub fn train_run(cfg: &RunConfig, out: &Path, quiet: bool) -> CmdResult<(f64, Vec<MetricsRow>)> {
    let splits = load_splits(cfg)?;
    create_dir(out)?;
    let models = Models::new(cfg.augment.clone(), cfg.train.seed);
    let mut trainer = Trainer::new(cfg.train.clone(), models).map_err(fail(2))?;
    let mut metrics = MetricsFile::create(out.join("metrics.csv"))?;
    for e in 0..cfg.train.epochs {
        trainer
            .run_epoch(&splits.source, &splits.targets, eval_sets(&splits))
            .map_err(classify)?;
        metrics.sync(trainer.history())?;
        let name = if cfg.keep_checkpoints {
            format!("epoch_{e:03}.tosu")
        } else {
            "last.tosu".to_string()
        };
        save_state(&out.join(name), &trainer, cfg.save_optimizer)?;
        if !quiet {
            let r = trainer.history().last().expect("eval row");
            eprintln!(
                "epoch {}/{} source_acc={} target_acc={}",
                e + 1,
                cfg.train.epochs,
                opt(r.source_acc),
                opt(r.target_acc)
            );
        }
    }
    save_state(&out.join("final.tosu"), &trainer, cfg.save_optimizer)?;
    let acc = evaluate(&trainer.models.classifier, &splits.target_holdout).map_err(classify)?;
    Ok((acc, trainer.history().to_vec()))
}

fn cmd_train(config: Option<&Path>, out: &Path, seed: Option<u64>) -> CmdResult {
    let cfg = load_config(config, seed)?;
    let (acc, _) = train_run(&cfg, out, false)?;
    println!("target_acc={acc}");
    Ok(())
}

fn cmd_eval(ckpt: &Path, config: Option<&Path>, seed: Option<u64>, split: Split) -> CmdResult {
    let cfg = load_config(config, seed)?;
    let named = load_checkpoint(ckpt)?;
    let net = Classifier::from_tensors(&named).map_err(fail(4))?;
    let splits = load_splits(&cfg)?;
    let set = match split {
        Split::Train => &splits.source,
        Split::Target => &splits.target_holdout,
        Split::SourceTest => splits.source_test.as_ref().ok_or_else(|| {
            fail(2)(Error::Config {
                path: config.map(|p| p.display().to_string()).unwrap_or_default(),
                line: 0,
                msg: "no source test set configured".into(),
            })
        })?,
    };
    let acc = evaluate(&net, set).map_err(classify)?;
    println!("acc={acc:.4}");
    Ok(())
}

fn cmd_preview(
    ckpt: Option<&Path>,
    config: Option<&Path>,
    count: usize,
    out: &Path,
    seed: Option<u64>,
) -> CmdResult {
    let cfg = load_config(config, seed)?;
    let mut models = Models::new(cfg.augment.clone(), cfg.train.seed);
    if let Some(p) = ckpt {
        let named = load_checkpoint(p)?;
        checkpoint::restore(&mut models, &named).map_err(fail(4))?;
    }
    let splits = load_splits(&cfg)?;
    create_dir(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    rng.set_stream(5);
    let count = count.min(splits.source.len());
    let idx: Vec<usize> = (0..count).collect();
    let batch = splits.source.batch(&idx).map_err(classify)?;
    let z = sample_noise(count, cfg.augment.noise_dim, &mut rng);
    let (augmented, _) = models
        .augmenter
        .apply(&batch.images, &batch.targets, &z)
        .map_err(classify)?;
    let s = splits.targets.shape();
    let t = s[0];
    for i in 0..count {
        let panel = |x: &crate::Tensor, j: usize| -> CmdResult<crate::Tensor> {
            x.slice_batch(j..j + 1)
                .and_then(|p| p.reshape(&x.shape()[1..]))
                .map_err(classify)
        };
        let target = resize_batch(
            &splits
                .targets
                .slice_batch(i % t..i % t + 1)
                .map_err(classify)?,
            batch.images.shape()[2],
            batch.images.shape()[3],
        )
        .map_err(classify)?;
        let strip = ppm::hstack(&[
            panel(&batch.images, i)?,
            panel(&augmented, i)?,
            panel(&target, 0)?,
        ])
        .map_err(classify)?;
        ppm::write(&out.join(format!("preview_{i:03}.ppm")), &strip).map_err(classify)?;
    }
    eprintln!("wrote {count} previews to {}", out.display());
    Ok(())
}

/// Per-ablation summary of an ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub accs: Vec<f64>,
    pub aug_steps: usize,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.accs.iter().sum::<f64>() / self.accs.len() as f64
    }

    /// Sample standard deviation; 0 for a single seed.
    pub fn std(&self) -> f64 {
        let n = self.accs.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.accs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

pub const ABLATION_HEADER: &str =
    "ablation,mean_target_acc,std_target_acc,seeds,per_seed,aug_steps";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let per: Vec<String> = r.accs.iter().map(f64::to_string).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.ablation,
            r.mean(),
            r.std(),
            r.accs.len(),
            per.join(";"),
            r.aug_steps
        );
    }
    s
}

/// Runs every ablation for every seed; each run writes into
/// `out/<ablation>_seed<s>/`.
pub fn ablate_runs(cfg: &RunConfig, out: &Path) -> CmdResult<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for ablation in Ablation::ALL {
        let mut row = AblationRow {
            ablation,
            accs: Vec::new(),
            aug_steps: 0,
        };
        for &seed in &cfg.ablate_seeds {
            let mut run = cfg.clone();
            run.train.seed = seed;
            run.train.ablation = ablation;
            let dir = out.join(format!("{ablation}_seed{seed}"));
            let (acc, history) = train_run(&run, &dir, true)?;
            eprintln!("{ablation} seed {seed}: target_acc={acc}");
            row.accs.push(acc);
            row.aug_steps += history
                .iter()
                .filter(|r| r.phase == Phase::Augmenter)
                .count();
        }
        rows.push(row);
    }
    Ok(rows)
}

fn cmd_ablate(config: Option<&Path>, out: &Path, seed: Option<u64>) -> CmdResult {
    let mut cfg = load_config(config, None)?;
    if let Some(s) = seed {
        cfg.ablate_seeds = (0..cfg.ablate_seeds.len() as u64).map(|i| s + i).collect();
    }
    create_dir(out)?;
    let rows = ablate_runs(&cfg, out)?;
    let csv = ablation_csv(&rows);
    let path = out.join("ablation.csv");
    std::fs::write(&path, &csv).map_err(|e| fail(3)(Error::io(&path, e)))?;
    print!("{csv}");
    Ok(())
}

fn export_set(set: &LabeledImageSet, count: usize, dir: &Path) -> CmdResult {
    create_dir(dir)?;
    let mut labels = String::from("file,label\n");
    let s = set.images.shape();
    for i in 0..count.min(set.len()) {
        let name = format!("{i:05}.ppm");
        let img = set
            .images
            .slice_batch(i..i + 1)
            .and_then(|x| x.reshape(&s[1..]))
            .map_err(classify)?;
        ppm::write(&dir.join(&name), &img).map_err(classify)?;
        let _ = writeln!(labels, "{name},{}", set.labels[i]);
    }
    let path = dir.join("labels.csv");
    std::fs::write(&path, labels).map_err(|e| fail(3)(Error::io(&path, e)))
}

fn cmd_gen_data(config: Option<&Path>, out: &Path, count: usize, seed: Option<u64>) -> CmdResult {
    let cfg = load_config(config, seed)?;
    let DatasetSpec::Synthetic {
        per_class, style, ..
    } = &cfg.dataset
    else {
        return Err(fail(2)(Error::Config {
            path: config.map(|p| p.display().to_string()).unwrap_or_default(),
            line: 0,
            msg: "gen-data needs dataset = synthetic".into(),
        }));
    };
    let (source, target) =
        gen_synthetic_pair(cfg.train.seed, *per_class, style).map_err(fail(3))?;
    export_set(&source, count, &out.join("source"))?;
    export_set(&target, count, &out.join("target"))?;
    eprintln!(
        "wrote {} source/target pairs to {}",
        count.min(source.len()),
        out.display()
    );
    Ok(())
}

/// Executes a parsed command line.
pub fn execute(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Train { config, out, seed } => cmd_train(config.as_deref(), &out, seed),
        Command::Eval {
            checkpoint,
            config,
            seed,
            split,
        } => cmd_eval(&checkpoint, config.as_deref(), seed, split),
        Command::Preview {
            checkpoint,
            config,
            count,
            out,
            seed,
        } => cmd_preview(checkpoint.as_deref(), config.as_deref(), count, &out, seed),
        Command::Ablate { config, out, seed } => cmd_ablate(config.as_deref(), &out, seed),
        Command::GenData {
            config,
            out,
            count,
            seed,
        } => cmd_gen_data(config.as_deref(), &out, count, seed),
    }
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.error);
            f.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_statistics() {
        let r = AblationRow {
            ablation: Ablation::Full,
            accs: vec![0.5, 0.7, 0.9],
            aug_steps: 3,
        };
        assert!((r.mean() - 0.7).abs() < 1e-15);
        assert!((r.std() - 0.2).abs() < 1e-15);
        let csv = ablation_csv(&[r]);
        assert!(csv.starts_with(ABLATION_HEADER));
        assert!(csv.contains("full,"));
    }

    #[test]
    fn metrics_blank_fields() {
        let rows = [MetricsRow {
            epoch: 0,
            step: 4,
            phase: Phase::Eval,
            l_class: None,
            l_style: None,
            source_acc: Some(0.5),
            target_acc: Some(0.25),
        }];
        assert_eq!(metrics_lines(&rows), "0,4,eval,,,0.5,0.25\n");
    }

    #[test]
    fn command_line_shapes() {
        let cli = Cli::try_parse_from([
            "tosuda",
            "eval",
            "--checkpoint",
            "c.tosu",
            "--split",
            "source-test",
        ])
        .unwrap();
        assert!(matches!(
            cli.command,
            Command::Eval {
                split: Split::SourceTest,
                ..
            }
        ));
        let cli = Cli::try_parse_from(["tosuda", "gen-data", "--count", "3"]).unwrap();
        assert!(matches!(cli.command, Command::GenData { count: 3, .. }));
        assert!(Cli::try_parse_from(["tosuda", "train", "--bogus"]).is_err());
    }
}
