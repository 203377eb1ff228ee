//! Command-line orchestration of the three stages.
//!
//! Each invocation works inside one run directory:
//!
//! ```text
//! config.toml              resolved configuration
//! dataset/                 feature cache (manifest.txt + items/)
//! pretrain.ckpt            pre-trained encoder
//! pseudo_labels.txt        one pseudo-label per training item
//! pseudo_labels.manifest   source checkpoint hash and counts
//! distill.ckpt             distilled encoder
//! eval.json                linear-probe report
//! metrics.jsonl            append-only metrics log
//! report.txt               rendered metrics tables
//! ```
//!
//! Stages hand off only through these files, so any suffix of the pipeline
//! can be re-run on its own.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::audio::container::{load_dataset, save_dataset};
use crate::audio::dataset::load_wav_dataset;
use crate::audio::{generate_synthetic_dataset, LabeledDataset, Split};
use crate::checkpoint::{load_checkpoint_as, save_checkpoint, Checkpoint, Provenance};
use crate::config::{load_config, resolve_config, DatasetSource, ExperimentConfig};
use crate::distill::{generate_pseudo_labels, run_distillation, PseudoLabels};
use crate::encoder::{EncoderConfig, ScaleProfile};
use crate::error::{Error, Result};
use crate::metrics::{read_metrics, render_table, MetricsLog, MetricsRecord};
use crate::pretrain::run_pretraining;
use crate::probe::{evaluate, extract_frozen_features, train_linear_probe, EvalReport};
use crate::rng::derive_seed;

pub const CONFIG_FILE: &str = "config.toml";
pub const DATASET_DIR: &str = "dataset";
pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const PSEUDO_LABELS: &str = "pseudo_labels.txt";
pub const PSEUDO_MANIFEST: &str = "pseudo_labels.manifest";
pub const DISTILL_CKPT: &str = "distill.ckpt";
pub const EVAL_REPORT: &str = "eval.json";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.txt";

#[derive(Debug, Parser)]
#[command(name = "unfused", version, about = "Clustering-guided self-supervised audio pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML file overriding the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Scale profile: `paper` or `desk`.
    #[arg(long, global = true)]
    profile: Option<ScaleProfile>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Feature cache or `<class>/*.wav` directory replacing the configured dataset.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Clustering-driven pre-training on every item.
    Pretrain,
    /// Cluster the pre-trained encoder's features of the training split.
    Pseudolabel,
    /// Train a fresh encoder on the pseudo-labels with self-distillation.
    Distill,
    /// Linear probe on the distilled student; reports test accuracy.
    Eval,
    /// All four stages in order, then `report`.
    Pipeline,
    /// Render the metrics log as tables.
    Report,
}

/// Parse `argv` (program name first), run, and return the exit code:
/// 0 on success, 1 on a failed run, 2 on a usage error.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let run = Run::open(cli)?;
    match cli.command {
        Command::Pretrain => run.pretrain().map(drop),
        Command::Pseudolabel => run.pseudolabel().map(drop),
        Command::Distill => run.distill().map(drop),
        Command::Eval => run.eval().map(|r| println!("{}", serde_json::to_string_pretty(&r).unwrap())),
        Command::Report => run.report().map(|t| print!("{t}")),
        Command::Pipeline => {
            run.pretrain()?;
            run.pseudolabel()?;
            run.distill()?;
            let report = run.eval()?;
            print!("{}", run.report()?);
            println!("test accuracy {:.4} ({}/{})", report.accuracy, report.correct, report.n_test);
            Ok(())
        }
    }
}

/// A resolved config bound to its run directory.
pub struct Run {
    pub dir: PathBuf,
    pub cfg: ExperimentConfig,
    metrics: MetricsLog,
}

impl Run {
    fn open(cli: &Cli) -> Result<Run> {
        let dir = cli.run_dir.clone();
        if matches!(cli.command, Command::Report) {
            let cfg = resolve_existing(&dir)?;
            return Ok(Run::new(dir, cfg));
        }
        let echo = dir.join(CONFIG_FILE);
        let mut cfg = match &cli.config {
            Some(path) => load_config(path, cli.profile, cli.seed)?,
            None if echo.exists() => load_config(&echo, cli.profile, cli.seed)?,
            None => resolve_config("", cli.profile, cli.seed)?,
        };
        if let Some(path) = &cli.data_dir {
            cfg.dataset = DatasetSource::Directory {
                path: path.clone(),
                test_fraction: 0.25,
            };
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        fs::write(&echo, cfg.to_toml()).map_err(|e| Error::io(&echo, e))?;
        Ok(Run::new(dir, cfg))
    }

    pub fn new(dir: PathBuf, cfg: ExperimentConfig) -> Run {
        let metrics = MetricsLog::new(dir.join(METRICS_LOG));
        Run { dir, cfg, metrics }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn seed(&self, stage: &str) -> u64 {
        derive_seed(self.cfg.seed, stage)
    }

    fn provenance(&self, stage: &str, epoch: usize) -> Provenance {
        Provenance {
            stage: stage.into(),
            epoch,
            config_hash: self.cfg.hash(),
        }
    }

    /// Load the cached feature dataset, building it on first use.
    pub fn dataset(&self) -> Result<LabeledDataset> {
        let cache = self.path(DATASET_DIR);
        if cache.join("manifest.txt").exists() {
            return load_dataset(&cache);
        }
        let data = match &self.cfg.dataset {
            DatasetSource::Synthetic { classes, items_per_class } => {
                generate_synthetic_dataset(*classes, *items_per_class, self.seed("dataset"))?
            }
            DatasetSource::Directory { path, test_fraction } => {
                if path.join("manifest.txt").exists() {
                    load_dataset(path)?
                } else {
                    load_wav_dataset(path, &self.cfg.features, *test_fraction, self.seed("dataset"))?
                }
            }
        };
        save_dataset(&data, &cache)?;
        Ok(data)
    }

    /// Encoder shape implied by the config and the dataset.
    pub fn encoder(&self, data: &LabeledDataset) -> Result<EncoderConfig> {
        let first = data
            .items
            .first()
            .ok_or_else(|| Error::contract("dataset is empty"))?;
        if let Some(odd) = data.items.iter().find(|it| it.spec.mel_bins != first.spec.mel_bins) {
            return Err(Error::contract(format!(
                "item `{}` has {} mel bins, `{}` has {}",
                odd.id, odd.spec.mel_bins, first.id, first.spec.mel_bins
            )));
        }
        let mut enc = self.cfg.encoder(data.class_count);
        enc.input_mels = first.spec.mel_bins;
        enc.validate()?;
        Ok(enc)
    }

    fn require(&self, name: &str, what: &str) -> Result<PathBuf> {
        let path = self.path(name);
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact {
                path,
                what: what.into(),
            })
        }
    }

    fn load_stage(&self, name: &str, what: &str, enc: &EncoderConfig) -> Result<Checkpoint> {
        load_checkpoint_as(self.require(name, what)?, enc)
    }

    pub fn pretrain(&self) -> Result<String> {
        let data = self.dataset()?;
        let enc = self.encoder(&data)?;
        let mut log_err = Ok(());
        let run = run_pretraining(&self.cfg.pretrain, &enc, &data, self.seed("pretrain"), |e| {
            eprintln!("pretrain epoch {}: loss {:.6}", e.epoch, e.mean_loss);
            let sizes = &e.cluster_sizes;
            let record = MetricsRecord::new(
                "pretrain",
                e.epoch,
                [
                    ("mean_loss".to_string(), e.mean_loss),
                    ("kmeans_objective".to_string(), e.kmeans_objective),
                    ("min_cluster_size".to_string(), *sizes.iter().min().unwrap() as f64),
                    ("max_cluster_size".to_string(), *sizes.iter().max().unwrap() as f64),
                ],
            );
            if log_err.is_ok() {
                log_err = self.metrics.append(&record);
            }
        })?;
        log_err?;
        save_checkpoint(
            &run.params,
            &self.provenance("pretrain", self.cfg.pretrain.epochs),
            self.path(PRETRAIN_CKPT),
        )
    }

    pub fn pseudolabel(&self) -> Result<PseudoLabels> {
        let data = self.dataset()?;
        let enc = self.encoder(&data)?;
        let ckpt = self.load_stage(PRETRAIN_CKPT, "pre-trained encoder (run `pretrain` first)", &enc)?;
        let train = data.split(Split::Train);
        let t = data.class_count;
        let labels = generate_pseudo_labels(&ckpt.params, &train, t, &self.cfg.pretrain.kmeans(), self.seed("pseudolabel"))?;
        write_pseudo_labels(&self.dir, &labels, &ckpt.hash)?;
        let mut values = vec![("classes".to_string(), t as f64)];
        if let Some(p) = labels.purity {
            eprintln!("pseudo-label purity {p:.4}");
            values.push(("purity".to_string(), p));
        }
        self.metrics.append(&MetricsRecord::new("pseudolabel", 0, values))?;
        Ok(labels)
    }

    pub fn distill(&self) -> Result<String> {
        let data = self.dataset()?;
        let enc = self.encoder(&data)?;
        let train = data.split(Split::Train);
        let labels = read_pseudo_labels(&self.dir, data.class_count, train.len())?;
        let mut log_err = Ok(());
        let run = run_distillation(&self.cfg.distill, &enc, &train, &labels, self.seed("distill"), |e| {
            eprintln!("distill epoch {}: L_all {:.6}", e.epoch, e.mean.all);
            if log_err.is_ok() {
                log_err = self.metrics.append(&MetricsRecord::new("distill", e.epoch, e.mean.named()));
            }
        })?;
        log_err?;
        save_checkpoint(
            &run.params,
            &self.provenance("distill", self.cfg.distill.epochs),
            self.path(DISTILL_CKPT),
        )
    }

    pub fn eval(&self) -> Result<EvalReport> {
        let ckpt_path = self.require(DISTILL_CKPT, "distilled encoder checkpoint (run `distill` first)")?;
        let data = self.dataset()?;
        let enc = self.encoder(&data)?;
        let ckpt = load_checkpoint_as(ckpt_path, &enc)?;
        let (train, test) = (data.split(Split::Train), data.split(Split::Test));
        let (y_train, y_test) = (train.labels()?, test.labels()?);
        let probe = train_linear_probe(
            &extract_frozen_features(&ckpt.params, &train)?,
            &y_train,
            data.class_count,
            &self.cfg.probe,
            self.seed("probe"),
        )?;
        let report = evaluate(
            &probe,
            &extract_frozen_features(&ckpt.params, &test)?,
            &y_test,
            &ckpt.hash,
            &self.cfg.probe,
        )?;
        let path = self.path(EVAL_REPORT);
        fs::write(&path, serde_json::to_string_pretty(&report).unwrap() + "\n").map_err(|e| Error::io(&path, e))?;
        self.metrics.append(&MetricsRecord::new(
            "eval",
            0,
            [
                ("accuracy".to_string(), report.accuracy),
                ("correct".to_string(), report.correct as f64),
                ("n_test".to_string(), report.n_test as f64),
            ],
        ))?;
        Ok(report)
    }

    pub fn report(&self) -> Result<String> {
        let records = read_metrics(self.path(METRICS_LOG))?;
        let table = render_table(&records);
        let path = self.path(REPORT_FILE);
        fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
        Ok(table)
    }
}

fn resolve_existing(dir: &Path) -> Result<ExperimentConfig> {
    let echo = dir.join(CONFIG_FILE);
    if !echo.exists() {
        return Err(Error::MissingArtifact {
            path: echo,
            what: "resolved config of a previous run".into(),
        });
    }
    load_config(&echo, None, None)
}

pub fn write_pseudo_labels(dir: &Path, labels: &PseudoLabels, source_hash: &str) -> Result<()> {
    let mut list = String::new();
    for l in &labels.labels {
        writeln!(list, "{l}").unwrap();
    }
    let mut manifest = String::new();
    writeln!(manifest, "source={PRETRAIN_CKPT}").unwrap();
    writeln!(manifest, "source_sha256={source_hash}").unwrap();
    writeln!(manifest, "classes={}", labels.classes).unwrap();
    writeln!(manifest, "count={}", labels.labels.len()).unwrap();
    if let Some(p) = labels.purity {
        writeln!(manifest, "purity={p}").unwrap();
    }
    for (name, text) in [(PSEUDO_LABELS, list), (PSEUDO_MANIFEST, manifest)] {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Read pseudo-labels back, checking them against the current pre-trained
/// checkpoint and the training split size.
pub fn read_pseudo_labels(dir: &Path, classes: usize, expected: usize) -> Result<PseudoLabels> {
    let path = dir.join(PSEUDO_LABELS);
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path,
            what: "pseudo-labels (run `pseudolabel` first)".into(),
        });
    }
    let bad = |reason: String| Error::Integrity {
        path: path.clone(),
        reason,
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let labels = text
        .lines()
        .map(|l| l.trim().parse::<usize>().map_err(|_| bad(format!("bad label `{l}`"))))
        .collect::<Result<Vec<_>>>()?;
    if labels.len() != expected {
        return Err(bad(format!("{} labels for {expected} training items", labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= classes) {
        return Err(bad(format!("label {l} outside [0, {classes})")));
    }
    let manifest_path = dir.join(PSEUDO_MANIFEST);
    let manifest = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let field = |key: &str| {
        manifest
            .lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .map(str::to_string)
    };
    let source = dir.join(PRETRAIN_CKPT);
    if let (Some(recorded), true) = (field("source_sha256"), source.exists()) {
        let bytes = fs::read(&source).map_err(|e| Error::io(&source, e))?;
        let stored = crate::checkpoint::hex(&bytes[bytes.len().saturating_sub(32)..]);
        if stored != recorded {
            return Err(Error::State(format!(
                "pseudo-labels were generated from a different {PRETRAIN_CKPT}; re-run `pseudolabel`"
            )));
        }
    }
    Ok(PseudoLabels {
        labels,
        classes,
        purity: field("purity").and_then(|p| p.parse().ok()),
    })
}
