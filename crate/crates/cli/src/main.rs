//! `mixlab` command line: dataset generation, training, verification,
//! heatmap sweeps and scale-factor derivation.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O or
//! malformed file, 4 numeric failure.

mod config;

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use mixlab::evaluator::{self, VerificationReport};
use mixlab::losses::{derive_unified_scale, LossKind};
use mixlab::synth::{
    build_splits, generate_dataset, load_dataset, save_dataset, Attribute, DatasetMeta,
    SingleConditionOptions, TestId, TrainId,
};
use mixlab::trainer::{self, load_checkpoint, save_checkpoint, VerificationSet, PROTOCOL_NOTE};
use serde::Serialize;

use config::ExperimentConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Core(mixlab::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use mixlab::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Core(e) => match e {
                E::InvalidConfig(_)
                | E::InvalidMargin(_)
                | E::InvalidScale(_)
                | E::InvalidEpsilon(_)
                | E::InsufficientSamples(_) => 2,
                E::Io { .. } | E::Format { .. } | E::Json(_) => 3,
                _ => 4,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<mixlab::Error> for CliError {
    fn from(e: mixlab::Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "mixlab",
    version,
    about = "Face-embedding loss lab on synthetic fine-grained conditions"
)]
struct Cli {
    /// TOML experiment file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `[output] dir`.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset into <output>/dataset.
    Gen {
        #[arg(long)]
        seed: Option<u64>,
        /// Fraction of the full-size Q-set pair counts.
        #[arg(long)]
        scaling: Option<f64>,
    },
    /// Train one model on a T set; writes metrics.jsonl and checkpoint.bin.
    Train {
        #[arg(long)]
        train_id: TrainId,
        #[arg(long)]
        loss: Option<LossKind>,
        /// Derive s1 and s2 from this ε.
        #[arg(long, conflicts_with_all = ["s1", "s2"])]
        epsilon: Option<f64>,
        #[arg(long)]
        s1: Option<f64>,
        #[arg(long)]
        s2: Option<f64>,
        #[arg(long)]
        margin: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a Q set; writes a report with the ROC.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test_id: TestId,
        /// Defaults to <output>/report.json.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train on T1..T4 and score Q1..Q4 for each loss.
    Grid {
        #[arg(long, value_delimiter = ',', default_value = "arcface,snpair,mixface")]
        losses: Vec<LossKind>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the scale factors derived from ε.
    Scale {
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        negatives: usize,
        #[arg(long, default_value_t = 0.25)]
        margin: f64,
    },
    /// Vary one condition attribute for training and testing.
    Conditions {
        #[arg(long)]
        attribute: Attribute,
        #[arg(long)]
        loss: Option<LossKind>,
        /// Attribute values on both axes, e.g. 1,10,20,29 for lux.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<u8>>,
        /// Test pairs per value.
        #[arg(long)]
        pairs: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let _ = e.print();
            eprintln!("\n{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = cli.output {
        cfg.output.dir = dir;
    }
    match cli.command {
        Command::Gen { seed, scaling } => {
            if let Some(s) = seed {
                cfg.dataset.seed = s;
            }
            if let Some(s) = scaling {
                cfg.dataset.pair_scaling = s;
            }
            cmd_gen(&cfg)
        }
        Command::Train {
            train_id,
            loss,
            epsilon,
            s1,
            s2,
            margin,
            epochs,
            seed,
        } => {
            if let Some(l) = loss {
                cfg.loss.kind = l.name().into();
            }
            if epsilon.is_some() {
                cfg.loss.epsilon = epsilon;
                cfg.loss.s1 = None;
                cfg.loss.s2 = None;
            }
            if s1.is_some() || s2.is_some() {
                cfg.loss.epsilon = None;
                cfg.loss.s1 = s1.or(cfg.loss.s1);
                cfg.loss.s2 = s2.or(cfg.loss.s2);
            }
            if margin.is_some() {
                cfg.loss.margin = margin;
            }
            override_trainer(&mut cfg, epochs, seed);
            cmd_train(&cfg, train_id)
        }
        Command::Eval {
            checkpoint,
            test_id,
            report,
        } => cmd_eval(&cfg, &checkpoint, test_id, report),
        Command::Grid { losses, epochs, seed } => {
            override_trainer(&mut cfg, epochs, seed);
            cmd_grid(&cfg, &losses)
        }
        Command::Scale {
            epsilon,
            classes,
            negatives,
            margin,
        } => {
            let s = derive_unified_scale(epsilon, classes, negatives, margin)?;
            println!("{:.4} {:.4}", s.s1, s.s2);
            Ok(())
        }
        Command::Conditions {
            attribute,
            loss,
            values,
            pairs,
        } => {
            if let Some(l) = loss {
                cfg.loss.kind = l.name().into();
            }
            let mut options = SingleConditionOptions {
                values,
                ..Default::default()
            };
            if let Some(p) = pairs {
                options.pair_budget = p;
            }
            cmd_conditions(&cfg, attribute, &options)
        }
    }
}

fn override_trainer(cfg: &mut ExperimentConfig, epochs: Option<usize>, seed: Option<u64>) {
    if let Some(e) = epochs {
        cfg.trainer.epochs = e;
        cfg.trainer.warmup_epochs = cfg.trainer.warmup_epochs.min(e.saturating_sub(1));
    }
    if let Some(s) = seed {
        cfg.trainer.seed = s;
    }
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn cmd_gen(cfg: &ExperimentConfig) -> CliResult {
    let synth = cfg.synth();
    let universe = generate_dataset(synth.clone())?;
    let split = build_splits(&universe, cfg.dataset.pair_scaling)?;
    let meta = DatasetMeta::describe(&split, &synth, cfg.dataset.pair_scaling);
    let dir = cfg.dataset_dir();
    save_dataset(&dir, &split, &meta)?;
    println!("wrote {} samples to {}", split.samples.len(), dir.display());
    for t in TrainId::ALL {
        println!("{t}: {} samples", split.train_set(t).len());
    }
    for q in TestId::ALL {
        let pairs = split.test_set(q);
        let pos = pairs.iter().filter(|p| p.same).count();
        println!("{q}: {} pairs ({pos} positive)", pairs.len());
    }
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, id: TrainId) -> CliResult {
    let train_cfg = cfg.train_config()?;
    let (split, _) = load_dataset(&cfg.dataset_dir())?;
    let out = trainer::train(&split, id, &train_cfg)?;
    let dir = cfg
        .output
        .dir
        .join("train")
        .join(format!("{}_{id}", train_cfg.loss));
    create_dir(&dir)?;
    out.log.write(&dir.join("metrics.jsonl"))?;
    save_checkpoint(&dir.join("checkpoint.bin"), &out.model)?;

    let h = &out.log.header;
    println!("{} on {id}: s1 {:.4} s2 {:.4} m {}", h.loss, h.s1, h.s2, h.m);
    if let Some(last) = out.log.last() {
        let accs: Vec<String> = last.accuracy.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
        println!(
            "epoch {} loss {:.4} | {}",
            last.epoch,
            last.mean_loss,
            accs.join(" ")
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    test_id: String,
    loss: LossKind,
    note: &'a str,
    #[serde(flatten)]
    report: &'a VerificationReport,
}

fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, id: TestId, report: Option<PathBuf>) -> CliResult {
    let model = load_checkpoint(checkpoint)?;
    let (split, _) = load_dataset(&cfg.dataset_dir())?;
    let pairs = VerificationSet::from_split(&split, id)?;
    let r = evaluator::verify(&model.encoder, &pairs)?;
    println!(
        "{id}: accuracy {:.4} threshold {:.4} auc {:.4} over {} pairs",
        r.accuracy, r.threshold, r.auc, r.n_pairs
    );
    let path = report.unwrap_or_else(|| cfg.output.dir.join("report.json"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let doc = EvalReport {
        test_id: id.to_string(),
        loss: model.loss,
        note: PROTOCOL_NOTE,
        report: &r,
    };
    let json = serde_json::to_string_pretty(&doc).map_err(mixlab::Error::from)?;
    write(&path, json + "\n")
}

fn cmd_grid(cfg: &ExperimentConfig, losses: &[LossKind]) -> CliResult {
    let base = cfg.train_config()?;
    let (split, _) = load_dataset(&cfg.dataset_dir())?;
    let dir = cfg.output.dir.join("grid");
    create_dir(&dir)?;
    let mut summary = String::from("loss,under,balanced,over\n");
    for &loss in losses {
        let train_cfg = base.clone().with_loss(loss);
        let (grid, logs) = evaluator::heatmap_with_logs(&split, &train_cfg)?;
        write(&dir.join(format!("heatmap_{loss}.csv")), grid.to_csv())?;
        for (t, log) in TrainId::ALL.iter().zip(&logs) {
            log.write(&dir.join(format!("{loss}_{t}.jsonl")))?;
        }
        let p = grid.partition_means();
        let _ = writeln!(summary, "{loss},{},{},{}", p.under, p.balanced, p.over);
        println!("{loss}");
        println!("      Q1     Q2     Q3     Q4");
        for (t, row) in TrainId::ALL.iter().zip(grid.cells) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
            println!("  {t} {}", cells.join(" "));
        }
        println!(
            "  under {:.4}  balanced {:.4}  over {:.4}",
            p.under, p.balanced, p.over
        );
    }
    write(&dir.join("summary.csv"), summary)?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_conditions(
    cfg: &ExperimentConfig,
    attribute: Attribute,
    options: &SingleConditionOptions,
) -> CliResult {
    let train_cfg = cfg.train_config()?;
    let universe = generate_dataset(cfg.synth())?;
    let r = evaluator::single_condition_report(&universe, attribute, options, &train_cfg)?;
    let dir = cfg.output.dir.join("conditions");
    create_dir(&dir)?;
    let mut csv = String::from("train_value,test_value,accuracy\n");
    for (i, row) in r.cells.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let _ = writeln!(csv, "{},{},{v}", r.values[i], r.values[j]);
        }
    }
    let path = dir.join(format!("{attribute}_{}.csv", train_cfg.loss));
    write(&path, csv)?;
    println!(
        "{attribute}: matched {:.4} mismatched {:.4} gap {:+.4}",
        r.diagonal_mean,
        r.off_diagonal_mean,
        r.gap()
    );
    println!("wrote {}", path.display());
    Ok(())
}
