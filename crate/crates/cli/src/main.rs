use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sfuda_cli::commands::{self, SOURCE, TARGET};
use sfuda_cli::config::{keys_help, RunConfig};
use sfuda_cli::{selftest, write_json, CliError};
use sfuda_core::adapt::Steps;
use sfuda_core::data::Split;

#[derive(Parser)]
#[command(
    name = "sfuda",
    version,
    about = "Source-free domain adaptation for 3D nodule detection on synthetic CT",
    after_long_help = keys_help(),
)]
struct Cli {
    /// JSON run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config `out_dir`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Caps worker threads (0 = all cores); overrides the config `workers`.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// JSON report path; defaults to `<out_dir>/<command>.json`.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StepArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generates the source and target corpora with a 7:1:2 split.
    GenData {
        /// Dataset directory [default: <out_dir>/data].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains the source model on the labeled source train split.
    TrainSource {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint path [default: <out_dir>/source.ckpt].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapts a source checkpoint to the unlabeled target train split.
    Adapt {
        #[arg(long, value_enum, default_value = "all")]
        step: StepArg,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Source checkpoint [default: <out_dir>/source.ckpt].
        #[arg(long)]
        source: Option<PathBuf>,
        /// Checkpoint path [default: <out_dir>/adapted.ckpt].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes a predictions CSV for one domain and split.
    Infer {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint [default: <out_dir>/adapted.ckpt].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "target")]
        domain: DomainArg,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Predictions CSV [default: <out_dir>/predictions.csv].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scores a predictions CSV and prints the FROC table.
    Froc {
        /// [default: <out_dir>/predictions.csv]
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// [default: <data>/annotations.csv]
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Dataset whose domain/split scan ids define the scan set.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "target")]
        domain: DomainArg,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Finite-difference checks of every loss kernel and the full detector.
    Gradcheck {
        /// Random instances per kernel (at least 100).
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// FROC oracle, module invariants and preprocessing fidelity checks.
    Selftest,
    /// Full synthetic benchmark: source training, then full pipeline and
    /// step 2 alone for every benchmark seed.
    Benchmark,
}

fn domain(d: DomainArg) -> &'static str {
    match d {
        DomainArg::Source => SOURCE,
        DomainArg::Target => TARGET,
    }
}

fn split(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData { .. } => "gen-data",
        Command::TrainSource { .. } => "train-source",
        Command::Adapt { .. } => "adapt",
        Command::Infer { .. } => "infer",
        Command::Froc { .. } => "froc",
        Command::Gradcheck { .. } => "gradcheck",
        Command::Selftest => "selftest",
        Command::Benchmark => "benchmark",
    }
}

fn fail_unless(passed: bool, what: &str) -> Result<(), CliError> {
    if passed {
        Ok(())
    } else {
        Err(CliError::Check(format!("{what} failed; see the report")))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = cli.out_dir {
        cfg.out_dir = d;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;

    let out = cfg.out_dir.clone();
    let or = |p: &Option<PathBuf>, default: &str| p.clone().unwrap_or_else(|| out.join(default));
    let data_dir = |p: &Option<PathBuf>| or(p, "data");
    let report_path = cli.report.clone().unwrap_or_else(|| out.join(format!("{}.json", command_name(&cli.command))));
    let save = |v: &dyn erased::Report| v.write(&report_path);

    match &cli.command {
        Command::GenData { out: dir } => save(&commands::gen_data(&cfg, &data_dir(dir))?),
        Command::TrainSource { data, out: ckpt } => {
            let r = commands::train_source_cmd(&cfg, &data_dir(data), &or(ckpt, "source.ckpt"))?;
            save(&r)
        }
        Command::Adapt { step, data, source, out: ckpt } => {
            let steps = match step {
                StepArg::One => Steps::One,
                StepArg::Two => Steps::Two,
                StepArg::All => Steps::All,
            };
            let r = commands::adapt_cmd(&cfg, &data_dir(data), &or(source, "source.ckpt"), steps, &or(ckpt, "adapted.ckpt"))?;
            save(&r)
        }
        Command::Infer { data, checkpoint, domain: d, split: s, out: csv } => {
            let r = commands::infer_cmd(
                &cfg,
                &data_dir(data),
                &or(checkpoint, "adapted.ckpt"),
                domain(*d),
                split(*s),
                &or(csv, "predictions.csv"),
            )?;
            save(&r)
        }
        Command::Froc { predictions, annotations, data, domain: d, split: s } => {
            let (anns, ids) = match data {
                Some(dir) => (
                    annotations.clone().unwrap_or_else(|| dir.join(sfuda_core::data::ANNOTATIONS_FILE)),
                    commands::split_ids(dir, domain(*d), split(*s))?,
                ),
                None => {
                    let dir = data_dir(&None);
                    match annotations {
                        Some(a) => (a.clone(), Vec::new()),
                        None => (dir.join(sfuda_core::data::ANNOTATIONS_FILE), commands::split_ids(&dir, domain(*d), split(*s))?),
                    }
                }
            };
            let r = commands::froc_cmd(&or(predictions, "predictions.csv"), &anns, &ids)?;
            println!("{}", r.froc.table());
            save(&r)
        }
        Command::Gradcheck { instances } => {
            let r = commands::gradcheck_cmd(*instances, cfg.seed)?;
            for c in r.kernels.iter().chain(&r.detector) {
                println!("{:<24} max rel error {:.2e} (tol {:.0e}) {}", c.name, c.max_rel_error, c.tolerance, if c.passed { "ok" } else { "FAIL" });
            }
            save(&r)?;
            fail_unless(r.passed, "gradient check")
        }
        Command::Selftest => {
            let r = selftest::run(cfg.seed);
            for c in &r.checks {
                println!("{:<40} {} ({})", c.name, if c.passed { "ok" } else { "FAIL" }, c.detail);
            }
            save(&r)?;
            fail_unless(r.passed, "self test")
        }
        Command::Benchmark => {
            let r = commands::benchmark(&cfg)?;
            println!("source only   {:.4}", r.source_only.average);
            for run in &r.runs {
                println!("seed {:<4} {:<4} {:.4}", run.seed, format!("{:?}", run.steps).to_lowercase(), run.froc.average);
            }
            println!("gain on reference seed {:.4} (needs >= {})", r.reference_gain, commands::MIN_GAIN);
            println!("mean full {:.4} vs step 2 only {:.4}", r.mean_full, r.mean_step2_only);
            save(&r)?;
            fail_unless(r.gain_passed && r.ordering_passed, "benchmark")
        }
    }
}

/// Object-safe JSON writing for the heterogeneous reports.
mod erased {
    use super::*;

    pub trait Report {
        fn write(&self, path: &Path) -> Result<(), CliError>;
    }

    impl<T: serde::Serialize> Report for T {
        fn write(&self, path: &Path) -> Result<(), CliError> {
            write_json(path, self)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let reason = serde_json::json!({ "error": e.kind(), "message": e.to_string(), "exit_code": e.exit_code() });
            eprintln!("{reason}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
