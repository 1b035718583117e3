use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use covid_rate_core::gradcheck::SuiteOptions;
use covid_rate_core::harness::{self, EvalMode, ExperimentConfig};
use covid_rate_core::network::ModelConfig;
use covid_rate_core::{Error, Result};

/// Lung-infection segmentation and quantification on chest CT slices.
///
/// Exit codes: 0 success, 1 check failure, 2 configuration error,
/// 3 data error.
#[derive(Parser, Debug)]
#[command(name = "covid-rate", version)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory; defaults to `paths.out_dir`, then `out`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Overrides every seed in the config.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train per fold, evaluate on held-out patients, write the run report.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest; overrides `paths.manifest`.
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
    },
    /// Score a checkpoint on a manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
        /// `slice` scores lesion slices only; `volume` every lung slice.
        #[arg(long, default_value = "slice")]
        mode: String,
    },
    /// Classify slices as infected or clean by predicted infection rate.
    Discriminate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
        /// Slices to leave out, one `patient_id slice_id` per line.
        #[arg(long, value_name = "PATH")]
        exclusions: Option<PathBuf>,
    },
    /// Generate synthetic infected slices from infected and healthy sources.
    Augment {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference checks of every differentiable operation.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Skip the whole-network check.
        #[arg(long)]
        skip_network: bool,
        /// Corrupt the analytic gradient of one check (for testing the
        /// checker itself).
        #[arg(long, hide = true, value_name = "CHECK")]
        inject_fault: Option<String>,
    },
    /// Trainable parameters per layer and in total.
    ParamCount {
        #[command(flatten)]
        common: Common,
        /// Overrides `model.base_width`.
        #[arg(long)]
        base_width: Option<usize>,
        /// Builds the model without the context module.
        #[arg(long)]
        no_cpb: bool,
    },
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => {
                let c = ExperimentConfig::default();
                c.validate()?;
                c
            }
        };
        Ok(match self.seed {
            Some(seed) => config.with_seed(seed),
            None => config,
        })
    }

    fn out_dir(&self, config: &ExperimentConfig) -> PathBuf {
        self.out
            .clone()
            .or_else(|| config.paths.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Train { common, manifest } => {
            let config = common.load()?;
            let out = common.out_dir(&config);
            let report = harness::cmd_train(&config, manifest.as_deref(), &out)?;
            print!("{}", report.overall.to_text()?);
            println!("report\t{}", out.join(harness::RUN_REPORT_FILE).display());
            Ok(0)
        }
        Command::Eval {
            common,
            checkpoint,
            manifest,
            mode,
        } => {
            let mode: EvalMode = mode.parse()?;
            let config = common.load()?;
            let out = common.out_dir(&config);
            let evaluation = harness::cmd_eval(&config, &checkpoint, manifest.as_deref(), mode, &out)?;
            print!("{}", evaluation.to_text()?);
            Ok(0)
        }
        Command::Discriminate {
            common,
            checkpoint,
            manifest,
            exclusions,
        } => {
            let config = common.load()?;
            let out = common.out_dir(&config);
            let result =
                harness::cmd_discriminate(&config, &checkpoint, manifest.as_deref(), exclusions.as_deref(), &out)?;
            let tsv = result.to_tsv();
            for line in tsv.lines().filter(|l| l.starts_with('#')) {
                println!("{}", line.trim_start_matches("# "));
            }
            Ok(0)
        }
        Command::Augment { common } => {
            let config = common.load()?;
            let out = common.out_dir(&config);
            let corpus = harness::cmd_augment(&config, &out)?;
            println!("pairs\t{}", corpus.len());
            println!("shortfall\t{}", corpus.shortfall);
            println!("manifest\t{}", out.join("manifest.tsv").display());
            Ok(0)
        }
        Command::Gradcheck {
            common,
            skip_network,
            inject_fault,
        } => {
            let config = common.load()?;
            let opts = SuiteOptions {
                seed: common.seed.unwrap_or(0),
                inject_fault,
                skip_network,
            };
            let (_, table, passed) = harness::cmd_gradcheck(&opts)?;
            print!("{table}");
            if let Some(out) = &common.out {
                write_output(out, "gradcheck.txt", &table)?;
                harness::write_snapshot(out, &config)?;
            }
            println!(
                "{}",
                if passed {
                    "all checks passed"
                } else {
                    "gradient check FAILED"
                }
            );
            Ok(if passed { 0 } else { 1 })
        }
        Command::ParamCount {
            common,
            base_width,
            no_cpb,
        } => {
            let mut config = common.load()?;
            config.model = ModelConfig {
                base_width: base_width.unwrap_or(config.model.base_width),
                cpb_enabled: config.model.cpb_enabled && !no_cpb,
                ..config.model
            };
            config.validate()?;
            let summary = harness::cmd_param_count(config.model)?;
            let text = summary.to_text(true);
            print!("{text}");
            if let Some(out) = &common.out {
                write_output(out, "param_count.tsv", &text)?;
                harness::write_snapshot(out, &config)?;
            }
            Ok(if summary.flagged() { 1 } else { 0 })
        }
    }
}

fn write_output(dir: &Path, name: &str, contents: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| io_error(&path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
