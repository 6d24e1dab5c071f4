use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use heatkv_core::commands::{self, PlanOptions};
use heatkv_core::formats::{self, ScheduleFile, ScoresFile, TraceLevel};
use heatkv_core::heatmap::GridSet;
use heatkv_core::scheduler::{Accounting, Mode, Policy, ORACLE_CANDIDATE_LIMIT};
use heatkv_core::trace::Archetype;
use heatkv_core::{Config, Error};

const EXIT_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "heatkv", version, about = "KV-cache pruning schedules for multi-scale autoregressive transformers")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    /// Config block: a JSON file or a preset (infinity, toy).
    #[arg(long, global = true)]
    config: Option<String>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, global = true, value_enum)]
    accounting: Option<AccountingArg>,
    /// Budget fraction, or a comma-separated sweep.
    #[arg(long, global = true, value_delimiter = ',')]
    budget: Vec<f64>,
    /// Overrides the config's sink scale count.
    #[arg(long, global = true)]
    sinks: Option<usize>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Average a trace directory and write head scores.
    Calibrate { traces: PathBuf },
    /// Build a schedule from a scores file.
    Plan {
        scores: PathBuf,
        #[arg(long, value_enum, default_value_t = PolicyArg::Greedy)]
        policy: PolicyArg,
    },
    /// Replay a schedule and report cache occupancy.
    Simulate {
        schedule: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Check a schedule against the exhaustive oracle and the simulator.
    Verify {
        schedule: PathBuf,
        #[arg(long, default_value_t = ORACLE_CANDIDATE_LIMIT)]
        max_oracle_candidates: usize,
    },
    /// Write synthetic calibration traces.
    Synth {
        #[arg(long)]
        pattern: String,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long, value_enum, default_value_t = LevelArg::Raw)]
        level: LevelArg,
    },
    /// Export an L×H removal grid for one scale.
    Heatmap {
        schedule: PathBuf,
        #[arg(long)]
        scale: usize,
        /// Restrict a scale-mode grid to one source scale.
        #[arg(long)]
        source: Option<usize>,
        #[arg(long, default_value = "combined")]
        set: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Binary,
    Scale,
}

#[derive(Clone, Copy, ValueEnum)]
enum AccountingArg {
    Paper,
    Tight,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Greedy,
    Naive,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Raw,
    Beta,
}

/// Outcome of a command that ran to completion.
enum Outcome {
    Ok,
    Failed,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HEATKV_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(EXIT_FAILED),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn run(cli: Cli) -> Result<Outcome, Error> {
    let s = &cli.shared;
    match &cli.command {
        Command::Synth {
            pattern,
            samples,
            level,
        } => {
            let pattern: Archetype = pattern.parse()?;
            let config = commands::with_sinks(config_or(s, "toy")?, s.sinks);
            let out = s.out.as_deref().ok_or_else(|| missing("--out"))?;
            let level = match level {
                LevelArg::Raw => TraceLevel::Raw,
                LevelArg::Beta => TraceLevel::Beta,
            };
            commands::synth(&config, pattern, s.seed, *samples, level, out)?;
        }
        Command::Calibrate { traces } => {
            let config = match (&s.config, s.sinks) {
                (None, None) => None,
                (Some(_), _) => Some(commands::with_sinks(config_or(s, "")?, s.sinks)),
                (None, Some(_)) => {
                    let manifest = formats::read_manifest(traces)?;
                    Some(commands::with_sinks(manifest.config, s.sinks))
                }
            };
            let scores = commands::calibrate(traces, config.as_ref())?;
            emit(s.out.as_deref(), &formats::to_json_string(&scores)?)?;
        }
        Command::Plan { scores, policy } => {
            let bytes = formats::read_file(scores)?;
            let file: ScoresFile = serde_json::from_slice(&bytes).map_err(|e| parse_error(scores, e))?;
            check_config(s, &file.config)?;
            let digest = formats::sha256_hex(&bytes);
            let options = PlanOptions {
                mode: mode(s),
                accounting: accounting(s),
                policy: match policy {
                    PolicyArg::Greedy => Policy::Greedy,
                    PolicyArg::Naive => Policy::Naive,
                },
            };
            match s.budget.as_slice() {
                [] => return Err(missing("--budget")),
                [b] => {
                    let schedule = commands::plan(&file, Some(digest), *b, options)?;
                    emit(s.out.as_deref(), &formats::to_json_string(&schedule)?)?;
                }
                fractions => {
                    let dir = s.out.as_deref().ok_or_else(|| missing("--out (a directory for sweeps)"))?;
                    let schedules = commands::plan_sweep(&file, Some(digest), fractions, options)?;
                    for (b, schedule) in fractions.iter().zip(&schedules) {
                        formats::write_json(&dir.join(formats::sweep_file_name(*b)), schedule)?;
                    }
                }
            }
        }
        Command::Simulate { schedule, format } => {
            let file = read_schedule(s, schedule)?;
            let report = commands::simulate(&file)?;
            let text = match format {
                Format::Json => formats::report_json(&report)?,
                Format::Csv => formats::report_csv(&report),
            };
            emit(s.out.as_deref(), &text)?;
            for v in &report.violations {
                eprintln!("violation: scale {} layer {}: {} tokens > cap {}", v.scale, v.layer, v.tokens, v.cap);
            }
            if !report.passed() {
                return Ok(Outcome::Failed);
            }
        }
        Command::Verify {
            schedule,
            max_oracle_candidates,
        } => {
            let file = read_schedule(s, schedule)?;
            let report = commands::verify(&file, *max_oracle_candidates)?;
            emit(s.out.as_deref(), &formats::to_json_string(&report)?)?;
            if !report.passed {
                return Ok(Outcome::Failed);
            }
        }
        Command::Heatmap {
            schedule,
            scale,
            source,
            set,
        } => {
            let file = read_schedule(s, schedule)?;
            let set: GridSet = set.parse()?;
            emit(s.out.as_deref(), &commands::heatmap(&file, *scale, set, *source)?)?;
        }
    }
    Ok(Outcome::Ok)
}

fn config_or(s: &Shared, default: &str) -> Result<Config, Error> {
    commands::load_config(s.config.as_deref().unwrap_or(default))
}

fn mode(s: &Shared) -> Mode {
    match s.mode {
        Some(ModeArg::Scale) => Mode::Scale,
        _ => Mode::Binary,
    }
}

fn accounting(s: &Shared) -> Accounting {
    match s.accounting {
        Some(AccountingArg::Tight) => Accounting::Tight,
        _ => Accounting::Paper,
    }
}

/// Refuses inputs whose embedded config differs from `--config` / `--sinks`.
fn check_config(s: &Shared, found: &Config) -> Result<(), Error> {
    found.validate()?;
    if let Some(name_or_path) = &s.config {
        let expected = commands::with_sinks(commands::load_config(name_or_path)?, s.sinks);
        formats::ensure_same_config(&expected, found, "input")?;
    } else if let Some(sinks) = s.sinks {
        if sinks != found.schedule.sink_count {
            return Err(Error::Argument(format!(
                "--sinks {sinks} disagrees with the input's sink count {}",
                found.schedule.sink_count
            )));
        }
    }
    Ok(())
}

fn read_schedule(s: &Shared, path: &Path) -> Result<ScheduleFile, Error> {
    let file: ScheduleFile = formats::read_json(path)?;
    check_config(s, &file.config)?;
    if s.mode.is_some() && mode(s) != file.mode {
        return Err(Error::Argument(format!("--mode disagrees with the schedule's {} mode", file.mode)));
    }
    if s.accounting.is_some() && accounting(s) != file.accounting {
        return Err(Error::Argument(format!(
            "--accounting disagrees with the schedule's {} accounting",
            file.accounting
        )));
    }
    Ok(file)
}

fn parse_error(path: &Path, e: serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn missing(flag: &str) -> Error {
    Error::Argument(format!("{flag} is required"))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => formats::write_text(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
