use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cpsets::conformal::{self, CalibrationRecord, PipelineConfig, TemperaturePolicy, DEFAULT_K_REG};
use cpsets::data::{self, LabeledDataset, LogitMatrix};
use cpsets::probcal::{self, ECE_BINS};
use cpsets::scores::{ScoreParams, Variant};
use cpsets::synthetic::{self, AccuracyProfile, SyntheticSpec};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "cpsets", version, about = "Conformal prediction sets from classifier logits")]
struct Cli {
    /// Worker threads (0 = all cores). Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Calibrate a threshold and write the record as JSON.
    Calibrate {
        #[command(flatten)]
        method: MethodArgs,
        /// Calibration dataset (.csv or binary).
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build prediction sets from a record; one JSON line per example.
    Predict {
        #[arg(long)]
        record: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Treat a CSV input as logits only, without a label column.
        #[arg(long)]
        unlabeled: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrate, predict and report metrics in one run.
    Evaluate {
        #[command(flatten)]
        method: MethodArgs,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Metrics report (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the per-example prediction lines.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Also write the calibration record.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Generate a synthetic dataset and print the expected rank-only set size.
    Synth {
        /// Top-r accuracies A_1,…,A_K (comma separated).
        #[arg(long, value_delimiter = ',', required_unless_present = "geometric")]
        profile: Vec<f64>,
        /// Geometric profile `K,A1,DECAY` instead of an explicit list.
        #[arg(long, value_delimiter = ',', num_args = 1, conflicts_with = "profile")]
        geometric: Vec<f64>,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, env = "CP_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.9)]
        tail_decay: f64,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a softmax temperature by NLL.
    FitTemperature {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct MethodArgs {
    #[arg(long, default_value = "aps")]
    scores: Variant,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    phi: Option<f64>,
    #[arg(long)]
    k_reg: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Tune `phi` (RAPS) or `lambda` (SAPS) over the default grid.
    #[arg(long)]
    grid: bool,
    /// `fit`, `fixed:T` or `off`.
    #[arg(long, default_value = "off")]
    temperature: String,
    /// Share of the calibration data kept for the threshold when tuning.
    #[arg(long, default_value_t = 0.8)]
    calib_fraction: f64,
    #[arg(long, env = "CP_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<cpsets::Error> for CliError {
    fn from(e: cpsets::Error) -> Self {
        if e.is_validation() {
            CliError::Usage(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

impl MethodArgs {
    fn config(&self) -> CliResult<PipelineConfig> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return usage(format!("--alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.calib_fraction > 0.0 && self.calib_fraction < 1.0) {
            return usage(format!("--calib-fraction must lie in (0, 1), got {}", self.calib_fraction));
        }
        let variant = self.scores;
        let stray = |name: &str, set: bool| -> CliResult<()> {
            if set {
                usage(format!("--{name} does not apply to --scores {variant}"))
            } else {
                Ok(())
            }
        };
        if self.grid && !variant.is_tunable() {
            return usage(format!("--grid does not apply to --scores {variant}"));
        }
        let params = match variant {
            Variant::Aps => {
                stray("lambda", self.lambda.is_some())?;
                stray("phi", self.phi.is_some())?;
                stray("k-reg", self.k_reg.is_some())?;
                stray("gamma", self.gamma.is_some())?;
                ScoreParams::Aps
            }
            Variant::Cons => {
                stray("lambda", self.lambda.is_some())?;
                stray("phi", self.phi.is_some())?;
                stray("k-reg", self.k_reg.is_some())?;
                ScoreParams::Cons {
                    gamma: self.gamma.unwrap_or(1.0),
                }
            }
            Variant::Raps => {
                stray("lambda", self.lambda.is_some())?;
                stray("gamma", self.gamma.is_some())?;
                let phi = match (self.phi, self.grid) {
                    (Some(_), true) => return usage("--grid and --phi are mutually exclusive"),
                    (Some(phi), false) => phi,
                    (None, true) => 0.0,
                    (None, false) => return usage("--scores raps needs --phi or --grid"),
                };
                ScoreParams::Raps {
                    phi,
                    k_reg: self.k_reg.unwrap_or(DEFAULT_K_REG),
                }
            }
            Variant::Saps => {
                stray("phi", self.phi.is_some())?;
                stray("k-reg", self.k_reg.is_some())?;
                stray("gamma", self.gamma.is_some())?;
                let lambda = match (self.lambda, self.grid) {
                    (Some(_), true) => return usage("--grid and --lambda are mutually exclusive"),
                    (Some(lambda), false) => lambda,
                    (None, true) => 1.0,
                    (None, false) => return usage("--scores saps needs --lambda or --grid"),
                };
                ScoreParams::Saps { lambda }
            }
        };
        let mut config = PipelineConfig::new(self.alpha, params, self.seed).with_temperature(parse_policy(&self.temperature)?);
        config.validation_fraction = 1.0 - self.calib_fraction;
        if self.grid {
            config = config.with_default_grid();
        }
        Ok(config)
    }
}

fn parse_policy(s: &str) -> CliResult<TemperaturePolicy> {
    match s {
        "fit" => Ok(TemperaturePolicy::Fit),
        "off" => Ok(TemperaturePolicy::Off),
        _ => match s.strip_prefix("fixed:").map(str::parse::<f64>) {
            Some(Ok(t)) if t.is_finite() && t > 0.0 => Ok(TemperaturePolicy::Fixed(t)),
            _ => usage(format!("--temperature expects fit, off or fixed:T with T > 0, got {s:?}")),
        },
    }
}

fn check_exists(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        usage(format!("{}: no such file", path.display()))
    }
}

fn read_dataset(path: &Path) -> CliResult<LabeledDataset> {
    check_exists(path)?;
    Ok(data::load_dataset(path)?)
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(path) => fs::write(path, text)?,
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn to_json(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct TemperatureReport {
    temperature: f64,
    nll: f64,
    ece_before: f64,
    ece_after: f64,
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Calibrate { method, input, out } => {
            let config = method.config()?;
            let full = read_dataset(&input)?;
            let record = conformal::calibrate(&full, &config)?;
            emit(out.as_deref(), &(record.to_json() + "\n"))
        }
        Command::Predict {
            record,
            input,
            unlabeled,
            out,
        } => {
            check_exists(&record)?;
            let record = CalibrationRecord::from_json(&fs::read_to_string(&record)?)?;
            check_exists(&input)?;
            let (logits, labels): (LogitMatrix, Option<Vec<usize>>) = if unlabeled {
                if !data::is_csv(&input) {
                    return usage("--unlabeled needs a CSV input");
                }
                (data::load_csv_unlabeled(&input)?, None)
            } else {
                let ds = data::load_dataset(&input)?;
                let labels = ds.labels().to_vec();
                (ds.logits().clone(), Some(labels))
            };
            let sets = record.predict(&logits)?;
            emit(out.as_deref(), &conformal::prediction_lines(&sets, labels.as_deref()))
        }
        Command::Evaluate {
            method,
            calib,
            test,
            out,
            predictions,
            record,
        } => {
            let config = method.config()?;
            let full = read_dataset(&calib)?;
            let test = read_dataset(&test)?;
            let run = conformal::pipeline(&full, &test, &config)?;
            if let Some(path) = predictions {
                fs::write(path, conformal::prediction_lines(&run.sets, Some(test.labels())))?;
            }
            if let Some(path) = record {
                fs::write(path, run.record.to_json() + "\n")?;
            }
            emit(out.as_deref(), &(run.report.to_json() + "\n"))
        }
        Command::Synth {
            profile,
            geometric,
            alpha,
            n,
            seed,
            tail_decay,
            noise,
            out,
        } => {
            let profile = if geometric.is_empty() {
                AccuracyProfile::new(profile)?
            } else {
                let [k, top1, decay] = geometric[..] else {
                    return usage("--geometric expects K,A1,DECAY");
                };
                if k.fract() != 0.0 || k < 2.0 {
                    return usage(format!("--geometric class count must be an integer ≥ 2, got {k}"));
                }
                AccuracyProfile::geometric(k as usize, top1, decay)?
            };
            let spec = SyntheticSpec::new(profile, tail_decay, noise, seed);
            spec.validate()?;
            let expected = synthetic::expected_cons_size(&spec.profile, alpha)?;
            if let Some(path) = out {
                let ds = synthetic::gen_dataset(&spec, n)?;
                data::write_binary(path, &ds)?;
            }
            println!("{expected:.6}");
            Ok(())
        }
        Command::FitTemperature { input, out } => {
            let ds = read_dataset(&input)?;
            let fit = probcal::fit_temperature(&ds);
            let before = data::softmax(ds.logits(), 1.0)?;
            let after = data::softmax(ds.logits(), fit.temperature)?;
            let report = TemperatureReport {
                temperature: fit.temperature,
                nll: fit.final_nll,
                ece_before: probcal::ece(&before, ds.labels(), ECE_BINS)?,
                ece_after: probcal::ece(&after, ds.labels(), ECE_BINS)?,
            };
            emit(out.as_deref(), &to_json(&report))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build();
    let result = match pool {
        Ok(pool) => pool.install(|| run(cli.command)),
        Err(e) => Err(CliError::Runtime(e.to_string())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn method(args: &[&str]) -> MethodArgs {
        #[derive(Parser)]
        struct Wrap {
            #[command(flatten)]
            m: MethodArgs,
        }
        let mut argv = vec!["x"];
        argv.extend_from_slice(args);
        Wrap::try_parse_from(argv).unwrap().m
    }

    #[test]
    fn policy_parsing() {
        assert_eq!(parse_policy("fit").unwrap(), TemperaturePolicy::Fit);
        assert_eq!(parse_policy("off").unwrap(), TemperaturePolicy::Off);
        assert_eq!(parse_policy("fixed:1.5").unwrap(), TemperaturePolicy::Fixed(1.5));
        for bad in ["fixed:0", "fixed:-1", "fixed:x", "warm"] {
            assert!(matches!(parse_policy(bad), Err(CliError::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn grid_excludes_named_hyperparameter() {
        assert!(method(&["--scores", "saps", "--grid", "--lambda", "0.1"]).config().is_err());
        assert!(method(&["--scores", "raps", "--grid", "--phi", "0.1"]).config().is_err());
        assert!(method(&["--scores", "aps", "--grid"]).config().is_err());
        assert!(method(&["--scores", "cons", "--lambda", "1"]).config().is_err());
        assert!(method(&["--scores", "saps"]).config().is_err());
    }

    #[test]
    fn config_fields() {
        let c = method(&["--scores", "raps", "--grid", "--calib-fraction", "0.75", "--seed", "4"]).config().unwrap();
        assert_eq!(c.params, ScoreParams::Raps { phi: 0.0, k_reg: 1 });
        assert_eq!(c.grid.as_ref().unwrap().len(), 11);
        assert!((c.validation_fraction - 0.25).abs() < 1e-15);
        assert_eq!(c.seed, 4);
        let c = method(&["--scores", "cons", "--gamma", "7.3", "--temperature", "fixed:2"]).config().unwrap();
        assert_eq!(c.params, ScoreParams::Cons { gamma: 7.3 });
        assert_eq!(c.temperature, TemperaturePolicy::Fixed(2.0));
        assert!(c.grid.is_none());
    }

    #[test]
    fn alpha_out_of_range_is_usage() {
        assert!(matches!(method(&["--alpha", "1.5"]).config(), Err(CliError::Usage(_))));
    }
}
