//! Command-line front end over the library's experiment runner.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use til::gradcheck::{self, GradcheckOptions};
use til::runner::{
    self, load_spec, render_case_study, render_robustness, run_compare, run_robustness,
    run_train,
};
use til::trainer::Strategy;
use til::{NoiseMode, NoiseSpec, TilError};

#[derive(Parser)]
#[command(
    name = "til",
    about = "Importance-weighted pairwise ranking experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one strategy over the spec's seeds and write a run directory.
    Train {
        /// Experiment spec (TOML).
        #[arg(long)]
        spec: PathBuf,
        /// Overrides the spec's output directory (and TIL_OUT_DIR).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Line up summaries from finished run directories.
    Compare {
        /// Run directories containing summary.json.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Cutoff to compare at.
        #[arg(long, default_value_t = 20)]
        at_k: usize,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// `a>b`: exit with an assertion failure unless strategy a's
        /// mean recall beats strategy b's.
        #[arg(long)]
        assert_improvement: Option<String>,
    },
    /// Verify every analytic gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
    /// Weight grid by (positive grade, negative grade) for a trained model.
    ReportCaseStudy {
        /// Model snapshot (.tilm).
        #[arg(long)]
        model: PathBuf,
        /// Spec describing the rated dataset the model was trained on.
        #[arg(long)]
        spec: PathBuf,
        /// Write the full report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Clean-vs-noisy recall for several strategies.
    ReportRobustness {
        #[arg(long)]
        spec: PathBuf,
        /// Noise mode: noisy_pos, noisy_neg, or noisy_pos_neg.
        #[arg(long, default_value = "noisy_pos_neg")]
        mode: String,
        /// Fraction of each user's training positives affected.
        #[arg(long, default_value_t = 0.5)]
        fraction: f64,
        /// Comma-separated strategies to sweep.
        #[arg(long, default_value = "baseline_bpr,til_ui,til_mi")]
        strategies: String,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn parse_noise_mode(s: &str) -> Result<NoiseMode, TilError> {
    match s {
        "clean" => Ok(NoiseMode::Clean),
        "noisy_pos" => Ok(NoiseMode::NoisyPos),
        "noisy_neg" => Ok(NoiseMode::NoisyNeg),
        "noisy_pos_neg" => Ok(NoiseMode::NoisyPosNeg),
        other => Err(TilError::Config(format!(
            "unknown noise mode `{other}` (expected clean, noisy_pos, noisy_neg, noisy_pos_neg)"
        ))),
    }
}

fn run(cli: Cli) -> Result<(), TilError> {
    match cli.command {
        Command::Train { spec, out_dir } => {
            let spec = load_spec(&spec)?;
            let summary = run_train(&spec, out_dir.as_deref())?;
            print!("{}", summary.render_table());
            println!(
                "written to {}",
                runner::resolve_out_dir(&spec, out_dir.as_deref()).display()
            );
            Ok(())
        }
        Command::Compare { dirs, at_k, csv, assert_improvement } => {
            let report = run_compare(&dirs, at_k)?;
            print!("{}", report.render_table());
            if let Some(path) = csv {
                std::fs::write(&path, report.to_csv())?;
                println!("csv written to {}", path.display());
            }
            if let Some(claim) = assert_improvement {
                let (better, worse) = claim.split_once('>').ok_or_else(|| {
                    TilError::Config(format!(
                        "--assert-improvement expects `a>b`, got `{claim}`"
                    ))
                })?;
                report.assert_improvement(better.trim(), worse.trim())?;
                println!("improvement holds: {} > {}", better.trim(), worse.trim());
            }
            Ok(())
        }
        Command::Gradcheck { instances, seed } => {
            let report = gradcheck::run(&GradcheckOptions {
                instances,
                seed,
                ..GradcheckOptions::default()
            });
            print!("{}", report.render_table());
            println!("checked in {:.2}s", report.elapsed_secs);
            if report.passed {
                Ok(())
            } else {
                Err(TilError::Assertion(
                    "gradient check failed; see table above".into(),
                ))
            }
        }
        Command::ReportCaseStudy { model, spec, out } => {
            let spec = load_spec(&spec)?;
            let report = runner::run_case_study(&model, &spec, out.as_deref())?;
            print!("{}", render_case_study(&report));
            Ok(())
        }
        Command::ReportRobustness { spec, mode, fraction, strategies, out_dir } => {
            let spec = load_spec(&spec)?;
            let mode = parse_noise_mode(&mode)?;
            let strategies: Vec<Strategy> = strategies
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<Result<_, _>>()?;
            let noise = NoiseSpec { mode, fraction, seed: spec.train.seed };
            let rows = run_robustness(&spec, &strategies, &noise, out_dir.as_deref())?;
            print!("{}", render_robustness(&rows, spec.train.eval_k));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
