//! Command-line front end for the hot deck imputation engine.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 imputation failure (a target with no donors).

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use hotdeck::engine::{run_imputations, EngineError, RunConfig};
use hotdeck::io::{load_panel, load_run_config, load_scenario, save_completed, Scenario};
use hotdeck::panel::missingness_profile;
use hotdeck::pooling::{analyze, pool_estimates, AnalysisSpec, PooledEstimate};
use hotdeck::sim::{evaluate, SimError};

#[derive(Parser)]
#[command(
    name = "hotdeck",
    version,
    about = "Constraint-aware random hot deck multiple imputation for weekly activity panels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Impute a panel M times and write the completed datasets and log.
    Impute {
        /// Input panel file.
        input: PathBuf,
        /// Run configuration file (key = value).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for imputed.csv and provenance.csv.
        #[arg(long, short)]
        output: PathBuf,
        /// Override the configured master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Analyze completed panel files and pool them with Rubin's rules.
    Pool {
        /// Completed panel files, one per replicate.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Analysis: mean_frequency, sport_proportion:<code>, mean_count:<code>.
        #[arg(long, default_value = "mean_frequency")]
        analysis: String,
    },
    /// Run a simulation scenario and report per-method bias and coverage.
    Simulate {
        /// Scenario file (key = value).
        scenario: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the report as CSV to this path.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Summarize missingness in a panel file.
    Describe {
        /// Input panel file.
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(EngineError::NoDonors(_)) = cause.downcast_ref::<EngineError>() {
            return 3;
        }
        if let Some(SimError::Engine(EngineError::NoDonors(_))) = cause.downcast_ref::<SimError>() {
            return 3;
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Impute {
            input,
            config,
            output,
            seed,
        } => {
            let dataset =
                load_panel(&input).with_context(|| format!("reading {}", input.display()))?;
            let mut config = match config {
                Some(path) => {
                    load_run_config(&path).with_context(|| format!("reading {}", path.display()))?
                }
                None => RunConfig::default(),
            };
            if let Some(seed) = seed {
                config.master_seed = seed;
            }
            let results = run_imputations(&dataset, &config)?;
            save_completed(&results, &output)
                .with_context(|| format!("writing {}", output.display()))?;
            let imputed: usize = results.iter().map(|r| r.provenance.len()).sum();
            println!(
                "imputed {} replicate(s), {} logged cell(s) → {}",
                results.len(),
                imputed,
                output.display()
            );
            Ok(())
        }
        Command::Pool { inputs, analysis } => {
            let spec = AnalysisSpec::parse(&analysis)?;
            let mut pairs = Vec::with_capacity(inputs.len());
            for path in &inputs {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                if text.starts_with("# hotdeck-imputed") {
                    // a multi-replicate imputed.csv contributes one estimate
                    // per replicate
                    for (_, dataset) in hotdeck::io::read_completed_str(&text)
                        .with_context(|| format!("reading {}", path.display()))?
                    {
                        pairs.push(analyze(&dataset, &spec));
                    }
                } else {
                    let dataset = hotdeck::io::read_panel_str(&text)
                        .with_context(|| format!("reading {}", path.display()))?;
                    pairs.push(analyze(&dataset, &spec));
                }
            }
            let pooled = pool_estimates(&pairs)?;
            print_pooled(&spec, &pooled);
            Ok(())
        }
        Command::Simulate {
            scenario,
            seed,
            output,
        } => {
            let Scenario {
                generator,
                amputation,
                methods,
                n_sim,
                estimand,
                mi_m,
                seed: scenario_seed,
            } = load_scenario(&scenario)
                .with_context(|| format!("reading {}", scenario.display()))?;
            let seed = seed.unwrap_or(scenario_seed);
            let report = evaluate(
                &generator,
                &amputation,
                &methods,
                n_sim,
                &estimand,
                mi_m,
                seed,
            )?;
            print!("{}", report.to_text());
            if let Some(path) = output {
                std::fs::write(&path, report.to_csv())
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(())
        }
        Command::Describe { input } => {
            let dataset =
                load_panel(&input).with_context(|| format!("reading {}", input.display()))?;
            let p = missingness_profile(&dataset);
            println!("records:   {}", p.n_records);
            println!("subjects:  {}", dataset.subjects().len());
            println!(
                "missing pain:      {:>6}  ({:.1}%)",
                p.missing_pain,
                100.0 * p.rate_pain()
            );
            println!(
                "missing frequency: {:>6}  ({:.1}%)",
                p.missing_frequency,
                100.0 * p.rate_frequency()
            );
            println!(
                "missing sports:    {:>6}  ({:.1}%)",
                p.missing_sports,
                100.0 * p.rate_sports()
            );
            println!(
                "missing counts:    {:>6}  ({:.1}%)",
                p.missing_counts,
                100.0 * p.rate_counts()
            );
            println!("overall cell rate: {:.3}", p.overall_rate);
            Ok(())
        }
    }
}

fn print_pooled(spec: &AnalysisSpec, pooled: &PooledEstimate) {
    println!("analysis:  {}", spec.name());
    println!("replicates:{:>10}", pooled.m);
    println!("estimate:  {:>14.6}", pooled.q_bar);
    println!("within:    {:>14.6}", pooled.within);
    println!("between:   {:>14.6}", pooled.between);
    println!("total:     {:>14.6}", pooled.total);
    match pooled.df {
        Some(df) => println!("df:        {:>14.1}", df),
        None => println!("df:        {:>14}", "inf"),
    }
    println!("95% CI:    [{:.6}, {:.6}]", pooled.ci_95.0, pooled.ci_95.1);
}
