//! `odflow` — origin-destination flow forecasting pipeline.
//!
//! Subcommands cover the full loop: synthesize a dataset with known
//! ground truth, train a model, predict the next step, evaluate
//! against a truth file, run the ablation table, explore dataset
//! statistics, and export flat figure data.
//!
//! Every command is deterministic for a given config and seed, never
//! mutates its input files, and exits non-zero with a one-line
//! diagnostic on failure (65 data/parse, 66 missing file, 70 runtime,
//! 74 other I/O, 78 config).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use odflow_core::baseline::{baseline_lr, baseline_mean};
use odflow_core::config::{RunConfig, Variant};
use odflow_core::error::Error;
use odflow_core::flow::{
    exploration_stats, matrix_from_pairs_csv, matrix_to_pairs_csv, records_from_csv_path,
    FlowSeries,
};
use odflow_core::geo::{CitySet, DistanceMatrix};
use odflow_core::gravity::variables_to_csv;
use odflow_core::metrics::{evaluate, variance_study};
use odflow_core::model::{forecast_flow, ModelState};
use odflow_core::synth::synthesize;
use odflow_core::train::{ablation_run, fitted_variables, train};

#[derive(Parser)]
#[command(name = "odflow", version, about = "Origin-destination flow forecasting toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known ground truth.
    ///
    /// Writes cities.csv, flows.csv (all but the last generated step),
    /// next_truth.csv (the held-out step), and truth_vars.csv.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the synthesis seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (defaults to the config's `out`, then `.`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write checkpoint.txt, loss_history.csv, and
    /// variables.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Model variant: full, dhg, sil, gcn-sil, nc.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forecast one step past the end of the flow series.
    Predict {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint path (defaults to the config's `checkpoint`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a prediction file against a truth file (same schema).
    Eval {
        #[arg(long)]
        prediction: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Variant tag recorded in the metrics output.
        #[arg(long, default_value = "model")]
        variant: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every variant plus the reference predictors on a
    /// last-step holdout and tabulate metric,variant,value rows.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dataset statistics: distance and inflow/outflow correlations.
    Explore {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export flat data series behind the analysis figures.
    ExportFigures {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated thresholds (km); per value, retrains on a
        /// last-step holdout and records MAE/RMSE.
        #[arg(long)]
        sweep_epsilons: Option<String>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 66,
        Error::Io(_) => 74,
        Error::UnknownConfigKey { .. }
        | Error::InvalidConfig { .. }
        | Error::UnknownVariant { .. } => 78,
        Error::Diverged { .. } | Error::NonFinite { .. } => 70,
        _ => 65,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Loads the config and applies command-line overrides.
fn load_config(
    path: &Path,
    seed: Option<u64>,
    variant: Option<&str>,
    out: Option<&Path>,
) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::from_path(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.synth.seed = s;
    }
    if let Some(v) = variant {
        cfg.variant = Variant::parse(v)?;
    }
    if let Some(o) = out {
        cfg.out_dir = Some(o.to_path_buf());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Error> {
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn require_path(opt: &Option<PathBuf>, key: &str) -> Result<PathBuf, Error> {
    opt.clone().ok_or_else(|| Error::InvalidConfig {
        reason: format!("config key `{key}` is required for this command"),
    })
}

/// Loads the dataset named by the config, normalizing per its mode.
fn load_dataset(cfg: &RunConfig) -> Result<(CitySet, FlowSeries), Error> {
    let cities = CitySet::from_csv_path(&require_path(&cfg.cities_path, "cities")?)?;
    let records = records_from_csv_path(&require_path(&cfg.flows_path, "flows")?)?;
    let flows = FlowSeries::ingest_with_mode(&records, &cities, cfg.normalize)?;
    Ok((cities, flows))
}

fn write_metrics_rows<W: std::io::Write>(
    mut w: W,
    rows: &[(String, String, f64)],
) -> Result<(), Error> {
    writeln!(w, "metric,variant,value")?;
    for (metric, variant, value) in rows {
        writeln!(w, "{metric},{variant},{value:?}")?;
    }
    Ok(())
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Synth { config, seed, out } => {
            let cfg = load_config(&config, seed, None, out.as_deref())?;
            let dir = out_dir(&cfg)?;
            let synth = synthesize(&cfg.synth)?;
            let total = synth.flows.steps();
            if total < 2 {
                return Err(Error::InsufficientHistory {
                    needed: 2,
                    got: total,
                });
            }

            let mut f = std::fs::File::create(dir.join("cities.csv"))?;
            synth.cities.to_csv(&mut f)?;

            let history = synth.flows.slice_steps(0, total - 1)?;
            history.to_csv_path(&dir.join("flows.csv"))?;

            let mut f = std::fs::File::create(dir.join("next_truth.csv"))?;
            matrix_to_pairs_csv(&mut f, synth.flows.matrix(total - 1))?;

            let mut f = std::fs::File::create(dir.join("truth_vars.csv"))?;
            variables_to_csv(&mut f, synth.flows.labels(), &synth.truth)?;

            println!(
                "synthesized {} cities, {} history steps + 1 held-out step -> {}",
                synth.cities.len(),
                history.steps(),
                dir.display()
            );
            Ok(())
        }

        Command::Train {
            config,
            seed,
            variant,
            out,
        } => {
            let cfg = load_config(&config, seed, variant.as_deref(), out.as_deref())?;
            let dir = out_dir(&cfg)?;
            let (cities, flows) = load_dataset(&cfg)?;
            let result = train(&flows, &cities, &cfg, cfg.variant, cfg.seed)?;

            result.state.save_path(&dir.join("checkpoint.txt"))?;

            let mut f = std::fs::File::create(dir.join("loss_history.csv"))?;
            use std::io::Write as _;
            writeln!(f, "epoch,reconstruction,cross_city,cross_time,total")?;
            for (epoch, bd) in result.history.iter().enumerate() {
                writeln!(
                    f,
                    "{},{:?},{:?},{:?},{:?}",
                    epoch, bd.reconstruction, bd.cross_city, bd.cross_time, bd.total
                )?;
            }

            let vars = fitted_variables(&result.state, &flows, &cities)?;
            let mut f = std::fs::File::create(dir.join("variables.csv"))?;
            variables_to_csv(&mut f, flows.labels(), &vars)?;

            let last = result.history.last().unwrap();
            println!(
                "trained variant {} for {} epochs, final loss {:.6} -> {}",
                cfg.variant.name(),
                result.history.len(),
                last.total,
                dir.display()
            );
            Ok(())
        }

        Command::Predict {
            config,
            checkpoint,
            out,
        } => {
            let cfg = load_config(&config, None, None, out.as_deref())?;
            let dir = out_dir(&cfg)?;
            let ckpt_path = match checkpoint {
                Some(p) => p,
                None => require_path(&cfg.checkpoint_path, "checkpoint")?,
            };
            let state = ModelState::load_path(&ckpt_path)?;
            let (cities, flows) = load_dataset(&cfg)?;
            let forecast = forecast_flow(&state, &flows, &cities)?;
            // export in raw units
            let raw = forecast.matrix.scale(flows.scale());
            let mut f = std::fs::File::create(dir.join("prediction.csv"))?;
            matrix_to_pairs_csv(&mut f, &raw)?;
            println!(
                "predicted next step after {} -> {}",
                flows.label(flows.steps() - 1),
                dir.join("prediction.csv").display()
            );
            Ok(())
        }

        Command::Eval {
            prediction,
            truth,
            variant,
            out,
        } => {
            let pred = matrix_from_pairs_csv(
                std::fs::File::open(&prediction)?,
                &prediction.display().to_string(),
            )?;
            let truth_m =
                matrix_from_pairs_csv(std::fs::File::open(&truth)?, &truth.display().to_string())?;
            let m = evaluate(&pred, &truth_m)?;
            let rows = vec![
                ("mae".to_string(), variant.clone(), m.mae),
                ("rmse".to_string(), variant.clone(), m.rmse),
            ];
            write_metrics_rows(std::io::stdout().lock(), &rows)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                let f = std::fs::File::create(dir.join("metrics.csv"))?;
                write_metrics_rows(f, &rows)?;
            }
            Ok(())
        }

        Command::Ablate { config, seed, out } => {
            let cfg = load_config(&config, seed, None, out.as_deref())?;
            let dir = out_dir(&cfg)?;
            let (cities, flows) = load_dataset(&cfg)?;

            // model variants fan out across threads; each run owns its
            // state and is internally deterministic
            let outcomes: Vec<Result<_, Error>> = std::thread::scope(|scope| {
                let handles: Vec<_> = Variant::ALL
                    .iter()
                    .map(|&v| {
                        let cfg = &cfg;
                        let cities = &cities;
                        let flows = &flows;
                        scope.spawn(move || ablation_run(flows, cities, v, cfg, cfg.seed))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().unwrap()).collect()
            });

            let holdout = flows.matrix(flows.steps() - 1);
            let history = flows.slice_steps(0, flows.steps() - 1)?;
            let mean_m = evaluate(&baseline_mean(&history)?, holdout)?;
            let lr_m = evaluate(&baseline_lr(&history)?, holdout)?;

            let mut rows = Vec::new();
            for outcome in outcomes {
                let o = outcome?;
                rows.push(("mae".to_string(), o.variant.name().to_string(), o.metrics.mae));
                rows.push(("rmse".to_string(), o.variant.name().to_string(), o.metrics.rmse));
            }
            rows.push(("mae".to_string(), "mean".to_string(), mean_m.mae));
            rows.push(("rmse".to_string(), "mean".to_string(), mean_m.rmse));
            rows.push(("mae".to_string(), "lr".to_string(), lr_m.mae));
            rows.push(("rmse".to_string(), "lr".to_string(), lr_m.rmse));

            write_metrics_rows(std::io::stdout().lock(), &rows)?;
            let f = std::fs::File::create(dir.join("ablation.csv"))?;
            write_metrics_rows(f, &rows)?;
            Ok(())
        }

        Command::Explore { config, out } => {
            let cfg = load_config(&config, None, None, out.as_deref())?;
            let dir = out_dir(&cfg)?;
            let (cities, flows) = load_dataset(&cfg)?;
            let distances = DistanceMatrix::from_cities(&cities)?;
            let stats = exploration_stats(&flows, &distances)?;

            println!("intention_distance_corr,{:?}", stats.intention_distance_corr);
            println!("inflow_outflow_corr,{:?}", stats.inflow_outflow_corr);

            use std::io::Write as _;
            let mut f = std::fs::File::create(dir.join("exploration.csv"))?;
            writeln!(f, "statistic,value")?;
            writeln!(f, "intention_distance_corr,{:?}", stats.intention_distance_corr)?;
            writeln!(f, "inflow_outflow_corr,{:?}", stats.inflow_outflow_corr)?;

            let mut f = std::fs::File::create(dir.join("city_totals.csv"))?;
            writeln!(f, "city_id,inflow,outflow")?;
            for (c, (inflow, outflow)) in stats.per_city_totals.iter().enumerate() {
                writeln!(f, "{c},{inflow:?},{outflow:?}")?;
            }
            Ok(())
        }

        Command::ExportFigures {
            config,
            checkpoint,
            out,
            sweep_epsilons,
        } => {
            let cfg = load_config(&config, None, None, out.as_deref())?;
            let dir = out_dir(&cfg)?;
            let (cities, flows) = load_dataset(&cfg)?;
            use std::io::Write as _;

            // exploration scatter data
            let distances = DistanceMatrix::from_cities(&cities)?;
            let stats = exploration_stats(&flows, &distances)?;
            let mut f = std::fs::File::create(dir.join("fig_distance_flow.csv"))?;
            writeln!(f, "distance_km,mean_flow")?;
            let n = cities.len();
            for u in 0..n {
                for v in 0..n {
                    if u == v {
                        continue;
                    }
                    let mean = (0..flows.steps())
                        .map(|t| flows.matrix(t).get(u, v))
                        .sum::<f64>()
                        / flows.steps() as f64;
                    writeln!(f, "{:?},{:?}", distances.get(u, v), mean)?;
                }
            }
            let mut f = std::fs::File::create(dir.join("fig_inflow_outflow.csv"))?;
            writeln!(f, "city_id,inflow,outflow")?;
            for (c, (inflow, outflow)) in stats.per_city_totals.iter().enumerate() {
                writeln!(f, "{c},{inflow:?},{outflow:?}")?;
            }

            // checkpoint-derived figure data
            let ckpt_path = match checkpoint {
                Some(p) => Some(p),
                None => cfg.checkpoint_path.clone(),
            };
            if let Some(p) = ckpt_path {
                let state = ModelState::load_path(&p)?;
                let vars = fitted_variables(&state, &flows, &cities)?;
                let mut f = std::fs::File::create(dir.join("fig_variables.csv"))?;
                variables_to_csv(&mut f, flows.labels(), &vars)?;

                let study = variance_study(&vars);
                let mut f = std::fs::File::create(dir.join("fig_variance.csv"))?;
                writeln!(f, "variable,mean_temporal_variance")?;
                for (name, value) in odflow_core::gravity::VAR_NAMES.iter().zip(study.iter()) {
                    writeln!(f, "{name},{value:?}")?;
                }
            }

            // threshold sweep (retrains per value on a last-step holdout)
            if let Some(spec) = sweep_epsilons {
                let epsilons: Result<Vec<f64>, Error> = spec
                    .split(',')
                    .map(|s| {
                        s.trim().parse::<f64>().map_err(|_| Error::InvalidConfig {
                            reason: format!("bad epsilon `{s}` in --sweep-epsilons"),
                        })
                    })
                    .collect();
                let mut f = std::fs::File::create(dir.join("fig_epsilon_sweep.csv"))?;
                writeln!(f, "epsilon_km,mae,rmse")?;
                for eps in epsilons? {
                    let mut sweep_cfg = cfg.clone();
                    sweep_cfg.epsilon_km = eps;
                    sweep_cfg.tau_km = None;
                    let outcome =
                        ablation_run(&flows, &cities, sweep_cfg.variant, &sweep_cfg, sweep_cfg.seed)?;
                    writeln!(f, "{:?},{:?},{:?}", eps, outcome.metrics.mae, outcome.metrics.rmse)?;
                }
            }

            println!("figure data written to {}", dir.display());
            Ok(())
        }
    }
}
