use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use qfusion::graddiff::{boundary_free_case_for, check_suite, fd_check, CheckDims, ProbeCrossEntropy, Stencil, Variant};
use qfusion::harness::{
    evaluate, gen_dataset, parse_list, parse_mr_grid, parse_seeds, sweep_with, test_policy, test_schedule, train,
    ExperimentConfig, ReliabilityMaps, SavedModel, SweepGrid, TrainSpec,
};
use qfusion::missing::DegradationSpec;
use qfusion::{Error, Result};

#[derive(Parser)]
#[command(name = "qfusion", version, about = "Reliability-aware two-modality feature fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one variant and save its parameters under `<out>/params`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long, default_value_t = 0.0)]
        mr: f64,
        #[arg(long, default_value = "zero")]
        policy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate saved parameters on the test split.
    Eval {
        #[arg(long)]
        params: PathBuf,
        /// Defaults to the configuration stored with the parameters.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        mr: f64,
        #[arg(long, default_value = "zero")]
        policy: String,
        /// Test schedule seed; defaults to the training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and evaluate every grid cell; writes a CSV and a JSON summary.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "0.0:0.5:0.1")]
        mr: String,
        #[arg(long, default_value = "mean_baseline,dmqa_only,ocnf_only,full")]
        variants: String,
        #[arg(long, default_value = "zero")]
        policies: String,
        #[arg(long, default_value = "0..4")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
        /// Summary path; defaults to `<out>` with a `.json` extension.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Compare analytic and central-difference gradients.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        min_margin: f64,
        /// Probe at most this many coordinates per parameter group.
        #[arg(long)]
        max_coords: Option<usize>,
        /// Instead of the configured shape, check this many small random shapes.
        #[arg(long)]
        suite: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export L, D and R maps of the test split.
    ReliabilityDump {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        mr: f64,
        #[arg(long, default_value = "zero")]
        policy: String,
    },
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            variant,
            mr,
            policy,
            seed,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let variant: Variant = variant.parse()?;
            let policy: DegradationSpec = policy.parse()?;
            let data = gen_dataset(&cfg.synth())?;
            let spec = TrainSpec::new(&cfg, variant, mr, policy, seed);
            let outcome = train(&cfg, &data.train, &spec)?;
            let schedule = test_schedule(data.test.len(), mr, seed)?;
            let metrics = evaluate(&outcome.params, variant, &data.test, &schedule, &test_policy(&policy, seed))?;
            let saved = SavedModel::new(&cfg, spec, outcome.params.clone());
            saved.save(&out.join("params"))?;
            write_json(
                &out.join("train.json"),
                &json!({
                    "config_hash": saved.config_hash,
                    "spec": spec,
                    "initial_loss": outcome.initial_loss,
                    "history": outcome.history,
                    "test": metrics,
                }),
            )?;
            println!("{}", serde_json::to_string(&metrics)?);
        }
        Command::Eval {
            params,
            config,
            mr,
            policy,
            seed,
        } => {
            let saved = SavedModel::load(&params)?;
            let cfg = match config {
                Some(path) => ExperimentConfig::load(&path)?,
                None => saved.config.clone(),
            };
            if cfg.model() != saved.config.model() {
                return Err(Error::Config("config model shape differs from the saved parameters".into()));
            }
            if cfg.hash() != saved.config_hash {
                eprintln!("note: config differs from the training config");
            }
            let policy: DegradationSpec = policy.parse()?;
            let seed = seed.unwrap_or(saved.spec.seed);
            let data = gen_dataset(&cfg.synth())?;
            let schedule = test_schedule(data.test.len(), mr, seed)?;
            let metrics = evaluate(&saved.params, saved.variant(), &data.test, &schedule, &test_policy(&policy, seed))?;
            println!("{}", serde_json::to_string(&metrics)?);
        }
        Command::Sweep {
            config,
            mr,
            variants,
            policies,
            seeds,
            out,
            json,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let grid = SweepGrid {
                mrs: parse_mr_grid(&mr)?,
                policies: parse_list(&policies, |s| s.parse())?,
                variants: parse_list(&variants, |s| s.parse())?,
                seeds: parse_seeds(&seeds)?,
            };
            let total = grid.cells();
            let mut done = 0;
            let result = sweep_with(&cfg, &grid, |r| {
                done += 1;
                eprintln!(
                    "[{done}/{total}] {} {} mr={} seed={} acc={}",
                    r.variant, r.policy, r.mr, r.seed, r.metrics.accuracy
                );
            })?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            result.write_csv(fs::File::create(&out)?)?;
            let json_path = json.unwrap_or_else(|| out.with_extension("json"));
            fs::write(&json_path, result.to_json())?;
            for cell in result.summary() {
                println!(
                    "{} {} mr={} accuracy {:.4} ± {:.4}",
                    cell.variant, cell.policy, cell.mr, cell.accuracy.mean, cell.accuracy.std
                );
            }
        }
        Command::GradCheck {
            config,
            h,
            batch,
            min_margin,
            max_coords,
            suite,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let max_rel_err = match suite {
                Some(count) => {
                    let report = check_suite(cfg.seed, count, h, Stencil::Central, min_margin)?;
                    write_json(&out, &report)?;
                    report.max_rel_err
                }
                None => {
                    let model = cfg.model();
                    let dims = CheckDims {
                        batch,
                        positions: cfg.positions,
                        channels: model.channels,
                        tokens: model.tokens,
                        iterations: model.iterations,
                        classes: model.num_classes,
                    };
                    let case = boundary_free_case_for(cfg.seed, dims, &model, min_margin)?;
                    let report = fd_check(
                        &case.params,
                        &case.batch,
                        &ProbeCrossEntropy::new(Variant::Full),
                        h,
                        max_coords,
                        cfg.seed,
                    )?;
                    write_json(
                        &out,
                        &json!({
                            "seed": case.seed,
                            "dims": case.dims,
                            "margin": case.margin,
                            "report": report,
                        }),
                    )?;
                    report.max_rel_err
                }
            };
            println!("max relative error {max_rel_err:e}");
        }
        Command::ReliabilityDump {
            params,
            out,
            mr,
            policy,
        } => {
            let saved = SavedModel::load(&params)?;
            let policy: DegradationSpec = policy.parse()?;
            let seed = saved.spec.seed;
            let data = gen_dataset(&saved.config.synth())?;
            let schedule = test_schedule(data.test.len(), mr, seed)?;
            let maps = ReliabilityMaps::compute(&saved.params, &data.test, &schedule, &test_policy(&policy, seed))?;
            maps.write(&out)?;
            fs::create_dir_all(&out)?;
            schedule.write_csv(fs::File::create(out.join("schedule.csv"))?)?;
            println!("wrote {} samples to {}", data.test.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
