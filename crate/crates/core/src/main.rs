use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use shiftens::ensemble::Model;
use shiftens::nn::{grad_check, random_instance};
use shiftens::rng::{stream, Purpose};
use shiftens::runner::{self, save_checkpoint, Checkpoint, ExperimentConfig};
use shiftens::{Error, Result};

#[derive(Parser)]
#[command(name = "shiftens", version, about = "Shared-shift transfer learning for deep ensembles")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source-task models and write one checkpoint each.
    Pretrain,
    /// Transfer pretrained checkpoints to the target task with one strategy.
    Transfer {
        #[arg(long)]
        strategy: Option<String>,
        /// Directory of model_{i}.json files [default: <out>/checkpoints].
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Accuracy, disagreement and rejection of a set of model checkpoints.
    Evaluate {
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Task::Source)]
        on: Task,
    },
    /// Run every strategy at the matched compute budget.
    Compare {
        /// Pretrains in memory when omitted.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on random networks.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, default_value_t = 4)]
        max_layers: usize,
        #[arg(long, default_value_t = 16)]
        max_width: usize,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Source,
    Target,
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn save_models(models: &[Model], dir: &Path) -> Result<()> {
    for (m, p) in models.iter().zip(runner::checkpoint_paths(dir, models.len())) {
        save_checkpoint(&Checkpoint::Model(m.clone()), &p)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.global)?;
    let default_ckpts = cfg.out_dir.join("checkpoints");
    match cli.command {
        Command::Pretrain => {
            let paths = runner::pretrain(&cfg)?;
            println!("wrote {} checkpoints to {}", paths.len(), default_ckpts.display());
        }
        Command::Transfer { strategy, checkpoints } => {
            if let Some(s) = strategy {
                cfg.transfer.strategy = s.parse()?;
            }
            cfg.validate()?;
            let pretrained = runner::load_pretrained(&cfg, &checkpoints.unwrap_or(default_ckpts))?;
            let report = runner::run_experiment(&cfg, &pretrained)?;
            let dir = cfg.out_dir.join(report.strategy.name());
            runner::save_run(&report, &dir)?;
            print_line(&report);
            println!("wrote {}", dir.join("report.json").display());
        }
        Command::Evaluate { checkpoints, on } => {
            let dir = checkpoints.unwrap_or(default_ckpts);
            let models = std::fs::read_dir(&dir)
                .map_err(|e| Error::Input(format!("{}: {e}", dir.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("model_")))
                .count();
            let models = runner::checkpoint_paths(&dir, models)
                .iter()
                .map(|p| runner::load_model(p, None))
                .collect::<Result<Vec<_>>>()?;
            let (source, target) = runner::load_tasks(&cfg)?;
            let ds = match on {
                Task::Source => &source.eval,
                Task::Target => &target.eval,
            };
            let eval = runner::evaluate(&models, ds, &cfg.metrics)?;
            println!("{}", serde_json::to_string_pretty(&eval).expect("evaluation serializes"));
        }
        Command::Compare { checkpoints } => {
            cfg.validate()?;
            runner::matched_configs(&cfg)?;
            let pretrained = match checkpoints {
                Some(dir) => runner::load_pretrained(&cfg, &dir)?,
                None => {
                    let (source, _) = runner::load_tasks(&cfg)?;
                    let models = runner::pretrain_models(&cfg, &source)?;
                    save_models(&models, &default_ckpts)?;
                    models
                }
            };
            let reports = runner::compare(&cfg, &pretrained)?;
            let dir = cfg.out_dir.join("compare");
            runner::save_compare(&reports, &dir)?;
            for r in &reports {
                print_line(r);
            }
            println!("wrote {}", dir.join("summary.csv").display());
        }
        Command::Gradcheck {
            instances,
            eps,
            max_layers,
            max_width,
            tol,
        } => {
            if max_layers == 0 || max_width < 2 || eps.is_nan() || eps <= 0.0 {
                return Err(Error::Config("need max_layers >= 1, max_width >= 2, eps > 0".into()));
            }
            let mut worst = 0.0f64;
            for k in 0..instances {
                let mut rng = stream(cfg.seed, Purpose::Diagnostics, k as u64, 0);
                let (spec, params, x, y) = random_instance(&mut rng, max_layers, max_width);
                worst = worst.max(grad_check(&spec, &params, &x, &y, eps)?);
            }
            println!("max relative error over {instances} instances: {worst:e}");
            if worst >= tol {
                return Err(Error::Input(format!("gradient check failed: {worst:e} >= {tol:e}")));
            }
        }
    }
    Ok(())
}

fn print_line(r: &runner::ExperimentReport) {
    let delta = r
        .rejection
        .result
        .as_ref()
        .map_or_else(|| "n/a".to_string(), |x| format!("{:+.4}", x.delta));
    println!(
        "{:<13} ensemble {:.4}  disagreement {:.4}  rejection delta {}  budget {}",
        r.strategy.name(),
        r.ensemble_accuracy,
        r.mean_disagreement,
        delta,
        r.compute_budget
    );
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
