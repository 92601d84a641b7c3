//! Config-driven experiments: pretraining, transfer runs, evaluation and
//! matched-budget strategy comparison.

pub mod checkpoint;
pub mod config;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, load_model, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{CompareConfig, ExperimentConfig, MetricsConfig, PretrainConfig, TaskSource};
pub use report::{read_report, relative_l2_svg, write_report, write_summary, ExperimentReport, RejectionSection, REPORT_VERSION};

use crate::data::{gen_transfer_pair, load_csv, Dataset, Split, TaskData};
use crate::ensemble::Model;
use crate::error::{Error, Result};
use crate::metrics::{
    accuracy, ensemble_predict, mean_disagreement, reject_and_rescore, uncertainty_scores, PredictionSet,
};
use crate::nn::{Matrix, NetSpec};
use crate::rng::{derive_seed, Purpose};
use crate::training::{compute_budget, train_finetune, transfer, Strategy, TrainConfig};

/// Source and target task of an experiment.
pub fn load_tasks(cfg: &ExperimentConfig) -> Result<(TaskData, TaskData)> {
    match &cfg.task {
        TaskSource::Synthetic(p) => {
            let pair = gen_transfer_pair(cfg.seed, p)?;
            Ok((pair.source, pair.target))
        }
        TaskSource::Csv {
            source_train,
            source_eval,
            target_train,
            target_eval,
            label,
        } => {
            let pair = |train: &Path, eval: &Path| -> Result<TaskData> {
                let train = load_csv(train, label, Split::Train)?;
                let eval = load_csv(eval, label, Split::Eval)?;
                if train.dim() != eval.dim() {
                    return Err(Error::Input(format!(
                        "train has {} features, eval has {}",
                        train.dim(),
                        eval.dim()
                    )));
                }
                let c = train.num_classes().max(eval.num_classes());
                let widen = |d: Dataset, split| Dataset::new(d.features().clone(), d.labels().to_vec(), c, split);
                Ok(TaskData {
                    train: widen(train, Split::Train)?,
                    eval: widen(eval, Split::Eval)?,
                })
            };
            let source = pair(source_train, source_eval)?;
            let target = pair(target_train, target_eval)?;
            if source.train.dim() != target.train.dim() {
                return Err(Error::Input(format!(
                    "source has {} features, target has {}",
                    source.train.dim(),
                    target.train.dim()
                )));
            }
            Ok((source, target))
        }
    }
}

/// Network trained on the source task.
pub fn source_spec(cfg: &ExperimentConfig, source: &TaskData) -> Result<NetSpec> {
    let mut sizes = vec![source.train.dim()];
    sizes.extend(&cfg.hidden);
    sizes.push(source.train.num_classes());
    NetSpec::new(sizes)
}

/// Trains `n_models` independently initialized models on the source task.
pub fn pretrain_models(cfg: &ExperimentConfig, source: &TaskData) -> Result<Vec<Model>> {
    let spec = source_spec(cfg, source)?;
    let seed = derive_seed(cfg.seed, Purpose::Pretrain);
    let models = (0..cfg.n_models).map(|i| Model::init(spec.clone(), seed, i)).collect();
    let p = &cfg.pretrain;
    let tc = TrainConfig {
        finetune_epochs_per_model: Some(p.epochs),
        lr0: p.lr0,
        lr_final: p.lr_final,
        batch_size: p.batch_size,
        seed,
        ..TrainConfig::new(Strategy::Finetune)
    };
    Ok(train_finetune(models, source, &tc)?.0)
}

pub fn checkpoint_paths(dir: &Path, n: usize) -> Vec<PathBuf> {
    (0..n).map(|i| dir.join(format!("model_{i}.json"))).collect()
}

/// Pretrains and writes `<out_dir>/checkpoints/model_{i}.json`.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let (source, _) = load_tasks(cfg)?;
    let models = pretrain_models(cfg, &source)?;
    let paths = checkpoint_paths(&cfg.out_dir.join("checkpoints"), models.len());
    for (m, p) in models.into_iter().zip(&paths) {
        save_checkpoint(&Checkpoint::Model(m), p)?;
    }
    Ok(paths)
}

/// Loads `n_models` checkpoints from `dir` and checks them against the config.
pub fn load_pretrained(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<Model>> {
    let (source, _) = load_tasks(cfg)?;
    let spec = source_spec(cfg, &source)?;
    checkpoint_paths(dir, cfg.n_models)
        .iter()
        .map(|p| load_model(p, Some(&spec)))
        .collect()
}

/// Accuracy, diversity and rejection of an ensemble on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub samples: usize,
    pub model_accuracies: Vec<f64>,
    pub ensemble_accuracy: f64,
    pub disagreement_matrix: Vec<Vec<f64>>,
    pub mean_disagreement: f64,
    pub rejection: RejectionSection,
}

pub fn evaluate(models: &[Model], ds: &Dataset, metrics: &MetricsConfig) -> Result<Evaluation> {
    let probs = models
        .iter()
        .map(|m| m.predict_proba(ds.features()))
        .collect::<Result<Vec<Matrix>>>()?;
    let set = PredictionSet::new(probs, ds.labels().to_vec())?;
    let div = mean_disagreement(&set)?;
    let (_, predicted) = ensemble_predict(&set);
    let scores = uncertainty_scores(&set, metrics.aggregation);
    let (result, error) = match reject_and_rescore(&set, &scores, metrics.threshold) {
        Ok(r) => (Some(r), None),
        Err(e @ Error::EmptyRetention { .. }) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    Ok(Evaluation {
        samples: ds.len(),
        model_accuracies: div.accuracies,
        ensemble_accuracy: accuracy(&predicted, ds.labels())?,
        disagreement_matrix: div.disagreement,
        mean_disagreement: div.mean_disagreement,
        rejection: RejectionSection {
            threshold: metrics.threshold,
            aggregation: metrics.aggregation,
            num_classes: set.n_classes(),
            result,
            error,
        },
    })
}

/// Runs the configured strategy from pretrained models and evaluates it on
/// the target eval split.
pub fn run_experiment(cfg: &ExperimentConfig, pretrained: &[Model]) -> Result<ExperimentReport> {
    run_with(cfg, &cfg.train_config(), pretrained)
}

fn run_with(cfg: &ExperimentConfig, tc: &TrainConfig, pretrained: &[Model]) -> Result<ExperimentReport> {
    let start = Instant::now();
    tc.validate()?;
    let (source, target) = load_tasks(cfg)?;
    let spec = source_spec(cfg, &source)?;
    if pretrained.len() != cfg.n_models {
        return Err(Error::Input(format!(
            "config asks for {} models, got {} checkpoints",
            cfg.n_models,
            pretrained.len()
        )));
    }
    if let Some(m) = pretrained.iter().find(|m| m.spec() != &spec) {
        return Err(Error::SpecMismatch {
            expected: spec.layer_sizes().to_vec(),
            found: m.spec().layer_sizes().to_vec(),
        });
    }
    let models = pretrained
        .iter()
        .enumerate()
        .map(|(i, m)| m.with_new_head(target.train.num_classes(), tc.seed, i))
        .collect::<Result<Vec<_>>>()?;
    let outcome = transfer(models, &target, tc)?;
    let eval = evaluate(&outcome.models, &target.eval, &cfg.metrics)?;
    let mut config = cfg.clone();
    config.transfer = tc.clone();
    Ok(ExperimentReport {
        format_version: REPORT_VERSION,
        strategy: tc.strategy,
        seed: cfg.seed,
        config,
        n_models: cfg.n_models,
        eval_samples: eval.samples,
        model_accuracies: eval.model_accuracies,
        ensemble_accuracy: eval.ensemble_accuracy,
        disagreement_matrix: eval.disagreement_matrix,
        mean_disagreement: eval.mean_disagreement,
        rejection: eval.rejection,
        relative_l2: outcome.log.relative_l2_trajectory(),
        compute_budget: compute_budget(tc, cfg.n_models),
        train_log: outcome.log,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Writes `report.json` and, for shift strategies, `relative_l2.svg` into `dir`.
pub fn save_run(report: &ExperimentReport, dir: &Path) -> Result<()> {
    write_report(report, &dir.join("report.json"))?;
    if !report.relative_l2.is_empty() {
        let path = dir.join("relative_l2.svg");
        fs::write(&path, relative_l2_svg(report.strategy.name(), &report.relative_l2))
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn per_model(budget: usize, n: usize) -> Result<usize> {
    if !budget.is_multiple_of(n) {
        return Err(Error::Config(format!("budget {budget} is not divisible by n_models {n}")));
    }
    Ok(budget / n)
}

/// Transfer configs for every strategy that consume exactly `compare.budget`
/// model-epochs, in strategy-name order.
pub fn matched_configs(cfg: &ExperimentConfig) -> Result<Vec<TrainConfig>> {
    let n = cfg.n_models;
    let budget = cfg.compare.budget;
    let base = cfg.train_config();
    let post = base.post_head_phase_epochs;
    let short = |what: &str| Error::Config(format!("budget {budget} too small for {what}"));
    let mut strategies = Strategy::ALL.to_vec();
    strategies.sort_by_key(|s| s.name());
    let mut out = Vec::new();
    for s in strategies {
        let mut tc = TrainConfig {
            strategy: s,
            ..base.clone()
        };
        match s {
            Strategy::Finetune => tc.finetune_epochs_per_model = Some(per_model(budget, n)?),
            Strategy::ShiftSum => {
                tc.total_epochs = per_model(budget, n)?
                    .checked_sub(post)
                    .ok_or_else(|| short("shift_sum"))?
            }
            Strategy::ShiftRandom => {
                tc.total_epochs = budget.checked_sub(post * n).ok_or_else(|| short("shift_random"))?
            }
            Strategy::Combined => {
                let ft = per_model(budget, n)?
                    .checked_sub(tc.shift_epochs)
                    .filter(|&e| e >= 1)
                    .ok_or_else(|| short("combined"))?;
                tc.finetune_epochs_per_model = Some(ft);
            }
        }
        tc.validate()?;
        debug_assert_eq!(compute_budget(&tc, n), budget);
        out.push(tc);
    }
    Ok(out)
}

/// Runs all strategies at the matched budget, in parallel, from the same
/// pretrained models. Reports come back in strategy-name order.
pub fn compare(cfg: &ExperimentConfig, pretrained: &[Model]) -> Result<Vec<ExperimentReport>> {
    matched_configs(cfg)?
        .par_iter()
        .map(|tc| run_with(cfg, tc, pretrained))
        .collect()
}

/// Writes `<dir>/<strategy>/report.json` per run plus `<dir>/summary.csv`.
pub fn save_compare(reports: &[ExperimentReport], dir: &Path) -> Result<()> {
    for r in reports {
        save_run(r, &dir.join(r.strategy.name()))?;
    }
    write_summary(reports, &dir.join("summary.csv"))
}
