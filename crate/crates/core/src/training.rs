//! Transfer strategies and their compute accounting.
//!
//! * `finetune`: every member trains all of its parameters on its own loss.
//! * `shift_random`: per batch one member is drawn; its head and the shared
//!   shift are updated from its loss alone.
//! * `shift_sum`: per batch all members run at `w_i + v`; each head follows
//!   its own loss and the shift follows the aggregate `L` (mean or sum).
//! * `combined`: `shift_sum` for a few epochs, then `v` is baked into every
//!   encoder and each member is fine-tuned individually.
//!
//! All updates are plain SGD with a per-epoch geometric learning-rate decay.
//! One compute unit is one member trained for one pass over the train split.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, make_model_batches, TaskData};
use crate::ensemble::{split, Model, ShiftInit, ShiftedEnsemble};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, argmax, relative_l2};
use crate::nn::{self, Matrix, ParamVector};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Finetune,
    ShiftRandom,
    ShiftSum,
    Combined,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Finetune,
        Strategy::ShiftRandom,
        Strategy::ShiftSum,
        Strategy::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Finetune => "finetune",
            Strategy::ShiftRandom => "shift_random",
            Strategy::ShiftSum => "shift_sum",
            Strategy::Combined => "combined",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

/// How member losses combine into the loss that drives the shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossAggregation {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Epochs of `shift_random` / `shift_sum`.
    pub total_epochs: usize,
    /// Shift phase of `combined`.
    pub shift_epochs: usize,
    /// Per-member epochs of `finetune` and of the second phase of `combined`.
    /// Unset means 18 for `finetune` and 8 for `combined`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune_epochs_per_model: Option<usize>,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_final: f64,
    /// Set from the experiment seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub shift_init: ShiftInit,
    pub loss_aggregation: LossAggregation,
    /// Head-only epochs after `shift_random` / `shift_sum`, encoders frozen at `w_i + v`.
    pub post_head_phase_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::ShiftSum,
            total_epochs: 50,
            shift_epochs: 10,
            finetune_epochs_per_model: None,
            batch_size: 128,
            lr0: 0.1,
            lr_final: 0.001,
            seed: 0,
            shift_init: ShiftInit::Zeros,
            loss_aggregation: LossAggregation::Mean,
            post_head_phase_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn finetune_epochs(&self) -> usize {
        self.finetune_epochs_per_model.unwrap_or(match self.strategy {
            Strategy::Finetune => 18,
            _ => 8,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr_final > 0.0 && self.lr0.is_finite() && self.lr_final.is_finite()) {
            return Err(Error::Config(format!(
                "learning rates must be positive and finite, got {} and {}",
                self.lr0, self.lr_final
            )));
        }
        if self.strategy == Strategy::Combined && (self.shift_epochs == 0 || self.finetune_epochs() == 0) {
            return Err(Error::Config(
                "combined needs shift_epochs >= 1 and finetune_epochs_per_model >= 1".into(),
            ));
        }
        Ok(())
    }

    fn check_runtime(&self, expected: Strategy) -> Result<()> {
        if self.strategy != expected {
            return Err(Error::Input(format!(
                "config strategy is {}, called {}",
                self.strategy, expected
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Input("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    fn lr(&self, epoch: usize, epochs: usize) -> Result<f64> {
        nn::schedule_lr(epoch, epochs, self.lr0, self.lr_final)
    }
}

/// Model-epochs consumed by `cfg` with `n` members.
pub fn compute_budget(cfg: &TrainConfig, n: usize) -> usize {
    match cfg.strategy {
        Strategy::Finetune => cfg.finetune_epochs() * n,
        Strategy::ShiftSum => (cfg.total_epochs + cfg.post_head_phase_epochs) * n,
        Strategy::ShiftRandom => cfg.total_epochs + cfg.post_head_phase_epochs * n,
        Strategy::Combined => (cfg.shift_epochs + cfg.finetune_epochs()) * n,
    }
}

/// Losses of one update step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    /// `(member, loss)` for every member that ran on the batch.
    pub losses: Vec<(usize, f64)>,
    /// The loss that drove the shared update.
    pub aggregate: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Finetune,
    Shift,
    Head,
}

/// Summary of one completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    /// Epoch index within its phase.
    pub epoch: usize,
    pub lr: f64,
    /// Batch-mean training loss per member; `None` if the member never ran.
    pub member_losses: Vec<Option<f64>>,
    /// Batch-mean of the step aggregate.
    pub aggregate_loss: f64,
    /// `||v|| / mean ||w_i||` at the end of the epoch (shift phases only).
    pub relative_l2: Option<f64>,
    pub eval_accuracy: Vec<f64>,
    /// Model-epochs consumed by this epoch.
    pub units: usize,
    /// Running total of model-epochs.
    pub compute_units: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

/// Epoch ledger of a log, by phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ledger {
    pub shift_epochs: usize,
    pub finetune_model_epochs: usize,
    pub head_epochs: usize,
    pub compute_units: usize,
}

impl TrainLog {
    pub fn compute_units(&self) -> usize {
        self.records.last().map_or(0, |r| r.compute_units)
    }

    pub fn relative_l2_trajectory(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.relative_l2).collect()
    }

    pub fn ledger(&self) -> Ledger {
        let mut l = Ledger {
            shift_epochs: 0,
            finetune_model_epochs: 0,
            head_epochs: 0,
            compute_units: self.compute_units(),
        };
        for r in &self.records {
            match r.phase {
                Phase::Shift => l.shift_epochs += 1,
                Phase::Finetune => l.finetune_model_epochs += r.units,
                Phase::Head => l.head_epochs += 1,
            }
        }
        l
    }

    fn push(&mut self, mut rec: EpochRecord) {
        rec.compute_units = self.compute_units() + rec.units;
        self.records.push(rec);
    }
}

fn check_data(spec: &nn::NetSpec, data: &TaskData) -> Result<()> {
    for ds in [&data.train, &data.eval] {
        if ds.dim() != spec.input_dim() || ds.num_classes() > spec.num_classes() {
            return Err(Error::Shape(format!(
                "data ({} features, {} classes) does not fit network {:?}",
                ds.dim(),
                ds.num_classes(),
                spec.layer_sizes()
            )));
        }
    }
    Ok(())
}

fn eval_accuracy(spec: &nn::NetSpec, params: &ParamVector, data: &TaskData) -> Result<f64> {
    let logits = nn::forward(spec, params, data.eval.features())?;
    let pred: Vec<usize> = (0..logits.logits().rows())
        .map(|r| argmax(logits.logits().row(r)))
        .collect();
    accuracy(&pred, data.eval.labels())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn finetune_phase(models: &mut [Model], data: &TaskData, cfg: &TrainConfig, epochs: usize, log: &mut TrainLog) -> Result<()> {
    for m in models.iter() {
        check_data(m.spec(), data)?;
    }
    for epoch in 0..epochs {
        let lr = cfg.lr(epoch, epochs)?;
        let mut member_losses = Vec::with_capacity(models.len());
        let mut eval = Vec::with_capacity(models.len());
        for (i, model) in models.iter_mut().enumerate() {
            let spec = model.spec().clone();
            let mut params = model.params();
            let mut losses = Vec::new();
            for batch in make_model_batches(&data.train, cfg.batch_size, cfg.seed, i, epoch)? {
                let (x, y) = data.train.batch(&batch);
                let (loss, grad) = nn::loss_and_grad(&spec, &params, &x, &y)?;
                params = nn::sgd_step(&params, &grad, lr)?;
                losses.push(loss);
            }
            model.set_params(&params)?;
            member_losses.push(mean(&losses));
            eval.push(eval_accuracy(&spec, &params, data)?);
        }
        log.push(EpochRecord {
            phase: Phase::Finetune,
            epoch,
            lr,
            aggregate_loss: mean(&member_losses),
            member_losses: member_losses.into_iter().map(Some).collect(),
            relative_l2: None,
            eval_accuracy: eval,
            units: models.len(),
            compute_units: 0,
        });
    }
    Ok(())
}

/// Independent SGD on every member's full parameter vector.
pub fn train_finetune(mut models: Vec<Model>, data: &TaskData, cfg: &TrainConfig) -> Result<(Vec<Model>, TrainLog)> {
    cfg.check_runtime(Strategy::Finetune)?;
    let mut log = TrainLog::default();
    finetune_phase(&mut models, data, cfg, cfg.finetune_epochs(), &mut log)?;
    Ok((models, log))
}

/// Per-member losses and gradients at the current shift.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftGradients {
    pub losses: Vec<f64>,
    /// Aggregate loss `L`.
    pub aggregate: f64,
    /// `dL/dv`.
    pub shift_grad: ParamVector,
    /// `dl_i/dh_i`.
    pub head_grads: Vec<ParamVector>,
}

/// Runs every member on `(x, y)` at `w_i + v`. The shift gradient is the
/// member encoder gradients accumulated in index order, divided by `n` for
/// [`LossAggregation::Mean`].
pub fn sum_loss_gradients(
    ens: &ShiftedEnsemble,
    x: &Matrix,
    y: &[usize],
    aggregation: LossAggregation,
) -> Result<ShiftGradients> {
    let spec = ens.spec();
    let mut losses = Vec::with_capacity(ens.n());
    let mut head_grads = Vec::with_capacity(ens.n());
    let mut shift_grad = ParamVector::zeros(spec.encoder_len());
    for i in 0..ens.n() {
        let (loss, grad) = nn::loss_and_grad(spec, &ens.member_params(i)?, x, y)?;
        let (enc_grad, head_grad) = split(&grad, spec)?;
        shift_grad.add_assign(&enc_grad)?;
        losses.push(loss);
        head_grads.push(head_grad);
    }
    let total: f64 = losses.iter().sum();
    let (aggregate, shift_grad) = match aggregation {
        LossAggregation::Sum => (total, shift_grad),
        LossAggregation::Mean => {
            let n = ens.n() as f64;
            let g = shift_grad.as_slice().iter().map(|g| g / n).collect::<Vec<_>>();
            (total / n, g.into())
        }
    };
    Ok(ShiftGradients {
        losses,
        aggregate,
        shift_grad,
        head_grads,
    })
}

/// One sum-loss update: every head from its own loss, the shift from `L`.
pub fn shift_sum_step(
    ens: &mut ShiftedEnsemble,
    x: &Matrix,
    y: &[usize],
    lr: f64,
    aggregation: LossAggregation,
) -> Result<StepTrace> {
    let g = sum_loss_gradients(ens, x, y, aggregation)?;
    for (i, hg) in g.head_grads.iter().enumerate() {
        let h = nn::sgd_step(&ens.heads()[i], hg, lr)?;
        *ens.head_mut(i) = h;
    }
    let v = nn::sgd_step(ens.shift(), &g.shift_grad, lr)?;
    *ens.shift_mut() = v;
    Ok(StepTrace {
        losses: g.losses.into_iter().enumerate().collect(),
        aggregate: g.aggregate,
        lr,
    })
}

/// One random-model update: only member `i`'s head and the shift move.
pub fn shift_random_step(ens: &mut ShiftedEnsemble, i: usize, x: &Matrix, y: &[usize], lr: f64) -> Result<StepTrace> {
    let spec = ens.spec().clone();
    let (loss, grad) = nn::loss_and_grad(&spec, &ens.member_params(i)?, x, y)?;
    let (enc_grad, head_grad) = split(&grad, &spec)?;
    let h = nn::sgd_step(&ens.heads()[i], &head_grad, lr)?;
    *ens.head_mut(i) = h;
    let v = nn::sgd_step(ens.shift(), &enc_grad, lr)?;
    *ens.shift_mut() = v;
    Ok(StepTrace {
        losses: vec![(i, loss)],
        aggregate: loss,
        lr,
    })
}

fn summarize(phase: Phase, epoch: usize, lr: f64, n: usize, steps: &[StepTrace], ens: &ShiftedEnsemble, data: &TaskData, units: usize) -> Result<EpochRecord> {
    let mut sums = vec![(0.0, 0usize); n];
    for s in steps {
        for &(i, l) in &s.losses {
            sums[i].0 += l;
            sums[i].1 += 1;
        }
    }
    let member_losses = sums
        .iter()
        .map(|&(s, c)| (c > 0).then(|| s / c as f64))
        .collect();
    let aggregates: Vec<f64> = steps.iter().map(|s| s.aggregate).collect();
    let eval = (0..n)
        .map(|i| eval_accuracy(ens.spec(), &ens.member_params(i)?, data))
        .collect::<Result<Vec<_>>>()?;
    Ok(EpochRecord {
        phase,
        epoch,
        lr,
        member_losses,
        aggregate_loss: if aggregates.is_empty() { 0.0 } else { mean(&aggregates) },
        relative_l2: match phase {
            Phase::Head => None,
            _ => relative_l2(ens.shift(), ens.base_encoders()).ok(),
        },
        eval_accuracy: eval,
        units,
        compute_units: 0,
    })
}

fn shift_sum_phase(ens: &mut ShiftedEnsemble, data: &TaskData, cfg: &TrainConfig, epochs: usize, log: &mut TrainLog) -> Result<()> {
    check_data(ens.spec(), data)?;
    for epoch in 0..epochs {
        let lr = cfg.lr(epoch, epochs)?;
        let mut steps = Vec::new();
        for batch in make_batches(&data.train, cfg.batch_size, cfg.seed, epoch)? {
            let (x, y) = data.train.batch(&batch);
            steps.push(shift_sum_step(ens, &x, &y, lr, cfg.loss_aggregation)?);
        }
        log.push(summarize(Phase::Shift, epoch, lr, ens.n(), &steps, ens, data, ens.n())?);
    }
    Ok(())
}

fn head_phase(ens: &mut ShiftedEnsemble, data: &TaskData, cfg: &TrainConfig, log: &mut TrainLog) -> Result<()> {
    let epochs = cfg.post_head_phase_epochs;
    let spec = ens.spec().clone();
    for epoch in 0..epochs {
        let lr = cfg.lr(epoch, epochs)?;
        let mut steps = Vec::new();
        for i in 0..ens.n() {
            let encoder = ens.effective_encoder(i)?;
            for batch in make_model_batches(&data.train, cfg.batch_size, cfg.seed, i, epoch)? {
                let (x, y) = data.train.batch(&batch);
                let (loss, grad) = nn::loss_and_grad(&spec, &encoder.concat(&ens.heads()[i]), &x, &y)?;
                let (_, head_grad) = split(&grad, &spec)?;
                let h = nn::sgd_step(&ens.heads()[i], &head_grad, lr)?;
                *ens.head_mut(i) = h;
                steps.push(StepTrace {
                    losses: vec![(i, loss)],
                    aggregate: loss,
                    lr,
                });
            }
        }
        log.push(summarize(Phase::Head, epoch, lr, ens.n(), &steps, ens, data, ens.n())?);
    }
    Ok(())
}

/// Member index trained on each of an epoch's `batches` under `shift_random`.
pub fn select_models(seed: u64, epoch: usize, batches: usize, n: usize) -> Vec<usize> {
    let mut pick = stream(seed, Purpose::ModelSelect, 0, epoch as u64);
    (0..batches).map(|_| pick.random_range(0..n)).collect()
}

/// Shared shift trained from one uniformly drawn member per batch.
pub fn train_shift_random(mut ens: ShiftedEnsemble, data: &TaskData, cfg: &TrainConfig) -> Result<(ShiftedEnsemble, TrainLog)> {
    cfg.check_runtime(Strategy::ShiftRandom)?;
    check_data(ens.spec(), data)?;
    let mut log = TrainLog::default();
    let epochs = cfg.total_epochs;
    for epoch in 0..epochs {
        let lr = cfg.lr(epoch, epochs)?;
        let batches = make_batches(&data.train, cfg.batch_size, cfg.seed, epoch)?;
        let picks = select_models(cfg.seed, epoch, batches.len(), ens.n());
        let mut steps = Vec::new();
        for (batch, i) in batches.iter().zip(picks) {
            let (x, y) = data.train.batch(batch);
            steps.push(shift_random_step(&mut ens, i, &x, &y, lr)?);
        }
        log.push(summarize(Phase::Shift, epoch, lr, ens.n(), &steps, &ens, data, 1)?);
    }
    head_phase(&mut ens, data, cfg, &mut log)?;
    Ok((ens, log))
}

/// Shared shift trained from the aggregate loss of all members.
pub fn train_shift_sum(mut ens: ShiftedEnsemble, data: &TaskData, cfg: &TrainConfig) -> Result<(ShiftedEnsemble, TrainLog)> {
    cfg.check_runtime(Strategy::ShiftSum)?;
    let mut log = TrainLog::default();
    shift_sum_phase(&mut ens, data, cfg, cfg.total_epochs, &mut log)?;
    head_phase(&mut ens, data, cfg, &mut log)?;
    Ok((ens, log))
}

/// `shift_epochs` of sum-loss shift training, then per-member fine-tuning of
/// the materialized models.
pub fn train_combined(mut ens: ShiftedEnsemble, data: &TaskData, cfg: &TrainConfig) -> Result<(Vec<Model>, TrainLog)> {
    cfg.check_runtime(Strategy::Combined)?;
    let mut log = TrainLog::default();
    shift_sum_phase(&mut ens, data, cfg, cfg.shift_epochs, &mut log)?;
    let mut models = ens.materialize();
    finetune_phase(&mut models, data, cfg, cfg.finetune_epochs(), &mut log)?;
    Ok((models, log))
}

/// Result of running one strategy.
#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub models: Vec<Model>,
    /// The trained ensemble for `shift_random` / `shift_sum`.
    pub ensemble: Option<ShiftedEnsemble>,
    /// Frozen base encoders the shift was measured against.
    pub base_encoders: Option<Vec<ParamVector>>,
    pub log: TrainLog,
}

/// Runs `cfg.strategy` starting from `models`.
pub fn transfer(models: Vec<Model>, data: &TaskData, cfg: &TrainConfig) -> Result<TransferOutcome> {
    match cfg.strategy {
        Strategy::Finetune => {
            let (models, log) = train_finetune(models, data, cfg)?;
            Ok(TransferOutcome {
                models,
                ensemble: None,
                base_encoders: None,
                log,
            })
        }
        Strategy::ShiftRandom | Strategy::ShiftSum => {
            let ens = ShiftedEnsemble::from_models(&models, cfg.shift_init, cfg.seed)?;
            let (ens, log) = if cfg.strategy == Strategy::ShiftSum {
                train_shift_sum(ens, data, cfg)?
            } else {
                train_shift_random(ens, data, cfg)?
            };
            Ok(TransferOutcome {
                models: ens.materialize(),
                base_encoders: Some(ens.base_encoders().to_vec()),
                ensemble: Some(ens),
                log,
            })
        }
        Strategy::Combined => {
            let ens = ShiftedEnsemble::from_models(&models, cfg.shift_init, cfg.seed)?;
            let bases = ens.base_encoders().to_vec();
            let (models, log) = train_combined(ens, data, cfg)?;
            Ok(TransferOutcome {
                models,
                ensemble: None,
                base_encoders: Some(bases),
                log,
            })
        }
    }
}
