use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;

use shiftens::ensemble::{split, Model, ShiftedEnsemble};
use shiftens::metrics::*;
use shiftens::nn::*;
use shiftens::rng::{stream, Purpose};
use shiftens::runner::*;
use shiftens::training::*;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn bits(p: &ParamVector) -> Vec<u64> {
    p.as_slice().iter().map(|v| v.to_bits()).collect()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for k in 0..100 {
        let mut rng = stream(2024, Purpose::Diagnostics, k, 0);
        let (spec, params, x, y) = random_instance(&mut rng, 4, 16);
        worst = worst.max(grad_check(&spec, &params, &x, &y, 1e-6).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-5 && secs < 30.0,
        format!("max relative error {worst:.3e} over 100 instances in {secs:.1}s"),
    )
}

fn pretrained(cfg: &ExperimentConfig) -> Vec<Model> {
    let (source, _) = load_tasks(cfg).unwrap();
    pretrain_models(cfg, &source).unwrap()
}

fn frozen_and_shared() -> Outcome {
    let cfg = ExperimentConfig::default();
    let (_, target) = load_tasks(&cfg).unwrap();
    let models: Vec<Model> = pretrained(&cfg)
        .iter()
        .enumerate()
        .map(|(i, m)| m.with_new_head(3, cfg.seed, i).unwrap())
        .collect();
    let mut failures = Vec::new();
    for strategy in [Strategy::ShiftSum, Strategy::ShiftRandom] {
        let tc = TrainConfig {
            total_epochs: 5,
            ..TrainConfig::new(strategy)
        };
        let ens = ShiftedEnsemble::from_models(&models, tc.shift_init, tc.seed).unwrap();
        let before: Vec<_> = ens.base_encoders().iter().map(bits).collect();
        let (ens, _) = match strategy {
            Strategy::ShiftSum => train_shift_sum(ens, &target, &tc).unwrap(),
            _ => train_shift_random(ens, &target, &tc).unwrap(),
        };
        let v = ens.shift().as_slice();
        for i in 0..5 {
            let base = &ens.base_encoders()[i];
            if bits(base) != before[i] {
                failures.push(format!("{strategy}: base {i} moved"));
            }
            let expected: Vec<u64> = base.as_slice().iter().zip(v).map(|(w, s)| (w + s).to_bits()).collect();
            if bits(&ens.effective_encoder(i).unwrap()) != expected {
                failures.push(format!("{strategy}: member {i} is not base + shared v"));
            }
        }
        if ens.shift().l2_norm() == 0.0 {
            failures.push(format!("{strategy}: shift never moved"));
        }
    }
    let detail = if failures.is_empty() {
        "5 bases bitwise frozen and effective = base + v for shift_sum and shift_random after 5 epochs".into()
    } else {
        failures.join("; ")
    };
    outcome(failures.is_empty(), detail)
}

fn sum_loss_identity() -> Outcome {
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut k = 0;
    while count < 20 {
        let mut rng = stream(77, Purpose::Diagnostics, k, 0);
        k += 1;
        let (spec, first, x, y) = random_instance(&mut rng, 4, 16);
        if spec.encoder_len() == 0 {
            continue;
        }
        let n = 2 + (count % 2);
        let mut models = vec![Model::from_params(spec.clone(), &first).unwrap()];
        for _ in 1..n {
            let p: Vec<f64> = (0..spec.param_count())
                .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            models.push(Model::from_params(spec.clone(), &p.into()).unwrap());
        }
        let mut ens = ShiftedEnsemble::from_models(&models, Default::default(), 0).unwrap();
        let v: Vec<f64> = (0..spec.encoder_len()).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        ens = ShiftedEnsemble::new(
            spec.clone(),
            ens.base_encoders().to_vec(),
            v.into(),
            ens.heads().to_vec(),
        )
        .unwrap();
        let g = sum_loss_gradients(&ens, &x, &y, LossAggregation::Mean).unwrap();
        let mut acc = vec![0.0; spec.encoder_len()];
        for i in 0..n {
            let full = ens.base_encoders()[i].add(ens.shift()).unwrap().concat(&ens.heads()[i]);
            let (_, grad) = loss_and_grad(&spec, &full, &x, &y).unwrap();
            let (enc, _) = split(&grad, &spec).unwrap();
            for (a, e) in acc.iter_mut().zip(enc.as_slice()) {
                *a += e;
            }
        }
        for (a, b) in acc.iter().map(|a| a / n as f64).zip(g.shift_grad.as_slice()) {
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1e-300));
        }
        count += 1;
    }
    outcome(worst <= 1e-12, format!("max relative error {worst:.3e} over 20 instances of 2-3 models"))
}

fn metric_oracles() -> Outcome {
    let hand = pairwise_disagreement(&[0, 1, 0, 0], &[0, 1, 1, 1], &[0, 1, 0, 1]).unwrap();
    let hand_ok = hand == 2.0 / (4.0 * 0.75);
    let mut brute_ok = 0;
    for k in 0..50u64 {
        let mut rng = stream(5, Purpose::Diagnostics, k, 1);
        let n = rng.random_range(2..=6);
        let samples = rng.random_range(1..=50);
        let c = rng.random_range(2..=5);
        let labels: Vec<usize> = (0..samples).map(|_| rng.random_range(0..c)).collect();
        let preds: Vec<Vec<usize>> = (0..n)
            .map(|_| {
                let mut p: Vec<usize> = (0..samples).map(|_| rng.random_range(0..c)).collect();
                p[0] = labels[0];
                p
            })
            .collect();
        let probs = preds
            .iter()
            .map(|p| {
                let mut m = Matrix::zeros(samples, c);
                for (r, &k) in p.iter().enumerate() {
                    m.row_mut(r)[k] = 1.0;
                }
                m
            })
            .collect();
        let set = PredictionSet::new(probs, labels.clone()).unwrap();
        let got = mean_disagreement(&set).unwrap().mean_disagreement;
        let acc: Vec<f64> = preds
            .iter()
            .map(|p| p.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / samples as f64)
            .collect();
        let mut total = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let mism = (0..samples).filter(|&s| preds[i][s] != preds[j][s]).count() as f64;
                total += mism / (samples as f64 * (0.5 * acc[i] + 0.5 * acc[j]));
            }
        }
        if got == total / (n * (n - 1) / 2) as f64 {
            brute_ok += 1;
        }
    }
    let l2 = relative_l2(
        &vec![3.0, 4.0].into(),
        &[vec![1.0, 0.0].into(), vec![0.0, 1.0].into()],
    )
    .unwrap();
    outcome(
        hand_ok && brute_ok == 50 && l2 == 5.0,
        format!("hand case {hand:.4}, brute force exact on {brute_ok}/50, relative_l2 {l2}"),
    )
}

fn budget_accounting() -> Outcome {
    let combined = TrainConfig {
        shift_epochs: 10,
        finetune_epochs_per_model: Some(8),
        ..TrainConfig::new(Strategy::Combined)
    };
    let finetune = TrainConfig {
        finetune_epochs_per_model: Some(18),
        ..TrainConfig::new(Strategy::Finetune)
    };
    let (a, b) = (compute_budget(&combined, 5), compute_budget(&finetune, 5));
    outcome(a == 90 && b == 90, format!("combined(10,8) = {a}, finetune(18) = {b}"))
}

struct SeedRun {
    seed: u64,
    reports: Vec<ExperimentReport>,
    pretrained: Vec<Model>,
}

impl SeedRun {
    fn get(&self, s: Strategy) -> &ExperimentReport {
        self.reports.iter().find(|r| r.strategy == s).unwrap()
    }
}

fn run_benchmark() -> (Vec<SeedRun>, f64) {
    let start = Instant::now();
    let runs = SEEDS
        .iter()
        .map(|&seed| {
            let cfg = ExperimentConfig {
                seed,
                ..ExperimentConfig::default()
            };
            let pretrained = pretrained(&cfg);
            let reports = compare(&cfg, &pretrained).unwrap();
            SeedRun {
                seed,
                reports,
                pretrained,
            }
        })
        .collect();
    (runs, start.elapsed().as_secs_f64())
}

fn rejection(runs: &[SeedRun]) -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for s in [Strategy::Finetune, Strategy::ShiftSum, Strategy::Combined] {
        let ok = runs
            .iter()
            .filter(|r| {
                r.get(s)
                    .rejection
                    .result
                    .as_ref()
                    .is_some_and(|x| x.accuracy_after >= x.accuracy_before)
            })
            .count();
        pass &= ok >= 4;
        let deltas: Vec<String> = runs
            .iter()
            .map(|r| {
                r.get(s)
                    .rejection
                    .result
                    .as_ref()
                    .map_or("none".into(), |x| format!("{:+.3}", x.delta))
            })
            .collect();
        parts.push(format!("{s} {ok}/5 [{}]", deltas.join(" ")));
    }
    outcome(pass, format!("threshold 0.065: {}", parts.join(", ")))
}

fn matched_budget(runs: &[SeedRun], secs: f64) -> Outcome {
    let med = |s: Strategy, f: fn(&ExperimentReport) -> f64| median(runs.iter().map(|r| f(r.get(s))).collect());
    let d = |r: &ExperimentReport| r.mean_disagreement;
    let acc = |r: &ExperimentReport| r.ensemble_accuracy;
    let budgets_ok = runs.iter().all(|r| r.reports.iter().all(|x| x.compute_budget == 90));
    let (d_sum, d_ft) = (med(Strategy::ShiftSum, d), med(Strategy::Finetune, d));
    let (a_ft, a_comb, a_sum) = (
        med(Strategy::Finetune, acc),
        med(Strategy::Combined, acc),
        med(Strategy::ShiftSum, acc),
    );
    let a = d_sum > d_ft;
    let b = a_comb >= a_ft - 0.02;
    let c = a_sum < a_ft;
    outcome(
        a && b && c && budgets_ok && secs < 300.0,
        format!(
            "median D shift_sum {d_sum:.4} vs finetune {d_ft:.4} [{}]; acc combined {a_comb:.4} vs finetune {a_ft:.4} [{}]; shift_sum {a_sum:.4} [{}]; budgets 90: {budgets_ok}; {secs:.1}s",
            mark(a),
            mark(b),
            mark(c)
        ),
    )
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "no"
    }
}

fn determinism(runs: &[SeedRun], suite_start: Instant) -> Outcome {
    let run = &runs[0];
    let cfg = ExperimentConfig {
        seed: run.seed,
        ..ExperimentConfig::default()
    };
    let again = compare(&cfg, &pretrained(&cfg)).unwrap();
    let reports_ok = again
        .iter()
        .zip(&run.reports)
        .all(|(a, b)| a.deterministic_bytes() == b.deterministic_bytes());
    let dir = tempfile::tempdir().unwrap();
    let mut ckpt_ok = true;
    for (i, m) in run.pretrained.iter().enumerate() {
        let p = dir.path().join(format!("model_{i}.json"));
        save_checkpoint(&Checkpoint::Model(m.clone()), &p).unwrap();
        let back = load_model(&p, Some(m.spec())).unwrap();
        ckpt_ok &= bits(&back.params()) == bits(&m.params());
    }
    let ens = ShiftedEnsemble::from_models(&run.pretrained, Default::default(), 0).unwrap();
    let p = dir.path().join("ensemble.json");
    save_checkpoint(&Checkpoint::Ensemble(ens.clone()), &p).unwrap();
    ckpt_ok &= matches!(load_checkpoint(&p).unwrap(), Checkpoint::Ensemble(e) if e == ens);
    let secs = suite_start.elapsed().as_secs_f64();
    outcome(
        reports_ok && ckpt_ok && secs < 600.0,
        format!("reports identical modulo wall clock: {reports_ok}; checkpoints bitwise: {ckpt_ok}; acceptance elapsed {secs:.1}s"),
    )
}

fn relative_l2_growth(runs: &[SeedRun]) -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for s in [Strategy::ShiftSum, Strategy::ShiftRandom] {
        let ok = runs
            .iter()
            .filter(|r| {
                let rep = r.get(s);
                let epochs = rep.config.transfer.total_epochs;
                rep.relative_l2.len() == epochs && rep.relative_l2.iter().skip(1).all(|&x| x > 0.0)
            })
            .count();
        pass &= ok >= 4;
        let finals: Vec<String> = runs
            .iter()
            .map(|r| format!("{:.3}", r.get(s).relative_l2.last().copied().unwrap_or(0.0)))
            .collect();
        parts.push(format!("{s} {ok}/5 final [{}]", finals.join(" ")));
    }
    outcome(pass, parts.join(", "))
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradient correctness", gradient_correctness()),
        (2, "frozen bases and shared shift", frozen_and_shared()),
        (3, "sum-loss gradient identity", sum_loss_identity()),
        (4, "metric oracles", metric_oracles()),
    ];
    let (runs, secs) = run_benchmark();
    results.push((5, "rejection pipeline", rejection(&runs)));
    results.push((6, "matched-budget directions", matched_budget(&runs, secs)));
    results.push((7, "budget accounting", budget_accounting()));
    results.push((8, "determinism and persistence", determinism(&runs, start)));
    results.push((9, "relative L2 trajectory", relative_l2_growth(&runs)));
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, name, o) in &results {
        println!("criterion {n} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
