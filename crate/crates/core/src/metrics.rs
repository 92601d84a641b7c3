//! Accuracy, accuracy-normalized pairwise disagreement, ensemble averaging,
//! standard-deviation uncertainty with threshold rejection, and the relative
//! L2 size of the shift vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Matrix, ParamVector};

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Per-member class probabilities on one labelled sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    probs: Vec<Matrix>,
    predicted: Vec<Vec<usize>>,
    labels: Vec<usize>,
}

impl PredictionSet {
    pub fn new(probs: Vec<Matrix>, labels: Vec<usize>) -> Result<Self> {
        let first = probs
            .first()
            .ok_or_else(|| Error::Input("prediction set needs at least one model".into()))?;
        let (n, c) = (first.rows(), first.cols());
        if n == 0 || labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} samples", labels.len())));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Input(format!("label {y} outside [0, {c})")));
        }
        for (m, p) in probs.iter().enumerate() {
            if p.rows() != n || p.cols() != c {
                return Err(Error::Shape(format!(
                    "model {m} has {}x{} probabilities, expected {n}x{c}",
                    p.rows(),
                    p.cols()
                )));
            }
            for r in 0..n {
                let row = p.row(r);
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                    return Err(Error::Input(format!(
                        "model {m} row {r} is not a probability vector (sum {sum})"
                    )));
                }
            }
        }
        let predicted = probs
            .iter()
            .map(|p| (0..n).map(|r| argmax(p.row(r))).collect())
            .collect();
        Ok(Self {
            probs,
            predicted,
            labels,
        })
    }

    pub fn n_models(&self) -> usize {
        self.probs.len()
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_classes(&self) -> usize {
        self.probs[0].cols()
    }

    pub fn probs(&self) -> &[Matrix] {
        &self.probs
    }

    pub fn predicted(&self) -> &[Vec<usize>] {
        &self.predicted
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// The same predictions with members in a different order.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let probs = order
            .iter()
            .map(|&i| {
                self.probs
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Input(format!("member {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(probs, self.labels.clone())
    }
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Input("accuracy of an empty sample".into()));
    }
    if predicted.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `D_ij = #[y_i != y_j] / (N * (A_i / 2 + A_j / 2))`. Values above 1 are legal.
pub fn pairwise_disagreement(pred_i: &[usize], pred_j: &[usize], labels: &[usize]) -> Result<f64> {
    let a_i = accuracy(pred_i, labels)?;
    let a_j = accuracy(pred_j, labels)?;
    let mean_acc = 0.5 * a_i + 0.5 * a_j;
    if mean_acc == 0.0 {
        return Err(Error::UndefinedDenominator(
            "both models have zero accuracy".into(),
        ));
    }
    let mismatches = pred_i.iter().zip(pred_j).filter(|(a, b)| a != b).count();
    Ok(mismatches as f64 / (labels.len() as f64 * mean_acc))
}

/// Diversity summary of one ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub accuracies: Vec<f64>,
    /// Symmetric, zero diagonal.
    pub disagreement: Vec<Vec<f64>>,
    /// Mean over the `n(n-1)/2` unordered pairs.
    pub mean_disagreement: f64,
    pub relative_l2: Option<f64>,
}

pub fn mean_disagreement(set: &PredictionSet) -> Result<DiversityReport> {
    let n = set.n_models();
    if n < 2 {
        return Err(Error::Input(format!("disagreement needs at least 2 models, got {n}")));
    }
    let accuracies = set
        .predicted()
        .iter()
        .map(|p| accuracy(p, set.labels()))
        .collect::<Result<Vec<_>>>()?;
    let mut matrix = vec![vec![0.0; n]; n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = pairwise_disagreement(&set.predicted()[i], &set.predicted()[j], set.labels())?;
            matrix[i][j] = d;
            matrix[j][i] = d;
            sum += d;
        }
    }
    Ok(DiversityReport {
        accuracies,
        disagreement: matrix,
        mean_disagreement: sum / (n * (n - 1) / 2) as f64,
        relative_l2: None,
    })
}

/// Member-averaged probabilities and their argmax labels.
pub fn ensemble_predict(set: &PredictionSet) -> (Matrix, Vec<usize>) {
    let (rows, cols) = (set.n_samples(), set.n_classes());
    let n = set.n_models() as f64;
    let mut mean = vec![0.0; rows * cols];
    for p in set.probs() {
        for (m, x) in mean.iter_mut().zip(p.as_slice()) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mean = Matrix::from_vec(rows, cols, mean).expect("sized above");
    let labels = (0..rows).map(|r| argmax(mean.row(r))).collect();
    (mean, labels)
}

/// How per-class standard deviations collapse to one score per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreAggregation {
    #[default]
    Mean,
    Max,
}

/// Population standard deviation of each class probability across members,
/// aggregated over classes.
pub fn uncertainty_scores(set: &PredictionSet, aggregation: ScoreAggregation) -> Vec<f64> {
    let n = set.n_models() as f64;
    let (rows, cols) = (set.n_samples(), set.n_classes());
    (0..rows)
        .map(|r| {
            let stds = (0..cols).map(|c| {
                let mean = set.probs().iter().map(|p| p.get(r, c)).sum::<f64>() / n;
                let var = set
                    .probs()
                    .iter()
                    .map(|p| (p.get(r, c) - mean).powi(2))
                    .sum::<f64>()
                    / n;
                var.sqrt()
            });
            match aggregation {
                ScoreAggregation::Mean => stds.sum::<f64>() / cols as f64,
                ScoreAggregation::Max => stds.fold(0.0, f64::max),
            }
        })
        .collect()
}

/// Ensemble accuracy before and after discarding samples whose uncertainty
/// exceeds a threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionReport {
    pub threshold: f64,
    pub total: usize,
    pub retained: usize,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    /// `accuracy_after - accuracy_before`.
    pub delta: f64,
}

/// Keeps samples with `score <= threshold`.
pub fn reject_and_rescore(set: &PredictionSet, scores: &[f64], threshold: f64) -> Result<RejectionReport> {
    if threshold.is_nan() {
        return Err(Error::Input("threshold is NaN".into()));
    }
    if scores.len() != set.n_samples() {
        return Err(Error::Shape(format!(
            "{} scores for {} samples",
            scores.len(),
            set.n_samples()
        )));
    }
    let (_, ens) = ensemble_predict(set);
    let before = accuracy(&ens, set.labels())?;
    let keep: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] <= threshold).collect();
    if keep.is_empty() {
        return Err(Error::EmptyRetention {
            threshold,
            min_score: scores.iter().cloned().fold(f64::INFINITY, f64::min),
        });
    }
    let kept_pred: Vec<usize> = keep.iter().map(|&i| ens[i]).collect();
    let kept_true: Vec<usize> = keep.iter().map(|&i| set.labels()[i]).collect();
    let after = accuracy(&kept_pred, &kept_true)?;
    Ok(RejectionReport {
        threshold,
        total: scores.len(),
        retained: keep.len(),
        accuracy_before: before,
        accuracy_after: after,
        delta: after - before,
    })
}

/// `||v|| / mean_i ||w_i||`.
pub fn relative_l2(v: &ParamVector, encoders: &[ParamVector]) -> Result<f64> {
    if encoders.is_empty() {
        return Err(Error::Input("relative L2 needs at least one encoder".into()));
    }
    if encoders.iter().any(|w| w.len() != v.len()) {
        return Err(Error::Shape("shift and encoders differ in length".into()));
    }
    let mean_norm = encoders.iter().map(ParamVector::l2_norm).sum::<f64>() / encoders.len() as f64;
    if mean_norm == 0.0 {
        return Err(Error::UndefinedDenominator("all encoders are zero".into()));
    }
    Ok(v.l2_norm() / mean_norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[0, 1], &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 0, 0], &[0, 1, 0, 1]).unwrap(), 0.75);
        assert_eq!(accuracy(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert!(matches!(accuracy(&[], &[]), Err(Error::Input(_))));
    }

    #[test]
    fn disagreement_hand_cases() {
        let y = [0, 1, 0, 1];
        assert_eq!(pairwise_disagreement(&[0, 1, 0, 0], &[0, 1, 0, 0], &y).unwrap(), 0.0);
        let d = pairwise_disagreement(&[0, 1, 0, 0], &[0, 1, 1, 1], &y).unwrap();
        assert_eq!(d, 2.0 / (4.0 * 0.75));
        assert!((d - 0.6667).abs() < 1e-4);
        assert_eq!(pairwise_disagreement(&[0, 0], &[1, 1], &[0, 1]).unwrap(), 2.0);
        assert!(matches!(
            pairwise_disagreement(&[1, 0], &[1, 0], &[0, 1]),
            Err(Error::UndefinedDenominator(_))
        ));
    }

    #[test]
    fn mean_disagreement_needs_pairs() {
        let set = PredictionSet::new(vec![probs(&[&[1.0, 0.0]])], vec![0]).unwrap();
        assert!(matches!(mean_disagreement(&set), Err(Error::Input(_))));
        let same = PredictionSet::new(vec![probs(&[&[0.7, 0.3], &[0.1, 0.9]]); 3], vec![0, 1]).unwrap();
        let r = mean_disagreement(&same).unwrap();
        assert_eq!(r.mean_disagreement, 0.0);
    }

    #[test]
    fn two_members_mean_equals_pair() {
        let a = probs(&[&[0.9, 0.1], &[0.4, 0.6], &[0.3, 0.7]]);
        let b = probs(&[&[0.2, 0.8], &[0.4, 0.6], &[0.6, 0.4]]);
        let set = PredictionSet::new(vec![a, b], vec![0, 1, 1]).unwrap();
        let r = mean_disagreement(&set).unwrap();
        let d = pairwise_disagreement(&set.predicted()[0], &set.predicted()[1], set.labels()).unwrap();
        assert_eq!(r.mean_disagreement, d);
        assert_eq!(r.disagreement[0][1], r.disagreement[1][0]);
    }

    #[test]
    fn ensemble_average_and_ties() {
        let set = PredictionSet::new(vec![probs(&[&[0.9, 0.1]]), probs(&[&[0.2, 0.8]])], vec![0]).unwrap();
        let (mean, labels) = ensemble_predict(&set);
        assert!((mean.get(0, 0) - 0.55).abs() < 1e-15);
        assert_eq!(labels, vec![0]);
        let tie = PredictionSet::new(vec![probs(&[&[0.5, 0.5]])], vec![1]).unwrap();
        assert_eq!(ensemble_predict(&tie).1, vec![0]);
        let single = PredictionSet::new(vec![probs(&[&[0.1, 0.2, 0.7]])], vec![0]).unwrap();
        assert_eq!(ensemble_predict(&single).1, vec![2]);
    }

    #[test]
    fn population_std_scores() {
        let set = PredictionSet::new(vec![probs(&[&[0.6, 0.4]]), probs(&[&[0.8, 0.2]])], vec![0]).unwrap();
        let s = uncertainty_scores(&set, ScoreAggregation::Mean);
        assert!((s[0] - 0.1).abs() < 1e-12);
        let s = uncertainty_scores(&set, ScoreAggregation::Max);
        assert!((s[0] - 0.1).abs() < 1e-12);
        let one = PredictionSet::new(vec![probs(&[&[0.6, 0.4], &[0.3, 0.7]])], vec![0, 1]).unwrap();
        assert_eq!(uncertainty_scores(&one, ScoreAggregation::Mean), vec![0.0, 0.0]);
    }

    #[test]
    fn rejection_threshold_cases() {
        let p = probs(&[&[0.9, 0.1], &[0.4, 0.6], &[0.7, 0.3]]);
        let set = PredictionSet::new(vec![p.clone(), p], vec![0, 0, 0]).unwrap();
        let r = reject_and_rescore(&set, &[0.01, 0.07, 0.05], 0.065).unwrap();
        assert_eq!(r.retained, 2);
        assert_eq!(r.accuracy_after, 1.0);
        assert!((r.accuracy_before - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.delta, r.accuracy_after - r.accuracy_before);

        let r = reject_and_rescore(&set, &[0.01, 0.07, 0.05], f64::INFINITY).unwrap();
        assert_eq!(r.retained, 3);
        assert_eq!(r.delta, 0.0);

        assert!(matches!(
            reject_and_rescore(&set, &[0.1, 0.2, 0.3], 0.065),
            Err(Error::EmptyRetention { .. })
        ));
    }

    #[test]
    fn relative_l2_cases() {
        let enc = vec![ParamVector::from(vec![1.0, 0.0]), ParamVector::from(vec![0.0, 1.0])];
        assert_eq!(relative_l2(&ParamVector::zeros(2), &enc).unwrap(), 0.0);
        assert_eq!(relative_l2(&vec![3.0, 4.0].into(), &enc).unwrap(), 5.0);
        assert!(matches!(
            relative_l2(&vec![3.0, 4.0].into(), &[ParamVector::zeros(2)]),
            Err(Error::UndefinedDenominator(_))
        ));
    }

    #[test]
    fn rejects_non_probabilities() {
        assert!(PredictionSet::new(vec![probs(&[&[0.5, 0.6]])], vec![0]).is_err());
        assert!(PredictionSet::new(vec![probs(&[&[1.5, -0.5]])], vec![0]).is_err());
    }
}
