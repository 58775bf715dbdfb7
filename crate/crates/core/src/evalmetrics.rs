//! Classification metrics: confusion matrices, one-vs-rest precision, recall
//! and F1, accuracy, ROC curves and AUC.
//!
//! A metric whose denominator is zero is `None` ("undefined") and is left out
//! of macro averages; the number of excluded classes is reported alongside.

use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::CLASS_COUNT;

/// Tolerance on the sum of one score vector.
pub const SCORE_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{truth} true labels but {other} predictions or score rows")]
    LengthMismatch { truth: usize, other: usize },
    #[error("label {label} at index {index} is outside [0,{k})")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        k: usize,
    },
    #[error("score row {index} is not a probability vector over {k} classes")]
    BadScores { index: usize, k: usize },
    #[error("class {class} is outside [0,{k})")]
    ClassOutOfRange { class: usize, k: usize },
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
}

/// One-vs-rest tallies for one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTally {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

/// `matrix[t][p]` counts samples with true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub matrix: Vec<Vec<u64>>,
}

impl ConfusionCounts {
    pub fn zeros(k: usize) -> Self {
        ConfusionCounts {
            matrix: vec![vec![0; k]; k],
        }
    }

    pub fn classes(&self) -> usize {
        self.matrix.len()
    }

    pub fn total(&self) -> u64 {
        self.matrix.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.matrix[i][i]).sum()
    }

    pub fn tally(&self, class: usize) -> ClassTally {
        let tp = self.matrix[class][class];
        let row: u64 = self.matrix[class].iter().sum();
        let col: u64 = self.matrix.iter().map(|r| r[class]).sum();
        let fn_ = row - tp;
        let fp = col - tp;
        ClassTally {
            tp,
            fp,
            fn_,
            tn: self.total() - tp - fp - fn_,
        }
    }
}

fn check_labels(labels: &[usize], k: usize) -> Result<(), MetricsError> {
    match labels.iter().enumerate().find(|(_, &l)| l >= k) {
        Some((index, &label)) => Err(MetricsError::LabelOutOfRange { index, label, k }),
        None => Ok(()),
    }
}

pub fn confusion_matrix(
    truth: &[usize],
    predicted: &[usize],
    k: usize,
) -> Result<ConfusionCounts, MetricsError> {
    if truth.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch {
            truth: truth.len(),
            other: predicted.len(),
        });
    }
    check_labels(truth, k)?;
    check_labels(predicted, k)?;
    let mut counts = ConfusionCounts::zeros(k);
    for (&t, &p) in truth.iter().zip(predicted) {
        counts.matrix[t][p] += 1;
    }
    Ok(counts)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// TP / (TP + FP).
pub fn precision(counts: &ConfusionCounts, class: usize) -> Option<f64> {
    let t = counts.tally(class);
    ratio(t.tp, t.tp + t.fp)
}

/// TP / (TP + FN).
pub fn recall(counts: &ConfusionCounts, class: usize) -> Option<f64> {
    let t = counts.tally(class);
    ratio(t.tp, t.tp + t.fn_)
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(counts: &ConfusionCounts, class: usize) -> Option<f64> {
    harmonic(precision(counts, class)?, recall(counts, class)?)
}

fn harmonic(p: f64, r: f64) -> Option<f64> {
    Some(if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    })
}

/// Correct predictions over all samples. In the two-class case this is
/// (TP + TN) / (TP + TN + FP + FN).
pub fn accuracy(counts: &ConfusionCounts) -> Option<f64> {
    ratio(counts.trace(), counts.total())
}

/// Unweighted mean over defined values, plus the number left out.
pub fn macro_mean(values: &[Option<f64>]) -> (Option<f64>, usize) {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    let excluded = values.len() - defined.len();
    if defined.is_empty() {
        (None, excluded)
    } else {
        (
            Some(defined.iter().sum::<f64>() / defined.len() as f64),
            excluded,
        )
    }
}

fn check_scores(scores: &[Vec<f64>], k: usize) -> Result<(), MetricsError> {
    for (index, row) in scores.iter().enumerate() {
        let ok = row.len() == k
            && row.iter().all(|s| s.is_finite() && (0.0..=1.0).contains(s))
            && (row.iter().sum::<f64>() - 1.0).abs() <= SCORE_SUM_TOLERANCE;
        if !ok {
            return Err(MetricsError::BadScores { index, k });
        }
    }
    Ok(())
}

fn check_roc_inputs(scores: &[Vec<f64>], truth: &[usize], k: usize) -> Result<(), MetricsError> {
    if scores.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            truth: truth.len(),
            other: scores.len(),
        });
    }
    check_labels(truth, k)?;
    check_scores(scores, k)
}

/// One-vs-rest ROC staircase for `class`, from `(0,0)` to `(1,1)`, with one
/// vertex per distinct score. `None` when the class has no positive or no
/// negative sample.
pub fn roc_curve(
    scores: &[Vec<f64>],
    truth: &[usize],
    class: usize,
) -> Result<Option<Vec<(f64, f64)>>, MetricsError> {
    let k = scores.first().map_or(CLASS_COUNT, Vec::len);
    if class >= k {
        return Err(MetricsError::ClassOutOfRange { class, k });
    }
    check_roc_inputs(scores, truth, k)?;
    Ok(curve_unchecked(scores, truth, class))
}

fn curve_unchecked(scores: &[Vec<f64>], truth: &[usize], class: usize) -> Option<Vec<(f64, f64)>> {
    let mut pairs: Vec<(f64, bool)> = scores
        .iter()
        .zip(truth)
        .map(|(s, &t)| (s[class], t == class))
        .collect();
    let positives = pairs.iter().filter(|p| p.1).count() as u64;
    let negatives = pairs.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < pairs.len() {
        let threshold = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == threshold {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / negatives as f64, tp as f64 / positives as f64));
    }
    Some(points)
}

/// Trapezoidal area under a curve given as `(x, y)` vertices.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucSet {
    pub per_class: Vec<Option<f64>>,
    pub macro_auc: Option<f64>,
}

/// One-vs-rest AUC per class by trapezoidal integration of the ROC curve.
/// Tied scores form diagonal segments, which is the midrank convention.
pub fn roc_auc(scores: &[Vec<f64>], truth: &[usize]) -> Result<AucSet, MetricsError> {
    let k = scores.first().map_or(CLASS_COUNT, Vec::len);
    check_roc_inputs(scores, truth, k)?;
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| curve_unchecked(scores, truth, c).map(|pts| trapezoid(&pts)))
        .collect();
    let (macro_auc, _) = macro_mean(&per_class);
    Ok(AucSet {
        per_class,
        macro_auc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub samples: u64,
    pub accuracy: Option<f64>,
    pub precision: Vec<Option<f64>>,
    pub recall: Vec<Option<f64>>,
    pub f1: Vec<Option<f64>>,
    pub macro_precision: Option<f64>,
    pub macro_recall: Option<f64>,
    pub macro_f1: Option<f64>,
    /// Classes left out of each macro average, in the order precision,
    /// recall, f1.
    pub macro_excluded: [usize; 3],
    /// Pooled over classes. For single-label data these all equal accuracy.
    pub micro_precision: Option<f64>,
    pub micro_recall: Option<f64>,
    pub micro_f1: Option<f64>,
    pub auc: Vec<Option<f64>>,
    pub macro_auc: Option<f64>,
}

impl MetricSet {
    /// Metrics from counts alone; AUC fields are left undefined.
    pub fn from_counts(counts: &ConfusionCounts) -> Self {
        let k = counts.classes();
        let precision: Vec<_> = (0..k).map(|c| precision(counts, c)).collect();
        let recall: Vec<_> = (0..k).map(|c| recall(counts, c)).collect();
        let f1: Vec<_> = (0..k).map(|c| f1(counts, c)).collect();
        let (macro_precision, ep) = macro_mean(&precision);
        let (macro_recall, er) = macro_mean(&recall);
        let (macro_f1, ef) = macro_mean(&f1);

        let (tp, fp, fn_) = (0..k)
            .map(|c| counts.tally(c))
            .fold((0, 0, 0), |(a, b, c), t| (a + t.tp, b + t.fp, c + t.fn_));
        let micro_precision = ratio(tp, tp + fp);
        let micro_recall = ratio(tp, tp + fn_);
        let micro_f1 = match (micro_precision, micro_recall) {
            (Some(p), Some(r)) => harmonic(p, r),
            _ => None,
        };
        MetricSet {
            samples: counts.total(),
            accuracy: accuracy(counts),
            precision,
            recall,
            f1,
            macro_precision,
            macro_recall,
            macro_f1,
            macro_excluded: [ep, er, ef],
            micro_precision,
            micro_recall,
            micro_f1,
            auc: vec![None; k],
            macro_auc: None,
        }
    }
}

/// Metrics document: the confusion matrix plus every derived value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion_matrix: ConfusionCounts,
    pub metrics: MetricSet,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }

    /// Header and one row: accuracy, macro/micro precision and F1, macro AUC.
    pub fn csv_summary(&self) -> String {
        let m = &self.metrics;
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "samples,accuracy,macro_precision,macro_f1,micro_precision,micro_f1,macro_auc\n{},{},{},{},{},{},{}\n",
            m.samples,
            cell(m.accuracy),
            cell(m.macro_precision),
            cell(m.macro_f1),
            cell(m.micro_precision),
            cell(m.micro_f1),
            cell(m.macro_auc),
        )
    }
}

/// Full evaluation over labelled predictions with per-class scores.
pub fn evaluate(
    truth: &[usize],
    predicted: &[usize],
    scores: &[Vec<f64>],
) -> Result<MetricsReport, MetricsError> {
    let k = CLASS_COUNT;
    let counts = confusion_matrix(truth, predicted, k)?;
    let mut metrics = MetricSet::from_counts(&counts);
    if !truth.is_empty() {
        let auc = roc_auc(scores, truth)?;
        metrics.auc = auc.per_class;
        metrics.macro_auc = auc.macro_auc;
    } else if !scores.is_empty() {
        return Err(MetricsError::LengthMismatch {
            truth: 0,
            other: scores.len(),
        });
    }
    Ok(MetricsReport {
        confusion_matrix: counts,
        metrics,
    })
}

/// One row of a predictions file.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub true_label: usize,
    pub predicted_label: usize,
    pub scores: Vec<f64>,
}

pub const PREDICTIONS_HEADER: [&str; 7] = [
    "true_label",
    "predicted_label",
    "score_0",
    "score_1",
    "score_2",
    "score_3",
    "score_4",
];

/// Parses a predictions CSV. Errors carry the 1-based line number.
pub fn read_predictions<R: Read>(input: R) -> Result<Vec<Prediction>, MetricsError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = reader
        .headers()
        .map_err(|e| MetricsError::Csv {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if header.iter().ne(PREDICTIONS_HEADER.iter().copied()) {
        return Err(MetricsError::Csv {
            line: 1,
            message: format!("expected header `{}`", PREDICTIONS_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| MetricsError::Csv {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| MetricsError::Csv { line, message };
        let label = |i: usize| -> Result<usize, MetricsError> {
            let l: usize = record[i].parse().map_err(|_| {
                bad(format!(
                    "{} `{}` is not a label",
                    PREDICTIONS_HEADER[i], &record[i]
                ))
            })?;
            if l >= CLASS_COUNT {
                return Err(bad(format!(
                    "{} {} is outside [0,{})",
                    PREDICTIONS_HEADER[i], l, CLASS_COUNT
                )));
            }
            Ok(l)
        };
        let true_label = label(0)?;
        let predicted_label = label(1)?;
        let scores = (2..7)
            .map(|i| {
                record[i].parse::<f64>().map_err(|_| {
                    bad(format!(
                        "{} `{}` is not a number",
                        PREDICTIONS_HEADER[i], &record[i]
                    ))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if check_scores(std::slice::from_ref(&scores), CLASS_COUNT).is_err() {
            return Err(bad("scores are not a probability vector".into()));
        }
        out.push(Prediction {
            true_label,
            predicted_label,
            scores,
        });
    }
    Ok(out)
}

pub fn evaluate_predictions(rows: &[Prediction]) -> Result<MetricsReport, MetricsError> {
    let truth: Vec<usize> = rows.iter().map(|r| r.true_label).collect();
    let predicted: Vec<usize> = rows.iter().map(|r| r.predicted_label).collect();
    let scores: Vec<Vec<f64>> = rows.iter().map(|r| r.scores.clone()).collect();
    evaluate(&truth, &predicted, &scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_are_diagonal() {
        let labels = [0, 1, 2, 3, 4, 4, 2];
        let c = confusion_matrix(&labels, &labels, 5).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    assert_eq!(c.matrix[i][j], 0);
                }
            }
        }
        assert_eq!(c.trace(), 7);
    }

    #[test]
    fn hand_case_cells() {
        let c = confusion_matrix(&[0, 0, 1], &[0, 1, 1], 5).unwrap();
        assert_eq!(c.matrix[0][0], 1);
        assert_eq!(c.matrix[0][1], 1);
        assert_eq!(c.matrix[1][1], 1);
        assert_eq!(c.total(), 3);
        for class in 0..5 {
            let t = c.tally(class);
            assert_eq!(t.tp + t.fp + t.fn_ + t.tn, 3);
        }
    }

    #[test]
    fn hand_case_metrics() {
        let c = confusion_matrix(&[0, 0, 1], &[0, 1, 1], 5).unwrap();
        assert_eq!(precision(&c, 0), Some(1.0));
        assert_eq!(recall(&c, 0), Some(0.5));
        assert!((f1(&c, 0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((accuracy(&c).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        // classes 2..4 never occur
        assert_eq!(precision(&c, 3), None);
        let m = MetricSet::from_counts(&c);
        assert_eq!(m.macro_excluded, [3, 3, 3]);
    }

    #[test]
    fn empty_inputs() {
        let c = confusion_matrix(&[], &[], 5).unwrap();
        assert_eq!(c, ConfusionCounts::zeros(5));
        let m = MetricSet::from_counts(&c);
        assert_eq!(m.accuracy, None);
        assert!(m
            .precision
            .iter()
            .chain(&m.recall)
            .chain(&m.f1)
            .all(Option::is_none));
        assert_eq!(m.macro_precision, None);
        assert_eq!(m.macro_f1, None);
    }

    #[test]
    fn perfect_binary() {
        let c = confusion_matrix(&[1, 0], &[1, 0], 2).unwrap();
        let t = c.tally(1);
        assert_eq!((t.tp, t.fp, t.fn_, t.tn), (1, 0, 0, 1));
        assert_eq!(precision(&c, 1), Some(1.0));
        assert_eq!(recall(&c, 1), Some(1.0));
        assert_eq!(f1(&c, 1), Some(1.0));
        assert_eq!(accuracy(&c), Some(1.0));
    }

    #[test]
    fn input_errors_name_the_index() {
        assert_eq!(
            confusion_matrix(&[0, 1], &[0], 5),
            Err(MetricsError::LengthMismatch { truth: 2, other: 1 })
        );
        assert_eq!(
            confusion_matrix(&[0, 7], &[0, 1], 5),
            Err(MetricsError::LabelOutOfRange {
                index: 1,
                label: 7,
                k: 5
            })
        );
    }

    fn onehot(c: usize, hi: f64) -> Vec<f64> {
        let mut v = vec![(1.0 - hi) / 4.0; 5];
        v[c] = hi;
        v
    }

    #[test]
    fn separating_scores_give_unit_auc() {
        let truth = [0, 1, 2, 3, 4, 0, 1, 2, 3, 4];
        let scores: Vec<_> = truth
            .iter()
            .enumerate()
            .map(|(i, &c)| onehot(c, 0.6 + 0.01 * i as f64))
            .collect();
        let auc = roc_auc(&scores, &truth).unwrap();
        assert!(auc.per_class.iter().all(|a| *a == Some(1.0)));
        assert_eq!(auc.macro_auc, Some(1.0));
    }

    fn binary_scores(values: &[f64]) -> Vec<Vec<f64>> {
        values
            .iter()
            .map(|&v| vec![1.0 - v, v, 0.0, 0.0, 0.0])
            .collect()
    }

    #[test]
    fn four_sample_hand_case() {
        // positives (class 1) at 0.9 and 0.4, negatives at 0.6 and 0.1
        let scores = binary_scores(&[0.9, 0.4, 0.6, 0.1]);
        let truth = [1, 1, 0, 0];
        let auc = roc_auc(&scores, &truth).unwrap();
        assert!((auc.per_class[1].unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(auc.per_class[2], None);
        let curve = roc_curve(&scores, &truth, 1).unwrap().unwrap();
        assert_eq!(trapezoid(&curve), auc.per_class[1].unwrap());
    }

    #[test]
    fn single_pair_curves() {
        let truth = [1, 0];
        let curve = roc_curve(&binary_scores(&[0.8, 0.3]), &truth, 1)
            .unwrap()
            .unwrap();
        assert_eq!(curve, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
        let reversed = roc_curve(&binary_scores(&[0.3, 0.8]), &truth, 1)
            .unwrap()
            .unwrap();
        assert_eq!(reversed, vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)]);
        assert_eq!(trapezoid(&reversed), 0.0);
    }

    #[test]
    fn all_ties_give_one_half() {
        let truth = [0, 1, 2, 3, 4, 0];
        let scores = vec![vec![0.2; 5]; 6];
        let auc = roc_auc(&scores, &truth).unwrap();
        assert!(auc.per_class.iter().all(|a| *a == Some(0.5)));
    }

    #[test]
    fn missing_class_undefined() {
        let truth = [0, 0];
        let auc = roc_auc(&binary_scores(&[0.1, 0.2]), &truth).unwrap();
        assert!(auc.per_class.iter().all(Option::is_none));
        assert_eq!(auc.macro_auc, None);
        assert_eq!(
            roc_curve(&binary_scores(&[0.1, 0.2]), &truth, 0).unwrap(),
            None
        );
    }

    #[test]
    fn bad_scores_rejected() {
        let scores = vec![vec![0.5, 0.6, 0.0, 0.0, 0.0]];
        assert_eq!(
            roc_auc(&scores, &[0]),
            Err(MetricsError::BadScores { index: 0, k: 5 })
        );
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let text = "true_label,predicted_label,score_0,score_1,score_2,score_3,score_4\n\
                    0,0,0.6,0.1,0.1,0.1,0.1\n\
                    0,1,0.1,0.6,0.1,0.1,0.1\n\
                    1,1,0.1,0.6,0.1,0.1,0.1\n";
        let rows = read_predictions(text.as_bytes()).unwrap();
        let report = evaluate_predictions(&rows).unwrap();
        assert!((report.metrics.accuracy.unwrap() - 2.0 / 3.0).abs() < 1e-15);

        let broken = "true_label,predicted_label,score_0,score_1,score_2,score_3,score_4\n\
                      0,0,0.6,0.1,0.1,0.1,0.1\n\
                      0,x,0.1,0.6,0.1,0.1,0.1\n";
        match read_predictions(broken.as_bytes()) {
            Err(MetricsError::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let short = "true_label,predicted_label,score_0,score_1,score_2,score_3,score_4\n0,0,1\n";
        assert!(matches!(
            read_predictions(short.as_bytes()),
            Err(MetricsError::Csv { line: 2, .. })
        ));
        assert!(matches!(
            read_predictions("a,b\n".as_bytes()),
            Err(MetricsError::Csv { line: 1, .. })
        ));
    }

    #[test]
    fn summary_row_has_blanks_for_undefined() {
        let report = evaluate(&[], &[], &[]).unwrap();
        assert_eq!(report.csv_summary().lines().nth(1).unwrap(), "0,,,,,,");
    }
}
