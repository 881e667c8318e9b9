//! Classification metrics: confusion matrix, per-class and macro
//! precision/recall/F1, and one-vs-rest ROC curves with trapezoidal AUC.
//! All pure functions over plain slices, computed in f64.

use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    /// A label or prediction outside `[0, n_classes)`.
    Index { index: usize, bound: usize },
    /// Length mismatch or empty input.
    Input(String),
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::Index { index, bound } => {
                write!(f, "label {index} out of range (classes: {bound})")
            }
            MetricsError::Input(m) => write!(f, "invalid metrics input: {m}"),
        }
    }
}

impl std::error::Error for MetricsError {}

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    /// Row-major `n_classes × n_classes` counts.
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn at(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.n_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|c| self.at(c, c)).sum()
    }

    /// Exact integer-derived accuracy `trace / total`.
    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    pub fn row_sum(&self, true_class: usize) -> u64 {
        (0..self.n_classes).map(|p| self.at(true_class, p)).sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.n_classes).map(|t| self.at(t, predicted)).sum()
    }

    pub fn write_csv<W: std::io::Write>(
        &self,
        classes: &[String],
        mut w: W,
    ) -> std::io::Result<()> {
        write!(w, "true\\pred")?;
        for c in classes {
            write!(w, ",{c}")?;
        }
        writeln!(w)?;
        for (t, name) in classes.iter().enumerate() {
            write!(w, "{name}")?;
            for p in 0..self.n_classes {
                write!(w, ",{}", self.at(t, p))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

pub fn confusion(
    y_true: &[usize],
    y_pred: &[usize],
    n_classes: usize,
) -> Result<ConfusionMatrix, MetricsError> {
    if y_true.len() != y_pred.len() {
        return Err(MetricsError::Input(format!(
            "{} labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(MetricsError::Input("empty label set".into()));
    }
    let mut counts = vec![0u64; n_classes * n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= n_classes {
            return Err(MetricsError::Index {
                index: t,
                bound: n_classes,
            });
        }
        if p >= n_classes {
            return Err(MetricsError::Index {
                index: p,
                bound: n_classes,
            });
        }
        counts[t * n_classes + p] += 1;
    }
    Ok(ConfusionMatrix { n_classes, counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when a zero denominator forced the metric to 0.
    pub zero_division: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrfReport {
    pub per_class: Vec<ClassPrf>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

/// Precision/recall/F1 per class plus unweighted macro averages. Zero
/// denominators yield 0 with the `zero_division` flag set.
pub fn prf1(cm: &ConfusionMatrix) -> PrfReport {
    let mut per_class = Vec::with_capacity(cm.n_classes);
    for c in 0..cm.n_classes {
        let tp = cm.at(c, c) as f64;
        let col = cm.col_sum(c) as f64;
        let row = cm.row_sum(c) as f64;
        let mut zero_division = false;
        let precision = if col > 0.0 {
            tp / col
        } else {
            zero_division = true;
            0.0
        };
        let recall = if row > 0.0 {
            tp / row
        } else {
            zero_division = true;
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            zero_division = true;
            0.0
        };
        per_class.push(ClassPrf {
            precision,
            recall,
            f1,
            support: cm.row_sum(c),
            zero_division,
        });
    }
    let n = cm.n_classes as f64;
    PrfReport {
        macro_precision: per_class.iter().map(|c| c.precision).sum::<f64>() / n,
        macro_recall: per_class.iter().map(|c| c.recall).sum::<f64>() / n,
        macro_f1: per_class.iter().map(|c| c.f1).sum::<f64>() / n,
        accuracy: cm.accuracy(),
        per_class,
    }
}

/// One-vs-rest ROC curve: threshold sweep over distinct scores, points from
/// (0,0) to (1,1), trapezoidal AUC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` pairs, non-decreasing in both coordinates.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl RocCurve {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "fpr,tpr")?;
        for (fpr, tpr) in &self.points {
            writeln!(w, "{fpr},{tpr}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocReport {
    /// One curve per class; `None` when the class is absent from `y_true`.
    pub per_class: Vec<Option<RocCurve>>,
    /// Unweighted mean over defined classes.
    pub macro_auc: f64,
    /// Classes excluded from the macro average.
    pub skipped_classes: Vec<usize>,
}

/// Binary ROC from scores of positives vs negatives, grouping tied scores.
fn binary_roc(scores: &[f64], positives: &[bool]) -> RocCurve {
    let total_pos = positives.iter().filter(|&&p| p).count() as f64;
    let total_neg = positives.len() as f64 - total_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });

    let mut points = vec![(0.0, 0.0)];
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // consume the whole tie group before emitting a point
        while i < order.len() && scores[order[i]] == threshold {
            if positives[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push((fp / total_neg, tp / total_pos));
    }
    if *points.last().unwrap() != (1.0, 1.0) {
        points.push((1.0, 1.0));
    }
    let mut auc = 0.0;
    for pair in points.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        auc += (x1 - x0) * (y0 + y1) / 2.0;
    }
    RocCurve { points, auc }
}

/// One-vs-rest ROC/AUC over probability rows `[N, C]`.
pub fn roc_auc(
    scores: &[Vec<f64>],
    y_true: &[usize],
    n_classes: usize,
) -> Result<RocReport, MetricsError> {
    if scores.len() != y_true.len() {
        return Err(MetricsError::Input(format!(
            "{} score rows vs {} labels",
            scores.len(),
            y_true.len()
        )));
    }
    if scores.is_empty() {
        return Err(MetricsError::Input("empty score set".into()));
    }
    for row in scores {
        if row.len() != n_classes {
            return Err(MetricsError::Input(format!(
                "score row has {} entries, expected {n_classes}",
                row.len()
            )));
        }
    }
    if let Some(&bad) = y_true.iter().find(|&&t| t >= n_classes) {
        return Err(MetricsError::Index {
            index: bad,
            bound: n_classes,
        });
    }

    let mut per_class = Vec::with_capacity(n_classes);
    let mut skipped = Vec::new();
    let mut auc_sum = 0.0;
    let mut auc_count = 0usize;
    for c in 0..n_classes {
        let pos: Vec<bool> = y_true.iter().map(|&t| t == c).collect();
        let n_pos = pos.iter().filter(|&&p| p).count();
        if n_pos == 0 || n_pos == pos.len() {
            skipped.push(c);
            per_class.push(None);
            continue;
        }
        let col: Vec<f64> = scores.iter().map(|row| row[c]).collect();
        let curve = binary_roc(&col, &pos);
        auc_sum += curve.auc;
        auc_count += 1;
        per_class.push(Some(curve));
    }
    if auc_count == 0 {
        return Err(MetricsError::Input(
            "no class has both positives and negatives; AUC undefined".into(),
        ));
    }
    Ok(RocReport {
        per_class,
        macro_auc: auc_sum / auc_count as f64,
        skipped_classes: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    #[test]
    fn perfect_predictions_are_diagonal() {
        let y = vec![0, 1, 2, 1, 0, 2];
        let cm = confusion(&y, &y, 3).unwrap();
        assert_eq!(cm.trace(), 6);
        assert_eq!(cm.total(), 6);
        assert_eq!(cm.accuracy(), 1.0);
        let report = prf1(&cm);
        assert_eq!(report.macro_f1, 1.0);
        assert_eq!(report.macro_precision, 1.0);
        assert_eq!(report.macro_recall, 1.0);
        for c in report.per_class {
            assert_eq!((c.precision, c.recall, c.f1), (1.0, 1.0, 1.0));
            assert!(!c.zero_division);
        }
    }

    #[test]
    fn hand_counted_two_class_case() {
        // y_true=[0,0,1,1], y_pred=[0,1,1,1] → [[1,1],[0,2]]
        let cm = confusion(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(cm.counts, vec![1, 1, 0, 2]);
        let r = prf1(&cm);
        assert_eq!(r.per_class[0].precision, 1.0);
        assert!((r.per_class[1].precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_class[0].recall, 0.5);
        assert_eq!(r.per_class[1].recall, 1.0);
        assert!((r.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.per_class[1].f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn brick_concrete_worked_case() {
        // 5 balanced classes of 200; class 2 has 12 samples predicted as
        // class 0, everything else correct.
        let mut y_true = Vec::new();
        let mut y_pred = Vec::new();
        for c in 0..5usize {
            for i in 0..200usize {
                y_true.push(c);
                y_pred.push(if c == 2 && i < 12 { 0 } else { c });
            }
        }
        let cm = confusion(&y_true, &y_pred, 5).unwrap();
        assert_eq!(cm.at(2, 0), 12);
        assert_eq!(cm.at(2, 2), 188);
        let r = prf1(&cm);
        assert!((r.per_class[2].recall - 0.94).abs() < 1e-12);
    }

    #[test]
    fn never_predicted_class_flags_zero_division() {
        let cm = confusion(&[0, 1], &[0, 0], 3).unwrap();
        let r = prf1(&cm);
        assert_eq!(r.per_class[1].precision, 0.0);
        assert!(r.per_class[1].zero_division);
        // class 2 has no support and no predictions
        assert!(r.per_class[2].zero_division);
        for c in &r.per_class {
            assert!(c.f1 <= 2.0 * c.precision + 1e-12);
            assert!(c.f1 <= 2.0 * c.recall + 1e-12);
        }
    }

    #[test]
    fn out_of_range_labels_error() {
        assert!(matches!(
            confusion(&[0, 3], &[0, 0], 3),
            Err(MetricsError::Index { index: 3, bound: 3 })
        ));
    }

    #[test]
    fn roc_perfectly_separated() {
        let scores = vec![
            vec![0.9, 0.1],
            vec![0.8, 0.2],
            vec![0.2, 0.8],
            vec![0.1, 0.9],
        ];
        let report = roc_auc(&scores, &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(report.macro_auc, 1.0);
        for curve in report.per_class.iter().flatten() {
            assert_eq!(curve.auc, 1.0);
            assert_eq!(curve.points.first(), Some(&(0.0, 0.0)));
            assert_eq!(curve.points.last(), Some(&(1.0, 1.0)));
        }
    }

    /// Mann-Whitney pair counting, the independent AUC oracle.
    fn pair_count_auc(scores: &[f64], positives: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &pi) in positives.iter().enumerate() {
            if !pi {
                continue;
            }
            for (j, &pj) in positives.iter().enumerate() {
                if pj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn trapezoid_auc_equals_pair_counting() {
        // the spec's worked 2-class case
        let scores = [0.1, 0.4, 0.35, 0.8];
        let pos = [false, false, true, true];
        let curve = binary_roc(&scores, &pos);
        let oracle = pair_count_auc(&scores, &pos);
        assert!((curve.auc - oracle).abs() < 1e-9, "{} vs {oracle}", curve.auc);

        // randomized instances with ties
        let mut rng = rng_from(14, "auc-pairs");
        for _ in 0..200 {
            let n = rng.gen_range(4..40);
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.gen_range(0..8) as f64) / 8.0)
                .collect();
            let mut pos: Vec<bool> = (0..n).map(|_| rng.gen::<bool>()).collect();
            pos[0] = true;
            pos[1] = false;
            let curve = binary_roc(&scores, &pos);
            let oracle = pair_count_auc(&scores, &pos);
            assert!(
                (curve.auc - oracle).abs() < 1e-9,
                "{} vs {oracle}",
                curve.auc
            );
        }
    }

    #[test]
    fn random_scores_auc_near_half() {
        let mut rng = rng_from(15, "auc-random");
        let n = 10_000;
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let a: f64 = rng.gen_range(0.0..1.0);
                vec![a, 1.0 - a]
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let report = roc_auc(&scores, &labels, 2).unwrap();
        for curve in report.per_class.iter().flatten() {
            assert!((curve.auc - 0.5).abs() < 0.03, "auc {}", curve.auc);
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = rng_from(16, "auc-monotone");
        let scores: Vec<f64> = (0..200).map(|_| rng.gen_range(0.01..1.0)).collect();
        let pos: Vec<bool> = (0..200).map(|i| i % 3 == 0).collect();
        let base = binary_roc(&scores, &pos).auc;
        let cubed: Vec<f64> = scores.iter().map(|s| s * s * s).collect();
        let transformed = binary_roc(&cubed, &pos).auc;
        assert!((base - transformed).abs() < 1e-12);
    }

    #[test]
    fn absent_class_excluded_with_warning() {
        let scores = vec![vec![0.7, 0.2, 0.1], vec![0.3, 0.6, 0.1]];
        let report = roc_auc(&scores, &[0, 1], 3).unwrap();
        assert_eq!(report.skipped_classes, vec![2]);
        assert!(report.per_class[2].is_none());
    }

    #[test]
    fn curves_are_monotone() {
        let mut rng = rng_from(17, "roc-monotone");
        for _ in 0..50 {
            let n = rng.gen_range(5..60);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut pos: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            pos[0] = true;
            pos[1] = false;
            let curve = binary_roc(&scores, &pos);
            for pair in curve.points.windows(2) {
                assert!(pair[1].0 >= pair[0].0);
                assert!(pair[1].1 >= pair[0].1);
            }
            assert!((0.0..=1.0).contains(&curve.auc));
        }
    }
}
