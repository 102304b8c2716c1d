use serde::{Deserialize, Serialize};

use crate::clip::{missingness_group, ClipMeta, MissingnessGroup};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassStats>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision/recall with an empty denominator count as 0.
pub fn metrics_from_predictions(labels: &[usize], preds: &[usize], num_classes: usize) -> Result<MetricsReport> {
    if labels.len() != preds.len() {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            left: vec![labels.len()],
            right: vec![preds.len()],
        });
    }
    if let Some(bad) = labels.iter().chain(preds).find(|&&c| c >= num_classes) {
        return Err(Error::invalid(format!("class {bad} out of range for {num_classes} classes")));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&y, &p) in labels.iter().zip(preds) {
        confusion[y][p] += 1;
    }
    let total = labels.len();
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let per_class: Vec<ClassStats> = (0..num_classes)
        .map(|c| {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassStats {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let weighted_f1 = if total == 0 {
        0.0
    } else {
        per_class.iter().map(|s| s.support as f64 * s.f1).sum::<f64>() / total as f64
    };
    Ok(MetricsReport {
        accuracy: ratio(correct, total),
        weighted_f1,
        per_class,
        confusion,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: MissingnessGroup,
    pub count: usize,
    pub accuracy_a: f64,
    pub accuracy_b: f64,
    /// `accuracy_a − accuracy_b`; 0 for an empty group.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingnessGroupReport {
    pub groups: Vec<GroupRow>,
}

impl MissingnessGroupReport {
    pub fn row(&self, group: MissingnessGroup) -> &GroupRow {
        self.groups.iter().find(|r| r.group == group).expect("every group is reported")
    }
}

/// Per-group accuracies of two prediction sets over the same clips.
pub fn group_report(metas: &[ClipMeta], preds_a: &[usize], preds_b: &[usize]) -> Result<MissingnessGroupReport> {
    if preds_a.len() != metas.len() || preds_b.len() != metas.len() {
        return Err(Error::ShapeMismatch {
            op: "group_report",
            left: vec![metas.len()],
            right: vec![preds_a.len(), preds_b.len()],
        });
    }
    let groups = MissingnessGroup::ALL
        .iter()
        .map(|&group| {
            let (mut count, mut hits_a, mut hits_b) = (0, 0, 0);
            for ((m, &a), &b) in metas.iter().zip(preds_a).zip(preds_b) {
                if missingness_group(m.missing_rate) == group {
                    count += 1;
                    hits_a += usize::from(a == m.label);
                    hits_b += usize::from(b == m.label);
                }
            }
            let (accuracy_a, accuracy_b) = (ratio(hits_a, count), ratio(hits_b, count));
            GroupRow {
                group,
                count,
                accuracy_a,
                accuracy_b,
                delta: accuracy_a - accuracy_b,
            }
        })
        .collect();
    Ok(MissingnessGroupReport { groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_example() {
        let r = metrics_from_predictions(&[0, 0, 1, 1, 2, 2], &[0, 1, 1, 1, 2, 0], 3).unwrap();
        assert!((r.accuracy - 4.0 / 6.0).abs() < 1e-15);
        let f1: Vec<f64> = r.per_class.iter().map(|s| s.f1).collect();
        for (got, want) in f1.iter().zip([0.5, 0.8, 2.0 / 3.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((r.weighted_f1 - 0.655556).abs() < 1e-6);
        assert_eq!(r.confusion, vec![vec![1, 1, 0], vec![0, 2, 0], vec![1, 0, 1]]);
    }

    #[test]
    fn perfect_predictions() {
        let y = [2, 0, 1, 3, 3];
        let r = metrics_from_predictions(&y, &y, 4).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.weighted_f1, 1.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(metrics_from_predictions(&[0, 1], &[0], 2).is_err());
        assert!(metrics_from_predictions(&[0, 2], &[0, 1], 2).is_err());
    }

    fn meta(rate_count: usize, label: usize) -> ClipMeta {
        ClipMeta {
            missing_count: rate_count,
            missing_rate: rate_count as f64 / 16.0,
            label,
            subject_id: "s".into(),
        }
    }

    #[test]
    fn groups_and_deltas() {
        let metas = vec![meta(0, 0), meta(2, 1), meta(4, 1), meta(9, 2), meta(16, 2)];
        let a = [0, 1, 1, 2, 2];
        let b = [0, 0, 1, 0, 2];
        let r = group_report(&metas, &a, &b).unwrap();
        assert_eq!(r.groups.iter().map(|g| g.count).sum::<usize>(), 5);
        assert_eq!(r.row(MissingnessGroup::Low).count, 2);
        assert!((r.row(MissingnessGroup::Low).delta - 0.5).abs() < 1e-15);
        assert_eq!(r.row(MissingnessGroup::Medium).delta, 0.0);
        assert!((r.row(MissingnessGroup::High).delta - 0.5).abs() < 1e-15);
        let same = group_report(&metas, &a, &a).unwrap();
        assert!(same.groups.iter().all(|g| g.delta == 0.0));
    }

    proptest! {
        #[test]
        fn invariants(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60), shift in 0usize..60) {
            let (y, p): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let r = metrics_from_predictions(&y, &p, 4).unwrap();
            let trace: usize = (0..4).map(|c| r.confusion[c][c]).sum();
            let total: usize = r.confusion.iter().flatten().sum();
            prop_assert_eq!(r.accuracy, trace as f64 / total as f64);
            let independent = y.iter().zip(&p).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
            prop_assert!((r.accuracy - independent).abs() < 1e-15);
            let wf1 = r.per_class.iter().map(|s| s.support as f64 * s.f1).sum::<f64>()
                / r.per_class.iter().map(|s| s.support as f64).sum::<f64>();
            prop_assert!((r.weighted_f1 - wf1).abs() < 1e-12);
            // evaluation order does not matter
            let k = shift % pairs.len();
            let (y2, p2): (Vec<usize>, Vec<usize>) = pairs[k..].iter().chain(&pairs[..k]).copied().unzip();
            prop_assert_eq!(metrics_from_predictions(&y2, &p2, 4).unwrap(), r);
        }
    }
}
