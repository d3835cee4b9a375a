use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc_roc: f64,
    pub average_precision: f64,
    pub recall_fraud: f64,
    pub recall_legit: f64,
}

impl MetricsReport {
    pub fn compute(scores: &[f64], labels: &[u8]) -> Result<Self, DataError> {
        let (recall_fraud, recall_legit) = recalls(scores, labels, 0.5)?;
        Ok(MetricsReport {
            auc_roc: auc_roc(scores, labels)?,
            average_precision: average_precision(scores, labels)?,
            recall_fraud,
            recall_legit,
        })
    }
}

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize), DataError> {
    if scores.len() != labels.len() {
        return Err(DataError::Parameter(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(DataError::Parameter("scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(DataError::UndefinedMetric(
            "both classes must be present".into(),
        ));
    }
    Ok((pos, neg))
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64, DataError> {
    let (pos, neg) = check(scores, labels)?;
    let order = descending(scores);
    // walk tie groups from the top, counting negatives strictly below each positive
    let mut wins = 0.0;
    let mut neg_above = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        let below = neg - neg_above - gn;
        wins += gp as f64 * (below as f64 + 0.5 * gn as f64);
        neg_above += gn;
        i = j;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Step-wise area under the precision-recall curve: each distinct score
/// threshold contributes its precision weighted by the recall it adds.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64, DataError> {
    let (pos, _) = check(scores, labels)?;
    let order = descending(scores);
    let mut ap = 0.0;
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut gp = 0usize;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            gp += usize::from(labels[order[j]] == 1);
            j += 1;
        }
        tp += gp;
        seen += j - i;
        if gp > 0 {
            ap += (gp as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
        i = j;
    }
    Ok(ap)
}

/// Fraction of frauds scored `>= threshold` and of legitimate transactions
/// scored below it.
pub fn recalls(scores: &[f64], labels: &[u8], threshold: f64) -> Result<(f64, f64), DataError> {
    let (pos, neg) = check(scores, labels)?;
    let mut tp = 0usize;
    let mut tn = 0usize;
    for (&s, &l) in scores.iter().zip(labels) {
        match (l == 1, s >= threshold) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            _ => {}
        }
    }
    Ok((tp as f64 / pos as f64, tn as f64 / neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut total = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    total += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        total / pairs
    }

    #[test]
    fn reference_values() {
        let s = [0.9, 0.8, 0.3, 0.1];
        let l = [1, 0, 1, 0];
        assert!((auc_roc(&s, &l).unwrap() - 0.75).abs() < 1e-15);
        assert!((auc_roc(&s, &l).unwrap() - pairwise_auc(&s, &l)).abs() < 1e-15);
        assert!((average_precision(&s, &l).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_ranking() {
        let s = [0.9, 0.8, 0.3, 0.1];
        let l = [1, 1, 0, 0];
        assert_eq!(auc_roc(&s, &l).unwrap(), 1.0);
        assert_eq!(average_precision(&s, &l).unwrap(), 1.0);
        assert_eq!(recalls(&s, &l, 0.5).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn all_ties_give_half() {
        assert_eq!(auc_roc(&[0.5; 4], &[1, 0, 1, 0]).unwrap(), 0.5);
        assert_eq!(average_precision(&[0.5; 4], &[1, 0, 1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_undefined() {
        assert!(matches!(
            auc_roc(&[0.1, 0.2], &[1, 1]),
            Err(DataError::UndefinedMetric(_))
        ));
        assert!(matches!(
            average_precision(&[0.1, 0.2], &[0, 0]),
            Err(DataError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn recall_threshold_inclusive() {
        let (rf, rl) = recalls(&[0.5, 0.49, 0.5, 0.2], &[1, 1, 0, 0], 0.5).unwrap();
        assert_eq!((rf, rl), (0.5, 0.5));
    }

    fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        prop::collection::vec((0u32..40, 0u8..2), 2..60)
            .prop_filter("both classes", |v| {
                v.iter().any(|x| x.1 == 1) && v.iter().any(|x| x.1 == 0)
            })
            .prop_map(|v| {
                (
                    v.iter().map(|x| x.0 as f64 / 40.0).collect(),
                    v.iter().map(|x| x.1).collect(),
                )
            })
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise((s, l) in scored()) {
            prop_assert!((auc_roc(&s, &l).unwrap() - pairwise_auc(&s, &l)).abs() < 1e-12);
        }

        #[test]
        fn monotone_transform_invariance((s, l) in scored()) {
            let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
            prop_assert_eq!(auc_roc(&s, &l).unwrap(), auc_roc(&t, &l).unwrap());
            prop_assert_eq!(average_precision(&s, &l).unwrap(), average_precision(&t, &l).unwrap());
        }

        #[test]
        fn reversal_complements_auc(perm in Just((0..30).collect::<Vec<usize>>()).prop_shuffle(), labels in prop::collection::vec(0u8..2, 30)) {
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let s: Vec<f64> = perm.iter().map(|&p| p as f64).collect();
            let r: Vec<f64> = s.iter().map(|x| -x).collect();
            let sum = auc_roc(&s, &labels).unwrap() + auc_roc(&r, &labels).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn metrics_in_unit_interval((s, l) in scored()) {
            let m = MetricsReport::compute(&s, &l).unwrap();
            for v in [m.auc_roc, m.average_precision, m.recall_fraud, m.recall_legit] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
