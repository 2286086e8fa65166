//! Agreement metrics between predicted and human scores.

use std::collections::BTreeMap;

use thiserror::Error;

/// Scores below this are the answer "Same" in the similarity task.
pub const SAME_THRESHOLD: f64 = 2.5;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no scores to compare")]
    Empty,
    #[error("length mismatch: {left} predictions vs {right} references")]
    LengthMismatch { left: usize, right: usize },
    #[error("correlation needs at least 2 points, got {0}")]
    TooShort(usize),
    #[error("correlation undefined: {0} has zero variance")]
    ZeroVariance(&'static str),
    #[error("non-finite score {0}")]
    NonFinite(f64),
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<(), MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.is_empty() {
        return Err(MetricError::Empty);
    }
    if let Some(&v) = x.iter().chain(y).find(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite(v));
    }
    Ok(())
}

pub fn mse(pred: &[f64], gt: &[f64]) -> Result<f64, MetricError> {
    check_pair(pred, gt)?;
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum();
    Ok(sum / pred.len() as f64)
}

/// Sample Pearson correlation.
pub fn pearson_lcc(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check_pair(x, y)?;
    if x.len() < 2 {
        return Err(MetricError::TooShort(x.len()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(MetricError::ZeroVariance("x"));
    }
    if syy == 0.0 {
        return Err(MetricError::ZeroVariance("y"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of average-tie ranks.
pub fn spearman_srcc(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check_pair(x, y)?;
    pearson_lcc(&average_ranks(x), &average_ranks(y))
}

fn group<'a>(
    scores: &[f64],
    ids: &'a [String],
) -> Result<BTreeMap<&'a str, Vec<f64>>, MetricError> {
    if scores.len() != ids.len() {
        return Err(MetricError::LengthMismatch {
            left: scores.len(),
            right: ids.len(),
        });
    }
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (s, id) in scores.iter().zip(ids) {
        groups.entry(id.as_str()).or_default().push(*s);
    }
    Ok(groups)
}

/// Mean score per system id, keyed in sorted id order.
///
/// Members are summed in sorted order, so the result does not depend on
/// utterance order.
pub fn system_aggregate(
    scores: &[f64],
    ids: &[String],
) -> Result<BTreeMap<String, f64>, MetricError> {
    let groups = group(scores, ids)?;
    Ok(groups
        .into_iter()
        .map(|(id, mut v)| {
            v.sort_by(f64::total_cmp);
            (id.to_string(), v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect())
}

pub fn is_same(score: f64) -> bool {
    score < SAME_THRESHOLD
}

/// Fraction of items where both sides give the same Same/Different answer.
pub fn similarity_accuracy(pred: &[f64], gt: &[f64]) -> Result<f64, MetricError> {
    check_pair(pred, gt)?;
    let agree = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| is_same(**p) == is_same(**g))
        .count();
    Ok(agree as f64 / pred.len() as f64)
}

/// Per system, the fraction of pairs answered "Same".
pub fn system_same_ratio(
    scores: &[f64],
    ids: &[String],
) -> Result<BTreeMap<String, f64>, MetricError> {
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    let groups = group(scores, ids)?;
    Ok(groups
        .into_iter()
        .map(|(id, v)| {
            let same = v.iter().filter(|&&s| is_same(s)).count();
            (id.to_string(), same as f64 / v.len() as f64)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson_lcc(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson_lcc(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!((pearson_lcc(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(
            pearson_lcc(&[1.0, 1.0], &[1.0, 2.0]),
            Err(MetricError::ZeroVariance("x"))
        );
        assert_eq!(pearson_lcc(&[1.0], &[1.0]), Err(MetricError::TooShort(1)));
        assert!(matches!(
            pearson_lcc(&[1.0, 2.0], &[1.0]),
            Err(MetricError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(
            spearman_srcc(&[1.0, 2.0, 3.0], &[6.0, 5.0, 4.0]).unwrap(),
            -1.0
        );
        assert_eq!(
            average_ranks(&[1.0, 2.0, 2.0, 3.0]),
            vec![1.0, 2.5, 2.5, 4.0]
        );
        let rho = spearman_srcc(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((rho - 0.94868).abs() < 1e-5, "{rho}");
    }

    #[test]
    fn aggregate_examples() {
        let agg = system_aggregate(&[3.0, 2.0, 4.0], &ids(&["A", "B", "A"])).unwrap();
        assert_eq!(agg["A"], 3.5);
        assert_eq!(agg["B"], 2.0);
        let single = system_aggregate(&[1.5, 2.5], &ids(&["x", "y"])).unwrap();
        assert_eq!(single.values().copied().collect::<Vec<_>>(), vec![1.5, 2.5]);
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity_accuracy(&[1.2, 3.0], &[2.0, 2.7]).unwrap(), 1.0);
        assert_eq!(similarity_accuracy(&[2.4], &[2.6]).unwrap(), 0.0);
        assert_eq!(similarity_accuracy(&[2.5], &[2.5]).unwrap(), 1.0);
        assert_eq!(similarity_accuracy(&[], &[]), Err(MetricError::Empty));
        let s = ids(&["s"; 4]);
        assert_eq!(
            system_same_ratio(&[2.4, 2.6, 1.0, 3.0], &s).unwrap()["s"],
            0.5
        );
        assert_eq!(system_same_ratio(&[1.0, 2.0], &s[..2]).unwrap()["s"], 1.0);
        assert_eq!(system_same_ratio(&[2.5, 4.0], &s[..2]).unwrap()["s"], 0.0);
        assert_eq!(system_same_ratio(&[], &[]), Err(MetricError::Empty));
    }
}
