//! Pairwise cosine similarity of per-group gradients.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientRecord {
    /// Task id or stage index.
    pub group: usize,
    /// Flat gradient over the shared parameter subset.
    pub gradient: Vec<f64>,
    pub step: u64,
}

/// `values[i][j]` is `None` when either gradient has zero norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineMatrix {
    pub groups: Vec<usize>,
    pub values: Vec<Vec<Option<f64>>>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity between every pair of group gradients.
pub fn grad_cosine(records: &[GradientRecord]) -> Result<CosineMatrix> {
    if records.len() < 2 {
        return contract_err("gradient cosine needs at least two groups");
    }
    let d = records[0].gradient.len();
    if records.iter().any(|r| r.gradient.len() != d) {
        return dim_err("group gradients cover different parameter sets");
    }
    let norms: Vec<f64> = records.iter().map(|r| norm(&r.gradient)).collect();
    let n = records.len();
    let mut values = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            if norms[i] == 0.0 || norms[j] == 0.0 {
                continue;
            }
            let c = if i == j {
                1.0
            } else {
                let dot: f64 = records[i].gradient.iter().zip(&records[j].gradient).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            values[i][j] = Some(c);
            values[j][i] = Some(c);
        }
    }
    Ok(CosineMatrix {
        groups: records.iter().map(|r| r.group).collect(),
        values,
    })
}

/// Whether any defined off-diagonal entry is negative.
pub fn conflict_in(m: &CosineMatrix) -> bool {
    m.values
        .iter()
        .enumerate()
        .any(|(i, row)| row.iter().enumerate().any(|(j, v)| i != j && v.is_some_and(|c| c < 0.0)))
}

/// Share of measurements that show a conflict; `None` without measurements.
pub fn conflict_fraction(ms: &[CosineMatrix]) -> Option<f64> {
    if ms.is_empty() {
        return None;
    }
    Some(ms.iter().filter(|m| conflict_in(m)).count() as f64 / ms.len() as f64)
}

/// Mean of each defined entry across the measurements that share the groups
/// of the last one.
pub fn mean_cosine(ms: &[CosineMatrix]) -> Option<CosineMatrix> {
    let last = ms.last()?;
    let n = last.groups.len();
    let mut sum = vec![vec![0.0; n]; n];
    let mut cnt = vec![vec![0usize; n]; n];
    for m in ms.iter().filter(|m| m.groups == last.groups) {
        for i in 0..n {
            for j in 0..n {
                if let Some(v) = m.values[i][j] {
                    sum[i][j] += v;
                    cnt[i][j] += 1;
                }
            }
        }
    }
    let values = (0..n)
        .map(|i| (0..n).map(|j| (cnt[i][j] > 0).then(|| sum[i][j] / cnt[i][j] as f64)).collect())
        .collect();
    Some(CosineMatrix { groups: last.groups.clone(), values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(group: usize, g: Vec<f64>) -> GradientRecord {
        GradientRecord { group, gradient: g, step: 0 }
    }

    #[test]
    fn limits() {
        let m = grad_cosine(&[rec(0, vec![1.0, 2.0]), rec(1, vec![1.0, 2.0]), rec(2, vec![-1.0, -2.0]), rec(3, vec![2.0, -1.0])]).unwrap();
        assert!((m.values[0][1].unwrap() - 1.0).abs() < 1e-12);
        assert!((m.values[0][2].unwrap() + 1.0).abs() < 1e-12);
        assert!(m.values[0][3].unwrap().abs() < 1e-12);
        assert!(conflict_in(&m));
    }

    #[test]
    fn zero_norm_is_undefined_not_zero() {
        let m = grad_cosine(&[rec(0, vec![0.0, 0.0]), rec(1, vec![1.0, 0.0])]).unwrap();
        assert_eq!(m.values[0][1], None);
        assert_eq!(m.values[0][0], None);
        assert_eq!(m.values[1][1], Some(1.0));
        assert!(!conflict_in(&m));
        assert!(grad_cosine(&[rec(0, vec![1.0])]).is_err());
        assert!(grad_cosine(&[rec(0, vec![1.0]), rec(1, vec![1.0, 2.0])]).is_err());
    }

    #[test]
    fn fraction_and_mean() {
        let pos = grad_cosine(&[rec(0, vec![1.0, 0.0]), rec(1, vec![1.0, 1.0])]).unwrap();
        let neg = grad_cosine(&[rec(0, vec![1.0, 0.0]), rec(1, vec![-1.0, 1.0])]).unwrap();
        assert_eq!(conflict_fraction(&[pos.clone(), neg.clone(), pos.clone(), pos.clone()]), Some(0.25));
        assert_eq!(conflict_fraction(&[]), None);
        let mean = mean_cosine(&[pos, neg]).unwrap();
        assert!(mean.values[0][1].unwrap().abs() < 1e-12);
    }
}
