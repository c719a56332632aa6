//! Evaluation metrics: NLL, top-k accuracy, F1, MMD and class-conditional
//! decorrelation of sources.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{config, usage, Result};
use crate::tensor::{log_sum_exp, Tensor};

/// Classification quality on one evaluation set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nll: f64,
    pub top1: f64,
    pub top5: f64,
    pub f1_per_class: Vec<f64>,
    pub macro_f1: f64,
    pub per_class_accuracy: Vec<f64>,
    /// `(epoch, mean |off-diagonal correlation|)` during de-mixing.
    #[serde(default)]
    pub decorrelation_trace: Vec<(usize, f64)>,
    /// MMD diagnostics; the pipeline keys them `class_<c>` (synthetic vs real sources of class `c`).
    #[serde(default)]
    pub mmd: BTreeMap<String, f64>,
}

/// Rank of the true class under a stable descending sort (ties favour
/// the lower class index), so uniform logits are not scored as correct.
fn true_rank(row: &[f64], y: usize) -> usize {
    let t = row[y];
    row.iter().enumerate().filter(|&(j, &v)| v > t || (v == t && j < y)).count()
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// NLL, top-1/top-5, per-class F1 and accuracy from logits.
pub fn classification_metrics(logits: &Tensor, labels: &[usize]) -> Result<MetricsReport> {
    let (n, m) = logits.dims();
    if n == 0 || labels.is_empty() {
        return usage("cannot evaluate an empty set");
    }
    if labels.len() != n {
        return usage(format!("{} labels for {n} logit rows", labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= m) {
        return usage(format!("label {bad} out of range for {m} classes"));
    }
    let mut nll = 0.0;
    let (mut top1, mut top5) = (0usize, 0usize);
    let mut tp = vec![0usize; m];
    let mut predicted = vec![0usize; m];
    let mut support = vec![0usize; m];
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        nll += log_sum_exp(row) - row[y];
        let rank = true_rank(row, y);
        top1 += usize::from(rank < 1);
        top5 += usize::from(rank < 5);
        let p = argmax(row);
        predicted[p] += 1;
        support[y] += 1;
        if p == y {
            tp[y] += 1;
        }
    }
    let f1_per_class: Vec<f64> = (0..m)
        .map(|c| {
            let denom = predicted[c] + support[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect();
    let per_class_accuracy = (0..m)
        .map(|c| if support[c] == 0 { 0.0 } else { tp[c] as f64 / support[c] as f64 })
        .collect();
    let present: Vec<f64> = (0..m).filter(|&c| support[c] > 0).map(|c| f1_per_class[c]).collect();
    Ok(MetricsReport {
        nll: nll / n as f64,
        top1: top1 as f64 / n as f64,
        top5: top5 as f64 / n as f64,
        macro_f1: present.iter().sum::<f64>() / present.len() as f64,
        f1_per_class,
        per_class_accuracy,
        ..MetricsReport::default()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdConfig {
    pub sigma: f64,
}

impl Default for MmdConfig {
    fn default() -> Self {
        Self { sigma: 0.5 }
    }
}

fn mean_kernel(a: &Tensor, b: &Tensor, gamma: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..a.rows() {
        let x = a.row(i);
        for j in 0..b.rows() {
            let d2: f64 = x.iter().zip(b.row(j)).map(|(u, v)| (u - v).powi(2)).sum();
            total += (-gamma * d2).exp();
        }
    }
    total / (a.rows() * b.rows()) as f64
}

/// Biased Gaussian-kernel MMD between two sample sets.
pub fn mmd(a: &Tensor, b: &Tensor, cfg: MmdConfig) -> Result<f64> {
    if !(cfg.sigma > 0.0) {
        return config(format!("kernel bandwidth must be positive, got {}", cfg.sigma));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return usage("MMD needs non-empty sets");
    }
    if a.cols() != b.cols() {
        return usage(format!("MMD dimension mismatch: {} vs {}", a.cols(), b.cols()));
    }
    // Canonical argument order keeps the floating-point result symmetric.
    let (a, b) = if canonical_le(a, b) { (a, b) } else { (b, a) };
    let gamma = 1.0 / (2.0 * cfg.sigma * cfg.sigma);
    let aa = mean_kernel(a, a, gamma);
    let bb = mean_kernel(b, b, gamma);
    let ab = mean_kernel(a, b, gamma);
    Ok((aa + bb - 2.0 * ab).max(0.0).sqrt())
}

fn canonical_le(a: &Tensor, b: &Tensor) -> bool {
    let by_len = a.rows().cmp(&b.rows());
    let ord = by_len.then_with(|| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    ord.is_le()
}

/// Mean absolute off-diagonal Pearson correlation, averaged over classes
/// with at least two samples.
pub fn class_conditional_decorrelation(sources: &Tensor, labels: &[usize]) -> Result<f64> {
    if sources.rows() != labels.len() {
        return usage(format!("{} source rows for {} labels", sources.rows(), labels.len()));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); classes];
    labels.iter().enumerate().for_each(|(i, &y)| groups[y].push(i));
    let values: Vec<f64> = groups
        .iter()
        .filter(|g| g.len() >= 2)
        .map(|g| mean_abs_off_diagonal(&sources.select_rows(g)))
        .collect();
    if values.is_empty() {
        return usage("no class has two or more samples");
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

fn mean_abs_off_diagonal(x: &Tensor) -> f64 {
    let (n, d) = x.dims();
    if d < 2 {
        return 0.0;
    }
    let (mean, std) = crate::augment::column_moments(x);
    if std.iter().any(|&s| s == 0.0) {
        log::warn!("zero-variance source coordinate; its correlations count as 0");
    }
    let mut total = 0.0;
    for a in 0..d {
        for b in (a + 1)..d {
            if std[a] == 0.0 || std[b] == 0.0 {
                continue;
            }
            let cov: f64 = (0..n).map(|i| (x.get(i, a) - mean[a]) * (x.get(i, b) - mean[b])).sum::<f64>() / n as f64;
            total += (cov / (std[a] * std[b])).abs();
        }
    }
    total / (d * (d - 1) / 2) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn perfect_predictor() {
        let labels = [0, 1, 2, 1, 0, 2];
        let mut logits = Tensor::zeros(&[6, 3]);
        labels.iter().enumerate().for_each(|(i, &y)| logits.set(i, y, 10.0));
        let r = classification_metrics(&logits, &labels).unwrap();
        assert_eq!(r.top1, 1.0);
        assert_eq!(r.f1_per_class, vec![1.0; 3]);
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.per_class_accuracy, vec![1.0; 3]);
    }

    #[test]
    fn uniform_logits_give_log_m() {
        let m = 1000;
        let labels: Vec<usize> = (0..m).collect();
        let r = classification_metrics(&Tensor::zeros(&[m, m]), &labels).unwrap();
        assert_relative_eq!(r.nll, (m as f64).ln(), epsilon = 1e-12);
        assert_relative_eq!(r.nll, 6.9078, epsilon = 1e-4);
        assert_relative_eq!(r.top1, 1.0 / m as f64);
        assert_relative_eq!(r.top5, 5.0 / m as f64);
    }

    #[test]
    fn empty_set_is_rejected() {
        assert!(classification_metrics(&Tensor::zeros(&[0, 3]), &[]).is_err());
    }

    #[test]
    fn f1_hand_example() {
        // predictions: 0,0,1,1 ; truth: 0,1,1,1
        let logits = Tensor::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]).unwrap();
        let r = classification_metrics(&logits, &[0, 1, 1, 1]).unwrap();
        assert_relative_eq!(r.f1_per_class[0], 2.0 / 3.0);
        assert_relative_eq!(r.f1_per_class[1], 0.8);
        assert_relative_eq!(r.top1, 0.75);
    }

    proptest! {
        #[test]
        fn top5_dominates_top1(data in prop::collection::vec(-5.0f64..5.0, 8 * 12), seed in 0usize..12) {
            let logits = Tensor::matrix(8, 12, data).unwrap();
            let labels: Vec<usize> = (0..8).map(|i| (i * 7 + seed) % 12).collect();
            let r = classification_metrics(&logits, &labels).unwrap();
            prop_assert!(r.top5 >= r.top1);
            prop_assert!(r.nll >= 0.0);
            prop_assert!(r.f1_per_class.iter().all(|f| (0.0..=1.0).contains(f)));
        }

        #[test]
        fn mmd_is_symmetric_and_non_negative(a in prop::collection::vec(-3.0f64..3.0, 2..40), b in prop::collection::vec(-3.0f64..3.0, 2..40)) {
            let ta = Tensor::matrix(a.len() / 2, 2, a[..a.len() / 2 * 2].to_vec()).unwrap();
            let tb = Tensor::matrix(b.len() / 2, 2, b[..b.len() / 2 * 2].to_vec()).unwrap();
            let ab = mmd(&ta, &tb, MmdConfig::default()).unwrap();
            let ba = mmd(&tb, &ta, MmdConfig::default()).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, ba);
            prop_assert_eq!(mmd(&ta, &ta, MmdConfig::default()).unwrap(), 0.0);
        }
    }

    #[test]
    fn mmd_singletons() {
        let a = Tensor::from_rows(&[[0.0]]).unwrap();
        let b = Tensor::from_rows(&[[1.0]]).unwrap();
        let v = mmd(&a, &b, MmdConfig::default()).unwrap();
        assert_relative_eq!(v, (2.0 - 2.0 * (-2.0f64).exp()).sqrt(), epsilon = 1e-15);
        assert_relative_eq!(v, 1.3150, epsilon = 1e-4);
        assert!(mmd(&a, &Tensor::zeros(&[1, 2]), MmdConfig::default()).is_err());
    }

    #[test]
    fn decorrelation_examples() {
        let x = Tensor::from_rows(&[[1.0, 2.0], [2.0, 4.0], [3.0, 6.0], [4.0, 8.0]]).unwrap();
        assert_relative_eq!(class_conditional_decorrelation(&x, &[0; 4]).unwrap(), 1.0, epsilon = 1e-12);

        let mut rng = Rng::seed_from_u64(1);
        let n = 10_000;
        let data = (0..n * 3).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = Tensor::matrix(n, 3, data).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let base = class_conditional_decorrelation(&x, &labels).unwrap();
        assert!(base < 0.05);

        let scaled = Tensor::matrix(n, 3, (0..n * 3).map(|k| x.data()[k] * [3.0, -0.5, 7.0][k % 3] + 2.0).collect()).unwrap();
        assert_relative_eq!(class_conditional_decorrelation(&scaled, &labels).unwrap(), base, epsilon = 1e-12);
    }

    #[test]
    fn constant_coordinate_counts_as_uncorrelated() {
        let x = Tensor::from_rows(&[[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]).unwrap();
        assert_eq!(class_conditional_decorrelation(&x, &[0, 0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn report_json_keys_are_stable() {
        let r = MetricsReport::default();
        let v = serde_json::to_value(&r).unwrap();
        for key in ["nll", "top1", "top5", "f1_per_class", "macro_f1", "decorrelation_trace", "mmd"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}
