//! Monte-Carlo check that permutation augmentation leaves the minority
//! risk unbiased when the de-mixer is exact.

use crate::augment::{permute_augment, SourceSet};
use crate::data::{mix, unmix, ToySpec};
use crate::error::{config, Result};
use crate::rng::{derive_seed, indexed_stream, label_id};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiskEstimate {
    pub mean: f64,
    /// Standard error of `mean` (sample std over `sqrt(trials)`).
    pub std_error: f64,
    pub trials: usize,
}

impl RiskEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Self { mean, std_error: (var / n).sqrt(), trials: xs.len() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnbiasednessReport {
    /// Risk over freshly drawn minority pools.
    pub plain: RiskEstimate,
    /// Risk over permutation-augmented copies of fresh pools.
    pub augmented: RiskEstimate,
}

impl UnbiasednessReport {
    /// `|augmented - plain|` in units of the plain standard error.
    pub fn gap_in_std_errors(&self) -> f64 {
        (self.augmented.mean - self.plain.mean).abs() / self.plain.std_error
    }
}

/// Draws minority pools from a toy generator, mixes them and de-mixes them
/// with the exact inverse map. Each trial scores one pool as drawn and a
/// column-wise permutation of the same pool, so the two means differ only
/// by the augmentation.
#[derive(Clone, Debug)]
pub struct UnbiasednessCheck {
    pub spec: ToySpec,
    pub class: usize,
    pub pool_size: usize,
    pub trials: usize,
    pub seed: u64,
}

impl UnbiasednessCheck {
    fn pool(&self, trial: usize) -> Result<Tensor> {
        let mut counts = vec![0; self.spec.classes()];
        counts[self.class] = self.pool_size;
        let spec = self.spec.clone().with_counts(counts);
        let seed = derive_seed(self.seed, &[label_id("unbiased.pool"), trial as u64]);
        let (sources, _) = spec.sample_sources(seed, "pool")?;
        Ok(unmix(&mix(&sources, spec.mixing), spec.mixing))
    }

    /// `risk` maps a pool of sources to the mean loss of a fixed predictor.
    pub fn run(&self, mut risk: impl FnMut(&Tensor) -> Result<f64>) -> Result<UnbiasednessReport> {
        if self.class >= self.spec.classes() || self.pool_size == 0 || self.trials < 2 {
            return config("unbiasedness check needs a valid class, a non-empty pool and two or more trials");
        }
        let mut plain = Vec::with_capacity(self.trials);
        let mut augmented = Vec::with_capacity(self.trials);
        for t in 0..self.trials {
            let set = SourceSet::new(self.class, self.pool(t)?, "ground-truth");
            plain.push(risk(&set.sources)?);
            let mut rng = indexed_stream(self.seed, "unbiased.permute", t as u64);
            augmented.push(risk(&permute_augment(&set, self.pool_size, true, &mut rng)?)?);
        }
        Ok(UnbiasednessReport {
            plain: RiskEstimate::from_samples(&plain),
            augmented: RiskEstimate::from_samples(&augmented),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn risk_estimate_moments() {
        let r = RiskEstimate::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(r.mean, 2.5);
        assert!((r.std_error - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn mean_of_a_linear_risk_matches() {
        // For a risk linear in each coordinate, permutation preserves the pool mean exactly in expectation.
        let check = UnbiasednessCheck { spec: ToySpec::seven_class(), class: 3, pool_size: 10, trials: 100, seed: 5 };
        let rep = check
            .run(|s| Ok((0..s.rows()).map(|i| s.get(i, 0) + 2.0 * s.get(i, 1)).sum::<f64>() / s.rows() as f64))
            .unwrap();
        assert!(rep.gap_in_std_errors() < 3.0, "{rep:?}");
        assert!((rep.plain.mean - 7.0).abs() < 4.0 * rep.plain.std_error, "{rep:?}");
    }
}
