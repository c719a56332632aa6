//! Synthetic minority samples generated in source space.
//!
//! Nonparametric augmentation recombines coordinates of real sources drawn
//! independently per dimension; parametric augmentation samples a diagonal
//! Gaussian fitted to the class (or its learned prior).

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, usage, Error, Result};
use crate::flow::{MafFlow, SourcePrior};
use crate::rng::{indexed_stream, Rng};
use crate::tensor::{ParamStore, Tensor};

/// Sources of one class, tagged with the checkpoint that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceSet {
    pub class: usize,
    pub sources: Tensor,
    pub checkpoint: String,
}

impl SourceSet {
    pub fn new(class: usize, sources: Tensor, checkpoint: impl Into<String>) -> Self {
        Self { class, sources, checkpoint: checkpoint.into() }
    }

    pub fn len(&self) -> usize {
        self.sources.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.sources.cols()
    }

    /// Fails unless the set was produced by `checkpoint`.
    pub fn verify(&self, checkpoint: &str) -> Result<()> {
        if self.checkpoint == checkpoint {
            Ok(())
        } else {
            Err(Error::Integrity(format!(
                "source set for class {} came from checkpoint {}, expected {checkpoint}",
                self.class, self.checkpoint
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentMode {
    #[default]
    Nonparametric,
    Parametric,
    Oracle,
    FeatureSpace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub mode: AugmentMode,
    /// Synthetic samples per augmented class.
    pub count: usize,
    pub seed: u64,
    /// Minimum per-dimension std for parametric sampling.
    #[serde(default = "default_eps_sigma")]
    pub eps_sigma: f64,
    /// Draw coordinate indices as permutations instead of i.i.d.
    #[serde(default)]
    pub without_replacement: bool,
}

fn default_eps_sigma() -> f64 {
    1e-4
}

impl Default for AugmentPlan {
    fn default() -> Self {
        Self {
            mode: AugmentMode::Nonparametric,
            count: 0,
            seed: 0,
            eps_sigma: default_eps_sigma(),
            without_replacement: false,
        }
    }
}

/// Optional resources some modes need.
#[derive(Clone, Copy, Default)]
pub struct AugmentContext<'a> {
    /// Large class-conditional pool for oracle augmentation.
    pub holdout: Option<&'a SourceSet>,
    /// Flow for feature-space augmentation.
    pub flow: Option<(&'a MafFlow, &'a ParamStore)>,
    /// Learned class prior; parametric sampling uses it when present.
    pub prior: Option<(&'a SourcePrior, &'a ParamStore)>,
}

impl AugmentPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_sigma > 0.0) {
            return config(format!("eps_sigma must be positive, got {}", self.eps_sigma));
        }
        Ok(())
    }

    /// Synthetic rows for `set.class`, seeded by `(seed, class)`.
    pub fn generate(&self, set: &SourceSet, ctx: AugmentContext<'_>) -> Result<Tensor> {
        self.validate()?;
        let mut rng = indexed_stream(self.seed, "augment", set.class as u64);
        match self.mode {
            AugmentMode::Nonparametric => permute_augment(set, self.count, self.without_replacement, &mut rng),
            AugmentMode::Parametric => match ctx.prior {
                Some((prior, store)) => prior.sample(store, set.class, self.count, &mut rng),
                None => parametric_augment(set, self.count, self.eps_sigma, &mut rng),
            },
            AugmentMode::Oracle => {
                let Some(pool) = ctx.holdout else {
                    return usage("oracle augmentation requires a holdout pool");
                };
                if pool.class != set.class {
                    return usage(format!("holdout pool is class {}, expected {}", pool.class, set.class));
                }
                oracle_augment(pool, self.count, self.without_replacement, &mut rng)
            }
            AugmentMode::FeatureSpace => {
                let Some((flow, store)) = ctx.flow else {
                    return usage("feature-space augmentation requires a flow");
                };
                feature_space_augment(flow, store, set, self.count, self.without_replacement, &mut rng)
            }
        }
    }
}

/// Row `o` of the output takes coordinate `a` from real row `idx[a][o]`.
pub fn permute_augment(set: &SourceSet, count: usize, without_replacement: bool, rng: &mut Rng) -> Result<Tensor> {
    let n = set.len();
    if n == 0 {
        return usage(format!("cannot augment empty source set for class {}", set.class));
    }
    let d = set.dim();
    let columns: Vec<Vec<usize>> = (0..d)
        .map(|_| {
            if without_replacement {
                let mut out = Vec::with_capacity(count);
                let mut perm: Vec<usize> = (0..n).collect();
                while out.len() < count {
                    perm.shuffle(rng);
                    out.extend(perm.iter().take(count - out.len()));
                }
                out
            } else {
                (0..count).map(|_| rng.random_range(0..n)).collect()
            }
        })
        .collect();
    let mut data = Vec::with_capacity(count * d);
    for o in 0..count {
        data.extend((0..d).map(|a| set.sources.get(columns[a][o], a)));
    }
    Tensor::matrix(count, d, data)
}

/// Per-dimension Gaussian with the pool's mean and (floored) std.
pub fn parametric_augment(set: &SourceSet, count: usize, eps_sigma: f64, rng: &mut Rng) -> Result<Tensor> {
    let n = set.len();
    if n == 0 {
        return usage(format!("cannot augment empty source set for class {}", set.class));
    }
    let d = set.dim();
    let (mean, std) = column_moments(&set.sources);
    let std: Vec<f64> = std.into_iter().map(|s| s.max(eps_sigma)).collect();
    let data = (0..count * d)
        .map(|k| {
            let e: f64 = StandardNormal.sample(rng);
            mean[k % d] + std[k % d] * e
        })
        .collect();
    Tensor::matrix(count, d, data)
}

/// Population mean and std of each column.
pub fn column_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = x.dims();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for (a, v) in x.row(i).iter().enumerate() {
            var[a] += (v - mean[a]).powi(2);
        }
    }
    let std = var.into_iter().map(|v| (v / n.max(1) as f64).sqrt()).collect();
    (mean, std)
}

/// Nonparametric augmentation over a large held-out pool.
pub fn oracle_augment(holdout: &SourceSet, count: usize, without_replacement: bool, rng: &mut Rng) -> Result<Tensor> {
    permute_augment(holdout, count, without_replacement, rng)
}

/// Features `f^{-1}(s~)` of nonparametric synthetic sources.
pub fn feature_space_augment(
    flow: &MafFlow,
    store: &ParamStore,
    set: &SourceSet,
    count: usize,
    without_replacement: bool,
    rng: &mut Rng,
) -> Result<Tensor> {
    let synthetic = permute_augment(set, count, without_replacement, rng)?;
    flow.inverse(store, &synthetic)
}

/// Per-row max-abs error of `f(f^{-1}(s))` against `s`.
pub fn inversion_discrepancy(flow: &MafFlow, store: &ParamStore, sources: &Tensor) -> Result<Vec<f64>> {
    let z = flow.inverse(store, sources)?;
    let (back, _) = flow.apply(store, &z)?;
    Ok((0..sources.rows())
        .map(|i| back.row(i).iter().zip(sources.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowSpec;
    use rand::SeedableRng;
    use std::collections::BTreeSet;

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    fn set_of(rows: &[[f64; 2]]) -> SourceSet {
        SourceSet::new(0, Tensor::from_rows(rows).unwrap(), "ck")
    }

    fn keys(x: &Tensor) -> BTreeSet<(i64, i64)> {
        (0..x.rows()).map(|i| ((x.get(i, 0) * 1e6) as i64, (x.get(i, 1) * 1e6) as i64)).collect()
    }

    #[test]
    fn single_sample_pool_repeats_itself() {
        let set = set_of(&[[0.3, -1.2]]);
        let out = permute_augment(&set, 50, false, &mut rng(0)).unwrap();
        assert!((0..50).all(|i| out.row(i) == [0.3, -1.2]));
    }

    #[test]
    fn two_point_pool_enumerates_four_outputs() {
        let set = set_of(&[[1.0, 10.0], [2.0, 20.0]]);
        let out = permute_augment(&set, 400, false, &mut rng(1)).unwrap();
        let expected: BTreeSet<_> = [(1.0, 10.0), (1.0, 20.0), (2.0, 10.0), (2.0, 20.0)]
            .iter()
            .map(|&(a, b)| ((a * 1e6) as i64, (b * 1e6) as i64))
            .collect();
        assert_eq!(keys(&out), expected);
    }

    #[test]
    fn empty_pool_is_rejected() {
        let set = SourceSet::new(3, Tensor::zeros(&[0, 2]), "ck");
        assert!(matches!(permute_augment(&set, 5, false, &mut rng(0)), Err(Error::Usage(_))));
        assert!(parametric_augment(&set, 5, 1e-4, &mut rng(0)).is_err());
    }

    fn random_pool(n: usize, d: usize, seed: u64) -> SourceSet {
        let mut r = rng(seed);
        let data = (0..n * d).map(|_| StandardNormal.sample(&mut r)).collect();
        SourceSet::new(1, Tensor::matrix(n, d, data).unwrap(), "ck")
    }

    /// Two-sample KS statistic for a sample against a discrete pool.
    fn ks(sample: &[f64], pool: &[f64]) -> f64 {
        let mut s = sample.to_vec();
        let mut p = pool.to_vec();
        s.sort_by(f64::total_cmp);
        p.sort_by(f64::total_cmp);
        let cdf = |v: &[f64], x: f64| v.partition_point(|&y| y <= x) as f64 / v.len() as f64;
        p.iter().map(|&x| (cdf(&s, x) - cdf(&p, x)).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn marginals_match_pool() {
        let set = random_pool(200, 3, 2);
        for without in [false, true] {
            let out = permute_augment(&set, 10_000, without, &mut rng(3)).unwrap();
            for a in 0..3 {
                let stat = ks(&out.column(a), &set.sources.column(a));
                assert!(stat < 0.05, "coordinate {a}: KS {stat}");
            }
        }
    }

    #[test]
    fn coordinates_come_from_the_pool_column() {
        let set = random_pool(37, 4, 4);
        let out = permute_augment(&set, 2000, false, &mut rng(5)).unwrap();
        for a in 0..4 {
            let col = set.sources.column(a);
            assert!(out.column(a).iter().all(|v| col.contains(v)));
        }
    }

    #[test]
    fn small_pools_fill_the_coordinate_grid() {
        let mut r = rng(6);
        for n in 1..=10 {
            let set = random_pool(n, 2, 100 + n as u64);
            let out = permute_augment(&set, 4000, false, &mut r).unwrap();
            let grid: BTreeSet<_> = set
                .sources
                .column(0)
                .iter()
                .flat_map(|&x| set.sources.column(1).into_iter().map(move |y| ((x * 1e6) as i64, (y * 1e6) as i64)))
                .collect();
            assert_eq!(keys(&out), grid, "pool size {n}");
        }
    }

    #[test]
    fn without_replacement_uses_each_row_once_per_pass() {
        let set = random_pool(10, 2, 7);
        let out = permute_augment(&set, 10, true, &mut rng(8)).unwrap();
        for a in 0..2 {
            let mut got = out.column(a);
            let mut want = set.sources.column(a);
            got.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn parametric_moments_match_pool() {
        let set = random_pool(500, 2, 9);
        let out = parametric_augment(&set, 100_000, 1e-4, &mut rng(10)).unwrap();
        let (pm, ps) = column_moments(&set.sources);
        let (sm, ss) = column_moments(&out);
        for a in 0..2 {
            assert!((sm[a] - pm[a]).abs() < 0.01 * ps[a], "mean {a}");
            assert!((ss[a] / ps[a] - 1.0).abs() < 0.01, "std {a}");
        }
    }

    #[test]
    fn degenerate_pool_uses_std_floor() {
        let set = set_of(&[[1.5, -2.0], [1.5, -2.0], [1.5, -2.0]]);
        let out = parametric_augment(&set, 1000, 1e-4, &mut rng(11)).unwrap();
        let (m, s) = column_moments(&out);
        assert!((m[0] - 1.5).abs() < 1e-5 && (m[1] + 2.0).abs() < 1e-5);
        assert!(s.iter().all(|&v| (v / 1e-4 - 1.0).abs() < 0.1));
    }

    #[test]
    fn plans_are_deterministic_per_seed() {
        let set = random_pool(20, 2, 12);
        for mode in [AugmentMode::Nonparametric, AugmentMode::Parametric] {
            let plan = AugmentPlan { mode, count: 64, seed: 99, ..AugmentPlan::default() };
            let a = plan.generate(&set, AugmentContext::default()).unwrap();
            let b = plan.generate(&set, AugmentContext::default()).unwrap();
            assert_eq!(a, b);
            let other = AugmentPlan { seed: 100, ..plan.clone() }.generate(&set, AugmentContext::default()).unwrap();
            assert_ne!(a, other);
        }
    }

    #[test]
    fn oracle_equals_permutation_on_same_pool() {
        let pool = random_pool(2000, 2, 13);
        let a = oracle_augment(&pool, 300, false, &mut rng(14)).unwrap();
        let b = permute_augment(&pool, 300, false, &mut rng(14)).unwrap();
        assert_eq!(a, b);
        let plan = AugmentPlan { mode: AugmentMode::Oracle, count: 10, ..AugmentPlan::default() };
        assert!(plan.generate(&pool, AugmentContext::default()).is_err());
    }

    #[test]
    fn feature_space_roundtrip() {
        let mut r = rng(15);
        let mut store = ParamStore::new();
        let flow = MafFlow::new(&mut store, "flow", 2, &FlowSpec { blocks: 2, hidden: 8, layers: 2 }, &mut r).unwrap();
        let set = random_pool(50, 2, 16);

        let ident = feature_space_augment(&flow, &store, &set, 100, false, &mut rng(17)).unwrap();
        let plain = permute_augment(&set, 100, false, &mut rng(17)).unwrap();
        assert_eq!(ident, plain);

        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = r.random_range(-0.3..0.3));
        }
        let z = feature_space_augment(&flow, &store, &set, 100, false, &mut rng(17)).unwrap();
        let (s, _) = flow.apply(&store, &z).unwrap();
        assert!(s.max_abs_diff(&plain) < 1e-6);
        assert!(inversion_discrepancy(&flow, &store, &plain).unwrap().iter().all(|&e| e < 1e-6));
    }

    #[test]
    fn source_set_checkpoint_is_verified() {
        let set = set_of(&[[0.0, 0.0]]);
        assert!(set.verify("ck").is_ok());
        assert!(matches!(set.verify("other"), Err(Error::Integrity(_))));
    }
}
