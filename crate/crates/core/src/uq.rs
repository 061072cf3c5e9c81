//! Conditional simulation, ensemble summaries, cross-validation folds and
//! prediction-interval metrics.

use std::collections::BTreeMap;

use faer::Mat;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{ensure, Error, Result};
use crate::geometry::Point;
use crate::lattice::evaluate_basis;
use crate::likelihood::{CovParams, FittedModel, Targets};
use crate::rng::{stream_rng, Purpose};
use crate::sar::build_sar;
use crate::sim::factor_sar;
use crate::sparse::{CsrMatrix, SparseLu};

const DRAW_BLOCK: usize = 32;

/// Draws from the conditional law of the latent field at a set of targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalEnsemble {
    pub targets: Vec<Point>,
    /// `draws[k][t]`: draw `k` at target `t`.
    pub draws: Vec<Vec<f64>>,
    /// Covariance parameters of the model the draws condition on.
    pub cov: CovParams,
    pub beta: Vec<f64>,
    pub seed: u64,
    pub metadata: BTreeMap<String, String>,
}

impl ConditionalEnsemble {
    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    pub fn n_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (k, d) in self.draws.iter().enumerate() {
            ensure!(d.len() == self.targets.len(), "draw {k} has wrong length");
            if let Some(t) = d.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("draw {k} is non-finite at target {t}")));
            }
        }
        Ok(())
    }
}

/// Shared, immutable state for residual-correction draws from one model.
struct Conditioner<'a> {
    model: &'a FittedModel,
    lu: SparseLu,
    phi_t: CsrMatrix,
    /// Kriging mean at the targets.
    base: Vec<f64>,
    seed: u64,
}

impl<'a> Conditioner<'a> {
    fn new(model: &'a FittedModel, targets: &Targets, seed: u64) -> Result<Self> {
        ensure!(
            targets.points.iter().all(|p| p.is_finite()),
            "target locations must be finite"
        );
        let b = build_sar(model.lattice(), &model.cov().params)?;
        let lu = factor_sar(&b)?;
        let phi_t = evaluate_basis(model.lattice(), model.basis(), &targets.points)?.into_matrix();
        let fixed = model.fixed_effect(targets)?;
        let latent = phi_t.mul_vec(model.coef_mean());
        let base = fixed.iter().zip(&latent).map(|(a, b)| a + b).collect();
        Ok(Conditioner {
            model,
            lu,
            phi_t,
            base,
            seed,
        })
    }

    /// Target values of draws `start..start + len` as an `n_targets × len`
    /// matrix.
    fn block(&self, start: usize, len: usize) -> Mat<f64> {
        let cov = self.model.cov();
        let sigma = cov.sigma2.sqrt();
        let tau = cov.tau2.sqrt();
        let mf = self.model.marginal();
        let m = self.lu.dim();
        let n = mf.n();
        let mut coef = Mat::<f64>::zeros(m, len);
        let mut eps = Mat::<f64>::zeros(n, len);
        for j in 0..len {
            let mut rng = stream_rng(self.seed, Purpose::Conditional, (start + j) as u64, 0);
            for i in 0..m {
                coef[(i, j)] = sigma * rng.sample::<f64, _>(StandardNormal);
            }
            for i in 0..n {
                eps[(i, j)] = tau * rng.sample::<f64, _>(StandardNormal);
            }
        }
        self.lu.solve_in_place(coef.as_mut());
        let mut synth = mf.phi().mul_mat(&coef);
        synth += &eps;
        let kriged = mf.coef_mean(&synth);
        let diff = &coef - &kriged;
        let mut out = self.phi_t.mul_mat(&diff);
        for j in 0..len {
            for t in 0..out.nrows() {
                out[(t, j)] += self.base[t];
            }
        }
        out
    }
}

fn check_block(block: &Mat<f64>, start: usize) -> Result<()> {
    for j in 0..block.ncols() {
        for t in 0..block.nrows() {
            if !block[(t, j)].is_finite() {
                return Err(Error::Numerical(format!(
                    "conditional draw {} is non-finite at target {t}",
                    start + j
                )));
            }
        }
    }
    Ok(())
}

/// Residual-correction conditional simulation: for each draw an
/// unconditional coefficient vector and synthetic measurement noise are
/// kriged, and the kriging error is added to the kriging mean. Draw `k`
/// depends only on `(seed, k)`.
pub fn conditional_simulate(
    model: &FittedModel,
    targets: &Targets,
    n_draws: usize,
    seed: u64,
) -> Result<ConditionalEnsemble> {
    ensure!(n_draws >= 1, "n_draws must be at least 1");
    let cond = Conditioner::new(model, targets, seed)?;
    let starts: Vec<usize> = (0..n_draws).step_by(DRAW_BLOCK).collect();
    let blocks: Vec<(usize, Mat<f64>)> = starts
        .par_iter()
        .map(|&s| (s, cond.block(s, DRAW_BLOCK.min(n_draws - s))))
        .collect();
    let mut draws = Vec::with_capacity(n_draws);
    for (s, blk) in &blocks {
        check_block(blk, *s)?;
        for j in 0..blk.ncols() {
            draws.push(blk.col(j).iter().copied().collect());
        }
    }
    Ok(ConditionalEnsemble {
        targets: targets.points.clone(),
        draws,
        cov: model.cov().clone(),
        beta: model.beta().to_vec(),
        seed,
        metadata: draw_metadata(seed, n_draws),
    })
}

fn draw_metadata(seed: u64, n_draws: usize) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("scheme".into(), "residual-correction".into()),
        ("seed".into(), seed.to_string()),
        ("n_draws".into(), n_draws.to_string()),
        // runs sharing a seed reuse draws 0..n; any overlap is visible here
        ("draw_streams".into(), format!("conditional:{seed}:0..{n_draws}")),
    ])
}

/// Per-target mean and standard deviation of conditional draws, without
/// storing the ensemble. Identical to `summarize_uncertainty` of
/// `conditional_simulate` up to summation order.
pub fn conditional_summary(
    model: &FittedModel,
    targets: &Targets,
    n_draws: usize,
    seed: u64,
) -> Result<UncertaintySummary> {
    ensure!(n_draws >= 2, "a summary needs at least 2 draws");
    let cond = Conditioner::new(model, targets, seed)?;
    let nt = targets.points.len();
    let starts: Vec<usize> = (0..n_draws).step_by(DRAW_BLOCK).collect();
    let group = rayon::current_num_threads().max(1) * 2;
    let mut acc = Moments::new(nt);
    for chunk in starts.chunks(group) {
        let parts: Vec<Result<Moments>> = chunk
            .par_iter()
            .map(|&s| {
                let blk = cond.block(s, DRAW_BLOCK.min(n_draws - s));
                check_block(&blk, s)?;
                Ok(Moments::from_block(&blk))
            })
            .collect();
        for p in parts {
            acc.merge(&p?);
        }
    }
    Ok(acc.finish())
}

/// Per-target count, mean and sum of squared deviations.
struct Moments {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(nt: usize) -> Self {
        Moments {
            n: 0.0,
            mean: vec![0.0; nt],
            m2: vec![0.0; nt],
        }
    }

    fn from_block(blk: &Mat<f64>) -> Self {
        let len = blk.ncols() as f64;
        let mut mean = vec![0.0; blk.nrows()];
        let mut m2 = vec![0.0; blk.nrows()];
        for t in 0..blk.nrows() {
            let mu = (0..blk.ncols()).map(|j| blk[(t, j)]).sum::<f64>() / len;
            mean[t] = mu;
            m2[t] = (0..blk.ncols()).map(|j| (blk[(t, j)] - mu).powi(2)).sum();
        }
        Moments { n: len, mean, m2 }
    }

    fn merge(&mut self, other: &Moments) {
        let n = self.n + other.n;
        for t in 0..self.mean.len() {
            let delta = other.mean[t] - self.mean[t];
            self.mean[t] += delta * other.n / n;
            self.m2[t] += other.m2[t] + delta * delta * self.n * other.n / n;
        }
        self.n = n;
    }

    fn finish(self) -> UncertaintySummary {
        let denom = self.n - 1.0;
        UncertaintySummary {
            sd: self.m2.iter().map(|v| (v / denom).max(0.0).sqrt()).collect(),
            mean: self.mean,
            n_draws: self.n as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySummary {
    pub mean: Vec<f64>,
    /// Sample standard deviation (denominator `n − 1`).
    pub sd: Vec<f64>,
    pub n_draws: usize,
}

/// Per-target mean and sample standard deviation of an ensemble.
pub fn summarize_uncertainty(ens: &ConditionalEnsemble) -> Result<UncertaintySummary> {
    ensure!(ens.n_draws() >= 2, "a summary needs at least 2 draws");
    let nt = ens.n_targets();
    let mut acc = Moments::new(nt);
    for d in &ens.draws {
        ensure!(d.len() == nt, "draw length does not match the targets");
        let blk = Mat::from_fn(nt, 1, |t, _| d[t]);
        acc.merge(&Moments::from_block(&blk));
    }
    Ok(acc.finish())
}

/// Empirical central interval of each target's draws (linear interpolation
/// between order statistics).
pub fn ensemble_intervals(ens: &ConditionalEnsemble, level: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    check_level(level)?;
    ensure!(ens.n_draws() >= 2, "intervals need at least 2 draws");
    let lo_p = 0.5 * (1.0 - level);
    let hi_p = 1.0 - lo_p;
    Ok((0..ens.n_targets())
        .into_par_iter()
        .map(|t| {
            let mut v: Vec<f64> = ens.draws.iter().map(|d| d[t]).collect();
            v.sort_by(f64::total_cmp);
            (quantile_sorted(&v, lo_p), quantile_sorted(&v, hi_p))
        })
        .unzip())
}

fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let h = p * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    /// Fold id of each observation.
    pub fold: Vec<usize>,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.fold {
            s[f] += 1;
        }
        s
    }

    pub fn test_indices(&self, f: usize) -> Vec<usize> {
        (0..self.fold.len()).filter(|&i| self.fold[i] == f).collect()
    }

    pub fn train_indices(&self, f: usize) -> Vec<usize> {
        (0..self.fold.len()).filter(|&i| self.fold[i] != f).collect()
    }
}

/// Random partition of `0..n` into `k` folds whose sizes differ by at most 1.
pub fn kfold_assign(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    ensure!(k >= 1, "k must be at least 1");
    ensure!(k <= n, "cannot split {n} observations into {k} folds");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Purpose::Folds, 0, 0));
    let mut fold = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        fold[i] = rank % k;
    }
    Ok(FoldAssignment { k, fold, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UQMetrics {
    pub rmse: f64,
    pub picp: f64,
    pub mpiw: f64,
    pub n: usize,
    pub level: f64,
}

fn check_level(level: f64) -> Result<()> {
    ensure!(level > 0.0 && level < 1.0, "level must lie in (0, 1) (got {level})");
    Ok(())
}

/// Two-sided standard normal quantile for coverage `level`.
pub fn normal_quantile(level: f64) -> Result<f64> {
    check_level(level)?;
    let std = Normal::standard();
    Ok(std.inverse_cdf(0.5 + 0.5 * level))
}

/// RMSE, and coverage and mean width of the intervals `mean ± z·se`.
pub fn compute_metrics(mean: &[f64], se: &[f64], truth: &[f64], level: f64) -> Result<UQMetrics> {
    ensure!(
        mean.len() == se.len() && mean.len() == truth.len(),
        "metric inputs differ in length ({}, {}, {})",
        mean.len(),
        se.len(),
        truth.len()
    );
    ensure!(se.iter().all(|&s| s >= 0.0), "standard errors must be non-negative");
    let z = normal_quantile(level)?;
    let lower: Vec<f64> = mean.iter().zip(se).map(|(m, s)| m - z * s).collect();
    let upper: Vec<f64> = mean.iter().zip(se).map(|(m, s)| m + z * s).collect();
    compute_metrics_intervals(mean, &lower, &upper, truth, level)
}

/// Metrics for arbitrary intervals `[lower, upper]`.
pub fn compute_metrics_intervals(
    mean: &[f64],
    lower: &[f64],
    upper: &[f64],
    truth: &[f64],
    level: f64,
) -> Result<UQMetrics> {
    check_level(level)?;
    let n = truth.len();
    ensure!(n > 0, "metrics need at least one prediction");
    ensure!(
        mean.len() == n && lower.len() == n && upper.len() == n,
        "metric inputs differ in length"
    );
    let mse = mean.iter().zip(truth).map(|(m, t)| (m - t).powi(2)).sum::<f64>() / n as f64;
    let covered = (0..n)
        .filter(|&i| lower[i] <= truth[i] && truth[i] <= upper[i])
        .count();
    let mpiw = lower.iter().zip(upper).map(|(l, u)| u - l).sum::<f64>() / n as f64;
    Ok(UQMetrics {
        rmse: mse.sqrt(),
        picp: covered as f64 / n as f64,
        mpiw,
        n,
        level,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Bounds;
    use crate::lattice::{BasisSpec, LatticeGrid};
    use crate::likelihood::ObservationSet;

    fn ens(draws: Vec<Vec<f64>>) -> ConditionalEnsemble {
        let nt = draws[0].len();
        ConditionalEnsemble {
            targets: vec![Point::new(0.0, 0.0); nt],
            draws,
            cov: CovParams::stationary(1, 1.0, 1.0, 0.0).unwrap(),
            beta: vec![],
            seed: 0,
            metadata: BTreeMap::new(),
        }
    }

    #[test]
    fn summaries() {
        let s = summarize_uncertainty(&ens(vec![vec![0.0, 5.0], vec![2.0, 5.0]])).unwrap();
        assert_eq!(s.mean, vec![1.0, 5.0]);
        assert!((s.sd[0] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.sd[1], 0.0);
        assert!(summarize_uncertainty(&ens(vec![vec![1.0]])).is_err());
        let (lo, hi) = ensemble_intervals(&ens((0..=100).map(|v| vec![v as f64]).collect()), 0.9).unwrap();
        assert!((lo[0] - 5.0).abs() < 1e-12 && (hi[0] - 95.0).abs() < 1e-12);
    }

    #[test]
    fn folds() {
        let f = kfold_assign(10, 10, 1).unwrap();
        assert!(f.sizes().iter().all(|&s| s == 1));
        let f = kfold_assign(23, 10, 5).unwrap();
        let mut sizes = f.sizes();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![3, 3, 3, 2, 2, 2, 2, 2, 2, 2]);
        assert_eq!(f, kfold_assign(23, 10, 5).unwrap());
        assert_ne!(f.fold, kfold_assign(23, 10, 6).unwrap().fold);
        let mut all: Vec<usize> = (0..10).flat_map(|k| f.test_indices(k)).collect();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert_eq!(f.train_indices(0).len() + f.test_indices(0).len(), 23);
        assert!(kfold_assign(3, 4, 0).is_err());
    }

    #[test]
    fn metrics() {
        let m = compute_metrics(&[1.0, 2.0], &[0.0, 0.0], &[1.0, 4.0], 0.95).unwrap();
        assert!((m.rmse - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(m.picp, 0.5);
        assert_eq!(m.mpiw, 0.0);
        let m = compute_metrics(&[1.0, 2.0], &[1.0, 1.0], &[1.5, 2.5], 0.95).unwrap();
        assert_eq!(m.picp, 1.0);
        assert!((m.mpiw - 2.0 * 1.959_963_984_540_054).abs() < 1e-9);
        assert!(compute_metrics(&[], &[], &[], 0.95).is_err());
        assert!(compute_metrics(&[1.0], &[-1.0], &[1.0], 0.95).is_err());
    }

    fn small_model(tau2: f64) -> FittedModel {
        let lat = LatticeGrid::build(Bounds::new(0.0, 1.0, 0.0, 1.0), 8, 8, 1).unwrap();
        let locs: Vec<Point> = (0..12)
            .map(|i| Point::new(0.05 + 0.08 * i as f64, 0.9 - 0.07 * i as f64))
            .collect();
        let vals: Vec<f64> = locs.iter().map(|p| (3.0 * p.x).sin() + p.y).collect();
        let obs = ObservationSet::intercept_only("d", locs, vals).unwrap();
        let cov = CovParams::stationary(lat.len(), 0.3, 1.5, tau2).unwrap();
        FittedModel::fit(&obs, cov, &lat, &BasisSpec::default()).unwrap()
    }

    #[test]
    fn exact_at_observations_without_nugget() {
        let model = small_model(0.0);
        let t = Targets::points(model.locations().to_vec());
        let e = conditional_simulate(&model, &t, 40, 3).unwrap();
        for d in &e.draws {
            for (a, b) in d.iter().zip(model.values()) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn streaming_summary_matches_stored_draws() {
        let model = small_model(0.1);
        let t = Targets::points(vec![Point::new(0.3, 0.3), Point::new(0.8, 0.2)]);
        let e = conditional_simulate(&model, &t, 100, 9).unwrap();
        let a = summarize_uncertainty(&e).unwrap();
        let b = conditional_summary(&model, &t, 100, 9).unwrap();
        for i in 0..2 {
            assert!((a.mean[i] - b.mean[i]).abs() < 1e-12);
            assert!((a.sd[i] - b.sd[i]).abs() < 1e-12);
        }
        let prefix = conditional_simulate(&model, &t, 37, 9).unwrap();
        assert_eq!(prefix.draws[..], e.draws[..37]);
    }
}
