//! Mean regression, the marginal Gaussian likelihood of
//! `Σ = σ²(ΦQ⁻¹Φᵀ + λI)`, stationary maximum likelihood and kriging.
//!
//! With `M = Q + ΦᵀΦ/λ`:
//!
//! ```text
//! Σ⁻¹     = τ⁻²(I − Φ M⁻¹ Φᵀ/λ)
//! log|Σ|  = n log τ² + log|M| − log|Q|
//! ```
//!
//! `λ = 0` (no nugget) switches to a dense path over the observations.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use faer::linalg::solvers::{Solve, SolveLstsq};
use faer::{Mat, Side};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::Point;
use crate::lattice::{evaluate_basis, BasisSpec, LatticeGrid};
use crate::optimize::{coordinate_golden, SearchConfig, SearchResult};
use crate::sar::{build_sar, canonical_theta, precision, ParamFields};
use crate::sim::FieldEnsemble;
use crate::sparse::{CsrMatrix, SparseCholesky, SymMatrix};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const QUAD_BLOCK: usize = 32;

/// One day of point observations with their regression design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub day_id: String,
    pub locations: Vec<Point>,
    pub values: Vec<f64>,
    pub covariate_names: Vec<String>,
    /// Row-major `n × p` design, one row per observation.
    pub covariates: Vec<f64>,
    pub lag_values: Option<Vec<f64>>,
}

impl ObservationSet {
    pub fn new(
        day_id: impl Into<String>,
        locations: Vec<Point>,
        values: Vec<f64>,
        covariate_names: Vec<String>,
        covariates: Vec<f64>,
    ) -> Result<Self> {
        let obs = ObservationSet {
            day_id: day_id.into(),
            locations,
            values,
            covariate_names,
            covariates,
            lag_values: None,
        };
        obs.validate()?;
        Ok(obs)
    }

    /// Observations with no fixed effect (already residualized).
    pub fn residuals(day_id: impl Into<String>, locations: Vec<Point>, values: Vec<f64>) -> Result<Self> {
        Self::new(day_id, locations, values, Vec::new(), Vec::new())
    }

    /// Observations with an intercept-only mean.
    pub fn intercept_only(
        day_id: impl Into<String>,
        locations: Vec<Point>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let n = values.len();
        Self::new(day_id, locations, values, vec!["intercept".into()], vec![1.0; n])
    }

    /// Observations with an intercept, longitude and latitude mean.
    pub fn with_coordinate_trend(
        day_id: impl Into<String>,
        locations: Vec<Point>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let cov = locations.iter().flat_map(|p| [1.0, p.x, p.y]).collect();
        Self::new(
            day_id,
            locations,
            values,
            vec!["intercept".into(), "lon".into(), "lat".into()],
            cov,
        )
    }

    pub fn with_lag(mut self, lag: Vec<f64>) -> Result<Self> {
        self.lag_values = Some(lag);
        self.validate()?;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    /// Number of design columns, including the lag column.
    pub fn p(&self) -> usize {
        self.covariate_names.len() + usize::from(self.lag_values.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.values.len();
        ensure!(n >= 1, "day {}: no observations", self.day_id);
        ensure!(
            self.locations.len() == n,
            "day {}: {} locations for {n} values",
            self.day_id,
            self.locations.len()
        );
        ensure!(
            self.covariates.len() == n * self.covariate_names.len(),
            "day {}: covariate matrix has {} entries, expected {n} x {}",
            self.day_id,
            self.covariates.len(),
            self.covariate_names.len()
        );
        if let Some(lag) = &self.lag_values {
            ensure!(lag.len() == n, "day {}: lag vector has wrong length", self.day_id);
            ensure!(lag.iter().all(|v| v.is_finite()), "day {}: non-finite lag value", self.day_id);
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "day {}: non-finite value at observation {i}",
                self.day_id
            )));
        }
        ensure!(
            self.locations.iter().all(|p| p.is_finite()),
            "day {}: non-finite location",
            self.day_id
        );
        ensure!(
            self.covariates.iter().all(|v| v.is_finite()),
            "day {}: non-finite covariate",
            self.day_id
        );
        ensure!(
            n >= self.p(),
            "day {}: {n} observations cannot identify {} regression coefficients",
            self.day_id,
            self.p()
        );
        Ok(())
    }

    /// Design matrix and column names; the lag column, when present, is last.
    pub fn design(&self) -> (Mat<f64>, Vec<String>) {
        let n = self.n();
        let k = self.covariate_names.len();
        let mut names = self.covariate_names.clone();
        let lag = self.lag_values.as_ref();
        if lag.is_some() {
            names.push("lag".into());
        }
        let x = Mat::from_fn(n, names.len(), |i, j| {
            if j < k {
                self.covariates[i * k + j]
            } else {
                lag.unwrap()[i]
            }
        });
        (x, names)
    }

    /// Averages observations sharing a location. Returns the merged set and
    /// the number of rows folded into earlier ones.
    pub fn deduplicate(&self) -> (ObservationSet, usize) {
        let k = self.covariate_names.len();
        let mut groups: BTreeMap<(u64, u64), usize> = BTreeMap::new();
        let mut order: Vec<Vec<usize>> = Vec::new();
        for (i, p) in self.locations.iter().enumerate() {
            // +0.0 folds -0.0 onto 0.0
            let key = ((p.x + 0.0).to_bits(), (p.y + 0.0).to_bits());
            match groups.get(&key) {
                Some(&g) => order[g].push(i),
                None => {
                    groups.insert(key, order.len());
                    order.push(vec![i]);
                }
            }
        }
        let merged = self.n() - order.len();
        let mean = |idx: &[usize], f: &dyn Fn(usize) -> f64| {
            idx.iter().map(|&i| f(i)).sum::<f64>() / idx.len() as f64
        };
        let out = ObservationSet {
            day_id: self.day_id.clone(),
            locations: order.iter().map(|g| self.locations[g[0]]).collect(),
            values: order.iter().map(|g| mean(g, &|i| self.values[i])).collect(),
            covariate_names: self.covariate_names.clone(),
            covariates: order
                .iter()
                .flat_map(|g| (0..k).map(move |j| (g, j)))
                .map(|(g, j)| mean(g, &|i| self.covariates[i * k + j]))
                .collect(),
            lag_values: self
                .lag_values
                .as_ref()
                .map(|lag| order.iter().map(|g| mean(g, &|i| lag[i])).collect()),
        };
        if merged > 0 {
            log::info!("day {}: averaged {merged} duplicate observations", self.day_id);
        }
        (out, merged)
    }

    /// Observations at the given indices, in that order.
    pub fn subset(&self, idx: &[usize]) -> ObservationSet {
        let k = self.covariate_names.len();
        ObservationSet {
            day_id: self.day_id.clone(),
            locations: idx.iter().map(|&i| self.locations[i]).collect(),
            values: idx.iter().map(|&i| self.values[i]).collect(),
            covariate_names: self.covariate_names.clone(),
            covariates: idx
                .iter()
                .flat_map(|&i| self.covariates[i * k..(i + 1) * k].iter().copied())
                .collect(),
            lag_values: self
                .lag_values
                .as_ref()
                .map(|lag| idx.iter().map(|&i| lag[i]).collect()),
        }
    }

    /// Design rows at the given indices (for prediction at held-out points).
    pub fn design_rows(&self, idx: &[usize]) -> Vec<f64> {
        let (x, _) = self.design();
        idx.iter()
            .flat_map(|&i| (0..x.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| x[(i, j)])
            .collect()
    }
}

/// Ordinary least-squares fit of the mean model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub names: Vec<String>,
    /// Coefficients of the covariate columns (lag excluded).
    pub beta: Vec<f64>,
    /// Lag coefficient, when a lag column was supplied.
    pub alpha: Option<f64>,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
    pub r_squared: f64,
}

/// OLS on the observation design (covariates plus lag column).
pub fn fit_mean_arx1(obs: &ObservationSet) -> Result<RegressionFit> {
    obs.validate()?;
    let (x, names) = obs.design();
    ensure!(!names.is_empty(), "day {}: empty design matrix", obs.day_id);
    check_full_rank(&x, &names)?;
    let n = obs.n();
    let y = Mat::from_fn(n, 1, |i, _| obs.values[i]);
    let coef = x.qr().solve_lstsq(&y);
    let all: Vec<f64> = (0..names.len()).map(|j| coef[(j, 0)]).collect();
    let fitted: Vec<f64> = (0..n)
        .map(|i| (0..names.len()).map(|j| x[(i, j)] * all[j]).sum())
        .collect();
    let residuals: Vec<f64> = obs.values.iter().zip(&fitted).map(|(v, f)| v - f).collect();
    let mean = obs.values.iter().sum::<f64>() / n as f64;
    let sst: f64 = obs.values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let sse: f64 = residuals.iter().map(|r| r * r).sum();
    let r_squared = if sst > 0.0 { 1.0 - sse / sst } else { 1.0 };
    let (beta, alpha) = if obs.lag_values.is_some() {
        (all[..all.len() - 1].to_vec(), Some(all[all.len() - 1]))
    } else {
        (all, None)
    };
    Ok(RegressionFit {
        names,
        beta,
        alpha,
        fitted,
        residuals,
        r_squared,
    })
}

/// Rejects designs whose scaled columns are numerically dependent, naming
/// the columns that a pivoted QR could not place.
pub fn check_full_rank(x: &Mat<f64>, names: &[String]) -> Result<()> {
    let p = x.ncols();
    let mut scaled = x.clone();
    for j in 0..p {
        let norm = (0..x.nrows()).map(|i| x[(i, j)] * x[(i, j)]).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Validation(format!(
                "design column '{}' is identically zero",
                names[j]
            )));
        }
        for i in 0..x.nrows() {
            scaled[(i, j)] /= norm;
        }
    }
    if x.nrows() < p {
        return Err(Error::Validation(format!(
            "design has {} rows for {p} columns",
            x.nrows()
        )));
    }
    let qr = scaled.col_piv_qr();
    let r = qr.R();
    let (fwd, _) = qr.P().arrays();
    let tol = 1e-10 * r[(0, 0)].abs().max(f64::MIN_POSITIVE);
    let rank = (0..p).take_while(|&k| r[(k, k)].abs() > tol).count();
    if rank < p {
        let bad: Vec<&str> = fwd[rank..].iter().map(|&j| names[j].as_str()).collect();
        return Err(Error::Validation(format!(
            "design is rank deficient (rank {rank} of {p}); collinear column(s): {}",
            bad.join(", ")
        )));
    }
    Ok(())
}

/// Covariance parameters: latent SAR fields plus variance scale and nugget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovParams {
    pub params: ParamFields,
    pub sigma2: f64,
    pub tau2: f64,
}

impl CovParams {
    pub fn new(params: ParamFields, sigma2: f64, tau2: f64) -> Result<Self> {
        let c = CovParams {
            params,
            sigma2,
            tau2,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn stationary(m: usize, kappa2: f64, sigma2: f64, tau2: f64) -> Result<Self> {
        Self::new(ParamFields::stationary(m, kappa2), sigma2, tau2)
    }

    /// Builds the pair from `σ²` and `λ = τ²/σ²`.
    pub fn from_lambda(params: ParamFields, sigma2: f64, lambda: f64) -> Result<Self> {
        Self::new(params, sigma2, lambda * sigma2)
    }

    pub fn lambda(&self) -> f64 {
        self.tau2 / self.sigma2
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.sigma2 > 0.0 && self.sigma2.is_finite(),
            "sigma2 must be positive (got {})",
            self.sigma2
        );
        ensure!(
            self.tau2 >= 0.0 && self.tau2.is_finite(),
            "tau2 must be non-negative (got {})",
            self.tau2
        );
        Ok(())
    }
}

/// Factored SAR precision `Q = BᵀB`.
#[derive(Debug, Clone)]
pub struct PrecisionFactor {
    q: SymMatrix,
    chol: SparseCholesky,
    log_det: f64,
}

impl PrecisionFactor {
    pub fn new(lattice: &LatticeGrid, params: &ParamFields) -> Result<Self> {
        let q = precision(&build_sar(lattice, params)?).into_matrix();
        Self::from_matrix(q)
    }

    pub fn from_matrix(q: SymMatrix) -> Result<Self> {
        let chol = SparseCholesky::factor(&q).map_err(|e| diagnose(e, &q, "Q"))?;
        Ok(Self::assemble(q, chol))
    }

    /// Same as [`from_matrix`](Self::from_matrix), reusing `template`'s
    /// symbolic analysis when the pattern matches.
    pub fn refactor(template: &PrecisionFactor, q: SymMatrix) -> Result<Self> {
        let chol = template.chol.refactor(&q).map_err(|e| diagnose(e, &q, "Q"))?;
        Ok(Self::assemble(q, chol))
    }

    fn assemble(q: SymMatrix, chol: SparseCholesky) -> Self {
        let log_det = chol.log_det();
        PrecisionFactor { q, chol, log_det }
    }

    pub fn matrix(&self) -> &SymMatrix {
        &self.q
    }

    pub fn cholesky(&self) -> &SparseCholesky {
        &self.chol
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn dim(&self) -> usize {
        self.q.dim()
    }
}

fn diagnose(e: Error, a: &SymMatrix, what: &str) -> Error {
    match e {
        Error::Numerical(msg) => {
            let d = a.diagonal();
            let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            Error::Numerical(format!(
                "{msg} ({what}: dimension {}, diagonal range [{lo:.3e}, {hi:.3e}], ratio {:.3e})",
                a.dim(),
                hi / lo
            ))
        }
        other => other,
    }
}

#[derive(Debug, Clone)]
enum MarginalKind {
    /// `M = Q + ΦᵀΦ/λ` factored sparsely.
    Sparse { m: SparseCholesky },
    /// `λ = 0`: `K = ΦQ⁻¹Φᵀ` factored densely, with `W = Q⁻¹Φᵀ`.
    Dense {
        q: SparseCholesky,
        w: Mat<f64>,
        k: faer::linalg::solvers::Llt<f64>,
    },
}

/// Factorization of the scale-free marginal covariance `V = ΦQ⁻¹Φᵀ + λI`.
#[derive(Debug, Clone)]
pub struct MarginalFactor {
    phi: CsrMatrix,
    lambda: f64,
    log_det_v: f64,
    kind: MarginalKind,
}

impl MarginalFactor {
    /// `phi_gram` is `ΦᵀΦ` (computed here when absent); `template` lends its
    /// symbolic analysis for `M`.
    pub fn new(
        prec: &PrecisionFactor,
        phi: &CsrMatrix,
        phi_gram: Option<&SymMatrix>,
        lambda: f64,
        template: Option<&MarginalFactor>,
    ) -> Result<Self> {
        ensure!(
            phi.ncols() == prec.dim(),
            "basis has {} columns but the lattice has {} nodes",
            phi.ncols(),
            prec.dim()
        );
        ensure!(lambda >= 0.0 && lambda.is_finite(), "lambda must be non-negative (got {lambda})");
        let n = phi.nrows();
        if lambda > 0.0 {
            let owned;
            let gram = match phi_gram {
                Some(g) => g,
                None => {
                    owned = phi.gram(1.0);
                    &owned
                }
            };
            let m_mat = prec.matrix().add_scaled(gram, 1.0 / lambda);
            let m = match template.map(|t| &t.kind) {
                Some(MarginalKind::Sparse { m }) => m.refactor(&m_mat),
                _ => SparseCholesky::factor(&m_mat),
            }
            .map_err(|e| diagnose(e, &m_mat, &format!("Q + PhiT Phi / lambda, lambda = {lambda:.3e}")))?;
            let log_det_v = n as f64 * lambda.ln() + m.log_det() - prec.log_det();
            Ok(MarginalFactor {
                phi: phi.clone(),
                lambda,
                log_det_v,
                kind: MarginalKind::Sparse { m },
            })
        } else {
            let q = prec.cholesky().clone();
            let w = q.solve_mat(&phi.transpose().to_dense());
            let mut k = phi.mul_mat(&w);
            for i in 0..n {
                for j in 0..i {
                    let s = 0.5 * (k[(i, j)] + k[(j, i)]);
                    k[(i, j)] = s;
                    k[(j, i)] = s;
                }
            }
            let kdiag: Vec<f64> = (0..n).map(|i| k[(i, i)]).collect();
            let singular = || {
                Error::Numerical(
                    "Phi Q^-1 Phi^T is singular with lambda = 0; duplicate observation \
                     locations need a positive nugget"
                        .into(),
                )
            };
            let k = k.llt(Side::Lower).map_err(|_| singular())?;
            let l = k.L();
            // relative pivots near zero mean (numerically) repeated rows
            if (0..n).any(|i| l[(i, i)] * l[(i, i)] < 1e-10 * kdiag[i]) {
                return Err(singular());
            }
            let log_det_v = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
            Ok(MarginalFactor {
                phi: phi.clone(),
                lambda,
                log_det_v,
                kind: MarginalKind::Dense { q, w, k },
            })
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn n(&self) -> usize {
        self.phi.nrows()
    }

    pub fn phi(&self) -> &CsrMatrix {
        &self.phi
    }

    /// `log det V`.
    pub fn log_det(&self) -> f64 {
        self.log_det_v
    }

    /// `V⁻¹ y` for each column of `y`.
    pub fn solve(&self, y: &Mat<f64>) -> Mat<f64> {
        match &self.kind {
            MarginalKind::Sparse { m } => {
                let mut u = self.phi.tr_mul_mat(y);
                m.solve_in_place(u.as_mut());
                let pu = self.phi.mul_mat(&u);
                let l = self.lambda;
                Mat::from_fn(y.nrows(), y.ncols(), |i, j| (y[(i, j)] - pu[(i, j)] / l) / l)
            }
            MarginalKind::Dense { k, .. } => k.solve(y),
        }
    }

    /// Posterior mean of the coefficients, `E[c | r]`, for each column of `r`.
    pub fn coef_mean(&self, r: &Mat<f64>) -> Mat<f64> {
        match &self.kind {
            MarginalKind::Sparse { m } => {
                let mut u = self.phi.tr_mul_mat(r);
                m.solve_in_place(u.as_mut());
                let l = self.lambda;
                Mat::from_fn(u.nrows(), u.ncols(), |i, j| u[(i, j)] / l)
            }
            MarginalKind::Dense { w, k, .. } => w * k.solve(r),
        }
    }

    pub(crate) fn is_sparse(&self) -> bool {
        matches!(self.kind, MarginalKind::Sparse { .. })
    }

    /// `φᵀ Cov(c | r) φ / σ²` for each row `φ` of `rows`.
    pub fn posterior_quad(&self, rows: &CsrMatrix) -> Vec<f64> {
        let t = rows.nrows();
        let m = rows.ncols();
        let blocks: Vec<usize> = (0..t).step_by(QUAD_BLOCK).collect();
        blocks
            .par_iter()
            .flat_map_iter(|&s| {
                let len = QUAD_BLOCK.min(t - s);
                let mut rhs = Mat::<f64>::zeros(m, len);
                for j in 0..len {
                    let (cols, vals) = rows.row(s + j);
                    for (&c, &v) in cols.iter().zip(vals) {
                        rhs[(c, j)] = v;
                    }
                }
                let mut sol = rhs.clone();
                let out: Vec<f64> = match &self.kind {
                    MarginalKind::Sparse { m } => {
                        m.solve_in_place(sol.as_mut());
                        (0..len).map(|j| dot_sparse_row(rows, s + j, &sol, j)).collect()
                    }
                    MarginalKind::Dense { q, k, .. } => {
                        q.solve_in_place(sol.as_mut());
                        let wphi = self.phi.mul_mat(&sol);
                        let kinv = k.solve(&wphi);
                        (0..len)
                            .map(|j| {
                                let prior = dot_sparse_row(rows, s + j, &sol, j);
                                let red: f64 =
                                    (0..wphi.nrows()).map(|i| wphi[(i, j)] * kinv[(i, j)]).sum();
                                (prior - red).max(0.0)
                            })
                            .collect()
                    }
                };
                out
            })
            .collect()
    }
}

fn dot_sparse_row(rows: &CsrMatrix, i: usize, x: &Mat<f64>, j: usize) -> f64 {
    let (cols, vals) = rows.row(i);
    cols.iter().zip(vals).map(|(&c, &v)| v * x[(c, j)]).sum()
}

/// Exact log density of `N(0, σ²ΦQ⁻¹Φᵀ + τ²I)` at the observation values,
/// treated as residuals.
pub fn log_likelihood(
    obs: &ObservationSet,
    cov: &CovParams,
    lattice: &LatticeGrid,
    basis: &BasisSpec,
) -> Result<f64> {
    obs.validate()?;
    cov.validate()?;
    cov.params.validate(lattice.len())?;
    let phi = evaluate_basis(lattice, basis, &obs.locations)?.into_matrix();
    let prec = PrecisionFactor::new(lattice, &cov.params)?;
    let mf = MarginalFactor::new(&prec, &phi, None, cov.lambda(), None)?;
    let z = Mat::from_fn(obs.n(), 1, |i, _| obs.values[i]);
    Ok(gaussian_loglik(&mf, &z, cov.sigma2))
}

fn gaussian_loglik(mf: &MarginalFactor, z: &Mat<f64>, sigma2: f64) -> f64 {
    let n = z.nrows() as f64;
    let r = z.ncols() as f64;
    let vz = mf.solve(z);
    let quad: f64 = (0..z.nrows())
        .flat_map(|i| (0..z.ncols()).map(move |j| (i, j)))
        .map(|(i, j)| z[(i, j)] * vz[(i, j)])
        .sum();
    -0.5 * (n * r * (LN_2PI + sigma2.ln()) + r * mf.log_det() + quad / sigma2)
}

/// Data for likelihood evaluation: `R` replicate columns observed at shared
/// locations, with an optional regression design.
#[derive(Debug, Clone)]
pub struct SpatialData {
    pub locations: Vec<Point>,
    /// `n × R` responses.
    pub z: Mat<f64>,
    pub design: Option<Mat<f64>>,
    pub design_names: Vec<String>,
}

impl SpatialData {
    pub fn from_observations(obs: &ObservationSet) -> Result<Self> {
        obs.validate()?;
        let (x, names) = obs.design();
        Ok(SpatialData {
            locations: obs.locations.clone(),
            z: Mat::from_fn(obs.n(), 1, |i, _| obs.values[i]),
            design: if names.is_empty() { None } else { Some(x) },
            design_names: names,
        })
    }

    /// Replicate columns at common locations with no fixed effect.
    pub fn replicates(locations: Vec<Point>, columns: &[Vec<f64>]) -> Result<Self> {
        let n = locations.len();
        ensure!(n >= 1 && !columns.is_empty(), "no replicate data");
        for (k, c) in columns.iter().enumerate() {
            ensure!(c.len() == n, "replicate {k} has {} values for {n} locations", c.len());
            ensure!(c.iter().all(|v| v.is_finite()), "replicate {k} has non-finite values");
        }
        Ok(SpatialData {
            locations,
            z: Mat::from_fn(n, columns.len(), |i, j| columns[j][i]),
            design: None,
            design_names: Vec::new(),
        })
    }

    /// Adds a design shared by all replicates.
    pub fn with_design(mut self, x: Mat<f64>, names: Vec<String>) -> Result<Self> {
        ensure!(x.nrows() == self.n(), "design has {} rows for {} observations", x.nrows(), self.n());
        ensure!(x.ncols() == names.len(), "design has {} columns but {} names", x.ncols(), names.len());
        check_full_rank(&x, &names)?;
        self.design = Some(x);
        self.design_names = names;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn n_replicates(&self) -> usize {
        self.z.ncols()
    }
}

/// Profile likelihood at fixed `(Q, λ)`: `β` by GLS per replicate, `σ²` in
/// closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileFit {
    pub loglik: f64,
    pub sigma2: f64,
    pub lambda: f64,
    /// One coefficient vector per replicate column (empty without design).
    pub beta: Vec<Vec<f64>>,
}

pub fn profile_fit(mf: &MarginalFactor, data: &SpatialData) -> Result<ProfileFit> {
    let n = data.n();
    let reps = data.n_replicates();
    let (resid, beta) = match &data.design {
        None => (data.z.clone(), vec![Vec::new(); reps]),
        Some(x) => {
            let vx = mf.solve(x);
            let a = x.transpose() * &vx;
            let b = vx.transpose() * &data.z;
            let llt = a.llt(Side::Lower).map_err(|_| {
                Error::Numerical("GLS normal matrix is not positive definite".into())
            })?;
            let coef = llt.solve(&b);
            let resid = &data.z - x * &coef;
            let beta = (0..reps)
                .map(|k| (0..coef.nrows()).map(|j| coef[(j, k)]).collect())
                .collect();
            (resid, beta)
        }
    };
    let vr = mf.solve(&resid);
    let quad: f64 = (0..n)
        .flat_map(|i| (0..reps).map(move |j| (i, j)))
        .map(|(i, j)| resid[(i, j)] * vr[(i, j)])
        .sum();
    let nr = (n * reps) as f64;
    ensure!(quad > 0.0, "residual quadratic form vanished; data are fitted exactly");
    let sigma2 = quad / nr;
    let loglik = -0.5 * (nr * (LN_2PI + sigma2.ln() + 1.0) + reps as f64 * mf.log_det());
    Ok(ProfileFit {
        loglik,
        sigma2,
        lambda: mf.lambda(),
        beta,
    })
}

/// Likelihood evaluator that caches basis products, recent precision
/// factors, and the symbolic analysis of `M`.
pub struct ProfileEngine<'a> {
    lattice: &'a LatticeGrid,
    data: &'a SpatialData,
    phi: CsrMatrix,
    phi_gram: SymMatrix,
    cache: Mutex<EngineCache>,
}

#[derive(Default)]
struct EngineCache {
    precision: Vec<(u64, Arc<PrecisionFactor>)>,
    marginal: Option<MarginalFactor>,
}

const PRECISION_CACHE: usize = 4;

impl<'a> ProfileEngine<'a> {
    pub fn new(data: &'a SpatialData, lattice: &'a LatticeGrid, basis: &BasisSpec) -> Result<Self> {
        let phi = evaluate_basis(lattice, basis, &data.locations)?.into_matrix();
        let phi_gram = phi.gram(1.0);
        Ok(ProfileEngine {
            lattice,
            data,
            phi,
            phi_gram,
            cache: Mutex::new(EngineCache::default()),
        })
    }

    pub fn phi(&self) -> &CsrMatrix {
        &self.phi
    }

    pub fn data(&self) -> &SpatialData {
        self.data
    }

    pub fn lattice(&self) -> &LatticeGrid {
        self.lattice
    }

    /// Precision factor for the fields produced by `make`, cached under
    /// `key` (a scalar identifying the fields within one search).
    pub fn precision(
        &self,
        key: f64,
        make: impl FnOnce() -> Result<ParamFields>,
    ) -> Result<Arc<PrecisionFactor>> {
        let bits = key.to_bits();
        let template = {
            let cache = self.cache.lock().unwrap();
            if let Some((_, p)) = cache.precision.iter().find(|(k, _)| *k == bits) {
                return Ok(p.clone());
            }
            cache.precision.last().map(|(_, p)| p.clone())
        };
        let params = make()?;
        let q = precision(&build_sar(self.lattice, &params)?).into_matrix();
        let pf = Arc::new(match template {
            Some(t) => PrecisionFactor::refactor(&t, q)?,
            None => PrecisionFactor::from_matrix(q)?,
        });
        let mut cache = self.cache.lock().unwrap();
        cache.precision.push((bits, pf.clone()));
        if cache.precision.len() > PRECISION_CACHE {
            cache.precision.remove(0);
        }
        Ok(pf)
    }

    pub fn marginal(&self, prec: &PrecisionFactor, lambda: f64) -> Result<MarginalFactor> {
        let template = self.cache.lock().unwrap().marginal.clone();
        let mf = MarginalFactor::new(prec, &self.phi, Some(&self.phi_gram), lambda, template.as_ref())?;
        if mf.is_sparse() {
            self.cache.lock().unwrap().marginal = Some(mf.clone());
        }
        Ok(mf)
    }

    pub fn profile(&self, prec: &PrecisionFactor, lambda: f64) -> Result<ProfileFit> {
        profile_fit(&self.marginal(prec, lambda)?, self.data)
    }
}

/// Search box and optimizer settings for maximum likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MleConfig {
    pub log_kappa2: [f64; 2],
    pub log_lambda: [f64; 2],
    pub search: SearchConfig,
}

impl Default for MleConfig {
    fn default() -> Self {
        MleConfig {
            log_kappa2: [-9.2, 2.3],
            log_lambda: [(1e-5f64).ln(), (1e2f64).ln()],
            search: SearchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MleFit {
    pub cov: CovParams,
    pub beta: Vec<Vec<f64>>,
    pub loglik: f64,
    pub search: SearchResult,
    /// A search coordinate ended on its bound.
    pub at_bound: bool,
}

/// Maximizes the profile likelihood over `(log κ², log λ)` for a stationary,
/// isotropic SAR.
pub fn fit_stationary_mle(
    data: &SpatialData,
    lattice: &LatticeGrid,
    basis: &BasisSpec,
    cfg: &MleConfig,
) -> Result<MleFit> {
    ensure!(data.n() >= 3, "maximum likelihood needs at least 3 observations");
    let engine = ProfileEngine::new(data, lattice, basis)?;
    let m = lattice.len();
    let eval = |x: &[f64]| -> Result<ProfileFit> {
        let k2 = x[0].exp();
        let prec = engine.precision(k2, || Ok(ParamFields::stationary(m, k2)))?;
        engine.profile(&prec, x[1].exp())
    };
    let search = coordinate_golden(
        |x| eval(x).map(|p| p.loglik).unwrap_or(f64::NEG_INFINITY),
        &[
            (cfg.log_kappa2[0], cfg.log_kappa2[1]),
            (cfg.log_lambda[0], cfg.log_lambda[1]),
        ],
        None,
        &cfg.search,
    )?;
    let best = eval(&search.x)?;
    let at_bound = search.hit_bound();
    if at_bound {
        log::warn!(
            "stationary MLE ended on a search bound (log kappa2 = {:.3}, log lambda = {:.3})",
            search.x[0],
            search.x[1]
        );
    }
    Ok(MleFit {
        cov: CovParams::new(
            ParamFields::stationary(m, search.x[0].exp()),
            best.sigma2,
            best.lambda * best.sigma2,
        )?,
        beta: best.beta,
        loglik: best.loglik,
        search,
        at_bound,
    })
}

/// Profile-likelihood fit of `λ` (and `σ²`, `β`) with the SAR fields held
/// fixed.
pub fn fit_lambda(
    data: &SpatialData,
    lattice: &LatticeGrid,
    basis: &BasisSpec,
    params: &ParamFields,
    cfg: &MleConfig,
) -> Result<MleFit> {
    params.validate(lattice.len())?;
    let engine = ProfileEngine::new(data, lattice, basis)?;
    let prec = engine.precision(0.0, || Ok(params.clone()))?;
    let search = coordinate_golden(
        |x| engine.profile(&prec, x[0].exp()).map(|p| p.loglik).unwrap_or(f64::NEG_INFINITY),
        &[(cfg.log_lambda[0], cfg.log_lambda[1])],
        None,
        &SearchConfig {
            restarts: 1,
            ..cfg.search
        },
    )?;
    let best = engine.profile(&prec, search.x[0].exp())?;
    let at_bound = search.hit_bound();
    Ok(MleFit {
        cov: CovParams::new(params.clone(), best.sigma2, best.lambda * best.sigma2)?,
        beta: best.beta,
        loglik: best.loglik,
        search,
        at_bound,
    })
}

/// Prediction locations with optional design rows (row-major, same columns
/// as the observation design).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Targets {
    pub points: Vec<Point>,
    pub covariates: Option<Vec<f64>>,
}

impl Targets {
    pub fn points(points: Vec<Point>) -> Self {
        Targets {
            points,
            covariates: None,
        }
    }

    pub fn with_covariates(points: Vec<Point>, covariates: Vec<f64>) -> Self {
        Targets {
            points,
            covariates: Some(covariates),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrigingResult {
    pub targets: Vec<Point>,
    pub mean: Vec<f64>,
    /// Empty when standard errors were not requested.
    pub se: Vec<f64>,
    pub beta: Vec<f64>,
    /// Posterior mean of the basis coefficients.
    pub coef_mean: Vec<f64>,
}

/// A fitted spatial model for one day: plug-in `β` (GLS), fixed covariance.
#[derive(Debug, Clone)]
pub struct FittedModel {
    lattice: LatticeGrid,
    basis: BasisSpec,
    cov: CovParams,
    design_names: Vec<String>,
    beta: Vec<f64>,
    locations: Vec<Point>,
    values: Vec<f64>,
    residuals: Vec<f64>,
    precision: Arc<PrecisionFactor>,
    marginal: MarginalFactor,
    coef_mean: Vec<f64>,
}

impl FittedModel {
    pub fn fit(obs: &ObservationSet, cov: CovParams, lattice: &LatticeGrid, basis: &BasisSpec) -> Result<Self> {
        cov.validate()?;
        cov.params.validate(lattice.len())?;
        let prec = Arc::new(PrecisionFactor::new(lattice, &cov.params)?);
        Self::fit_with_precision(obs, cov, lattice, basis, prec)
    }

    pub fn fit_with_precision(
        obs: &ObservationSet,
        cov: CovParams,
        lattice: &LatticeGrid,
        basis: &BasisSpec,
        precision: Arc<PrecisionFactor>,
    ) -> Result<Self> {
        let data = SpatialData::from_observations(obs)?;
        if let Some(x) = &data.design {
            check_full_rank(x, &data.design_names)?;
        }
        let phi = evaluate_basis(lattice, basis, &obs.locations)?.into_matrix();
        let marginal = MarginalFactor::new(&precision, &phi, None, cov.lambda(), None)?;
        let (beta, residuals) = match &data.design {
            None => (Vec::new(), obs.values.clone()),
            Some(x) => {
                let vx = marginal.solve(x);
                let a = x.transpose() * &vx;
                let b = vx.transpose() * &data.z;
                let coef = a
                    .llt(Side::Lower)
                    .map_err(|_| Error::Numerical("GLS normal matrix is not positive definite".into()))?
                    .solve(&b);
                let beta: Vec<f64> = (0..coef.nrows()).map(|j| coef[(j, 0)]).collect();
                let fitted = x * &coef;
                let r = (0..obs.n()).map(|i| obs.values[i] - fitted[(i, 0)]).collect();
                (beta, r)
            }
        };
        let r = Mat::from_fn(residuals.len(), 1, |i, _| residuals[i]);
        let c = marginal.coef_mean(&r);
        Ok(FittedModel {
            lattice: *lattice,
            basis: *basis,
            cov,
            design_names: data.design_names,
            beta,
            locations: obs.locations.clone(),
            values: obs.values.clone(),
            residuals,
            precision,
            marginal,
            coef_mean: (0..c.nrows()).map(|i| c[(i, 0)]).collect(),
        })
    }

    pub fn cov(&self) -> &CovParams {
        &self.cov
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn design_names(&self) -> &[String] {
        &self.design_names
    }

    pub fn lattice(&self) -> &LatticeGrid {
        &self.lattice
    }

    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }

    pub fn locations(&self) -> &[Point] {
        &self.locations
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn coef_mean(&self) -> &[f64] {
        &self.coef_mean
    }

    pub fn precision(&self) -> &Arc<PrecisionFactor> {
        &self.precision
    }

    pub fn marginal(&self) -> &MarginalFactor {
        &self.marginal
    }

    /// Fixed-effect mean at the targets.
    pub fn fixed_effect(&self, targets: &Targets) -> Result<Vec<f64>> {
        let t = targets.points.len();
        let p = self.beta.len();
        if p == 0 {
            return Ok(vec![0.0; t]);
        }
        match &targets.covariates {
            Some(x) => {
                ensure!(
                    x.len() == t * p,
                    "target design has {} entries, expected {t} x {p} ({})",
                    x.len(),
                    self.design_names.join(", ")
                );
                Ok((0..t)
                    .map(|i| (0..p).map(|j| x[i * p + j] * self.beta[j]).sum())
                    .collect())
            }
            None if self.design_names == ["intercept"] => Ok(vec![self.beta[0]; t]),
            None => Err(Error::Validation(format!(
                "targets lack covariate columns: {}",
                self.design_names.join(", ")
            ))),
        }
    }

    /// Kriging mean and optionally standard errors of the latent field
    /// (`include_nugget` adds `τ²` for predicting a new measurement).
    pub fn predict(&self, targets: &Targets, with_se: bool, include_nugget: bool) -> Result<KrigingResult> {
        ensure!(
            targets.points.iter().all(|p| p.is_finite()),
            "target locations must be finite"
        );
        let fixed = self.fixed_effect(targets)?;
        let phi_t = evaluate_basis(&self.lattice, &self.basis, &targets.points)?.into_matrix();
        let latent = phi_t.mul_vec(&self.coef_mean);
        let mean = fixed.iter().zip(&latent).map(|(a, b)| a + b).collect();
        let se = if with_se {
            let nugget = if include_nugget { self.cov.tau2 } else { 0.0 };
            self.marginal
                .posterior_quad(&phi_t)
                .into_iter()
                .map(|q| (self.cov.sigma2 * q + nugget).max(0.0).sqrt())
                .collect()
        } else {
            Vec::new()
        };
        Ok(KrigingResult {
            targets: targets.points.clone(),
            mean,
            se,
            beta: self.beta.clone(),
            coef_mean: self.coef_mean.clone(),
        })
    }
}

/// Kriging mean and standard error of the latent field at `targets`.
pub fn krige(
    obs: &ObservationSet,
    cov: &CovParams,
    lattice: &LatticeGrid,
    basis: &BasisSpec,
    targets: &Targets,
) -> Result<KrigingResult> {
    FittedModel::fit(obs, cov.clone(), lattice, basis)?.predict(targets, true, false)
}

/// Candidate values for the brute-force constant-field likelihood search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGrid {
    pub kappa2: Vec<f64>,
    pub rho: Vec<f64>,
    pub theta: Vec<f64>,
}

impl CandidateGrid {
    /// 5 × 5 × 5 grid around `(κ² = 1, ρ = 4, θ = π/4)`.
    pub fn default_5x5x5() -> Self {
        use std::f64::consts::{FRAC_PI_4, PI};
        CandidateGrid {
            kappa2: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            rho: vec![1.0, 2.5, 4.0, 5.5, 7.0],
            theta: (-2..=2)
                .map(|k| canonical_theta(FRAC_PI_4 + k as f64 * PI / 5.0))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.kappa2.len() * self.rho.len() * self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cell `(i, j, k)` of flat index `idx` (κ² slowest).
    pub fn cell(&self, idx: usize) -> (usize, usize, usize) {
        let nt = self.theta.len();
        let nr = self.rho.len();
        (idx / (nr * nt), (idx / nt) % nr, idx % nt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub kappa2: f64,
    pub rho: f64,
    pub theta: f64,
    pub cell: (usize, usize, usize),
    /// Profile log-likelihood per candidate, in flat-index order.
    pub loglik: Vec<f64>,
    /// Set when a single replicate makes the likelihood nearly flat.
    pub flat_warning: bool,
}

impl OracleResult {
    pub fn params(&self, m: usize) -> ParamFields {
        ParamFields::constant(m, self.kappa2, self.rho, self.theta)
    }
}

/// Exhaustive maximization of the replicate likelihood over constant
/// parameter fields. The ensemble must live on the lattice nodes (one pixel
/// per node, no buffer) so that `Φ` is square; coefficients are recovered
/// exactly as `Φ⁻¹ g` and scored under `N(0, σ²Q⁻¹)` with `σ²` profiled.
pub fn mle_small_grid_oracle(
    ensemble: &FieldEnsemble,
    lattice: &LatticeGrid,
    basis: &BasisSpec,
    candidates: &CandidateGrid,
) -> Result<OracleResult> {
    ensure!(!candidates.is_empty(), "empty candidate grid");
    ensure!(
        lattice.rows() <= 16 && lattice.cols() <= 16,
        "oracle is limited to lattices of at most 16 x 16 nodes"
    );
    ensure!(
        ensemble.height() == lattice.rows() && ensemble.width() == lattice.cols(),
        "ensemble grid {}x{} must match the lattice {}x{}",
        ensemble.height(),
        ensemble.width(),
        lattice.rows(),
        lattice.cols()
    );
    for v in candidates.kappa2.iter().chain(&candidates.rho).chain(&candidates.theta) {
        ensure!(v.is_finite(), "candidate values must be finite");
    }
    let r = ensemble.r();
    let flat_warning = r == 1;
    if flat_warning {
        log::warn!("oracle called with a single replicate; the likelihood surface is nearly flat");
    }
    let m = lattice.len();
    let phi = evaluate_basis(lattice, basis, &lattice.as_pixel_grid().centers())?
        .into_matrix()
        .to_dense();
    let g = Mat::from_fn(m, r, |i, k| ensemble.replicate(k)[i]);
    let coefs = phi.partial_piv_lu().solve(&g);
    ensure!(
        (0..m).all(|i| (0..r).all(|k| coefs[(i, k)].is_finite())),
        "basis matrix at the lattice nodes is singular"
    );
    let coef_cols: Vec<Vec<f64>> = (0..r)
        .map(|k| (0..m).map(|i| coefs[(i, k)]).collect())
        .collect();

    let loglik: Vec<f64> = (0..candidates.len())
        .into_par_iter()
        .map(|idx| {
            let (i, j, k) = candidates.cell(idx);
            let params = ParamFields::constant(
                m,
                candidates.kappa2[i],
                candidates.rho[j],
                canonical_theta(candidates.theta[k]),
            );
            let prec = match PrecisionFactor::new(lattice, &params) {
                Ok(p) => p,
                Err(_) => return f64::NEG_INFINITY,
            };
            let quad: f64 = coef_cols
                .iter()
                .map(|c| c.iter().zip(prec.matrix().mul_vec(c)).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            let mr = (m * r) as f64;
            0.5 * r as f64 * prec.log_det() - 0.5 * mr * (quad / mr).ln() - 0.5 * mr
        })
        .collect();
    let best = (0..loglik.len())
        .fold(0, |b, i| if loglik[i] > loglik[b] { i } else { b });
    let cell = candidates.cell(best);
    Ok(OracleResult {
        kappa2: candidates.kappa2[cell.0],
        rho: candidates.rho[cell.1],
        theta: canonical_theta(candidates.theta[cell.2]),
        cell,
        loglik,
        flat_warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Bounds;

    fn lattice(n: usize) -> LatticeGrid {
        LatticeGrid::build(Bounds::new(0.0, 1.0, 0.0, 1.0), n, n, 0).unwrap()
    }

    #[test]
    fn ols_hand_example() {
        let locs = vec![Point::new(0.0, 0.0); 3];
        let obs = ObservationSet::new(
            "d",
            locs,
            vec![1.0, 2.0, 2.0],
            vec!["intercept".into(), "x".into()],
            vec![1.0, 0.0, 1.0, 1.0, 1.0, 2.0],
        )
        .unwrap();
        let fit = fit_mean_arx1(&obs).unwrap();
        assert!((fit.beta[0] - 7.0 / 6.0).abs() < 1e-12);
        assert!((fit.beta[1] - 0.5).abs() < 1e-12);
        assert!(fit.alpha.is_none());
        for i in 0..3 {
            assert!((fit.fitted[i] + fit.residuals[i] - obs.values[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn ols_exact_line_and_lag() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64 * 0.7 - 2.0).collect();
        let lag: Vec<f64> = (0..10).map(|i| ((i * i) % 7) as f64).collect();
        let y: Vec<f64> = xs.iter().zip(&lag).map(|(x, l)| 2.0 + 3.0 * x + 0.9 * l).collect();
        let obs = ObservationSet::new(
            "d",
            vec![Point::new(0.0, 0.0); 10],
            y,
            vec!["intercept".into(), "x".into()],
            xs.iter().flat_map(|&x| [1.0, x]).collect(),
        )
        .unwrap()
        .with_lag(lag)
        .unwrap();
        let fit = fit_mean_arx1(&obs).unwrap();
        assert!((fit.beta[0] - 2.0).abs() < 1e-10);
        assert!((fit.beta[1] - 3.0).abs() < 1e-10);
        assert!((fit.alpha.unwrap() - 0.9).abs() < 1e-10);
    }

    #[test]
    fn collinear_columns_are_named() {
        let obs = ObservationSet::new(
            "d",
            vec![Point::new(0.0, 0.0); 4],
            vec![1.0, 2.0, 3.0, 5.0],
            vec!["intercept".into(), "a".into(), "b".into()],
            vec![1.0, 1.0, 2.0, 1.0, 2.0, 4.0, 1.0, 3.0, 6.0, 1.0, 4.0, 8.0],
        )
        .unwrap();
        let err = fit_mean_arx1(&obs).unwrap_err().to_string();
        assert!(err.contains("collinear"), "{err}");
        assert!(err.contains('a') || err.contains('b'), "{err}");
    }

    #[test]
    fn deduplicate_averages() {
        let obs = ObservationSet::intercept_only(
            "d",
            vec![Point::new(0.1, 0.2), Point::new(0.3, 0.2), Point::new(0.1, 0.2)],
            vec![1.0, 5.0, 3.0],
        )
        .unwrap();
        let (d, merged) = obs.deduplicate();
        assert_eq!(merged, 1);
        assert_eq!(d.values, vec![2.0, 5.0]);
        assert_eq!(d.covariates, vec![1.0, 1.0]);
    }

    #[test]
    fn single_observation_is_univariate_normal() {
        let g = lattice(4);
        let basis = BasisSpec::default();
        let p = Point::new(0.4, 0.55);
        let cov = CovParams::stationary(16, 0.7, 1.3, 0.2).unwrap();
        let obs = ObservationSet::residuals("d", vec![p], vec![0.8]).unwrap();
        let ll = log_likelihood(&obs, &cov, &g, &basis).unwrap();
        let phi = evaluate_basis(&g, &basis, &[p]).unwrap().into_matrix().to_dense();
        let q = precision(&build_sar(&g, &cov.params).unwrap()).into_matrix().to_dense();
        let qi = crate::testutil::dense_inverse(&q);
        let phin = crate::testutil::to_na(&phi);
        let v = 1.3 * (&phin * qi * phin.transpose())[(0, 0)] + 0.2;
        let expect = -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + 0.64 / v);
        assert!((ll - expect).abs() < 1e-10);
    }

    #[test]
    fn scaling_identity() {
        let g = lattice(5);
        let basis = BasisSpec::default();
        let locs: Vec<Point> = (0..7).map(|i| Point::new(0.1 + 0.12 * i as f64, 0.9 - 0.1 * i as f64)).collect();
        let vals: Vec<f64> = (0..7).map(|i| (i as f64).sin()).collect();
        let cov = CovParams::stationary(25, 0.5, 0.9, 0.1).unwrap();
        let a = log_likelihood(&ObservationSet::residuals("d", locs.clone(), vals.clone()).unwrap(), &cov, &g, &basis)
            .unwrap();
        let cov4 = CovParams::stationary(25, 0.5, 3.6, 0.4).unwrap();
        let b = log_likelihood(
            &ObservationSet::residuals("d", locs, vals.iter().map(|v| 2.0 * v).collect()).unwrap(),
            &cov4,
            &g,
            &basis,
        )
        .unwrap();
        assert!((b - a + 7.0 * 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn interpolation_without_nugget() {
        let g = lattice(6);
        let basis = BasisSpec::default();
        let locs: Vec<Point> = (0..6).map(|i| Point::new(0.15 * i as f64 + 0.05, 0.3 + 0.07 * i as f64)).collect();
        let vals = vec![1.0, -0.5, 0.3, 2.0, 0.0, -1.2];
        let obs = ObservationSet::intercept_only("d", locs.clone(), vals.clone()).unwrap();
        let cov = CovParams::stationary(36, 1.0, 1.0, 0.0).unwrap();
        let k = krige(&obs, &cov, &g, &basis, &Targets::points(locs)).unwrap();
        for i in 0..6 {
            assert!((k.mean[i] - vals[i]).abs() < 1e-8);
            assert!(k.se[i] < 1e-6);
        }
    }

    #[test]
    fn duplicate_locations_need_nugget() {
        let g = lattice(4);
        let p = Point::new(0.5, 0.5);
        let obs = ObservationSet::residuals("d", vec![p, p], vec![1.0, 2.0]).unwrap();
        let cov = CovParams::stationary(16, 1.0, 1.0, 0.0).unwrap();
        let err = krige(&obs, &cov, &g, &BasisSpec::default(), &Targets::points(vec![p])).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    #[test]
    fn oracle_with_single_candidate_returns_it() {
        let g = lattice(5);
        let basis = BasisSpec::default();
        let b = build_sar(&g, &ParamFields::constant(25, 0.5, 2.0, 0.3)).unwrap();
        let phi = evaluate_basis(&g, &basis, &g.as_pixel_grid().centers()).unwrap();
        let ens = crate::sim::simulate_fields(&b, &phi, (5, 5), 1, 3).unwrap();
        let cand = CandidateGrid {
            kappa2: vec![0.5],
            rho: vec![2.0],
            theta: vec![0.3],
        };
        let r = mle_small_grid_oracle(&ens, &g, &basis, &cand).unwrap();
        assert_eq!((r.kappa2, r.rho, r.theta), (0.5, 2.0, 0.3));
        assert!(r.flat_warning);
    }

    #[test]
    fn default_candidates_wrap_theta() {
        let c = CandidateGrid::default_5x5x5();
        assert_eq!(c.len(), 125);
        assert!(c.theta.iter().all(|&t| (-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2).contains(&t)));
        assert!((c.theta[2] - std::f64::consts::FRAC_PI_4).abs() < 1e-15);
        assert_eq!(c.cell(0), (0, 0, 0));
        assert_eq!(c.cell(124), (4, 4, 4));
    }
}
