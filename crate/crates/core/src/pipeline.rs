//! Experiment drivers: moving-window ensembles, the gridded mean model,
//! masked reconstruction, per-day station fits, cross-validation and
//! fine-grid prediction.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{CvConfig, IntervalKind, ModelVariant, WindowConfig};
use crate::cosp::{refine_kappa_point, RefineConfig, WeightMask};
use crate::error::{ensure, Error, Result};
use crate::geometry::{PixelGrid, Point};
use crate::gridstack::GridStack;
use crate::lattice::{evaluate_basis, BasisSpec, LatticeGrid};
use crate::likelihood::{
    fit_lambda, fit_mean_arx1, fit_stationary_mle, CovParams, FittedModel, MleConfig,
    ObservationSet, SpatialData, Targets,
};
use crate::rng::{stream_rng, Purpose};
use crate::sar::{build_sar, ParamFields};
use crate::sim::{simulate_fields, standardize_ensemble, FieldEnsemble};
use crate::uq::{
    compute_metrics_intervals, conditional_simulate, conditional_summary, ensemble_intervals,
    kfold_assign, normal_quantile, UQMetrics,
};

/// Per-purpose seed for item `index` (day, replicate) of a run.
pub fn item_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// `r` fields simulated on the lattice node grid, one channel each.
pub fn simulate_stack(
    lattice: &LatticeGrid,
    basis: &BasisSpec,
    params: &ParamFields,
    r: usize,
    seed: u64,
    standardize: bool,
) -> Result<GridStack> {
    params.validate(lattice.len())?;
    let grid = lattice.as_pixel_grid();
    let phi = evaluate_basis(lattice, basis, &grid.centers())?;
    let b = build_sar(lattice, params)?;
    let mut ens = simulate_fields(&b, &phi, (grid.height, grid.width), r, seed)?;
    if standardize {
        ens = standardize_ensemble(&ens)?;
    }
    let names = (0..r).map(|k| format!("r{k:03}")).collect();
    Ok(GridStack::new(grid, names, ens.values().to_vec())?
        .with_seed(seed)
        .with_metadata("standardized", standardize.into()))
}

/// The standardized window of residual fields around day `t` (channel
/// index, zero-based): channels `t - before ..= t + after`.
pub fn build_window_ensembles(residuals: &GridStack, t: usize, window: &WindowConfig) -> Result<FieldEnsemble> {
    let n = residuals.n_channels();
    let lo = t as i64 - window.before as i64;
    let hi = t as i64 + window.after as i64;
    let mut gaps: Vec<String> = Vec::new();
    for d in lo..=hi {
        if d < 0 || d >= n as i64 {
            gaps.push(format!("day index {d} (outside the {n}-day stack)"));
        } else if residuals.channel_at(d as usize).iter().all(|v| !v.is_finite()) {
            gaps.push(format!("'{}' (no finite values)", residuals.channel_names()[d as usize]));
        }
    }
    if !gaps.is_empty() {
        return Err(Error::Validation(format!(
            "window around day {t} is incomplete; missing {}",
            gaps.join(", ")
        )));
    }
    let grid = residuals.grid();
    let reps = (lo..=hi).map(|d| residuals.channel_at(d as usize).to_vec()).collect();
    let ens = FieldEnsemble::from_replicates(grid.height, grid.width, reps)?;
    standardize_ensemble(&ens)
}

/// Per-day fit summary of the gridded mean model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GriddedMeanFit {
    pub day: String,
    pub beta: BTreeMap<String, f64>,
    pub alpha: f64,
    pub r_squared: f64,
    pub n_pixels: usize,
}

fn day_name(stack: &GridStack, index: usize) -> String {
    match stack.metadata().get("date") {
        Some(serde_json::Value::String(s)) => s.clone(),
        _ => format!("day{index:04}"),
    }
}

/// ARX(1) regression of each day's `value` channel on an intercept, the
/// pixel coordinates, the day's other channels and the previous day's
/// values. Returns one residual channel per day from the second day on;
/// pixels with any non-finite input are NaN.
pub fn fit_gridded_mean(days: &[GridStack]) -> Result<(GridStack, Vec<GriddedMeanFit>)> {
    ensure!(
        days.len() >= 2,
        "the lagged mean model needs the previous day; got {} day grid(s)",
        days.len()
    );
    let grid = days[0].grid();
    let covariates: Vec<String> = days[0]
        .channel_names()
        .iter()
        .filter(|c| c.as_str() != "value")
        .cloned()
        .collect();
    for (i, d) in days.iter().enumerate() {
        ensure!(d.grid() == grid, "day grid {i} is not aligned with day grid 0");
        d.channel("value")?;
        for c in &covariates {
            d.channel(c).map_err(|_| {
                Error::Validation(format!("day grid {i} lacks covariate channel '{c}'"))
            })?;
        }
    }
    let centers = grid.centers();
    let fits: Vec<Result<(Vec<f64>, GriddedMeanFit)>> = (1..days.len())
        .into_par_iter()
        .map(|t| {
            let day = day_name(&days[t], t);
            let value = days[t].channel("value")?;
            let lag = days[t - 1].channel("value")?;
            let cov: Vec<&[f64]> = covariates.iter().map(|c| days[t].channel(c).unwrap()).collect();
            let idx: Vec<usize> = (0..grid.len())
                .filter(|&i| {
                    value[i].is_finite() && lag[i].is_finite() && cov.iter().all(|c| c[i].is_finite())
                })
                .collect();
            let mut names = vec!["intercept".to_string(), "lon".into(), "lat".into()];
            names.extend(covariates.iter().cloned());
            let design = idx
                .iter()
                .flat_map(|&i| {
                    [1.0, centers[i].x, centers[i].y]
                        .into_iter()
                        .chain(cov.iter().map(move |c| c[i]))
                })
                .collect();
            let obs = ObservationSet::new(
                day.clone(),
                idx.iter().map(|&i| centers[i]).collect(),
                idx.iter().map(|&i| value[i]).collect(),
                names.clone(),
                design,
            )?
            .with_lag(idx.iter().map(|&i| lag[i]).collect())?;
            let fit = fit_mean_arx1(&obs).map_err(|e| match e {
                Error::Validation(m) => Error::Validation(format!("day {day}: {m}")),
                other => other,
            })?;
            let mut resid = vec![f64::NAN; grid.len()];
            for (k, &i) in idx.iter().enumerate() {
                resid[i] = fit.residuals[k];
            }
            Ok((
                resid,
                GriddedMeanFit {
                    day,
                    beta: names.into_iter().zip(fit.beta.iter().copied()).collect(),
                    alpha: fit.alpha.unwrap(),
                    r_squared: fit.r_squared,
                    n_pixels: idx.len(),
                },
            ))
        })
        .collect();
    let mut channels = Vec::new();
    let mut summaries = Vec::new();
    for f in fits {
        let (resid, s) = f?;
        channels.push((s.day.clone(), resid));
        summaries.push(s);
    }
    let stack = GridStack::from_channels(grid, channels)?.with_metadata(
        "mean_model_fits",
        serde_json::to_value(&summaries).expect("fits serialize"),
    );
    Ok((stack, summaries))
}

/// A random set of exactly `round(fraction · n)` observed indices.
pub fn observation_mask(n: usize, fraction: f64, seed: u64) -> Result<Vec<bool>> {
    ensure!(fraction > 0.0 && fraction < 1.0, "observed fraction must lie in (0, 1)");
    let k = ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, Purpose::Mask, 0, 0));
    let mut mask = vec![false; n];
    for &i in &idx[..k] {
        mask[i] = true;
    }
    Ok(mask)
}

/// Covariance estimate for one variant on one day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantFit {
    pub variant: ModelVariant,
    pub cov: CovParams,
    pub beta: Vec<f64>,
    pub loglik: f64,
    /// Point-data `κ²` increment (adjusted variant only).
    pub kappa_point: Option<f64>,
    pub at_bound: bool,
}

impl VariantFit {
    pub fn model(&self, obs: &ObservationSet, lattice: &LatticeGrid, basis: &BasisSpec) -> Result<FittedModel> {
        FittedModel::fit(obs, self.cov.clone(), lattice, basis)
    }
}

/// Settings shared by the per-day fits.
#[derive(Debug, Clone, Copy)]
pub struct FitSettings<'a> {
    pub lattice: &'a LatticeGrid,
    pub basis: &'a BasisSpec,
    pub mle: &'a MleConfig,
    pub refine: &'a RefineConfig,
}

/// Fits one variant. The nonstationary variants need `base`; the adjusted
/// one also `mask`.
pub fn fit_variant(
    obs: &ObservationSet,
    variant: ModelVariant,
    base: Option<&ParamFields>,
    mask: Option<&WeightMask>,
    s: FitSettings<'_>,
) -> Result<VariantFit> {
    let data = SpatialData::from_observations(obs)?;
    let need = || {
        Error::Validation(format!("variant {variant} needs parameter fields"))
    };
    let first = |b: Vec<Vec<f64>>| b.into_iter().next().unwrap_or_default();
    match variant {
        ModelVariant::Stationary => {
            let f = fit_stationary_mle(&data, s.lattice, s.basis, s.mle)?;
            Ok(VariantFit {
                variant,
                cov: f.cov,
                beta: first(f.beta),
                loglik: f.loglik,
                kappa_point: None,
                at_bound: f.at_bound,
            })
        }
        ModelVariant::Nonstationary => {
            let f = fit_lambda(&data, s.lattice, s.basis, base.ok_or_else(need)?, s.mle)?;
            Ok(VariantFit {
                variant,
                cov: f.cov,
                beta: first(f.beta),
                loglik: f.loglik,
                kappa_point: None,
                at_bound: f.at_bound,
            })
        }
        ModelVariant::NonstationaryAdjusted => {
            let mask = mask.ok_or_else(|| Error::Validation("adjusted variant needs a land mask".into()))?;
            let f = refine_kappa_point(&data, base.ok_or_else(need)?, mask, s.lattice, s.basis, s.refine)?;
            Ok(VariantFit {
                variant,
                cov: f.cov,
                beta: first(f.beta),
                loglik: f.loglik,
                kappa_point: Some(f.adjustment.kappa_point),
                at_bound: f.at_bound,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantOutcome {
    pub variant: ModelVariant,
    pub fit: Option<VariantFit>,
    pub error: Option<String>,
}

/// `log κ²` comparisons against the stationary fit, averaged over land
/// nodes (mask weight > 0.5).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaDiagnostics {
    pub stationary_log_kappa2: f64,
    pub land_nodes: usize,
    pub mean_log_diff_nonstationary: Option<f64>,
    pub mean_log_diff_adjusted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayFit {
    pub day: String,
    pub n_obs: usize,
    pub variants: Vec<VariantOutcome>,
    pub diagnostics: Option<KappaDiagnostics>,
}

impl DayFit {
    pub fn get(&self, v: ModelVariant) -> Option<&VariantFit> {
        self.variants.iter().find(|o| o.variant == v).and_then(|o| o.fit.as_ref())
    }
}

/// Fits the requested variants to one day of stations. Failures are
/// recorded per variant and do not stop the others.
pub fn run_station_day(
    obs: &ObservationSet,
    base: Option<&ParamFields>,
    mask: Option<&WeightMask>,
    variants: &[ModelVariant],
    s: FitSettings<'_>,
) -> Result<DayFit> {
    ensure!(!variants.is_empty(), "no model variants requested");
    let (obs, merged) = obs.deduplicate();
    if merged > 0 {
        log::info!("day {}: merged {merged} co-located stations", obs.day_id);
    }
    let outcomes: Vec<VariantOutcome> = variants
        .iter()
        .map(|&v| match fit_variant(&obs, v, base, mask, s) {
            Ok(f) => VariantOutcome {
                variant: v,
                fit: Some(f),
                error: None,
            },
            Err(e) => {
                log::warn!("day {}: variant {v} failed: {e}", obs.day_id);
                VariantOutcome {
                    variant: v,
                    fit: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    let mut day = DayFit {
        day: obs.day_id.clone(),
        n_obs: obs.n(),
        variants: outcomes,
        diagnostics: None,
    };
    if let (Some(st), Some(mask)) = (day.get(ModelVariant::Stationary), mask) {
        let k0 = st.cov.params.kappa2[0].ln();
        let land: Vec<usize> = (0..mask.len()).filter(|&i| mask.weights[i] > 0.5).collect();
        let mean_diff = |f: Option<&VariantFit>| {
            f.filter(|_| !land.is_empty()).map(|f| {
                land.iter().map(|&i| f.cov.params.kappa2[i].ln() - k0).sum::<f64>() / land.len() as f64
            })
        };
        day.diagnostics = Some(KappaDiagnostics {
            stationary_log_kappa2: k0,
            land_nodes: land.len(),
            mean_log_diff_nonstationary: mean_diff(day.get(ModelVariant::Nonstationary)),
            mean_log_diff_adjusted: mean_diff(day.get(ModelVariant::NonstationaryAdjusted)),
        });
    }
    Ok(day)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionDay {
    pub day: String,
    pub rmse_stationary: f64,
    pub rmse_nonstationary: f64,
    /// `(nonstationary / stationary − 1) × 100`.
    pub percent_difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub n_observed: usize,
    pub n_held_out: usize,
    pub days: Vec<ReconstructionDay>,
    pub mean_rmse_stationary: f64,
    pub mean_rmse_nonstationary: f64,
    pub mean_percent_difference: f64,
    /// Days on which the nonstationary variant has the lower RMSE.
    pub days_nonstationary_better: usize,
}

/// Fits both variants to the observed pixels of each day (channel) and
/// scores predictions on the held-out pixels.
pub fn run_reconstruction(
    fields: &GridStack,
    observed: &[bool],
    params: &ParamFields,
    lattice: &LatticeGrid,
    basis: &BasisSpec,
    mle: &MleConfig,
) -> Result<ReconstructionReport> {
    let grid = fields.grid();
    ensure!(
        observed.len() == grid.len(),
        "observation mask has {} entries for a {}x{} grid",
        observed.len(),
        grid.height,
        grid.width
    );
    let obs_idx: Vec<usize> = (0..grid.len()).filter(|&i| observed[i]).collect();
    let held: Vec<usize> = (0..grid.len()).filter(|&i| !observed[i]).collect();
    ensure!(!held.is_empty(), "observation mask leaves no held-out pixels");
    ensure!(obs_idx.len() >= 3, "observation mask needs at least 3 observed pixels");
    params.validate(lattice.len())?;
    let centers = grid.centers();
    let settings = FitSettings {
        lattice,
        basis,
        mle,
        refine: &RefineConfig::default(),
    };
    let days: Vec<Result<ReconstructionDay>> = (0..fields.n_channels())
        .into_par_iter()
        .map(|d| {
            let name = fields.channel_names()[d].clone();
            let v = fields.channel_at(d);
            let pts = |idx: &[usize]| idx.iter().map(|&i| centers[i]).collect::<Vec<_>>();
            let obs = ObservationSet::intercept_only(
                name.clone(),
                pts(&obs_idx),
                obs_idx.iter().map(|&i| v[i]).collect(),
            )?;
            let targets = Targets::points(pts(&held));
            let truth: Vec<f64> = held.iter().map(|&i| v[i]).collect();
            let rmse = |variant| -> Result<f64> {
                let fit = fit_variant(&obs, variant, Some(params), None, settings)?;
                let pred = fit.model(&obs, lattice, basis)?.predict(&targets, false, false)?;
                let mse = pred.mean.iter().zip(&truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>()
                    / truth.len() as f64;
                Ok(mse.sqrt())
            };
            let st = rmse(ModelVariant::Stationary)?;
            let ns = rmse(ModelVariant::Nonstationary)?;
            Ok(ReconstructionDay {
                day: name,
                rmse_stationary: st,
                rmse_nonstationary: ns,
                percent_difference: (ns / st - 1.0) * 100.0,
            })
        })
        .collect();
    let days: Vec<ReconstructionDay> = days.into_iter().collect::<Result<_>>()?;
    let n = days.len() as f64;
    Ok(ReconstructionReport {
        n_observed: obs_idx.len(),
        n_held_out: held.len(),
        mean_rmse_stationary: days.iter().map(|d| d.rmse_stationary).sum::<f64>() / n,
        mean_rmse_nonstationary: days.iter().map(|d| d.rmse_nonstationary).sum::<f64>() / n,
        mean_percent_difference: days.iter().map(|d| d.percent_difference).sum::<f64>() / n,
        days_nonstationary_better: days
            .iter()
            .filter(|d| d.rmse_nonstationary < d.rmse_stationary)
            .count(),
        days,
    })
}

/// One row of the cross-validation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub model: ModelVariant,
    #[serde(rename = "RMSE")]
    pub rmse: f64,
    #[serde(rename = "PICP")]
    pub picp: f64,
    #[serde(rename = "MPIW")]
    pub mpiw: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRecord {
    pub day: String,
    pub model: ModelVariant,
    pub fold: usize,
    pub metrics: UQMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: usize,
    pub level: f64,
    pub intervals: IntervalKind,
    /// Metrics pooled over all held-out stations of all days.
    pub table: Vec<CvRow>,
    pub records: Vec<CvRecord>,
    pub failures: Vec<String>,
}

impl CvReport {
    pub fn row(&self, v: ModelVariant) -> Option<&CvRow> {
        self.table.iter().find(|r| r.model == v)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Cross-validation input for one day.
#[derive(Debug, Clone, Copy)]
pub struct CvDay<'a> {
    pub obs: &'a ObservationSet,
    pub base: Option<&'a ParamFields>,
    pub mask: Option<&'a WeightMask>,
}

struct FoldPrediction {
    mean: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    truth: Vec<f64>,
}

/// k-fold cross-validation per day; every fold refits the variant on the
/// training stations and predicts the held-out ones (nugget included).
pub fn run_cv(
    days: &[CvDay<'_>],
    variants: &[ModelVariant],
    cv: &CvConfig,
    conditional_draws: usize,
    seed: u64,
    s: FitSettings<'_>,
) -> Result<CvReport> {
    ensure!(cv.folds >= 2, "cross-validation needs at least 2 folds (got {})", cv.folds);
    ensure!(!variants.is_empty(), "no model variants requested");
    ensure!(!days.is_empty(), "no days to cross-validate");
    normal_quantile(cv.level)?;

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut pooled: BTreeMap<ModelVariant, FoldPrediction> = BTreeMap::new();
    for (d, day) in days.iter().enumerate() {
        let (obs, _) = day.obs.deduplicate();
        ensure!(
            obs.n() >= cv.folds,
            "day {} has {} stations, fewer than {} folds",
            obs.day_id,
            obs.n(),
            cv.folds
        );
        let folds = kfold_assign(obs.n(), cv.folds, item_seed(seed, d))?;
        let tasks: Vec<(usize, ModelVariant)> = (0..cv.folds)
            .flat_map(|f| variants.iter().map(move |&v| (f, v)))
            .collect();
        let results: Vec<Result<FoldPrediction>> = tasks
            .par_iter()
            .map(|&(f, v)| {
                let train = obs.subset(&folds.train_indices(f));
                let test_idx = folds.test_indices(f);
                let test = obs.subset(&test_idx);
                let fit = fit_variant(&train, v, day.base, day.mask, s)?;
                let model = fit.model(&train, s.lattice, s.basis)?;
                let targets = Targets::with_covariates(test.locations.clone(), obs.design_rows(&test_idx));
                predict_intervals(&model, &targets, &test.values, cv, conditional_draws, item_seed(seed, d * 1000 + f))
            })
            .collect();
        let mut any_ok: BTreeMap<ModelVariant, bool> = BTreeMap::new();
        for (&(f, v), r) in tasks.iter().zip(results) {
            match r {
                Ok(p) => {
                    any_ok.insert(v, true);
                    records.push(CvRecord {
                        day: obs.day_id.clone(),
                        model: v,
                        fold: f,
                        metrics: compute_metrics_intervals(&p.mean, &p.lower, &p.upper, &p.truth, cv.level)?,
                    });
                    let e = pooled.entry(v).or_insert_with(|| FoldPrediction {
                        mean: vec![],
                        lower: vec![],
                        upper: vec![],
                        truth: vec![],
                    });
                    e.mean.extend(p.mean);
                    e.lower.extend(p.lower);
                    e.upper.extend(p.upper);
                    e.truth.extend(p.truth);
                }
                Err(e) => {
                    any_ok.entry(v).or_insert(false);
                    let msg = format!("day {} fold {f} variant {v}: {e}", obs.day_id);
                    log::warn!("{msg}");
                    failures.push(msg);
                }
            }
        }
        for (v, ok) in any_ok {
            if !ok {
                failures.push(format!("day {} skipped for variant {v}: all folds failed", obs.day_id));
            }
        }
    }
    let table = variants
        .iter()
        .filter_map(|v| pooled.get(v).map(|p| (v, p)))
        .map(|(&v, p)| {
            let m = compute_metrics_intervals(&p.mean, &p.lower, &p.upper, &p.truth, cv.level)?;
            Ok(CvRow {
                model: v,
                rmse: m.rmse,
                picp: m.picp,
                mpiw: m.mpiw,
                n: m.n,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CvReport {
        folds: cv.folds,
        level: cv.level,
        intervals: cv.intervals,
        table,
        records,
        failures,
    })
}

fn predict_intervals(
    model: &FittedModel,
    targets: &Targets,
    truth: &[f64],
    cv: &CvConfig,
    draws: usize,
    seed: u64,
) -> Result<FoldPrediction> {
    match cv.intervals {
        IntervalKind::Gaussian => {
            let pred = model.predict(targets, true, true)?;
            let z = normal_quantile(cv.level)?;
            Ok(FoldPrediction {
                lower: pred.mean.iter().zip(&pred.se).map(|(m, s)| m - z * s).collect(),
                upper: pred.mean.iter().zip(&pred.se).map(|(m, s)| m + z * s).collect(),
                mean: pred.mean,
                truth: truth.to_vec(),
            })
        }
        IntervalKind::EnsembleQuantile => {
            let pred = model.predict(targets, false, false)?;
            let mut ens = conditional_simulate(model, targets, draws, seed)?;
            // new measurements carry their own nugget noise
            let tau = model.cov().tau2.sqrt();
            for (k, d) in ens.draws.iter_mut().enumerate() {
                let mut rng = stream_rng(seed, Purpose::Conditional, k as u64, 1);
                for v in d.iter_mut() {
                    *v += tau * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let (lower, upper) = ensemble_intervals(&ens, cv.level)?;
            Ok(FoldPrediction {
                mean: pred.mean,
                lower,
                upper,
                truth: truth.to_vec(),
            })
        }
    }
}

/// How the fine-grid standard errors are obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SeMethod {
    None,
    /// Exact posterior variance per target.
    Exact,
    /// Sample standard deviation of conditional draws.
    Conditional { draws: usize, seed: u64 },
}

/// Design rows for `targets` on `grid`: `intercept`, `lon` and `lat` come
/// from the geometry, every other column from the covariate stack, by
/// nearest neighbor or, for `averaged` channels, by averaging the source
/// pixels that fall inside each target cell.
pub fn resample_design(
    names: &[String],
    grid: &PixelGrid,
    covariates: Option<&GridStack>,
    averaged: &[String],
) -> Result<Vec<f64>> {
    let centers = grid.centers();
    let missing: Vec<&str> = names
        .iter()
        .filter(|n| !matches!(n.as_str(), "intercept" | "lon" | "lat"))
        .filter(|n| covariates.is_none_or(|c| c.channel_index(n).is_none()))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "covariate stack lacks channel(s): {}",
            missing.join(", ")
        )));
    }
    let columns: Vec<Vec<f64>> = names
        .iter()
        .map(|n| match n.as_str() {
            "intercept" => vec![1.0; centers.len()],
            "lon" => centers.iter().map(|p| p.x).collect(),
            "lat" => centers.iter().map(|p| p.y).collect(),
            other => {
                let src = covariates.unwrap();
                let values = src.channel(other).unwrap();
                if averaged.iter().any(|a| a == other) {
                    resample_average(&src.grid(), values, grid)
                } else {
                    resample_nearest(&src.grid(), values, &centers)
                }
            }
        })
        .collect();
    Ok((0..centers.len())
        .flat_map(|i| columns.iter().map(move |c| c[i]))
        .collect())
}

/// Value of the nearest source pixel (ties toward the lower index).
pub fn resample_nearest(src: &PixelGrid, values: &[f64], targets: &[Point]) -> Vec<f64> {
    targets.iter().map(|&p| values[src.nearest(p)]).collect()
}

/// Mean of the finite source pixels whose centers lie in each target cell;
/// cells without any fall back to the nearest source pixel.
pub fn resample_average(src: &PixelGrid, values: &[f64], target: &PixelGrid) -> Vec<f64> {
    let mut sum = vec![0.0; target.len()];
    let mut count = vec![0usize; target.len()];
    for (i, p) in src.centers().into_iter().enumerate() {
        if let Some(c) = target.cell_of(p) {
            if values[i].is_finite() {
                sum[c] += values[i];
                count[c] += 1;
            }
        }
    }
    let centers = target.centers();
    (0..target.len())
        .map(|c| {
            if count[c] > 0 {
                sum[c] / count[c] as f64
            } else {
                values[src.nearest(centers[c])]
            }
        })
        .collect()
}

/// Kriging mean (`mean`) and standard error (`se`, latent field) maps on
/// `grid`.
pub fn run_predict_fine(
    model: &FittedModel,
    grid: &PixelGrid,
    covariates: Option<&GridStack>,
    averaged: &[String],
    se: SeMethod,
) -> Result<GridStack> {
    grid.validate()?;
    let centers = grid.centers();
    let names = model.design_names();
    let targets = if names.is_empty() {
        Targets::points(centers)
    } else {
        Targets::with_covariates(centers, resample_design(names, grid, covariates, averaged)?)
    };
    let (mean, se_map, seed) = match se {
        SeMethod::None => (model.predict(&targets, false, false)?.mean, None, None),
        SeMethod::Exact => {
            let p = model.predict(&targets, true, false)?;
            (p.mean, Some(p.se), None)
        }
        SeMethod::Conditional { draws, seed } => {
            let mean = model.predict(&targets, false, false)?.mean;
            let s = conditional_summary(model, &targets, draws, seed)?;
            (mean, Some(s.sd), Some(seed))
        }
    };
    let mut channels = vec![("mean".to_string(), mean)];
    if let Some(s) = se_map {
        channels.push(("se".to_string(), s));
    }
    let mut stack = GridStack::from_channels(*grid, channels)?
        .with_metadata("beta", serde_json::to_value(model.beta()).unwrap())
        .with_metadata("design", serde_json::to_value(names).unwrap())
        .with_metadata("sigma2", model.cov().sigma2.into())
        .with_metadata("tau2", model.cov().tau2.into());
    if let SeMethod::Conditional { draws, .. } = se {
        stack = stack.with_metadata("se_draws", draws.into());
    }
    if let Some(seed) = seed {
        stack = stack.with_seed(seed);
    }
    Ok(stack)
}

/// Conditional draws on `grid` as a stack with one channel per draw.
pub fn conditional_draw_stack(
    model: &FittedModel,
    grid: &PixelGrid,
    covariates: Option<&GridStack>,
    averaged: &[String],
    draws: usize,
    seed: u64,
) -> Result<GridStack> {
    let centers = grid.centers();
    let names = model.design_names();
    let targets = if names.is_empty() {
        Targets::points(centers)
    } else {
        Targets::with_covariates(centers, resample_design(names, grid, covariates, averaged)?)
    };
    let ens = conditional_simulate(model, &targets, draws, seed)?;
    let channels = ens
        .draws
        .into_iter()
        .enumerate()
        .map(|(k, d)| (format!("draw{k:04}"), d))
        .collect();
    let mut stack = GridStack::from_channels(*grid, channels)?.with_seed(seed);
    for (k, v) in ens.metadata {
        stack = stack.with_metadata(&k, v.into());
    }
    Ok(stack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Bounds;

    fn grid(h: usize, w: usize) -> PixelGrid {
        PixelGrid::spanning(Bounds::new(0.0, 1.0, 0.0, 1.0), h, w).unwrap()
    }

    #[test]
    fn window_arithmetic() {
        let g = grid(3, 3);
        let channels = (0..30)
            .map(|d| (format!("d{d}"), (0..9).map(|i| ((d * 7 + i * 3) % 11) as f64).collect()))
            .collect();
        let stack = GridStack::from_channels(g, channels).unwrap();
        let ens = build_window_ensembles(&stack, 15, &WindowConfig::default()).unwrap();
        assert_eq!(ens.r(), 30);
        let (mean, sd) = ens.pixel_moments();
        assert!(mean.iter().all(|m| m.abs() < 1e-10));
        assert!(sd.iter().all(|s| (s - 1.0).abs() < 1e-10));
        let e = build_window_ensembles(&stack, 16, &WindowConfig::default()).unwrap_err();
        assert!(e.to_string().contains("day index 30"));
        assert!(build_window_ensembles(&stack, 14, &WindowConfig::default()).is_err());
    }

    #[test]
    fn gridded_mean_exact_and_lag_errors() {
        let g = grid(6, 7);
        let centers = g.centers();
        let mk = |d: usize, prev: Option<&Vec<f64>>| {
            let cov: Vec<f64> = (0..g.len()).map(|i| ((i * 13 + d * 5) % 17) as f64 / 17.0).collect();
            let value: Vec<f64> = (0..g.len())
                .map(|i| {
                    1.0 + 2.0 * centers[i].x - centers[i].y + 0.7 * cov[i]
                        + prev.map_or(0.0, |p| 0.4 * p[i])
                })
                .collect();
            (value, cov)
        };
        let (v0, c0) = mk(0, None);
        let (v1, c1) = mk(1, Some(&v0));
        let day = |v: Vec<f64>, c: Vec<f64>| {
            GridStack::from_channels(g, vec![("value".into(), v), ("elev".into(), c)]).unwrap()
        };
        let days = vec![day(v0, c0), day(v1, c1)];
        let (res, fits) = fit_gridded_mean(&days).unwrap();
        assert_eq!(res.n_channels(), 1);
        assert!(res.channel_at(0).iter().all(|r| r.abs() < 1e-8));
        assert!((fits[0].alpha - 0.4).abs() < 1e-8);
        assert!((fits[0].beta["elev"] - 0.7).abs() < 1e-8);
        assert!(fit_gridded_mean(&days[..1]).is_err());
    }

    #[test]
    fn masks_and_resampling() {
        let m = observation_mask(1000, 0.03, 1).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 30);
        assert_eq!(m, observation_mask(1000, 0.03, 1).unwrap());
        let src = grid(4, 4);
        let vals: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let coarse = grid(2, 2);
        let avg = resample_average(&src, &vals, &coarse);
        assert_eq!(avg, vec![2.5, 4.5, 10.5, 12.5]);
        let fine = grid(8, 8);
        let nn = resample_nearest(&src, &vals, &fine.centers());
        assert_eq!(nn[0], 0.0);
        assert_eq!(nn[63], 15.0);
        let names = vec!["intercept".to_string(), "lat".into(), "no2".into()];
        let e = resample_design(&names, &coarse, None, &[]).unwrap_err();
        assert!(e.to_string().contains("no2"));
    }
}
