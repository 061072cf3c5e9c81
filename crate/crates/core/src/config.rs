//! Run configuration shared by the drivers and the command-line tool.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cosp::RefineConfig;
use crate::error::{ensure, Error, Result};
use crate::geometry::{Bounds, PixelGrid};
use crate::lattice::{BasisSpec, LatticeGrid};
use crate::likelihood::MleConfig;
use crate::sim::PriorConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Stationary isotropic SAR with `κ²` and `λ` by maximum likelihood.
    Stationary,
    /// Supplied nonstationary fields, `λ` by maximum likelihood.
    Nonstationary,
    /// Supplied fields with the point-data `κ²` increment on land.
    NonstationaryAdjusted,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 3] = [
        ModelVariant::Stationary,
        ModelVariant::Nonstationary,
        ModelVariant::NonstationaryAdjusted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Stationary => "stationary",
            ModelVariant::Nonstationary => "nonstationary",
            ModelVariant::NonstationaryAdjusted => "nonstationary_adjusted",
        }
    }

    pub fn needs_fields(self) -> bool {
        self != ModelVariant::Stationary
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "unknown model variant '{s}' (expected stationary, nonstationary or \
                     nonstationary_adjusted)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatticeConfig {
    pub nx: usize,
    pub ny: usize,
    pub buffer: usize,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        LatticeConfig {
            nx: 128,
            ny: 128,
            buffer: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub n_pairs: usize,
    pub replicates: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            n_pairs: 20_000,
            replicates: 30,
        }
    }
}

/// Days before and after the target day in a moving window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub before: usize,
    pub after: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            before: 15,
            after: 14,
        }
    }
}

impl WindowConfig {
    pub fn len(&self) -> usize {
        self.before + self.after + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StationFilter {
    /// Days with fewer stations after cleaning are dropped.
    pub min_active: usize,
    /// Values above this are treated as anomalous.
    pub max_value: f64,
    pub background_only: bool,
    pub background_label: String,
}

impl Default for StationFilter {
    fn default() -> Self {
        StationFilter {
            min_active: 250,
            max_value: 80.0,
            background_only: true,
            background_label: "background".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalKind {
    /// `mean ± z·SE`.
    Gaussian,
    /// Central quantiles of conditional draws.
    EnsembleQuantile,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub folds: usize,
    pub level: f64,
    pub intervals: IntervalKind,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            folds: 10,
            level: 0.95,
            intervals: IntervalKind::Gaussian,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictionConfig {
    pub height: usize,
    pub width: usize,
    /// Defaults to the run domain.
    pub bounds: Option<Bounds>,
    /// Covariate channels resampled by cell averaging instead of nearest
    /// neighbor.
    pub averaged_channels: Vec<String>,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        PredictionConfig {
            height: 255,
            width: 255,
            bounds: None,
            averaged_channels: vec!["elevation".into()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructionConfig {
    pub observed_fraction: f64,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        ReconstructionConfig {
            observed_fraction: 0.03,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub simulation: u64,
    pub training: u64,
    pub folds: u64,
    pub conditional: u64,
    pub mask: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            simulation: 1,
            training: 2,
            folds: 3,
            conditional: 4,
            mask: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub stations: Option<PathBuf>,
    /// Day grids (one GridStack per day, `value` plus covariate channels).
    pub day_grids: Vec<PathBuf>,
    pub residuals: Option<PathBuf>,
    /// Parameter fields (`log_kappa2`, `rho`, `theta` channels).
    pub params: Option<PathBuf>,
    pub land_mask: Option<PathBuf>,
    /// Covariates for fine-grid prediction.
    pub covariates: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub domain: Bounds,
    pub lattice: LatticeConfig,
    pub basis: BasisSpec,
    pub prior: PriorConfig,
    pub training: TrainingConfig,
    pub window: WindowConfig,
    pub stations: StationFilter,
    pub cv: CvConfig,
    pub conditional_draws: usize,
    pub prediction: PredictionConfig,
    pub reconstruction: ReconstructionConfig,
    pub variant: ModelVariant,
    pub variants: Vec<ModelVariant>,
    pub mle: MleConfig,
    pub refine: RefineConfig,
    pub seeds: Seeds,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            domain: Bounds::new(0.0, 1.0, 0.0, 1.0),
            lattice: LatticeConfig::default(),
            basis: BasisSpec::default(),
            prior: PriorConfig::default(),
            training: TrainingConfig::default(),
            window: WindowConfig::default(),
            stations: StationFilter::default(),
            cv: CvConfig::default(),
            conditional_draws: 1000,
            prediction: PredictionConfig::default(),
            reconstruction: ReconstructionConfig::default(),
            variant: ModelVariant::NonstationaryAdjusted,
            variants: ModelVariant::ALL.to_vec(),
            mle: MleConfig::default(),
            refine: RefineConfig::default(),
            seeds: Seeds::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Validation(format!("invalid run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        self.lattice_grid()?;
        self.basis.validate()?;
        self.prior.validate()?;
        ensure!(self.training.n_pairs >= 1, "training.n_pairs must be at least 1");
        ensure!(self.training.replicates >= 2, "training.replicates must be at least 2");
        ensure!(
            self.stations.max_value.is_finite(),
            "stations.max_value must be finite"
        );
        ensure!(self.cv.folds >= 2, "cv.folds must be at least 2");
        ensure!(
            self.cv.level > 0.0 && self.cv.level < 1.0,
            "cv.level must lie in (0, 1)"
        );
        ensure!(self.conditional_draws >= 2, "conditional_draws must be at least 2");
        self.prediction_grid()?;
        let f = self.reconstruction.observed_fraction;
        ensure!(
            f > 0.0 && f < 1.0,
            "reconstruction.observed_fraction must lie in (0, 1)"
        );
        ensure!(!self.variants.is_empty(), "variants must not be empty");
        self.mle.search.validate()?;
        self.refine.search.validate()?;
        for (name, [lo, hi]) in [
            ("mle.log_kappa2", self.mle.log_kappa2),
            ("mle.log_lambda", self.mle.log_lambda),
            ("refine.log_lambda", self.refine.log_lambda),
        ] {
            ensure!(
                lo.is_finite() && hi.is_finite() && lo < hi,
                "{name} must satisfy lo < hi"
            );
        }
        ensure!(
            self.refine.kappa_point_max > 0.0,
            "refine.kappa_point_max must be positive"
        );
        Ok(())
    }

    pub fn lattice_grid(&self) -> Result<LatticeGrid> {
        LatticeGrid::build(self.domain, self.lattice.nx, self.lattice.ny, self.lattice.buffer)
    }

    pub fn prediction_grid(&self) -> Result<PixelGrid> {
        PixelGrid::spanning(
            self.prediction.bounds.unwrap_or(self.domain),
            self.prediction.height,
            self.prediction.width,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(cfg.window.len(), 30);
        assert_eq!(cfg.stations.min_active, 250);
        assert_eq!(cfg.cv.folds, 10);
    }

    #[test]
    fn partial_and_invalid_configs() {
        let cfg = RunConfig::from_json(r#"{"variant": "stationary", "cv": {"folds": 5}}"#).unwrap();
        assert_eq!(cfg.variant, ModelVariant::Stationary);
        assert_eq!(cfg.cv.folds, 5);
        assert_eq!(cfg.cv.level, 0.95);
        assert!(RunConfig::from_json(r#"{"unknown_key": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"cv": {"fold": 5}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"cv": {"folds": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"variant": "other"}"#).is_err());
        assert_eq!("nonstationary".parse::<ModelVariant>().unwrap(), ModelVariant::Nonstationary);
    }
}
