//! Unconditional simulation, ensemble standardization, parameter-field priors
//! and synthetic training-set generation.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::path::{Path, PathBuf};

use faer::Mat;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::PixelGrid;
use crate::gridstack::GridStack;
use crate::lattice::{evaluate_basis, BasisMatrix, BasisSpec, LatticeGrid};
use crate::rng::{stream_rng, Purpose};
use crate::sar::{build_sar, ParamFields, SarMatrix};
use crate::sparse::SparseLu;

const SOLVE_BLOCK: usize = 128;

/// `r` replicate fields on an `h × w` grid, stored replicate-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEnsemble {
    r: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
    standardized: bool,
}

impl FieldEnsemble {
    pub fn new(r: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        ensure!(r >= 1 && height >= 1 && width >= 1, "empty ensemble");
        ensure!(
            values.len() == r * height * width,
            "ensemble payload has {} values, expected {r} x {height} x {width}",
            values.len()
        );
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            let n = height * width;
            return Err(Error::Numerical(format!(
                "non-finite ensemble value in replicate {} at pixel {}",
                i / n,
                i % n
            )));
        }
        Ok(FieldEnsemble {
            r,
            height,
            width,
            values,
            standardized: false,
        })
    }

    pub fn from_replicates(height: usize, width: usize, reps: Vec<Vec<f64>>) -> Result<Self> {
        let r = reps.len();
        let mut values = Vec::with_capacity(r * height * width);
        for (k, rep) in reps.into_iter().enumerate() {
            ensure!(
                rep.len() == height * width,
                "replicate {k} has {} values, expected {}",
                rep.len(),
                height * width
            );
            values.extend(rep);
        }
        Self::new(r, height, width, values)
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn replicate(&self, k: usize) -> &[f64] {
        let n = self.n_pixels();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn replicates(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n_pixels())
    }

    /// Values of one pixel across replicates.
    pub fn pixel(&self, p: usize) -> Vec<f64> {
        self.replicates().map(|rep| rep[p]).collect()
    }

    /// Per-pixel sample mean and standard deviation (denominator `r - 1`).
    pub fn pixel_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_pixels();
        let r = self.r as f64;
        let mut mean = vec![0.0; n];
        for rep in self.replicates() {
            for (m, v) in mean.iter_mut().zip(rep) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= r);
        let mut ss = vec![0.0; n];
        for rep in self.replicates() {
            for ((s, v), m) in ss.iter_mut().zip(rep).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let sd = ss.iter().map(|s| (s / (r - 1.0)).sqrt()).collect();
        (mean, sd)
    }
}

/// Per-pixel centering and scaling across replicates (sample sd, `r - 1`).
pub fn standardize_ensemble(ens: &FieldEnsemble) -> Result<FieldEnsemble> {
    ensure!(ens.r >= 2, "standardization needs at least 2 replicates");
    if let Some(i) = ens.values.iter().position(|v| !v.is_finite()) {
        let p = i % ens.n_pixels();
        return Err(Error::Validation(format!(
            "replicate {} has a non-finite value at pixel (row {}, col {}); cannot standardize",
            i / ens.n_pixels(),
            p / ens.width,
            p % ens.width
        )));
    }
    let (mean, sd) = ens.pixel_moments();
    let scale = mean.iter().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap().abs().max(1.0);
    if let Some(p) = sd.iter().position(|&s| !(s > 1e-14 * scale)) {
        return Err(Error::Numerical(format!(
            "pixel (row {}, col {}) is constant across replicates; cannot standardize",
            p / ens.width,
            p % ens.width
        )));
    }
    let n = ens.n_pixels();
    let mut values = ens.values.clone();
    for rep in values.chunks_exact_mut(n) {
        for ((v, m), s) in rep.iter_mut().zip(&mean).zip(&sd) {
            *v = (*v - m) / s;
        }
    }
    Ok(FieldEnsemble {
        values,
        standardized: true,
        ..*ens
    })
}

/// Solves `B c = e` for each noise vector in `noise`.
pub fn coefficients_from_noise(b: &SarMatrix, noise: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let lu = factor_sar(b)?;
    let m = b.dim();
    for (k, e) in noise.iter().enumerate() {
        ensure!(e.len() == m, "noise vector {k} has length {}, expected {m}", e.len());
    }
    let out: Vec<Vec<f64>> = noise
        .par_chunks(SOLVE_BLOCK)
        .flat_map_iter(|block| solve_block(&lu, m, block.len(), |j, col| col.copy_from_slice(&block[j])))
        .collect();
    check_finite(&out)?;
    Ok(out)
}

/// Independent draws `c ~ N(0, Q⁻¹)` via `B c = e`, `e` standard normal.
/// Draw `k` uses its own random stream, so results do not depend on the
/// thread count.
pub fn simulate_coefficients(b: &SarMatrix, n_draws: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    simulate_coefficients_at(b, n_draws, seed, 0)
}

pub(crate) fn simulate_coefficients_at(
    b: &SarMatrix,
    n_draws: usize,
    seed: u64,
    major: u64,
) -> Result<Vec<Vec<f64>>> {
    ensure!(n_draws >= 1, "n_draws must be at least 1");
    let lu = factor_sar(b)?;
    let m = b.dim();
    let starts: Vec<usize> = (0..n_draws).step_by(SOLVE_BLOCK).collect();
    let out: Vec<Vec<f64>> = starts
        .par_iter()
        .flat_map_iter(|&s| {
            let len = SOLVE_BLOCK.min(n_draws - s);
            solve_block(&lu, m, len, |j, col| {
                let mut rng = stream_rng(seed, Purpose::Noise, major, (s + j) as u64);
                fill_normal(&mut rng, col);
            })
        })
        .collect();
    check_finite(&out)?;
    Ok(out)
}

fn fill_normal(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for v in out {
        *v = rng.sample(StandardNormal);
    }
}

pub(crate) fn factor_sar(b: &SarMatrix) -> Result<SparseLu> {
    let mat = b.matrix();
    if let Some(i) = (0..mat.nrows()).find(|&i| mat.get(i, i) == 0.0) {
        return Err(Error::Numerical(format!(
            "SAR matrix has a zero diagonal at node {i}; kappa2 and dispersion vanish there"
        )));
    }
    SparseLu::factor(mat)
}

fn solve_block(
    lu: &SparseLu,
    m: usize,
    len: usize,
    mut fill: impl FnMut(usize, &mut [f64]),
) -> std::vec::IntoIter<Vec<f64>> {
    let mut rhs = Mat::<f64>::zeros(m, len);
    for j in 0..len {
        fill(j, rhs.col_mut(j).try_as_col_major_mut().unwrap().as_slice_mut());
    }
    lu.solve_in_place(rhs.as_mut());
    (0..len)
        .map(|j| rhs.col(j).iter().copied().collect())
        .collect::<Vec<_>>()
        .into_iter()
}

fn check_finite(draws: &[Vec<f64>]) -> Result<()> {
    let mut bad: Vec<usize> = Vec::new();
    for d in draws {
        for (i, v) in d.iter().enumerate() {
            if !v.is_finite() && !bad.contains(&i) {
                bad.push(i);
            }
        }
        if bad.len() >= 10 {
            break;
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        bad.sort_unstable();
        Err(Error::Numerical(format!(
            "SAR solve is singular; non-finite coefficients at nodes {bad:?}"
        )))
    }
}

/// Maps coefficient draws to fields `Φ c`, reshaped to `height × width`.
pub fn fields_from_coefficients(
    phi: &BasisMatrix,
    coefs: &[Vec<f64>],
    height: usize,
    width: usize,
) -> Result<FieldEnsemble> {
    ensure!(
        phi.nrows() == height * width,
        "basis has {} rows but the grid has {height} x {width} pixels",
        phi.nrows()
    );
    for (k, c) in coefs.iter().enumerate() {
        ensure!(
            c.len() == phi.ncols(),
            "coefficient draw {k} has length {}, basis has {} columns",
            c.len(),
            phi.ncols()
        );
    }
    let reps: Vec<Vec<f64>> = coefs.par_iter().map(|c| phi.matrix().mul_vec(c)).collect();
    FieldEnsemble::from_replicates(height, width, reps)
}

/// `r` unstandardized replicate fields `Φ c⁽ᵏ⁾` with `B c⁽ᵏ⁾ = e⁽ᵏ⁾`.
pub fn simulate_fields(
    b: &SarMatrix,
    phi: &BasisMatrix,
    shape: (usize, usize),
    r: usize,
    seed: u64,
) -> Result<FieldEnsemble> {
    ensure!(
        phi.ncols() == b.dim(),
        "basis has {} columns but the SAR operator has {} nodes",
        phi.ncols(),
        b.dim()
    );
    ensure!(
        phi.nrows() == shape.0 * shape.1,
        "basis has {} rows but the grid has {} x {} pixels",
        phi.nrows(),
        shape.0,
        shape.1
    );
    let coefs = simulate_coefficients(b, r, seed)?;
    fields_from_coefficients(phi, &coefs, shape.0, shape.1)
}

/// Mixture weights of the three spatial patterns used by the prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternWeights {
    pub constant: f64,
    pub gradient: f64,
    pub smooth: f64,
}

impl Default for PatternWeights {
    fn default() -> Self {
        PatternWeights {
            constant: 0.1,
            gradient: 0.3,
            smooth: 0.6,
        }
    }
}

/// Prior over parameter fields. Ranges are half-open `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub log_kappa2: [f64; 2],
    pub rho: [f64; 2],
    pub theta: [f64; 2],
    /// Number of cosine harmonics in the smooth pattern.
    pub harmonics: usize,
    pub weights: PatternWeights,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            log_kappa2: [-9.2, 2.3],
            rho: [1.0, 7.0],
            theta: [-FRAC_PI_2, FRAC_PI_2],
            harmonics: 4,
            weights: PatternWeights::default(),
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [
            ("log_kappa2", self.log_kappa2),
            ("rho", self.rho),
            ("theta", self.theta),
        ] {
            ensure!(
                lo.is_finite() && hi.is_finite() && lo < hi,
                "prior range for {name} must satisfy lo < hi (got [{lo}, {hi}])"
            );
        }
        ensure!(self.rho[0] >= 1.0, "prior range for rho must start at >= 1");
        ensure!(
            self.theta[0] >= -FRAC_PI_2 && self.theta[1] <= FRAC_PI_2,
            "prior range for theta must lie within [-pi/2, pi/2)"
        );
        ensure!(self.harmonics >= 1, "prior needs at least one harmonic");
        let w = self.weights;
        ensure!(
            w.constant >= 0.0 && w.gradient >= 0.0 && w.smooth >= 0.0,
            "pattern weights must be non-negative"
        );
        ensure!(
            (w.constant + w.gradient + w.smooth - 1.0).abs() < 1e-9,
            "pattern weights must sum to 1"
        );
        Ok(())
    }
}

/// Draws `(κ², ρ, θ)` fields from the prior.
pub fn sample_param_fields(grid: &LatticeGrid, cfg: &PriorConfig, seed: u64) -> Result<ParamFields> {
    sample_param_fields_at(grid, cfg, seed, 0)
}

fn sample_param_fields_at(
    grid: &LatticeGrid,
    cfg: &PriorConfig,
    seed: u64,
    major: u64,
) -> Result<ParamFields> {
    grid.validate()?;
    cfg.validate()?;
    let coords: Vec<(f64, f64)> = (0..grid.len())
        .map(|i| {
            let (r, c) = grid.row_col(i);
            (
                c as f64 / (grid.cols() - 1) as f64,
                r as f64 / (grid.rows() - 1) as f64,
            )
        })
        .collect();
    let channel = |slot: u64, [lo, hi]: [f64; 2]| -> Vec<f64> {
        let mut rng = stream_rng(seed, Purpose::Prior, major, slot);
        unit_pattern(&mut rng, &coords, cfg)
            .into_iter()
            .map(|u| {
                let v = lo + (hi - lo) * u;
                if v >= hi {
                    hi.next_down()
                } else {
                    v.max(lo)
                }
            })
            .collect()
    };
    let log_k = channel(0, cfg.log_kappa2);
    let rho = channel(1, cfg.rho);
    let theta = channel(2, cfg.theta);
    ParamFields::from_log_channels(&log_k, &rho, &theta)
}

/// One spatial pattern with values in `[0, 1)` at the normalized coordinates.
fn unit_pattern(rng: &mut ChaCha8Rng, coords: &[(f64, f64)], cfg: &PriorConfig) -> Vec<f64> {
    let w = cfg.weights;
    let pick: f64 = rng.random();
    if pick < w.constant {
        let u: f64 = rng.random();
        return vec![u; coords.len()];
    }
    let raw: Vec<f64> = if pick < w.constant + w.gradient {
        let dir: f64 = rng.random_range(0.0..2.0 * PI);
        let (s, c) = dir.sin_cos();
        let p: Vec<f64> = coords.iter().map(|&(x, y)| c * x + s * y).collect();
        let (lo, hi) = min_max(&p);
        let a: f64 = rng.random();
        let b: f64 = rng.random();
        p.iter()
            .map(|v| {
                let t = if hi - lo > 1e-12 { (v - lo) / (hi - lo) } else { 0.5 };
                a + (b - a) * t
            })
            .collect()
    } else {
        // cosine harmonics with at most 4 cycles per domain, then a logistic squash
        let mut terms = Vec::with_capacity(cfg.harmonics);
        while terms.len() < cfg.harmonics {
            let fx: f64 = rng.random_range(-4.0..4.0);
            let fy: f64 = rng.random_range(-4.0..4.0);
            if fx.hypot(fy) > 4.0 {
                continue;
            }
            let phase: f64 = rng.random_range(0.0..2.0 * PI);
            let amp: f64 = rng.sample(StandardNormal);
            terms.push((fx, fy, phase, amp));
        }
        let s: Vec<f64> = coords
            .iter()
            .map(|&(x, y)| {
                terms
                    .iter()
                    .map(|&(fx, fy, ph, a)| a * (2.0 * PI * (fx * x + fy * y) + ph).cos())
                    .sum()
            })
            .collect();
        let n = s.len() as f64;
        let mean = s.iter().sum::<f64>() / n;
        let sd = (s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let sharp: f64 = rng.random_range(0.5..4.0);
        let shift: f64 = rng.random_range(-1.0..1.0);
        s.iter()
            .map(|v| {
                let z = if sd > 1e-12 { (v - mean) / sd } else { 0.0 };
                1.0 / (1.0 + (-(sharp * z + shift)).exp())
            })
            .collect()
    };
    raw.into_iter().map(|u| u.clamp(0.0, 1.0)).collect()
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Standardized replicate ensemble `G` and the parameter fields `P` that
/// generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub g: FieldEnsemble,
    pub p: ParamFields,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Train/validation/test sizes for a 90/8/2 split.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (0.9 * n as f64).round() as usize;
    let val = ((0.08 * n as f64).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Deterministic split assignment for pair ids `0..n`.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let (train, val, _) = split_sizes(n);
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut stream_rng(seed, Purpose::Split, 0, 0));
    let mut out = vec![Split::Test; n];
    for (rank, &id) in ids.iter().enumerate() {
        out[id] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Validation
        } else {
            Split::Test
        };
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub split: Split,
    pub g_file: String,
    pub p_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub n_pairs: usize,
    pub replicates: usize,
    pub seed: u64,
    pub lattice: LatticeGrid,
    pub basis: BasisSpec,
    pub prior: PriorConfig,
    /// Free-text label of the prior family.
    pub prior_family: String,
    pub sd_denominator: String,
    pub split_sizes: BTreeMap<Split, usize>,
    pub pairs: Vec<ManifestEntry>,
}

/// Destination for generated pairs. Writes arrive in pair-id order.
pub trait DatasetSink {
    /// Whether pair `id` is already present (resume support).
    fn contains(&self, id: usize) -> bool;
    fn write_pair(&mut self, id: usize, g: &GridStack, p: &GridStack) -> Result<()>;
    fn write_manifest(&mut self, manifest: &DatasetManifest) -> Result<()>;
}

pub fn pair_file_names(id: usize) -> (String, String) {
    (format!("pair_{id:06}.G.gstk"), format!("pair_{id:06}.P.gstk"))
}

/// Writes one GridStack file per tensor plus `manifest.json` into a directory.
#[derive(Debug, Clone)]
pub struct DirectorySink {
    root: PathBuf,
}

impl DirectorySink {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(DirectorySink { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn write_atomic(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let tmp = self.root.join(format!(".{name}.tmp"));
        let dst = self.root.join(name);
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))
    }
}

impl DatasetSink for DirectorySink {
    fn contains(&self, id: usize) -> bool {
        let (g, p) = pair_file_names(id);
        self.root.join(g).is_file() && self.root.join(p).is_file()
    }

    fn write_pair(&mut self, id: usize, g: &GridStack, p: &GridStack) -> Result<()> {
        let (gn, pn) = pair_file_names(id);
        self.write_atomic(&gn, &g.to_bytes())?;
        self.write_atomic(&pn, &p.to_bytes())
    }

    fn write_manifest(&mut self, manifest: &DatasetManifest) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(manifest)
            .map_err(|e| Error::Format(format!("cannot encode manifest: {e}")))?;
        bytes.push(b'\n');
        self.write_atomic("manifest.json", &bytes)
    }
}

/// Keeps everything in memory; for tests and small runs.
#[derive(Debug, Default, Clone)]
pub struct MemorySink {
    pub pairs: BTreeMap<usize, (GridStack, GridStack)>,
    pub manifest: Option<DatasetManifest>,
}

impl DatasetSink for MemorySink {
    fn contains(&self, id: usize) -> bool {
        self.pairs.contains_key(&id)
    }

    fn write_pair(&mut self, id: usize, g: &GridStack, p: &GridStack) -> Result<()> {
        self.pairs.insert(id, (g.clone(), p.clone()));
        Ok(())
    }

    fn write_manifest(&mut self, manifest: &DatasetManifest) -> Result<()> {
        self.manifest = Some(manifest.clone());
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_pairs: usize,
    pub written: usize,
    pub skipped: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

/// Generates pair `id` of a dataset: prior draw, SAR, `r` fields on the
/// lattice nodes, standardization.
pub fn generate_pair(
    id: usize,
    lattice: &LatticeGrid,
    phi: &BasisMatrix,
    cfg: &PriorConfig,
    r: usize,
    seed: u64,
) -> Result<TrainingPair> {
    let p = sample_param_fields_at(lattice, cfg, seed, id as u64)?;
    let b = build_sar(lattice, &p)?;
    let coefs = simulate_coefficients_at(&b, r, seed, id as u64)?;
    let g = fields_from_coefficients(phi, &coefs, lattice.rows(), lattice.cols())?;
    let g = standardize_ensemble(&g)?;
    Ok(TrainingPair { g, p })
}

/// Writes `n_pairs` training pairs and a manifest to `sink`. Pairs already
/// present in the sink are skipped, so an interrupted run can be resumed.
pub fn generate_training_set(
    n_pairs: usize,
    lattice: &LatticeGrid,
    basis: &BasisSpec,
    cfg: &PriorConfig,
    r: usize,
    seed: u64,
    sink: &mut dyn DatasetSink,
) -> Result<DatasetSummary> {
    ensure!(n_pairs >= 1, "n_pairs must be at least 1");
    ensure!(r >= 2, "replicate count must be at least 2");
    ensure!(n_pairs <= u32::MAX as usize, "too many pairs");
    cfg.validate()?;
    basis.validate()?;
    let grid = lattice.as_pixel_grid();
    let phi = evaluate_basis(lattice, basis, &grid.centers())?;
    let splits = assign_splits(n_pairs, seed);

    let todo: Vec<usize> = (0..n_pairs).filter(|&id| !sink.contains(id)).collect();
    let skipped = n_pairs - todo.len();
    let batch = 4 * rayon::current_num_threads().max(1);
    for ids in todo.chunks(batch) {
        let stacks: Vec<Result<(GridStack, GridStack)>> = ids
            .par_iter()
            .map(|&id| {
                let pair = generate_pair(id, lattice, &phi, cfg, r, seed)
                    .map_err(|e| annotate(e, id))?;
                pair_stacks(&pair, id, splits[id], grid, seed)
            })
            .collect();
        for (&id, st) in ids.iter().zip(stacks) {
            let (g, p) = st?;
            sink.write_pair(id, &g, &p)?;
        }
        log::info!("generated pairs up to {}", ids.last().unwrap());
    }

    let (train, validation, test) = split_sizes(n_pairs);
    let manifest = DatasetManifest {
        format: "nslk-training-v1".into(),
        n_pairs,
        replicates: r,
        seed,
        lattice: *lattice,
        basis: *basis,
        prior: *cfg,
        prior_family: "mixture of constant, linear-gradient and logistic-squashed cosine-harmonic \
                       surfaces (stand-in prior)"
            .into(),
        sd_denominator: "r-1".into(),
        split_sizes: BTreeMap::from([
            (Split::Train, train),
            (Split::Validation, validation),
            (Split::Test, test),
        ]),
        pairs: (0..n_pairs)
            .map(|id| {
                let (g_file, p_file) = pair_file_names(id);
                ManifestEntry {
                    id,
                    split: splits[id],
                    g_file,
                    p_file,
                }
            })
            .collect(),
    };
    sink.write_manifest(&manifest)?;
    Ok(DatasetSummary {
        n_pairs,
        written: todo.len(),
        skipped,
        train,
        validation,
        test,
    })
}

fn annotate(e: Error, id: usize) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("pair {id}: {m}")),
        Error::Validation(m) => Error::Validation(format!("pair {id}: {m}")),
        other => other,
    }
}

/// GridStack encodings of a pair: `G` as `r` channels, `P` as
/// `[log_kappa2, rho, theta]`.
pub fn pair_stacks(
    pair: &TrainingPair,
    id: usize,
    split: Split,
    grid: PixelGrid,
    seed: u64,
) -> Result<(GridStack, GridStack)> {
    let names = (0..pair.g.r()).map(|k| format!("g{k:03}")).collect();
    let split_name = serde_json::to_value(split).unwrap();
    let g = GridStack::new(grid, names, pair.g.values().to_vec())?
        .with_seed(seed)
        .with_metadata("pair_id", id.into())
        .with_metadata("split", split_name.clone())
        .with_metadata("standardized", pair.g.is_standardized().into())
        .with_metadata("sd_denominator", "r-1".into());
    let [lk, rho, theta] = pair.p.to_log_channels();
    let p = GridStack::from_channels(
        grid,
        vec![
            ("log_kappa2".into(), lk),
            ("rho".into(), rho),
            ("theta".into(), theta),
        ],
    )?
    .with_seed(seed)
    .with_metadata("pair_id", id.into())
    .with_metadata("split", split_name);
    Ok((g, p))
}

/// Decodes a `P` stack back into parameter fields.
pub fn params_from_stack(stack: &GridStack) -> Result<ParamFields> {
    ParamFields::from_log_channels(
        stack.channel("log_kappa2")?,
        stack.channel("rho")?,
        stack.channel("theta")?,
    )
}
