//! Change of support between point and areal data, and the κ² adjustment
//! that carries gridded-data structure over to point observations.

use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{Bounds, PixelGrid, Point};
use crate::gridstack::GridStack;
use crate::lattice::{evaluate_basis, BasisSpec, LatticeGrid};
use crate::likelihood::{
    fit_lambda, CovParams, MleConfig, PrecisionFactor, ProfileEngine, SpatialData,
};
use crate::optimize::{coordinate_golden, SearchConfig, SearchResult};
use crate::sar::ParamFields;
use crate::sparse::CsrMatrix;

/// Rectangular cells tiling a domain, row-major from `(x0, y0)` (the lower
/// left corner), with a `q × q` midpoint rule per cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArealPartition {
    pub x0: f64,
    pub y0: f64,
    pub dx: f64,
    pub dy: f64,
    pub nx: usize,
    pub ny: usize,
    pub q: usize,
}

impl ArealPartition {
    /// Partition whose cells are the pixels of `grid`.
    pub fn from_pixels(grid: &PixelGrid, q: usize) -> Result<Self> {
        grid.validate()?;
        let e = grid.extent();
        let p = ArealPartition {
            x0: e.xmin,
            y0: e.ymin,
            dx: grid.dx,
            dy: grid.dy,
            nx: grid.width,
            ny: grid.height,
            q,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.nx >= 1 && self.ny >= 1, "partition needs at least one cell");
        ensure!(self.q >= 1, "quadrature order must be at least 1");
        ensure!(
            self.dx > 0.0 && self.dy > 0.0 && self.dx.is_finite() && self.dy.is_finite(),
            "cell sizes must be positive"
        );
        ensure!(self.x0.is_finite() && self.y0.is_finite(), "partition origin must be finite");
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bounds(&self) -> Bounds {
        Bounds::new(
            self.x0,
            self.x0 + self.nx as f64 * self.dx,
            self.y0,
            self.y0 + self.ny as f64 * self.dy,
        )
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }

    pub fn centroid(&self, i: usize) -> Point {
        let (r, c) = (i / self.nx, i % self.nx);
        Point::new(
            self.x0 + (c as f64 + 0.5) * self.dx,
            self.y0 + (r as f64 + 0.5) * self.dy,
        )
    }

    pub fn centroids(&self) -> Vec<Point> {
        (0..self.len()).map(|i| self.centroid(i)).collect()
    }

    /// Cell containing `p`; points on an interior edge belong to the cell
    /// above/right, points on the outer upper/right edge to the last cell.
    pub fn cell_of(&self, p: Point) -> Option<usize> {
        if !p.is_finite() {
            return None;
        }
        let fx = (p.x - self.x0) / self.dx;
        let fy = (p.y - self.y0) / self.dy;
        if fx < 0.0 || fy < 0.0 || fx > self.nx as f64 || fy > self.ny as f64 {
            return None;
        }
        let c = (fx.floor() as usize).min(self.nx - 1);
        let r = (fy.floor() as usize).min(self.ny - 1);
        Some(r * self.nx + c)
    }

    /// The `q²` midpoint quadrature nodes of cell `i`.
    pub fn quadrature_points(&self, i: usize) -> Vec<Point> {
        let (r, c) = (i / self.nx, i % self.nx);
        let q = self.q as f64;
        (0..self.q)
            .flat_map(|b| (0..self.q).map(move |a| (a, b)))
            .map(|(a, b)| {
                Point::new(
                    self.x0 + (c as f64 + (a as f64 + 0.5) / q) * self.dx,
                    self.y0 + (r as f64 + (b as f64 + 0.5) / q) * self.dy,
                )
            })
            .collect()
    }
}

/// Cell means of a fine-grid field. Cell edges must coincide with pixel
/// edges.
pub fn areal_average(field: &[f64], fine: &PixelGrid, part: &ArealPartition) -> Result<Vec<f64>> {
    fine.validate()?;
    part.validate()?;
    ensure!(
        field.len() == fine.len(),
        "field has {} values for a {}x{} grid",
        field.len(),
        fine.height,
        fine.width
    );
    let kx = part.dx / fine.dx;
    let ky = part.dy / fine.dy;
    let e = fine.extent();
    let b = part.bounds();
    let tol = 1e-9;
    let nested = (kx - kx.round()).abs() < tol * kx.max(1.0)
        && (ky - ky.round()).abs() < tol * ky.max(1.0)
        && kx.round() >= 1.0
        && ky.round() >= 1.0
        && (e.xmin - b.xmin).abs() < tol * part.dx.max(1.0)
        && (e.ymin - b.ymin).abs() < tol * part.dy.max(1.0)
        && fine.width == part.nx * kx.round() as usize
        && fine.height == part.ny * ky.round() as usize;
    if !nested {
        return Err(Error::Validation(format!(
            "fine grid ({}x{}, spacing {}x{}) does not nest in the partition ({}x{} cells of {}x{})",
            fine.height, fine.width, fine.dx, fine.dy, part.ny, part.nx, part.dx, part.dy
        )));
    }
    let (kx, ky) = (kx.round() as usize, ky.round() as usize);
    let inv = 1.0 / (kx * ky) as f64;
    Ok((0..part.len())
        .map(|i| {
            let (r, c) = (i / part.nx, i % part.nx);
            let mut s = 0.0;
            for fr in r * ky..(r + 1) * ky {
                for fc in c * kx..(c + 1) * kx {
                    s += field[fr * fine.width + fc];
                }
            }
            s * inv
        })
        .collect())
}

/// Basis rows averaged over each cell's quadrature nodes: `Φ̄` (N × m).
pub fn areal_basis(lattice: &LatticeGrid, basis: &BasisSpec, part: &ArealPartition) -> Result<CsrMatrix> {
    part.validate()?;
    let nq = part.q * part.q;
    let w = 1.0 / nq as f64;
    let rows: Vec<Vec<(usize, f64)>> = (0..part.len())
        .into_par_iter()
        .map(|i| {
            let phi = evaluate_basis(lattice, basis, &part.quadrature_points(i))?.into_matrix();
            let mut row: Vec<(usize, f64)> = Vec::new();
            for k in 0..phi.nrows() {
                let (c, v) = phi.row(k);
                row.extend(c.iter().zip(v).map(|(&c, &v)| (c, w * v)));
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    Ok(CsrMatrix::from_rows(lattice.len(), rows))
}

/// Default cap on the dense areal covariance dimension.
pub const AREAL_CAP: usize = 10_000;

/// `σ² A Q⁻¹ Bᵀ` for sparse row sets `A`, `B` (dense output).
pub fn basis_cross_covariance(
    prec: &PrecisionFactor,
    sigma2: f64,
    a: &CsrMatrix,
    b: &CsrMatrix,
) -> Mat<f64> {
    let m = prec.dim();
    let nb = b.nrows();
    let block = 64;
    let starts: Vec<usize> = (0..nb).step_by(block).collect();
    let cols: Vec<Mat<f64>> = starts
        .par_iter()
        .map(|&s| {
            let len = block.min(nb - s);
            let mut rhs = Mat::<f64>::zeros(m, len);
            for j in 0..len {
                let (c, v) = b.row(s + j);
                for (&c, &v) in c.iter().zip(v) {
                    rhs[(c, j)] = v;
                }
            }
            prec.cholesky().solve_in_place(rhs.as_mut());
            a.mul_mat(&rhs)
        })
        .collect();
    let mut out = Mat::<f64>::zeros(a.nrows(), nb);
    for (&s, blk) in starts.iter().zip(&cols) {
        for j in 0..blk.ncols() {
            for i in 0..a.nrows() {
                out[(i, s + j)] = sigma2 * blk[(i, j)];
            }
        }
    }
    out
}

/// Covariance of the cell averages of the latent field, by tensor-product
/// midpoint quadrature of `C(s, s') = σ² Φ(s) Q⁻¹ Φ(s')ᵀ`.
pub fn areal_covariance(
    cov: &CovParams,
    lattice: &LatticeGrid,
    basis: &BasisSpec,
    part: &ArealPartition,
    cap: usize,
) -> Result<Mat<f64>> {
    ensure!(
        part.len() <= cap,
        "areal covariance of {} cells exceeds the cap of {cap}",
        part.len()
    );
    cov.validate()?;
    let prec = PrecisionFactor::new(lattice, &cov.params)?;
    let phibar = areal_basis(lattice, basis, part)?;
    let mut s = basis_cross_covariance(&prec, cov.sigma2, &phibar, &phibar);
    symmetrize(&mut s);
    Ok(s)
}

/// Point covariance `σ² Φ(s) Q⁻¹ Φ(s')ᵀ` among `points`.
pub fn point_covariance(
    cov: &CovParams,
    lattice: &LatticeGrid,
    basis: &BasisSpec,
    points: &[Point],
) -> Result<Mat<f64>> {
    cov.validate()?;
    let prec = PrecisionFactor::new(lattice, &cov.params)?;
    let phi = evaluate_basis(lattice, basis, points)?.into_matrix();
    let mut s = basis_cross_covariance(&prec, cov.sigma2, &phi, &phi);
    symmetrize(&mut s);
    Ok(s)
}

fn symmetrize(s: &mut Mat<f64>) {
    for i in 0..s.nrows() {
        for j in 0..i {
            let v = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
}

/// Error-structure parameters of the gridded (areal) data source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CospNoise {
    /// Areal measurement-error variance `ξ²`.
    pub xi2: f64,
    /// Lag coefficient of the areal mean model.
    pub alpha: f64,
}

impl CospNoise {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.xi2 >= 0.0 && self.xi2.is_finite(), "xi2 must be non-negative");
        ensure!(self.alpha.is_finite(), "alpha must be finite");
        Ok(())
    }
}

/// Covariance of the point-level error `η⁽¹⁾` between `s` and `s2`.
///
/// Same point: `Σ̄ᵢᵢ + α²ξ² + Cψ(s,s) + τ²`; same cell: `Σ̄ᵢᵢ + α²ξ² + Cψ(s,s')`;
/// different cells: `Σ̄ᵢⱼ + Cψ(s,s')`.
pub fn eta1_covariance(
    s: Point,
    s2: Point,
    part: &ArealPartition,
    sigma_gbar: &Mat<f64>,
    psi_cov: &dyn Fn(Point, Point) -> f64,
    tau2: f64,
    noise: CospNoise,
) -> Result<f64> {
    noise.validate()?;
    ensure!(tau2 >= 0.0, "tau2 must be non-negative");
    ensure!(
        sigma_gbar.nrows() == part.len() && sigma_gbar.ncols() == part.len(),
        "areal covariance is {}x{} for {} cells",
        sigma_gbar.nrows(),
        sigma_gbar.ncols(),
        part.len()
    );
    let locate = |p: Point| {
        part.cell_of(p).ok_or_else(|| {
            Error::Validation(format!("point ({}, {}) lies outside the partition", p.x, p.y))
        })
    };
    let i = locate(s)?;
    let j = locate(s2)?;
    let psi = psi_cov(s, s2);
    let lagged = noise.alpha * noise.alpha * noise.xi2;
    Ok(if s == s2 {
        sigma_gbar[(i, i)] + lagged + psi + tau2
    } else if i == j {
        sigma_gbar[(i, i)] + lagged + psi
    } else {
        sigma_gbar[(i, j)] + psi
    })
}

/// Per-node weights, typically a binary land mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMask {
    pub weights: Vec<f64>,
}

impl WeightMask {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let w = WeightMask { weights };
        ensure!(
            w.weights.iter().all(|v| (0.0..=1.0).contains(v)),
            "mask weights must lie in [0, 1]"
        );
        Ok(w)
    }

    pub fn ones(m: usize) -> Self {
        WeightMask {
            weights: vec![1.0; m],
        }
    }

    pub fn zeros(m: usize) -> Self {
        WeightMask {
            weights: vec![0.0; m],
        }
    }

    /// Weight 1 at nodes whose center satisfies `inside`.
    pub fn from_predicate(lattice: &LatticeGrid, inside: impl Fn(Point) -> bool) -> Self {
        WeightMask {
            weights: lattice
                .nodes()
                .into_iter()
                .map(|p| if inside(p) { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    /// Samples a raster mask at each node center (cell containing the
    /// center); nodes off the raster get 0.
    pub fn from_raster(lattice: &LatticeGrid, raster: &PixelGrid, values: &[f64]) -> Result<Self> {
        ensure!(values.len() == raster.len(), "mask raster has wrong length");
        WeightMask::new(
            lattice
                .nodes()
                .into_iter()
                .map(|p| {
                    raster
                        .cell_of(p)
                        .map(|c| values[c])
                        .filter(|v| v.is_finite())
                        .map_or(0.0, |v| v.clamp(0.0, 1.0))
                })
                .collect(),
        )
    }

    /// One-channel (`weight`) stack on the lattice node grid.
    pub fn to_stack(&self, lattice: &LatticeGrid) -> Result<GridStack> {
        self.validate(lattice.len())?;
        GridStack::new(lattice.as_pixel_grid(), vec!["weight".into()], self.weights.clone())
    }

    /// Reads channel 0 of `stack`, sampling it at the node centers unless it
    /// already sits on the node grid.
    pub fn from_stack(stack: &GridStack, lattice: &LatticeGrid) -> Result<Self> {
        let values = stack.channel_at(0);
        if stack.grid() == lattice.as_pixel_grid() {
            WeightMask::new(values.to_vec())
        } else {
            WeightMask::from_raster(lattice, &stack.grid(), values)
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        ensure!(self.weights.len() == m, "mask has {} weights for {m} nodes", self.weights.len());
        ensure!(
            self.weights.iter().all(|v| (0.0..=1.0).contains(v)),
            "mask weights must lie in [0, 1]"
        );
        Ok(())
    }
}

/// A base estimate, the point-data increment and the adjusted fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaAdjustment {
    pub kappa_point: f64,
    pub base: ParamFields,
    pub adjusted: ParamFields,
}

/// `κ²_adj = κ²_base + w · kappa_point`; ρ and θ are copied.
pub fn adjust_kappa(base: &ParamFields, mask: &WeightMask, kappa_point: f64) -> Result<ParamFields> {
    ensure!(
        kappa_point >= 0.0 && kappa_point.is_finite(),
        "kappa_point must be non-negative (got {kappa_point})"
    );
    mask.validate(base.len())?;
    Ok(ParamFields {
        kappa2: base
            .kappa2
            .iter()
            .zip(&mask.weights)
            .map(|(k, w)| k + w * kappa_point)
            .collect(),
        rho: base.rho.clone(),
        theta: base.theta.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    /// Upper bound of the `kappa_point` search.
    pub kappa_point_max: f64,
    pub log_lambda: [f64; 2],
    pub search: SearchConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            kappa_point_max: 10.0,
            log_lambda: MleConfig::default().log_lambda,
            search: SearchConfig {
                tol: 0.005,
                ..SearchConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineResult {
    pub adjustment: KappaAdjustment,
    pub cov: CovParams,
    pub beta: Vec<Vec<f64>>,
    pub loglik: f64,
    /// Profile log-likelihood of the unadjusted fields (`kappa_point = 0`).
    pub loglik_base: f64,
    pub search: SearchResult,
    pub at_bound: bool,
}

/// Maximizes the profile likelihood over `kappa_point ∈ [0, max]` and `λ`,
/// holding the base fields fixed. The unadjusted fit is always a candidate,
/// so the result never scores below it.
pub fn refine_kappa_point(
    data: &SpatialData,
    base: &ParamFields,
    mask: &WeightMask,
    lattice: &LatticeGrid,
    basis: &BasisSpec,
    cfg: &RefineConfig,
) -> Result<RefineResult> {
    ensure!(data.n() >= 3, "refinement needs at least 3 observations");
    ensure!(
        cfg.kappa_point_max > 0.0 && cfg.kappa_point_max.is_finite(),
        "kappa_point_max must be positive"
    );
    base.validate(lattice.len())?;
    mask.validate(lattice.len())?;
    let mle_cfg = MleConfig {
        log_kappa2: MleConfig::default().log_kappa2,
        log_lambda: cfg.log_lambda,
        search: cfg.search,
    };
    let base_fit = fit_lambda(data, lattice, basis, base, &mle_cfg)?;

    let engine = ProfileEngine::new(data, lattice, basis)?;
    let eval = |x: &[f64]| {
        let delta = x[0];
        let prec = engine.precision(delta, || adjust_kappa(base, mask, delta))?;
        engine.profile(&prec, x[1].exp())
    };
    let start = [0.0, base_fit.cov.lambda().ln()];
    let search = coordinate_golden(
        |x| eval(x).map(|p| p.loglik).unwrap_or(f64::NEG_INFINITY),
        &[(0.0, cfg.kappa_point_max), (cfg.log_lambda[0], cfg.log_lambda[1])],
        Some(&start),
        &cfg.search,
    )?;

    let (delta, cov, beta, loglik) = if search.value > base_fit.loglik {
        let fit = eval(&search.x)?;
        let adjusted = adjust_kappa(base, mask, search.x[0])?;
        (
            search.x[0],
            CovParams::new(adjusted, fit.sigma2, fit.lambda * fit.sigma2)?,
            fit.beta,
            fit.loglik,
        )
    } else {
        (0.0, base_fit.cov.clone(), base_fit.beta.clone(), base_fit.loglik)
    };
    let at_bound = delta >= cfg.kappa_point_max - cfg.search.tol || search.at_bound[1];
    if at_bound {
        log::warn!("kappa refinement ended on a search bound (kappa_point = {delta:.4})");
    }
    Ok(RefineResult {
        adjustment: KappaAdjustment {
            kappa_point: delta,
            base: base.clone(),
            adjusted: cov.params.clone(),
        },
        cov,
        beta,
        loglik,
        loglik_base: base_fit.loglik,
        search,
        at_bound,
    })
}
