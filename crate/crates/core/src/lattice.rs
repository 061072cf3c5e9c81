//! Lattice of basis-function centers and the compactly supported Wendland
//! basis evaluated at arbitrary locations.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{Bounds, PixelGrid, Point};
use crate::sparse::CsrMatrix;

/// Regular lattice of basis centers, optionally padded by `buffer` extra
/// nodes on every side. Nodes are indexed row-major over the padded lattice;
/// row `r` sits at `y0 + (r - buffer)·dy`, column `c` at `x0 + (c - buffer)·dx`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeGrid {
    pub nx: usize,
    pub ny: usize,
    pub x0: f64,
    pub y0: f64,
    pub dx: f64,
    pub dy: f64,
    #[serde(default)]
    pub buffer: usize,
}

impl LatticeGrid {
    /// Lattice whose unpadded nodes span `bounds` exactly.
    pub fn build(bounds: Bounds, nx: usize, ny: usize, buffer: usize) -> Result<Self> {
        bounds.validate()?;
        ensure!(nx >= 3 && ny >= 3, "lattice needs nx, ny >= 3 (got {nx} x {ny})");
        let grid = LatticeGrid {
            nx,
            ny,
            x0: bounds.xmin,
            y0: bounds.ymin,
            dx: (bounds.xmax - bounds.xmin) / (nx - 1) as f64,
            dy: (bounds.ymax - bounds.ymin) / (ny - 1) as f64,
            buffer,
        };
        Ok(grid)
    }

    /// Lattice with one node at every pixel center of `pixels`.
    pub fn aligned_with(pixels: &PixelGrid, buffer: usize) -> Result<Self> {
        let g = LatticeGrid {
            nx: pixels.width,
            ny: pixels.height,
            x0: pixels.x0,
            y0: pixels.y0,
            dx: pixels.dx,
            dy: pixels.dy,
            buffer,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.nx >= 3 && self.ny >= 3,
            "lattice needs nx, ny >= 3 (got {} x {})",
            self.nx,
            self.ny
        );
        ensure!(
            self.dx > 0.0 && self.dy > 0.0 && self.dx.is_finite() && self.dy.is_finite(),
            "lattice spacing must be positive and finite"
        );
        ensure!(
            self.x0.is_finite() && self.y0.is_finite(),
            "lattice origin must be finite"
        );
        Ok(())
    }

    /// Padded node count along x.
    pub fn cols(&self) -> usize {
        self.nx + 2 * self.buffer
    }

    /// Padded node count along y.
    pub fn rows(&self) -> usize {
        self.ny + 2 * self.buffer
    }

    /// Total node count `m`.
    pub fn len(&self) -> usize {
        self.cols() * self.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.rows() && col < self.cols());
        row * self.cols() + col
    }

    pub fn row_col(&self, idx: usize) -> (usize, usize) {
        (idx / self.cols(), idx % self.cols())
    }

    pub fn node(&self, idx: usize) -> Point {
        let (r, c) = self.row_col(idx);
        Point::new(
            self.x0 + (c as f64 - self.buffer as f64) * self.dx,
            self.y0 + (r as f64 - self.buffer as f64) * self.dy,
        )
    }

    pub fn nodes(&self) -> Vec<Point> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }

    /// Whether node `idx` lies in the buffer ring.
    pub fn is_buffer(&self, idx: usize) -> bool {
        let (r, c) = self.row_col(idx);
        let b = self.buffer;
        r < b || c < b || r >= b + self.ny || c >= b + self.nx
    }

    /// Pixel grid whose centers are the (padded) lattice nodes.
    pub fn as_pixel_grid(&self) -> PixelGrid {
        PixelGrid {
            height: self.rows(),
            width: self.cols(),
            x0: self.x0 - self.buffer as f64 * self.dx,
            y0: self.y0 - self.buffer as f64 * self.dy,
            dx: self.dx,
            dy: self.dy,
        }
    }
}

/// Basis configuration: support radius in lattice spacings and optional
/// row normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    #[serde(default = "default_support")]
    pub support_multiple: f64,
    #[serde(default)]
    pub normalize: bool,
}

fn default_support() -> f64 {
    2.5
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec {
            support_multiple: default_support(),
            normalize: false,
        }
    }
}

impl BasisSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.support_multiple > 1.0 && self.support_multiple.is_finite(),
            "support_multiple must exceed 1 (got {})",
            self.support_multiple
        );
        Ok(())
    }

    /// Upper bound on nonzeros per row of Φ.
    pub fn max_row_nnz(&self) -> usize {
        let w = (2.0 * self.support_multiple + 1.0).ceil() as usize;
        w * w
    }
}

/// C² Wendland function of the scaled distance `d` (distance divided by the
/// support radius).
pub fn wendland(d: f64) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(Error::Validation(format!(
            "Wendland argument must be non-negative, got {d}"
        )));
    }
    Ok(wendland_unchecked(d))
}

#[inline]
fn wendland_unchecked(d: f64) -> f64 {
    if d >= 1.0 {
        return 0.0;
    }
    let t = 1.0 - d;
    let t2 = t * t;
    let t6 = t2 * t2 * t2;
    t6 * (35.0 * d * d + 18.0 * d + 3.0) / 3.0
}

/// Sparse basis matrix Φ (locations × lattice nodes).
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    matrix: CsrMatrix,
    uncovered: usize,
}

impl BasisMatrix {
    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CsrMatrix {
        self.matrix
    }

    /// Number of locations outside every basis support (all-zero rows).
    pub fn uncovered_rows(&self) -> usize {
        self.uncovered
    }

    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    /// Wraps an arbitrary nonnegative matrix as a basis (e.g. indicator rows).
    pub fn from_matrix(matrix: CsrMatrix) -> Self {
        let uncovered = (0..matrix.nrows()).filter(|&i| matrix.row_nnz(i) == 0).count();
        BasisMatrix { matrix, uncovered }
    }
}

/// Evaluates every basis function at every location.
pub fn evaluate_basis(grid: &LatticeGrid, spec: &BasisSpec, locations: &[Point]) -> Result<BasisMatrix> {
    grid.validate()?;
    spec.validate()?;
    if let Some(i) = locations.iter().position(|p| !p.is_finite()) {
        return Err(Error::Validation(format!("location {i} is not finite")));
    }
    let reach = spec.support_multiple;
    let cols = grid.cols() as i64;
    let rows = grid.rows() as i64;
    let b = grid.buffer as f64;
    let mut uncovered = 0;
    let mut out_rows = Vec::with_capacity(locations.len());
    for p in locations {
        // fractional position in padded lattice index space
        let fx = (p.x - grid.x0) / grid.dx + b;
        let fy = (p.y - grid.y0) / grid.dy + b;
        let c_lo = ((fx - reach).floor() as i64).max(0);
        let c_hi = ((fx + reach).ceil() as i64).min(cols - 1);
        let r_lo = ((fy - reach).floor() as i64).max(0);
        let r_hi = ((fy + reach).ceil() as i64).min(rows - 1);
        let mut row = Vec::new();
        for r in r_lo..=r_hi {
            let oy = fy - r as f64;
            for c in c_lo..=c_hi {
                let ox = fx - c as f64;
                let d = (ox * ox + oy * oy).sqrt() / reach;
                if d < 1.0 {
                    let v = wendland_unchecked(d);
                    if v > 0.0 {
                        row.push((grid.index(r as usize, c as usize), v));
                    }
                }
            }
        }
        if row.is_empty() {
            uncovered += 1;
        } else if spec.normalize {
            let s: f64 = row.iter().map(|&(_, v)| v).sum();
            for e in &mut row {
                e.1 /= s;
            }
        }
        out_rows.push(row);
    }
    Ok(BasisMatrix {
        matrix: CsrMatrix::from_rows(grid.len(), out_rows),
        uncovered,
    })
}
