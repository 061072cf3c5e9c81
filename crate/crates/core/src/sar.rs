//! Spatially varying SAR operator `B` and its precision `Q = BᵀB`.
//!
//! Each lattice node carries `(κ², ρ, θ)`. The anisotropy pair builds the
//! dispersion matrix `D = ΨᵀΛΨ` (rotation by θ, axis scaling `√ρ`, `1/√ρ`),
//! and the row of `B` for that node is the nine-point stencil
//!
//! ```text
//!   +y    D12/2    -D22    -D12/2
//!          -D11  κ²+2D11+2D22  -D11
//!   -y   -D12/2    -D22     D12/2
//!          -x                 +x
//! ```
//!
//! Stencil neighbors falling outside the lattice are dropped.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::lattice::LatticeGrid;
use crate::sparse::{CsrMatrix, SymMatrix};

/// Per-node `(κ², ρ, θ)` fields aligned with the lattice node ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamFields {
    pub kappa2: Vec<f64>,
    pub rho: Vec<f64>,
    pub theta: Vec<f64>,
}

impl ParamFields {
    /// Spatially constant fields.
    pub fn constant(m: usize, kappa2: f64, rho: f64, theta: f64) -> Self {
        ParamFields {
            kappa2: vec![kappa2; m],
            rho: vec![rho; m],
            theta: vec![theta; m],
        }
    }

    /// Isotropic fields with a single range parameter.
    pub fn stationary(m: usize, kappa2: f64) -> Self {
        Self::constant(m, kappa2, 1.0, 0.0)
    }

    /// Builds fields from the on-disk channel layout `[log κ², ρ, θ]`.
    pub fn from_log_channels(log_kappa2: &[f64], rho: &[f64], theta: &[f64]) -> Result<Self> {
        let p = ParamFields {
            kappa2: log_kappa2.iter().map(|v| v.exp()).collect(),
            rho: rho.to_vec(),
            theta: theta.to_vec(),
        };
        p.validate(log_kappa2.len())?;
        Ok(p)
    }

    /// Channels `[log κ², ρ, θ]` for serialization.
    pub fn to_log_channels(&self) -> [Vec<f64>; 3] {
        [
            self.kappa2.iter().map(|v| v.ln()).collect(),
            self.rho.clone(),
            self.theta.clone(),
        ]
    }

    pub fn len(&self) -> usize {
        self.kappa2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kappa2.is_empty()
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        ensure!(
            self.kappa2.len() == m && self.rho.len() == m && self.theta.len() == m,
            "parameter fields have lengths ({}, {}, {}) but the lattice has {m} nodes",
            self.kappa2.len(),
            self.rho.len(),
            self.theta.len()
        );
        if let Some(i) = self.kappa2.iter().position(|&k| !(k > 0.0 && k.is_finite())) {
            return Err(Error::Validation(format!(
                "kappa2 must be positive and finite (node {i}: {})",
                self.kappa2[i]
            )));
        }
        if let Some(i) = self.rho.iter().position(|&r| !(r >= 1.0 && r.is_finite())) {
            return Err(Error::Validation(format!(
                "rho must be >= 1 (node {i}: {})",
                self.rho[i]
            )));
        }
        let half_pi = std::f64::consts::FRAC_PI_2;
        if let Some(i) = self
            .theta
            .iter()
            .position(|&t| !(t >= -half_pi && t < half_pi))
        {
            return Err(Error::Validation(format!(
                "theta must lie in [-pi/2, pi/2) (node {i}: {})",
                self.theta[i]
            )));
        }
        Ok(())
    }
}

/// Wraps an angle into `[-π/2, π/2)`; `θ` and `θ + π` describe the same
/// anisotropy.
pub fn canonical_theta(theta: f64) -> f64 {
    use std::f64::consts::{FRAC_PI_2, PI};
    if (-FRAC_PI_2..FRAC_PI_2).contains(&theta) {
        return theta;
    }
    let t = (theta + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
    if t >= FRAC_PI_2 {
        -FRAC_PI_2
    } else {
        t
    }
}

/// Symmetric 2×2 dispersion matrix with unit determinant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispersionMatrix {
    pub d11: f64,
    pub d12: f64,
    pub d22: f64,
}

impl DispersionMatrix {
    pub const IDENTITY: DispersionMatrix = DispersionMatrix {
        d11: 1.0,
        d12: 0.0,
        d22: 1.0,
    };

    pub fn det(&self) -> f64 {
        self.d11 * self.d22 - self.d12 * self.d12
    }
}

/// `ΨᵀΛΨ` with `Ψ` the rotation by θ and `Λ = diag(√ρ, 1/√ρ)`.
pub fn dispersion_matrix(theta: f64, rho: f64) -> Result<DispersionMatrix> {
    ensure!(theta.is_finite(), "theta must be finite");
    ensure!(
        rho >= 1.0 && rho.is_finite(),
        "rho must be >= 1 (got {rho}); encode orientation through theta"
    );
    Ok(dispersion_unchecked(theta, rho))
}

#[inline]
fn dispersion_unchecked(theta: f64, rho: f64) -> DispersionMatrix {
    let (s, c) = theta.sin_cos();
    let a = rho.sqrt();
    let b = 1.0 / a;
    // written so that rho = 1 yields the identity exactly
    let gap = a - b;
    DispersionMatrix {
        d11: b + gap * c * c,
        d12: -gap * c * s,
        d22: b + gap * s * s,
    }
}

/// Nine SAR weights keyed by lattice offset `(dx, dy)`, `dy = +1` being the
/// neighbor at larger y.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil9 {
    w: [[f64; 3]; 3],
}

impl Stencil9 {
    pub fn get(&self, dx: i32, dy: i32) -> f64 {
        self.w[(dy + 1) as usize][(dx + 1) as usize]
    }

    pub fn center(&self) -> f64 {
        self.get(0, 0)
    }

    /// Iterates `(dx, dy, weight)` over all nine offsets.
    pub fn entries(&self) -> impl Iterator<Item = (i32, i32, f64)> + '_ {
        (-1..=1).flat_map(move |dy| (-1..=1).map(move |dx| (dx, dy, self.get(dx, dy))))
    }

    pub fn sum(&self) -> f64 {
        self.entries().map(|(_, _, w)| w).sum()
    }
}

/// Five-point isotropic stencil: center `4 + κ²`, edges `-1`.
pub fn stationary_stencil(kappa2: f64) -> Result<Stencil9> {
    ensure!(
        kappa2 > 0.0 && kappa2.is_finite(),
        "kappa2 must be positive (got {kappa2})"
    );
    Ok(stencil_unchecked(kappa2, DispersionMatrix::IDENTITY))
}

/// Nine-point anisotropic stencil for one node.
pub fn stencil_at(kappa2: f64, d: DispersionMatrix) -> Result<Stencil9> {
    ensure!(
        kappa2 >= 0.0 && kappa2.is_finite(),
        "kappa2 must be non-negative (got {kappa2})"
    );
    ensure!(
        d.d11.is_finite() && d.d12.is_finite() && d.d22.is_finite(),
        "dispersion matrix must be finite"
    );
    Ok(stencil_unchecked(kappa2, d))
}

#[inline]
fn stencil_unchecked(kappa2: f64, d: DispersionMatrix) -> Stencil9 {
    let half = 0.5 * d.d12;
    Stencil9 {
        w: [
            // dy = -1
            [-half, -d.d22, half],
            // dy = 0
            [-d.d11, kappa2 + 2.0 * (d.d11 + d.d22), -d.d11],
            // dy = +1
            [half, -d.d22, -half],
        ],
    }
}

/// The sparse SAR operator `B` (one stencil row per lattice node).
#[derive(Debug, Clone, PartialEq)]
pub struct SarMatrix(CsrMatrix);

impl SarMatrix {
    pub fn matrix(&self) -> &CsrMatrix {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

/// Assembles `B` row by row from the per-node stencils. Exact zeros are not
/// stored.
pub fn build_sar(grid: &LatticeGrid, params: &ParamFields) -> Result<SarMatrix> {
    grid.validate()?;
    let m = grid.len();
    params.validate(m)?;
    let rows = grid.rows() as i64;
    let cols = grid.cols() as i64;
    let row_lists: Vec<Vec<(usize, f64)>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let d = dispersion_unchecked(params.theta[i], params.rho[i]);
            let st = stencil_unchecked(params.kappa2[i], d);
            let (r, c) = grid.row_col(i);
            st.entries()
                .filter_map(|(dx, dy, w)| {
                    let rr = r as i64 + dy as i64;
                    let cc = c as i64 + dx as i64;
                    if w == 0.0 || rr < 0 || cc < 0 || rr >= rows || cc >= cols {
                        None
                    } else {
                        Some((grid.index(rr as usize, cc as usize), w))
                    }
                })
                .collect()
        })
        .collect();
    Ok(SarMatrix(CsrMatrix::from_rows(m, row_lists)))
}

/// Materialized precision `Q = BᵀB`.
#[derive(Debug, Clone, PartialEq)]
pub struct Precision(SymMatrix);

impl Precision {
    pub fn matrix(&self) -> &SymMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> SymMatrix {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }
}

pub fn precision(b: &SarMatrix) -> Precision {
    Precision(b.matrix().gram(1.0))
}
