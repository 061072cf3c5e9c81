//! Dense reference computations written directly from the model definitions
//! with nalgebra. Nothing here calls into the sparse code paths.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix2};
use nslk_core::{LatticeGrid, ParamFields, Point};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dispersion `Ψᵀ Λ Ψ` assembled from the rotation and scaling matrices.
pub fn dense_dispersion(theta: f64, rho: f64) -> Matrix2<f64> {
    let rot = Matrix2::new(theta.cos(), -theta.sin(), theta.sin(), theta.cos());
    let scale = Matrix2::new(rho.sqrt(), 0.0, 0.0, 1.0 / rho.sqrt());
    rot.transpose() * scale * rot
}

/// Nine weights `[north, middle, south]` rows, west to east within a row.
pub fn dense_stencil(kappa2: f64, theta: f64, rho: f64) -> [[f64; 3]; 3] {
    let d = dense_dispersion(theta, rho);
    let (d11, d12, d22) = (d[(0, 0)], d[(0, 1)], d[(1, 1)]);
    [
        [d12 / 2.0, -d22, -d12 / 2.0],
        [-d11, kappa2 + 2.0 * d11 + 2.0 * d22, -d11],
        [-d12 / 2.0, -d22, d12 / 2.0],
    ]
}

/// Dense SAR matrix; neighbors outside the lattice are dropped.
pub fn dense_b(lattice: &LatticeGrid, p: &ParamFields) -> DMatrix<f64> {
    let rows = lattice.rows();
    let cols = lattice.cols();
    let m = rows * cols;
    let mut b = DMatrix::zeros(m, m);
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            let st = dense_stencil(p.kappa2[i], p.theta[i], p.rho[i]);
            for (k, dy) in [1i64, 0, -1].into_iter().enumerate() {
                for (l, dx) in [-1i64, 0, 1].into_iter().enumerate() {
                    let rr = r as i64 + dy;
                    let cc = c as i64 + dx;
                    if rr >= 0 && cc >= 0 && (rr as usize) < rows && (cc as usize) < cols {
                        b[(i, rr as usize * cols + cc as usize)] = st[k][l];
                    }
                }
            }
        }
    }
    b
}

pub fn dense_q(lattice: &LatticeGrid, p: &ParamFields) -> DMatrix<f64> {
    let b = dense_b(lattice, p);
    b.transpose() * b
}

/// Wendland C² polynomial `(1-d)^6 (35d² + 18d + 3) / 3` on `[0, 1)`.
pub fn wendland_ref(d: f64) -> f64 {
    if d >= 1.0 {
        0.0
    } else {
        (1.0 - d).powi(6) * (35.0 * d * d + 18.0 * d + 3.0) / 3.0
    }
}

/// Dense `Φ` for a lattice with equal spacing in x and y.
pub fn dense_phi(lattice: &LatticeGrid, support_multiple: f64, points: &[Point]) -> DMatrix<f64> {
    let radius = support_multiple * lattice.dx;
    let nodes = lattice.nodes();
    DMatrix::from_fn(points.len(), nodes.len(), |i, j| {
        let dx = points[i].x - nodes[j].x;
        let dy = points[i].y - nodes[j].y;
        wendland_ref((dx * dx + dy * dy).sqrt() / radius)
    })
}

/// `Φa Q⁻¹ Φbᵀ` via a dense Cholesky of `Q`.
pub fn latent_cov(q: &DMatrix<f64>, phi_a: &DMatrix<f64>, phi_b: &DMatrix<f64>) -> DMatrix<f64> {
    let chol = q.clone().cholesky().expect("Q is positive definite");
    phi_a * chol.solve(&phi_b.transpose())
}

pub fn mvn_logpdf(z: &DVector<f64>, v: &DMatrix<f64>) -> f64 {
    let n = z.len() as f64;
    let chol = v.clone().cholesky().expect("covariance is positive definite");
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let alpha = chol.solve(z);
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet + z.dot(&alpha))
}

pub struct DenseKrige {
    pub beta: DVector<f64>,
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
}

/// GLS plug-in kriging: `v` observation covariance, `c_to` target-by-obs
/// covariance, `c_tt` target variances, optional designs.
pub fn dense_krige(
    z: &DVector<f64>,
    v: &DMatrix<f64>,
    c_to: &DMatrix<f64>,
    c_tt: &DVector<f64>,
    x_obs: Option<&DMatrix<f64>>,
    x_tgt: Option<&DMatrix<f64>>,
) -> DenseKrige {
    let chol = v.clone().cholesky().expect("covariance is positive definite");
    let (beta, resid, fixed) = match (x_obs, x_tgt) {
        (Some(x), Some(xt)) => {
            let vx = chol.solve(x);
            let a = x.transpose() * &vx;
            let beta = a.lu().solve(&(vx.transpose() * z)).expect("GLS system solvable");
            (beta.clone(), z - x * &beta, xt * &beta)
        }
        _ => (DVector::zeros(0), z.clone(), DVector::zeros(c_to.nrows())),
    };
    let w = chol.solve(&c_to.transpose());
    let mean = fixed + c_to * chol.solve(&resid);
    let var = DVector::from_fn(c_tt.len(), |t, _| c_tt[t] - c_to.row(t).dot(&w.column(t).transpose()));
    DenseKrige { beta, mean, var }
}

pub fn random_params(m: usize, rng: &mut ChaCha8Rng) -> ParamFields {
    let kappa2 = (0..m).map(|_| (rng.random_range(-2.3f64..1.4)).exp()).collect();
    let rho = (0..m).map(|_| rng.random_range(1.0..7.0)).collect();
    let theta = (0..m)
        .map(|_| rng.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2))
        .collect();
    ParamFields { kappa2, rho, theta }
}

pub fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    (0..n)
        .map(|_| Point {
            x: rng.random_range(0.0..1.0),
            y: rng.random_range(0.0..1.0),
        })
        .collect()
}

pub fn unit_lattice(n: usize) -> LatticeGrid {
    LatticeGrid::build(nslk_core::Bounds::new(0.0, 1.0, 0.0, 1.0), n, n, 0).unwrap()
}

pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}
