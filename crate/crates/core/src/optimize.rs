//! Derivative-free bounded maximization: golden-section line searches cycled
//! over coordinates, restarted from several points.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

const INV_PHI: f64 = 0.618_033_988_749_894_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Final bracket width per coordinate (in the search variable's units).
    pub tol: f64,
    pub max_sweeps: usize,
    pub restarts: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            tol: 0.01,
            max_sweeps: 8,
            restarts: 3,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.tol > 0.0 && self.tol.is_finite(), "search tolerance must be positive");
        ensure!(self.max_sweeps >= 1, "max_sweeps must be at least 1");
        ensure!(self.restarts >= 1, "restarts must be at least 1");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub x: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    /// True when the last sweep of the winning restart moved less than `tol`.
    pub converged: bool,
    /// Per coordinate: optimum within `tol` of a bound.
    pub at_bound: Vec<bool>,
    /// Best point after each sweep of each restart.
    pub history: Vec<Evaluation>,
}

impl SearchResult {
    pub fn hit_bound(&self) -> bool {
        self.at_bound.iter().any(|&b| b)
    }
}

/// Maximizes a unimodal `f` on `[lo, hi]`; the bounds themselves are also
/// evaluated so boundary optima are found exactly.
pub fn golden_max(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, tol: f64) -> (f64, f64, usize) {
    let mut g = |x: f64| {
        let v = f(x);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    };
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = g(c);
    let mut fd = g(d);
    let mut evals = 2;
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = g(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = g(d);
        }
        evals += 1;
    }
    let (mut x, mut fx) = if fc >= fd { (c, fc) } else { (d, fd) };
    for edge in [lo, hi] {
        if (x - edge).abs() <= tol {
            let fe = g(edge);
            evals += 1;
            if fe > fx {
                x = edge;
                fx = fe;
            }
        }
    }
    (x, fx, evals)
}

/// Coordinate-wise golden-section maximization over a box. Starts are the
/// box center followed by points at 1/4 and 3/4 of each range; supplying
/// `start` replaces the center.
pub fn coordinate_golden(
    mut f: impl FnMut(&[f64]) -> f64,
    bounds: &[(f64, f64)],
    start: Option<&[f64]>,
    cfg: &SearchConfig,
) -> Result<SearchResult> {
    cfg.validate()?;
    ensure!(!bounds.is_empty(), "search needs at least one coordinate");
    for &(lo, hi) in bounds {
        ensure!(
            lo.is_finite() && hi.is_finite() && lo < hi,
            "invalid search bounds [{lo}, {hi}]"
        );
    }
    let dim = bounds.len();
    let mut starts: Vec<Vec<f64>> = Vec::new();
    starts.push(match start {
        Some(s) => {
            ensure!(s.len() == dim, "start has wrong dimension");
            s.iter()
                .zip(bounds)
                .map(|(&v, &(lo, hi))| v.clamp(lo, hi))
                .collect()
        }
        None => bounds.iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect(),
    });
    for k in 1..cfg.restarts {
        let frac = if k % 2 == 1 { 0.25 } else { 0.75 };
        starts.push(
            bounds
                .iter()
                .enumerate()
                .map(|(i, &(lo, hi))| {
                    let fi = if (i + k) % 2 == 0 { frac } else { 1.0 - frac };
                    lo + fi * (hi - lo)
                })
                .collect(),
        );
    }

    let mut evaluations = 0;
    let mut history = Vec::new();
    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    for s in starts {
        let mut x = s;
        let mut fx = f(&x);
        evaluations += 1;
        if fx.is_nan() {
            fx = f64::NEG_INFINITY;
        }
        let mut converged = false;
        for _ in 0..cfg.max_sweeps {
            let before = x.clone();
            for i in 0..dim {
                let (lo, hi) = bounds[i];
                let mut probe = x.clone();
                let (xi, fi, n) = golden_max(
                    |v| {
                        probe[i] = v;
                        f(&probe)
                    },
                    lo,
                    hi,
                    cfg.tol,
                );
                evaluations += n;
                if fi > fx {
                    x[i] = xi;
                    fx = fi;
                }
            }
            history.push(Evaluation {
                x: x.clone(),
                value: fx,
            });
            let moved = x
                .iter()
                .zip(&before)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if moved < cfg.tol {
                converged = true;
                break;
            }
        }
        if best.as_ref().is_none_or(|(_, v, _)| fx > *v) {
            best = Some((x, fx, converged));
        }
    }
    let (x, value, converged) = best.unwrap();
    let at_bound = x
        .iter()
        .zip(bounds)
        .map(|(&v, &(lo, hi))| v - lo <= cfg.tol || hi - v <= cfg.tol)
        .collect();
    Ok(SearchResult {
        x,
        value,
        evaluations,
        converged,
        at_bound,
        history,
    })
}
