mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use nslk_core::{
    build_sar, evaluate_basis, fit_stationary_mle, krige, log_likelihood, BasisSpec, CovParams,
    LatticeGrid, MleConfig, ObservationSet, ParamFields, Point, SpatialData, Targets,
};
use proptest::prelude::*;
use rand::Rng;

fn dense_marginal(lattice: &LatticeGrid, cov: &CovParams, pts: &[Point]) -> DMatrix<f64> {
    let q = dense_q(lattice, &cov.params);
    let phi = dense_phi(lattice, BasisSpec::default().support_multiple, pts);
    latent_cov(&q, &phi, &phi) * cov.sigma2 + DMatrix::identity(pts.len(), pts.len()) * cov.tau2
}

#[test]
fn sar_matches_dense_construction() {
    let mut rng = rng(11);
    for trial in 0..30 {
        let n = 3 + trial % 6;
        let buffer = trial % 2;
        let lattice = LatticeGrid::build(nslk_core::Bounds::new(0.0, 1.0, 0.0, 1.0), n, n, buffer).unwrap();
        let p = random_params(lattice.len(), &mut rng);
        let sparse = build_sar(&lattice, &p).unwrap();
        let dense = dense_b(&lattice, &p);
        for i in 0..lattice.len() {
            for j in 0..lattice.len() {
                let s = sparse.matrix().get(i, j);
                assert!((s - dense[(i, j)]).abs() < 1e-13, "trial {trial}: B[{i},{j}] {s} vs {}", dense[(i, j)]);
            }
        }
    }
}

#[test]
fn basis_matches_dense_wendland() {
    let mut rng = rng(12);
    let lattice = unit_lattice(7);
    let pts = random_points(40, &mut rng);
    let sparse = evaluate_basis(&lattice, &BasisSpec::default(), &pts).unwrap();
    let dense = dense_phi(&lattice, 2.5, &pts);
    for i in 0..pts.len() {
        for j in 0..lattice.len() {
            assert!((sparse.matrix().get(i, j) - dense[(i, j)]).abs() < 1e-14);
        }
    }
}

#[test]
fn gls_kriging_matches_dense_with_trend() {
    let mut rng = rng(13);
    for trial in 0..40 {
        let lattice = unit_lattice(5 + trial % 4);
        let n = 10 + trial % 8;
        let pts = random_points(n, &mut rng);
        let tgt = random_points(6, &mut rng);
        let values: Vec<f64> = pts.iter().map(|p| 1.0 + 2.0 * p.x - p.y + rng.random_range(-0.5..0.5)).collect();
        let obs = ObservationSet::with_coordinate_trend("d", pts.clone(), values.clone()).unwrap();
        let cov = CovParams::new(
            random_params(lattice.len(), &mut rng),
            rng.random_range(0.5..2.0),
            rng.random_range(0.01..0.5),
        )
        .unwrap();
        let targets = Targets::with_covariates(tgt.clone(), tgt.iter().flat_map(|p| [1.0, p.x, p.y]).collect());
        let got = krige(&obs, &cov, &lattice, &BasisSpec::default(), &targets).unwrap();

        let q = dense_q(&lattice, &cov.params);
        let phi_o = dense_phi(&lattice, 2.5, &pts);
        let phi_t = dense_phi(&lattice, 2.5, &tgt);
        let v = latent_cov(&q, &phi_o, &phi_o) * cov.sigma2 + DMatrix::identity(n, n) * cov.tau2;
        let c_to = latent_cov(&q, &phi_t, &phi_o) * cov.sigma2;
        let c_tt = latent_cov(&q, &phi_t, &phi_t).diagonal() * cov.sigma2;
        let x = DMatrix::from_fn(n, 3, |i, j| [1.0, pts[i].x, pts[i].y][j]);
        let xt = DMatrix::from_fn(tgt.len(), 3, |i, j| [1.0, tgt[i].x, tgt[i].y][j]);
        let want = dense_krige(&DVector::from_vec(values), &v, &c_to, &c_tt, Some(&x), Some(&xt));
        for j in 0..3 {
            assert!((got.beta[j] - want.beta[j]).abs() < 1e-8, "trial {trial} beta");
        }
        for t in 0..tgt.len() {
            assert!((got.mean[t] - want.mean[t]).abs() < 1e-8, "trial {trial} mean");
            assert!((got.se[t].powi(2) - want.var[t]).abs() < 1e-8, "trial {trial} var");
        }
    }
}

#[test]
fn more_observations_never_increase_standard_errors() {
    let mut rng = rng(14);
    let lattice = unit_lattice(8);
    for _ in 0..10 {
        let cov = CovParams::new(random_params(lattice.len(), &mut rng), 1.0, 0.1).unwrap();
        let pts = random_points(16, &mut rng);
        let values: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let targets = Targets::points(random_points(10, &mut rng));
        let mut prev: Option<Vec<f64>> = None;
        for n in [4, 8, 12, 16] {
            let obs = ObservationSet::residuals("d", pts[..n].to_vec(), values[..n].to_vec()).unwrap();
            let se = krige(&obs, &cov, &lattice, &BasisSpec::default(), &targets).unwrap().se;
            if let Some(p) = &prev {
                for (a, b) in se.iter().zip(p) {
                    assert!(*a <= b + 1e-12, "SE grew from {b} to {a}");
                }
            }
            prev = Some(se);
        }
    }
}

#[test]
fn stationary_mle_beats_random_probes() {
    let mut rng = rng(15);
    let lattice = unit_lattice(10);
    let pts = random_points(60, &mut rng);
    let cov = CovParams::stationary(lattice.len(), 0.5, 1.0, 0.05).unwrap();
    let v = dense_marginal(&lattice, &cov, &pts);
    let chol = v.cholesky().unwrap();
    let e = DVector::from_fn(pts.len(), |_, _| {
        let u: f64 = rng.random_range(1e-12..1.0);
        let w: f64 = rng.random_range(0.0..1.0);
        (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * w).cos()
    });
    let z = chol.l() * e;
    let values: Vec<f64> = z.iter().copied().collect();
    let obs = ObservationSet::residuals("d", pts.clone(), values).unwrap();
    let cfg = MleConfig::default();
    let fit = fit_stationary_mle(&SpatialData::from_observations(&obs).unwrap(), &lattice, &BasisSpec::default(), &cfg)
        .unwrap();
    for _ in 0..25 {
        let k2 = rng.random_range(cfg.log_kappa2[0]..cfg.log_kappa2[1]).exp();
        let lambda = rng.random_range(cfg.log_lambda[0]..cfg.log_lambda[1]).exp();
        // profile σ² in closed form at the probe
        let unit = CovParams::from_lambda(ParamFields::stationary(lattice.len(), k2), 1.0, lambda).unwrap();
        let vu = dense_marginal(&lattice, &unit, &pts);
        let zz = DVector::from_vec(obs.values.clone());
        let s2 = zz.dot(&vu.cholesky().unwrap().solve(&zz)) / pts.len() as f64;
        let probe = CovParams::from_lambda(unit.params, s2, lambda).unwrap();
        let ll = log_likelihood(&obs, &probe, &lattice, &BasisSpec::default()).unwrap();
        assert!(fit.loglik >= ll - 1e-9, "probe ({k2}, {lambda}) beats the optimum: {ll} > {}", fit.loglik);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn likelihood_and_kriging_are_permutation_invariant(seed in 0u64..10_000, shift in 1usize..11) {
        let mut rng = rng(seed);
        let lattice = unit_lattice(6);
        let pts = random_points(12, &mut rng);
        let values: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cov = CovParams::new(random_params(lattice.len(), &mut rng), 1.3, 0.2).unwrap();
        let perm: Vec<usize> = (0..12).map(|i| (i * 5 + shift) % 12).collect();
        let a = ObservationSet::residuals("d", pts.clone(), values.clone()).unwrap();
        let b = ObservationSet::residuals(
            "d",
            perm.iter().map(|&i| pts[i]).collect(),
            perm.iter().map(|&i| values[i]).collect(),
        )
        .unwrap();
        let basis = BasisSpec::default();
        let la = log_likelihood(&a, &cov, &lattice, &basis).unwrap();
        let lb = log_likelihood(&b, &cov, &lattice, &basis).unwrap();
        prop_assert!((la - lb).abs() < 1e-9);
        let targets = Targets::points(random_points(4, &mut rng));
        let ka = krige(&a, &cov, &lattice, &basis, &targets).unwrap();
        let kb = krige(&b, &cov, &lattice, &basis, &targets).unwrap();
        for t in 0..4 {
            prop_assert!((ka.mean[t] - kb.mean[t]).abs() < 1e-9);
            prop_assert!((ka.se[t] - kb.se[t]).abs() < 1e-9);
        }
    }

    #[test]
    fn loglik_matches_dense_density(seed in 0u64..10_000) {
        let mut rng = rng(seed);
        let lattice = unit_lattice(4 + (seed % 5) as usize);
        let n = 3 + (seed % 12) as usize;
        let pts = random_points(n, &mut rng);
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cov = CovParams::new(
            random_params(lattice.len(), &mut rng),
            rng.random_range(0.5..2.0),
            rng.random_range(0.01..1.0),
        )
        .unwrap();
        let obs = ObservationSet::residuals("d", pts.clone(), values.clone()).unwrap();
        let got = log_likelihood(&obs, &cov, &lattice, &BasisSpec::default()).unwrap();
        let want = mvn_logpdf(&DVector::from_vec(values), &dense_marginal(&lattice, &cov, &pts));
        prop_assert!((got - want).abs() < 1e-8, "{} vs {}", got, want);
    }
}
