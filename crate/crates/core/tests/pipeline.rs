mod common;

use common::*;
use nslk_core::config::{CvConfig, StationFilter};
use nslk_core::pipeline::{
    fit_gridded_mean, run_cv, run_predict_fine, run_reconstruction, run_station_day, CvDay, FitSettings,
    SeMethod,
};
use nslk_core::stations::ingest_reader;
use nslk_core::{
    krige, BasisSpec, Bounds, CovParams, FittedModel, GridStack, MleConfig, ModelVariant, ObservationSet,
    ParamFields, PixelGrid, RefineConfig, Targets, WeightMask,
};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn sample_obs(n: usize, seed: u64) -> ObservationSet {
    let mut rng = rng(seed);
    let pts = random_points(n, &mut rng);
    let values = pts
        .iter()
        .map(|p| 10.0 + 3.0 * p.x + (6.0 * p.y).sin() + 0.3 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    ObservationSet::with_coordinate_trend("2024-03-01", pts, values).unwrap()
}

#[test]
fn fine_prediction_agrees_with_kriging() {
    let lattice = unit_lattice(9);
    let obs = sample_obs(40, 41);
    let cov = CovParams::stationary(lattice.len(), 0.6, 1.0, 0.05).unwrap();
    let model = FittedModel::fit(&obs, cov.clone(), &lattice, &BasisSpec::default()).unwrap();
    let grid = PixelGrid::spanning(Bounds::new(0.0, 1.0, 0.0, 1.0), 7, 7).unwrap();
    let stack = run_predict_fine(&model, &grid, None, &[], SeMethod::Exact).unwrap();
    let centers = grid.centers();
    let targets = Targets::with_covariates(centers.clone(), centers.iter().flat_map(|p| [1.0, p.x, p.y]).collect());
    let k = krige(&obs, &cov, &lattice, &BasisSpec::default(), &targets).unwrap();
    let mean = stack.channel("mean").unwrap();
    let se = stack.channel("se").unwrap();
    for i in 0..grid.len() {
        assert!((mean[i] - k.mean[i]).abs() < 1e-10);
        assert!((se[i] - k.se[i]).abs() < 1e-10);
    }
}

#[test]
fn doubling_resolution_keeps_coincident_predictions() {
    let lattice = unit_lattice(9);
    let obs = sample_obs(40, 42);
    let cov = CovParams::stationary(lattice.len(), 0.6, 1.0, 0.05).unwrap();
    let model = FittedModel::fit(&obs, cov, &lattice, &BasisSpec::default()).unwrap();
    let bounds = Bounds::new(0.0, 1.0, 0.0, 1.0);
    let coarse = PixelGrid::spanning(bounds, 6, 6).unwrap();
    let fine = PixelGrid::spanning(bounds, 11, 11).unwrap();
    let a = run_predict_fine(&model, &coarse, None, &[], SeMethod::Exact).unwrap();
    let b = run_predict_fine(&model, &fine, None, &[], SeMethod::Exact).unwrap();
    for r in 0..6 {
        for c in 0..6 {
            let pc = coarse.center(r, c);
            let pf = fine.center(2 * r, 2 * c);
            assert!((pc.x - pf.x).abs() < 1e-12 && (pc.y - pf.y).abs() < 1e-12);
            for ch in ["mean", "se"] {
                let va = a.channel(ch).unwrap()[r * 6 + c];
                let vb = b.channel(ch).unwrap()[2 * r * 11 + 2 * c];
                assert!((va - vb).abs() < 1e-10, "{ch} at ({r},{c}): {va} vs {vb}");
            }
        }
    }
}

#[test]
fn conditional_se_map_is_deterministic_and_close_to_exact() {
    let lattice = unit_lattice(8);
    let obs = sample_obs(30, 43);
    let cov = CovParams::stationary(lattice.len(), 0.8, 1.0, 0.1).unwrap();
    let model = FittedModel::fit(&obs, cov, &lattice, &BasisSpec::default()).unwrap();
    let grid = PixelGrid::spanning(Bounds::new(0.0, 1.0, 0.0, 1.0), 5, 5).unwrap();
    let se = SeMethod::Conditional { draws: 1000, seed: 9 };
    let a = run_predict_fine(&model, &grid, None, &[], se).unwrap();
    let b = run_predict_fine(&model, &grid, None, &[], se).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    let exact = run_predict_fine(&model, &grid, None, &[], SeMethod::Exact).unwrap();
    for (x, y) in a.channel("se").unwrap().iter().zip(exact.channel("se").unwrap()) {
        assert!((x / y - 1.0).abs() < 0.1);
    }
}

#[test]
fn missing_covariate_channels_are_listed() {
    let lattice = unit_lattice(6);
    let pts = random_points(20, &mut rng(44));
    let n = pts.len();
    let obs = ObservationSet::new(
        "d",
        pts,
        (0..n).map(|i| i as f64 * 0.1).collect(),
        vec!["intercept".into(), "elevation".into(), "wind".into()],
        (0..n).flat_map(|i| [1.0, (i % 7) as f64, (i % 3) as f64]).collect(),
    )
    .unwrap();
    let cov = CovParams::stationary(lattice.len(), 1.0, 1.0, 0.1).unwrap();
    let model = FittedModel::fit(&obs, cov, &lattice, &BasisSpec::default()).unwrap();
    let grid = PixelGrid::spanning(Bounds::new(0.0, 1.0, 0.0, 1.0), 4, 4).unwrap();
    let err = run_predict_fine(&model, &grid, None, &[], SeMethod::None).unwrap_err();
    assert!(err.to_string().contains("elevation, wind"), "{err}");
    let src = PixelGrid::spanning(Bounds::new(0.0, 1.0, 0.0, 1.0), 8, 8).unwrap();
    let partial = GridStack::from_channels(src, vec![("elevation".into(), vec![1.0; 64])]).unwrap();
    let err = run_predict_fine(&model, &grid, Some(&partial), &[], SeMethod::None).unwrap_err();
    assert!(err.to_string().contains("wind") && !err.to_string().contains("elevation"));
}

#[test]
fn lag_coefficient_is_recovered_on_a_large_grid() {
    let grid = PixelGrid::spanning(Bounds::new(0.0, 1.0, 0.0, 1.0), 128, 128).unwrap();
    let mut rng = rng(45);
    let centers = grid.centers();
    let elev: Vec<f64> = centers.iter().map(|p| (3.0 * p.x).cos() * (2.0 * p.y).sin()).collect();
    let mut prev: Vec<f64> = (0..grid.len()).map(|_| rng.sample(StandardNormal)).collect();
    let mut days = Vec::new();
    for d in 0..4 {
        let value: Vec<f64> = (0..grid.len())
            .map(|i| {
                let e: f64 = rng.sample(StandardNormal);
                1.0 + 0.5 * centers[i].x - 0.2 * centers[i].y + 0.8 * elev[i] + 0.7 * prev[i] + e
            })
            .collect();
        days.push(
            GridStack::from_channels(grid, vec![("value".into(), value.clone()), ("elevation".into(), elev.clone())])
                .unwrap()
                .with_metadata("date", format!("2024-01-0{}", d + 1).into()),
        );
        prev = value;
    }
    let (resid, fits) = fit_gridded_mean(&days).unwrap();
    assert_eq!(resid.n_channels(), 3);
    assert_eq!(resid.channel_names()[0], "2024-01-02");
    for f in &fits {
        assert!((f.alpha - 0.7).abs() < 0.05, "alpha {}", f.alpha);
    }
}

#[test]
fn reconstruction_rejects_a_fully_observed_mask() {
    let lattice = unit_lattice(5);
    let grid = lattice.as_pixel_grid();
    let fields = GridStack::from_channels(grid, vec![("d0".into(), (0..25).map(|i| i as f64).collect())]).unwrap();
    let err = run_reconstruction(
        &fields,
        &[true; 25],
        &ParamFields::stationary(25, 1.0),
        &lattice,
        &BasisSpec::default(),
        &MleConfig::default(),
    )
    .unwrap_err();
    assert!(err.to_string().contains("held-out"));
}

#[test]
fn station_day_variants_nest_and_subset() {
    let lattice = unit_lattice(10);
    let obs = sample_obs(60, 46);
    let base = random_params(lattice.len(), &mut rng(47));
    let mask = WeightMask::from_predicate(&lattice, |p| p.x < 0.6);
    let s = FitSettings {
        lattice: &lattice,
        basis: &BasisSpec::default(),
        mle: &MleConfig::default(),
        refine: &RefineConfig::default(),
    };
    let day = run_station_day(&obs, Some(&base), Some(&mask), &ModelVariant::ALL, s).unwrap();
    let ns = day.get(ModelVariant::Nonstationary).unwrap();
    let adj = day.get(ModelVariant::NonstationaryAdjusted).unwrap();
    assert!(adj.loglik >= ns.loglik - 1e-9);
    let diag = day.diagnostics.as_ref().unwrap();
    assert!(diag.mean_log_diff_adjusted.is_some() && diag.land_nodes > 0);

    let only = run_station_day(&obs, None, None, &[ModelVariant::Stationary], s).unwrap();
    assert_eq!(only.variants.len(), 1);
    // a variant that cannot run is recorded, the others still fit
    let partial =
        run_station_day(&obs, None, None, &[ModelVariant::Stationary, ModelVariant::Nonstationary], s).unwrap();
    assert!(partial.get(ModelVariant::Stationary).is_some());
    assert!(partial.variants[1].error.as_deref().unwrap().contains("parameter fields"));
}

#[test]
fn cv_report_is_reproducible() {
    let lattice = unit_lattice(8);
    let a = sample_obs(40, 48);
    let b = sample_obs(40, 49);
    let days = [
        CvDay { obs: &a, base: None, mask: None },
        CvDay { obs: &b, base: None, mask: None },
    ];
    let s = FitSettings {
        lattice: &lattice,
        basis: &BasisSpec::default(),
        mle: &MleConfig::default(),
        refine: &RefineConfig::default(),
    };
    let cv = CvConfig { folds: 4, ..CvConfig::default() };
    let r1 = run_cv(&days, &[ModelVariant::Stationary], &cv, 100, 3, s).unwrap();
    let r2 = run_cv(&days, &[ModelVariant::Stationary], &cv, 100, 3, s).unwrap();
    assert_eq!(r1.to_json(), r2.to_json());
    assert_eq!(r1.table[0].n, 80);
    let bad = CvConfig { folds: 1, ..CvConfig::default() };
    assert!(run_cv(&days, &[ModelVariant::Stationary], &bad, 100, 3, s).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ingestion_conserves_rows(rows in proptest::collection::vec((0u8..8, -0.2f64..1.2, 0u8..3, 0.0f64..100.0, 0u8..3), 0..80)) {
        let mut csv = String::from("station_id,lon,lat,date,value,station_type\n");
        for (sid, x, day, v, kind) in &rows {
            let kind = ["background", "traffic", "industrial"][*kind as usize];
            if *sid == 7 {
                csv.push_str("broken,row\n");
            } else {
                csv.push_str(&format!("s{sid},{x},0.5,2024-01-0{},{v},{kind}\n", day + 1));
            }
        }
        let filter = StationFilter { min_active: 3, ..StationFilter::default() };
        match ingest_reader(csv.as_bytes(), &filter, &Bounds::new(0.0, 1.0, 0.0, 1.0)) {
            Ok(days) => {
                prop_assert!(days.report.is_conserved());
                prop_assert_eq!(days.report.rows_in, rows.len());
                let kept: usize = days.days.iter().map(|d| d.n()).sum();
                prop_assert_eq!(kept, days.report.rows_kept);
            }
            Err(e) => prop_assert!(rows.iter().all(|r| r.0 == 7), "unexpected error: {}", e),
        }
    }
}
