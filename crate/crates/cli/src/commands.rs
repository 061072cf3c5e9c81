use std::path::{Path, PathBuf};

use nslk_core::config::{IntervalKind, Paths};
use nslk_core::pipeline::{
    build_window_ensembles, conditional_draw_stack, fit_gridded_mean, fit_variant, item_seed,
    observation_mask, run_cv, run_predict_fine, run_reconstruction, run_station_day, simulate_stack,
    CvDay, FitSettings, SeMethod,
};
use nslk_core::sim::{params_from_stack, DirectorySink};
use nslk_core::stations::{ingest_stations, StationDays};
use nslk_core::{
    generate_training_set, refine_kappa_point, Error, GridStack, LatticeGrid,
    ObservationSet, ParamFields, Result, RunConfig, SpatialData, WeightMask,
};
use serde::Serialize;

use crate::render::render_png;
use crate::{Cli, Command, FineArgs, SeKind, StationInput};

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::ValidateConfig(a) => {
            cfg.validate()?;
            emit_text(a.out.as_deref(), &cfg.to_json())
        }
        Command::Simulate(a) => {
            if let Some(r) = a.replicates {
                cfg.training.replicates = r;
            }
            if let Some(s) = a.seed {
                cfg.seeds.simulation = s;
            }
            if a.params.is_some() {
                cfg.paths.params = a.params;
            }
            cfg.validate()?;
            let lattice = cfg.lattice_grid()?;
            let params = match (&cfg.paths.params, a.kappa2) {
                (Some(p), _) => load_params(p, &lattice)?,
                (None, Some(k)) => ParamFields::stationary(lattice.len(), k),
                (None, None) => {
                    return Err(Error::Validation(
                        "simulate needs --params (or paths.params) or --kappa2".into(),
                    ))
                }
            };
            let stack = simulate_stack(
                &lattice,
                &cfg.basis,
                &params,
                cfg.training.replicates,
                cfg.seeds.simulation,
                a.standardize,
            )?;
            stack.write(&a.out)
        }
        Command::GenTrain(a) => {
            if let Some(n) = a.n_pairs {
                cfg.training.n_pairs = n;
            }
            if let Some(r) = a.replicates {
                cfg.training.replicates = r;
            }
            if let Some(s) = a.seed {
                cfg.seeds.training = s;
            }
            cfg.validate()?;
            let lattice = cfg.lattice_grid()?;
            let mut sink = DirectorySink::new(&a.out)?;
            let summary = generate_training_set(
                cfg.training.n_pairs,
                &lattice,
                &cfg.basis,
                &cfg.prior,
                cfg.training.replicates,
                cfg.seeds.training,
                &mut sink,
            )?;
            emit_json(None, &summary)
        }
        Command::FitMean(a) => {
            if !a.days.is_empty() {
                cfg.paths.day_grids = a.days;
            }
            cfg.validate()?;
            if cfg.paths.day_grids.is_empty() {
                return Err(Error::Validation("fit-mean needs --days (or paths.day_grids)".into()));
            }
            let days = cfg
                .paths
                .day_grids
                .iter()
                .map(|p| GridStack::read(p))
                .collect::<Result<Vec<_>>>()?;
            let (residuals, fits) = fit_gridded_mean(&days)?;
            residuals.write(&a.out)?;
            match a.report {
                Some(p) => emit_json(Some(&p), &fits),
                None => Ok(()),
            }
        }
        Command::Windows(a) => {
            if a.residuals.is_some() {
                cfg.paths.residuals = a.residuals;
            }
            if let Some(b) = a.before {
                cfg.window.before = b;
            }
            if let Some(f) = a.after {
                cfg.window.after = f;
            }
            cfg.validate()?;
            let path = required(&cfg.paths.residuals, "--residuals (or paths.residuals)")?;
            let residuals = GridStack::read(path)?;
            let ens = build_window_ensembles(&residuals, a.day, &cfg.window)?;
            let names = (0..ens.r()).map(|k| format!("g{k:03}")).collect();
            GridStack::new(residuals.grid(), names, ens.values().to_vec())?
                .with_metadata("center_day", a.day.into())
                .with_metadata("standardized", true.into())
                .write(&a.out)
        }
        Command::Reconstruct(a) => {
            if a.params.is_some() {
                cfg.paths.params = a.params;
            }
            if let Some(f) = a.fraction {
                cfg.reconstruction.observed_fraction = f;
            }
            if let Some(s) = a.seed {
                cfg.seeds.mask = s;
            }
            cfg.validate()?;
            let lattice = cfg.lattice_grid()?;
            let fields = GridStack::read(&a.fields)?;
            let params = load_params(required(&cfg.paths.params, "--params (or paths.params)")?, &lattice)?;
            let observed = observation_mask(
                fields.grid().len(),
                cfg.reconstruction.observed_fraction,
                cfg.seeds.mask,
            )?;
            let report = run_reconstruction(&fields, &observed, &params, &lattice, &cfg.basis, &cfg.mle)?;
            emit_json(a.out.as_deref(), &report)
        }
        Command::FitDay(a) => {
            if let Some(v) = a.variants {
                cfg.variants = v;
            }
            apply_input(&mut cfg.paths, &a.input);
            cfg.validate()?;
            let ctx = Context::load(&cfg)?;
            let obs = ctx.day(&a.day)?;
            let fit = run_station_day(
                obs,
                ctx.params.as_ref(),
                ctx.mask.as_ref(),
                &cfg.variants,
                ctx.settings(&cfg),
            )?;
            emit_json(a.out.as_deref(), &fit)
        }
        Command::Refine(a) => {
            if let Some(k) = a.kappa_point_max {
                cfg.refine.kappa_point_max = k;
            }
            apply_input(&mut cfg.paths, &a.input);
            cfg.validate()?;
            let ctx = Context::load(&cfg)?;
            let obs = ctx.day(&a.day)?;
            let base = ctx
                .params
                .as_ref()
                .ok_or_else(|| Error::Validation("refine needs --params (or paths.params)".into()))?;
            let mask = ctx
                .mask
                .as_ref()
                .ok_or_else(|| Error::Validation("refine needs --mask (or paths.land_mask)".into()))?;
            let (obs, _) = obs.deduplicate();
            let data = SpatialData::from_observations(&obs)?;
            let result = refine_kappa_point(&data, base, mask, &ctx.lattice, &cfg.basis, &cfg.refine)?;
            if let Some(p) = &a.params_out {
                params_stack(&result.adjustment.adjusted, &ctx.lattice)?.write(p)?;
            }
            emit_json(a.out.as_deref(), &result)
        }
        Command::Cv(a) => {
            if let Some(v) = a.variants {
                cfg.variants = v;
            }
            if let Some(k) = a.folds {
                cfg.cv.folds = k;
            }
            if let Some(s) = a.seed {
                cfg.seeds.folds = s;
            }
            apply_input(&mut cfg.paths, &a.input);
            cfg.validate()?;
            let ctx = Context::load(&cfg)?;
            let selected: Vec<&ObservationSet> = match &a.days {
                Some(ids) => ids.iter().map(|d| ctx.day(d)).collect::<Result<_>>()?,
                None => ctx.stations.days.iter().collect(),
            };
            let days: Vec<CvDay<'_>> = selected
                .into_iter()
                .map(|obs| CvDay {
                    obs,
                    base: ctx.params.as_ref(),
                    mask: ctx.mask.as_ref(),
                })
                .collect();
            let report = run_cv(
                &days,
                &cfg.variants,
                &cfg.cv,
                cfg.conditional_draws,
                cfg.seeds.folds,
                ctx.settings(&cfg),
            )?;
            if cfg.cv.intervals == IntervalKind::EnsembleQuantile {
                log::info!("intervals from {} conditional draws", cfg.conditional_draws);
            }
            emit_text(a.out.as_deref(), &report.to_json())
        }
        Command::Predict(a) => {
            let (model, grid, covariates) = fine_model(&mut cfg, &a.fine)?;
            let se = match a.se {
                SeKind::None => SeMethod::None,
                SeKind::Exact => SeMethod::Exact,
                SeKind::Conditional => SeMethod::Conditional {
                    draws: cfg.conditional_draws,
                    seed: item_seed(cfg.seeds.conditional, 0),
                },
            };
            let stack = run_predict_fine(
                &model,
                &grid,
                covariates.as_ref(),
                &cfg.prediction.averaged_channels,
                se,
            )?
            .with_metadata("day", a.fine.day.clone().into());
            stack.write(&a.fine.out)?;
            if let Some(dir) = a.png_dir {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for ch in stack.channel_names() {
                    let out = dir.join(format!("{ch}.png"));
                    render_png(&stack, ch, crate::render::Colormap::Viridis, crate::render::NanStyle::Transparent, &out)?;
                }
            }
            Ok(())
        }
        Command::Condsim(a) => {
            let (model, grid, covariates) = fine_model(&mut cfg, &a.fine)?;
            conditional_draw_stack(
                &model,
                &grid,
                covariates.as_ref(),
                &cfg.prediction.averaged_channels,
                cfg.conditional_draws,
                item_seed(cfg.seeds.conditional, 0),
            )?
            .with_metadata("day", a.fine.day.clone().into())
            .write(&a.fine.out)
        }
        Command::Render(a) => {
            let stack = GridStack::read(&a.stack)?;
            let sidecar = render_png(&stack, &a.channel, a.colormap, a.nan, &a.out)?;
            log::info!("rendered {} ({:?} .. {:?})", a.out.display(), sidecar.min, sidecar.max);
            Ok(())
        }
    }
}

/// Inputs shared by the station-data commands.
struct Context {
    lattice: LatticeGrid,
    stations: StationDays,
    params: Option<ParamFields>,
    mask: Option<WeightMask>,
}

impl Context {
    fn load(cfg: &RunConfig) -> Result<Self> {
        let lattice = cfg.lattice_grid()?;
        let path = required(&cfg.paths.stations, "--stations (or paths.stations)")?;
        let stations = ingest_stations(path, &cfg.stations, &cfg.domain)?;
        log::info!(
            "stations: {} rows in, {} kept, {} days",
            stations.report.rows_in,
            stations.report.rows_kept,
            stations.days.len()
        );
        let params = cfg.paths.params.as_ref().map(|p| load_params(p, &lattice)).transpose()?;
        let mask = match &cfg.paths.land_mask {
            Some(p) => Some(WeightMask::from_stack(&GridStack::read(p)?, &lattice)?),
            None => None,
        };
        Ok(Context {
            lattice,
            stations,
            params,
            mask,
        })
    }

    fn day(&self, id: &str) -> Result<&ObservationSet> {
        self.stations.days.iter().find(|d| d.day_id == id).ok_or_else(|| {
            let kept: Vec<&str> = self.stations.days.iter().map(|d| d.day_id.as_str()).collect();
            Error::Validation(format!(
                "day {id} is not among the kept days ({})",
                if kept.is_empty() { "none".to_string() } else { kept.join(", ") }
            ))
        })
    }

    fn settings<'a>(&'a self, cfg: &'a RunConfig) -> FitSettings<'a> {
        FitSettings {
            lattice: &self.lattice,
            basis: &cfg.basis,
            mle: &cfg.mle,
            refine: &cfg.refine,
        }
    }
}

fn fine_model(
    cfg: &mut RunConfig,
    a: &FineArgs,
) -> Result<(nslk_core::FittedModel, nslk_core::PixelGrid, Option<GridStack>)> {
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(h) = a.height {
        cfg.prediction.height = h;
    }
    if let Some(w) = a.width {
        cfg.prediction.width = w;
    }
    if let Some(d) = a.draws {
        cfg.conditional_draws = d;
    }
    if let Some(s) = a.seed {
        cfg.seeds.conditional = s;
    }
    if a.covariates.is_some() {
        cfg.paths.covariates = a.covariates.clone();
    }
    apply_input(&mut cfg.paths, &a.input);
    cfg.validate()?;
    let ctx = Context::load(cfg)?;
    let (obs, _) = ctx.day(&a.day)?.deduplicate();
    let fit = fit_variant(&obs, cfg.variant, ctx.params.as_ref(), ctx.mask.as_ref(), ctx.settings(cfg))?;
    let model = fit.model(&obs, &ctx.lattice, &cfg.basis)?;
    let covariates = cfg.paths.covariates.as_ref().map(|p| GridStack::read(p)).transpose()?;
    Ok((model, cfg.prediction_grid()?, covariates))
}

fn apply_input(paths: &mut Paths, input: &StationInput) {
    if input.stations.is_some() {
        paths.stations = input.stations.clone();
    }
    if input.params.is_some() {
        paths.params = input.params.clone();
    }
    if input.mask.is_some() {
        paths.land_mask = input.mask.clone();
    }
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Validation(format!("missing input: {what}")))
}

fn load_params(path: &Path, lattice: &LatticeGrid) -> Result<ParamFields> {
    let p = params_from_stack(&GridStack::read(path)?)?;
    p.validate(lattice.len())?;
    Ok(p)
}

fn params_stack(p: &ParamFields, lattice: &LatticeGrid) -> Result<GridStack> {
    let [lk, rho, theta] = p.to_log_channels();
    GridStack::from_channels(
        lattice.as_pixel_grid(),
        vec![
            ("log_kappa2".into(), lk),
            ("rho".into(), rho),
            ("theta".into(), theta),
        ],
    )
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("cannot serialize output: {e}")))?;
    emit_text(out, &text)
}

fn emit_text(out: Option<&Path>, text: &str) -> Result<()> {
    let mut text = text.to_string();
    if !text.ends_with('\n') {
        text.push('\n');
    }
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
