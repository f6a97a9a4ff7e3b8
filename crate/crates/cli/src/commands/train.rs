//! Extractor training. Options come from built-in defaults, overridden by a
//! key-value config file, overridden by command-line flags. The run writes a
//! model directory (with the fitted calibration for the calibrated recipe)
//! and, on request, a machine-readable report of every phase's bound.

use std::fmt::Write as _;
use std::path::PathBuf;

use ivector::io;
use ivector::trainer::{self, Recipe, RespSource, TrainConfig, TrainReport};
use ivector::{Error, Result};

use super::synth::CovArg;
use crate::config::ConfigFile;

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// classical, phonetic, phonetic-joint or calibrated.
    #[arg(long)]
    recipe: Option<String>,
    /// Input model: the background model (classical) or a warm start.
    #[arg(long)]
    model_in: Option<PathBuf>,
    /// Output model directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Key-value config file; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    ivector_dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    covariance: Option<CovArg>,
    /// Early-stop threshold on the per-frame bound gain; 0 disables.
    #[arg(long)]
    min_improvement: Option<f64>,
    /// Keep the input mixture weights instead of re-estimating them.
    #[arg(long)]
    keep_weights: bool,
    #[arg(long)]
    floor_abs: Option<f64>,
    #[arg(long)]
    floor_rel: Option<f64>,
    /// Scale of the random loading initialization.
    #[arg(long)]
    loading_scale: Option<f64>,
    /// One calibration scale per component instead of a shared scalar.
    #[arg(long)]
    calib_per_component: bool,
    /// Re-start each iteration's calibration from the identity.
    #[arg(long)]
    calib_cold_start: bool,
    #[arg(long)]
    calib_max_iters: Option<usize>,
    /// Where to write the phase-by-phase report.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Suppress progress lines on standard error.
    #[arg(long)]
    quiet: bool,
}

pub fn run(args: Args, reproducible: bool) -> Result<()> {
    let file = match &args.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::empty(),
    };
    let require = |what: &str, v: Option<String>| {
        v.ok_or_else(|| Error::InvalidArgument(format!("missing --{what} (or config key)")))
    };
    let manifest_path = PathBuf::from(require(
        "manifest",
        file.resolve(
            "manifest",
            args.manifest.map(|p| p.display().to_string()),
        )?,
    )?);
    let out_path = PathBuf::from(require(
        "out",
        file.resolve("model_out", args.out.map(|p| p.display().to_string()))?,
    )?);
    let recipe = Recipe::parse(&require("recipe", file.resolve("recipe", args.recipe)?)?)?;
    let model_in = file
        .resolve("model_in", args.model_in.map(|p| p.display().to_string()))?
        .map(PathBuf::from);
    let report_path = file
        .resolve("report", args.report.map(|p| p.display().to_string()))?
        .map(PathBuf::from);

    let ivector_dim = file.resolve("ivector_dim", args.ivector_dim)?.unwrap_or(2);
    let mut cfg = TrainConfig::new(recipe, ivector_dim);
    cfg.iterations = file.resolve("iterations", args.iterations)?.unwrap_or(cfg.iterations);
    cfg.seed = file.resolve("seed", args.seed)?.unwrap_or(cfg.seed);
    cfg.min_improvement_per_frame = file
        .resolve("min_improvement_per_frame", args.min_improvement)?
        .unwrap_or(cfg.min_improvement_per_frame);
    // config key update_weights=false is the file-side spelling of --keep-weights
    cfg.update_weights = match file.resolve::<bool>("update_weights", None)? {
        Some(v) => v && !args.keep_weights,
        None => !args.keep_weights,
    };
    let explicit_mode = file.resolve::<String>(
        "covariance",
        args.covariance.map(|c| {
            match c {
                CovArg::Diagonal => "diagonal",
                CovArg::Full => "full",
            }
            .to_string()
        }),
    )?;
    if let Some(mode) = &explicit_mode {
        cfg.mode = ivector::model::CovarianceMode::parse(mode)?;
    }
    cfg.floor.absolute = file.resolve("floor_absolute", args.floor_abs)?.unwrap_or(cfg.floor.absolute);
    cfg.floor.relative = file.resolve("floor_relative", args.floor_rel)?.unwrap_or(cfg.floor.relative);
    cfg.loading_scale = file.resolve("loading_scale", args.loading_scale)?;
    cfg.calibration.per_component_scale =
        file.resolve_flag("calibration_per_component", args.calib_per_component)?;
    if let Some(w) = file.resolve::<bool>("calibration_warm_start", None)? {
        cfg.calibration.warm_start = w;
    }
    if args.calib_cold_start {
        cfg.calibration.warm_start = false;
    }
    if let Some(n) = file.resolve("calibration_max_iterations", args.calib_max_iters)? {
        cfg.calibration.options.max_iterations = n;
    }
    cfg.reproducible = reproducible;
    cfg.progress = !file.resolve_flag("quiet", args.quiet)?;

    let manifest = io::read_manifest(&manifest_path)?;
    let segs = manifest.load_features()?;
    let initial = model_in.as_deref().map(io::read_model).transpose()?;
    let (init_params, init_cal) = match initial {
        Some((p, c)) => (Some(p), c),
        None => (None, None),
    };
    if explicit_mode.is_none() {
        if let Some(p) = &init_params {
            cfg.mode = p.covariance_mode();
        }
    }

    let source = match recipe {
        Recipe::Classical => RespSource::Align,
        Recipe::Phonetic | Recipe::PhoneticJoint => {
            let raws = manifest.load_posteriors()?;
            let n = init_params
                .as_ref()
                .map(|p| p.dims.components)
                .or_else(|| raws.first().map(|r| r.num_components()));
            let identity = ivector::calibration::CalibrationParams::identity(n.unwrap_or(1));
            let resps: Result<Vec<_>> = raws
                .iter()
                .map(|r| ivector::calibration::apply_calibration(r, &identity))
                .collect();
            RespSource::Fixed(resps?)
        }
        Recipe::Calibrated => RespSource::Calibrated {
            raws: manifest.load_posteriors()?,
            init: init_cal,
        },
    };

    let outcome = trainer::train(&segs, init_params.as_ref(), source, &cfg)?;
    io::write_model(&out_path, &outcome.params, outcome.calibration.as_ref())?;
    if let Some(rp) = &report_path {
        std::fs::write(rp, render_report(&outcome.report)).map_err(|e| Error::io(rp, e))?;
    }
    Ok(())
}

fn render_report(report: &TrainReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "report = train");
    let _ = writeln!(out, "recipe = {}", report.recipe.as_str());
    let _ = writeln!(out, "iterations_run = {}", report.iteration_bounds.len());
    let _ = writeln!(out, "stopped_early = {}", report.stopped_early);
    let _ = writeln!(out, "total_frames = {}", report.total_frames);
    if let Some(last) = report.phases.last() {
        let _ = writeln!(out, "final_elbo = {:.17e}", last.elbo);
    }
    for p in &report.phases {
        let _ = writeln!(
            out,
            "phase\t{}\t{}\t{:.17e}\t{:.17e}",
            p.iteration,
            p.phase.as_str(),
            p.elbo,
            p.delta
        );
    }
    for (k, v) in report.iteration_bounds.iter().enumerate() {
        let _ = writeln!(out, "iteration\t{}\t{:.17e}", k + 1, v);
    }
    for (k, c) in report.calibrations.iter().enumerate() {
        let _ = writeln!(
            out,
            "calibration\t{}\t{:.17e}\t{:.17e}\t{}\t{}",
            k + 1,
            c.objective_before,
            c.objective_after,
            c.iterations,
            c.converged
        );
    }
    out
}
