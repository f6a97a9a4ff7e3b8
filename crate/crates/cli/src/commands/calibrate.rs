//! Standalone posterior calibration at a fixed model: latent posteriors are
//! computed once from the current calibration, held fixed, and the scale and
//! offsets are re-fit by maximizing the bound. Prints the per-frame
//! objective before and after.

use std::path::PathBuf;

use ivector::calibration::{
    self, CalibrationParams, CalibrationScale, OptimizeOptions,
};
use ivector::io;
use ivector::posterior::{self, PrecomputedProjections};
use ivector::{reduce, Result};
use nalgebra::{DMatrix, DVector};

use super::common::{self, RespPolicy};

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    manifest: PathBuf,
    /// Input model directory.
    #[arg(long)]
    model: PathBuf,
    /// Output model directory (same parameters, new calibration).
    #[arg(long)]
    out: PathBuf,
    /// One scale per component instead of a shared scalar.
    #[arg(long)]
    per_component: bool,
    /// Ignore any calibration already in the model and start from identity.
    #[arg(long)]
    cold_start: bool,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
}

pub fn run(args: Args, _reproducible: bool) -> Result<()> {
    let manifest = io::read_manifest(&args.manifest)?;
    let segs = manifest.load_features()?;
    let (params, existing) = io::read_model(&args.model)?;
    let n = params.dims.components;
    let start = match (args.cold_start, existing) {
        (false, Some(c)) => c,
        _ if args.per_component => CalibrationParams::new(
            CalibrationScale::PerComponent(DVector::from_element(n, 1.0)),
            DVector::zeros(n),
        )?,
        _ => CalibrationParams::identity(n),
    };
    let start = match (&start.scale, args.per_component) {
        (CalibrationScale::Scalar(a), true) => CalibrationParams::new(
            CalibrationScale::PerComponent(DVector::from_element(n, *a)),
            start.offsets.clone(),
        )?,
        _ => start,
    };

    let raws = manifest.load_posteriors()?;
    let resps = common::resolve_responsibilities(
        &manifest,
        &segs,
        &params,
        Some(&start),
        RespPolicy::Posteriors,
    )?;
    let evals = common::evaluate_segments(&segs, &resps, &params)?;
    let proj = PrecomputedProjections::new(&params)?;
    let idx: Vec<usize> = (0..segs.len()).collect();
    let log_resp: Vec<DMatrix<f64>> = reduce::par_map(&idx, |&k| {
        let ll =
            posterior::expected_log_likelihoods(&segs[k], &evals[k].posterior, &params, &proj)?;
        Ok(calibration::log_normalize_rows(&ll))
    })?;

    let opts = OptimizeOptions {
        max_iterations: args.max_iters,
        gradient_tolerance_per_frame: args.tolerance,
        ..OptimizeOptions::default()
    };
    let (cal, report) = calibration::optimize(&raws, &log_resp, &start, &opts)?;
    let frames: usize = raws.iter().map(|r| r.num_frames()).sum();
    println!(
        "objective_before\t{:.12e}",
        report.objective_before / frames.max(1) as f64
    );
    println!(
        "objective_after\t{:.12e}",
        report.objective_after / frames.max(1) as f64
    );
    println!("iterations\t{}", report.iterations);
    println!("converged\t{}", report.converged);
    io::write_model(&args.out, &params, Some(&cal))
}
