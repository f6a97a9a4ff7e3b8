//! Per-segment extraction: responsibilities per the model's policy, then the
//! closed-form latent posterior. Means (and optionally covariances) go to a
//! text or binary vector file.

use std::path::PathBuf;

use ivector::io::{self, IVectorEntry};
use ivector::Result;

use super::common::{self, RespPolicy};

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    manifest: PathBuf,
    /// Model directory.
    #[arg(long)]
    model: PathBuf,
    /// Output vector file.
    #[arg(long)]
    out: PathBuf,
    /// Also write posterior covariances.
    #[arg(long)]
    covariances: bool,
    /// Write the binary variant instead of text.
    #[arg(long)]
    binary: bool,
    #[arg(long, value_enum, default_value_t = RespPolicy::Auto)]
    responsibilities: RespPolicy,
}

pub fn run(args: Args, _reproducible: bool) -> Result<()> {
    let manifest = io::read_manifest(&args.manifest)?;
    let segs = manifest.load_features()?;
    let (params, calibration) = io::read_model(&args.model)?;
    let resps = common::resolve_responsibilities(
        &manifest,
        &segs,
        &params,
        calibration.as_ref(),
        args.responsibilities,
    )?;
    let evals = common::evaluate_segments(&segs, &resps, &params)?;
    let entries: Vec<IVectorEntry> = segs
        .iter()
        .zip(&evals)
        .map(|(seg, ev)| IVectorEntry {
            segment_id: seg.segment_id.clone(),
            mean: ev.posterior.mean.clone(),
            covariance: args.covariances.then(|| ev.posterior.covariance.clone()),
        })
        .collect();
    if args.binary {
        io::write_ivectors_binary(&args.out, &entries)
    } else {
        io::write_ivectors_text(&args.out, &entries)
    }
}
