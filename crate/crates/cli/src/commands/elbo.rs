//! Bound diagnostics: one `<segment_id>\t<elbo>` row per segment on standard
//! output, then a `TOTAL` row with the sum.

use std::path::PathBuf;

use ivector::io;
use ivector::Result;

use super::common::{self, RespPolicy};

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: PathBuf,
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
    let mut total = 0.0;
    for (seg, ev) in segs.iter().zip(&evals) {
        println!("{}\t{:.12e}", seg.segment_id, ev.elbo);
        total += ev.elbo;
    }
    println!("TOTAL\t{total:.12e}");
    Ok(())
}
