//! Background model training: EM on the plain mixture, writing the result as
//! a model directory with zero loadings (the latent dimension is declared up
//! front so later recipes can warm-start from this file).

use std::path::PathBuf;

use ivector::gmm::{EmptyComponentPolicy, FloorSpec, UbmConfig};
use ivector::io;
use ivector::Result;

use super::synth::CovArg;

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    manifest: PathBuf,
    /// Output model directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    components: usize,
    #[arg(long, default_value_t = 10)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = CovArg::Diagonal)]
    covariance: CovArg,
    /// Absolute variance floor.
    #[arg(long, default_value_t = 1e-6)]
    floor_abs: f64,
    /// Variance floor relative to the global per-dimension variance.
    #[arg(long, default_value_t = 1e-3)]
    floor_rel: f64,
    /// Reseed components that lose all mass instead of failing.
    #[arg(long)]
    reseed_empty: bool,
    /// Latent dimension recorded in the output model (loadings are zero).
    #[arg(long, default_value_t = 2)]
    ivector_dim: usize,
    /// Suppress the per-iteration bound trace on standard error.
    #[arg(long)]
    quiet: bool,
}

pub fn run(args: Args, reproducible: bool) -> Result<()> {
    let manifest = io::read_manifest(&args.manifest)?;
    let segs = manifest.load_features()?;
    let mut cfg = UbmConfig::new(args.components);
    cfg.iterations = args.iterations;
    cfg.seed = args.seed;
    cfg.mode = args.covariance.into();
    cfg.floor = FloorSpec {
        absolute: args.floor_abs,
        relative: args.floor_rel,
    };
    cfg.empty_policy = if args.reseed_empty {
        EmptyComponentPolicy::Reseed
    } else {
        EmptyComponentPolicy::Error
    };
    cfg.ivector_dim = args.ivector_dim;
    cfg.reproducible = reproducible;
    let (params, trace) = ivector::gmm::train_ubm(&segs, &cfg)?;
    if !args.quiet {
        for (k, v) in trace.iter().enumerate() {
            eprintln!("iter={k} phase=ubm elbo={v:.9}");
        }
    }
    io::write_model(&args.out, &params, None)
}
