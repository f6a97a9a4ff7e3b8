//! Dataset synthesis: draws a random model, samples segments from it, and
//! writes a ready-to-train directory (manifest, features, optional
//! posteriors) plus the ground truth (model directory and latent vectors)
//! for oracle experiments.

use std::path::PathBuf;

use clap::ValueEnum;
use ivector::io::{self, IVectorEntry, ManifestEntry};
use ivector::model::{
    noisy_path_posteriors, random_params, sample_dataset, CovarianceMode, ModelDims,
};
use ivector::numeric::item_seed;
use ivector::{Error, Result};
use nalgebra::DMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PosteriorKind {
    /// No posterior files.
    None,
    /// One-hot posteriors of the true component path.
    Truth,
    /// True path logits blurred by temperature and Gaussian noise.
    Noisy,
}

#[derive(clap::Args)]
pub struct Args {
    /// Output directory for the dataset.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing output directory.
    #[arg(long)]
    force: bool,
    #[arg(long, default_value_t = 4)]
    components: usize,
    #[arg(long, default_value_t = 5)]
    feature_dim: usize,
    #[arg(long, default_value_t = 2)]
    ivector_dim: usize,
    #[arg(long, default_value_t = 200)]
    segments: usize,
    /// Frames per segment.
    #[arg(long, default_value_t = 100)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = CovArg::Diagonal)]
    covariance: CovArg,
    /// Standard deviation of the random loading entries.
    #[arg(long, default_value_t = 0.5)]
    loading_sd: f64,
    #[arg(long, value_enum, default_value_t = PosteriorKind::None)]
    posteriors: PosteriorKind,
    /// Softness of the noisy posteriors (smaller is closer to one-hot).
    #[arg(long, default_value_t = 0.5)]
    temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CovArg {
    Diagonal,
    Full,
}

impl From<CovArg> for CovarianceMode {
    fn from(c: CovArg) -> Self {
        match c {
            CovArg::Diagonal => CovarianceMode::Diagonal,
            CovArg::Full => CovarianceMode::Full,
        }
    }
}

pub fn run(args: Args) -> Result<()> {
    if args.out.exists() && !args.force {
        return Err(Error::InvalidArgument(format!(
            "output directory {} exists; pass --force to overwrite",
            args.out.display()
        )));
    }
    if args.segments == 0 || args.frames == 0 {
        return Err(Error::InvalidArgument("need at least one segment and one frame".into()));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let dims = ModelDims::new(args.components, args.feature_dim, args.ivector_dim)?;
    let params = random_params(dims, args.covariance.into(), args.loading_sd, args.seed)?;
    let dataset = sample_dataset(&params, args.segments, args.frames, args.seed)?;

    let mut entries = Vec::with_capacity(dataset.len());
    let mut truths = Vec::with_capacity(dataset.len());
    for (k, (seg, truth)) in dataset.iter().enumerate() {
        let feat_name = format!("{}.feat", seg.segment_id);
        io::write_features(&args.out.join(&feat_name), seg)?;
        let posterior = match args.posteriors {
            PosteriorKind::None => None,
            PosteriorKind::Truth => {
                let mut dense = DMatrix::zeros(seg.num_frames(), args.components);
                for (t, &i) in truth.path.iter().enumerate() {
                    dense[(t, i)] = 1.0;
                }
                Some(dense)
            }
            PosteriorKind::Noisy => Some(noisy_path_posteriors(
                &truth.path,
                args.components,
                args.temperature,
                item_seed(args.seed, k as u64),
            )?),
        }
        .map(|dense| -> Result<String> {
            let post_name = format!("{}.post", seg.segment_id);
            let sparse = io::sparsify(&dense, 0.0);
            io::write_posteriors(&args.out.join(&post_name), args.components as u32, &sparse)?;
            Ok(post_name)
        })
        .transpose()?;
        entries.push(ManifestEntry {
            segment_id: seg.segment_id.clone(),
            feature: feat_name,
            posterior,
        });
        truths.push(IVectorEntry {
            segment_id: seg.segment_id.clone(),
            mean: truth.ivector.clone(),
            covariance: None,
        });
    }

    io::write_manifest(&args.out.join("data.tsv"), &entries)?;
    io::write_model(&args.out.join("truth-model"), &params, None)?;
    io::write_ivectors_text(&args.out.join("truth-ivectors.tsv"), &truths)?;
    Ok(())
}
