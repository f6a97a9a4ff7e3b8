//! Shared plumbing: responsibility resolution and per-segment evaluation
//! used by extract, elbo and calibrate.

use ivector::calibration::{self, CalibrationParams};
use ivector::gmm::{self, Responsibilities};
use ivector::io::Manifest;
use ivector::model::{ModelParams, SegmentFeatures};
use ivector::posterior::{self, IVectorPosterior, PrecomputedProjections};
use ivector::stats;
use ivector::{reduce, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum RespPolicy {
    /// Calibrated file posteriors when the model carries a calibration,
    /// plain file posteriors when the manifest lists them, alignment
    /// otherwise.
    Auto,
    /// Always align against the model's mixture.
    Align,
    /// Require posterior files (calibrated when the model has a calibration).
    Posteriors,
}

pub fn resolve_responsibilities(
    manifest: &Manifest,
    segs: &[SegmentFeatures],
    params: &ModelParams,
    calibration: Option<&CalibrationParams>,
    policy: RespPolicy,
) -> Result<Vec<Responsibilities>> {
    let use_posteriors = match policy {
        RespPolicy::Align => false,
        RespPolicy::Posteriors => true,
        RespPolicy::Auto => calibration.is_some() || manifest.has_posteriors(),
    };
    if !use_posteriors {
        return reduce::par_map(segs, |s| gmm::align(params, s));
    }
    if calibration.is_some() && !manifest.has_posteriors() {
        return Err(Error::Manifest(
            "the model carries a posterior calibration but the manifest lists no posterior files"
                .into(),
        ));
    }
    let raws = manifest.load_posteriors()?;
    for (raw, seg) in raws.iter().zip(segs) {
        if raw.num_components() != params.dims.components {
            return Err(Error::DimensionMismatch {
                context: format!("posteriors for segment {:?}", seg.segment_id),
                expected: format!("{} components", params.dims.components),
                got: format!("{}", raw.num_components()),
            });
        }
        if raw.num_frames() != seg.num_frames() {
            return Err(Error::DimensionMismatch {
                context: format!("posteriors for segment {:?}", seg.segment_id),
                expected: format!("{} frames", seg.num_frames()),
                got: format!("{}", raw.num_frames()),
            });
        }
    }
    let identity = CalibrationParams::identity(params.dims.components);
    let cal = calibration.unwrap_or(&identity);
    reduce::par_map(&raws, |r| calibration::apply_calibration(r, cal))
}

pub struct SegmentEvaluation {
    pub posterior: IVectorPosterior,
    pub elbo: f64,
}

/// Statistics, optimal latent posterior and bound for every segment.
pub fn evaluate_segments(
    segs: &[SegmentFeatures],
    resps: &[Responsibilities],
    params: &ModelParams,
) -> Result<Vec<SegmentEvaluation>> {
    let proj = PrecomputedProjections::new(params)?;
    let idx: Vec<usize> = (0..segs.len()).collect();
    reduce::par_map(&idx, |&k| {
        let st = stats::accumulate(&segs[k], &resps[k], &params.means, params.covariance_mode())?;
        let post = IVectorPosterior::from_stats(&st, &proj)?;
        let elbo = posterior::elbo(&resps[k], &st, &post, params, &proj)?;
        Ok(SegmentEvaluation {
            posterior: post,
            elbo,
        })
    })
}
