//! Calibration of externally supplied per-frame component posteriors.
//!
//! External posteriors q~ (from a phone recognizer or any other source) are
//! mapped to responsibilities by a row-wise softmax of `alpha * ln(q~) +
//! beta`. The parameters are chosen to maximize
//!
//!   J = sum_ti q_ti (ln r_ti - ln q_ti)
//!
//! where r are the model's optimal responsibilities at the current latent
//! posterior. J is minus a sum of KL divergences, so it is never positive
//! and vanishes exactly when the calibrated posteriors match the model's.
//! Raising J raises the segment evidence bound by the same amount, which is
//! what makes this a coordinate ascent step of the full training loop.
//!
//! The scale is positive (optimized through its logarithm) and is a single
//! scalar by default, or one scalar per component. The offsets are shift
//! invariant, stored in canonical zero-sum form, and optimized in a reduced
//! parameterization with the last offset eliminated.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gmm::Responsibilities;
use crate::numeric::logsumexp;
use crate::optim;

/// Raw posterior entries are clamped to this before taking logs.
pub const RAW_PROB_FLOOR: f64 = 1e-10;

/// Row sums of raw posteriors must be within this of one (API inputs).
pub const RAW_SUM_TOLERANCE: f64 = 1e-4;

/// Scale applied to the log posteriors: shared or per component.
#[derive(Debug, Clone, PartialEq)]
pub enum CalibrationScale {
    Scalar(f64),
    PerComponent(DVector<f64>),
}

impl CalibrationScale {
    fn validate(&self, components: usize) -> Result<()> {
        match self {
            CalibrationScale::Scalar(a) => {
                if !(a.is_finite() && *a > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "calibration scale must be positive, got {a}"
                    )));
                }
            }
            CalibrationScale::PerComponent(v) => {
                if v.len() != components {
                    return Err(Error::DimensionMismatch {
                        context: "per-component calibration scale".into(),
                        expected: format!("{components}"),
                        got: format!("{}", v.len()),
                    });
                }
                if v.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
                    return Err(Error::InvalidArgument(
                        "per-component calibration scales must be positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Scale applied to component i.
    pub fn at(&self, i: usize) -> f64 {
        match self {
            CalibrationScale::Scalar(a) => *a,
            CalibrationScale::PerComponent(v) => v[i],
        }
    }
}

/// Calibration transform parameters. Offsets are canonicalized to sum to
/// zero at construction (the softmax is invariant to a common shift).
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationParams {
    pub scale: CalibrationScale,
    pub offsets: DVector<f64>,
}

impl CalibrationParams {
    pub fn new(scale: CalibrationScale, offsets: DVector<f64>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::InvalidArgument("calibration needs at least one component".into()));
        }
        scale.validate(offsets.len())?;
        if offsets.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("calibration offsets".into()));
        }
        let mean = offsets.mean();
        Ok(CalibrationParams {
            scale,
            offsets: offsets.map(|v| v - mean),
        })
    }

    /// Rebuilds parameters that are already in canonical (zero-mean offset)
    /// form without re-centering, so stored values reload bit-exactly.
    pub(crate) fn from_canonical(scale: CalibrationScale, offsets: DVector<f64>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::InvalidArgument("calibration needs at least one component".into()));
        }
        scale.validate(offsets.len())?;
        if offsets.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("calibration offsets".into()));
        }
        Ok(CalibrationParams { scale, offsets })
    }

    /// Unit scale, zero offsets: recovers the (floored, renormalized) raw
    /// posteriors.
    pub fn identity(components: usize) -> Self {
        CalibrationParams {
            scale: CalibrationScale::Scalar(1.0),
            offsets: DVector::zeros(components),
        }
    }

    pub fn components(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_per_component(&self) -> bool {
        matches!(self.scale, CalibrationScale::PerComponent(_))
    }
}

/// Log of externally supplied per-frame posteriors for one segment, floored
/// at [`RAW_PROB_FLOOR`]. Rows of the original probabilities must be on the
/// simplex within [`RAW_SUM_TOLERANCE`].
#[derive(Debug, Clone)]
pub struct RawPosteriors {
    pub segment_id: String,
    /// frames x components, entries are ln of floored probabilities.
    pub log_probs: DMatrix<f64>,
}

impl RawPosteriors {
    pub fn from_probs(segment_id: impl Into<String>, probs: DMatrix<f64>) -> Result<Self> {
        Self::from_probs_with_tolerance(segment_id, probs, RAW_SUM_TOLERANCE)
    }

    /// File readers validate at a looser tolerance than the API contract;
    /// everything else goes through [`RawPosteriors::from_probs`].
    pub(crate) fn from_probs_with_tolerance(
        segment_id: impl Into<String>,
        probs: DMatrix<f64>,
        tolerance: f64,
    ) -> Result<Self> {
        let segment_id = segment_id.into();
        if probs.nrows() == 0 || probs.ncols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "raw posteriors for {segment_id:?} are empty"
            )));
        }
        for t in 0..probs.nrows() {
            let mut sum = 0.0;
            for i in 0..probs.ncols() {
                let p = probs[(t, i)];
                if !p.is_finite() || !(-1e-12..=1.0 + 1e-9).contains(&p) {
                    return Err(Error::InvalidArgument(format!(
                        "raw posterior ({t},{i}) of {segment_id:?} is {p}"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > tolerance {
                return Err(Error::InvalidArgument(format!(
                    "raw posterior row {t} of {segment_id:?} sums to {sum}"
                )));
            }
        }
        let log_probs = probs.map(|p| p.max(RAW_PROB_FLOOR).ln());
        Ok(RawPosteriors {
            segment_id,
            log_probs,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.log_probs.nrows()
    }

    pub fn num_components(&self) -> usize {
        self.log_probs.ncols()
    }
}

fn check_dims(raw: &RawPosteriors, cal: &CalibrationParams) -> Result<()> {
    if raw.num_components() != cal.components() {
        return Err(Error::DimensionMismatch {
            context: format!("calibration of segment {:?}", raw.segment_id),
            expected: format!("{} components", cal.components()),
            got: format!("{}", raw.num_components()),
        });
    }
    Ok(())
}

/// Applies the calibration transform: row-wise softmax of
/// `scale * ln(q~) + offsets`.
pub fn apply_calibration(raw: &RawPosteriors, cal: &CalibrationParams) -> Result<Responsibilities> {
    check_dims(raw, cal)?;
    let (t_s, n) = (raw.num_frames(), raw.num_components());
    let mut probs = DMatrix::zeros(t_s, n);
    let mut row = vec![0.0; n];
    for t in 0..t_s {
        for (i, r) in row.iter_mut().enumerate() {
            *r = cal.scale.at(i) * raw.log_probs[(t, i)] + cal.offsets[i];
        }
        crate::numeric::softmax_in_place(&mut row);
        for i in 0..n {
            probs[(t, i)] = row[i];
        }
    }
    Responsibilities::new(&raw.segment_id, probs)
}

/// Normalizes each row of a matrix of log scores into log probabilities.
/// Used to turn expected log likelihoods into log responsibilities.
pub fn log_normalize_rows(scores: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = scores.clone();
    for t in 0..out.nrows() {
        let row: Vec<f64> = (0..out.ncols()).map(|i| out[(t, i)]).collect();
        let lse = logsumexp(&row);
        for i in 0..out.ncols() {
            out[(t, i)] -= lse;
        }
    }
    out
}

/// Gradient of the objective in canonical coordinates: `scale` has the same
/// shape as the parameter (derivative w.r.t. alpha itself, not ln alpha),
/// `offsets` is the full-length derivative (it always sums to zero).
#[derive(Debug, Clone)]
pub struct CalibrationGradient {
    pub scale: CalibrationScale,
    pub offsets: DVector<f64>,
}

struct Evaluation {
    objective: f64,
    d_alpha: DVector<f64>,
    d_beta: DVector<f64>,
}

/// One pass over all frames: objective and canonical gradients.
/// `per_component` controls the shape of the alpha derivative.
fn evaluate(
    raws: &[RawPosteriors],
    log_resp: &[DMatrix<f64>],
    scale: &CalibrationScale,
    offsets: &DVector<f64>,
    per_component: bool,
) -> Result<Evaluation> {
    if raws.len() != log_resp.len() || raws.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} raw posterior sets paired with {} responsibility sets",
            raws.len(),
            log_resp.len()
        )));
    }
    let n = offsets.len();
    let mut objective = 0.0;
    let mut d_alpha = DVector::zeros(if per_component { n } else { 1 });
    let mut d_beta = DVector::zeros(n);
    let mut u = vec![0.0; n];
    for (raw, lr) in raws.iter().zip(log_resp) {
        if raw.num_components() != n {
            return Err(Error::DimensionMismatch {
                context: format!("segment {:?}", raw.segment_id),
                expected: format!("{n} components"),
                got: format!("{}", raw.num_components()),
            });
        }
        if lr.shape() != raw.log_probs.shape() {
            return Err(Error::DimensionMismatch {
                context: format!("log responsibilities for segment {:?}", raw.segment_id),
                expected: format!("{}x{}", raw.num_frames(), n),
                got: format!("{}x{}", lr.nrows(), lr.ncols()),
            });
        }
        for t in 0..raw.num_frames() {
            for i in 0..n {
                u[i] = scale.at(i) * raw.log_probs[(t, i)] + offsets[i];
            }
            let lse = logsumexp(&u);
            // f = sum_i q_i diff_i with diff_i = ln r_i - ln q_i
            let mut f = 0.0;
            for i in 0..n {
                let lq = u[i] - lse;
                let q = lq.exp();
                f += q * (lr[(t, i)] - lq);
            }
            objective += f;
            for i in 0..n {
                let lq = u[i] - lse;
                let q = lq.exp();
                let g = q * ((lr[(t, i)] - lq) - f);
                d_beta[i] += g;
                if per_component {
                    d_alpha[i] += g * raw.log_probs[(t, i)];
                } else {
                    d_alpha[0] += g * raw.log_probs[(t, i)];
                }
            }
        }
    }
    Ok(Evaluation {
        objective,
        d_alpha,
        d_beta,
    })
}

/// The calibration objective `sum_ti q_ti (ln r_ti - ln q_ti)`; never
/// positive, zero exactly when the calibrated posteriors equal the targets.
pub fn objective(
    raws: &[RawPosteriors],
    log_resp: &[DMatrix<f64>],
    cal: &CalibrationParams,
) -> Result<f64> {
    let ev = evaluate(raws, log_resp, &cal.scale, &cal.offsets, cal.is_per_component())?;
    Ok(ev.objective)
}

/// Analytic gradient of [`objective`] at `cal`, in canonical coordinates.
pub fn gradient(
    raws: &[RawPosteriors],
    log_resp: &[DMatrix<f64>],
    cal: &CalibrationParams,
) -> Result<CalibrationGradient> {
    let per_component = cal.is_per_component();
    let ev = evaluate(raws, log_resp, &cal.scale, &cal.offsets, per_component)?;
    let scale = if per_component {
        CalibrationScale::PerComponent(ev.d_alpha)
    } else {
        CalibrationScale::Scalar(ev.d_alpha[0])
    };
    Ok(CalibrationGradient {
        scale,
        offsets: ev.d_beta,
    })
}

/// Numerical optimization settings for [`optimize`].
#[derive(Debug, Clone)]
pub struct OptimizeOptions {
    /// Convergence when the gradient infinity norm per frame drops below this.
    pub gradient_tolerance_per_frame: f64,
    pub max_iterations: usize,
    pub memory: usize,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions {
            gradient_tolerance_per_frame: 1e-6,
            max_iterations: 200,
            memory: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationReport {
    pub objective_before: f64,
    pub objective_after: f64,
    pub iterations: usize,
    pub converged: bool,
    pub rejected_steps: usize,
    /// Objective after every accepted step, non-decreasing.
    pub trace: Vec<f64>,
}

// free parameters: ln(alpha) entries, then all offsets but the last
fn pack(cal: &CalibrationParams) -> DVector<f64> {
    let n = cal.components();
    let alphas: Vec<f64> = match &cal.scale {
        CalibrationScale::Scalar(a) => vec![a.ln()],
        CalibrationScale::PerComponent(v) => v.iter().map(|a| a.ln()).collect(),
    };
    let mut theta = Vec::with_capacity(alphas.len() + n - 1);
    theta.extend_from_slice(&alphas);
    for i in 0..n.saturating_sub(1) {
        theta.push(cal.offsets[i]);
    }
    DVector::from_vec(theta)
}

fn unpack(theta: &DVector<f64>, components: usize, per_component: bool) -> (CalibrationScale, DVector<f64>) {
    let na = if per_component { components } else { 1 };
    let scale = if per_component {
        CalibrationScale::PerComponent(DVector::from_fn(components, |i, _| theta[i].exp()))
    } else {
        CalibrationScale::Scalar(theta[0].exp())
    };
    let mut offsets = DVector::zeros(components);
    let mut tail = 0.0;
    for i in 0..components - 1 {
        offsets[i] = theta[na + i];
        tail -= theta[na + i];
    }
    offsets[components - 1] = tail;
    (scale, offsets)
}

/// Maximizes the calibration objective over (scale, offsets) starting from
/// `init`. The scale is optimized through its logarithm so it stays
/// positive; offsets through the zero-sum reduced parameterization. The
/// result is never worse than `init`.
pub fn optimize(
    raws: &[RawPosteriors],
    log_resp: &[DMatrix<f64>],
    init: &CalibrationParams,
    opts: &OptimizeOptions,
) -> Result<(CalibrationParams, CalibrationReport)> {
    let n = init.components();
    let per_component = init.is_per_component();
    let total_frames: usize = raws.iter().map(|r| r.num_frames()).sum();
    if total_frames == 0 {
        return Err(Error::InvalidArgument("no frames to calibrate".into()));
    }
    let na = if per_component { n } else { 1 };

    let objective_fn = |theta: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let (scale, offsets) = unpack(theta, n, per_component);
        let ev = evaluate(raws, log_resp, &scale, &offsets, per_component)?;
        // minimize -J; chain rule: d(-J)/d ln(alpha_i) = -alpha_i dJ/d alpha_i,
        // d(-J)/d beta_red_i = -(dJ/d beta_i - dJ/d beta_last)
        let mut g = DVector::zeros(theta.len());
        for i in 0..na {
            g[i] = -theta[i].exp() * ev.d_alpha[i];
        }
        for i in 0..n - 1 {
            g[na + i] = -(ev.d_beta[i] - ev.d_beta[n - 1]);
        }
        Ok((-ev.objective, g))
    };

    let optim_opts = optim::Options {
        memory: opts.memory,
        max_iterations: opts.max_iterations,
        gradient_tolerance: opts.gradient_tolerance_per_frame * total_frames as f64,
        ..optim::Options::default()
    };
    let out = optim::minimize(objective_fn, pack(init), &optim_opts)?;
    let (scale, offsets) = unpack(&out.position, n, per_component);
    let cal = CalibrationParams::new(scale, offsets)?;
    let report = CalibrationReport {
        objective_before: -out.trace[0],
        objective_after: -out.value,
        iterations: out.iterations,
        converged: out.converged,
        rejected_steps: out.rejected_steps,
        trace: out.trace.iter().map(|v| -v).collect(),
    };
    Ok((cal, report))
}
