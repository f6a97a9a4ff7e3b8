//! Latent-vector inference: the closed-form Gaussian posterior for a
//! segment's i-vector, expected component log likelihoods under that
//! posterior, and the variational lower bound on the segment evidence.
//!
//! With responsibilities q fixed, the optimal factor over the latent vector
//! is Gaussian with natural parameters
//!
//!   precision  P = I + sum_i n_i T_i' C_i^{-1} T_i
//!   nat. mean  a = sum_i T_i' C_i^{-1} f_i
//!
//! where n_i and f_i are the soft counts and mean-centered first moments.
//! The natural parameters are the ground truth; mean, covariance and
//! log-determinant are caches derived from one symmetric factorization.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gmm::Responsibilities;
use crate::model::{CovarianceFactor, ModelDims, ModelParams, SegmentFeatures};
use crate::numeric::LN_2PI;
use crate::stats::{SecondMoment, SegmentStats};

/// Per-component projections reused across all segments of a pass:
/// `cross_i = T_i' C_i^{-1}` (M x D) and `gram_i = T_i' C_i^{-1} T_i`
/// (M x M, symmetrized), plus the covariance factorizations. Tagged with a
/// fingerprint of the parameters they were computed from.
pub struct PrecomputedProjections {
    pub dims: ModelDims,
    pub cross: Vec<DMatrix<f64>>,
    pub gram: Vec<DMatrix<f64>>,
    pub factors: Vec<CovarianceFactor>,
    pub fingerprint: u64,
}

impl PrecomputedProjections {
    pub fn new(params: &ModelParams) -> Result<Self> {
        let n = params.dims.components;
        let mut cross = Vec::with_capacity(n);
        let mut gram = Vec::with_capacity(n);
        let mut factors = Vec::with_capacity(n);
        for i in 0..n {
            let factor = params.covariances[i].factor(&format!("covariance {i}"))?;
            let cinv_t = factor.solve_matrix(&params.loadings[i]);
            let c = cinv_t.transpose();
            let mut g = &c * &params.loadings[i];
            g = (&g + g.transpose()) * 0.5;
            cross.push(c);
            gram.push(g);
            factors.push(factor);
        }
        Ok(PrecomputedProjections {
            dims: params.dims,
            cross,
            gram,
            factors,
            fingerprint: params.projection_fingerprint(),
        })
    }

    fn check_against(&self, params: &ModelParams) -> Result<()> {
        if self.fingerprint != params.projection_fingerprint() {
            return Err(Error::StaleStats(
                "projections were computed from different loadings or covariances".into(),
            ));
        }
        Ok(())
    }
}

/// Gaussian posterior over one segment's latent vector. `natural_mean` and
/// `precision` define the distribution; `mean`, `covariance` and
/// `log_det_covariance` are caches derived at construction.
#[derive(Debug, Clone)]
pub struct IVectorPosterior {
    pub natural_mean: DVector<f64>,
    pub precision: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub log_det_covariance: f64,
}

/// Manual Cholesky scan that reports the first failing pivot.
fn failing_pivot(m: &DMatrix<f64>) -> Option<(usize, f64)> {
    let n = m.nrows();
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Some((j, d));
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut v = m[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / dj;
        }
    }
    None
}

impl IVectorPosterior {
    /// The prior: standard normal in M dimensions.
    pub fn prior(ivector_dim: usize) -> Self {
        IVectorPosterior {
            natural_mean: DVector::zeros(ivector_dim),
            precision: DMatrix::identity(ivector_dim, ivector_dim),
            mean: DVector::zeros(ivector_dim),
            covariance: DMatrix::identity(ivector_dim, ivector_dim),
            log_det_covariance: 0.0,
        }
    }

    /// Builds the posterior from natural parameters, deriving the moment
    /// caches from a single factorization. The precision must be symmetric
    /// and must dominate the identity (the prior term guarantees this for
    /// any valid statistics).
    pub fn from_natural(natural_mean: DVector<f64>, precision: DMatrix<f64>) -> Result<Self> {
        let m = natural_mean.len();
        if precision.nrows() != m || precision.ncols() != m {
            return Err(Error::DimensionMismatch {
                context: "posterior precision".into(),
                expected: format!("{m}x{m}"),
                got: format!("{}x{}", precision.nrows(), precision.ncols()),
            });
        }
        if natural_mean.iter().any(|v| !v.is_finite()) || precision.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("posterior natural parameters".into()));
        }
        let asym = (&precision - precision.transpose()).amax();
        if asym > 1e-10 * (1.0 + precision.amax()) {
            return Err(Error::NotPositiveDefinite(format!(
                "posterior precision asymmetry {asym:.3e}"
            )));
        }
        // P - (1 - 1e-9) I must stay positive definite
        let mut shifted = precision.clone();
        for k in 0..m {
            shifted[(k, k)] -= 1.0 - 1e-9;
        }
        if let Some((j, pivot)) = failing_pivot(&shifted) {
            return Err(Error::NotPositiveDefinite(format!(
                "posterior precision does not dominate the prior: pivot {j} of P - I is {pivot:.3e}"
            )));
        }
        let chol = nalgebra::Cholesky::new(precision.clone()).ok_or_else(|| {
            let (j, pivot) = failing_pivot(&precision).unwrap_or((0, f64::NAN));
            Error::NotPositiveDefinite(format!("posterior precision: pivot {j} is {pivot:.3e}"))
        })?;
        let mean = chol.solve(&natural_mean);
        let mut covariance = chol.inverse();
        covariance = (&covariance + covariance.transpose()) * 0.5;
        let log_det_covariance =
            -2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(IVectorPosterior {
            natural_mean,
            precision,
            mean,
            covariance,
            log_det_covariance,
        })
    }

    /// Closed-form posterior from one segment's statistics.
    pub fn from_stats(stats: &SegmentStats, proj: &PrecomputedProjections) -> Result<Self> {
        let (n, m) = (proj.dims.components, proj.dims.ivector_dim);
        if stats.counts.len() != n || stats.first.ncols() != proj.dims.feature_dim {
            return Err(Error::DimensionMismatch {
                context: format!("statistics for segment {:?}", stats.segment_id),
                expected: format!("{n} components x {} dims", proj.dims.feature_dim),
                got: format!("{} x {}", stats.counts.len(), stats.first.ncols()),
            });
        }
        let mut precision = DMatrix::identity(m, m);
        let mut natural_mean = DVector::zeros(m);
        for i in 0..n {
            let n_i = stats.counts[i];
            if n_i > 0.0 {
                precision += &proj.gram[i] * n_i;
                natural_mean += &proj.cross[i] * stats.first.row(i).transpose();
            }
        }
        IVectorPosterior::from_natural(natural_mean, precision)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// E[x x'] = covariance + mean mean'.
    pub fn second_moment(&self) -> DMatrix<f64> {
        &self.covariance + &self.mean * self.mean.transpose()
    }

    /// KL(posterior || standard normal prior), always >= 0.
    pub fn kl_to_prior(&self) -> f64 {
        let m = self.dim() as f64;
        0.5 * (self.covariance.trace() + self.mean.norm_squared() - m - self.log_det_covariance)
    }
}

/// E[ln N(phi | mu_i + T_i x, C_i)] under the posterior: the Gaussian log
/// density at the shifted mean, minus half the projected posterior spread
/// `tr(T_i' C_i^{-1} T_i Sigma)`.
pub fn expected_log_gauss(
    phi: &DVector<f64>,
    component: usize,
    post: &IVectorPosterior,
    params: &ModelParams,
) -> Result<f64> {
    let dims = params.dims;
    if component >= dims.components {
        return Err(Error::InvalidArgument(format!(
            "component {component} out of range for {}",
            dims.components
        )));
    }
    if phi.len() != dims.feature_dim || post.dim() != dims.ivector_dim {
        return Err(Error::DimensionMismatch {
            context: "expected_log_gauss".into(),
            expected: format!("phi {}, posterior {}", dims.feature_dim, dims.ivector_dim),
            got: format!("phi {}, posterior {}", phi.len(), post.dim()),
        });
    }
    let factor = params.covariances[component].factor("covariance")?;
    let t_i = &params.loadings[component];
    let shifted = params.mean(component) + t_i * &post.mean;
    let cinv_t = factor.solve_matrix(t_i);
    let gram = t_i.transpose() * cinv_t;
    let spread = (&gram * &post.covariance).trace();
    Ok(factor.log_density(phi, &shifted) - 0.5 * spread)
}

/// Expected log joint `ln(w_i) + E[ln N(phi_t | mu_i + T_i x, C_i)]` for
/// every frame and component, as a frames x components matrix of logs.
pub fn expected_log_likelihoods(
    seg: &SegmentFeatures,
    post: &IVectorPosterior,
    params: &ModelParams,
    proj: &PrecomputedProjections,
) -> Result<DMatrix<f64>> {
    proj.check_against(params)?;
    let dims = params.dims;
    if seg.dim() != dims.feature_dim {
        return Err(Error::DimensionMismatch {
            context: format!("segment {:?}", seg.segment_id),
            expected: format!("{}", dims.feature_dim),
            got: format!("{}", seg.dim()),
        });
    }
    if post.dim() != dims.ivector_dim {
        return Err(Error::DimensionMismatch {
            context: "posterior".into(),
            expected: format!("{}", dims.ivector_dim),
            got: format!("{}", post.dim()),
        });
    }
    let n = dims.components;
    let shifted = params.shifted_means(&post.mean)?;
    // per-component constant: ln w - D/2 ln 2pi - 1/2 ln|C| - 1/2 tr(gram Sigma)
    let mut base = vec![0.0; n];
    for (i, b) in base.iter_mut().enumerate() {
        let spread = (&proj.gram[i] * &post.covariance).trace();
        *b = params.weights[i].ln()
            - 0.5 * (dims.feature_dim as f64 * LN_2PI + proj.factors[i].log_det() + spread);
    }
    let mut out = DMatrix::zeros(seg.num_frames(), n);
    for t in 0..seg.num_frames() {
        let phi = seg.frame(t);
        for i in 0..n {
            let r = &phi - shifted.row(i).transpose();
            out[(t, i)] = base[i] - 0.5 * proj.factors[i].quad(&r);
        }
    }
    Ok(out)
}

/// Row-wise softmax of expected log likelihoods: the responsibilities that
/// maximize the bound at a fixed latent posterior.
pub fn optimal_responsibilities(
    segment_id: impl Into<String>,
    log_ell: &DMatrix<f64>,
) -> Result<Responsibilities> {
    let mut probs = log_ell.clone();
    let mut row = vec![0.0; log_ell.ncols()];
    for t in 0..log_ell.nrows() {
        for i in 0..log_ell.ncols() {
            row[i] = log_ell[(t, i)];
        }
        crate::numeric::softmax_in_place(&mut row);
        for i in 0..log_ell.ncols() {
            probs[(t, i)] = row[i];
        }
    }
    Responsibilities::new(segment_id, probs)
}

/// The variational lower bound on one segment's log evidence at the given
/// responsibilities and latent posterior:
///
///   sum_ti q_ti (ln w_i + E[ln N(phi_t | mu_i + T_i x, C_i)] - ln q_ti)
///   - KL(Q(x) || prior)
///
/// evaluated from sufficient statistics. Rejects statistics or projections
/// whose fingerprints do not match `params`, and responsibilities that do not
/// match the statistics.
pub fn elbo(
    resp: &Responsibilities,
    stats: &SegmentStats,
    post: &IVectorPosterior,
    params: &ModelParams,
    proj: &PrecomputedProjections,
) -> Result<f64> {
    proj.check_against(params)?;
    if stats.centering != params.means_fingerprint() {
        return Err(Error::StaleStats(format!(
            "statistics for segment {:?} were centered on different means",
            stats.segment_id
        )));
    }
    if resp.segment_id != stats.segment_id {
        return Err(Error::StaleStats(format!(
            "responsibilities for {:?} paired with statistics for {:?}",
            resp.segment_id, stats.segment_id
        )));
    }
    if resp.fingerprint() != stats.resp_fingerprint {
        return Err(Error::StaleStats(format!(
            "statistics for segment {:?} were accumulated from different responsibilities",
            stats.segment_id
        )));
    }
    let dims = params.dims;
    let n = dims.components;
    if stats.counts.len() != n || post.dim() != dims.ivector_dim {
        return Err(Error::DimensionMismatch {
            context: "elbo".into(),
            expected: format!("{n} components, latent {}", dims.ivector_dim),
            got: format!("{} components, latent {}", stats.counts.len(), post.dim()),
        });
    }
    let ex2 = post.second_moment();
    let mut total = -post.kl_to_prior() + resp.entropy();
    let half_const = 0.5 * dims.feature_dim as f64 * LN_2PI;
    for i in 0..n {
        let n_i = stats.counts[i];
        let f_i = stats.first.row(i).transpose();
        let trace_cs = match &stats.second[i] {
            SecondMoment::Diagonal(s) => proj.factors[i].trace_solve_diag(s),
            SecondMoment::Full(s) => proj.factors[i].trace_solve_full(s),
        };
        let spread = (&proj.gram[i] * &ex2).trace();
        total += n_i * (params.weights[i].ln() - half_const - 0.5 * proj.factors[i].log_det())
            - 0.5 * trace_cs
            + post.mean.dot(&(&proj.cross[i] * f_i))
            - 0.5 * n_i * spread;
    }
    Ok(total)
}
