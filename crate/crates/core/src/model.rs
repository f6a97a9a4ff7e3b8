//! Model parameters, segment containers, and the synthetic data generator.
//!
//! The generative story for one segment: draw a latent vector `x` from a
//! standard normal prior, shift every component mean of a shared GMM by
//! `T_i * x`, then draw each frame from the shifted mixture. A model with all
//! loadings zero is an ordinary GMM (the background model).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numeric::{fingerprint_f64, item_seed, LN_2PI};

/// Problem sizes: `components` mixture components, `feature_dim` observed
/// dimensions, `ivector_dim` latent dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub components: usize,
    pub feature_dim: usize,
    pub ivector_dim: usize,
}

impl ModelDims {
    pub fn new(components: usize, feature_dim: usize, ivector_dim: usize) -> Result<Self> {
        if components == 0 || feature_dim == 0 || ivector_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "model dimensions must be positive, got N={components} D={feature_dim} M={ivector_dim}"
            )));
        }
        Ok(ModelDims {
            components,
            feature_dim,
            ivector_dim,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceMode {
    Diagonal,
    Full,
}

impl CovarianceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CovarianceMode::Diagonal => "diagonal",
            CovarianceMode::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "diagonal" => Ok(CovarianceMode::Diagonal),
            "full" => Ok(CovarianceMode::Full),
            other => Err(Error::InvalidArgument(format!(
                "unknown covariance mode {other:?} (expected \"diagonal\" or \"full\")"
            ))),
        }
    }
}

/// Per-component covariance. Diagonal is the default throughout; full
/// matrices are supported behind the same interface.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Diagonal(DVector<f64>),
    Full(DMatrix<f64>),
}

impl Covariance {
    pub fn mode(&self) -> CovarianceMode {
        match self {
            Covariance::Diagonal(_) => CovarianceMode::Diagonal,
            Covariance::Full(_) => CovarianceMode::Full,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Covariance::Diagonal(d) => d.len(),
            Covariance::Full(m) => m.nrows(),
        }
    }

    /// Checks positivity (diagonal) or symmetry plus positive definiteness
    /// (full). `label` names the offender in error messages.
    pub fn validate(&self, label: &str) -> Result<()> {
        match self {
            Covariance::Diagonal(d) => {
                for (k, &v) in d.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(Error::NonFinite(format!("{label} entry {k}")));
                    }
                    if v <= 0.0 {
                        return Err(Error::NotPositiveDefinite(format!(
                            "{label}: diagonal entry {k} is {v:.3e}"
                        )));
                    }
                }
                Ok(())
            }
            Covariance::Full(m) => {
                if m.nrows() != m.ncols() {
                    return Err(Error::DimensionMismatch {
                        context: label.to_string(),
                        expected: "square covariance".into(),
                        got: format!("{}x{}", m.nrows(), m.ncols()),
                    });
                }
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(label.to_string()));
                }
                let asym = (m - m.transpose()).amax();
                let scale = 1.0 + m.amax();
                if asym > 1e-10 * scale {
                    return Err(Error::NotPositiveDefinite(format!(
                        "{label}: asymmetry {asym:.3e} exceeds tolerance"
                    )));
                }
                self.factor(label).map(|_| ())
            }
        }
    }

    /// Builds the cached factorization used for densities, solves and
    /// determinants. One factorization serves all of them.
    pub fn factor(&self, label: &str) -> Result<CovarianceFactor> {
        match self {
            Covariance::Diagonal(d) => {
                let mut log_det = 0.0;
                for (k, &v) in d.iter().enumerate() {
                    if !(v.is_finite() && v > 0.0) {
                        return Err(Error::NotPositiveDefinite(format!(
                            "{label}: diagonal entry {k} is {v:.3e}"
                        )));
                    }
                    log_det += v.ln();
                }
                Ok(CovarianceFactor {
                    log_det,
                    repr: FactorRepr::Diagonal {
                        inv: d.map(|v| 1.0 / v),
                        sqrt: d.map(f64::sqrt),
                    },
                })
            }
            Covariance::Full(m) => {
                let chol = nalgebra::Cholesky::new(m.clone()).ok_or_else(|| {
                    Error::NotPositiveDefinite(format!("{label}: Cholesky failed"))
                })?;
                let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                Ok(CovarianceFactor {
                    log_det,
                    repr: FactorRepr::Full { chol },
                })
            }
        }
    }
}

enum FactorRepr {
    Diagonal { inv: DVector<f64>, sqrt: DVector<f64> },
    Full { chol: nalgebra::Cholesky<f64, nalgebra::Dyn> },
}

/// Cached covariance decomposition: log-determinant, quadratic forms, solves
/// and the sampling transform all come from the same factorization.
pub struct CovarianceFactor {
    log_det: f64,
    repr: FactorRepr,
}

impl CovarianceFactor {
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// r' C^{-1} r.
    pub fn quad(&self, r: &DVector<f64>) -> f64 {
        match &self.repr {
            FactorRepr::Diagonal { inv, .. } => {
                r.iter().zip(inv.iter()).map(|(&a, &b)| a * a * b).sum()
            }
            FactorRepr::Full { chol } => {
                let y = chol.solve(r);
                r.dot(&y)
            }
        }
    }

    /// C^{-1} B for a D-row matrix B.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.repr {
            FactorRepr::Diagonal { inv, .. } => {
                let mut out = b.clone();
                for (mut row, &s) in out.row_iter_mut().zip(inv.iter()) {
                    row *= s;
                }
                out
            }
            FactorRepr::Full { chol } => chol.solve(b),
        }
    }

    pub fn solve_vector(&self, b: &DVector<f64>) -> DVector<f64> {
        match &self.repr {
            FactorRepr::Diagonal { inv, .. } => b.component_mul(inv),
            FactorRepr::Full { chol } => chol.solve(b),
        }
    }

    /// tr(C^{-1} diag(s)); diagonal covariances only.
    pub fn trace_solve_diag(&self, s: &DVector<f64>) -> f64 {
        match &self.repr {
            FactorRepr::Diagonal { inv, .. } => s.dot(inv),
            FactorRepr::Full { .. } => {
                unreachable!("diagonal second moments paired with full covariance")
            }
        }
    }

    /// tr(C^{-1} S) for a full matrix S.
    pub fn trace_solve_full(&self, s: &DMatrix<f64>) -> f64 {
        self.solve_matrix(s).trace()
    }

    /// Applies the sampling transform: returns L z with C = L L'.
    pub fn sample_shift(&self, z: &DVector<f64>) -> DVector<f64> {
        match &self.repr {
            FactorRepr::Diagonal { sqrt, .. } => z.component_mul(sqrt),
            FactorRepr::Full { chol } => chol.l_dirty().lower_triangle() * z,
        }
    }

    /// log N(phi | mean, C).
    pub fn log_density(&self, phi: &DVector<f64>, mean: &DVector<f64>) -> f64 {
        let r = phi - mean;
        -0.5 * (phi.len() as f64 * LN_2PI + self.log_det + self.quad(&r))
    }
}

/// Full parameter set: mixture weights, component means (rows of an N x D
/// matrix), per-component covariances, and per-component loading matrices
/// (D x M each) spanning the latent subspace.
///
/// Construct through [`ModelParams::new`]; the invariants (weights on the
/// simplex, positive definite covariances, consistent shapes, finite entries)
/// are checked there and assumed everywhere else. Instances are immutable;
/// training builds new ones.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub weights: DVector<f64>,
    pub means: DMatrix<f64>,
    pub covariances: Vec<Covariance>,
    pub loadings: Vec<DMatrix<f64>>,
}

impl ModelParams {
    pub fn new(
        dims: ModelDims,
        weights: DVector<f64>,
        means: DMatrix<f64>,
        covariances: Vec<Covariance>,
        loadings: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let (n, d, m) = (dims.components, dims.feature_dim, dims.ivector_dim);
        if weights.len() != n {
            return Err(Error::DimensionMismatch {
                context: "weights".into(),
                expected: format!("{n}"),
                got: format!("{}", weights.len()),
            });
        }
        if means.nrows() != n || means.ncols() != d {
            return Err(Error::DimensionMismatch {
                context: "means".into(),
                expected: format!("{n}x{d}"),
                got: format!("{}x{}", means.nrows(), means.ncols()),
            });
        }
        if covariances.len() != n || loadings.len() != n {
            return Err(Error::DimensionMismatch {
                context: "per-component parameter lists".into(),
                expected: format!("{n}"),
                got: format!("{} covariances, {} loadings", covariances.len(), loadings.len()),
            });
        }
        let mode = covariances[0].mode();
        for (i, c) in covariances.iter().enumerate() {
            if c.mode() != mode || c.dim() != d {
                return Err(Error::DimensionMismatch {
                    context: format!("covariance {i}"),
                    expected: format!("{d}-dim {}", mode.as_str()),
                    got: format!("{}-dim {}", c.dim(), c.mode().as_str()),
                });
            }
            c.validate(&format!("covariance {i}"))?;
        }
        for (i, t) in loadings.iter().enumerate() {
            if t.nrows() != d || t.ncols() != m {
                return Err(Error::DimensionMismatch {
                    context: format!("loading matrix {i}"),
                    expected: format!("{d}x{m}"),
                    got: format!("{}x{}", t.nrows(), t.ncols()),
                });
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("loading matrix {i}")));
            }
        }
        if weights.iter().any(|v| !v.is_finite()) || means.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("weights or means".into()));
        }
        if weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::InvalidArgument("mixture weights must be positive".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "mixture weights sum to {sum:.15}, expected 1 within 1e-12"
            )));
        }
        Ok(ModelParams {
            dims,
            weights,
            means,
            covariances,
            loadings,
        })
    }

    /// Plain GMM: all loadings zero, latent dimension `ivector_dim` kept as a
    /// placeholder for later extractor training.
    pub fn background(
        dims: ModelDims,
        weights: DVector<f64>,
        means: DMatrix<f64>,
        covariances: Vec<Covariance>,
    ) -> Result<Self> {
        let zero = DMatrix::zeros(dims.feature_dim, dims.ivector_dim);
        let loadings = vec![zero; dims.components];
        ModelParams::new(dims, weights, means, covariances, loadings)
    }

    pub fn covariance_mode(&self) -> CovarianceMode {
        self.covariances[0].mode()
    }

    /// Component mean as a column vector.
    pub fn mean(&self, i: usize) -> DVector<f64> {
        self.means.row(i).transpose()
    }

    pub fn loadings_all_zero(&self) -> bool {
        self.loadings.iter().all(|t| t.iter().all(|&v| v == 0.0))
    }

    /// Same model with replaced loading matrices.
    pub fn with_loadings(&self, loadings: Vec<DMatrix<f64>>) -> Result<Self> {
        ModelParams::new(
            self.dims,
            self.weights.clone(),
            self.means.clone(),
            self.covariances.clone(),
            loadings,
        )
    }

    /// Fingerprint of the means; statistics centered on these means carry it.
    pub fn means_fingerprint(&self) -> u64 {
        means_fingerprint(&self.means)
    }

    /// Fingerprint of everything the latent-space projections depend on:
    /// dimensions, loadings and covariances.
    pub fn projection_fingerprint(&self) -> u64 {
        let dims = [
            self.dims.components as f64,
            self.dims.feature_dim as f64,
            self.dims.ivector_dim as f64,
        ];
        let loadings = self.loadings.iter().flat_map(|t| {
            let (d, m) = (t.nrows(), t.ncols());
            (0..d).flat_map(move |r| (0..m).map(move |c| (r, c))).map(move |(r, c)| t[(r, c)])
        });
        let covs = self.covariances.iter().flat_map(|c| match c {
            Covariance::Diagonal(v) => v.iter().cloned().collect::<Vec<_>>(),
            Covariance::Full(m) => m.iter().cloned().collect::<Vec<_>>(),
        });
        fingerprint_f64(dims.into_iter().chain(loadings).chain(covs))
    }

    /// Means shifted by the latent vector: row i is mu_i + T_i x.
    pub fn shifted_means(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        if x.len() != self.dims.ivector_dim {
            return Err(Error::DimensionMismatch {
                context: "latent vector".into(),
                expected: format!("{}", self.dims.ivector_dim),
                got: format!("{}", x.len()),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent vector".into()));
        }
        let mut out = self.means.clone();
        for (i, t) in self.loadings.iter().enumerate() {
            let shift = t * x;
            for k in 0..self.dims.feature_dim {
                out[(i, k)] += shift[k];
            }
        }
        Ok(out)
    }
}

/// Fingerprint of a means matrix in row-major order; sufficient statistics
/// are tagged with this so stale centerings are detected instead of reused.
pub fn means_fingerprint(means: &DMatrix<f64>) -> u64 {
    let (n, d) = (means.nrows(), means.ncols());
    fingerprint_f64((0..n).flat_map(|i| (0..d).map(move |k| (i, k))).map(|(i, k)| means[(i, k)]))
}

/// One mixture component of the segment-level GMM produced by [`gmm_at`].
#[derive(Debug, Clone)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub covariance: Covariance,
}

/// The segment-level mixture at latent position `x`: weights and covariances
/// are shared, means are shifted into the subspace. `gmm_at(params, 0)`
/// recovers the background GMM.
pub fn gmm_at(params: &ModelParams, x: &DVector<f64>) -> Result<Vec<GmmComponent>> {
    let shifted = params.shifted_means(x)?;
    Ok((0..params.dims.components)
        .map(|i| GmmComponent {
            weight: params.weights[i],
            mean: shifted.row(i).transpose(),
            covariance: params.covariances[i].clone(),
        })
        .collect())
}

/// Frames of one segment, one row per frame. Construction rejects empty and
/// non-finite input; everything downstream relies on that.
#[derive(Debug, Clone)]
pub struct SegmentFeatures {
    pub segment_id: String,
    pub frames: DMatrix<f64>,
}

impl SegmentFeatures {
    pub fn new(segment_id: impl Into<String>, frames: DMatrix<f64>) -> Result<Self> {
        let segment_id = segment_id.into();
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "segment {segment_id:?} has no frames or zero feature dimension"
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("segment {segment_id:?} frames")));
        }
        Ok(SegmentFeatures { segment_id, frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn frame(&self, t: usize) -> DVector<f64> {
        self.frames.row(t).transpose()
    }
}

/// Ground truth attached to a sampled segment: the latent vector and the
/// per-frame component indices.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    pub ivector: DVector<f64>,
    pub path: Vec<usize>,
}

fn standard_normals(rng: &mut ChaCha12Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn sample_component(rng: &mut ChaCha12Rng, weights: &DVector<f64>) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Samples one segment with the latent vector supplied by the caller. The
/// frame stream depends only on `seed`, so two calls with the same seed but
/// different latent vectors see identical component paths and noise; with all
/// loadings zero the frames are bitwise identical.
pub fn sample_segment_with_ivector(
    params: &ModelParams,
    num_frames: usize,
    seed: u64,
    x: &DVector<f64>,
) -> Result<(SegmentFeatures, Vec<usize>)> {
    if num_frames == 0 {
        return Err(Error::InvalidArgument("num_frames must be positive".into()));
    }
    let shifted = params.shifted_means(x)?;
    let factors: Vec<CovarianceFactor> = params
        .covariances
        .iter()
        .enumerate()
        .map(|(i, c)| c.factor(&format!("covariance {i}")))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let d = params.dims.feature_dim;
    let mut frames = DMatrix::zeros(num_frames, d);
    let mut path = Vec::with_capacity(num_frames);
    for t in 0..num_frames {
        let i = sample_component(&mut rng, &params.weights);
        path.push(i);
        let z = standard_normals(&mut rng, d);
        let phi = shifted.row(i).transpose() + factors[i].sample_shift(&z);
        for k in 0..d {
            frames[(t, k)] = phi[k];
        }
    }
    let feat = SegmentFeatures::new(format!("seed{seed:016x}"), frames)?;
    Ok((feat, path))
}

/// Samples one segment: latent vector from the standard normal prior, frames
/// from the shifted mixture. Deterministic in `seed`.
pub fn sample_segment(
    params: &ModelParams,
    num_frames: usize,
    seed: u64,
) -> Result<(SegmentFeatures, SyntheticTruth)> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let x = standard_normals(&mut rng, params.dims.ivector_dim);
    let (feat, path) = sample_segment_with_ivector(params, num_frames, seed, &x)?;
    Ok((feat, SyntheticTruth { ivector: x, path }))
}

/// Samples a dataset of equally sized segments. Each segment gets its own
/// seed derived from the master seed, so datasets are reproducible and
/// individual segments can be regenerated in isolation.
pub fn sample_dataset(
    params: &ModelParams,
    num_segments: usize,
    frames_per_segment: usize,
    seed: u64,
) -> Result<Vec<(SegmentFeatures, SyntheticTruth)>> {
    if num_segments == 0 {
        return Err(Error::InvalidArgument("num_segments must be positive".into()));
    }
    (0..num_segments)
        .map(|s| {
            let (mut feat, truth) =
                sample_segment(params, frames_per_segment, item_seed(seed, s as u64))?;
            feat.segment_id = format!("seg{s:05}");
            Ok((feat, truth))
        })
        .collect()
}

/// Random model parameters for synthetic experiments: weights near uniform,
/// well separated means, covariances with spectra in [0.5, 1.5], loading
/// entries with standard deviation `loading_sd`.
pub fn random_params(
    dims: ModelDims,
    mode: CovarianceMode,
    loading_sd: f64,
    seed: u64,
) -> Result<ModelParams> {
    if !(loading_sd.is_finite() && loading_sd >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "loading_sd must be finite and non-negative, got {loading_sd}"
        )));
    }
    let (n, d, m) = (dims.components, dims.feature_dim, dims.ivector_dim);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut weights = DVector::from_fn(n, |_, _| 0.75 + 0.5 * rng.random::<f64>());
    weights /= weights.sum();
    // renormalize once more in case the division left the sum off by an ulp
    let s: f64 = weights.iter().sum();
    weights /= s;
    let means = DMatrix::from_fn(n, d, |_, _| 1.5 * rng.sample::<f64, _>(StandardNormal));
    let covariances: Vec<Covariance> = (0..n)
        .map(|_| {
            let spectrum = DVector::from_fn(d, |_, _| 0.5 + rng.random::<f64>());
            match mode {
                CovarianceMode::Diagonal => Covariance::Diagonal(spectrum),
                CovarianceMode::Full => {
                    // random rotation of a positive spectrum keeps it SPD
                    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let q = g.qr().q();
                    let c = &q * DMatrix::from_diagonal(&spectrum) * q.transpose();
                    Covariance::Full((&c + c.transpose()) * 0.5)
                }
            }
        })
        .collect();
    let loadings = (0..n)
        .map(|_| DMatrix::from_fn(d, m, |_, _| loading_sd * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    ModelParams::new(dims, weights, means, covariances, loadings)
}

/// Corrupts a known component path into soft per-frame posteriors: the true
/// component gets logit 1/temperature, all logits get unit Gaussian noise,
/// rows are softmax-normalized. Low temperature approaches one-hot truth.
pub fn noisy_path_posteriors(
    path: &[usize],
    components: usize,
    temperature: f64,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if let Some(&bad) = path.iter().find(|&&k| k >= components) {
        return Err(Error::InvalidArgument(format!(
            "path state {bad} out of range for {components} components"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut out = DMatrix::zeros(path.len(), components);
    let mut row = vec![0.0; components];
    for (t, &k) in path.iter().enumerate() {
        for (i, r) in row.iter_mut().enumerate() {
            let hit = if i == k { 1.0 / temperature } else { 0.0 };
            *r = hit + rng.sample::<f64, _>(StandardNormal);
        }
        crate::numeric::softmax_in_place(&mut row);
        for i in 0..components {
            out[(t, i)] = row[i];
        }
    }
    Ok(out)
}
