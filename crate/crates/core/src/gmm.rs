//! Plain-GMM layer: frame alignment, the mixture evidence lower bound, and
//! background model training. Loadings play no role here; every function
//! evaluates the model at latent position zero.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::model::{
    Covariance, CovarianceFactor, CovarianceMode, ModelDims, ModelParams, SegmentFeatures,
};
use crate::numeric::{logsumexp, xlogx};
use crate::reduce;
use crate::stats::{self, DatasetStats, SecondMoment};

/// A component whose soft frame count falls below this is treated as empty.
pub const MIN_COMPONENT_MASS: f64 = 1e-6;

/// Per-frame component posteriors for one segment (rows sum to one).
#[derive(Debug, Clone)]
pub struct Responsibilities {
    pub segment_id: String,
    /// frames x components, entries in [0, 1], rows on the simplex.
    pub probs: DMatrix<f64>,
}

impl Responsibilities {
    pub fn new(segment_id: impl Into<String>, probs: DMatrix<f64>) -> Result<Self> {
        let segment_id = segment_id.into();
        if probs.nrows() == 0 || probs.ncols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "responsibilities for {segment_id:?} are empty"
            )));
        }
        for t in 0..probs.nrows() {
            let mut sum = 0.0;
            for i in 0..probs.ncols() {
                let q = probs[(t, i)];
                if !q.is_finite() || !(0.0..=1.0 + 1e-12).contains(&q) {
                    return Err(Error::InvalidArgument(format!(
                        "responsibility ({t},{i}) of {segment_id:?} is {q}"
                    )));
                }
                sum += q;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "responsibility row {t} of {segment_id:?} sums to {sum}"
                )));
            }
        }
        Ok(Responsibilities { segment_id, probs })
    }

    /// Hard assignment from a component path.
    pub fn one_hot(segment_id: impl Into<String>, path: &[usize], components: usize) -> Result<Self> {
        let segment_id = segment_id.into();
        let mut probs = DMatrix::zeros(path.len(), components);
        for (t, &k) in path.iter().enumerate() {
            if k >= components {
                return Err(Error::InvalidArgument(format!(
                    "path state {k} out of range for {components} components"
                )));
            }
            probs[(t, k)] = 1.0;
        }
        Responsibilities::new(segment_id, probs)
    }

    pub fn num_frames(&self) -> usize {
        self.probs.nrows()
    }

    pub fn num_components(&self) -> usize {
        self.probs.ncols()
    }

    /// -sum q ln q over all entries, with 0 ln 0 = 0.
    pub fn entropy(&self) -> f64 {
        -self.probs.iter().map(|&q| xlogx(q)).sum::<f64>()
    }

    /// Exact fingerprint of the entries in frame-major order; statistics
    /// record it so bound evaluations can reject mismatched pairings.
    pub fn fingerprint(&self) -> u64 {
        let (t_s, n) = (self.probs.nrows(), self.probs.ncols());
        crate::numeric::fingerprint_f64(
            (0..t_s)
                .flat_map(|t| (0..n).map(move |i| (t, i)))
                .map(|(t, i)| self.probs[(t, i)]),
        )
    }
}

/// log N(phi | mean, cov). Convenience wrapper; loops should build one
/// [`CovarianceFactor`] per component instead.
pub fn log_gauss(phi: &DVector<f64>, mean: &DVector<f64>, cov: &Covariance) -> Result<f64> {
    if phi.len() != mean.len() || phi.len() != cov.dim() {
        return Err(Error::DimensionMismatch {
            context: "log_gauss".into(),
            expected: format!("{}", cov.dim()),
            got: format!("phi {}, mean {}", phi.len(), mean.len()),
        });
    }
    Ok(cov.factor("covariance")?.log_density(phi, mean))
}

fn component_factors(params: &ModelParams) -> Result<Vec<CovarianceFactor>> {
    params
        .covariances
        .iter()
        .enumerate()
        .map(|(i, c)| c.factor(&format!("covariance {i}")))
        .collect()
}

fn frame_log_joint(
    params: &ModelParams,
    factors: &[CovarianceFactor],
    means: &[DVector<f64>],
    phi: &DVector<f64>,
    out: &mut [f64],
) {
    for i in 0..params.dims.components {
        out[i] = params.weights[i].ln() + factors[i].log_density(phi, &means[i]);
    }
}

/// Posterior component responsibilities of every frame under the background
/// GMM. These maximize the mixture lower bound at fixed parameters.
pub fn align(params: &ModelParams, seg: &SegmentFeatures) -> Result<Responsibilities> {
    check_feature_dim(params, seg)?;
    let n = params.dims.components;
    let factors = component_factors(params)?;
    let means: Vec<DVector<f64>> = (0..n).map(|i| params.mean(i)).collect();
    let mut probs = DMatrix::zeros(seg.num_frames(), n);
    let mut row = vec![0.0; n];
    for t in 0..seg.num_frames() {
        let phi = seg.frame(t);
        frame_log_joint(params, &factors, &means, &phi, &mut row);
        crate::numeric::softmax_in_place(&mut row);
        for i in 0..n {
            probs[(t, i)] = row[i];
        }
    }
    Responsibilities::new(&seg.segment_id, probs)
}

/// Exact mixture log likelihood of the segment under the background GMM.
pub fn log_likelihood(params: &ModelParams, seg: &SegmentFeatures) -> Result<f64> {
    check_feature_dim(params, seg)?;
    let n = params.dims.components;
    let factors = component_factors(params)?;
    let means: Vec<DVector<f64>> = (0..n).map(|i| params.mean(i)).collect();
    let mut row = vec![0.0; n];
    let mut total = 0.0;
    for t in 0..seg.num_frames() {
        let phi = seg.frame(t);
        frame_log_joint(params, &factors, &means, &phi, &mut row);
        total += logsumexp(&row);
    }
    Ok(total)
}

/// Mixture evidence lower bound at the given responsibilities:
/// `sum_t sum_i q_ti (ln w_i + ln N(phi_t | mu_i, C_i) - ln q_ti)`.
/// Equals [`log_likelihood`] exactly when the responsibilities come from
/// [`align`]; is strictly smaller otherwise.
pub fn lower_bound(
    params: &ModelParams,
    seg: &SegmentFeatures,
    resp: &Responsibilities,
) -> Result<f64> {
    check_feature_dim(params, seg)?;
    let n = params.dims.components;
    if resp.num_frames() != seg.num_frames() || resp.num_components() != n {
        return Err(Error::DimensionMismatch {
            context: format!("responsibilities for segment {:?}", seg.segment_id),
            expected: format!("{}x{}", seg.num_frames(), n),
            got: format!("{}x{}", resp.num_frames(), resp.num_components()),
        });
    }
    let factors = component_factors(params)?;
    let means: Vec<DVector<f64>> = (0..n).map(|i| params.mean(i)).collect();
    let mut row = vec![0.0; n];
    let mut total = 0.0;
    for t in 0..seg.num_frames() {
        let phi = seg.frame(t);
        frame_log_joint(params, &factors, &means, &phi, &mut row);
        for (i, &log_joint) in row.iter().enumerate() {
            let q = resp.probs[(t, i)];
            if q > 0.0 {
                total += q * log_joint - xlogx(q);
            }
        }
    }
    Ok(total)
}

fn check_feature_dim(params: &ModelParams, seg: &SegmentFeatures) -> Result<()> {
    if seg.dim() != params.dims.feature_dim {
        return Err(Error::DimensionMismatch {
            context: format!("segment {:?}", seg.segment_id),
            expected: format!("{} feature dims", params.dims.feature_dim),
            got: format!("{}", seg.dim()),
        });
    }
    Ok(())
}

/// Variance floor: per dimension, `max(absolute, relative * global variance)`.
#[derive(Debug, Clone, Copy)]
pub struct FloorSpec {
    pub absolute: f64,
    pub relative: f64,
}

impl Default for FloorSpec {
    fn default() -> Self {
        FloorSpec {
            absolute: 1e-6,
            relative: 1e-3,
        }
    }
}

impl FloorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.absolute.is_finite() && self.absolute > 0.0)
            || !(self.relative.is_finite() && self.relative >= 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "variance floor must be positive (absolute {}, relative {})",
                self.absolute, self.relative
            )));
        }
        Ok(())
    }
}

/// What to do when a component loses all responsibility mass during
/// background training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyComponentPolicy {
    Error,
    Reseed,
}

/// Global per-dimension mean and variance implied by zero-centered dataset
/// statistics.
fn global_moments(agg: &DatasetStats) -> (DVector<f64>, DVector<f64>) {
    let d = agg.dim();
    let total = agg.frames as f64;
    let mut mean = DVector::zeros(d);
    let mut raw2 = DVector::zeros(d);
    for i in 0..agg.components() {
        for k in 0..d {
            mean[k] += agg.first[(i, k)];
        }
        match &agg.second[i] {
            SecondMoment::Diagonal(s) => raw2 += s,
            SecondMoment::Full(s) => raw2 += s.diagonal(),
        }
    }
    mean /= total;
    let var = DVector::from_fn(d, |k, _| (raw2[k] / total - mean[k] * mean[k]).max(0.0));
    (mean, var)
}

fn floor_vector(floor: &FloorSpec, global_var: &DVector<f64>) -> DVector<f64> {
    global_var.map(|v| floor.absolute.max(floor.relative * v))
}

/// Weighted-ML component estimate from zero-centered statistics, with the
/// variance floor applied.
fn component_from_stats(
    i: usize,
    n_i: f64,
    f_i: &DVector<f64>,
    s_i: &SecondMoment,
    floor_vec: &DVector<f64>,
) -> Result<(DVector<f64>, Covariance)> {
    if n_i < MIN_COMPONENT_MASS {
        return Err(Error::EmptyComponent {
            component: i,
            mass: n_i,
        });
    }
    let mean = f_i / n_i;
    let cov = match s_i {
        SecondMoment::Diagonal(s) => {
            let c = DVector::from_fn(s.len(), |k, _| {
                (s[k] / n_i - mean[k] * mean[k]).max(floor_vec[k])
            });
            Covariance::Diagonal(c)
        }
        SecondMoment::Full(s) => {
            let mut c = s / n_i - &mean * mean.transpose();
            c = (&c + c.transpose()) * 0.5;
            for k in 0..c.nrows() {
                c[(k, k)] = c[(k, k)].max(floor_vec[k]);
            }
            // flooring the diagonal may not be enough for rank-deficient
            // components; regularize once before giving up
            if Covariance::Full(c.clone()).factor("candidate").is_err() {
                c += DMatrix::from_diagonal(floor_vec);
            }
            let cov = Covariance::Full(c);
            cov.validate(&format!("covariance {i} after flooring"))?;
            cov
        }
    };
    Ok((mean, cov))
}

fn params_from_stats(
    agg: &DatasetStats,
    floor: &FloorSpec,
    ivector_dim: usize,
) -> Result<ModelParams> {
    let (n, d) = (agg.components(), agg.dim());
    let (_, global_var) = global_moments(agg);
    let floor_vec = floor_vector(floor, &global_var);
    let mut weights = DVector::zeros(n);
    let mut means = DMatrix::zeros(n, d);
    let mut covariances = Vec::with_capacity(n);
    for i in 0..n {
        let f_i = agg.first.row(i).transpose();
        let (mean, cov) = component_from_stats(i, agg.counts[i], &f_i, &agg.second[i], &floor_vec)?;
        weights[i] = agg.counts[i];
        means.row_mut(i).copy_from(&mean.transpose());
        covariances.push(cov);
    }
    weights /= weights.sum();
    let s: f64 = weights.iter().sum();
    weights /= s;
    let dims = ModelDims::new(n, d, ivector_dim)?;
    ModelParams::background(dims, weights, means, covariances)
}

fn accumulate_zero_centered(
    segs: &[SegmentFeatures],
    resps: &[Responsibilities],
    mode: CovarianceMode,
    reproducible: bool,
) -> Result<DatasetStats> {
    if segs.is_empty() || segs.len() != resps.len() {
        return Err(Error::InvalidArgument(format!(
            "{} segments paired with {} responsibility sets",
            segs.len(),
            resps.len()
        )));
    }
    let n = resps[0].num_components();
    let d = segs[0].dim();
    let zero_means = DMatrix::zeros(n, d);
    let idx: Vec<usize> = (0..segs.len()).collect();
    let agg = reduce::map_reduce(
        &idx,
        reproducible,
        |&k| {
            let s = stats::accumulate(&segs[k], &resps[k], &zero_means, mode)?;
            Ok(DatasetStats::from_segment(&s))
        },
        DatasetStats::merge,
    )?;
    agg.ok_or_else(|| Error::InvalidArgument("no segments".into()))
}

/// One maximization step of the plain-GMM bound at fixed responsibilities:
/// weights from soft counts, means from first moments, floored covariances
/// from second moments. The returned model has zero loadings of width
/// `ivector_dim`. No parameter setting can improve the bound at these
/// responsibilities.
pub fn ubm_mstep(
    segs: &[SegmentFeatures],
    resps: &[Responsibilities],
    mode: CovarianceMode,
    floor: &FloorSpec,
    ivector_dim: usize,
    reproducible: bool,
) -> Result<ModelParams> {
    floor.validate()?;
    let agg = accumulate_zero_centered(segs, resps, mode, reproducible)?;
    params_from_stats(&agg, floor, ivector_dim)
}

/// Background-model training configuration.
#[derive(Debug, Clone)]
pub struct UbmConfig {
    pub components: usize,
    pub iterations: usize,
    pub seed: u64,
    pub mode: CovarianceMode,
    pub floor: FloorSpec,
    pub empty_policy: EmptyComponentPolicy,
    /// Latent width of the zero loadings carried by the result.
    pub ivector_dim: usize,
    pub reproducible: bool,
}

impl UbmConfig {
    pub fn new(components: usize) -> Self {
        UbmConfig {
            components,
            iterations: 10,
            seed: 0,
            mode: CovarianceMode::Diagonal,
            floor: FloorSpec::default(),
            empty_policy: EmptyComponentPolicy::Error,
            ivector_dim: 1,
            reproducible: false,
        }
    }
}

/// EM training of the background GMM: seeded initialization from data frames,
/// then alternating [`align`] and [`ubm_mstep`]. Returns the model and the
/// per-iteration lower-bound trace (one value per iteration, evaluated at the
/// fresh alignment, where it equals the exact mixture log likelihood).
pub fn train_ubm(segs: &[SegmentFeatures], cfg: &UbmConfig) -> Result<(ModelParams, Vec<f64>)> {
    cfg.floor.validate()?;
    if cfg.components == 0 {
        return Err(Error::InvalidArgument("components must be positive".into()));
    }
    if segs.is_empty() {
        return Err(Error::InvalidArgument("no segments".into()));
    }
    let d = segs[0].dim();
    if segs.iter().any(|s| s.dim() != d) {
        return Err(Error::DimensionMismatch {
            context: "training segments".into(),
            expected: format!("{d} feature dims"),
            got: "mixed".into(),
        });
    }
    let total_frames: usize = segs.iter().map(|s| s.num_frames()).sum();
    if total_frames < cfg.components {
        return Err(Error::InvalidArgument(format!(
            "{} components exceed {} total frames",
            cfg.components, total_frames
        )));
    }

    // global moments for the initial covariance and the variance floor
    let mut gmean = DVector::zeros(d);
    let mut graw = DVector::zeros(d);
    for s in segs {
        for t in 0..s.num_frames() {
            let phi = s.frame(t);
            gmean += &phi;
            graw += phi.component_mul(&phi);
        }
    }
    gmean /= total_frames as f64;
    let gvar = DVector::from_fn(d, |k, _| {
        (graw[k] / total_frames as f64 - gmean[k] * gmean[k]).max(0.0)
    });
    let floor_vec = floor_vector(&cfg.floor, &gvar);
    let init_var = DVector::from_fn(d, |k, _| gvar[k].max(floor_vec[k]));
    let global_cov = match cfg.mode {
        CovarianceMode::Diagonal => Covariance::Diagonal(init_var.clone()),
        CovarianceMode::Full => Covariance::Full(DMatrix::from_diagonal(&init_var)),
    };

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    rng.set_stream(4);
    let frame_at = |j: usize| -> DVector<f64> {
        let mut rest = j;
        for s in segs {
            if rest < s.num_frames() {
                return s.frame(rest);
            }
            rest -= s.num_frames();
        }
        unreachable!("frame index within total")
    };
    let mut chosen = std::collections::BTreeSet::new();
    while chosen.len() < cfg.components {
        chosen.insert((rng.random::<u64>() % total_frames as u64) as usize);
    }
    let mut means = DMatrix::zeros(cfg.components, d);
    for (i, &j) in chosen.iter().enumerate() {
        means.row_mut(i).copy_from(&frame_at(j).transpose());
    }
    let weights = DVector::from_element(cfg.components, 1.0 / cfg.components as f64);
    let dims = ModelDims::new(cfg.components, d, cfg.ivector_dim)?;
    let mut params = ModelParams::background(
        dims,
        weights,
        means,
        vec![global_cov.clone(); cfg.components],
    )?;

    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let resps = reduce::par_map(segs, |s| align(&params, s))?;
        let idx: Vec<usize> = (0..segs.len()).collect();
        let bound = reduce::sum(&idx, cfg.reproducible, |&k| {
            lower_bound(&params, &segs[k], &resps[k])
        })?;
        trace.push(bound);

        let agg = accumulate_zero_centered(segs, &resps, cfg.mode, cfg.reproducible)?;
        let empty: Vec<usize> = (0..cfg.components)
            .filter(|&i| agg.counts[i] < MIN_COMPONENT_MASS)
            .collect();
        params = if empty.is_empty() || cfg.empty_policy == EmptyComponentPolicy::Error {
            params_from_stats(&agg, &cfg.floor, cfg.ivector_dim)?
        } else {
            // reseed dead components from random frames; survivors keep
            // their maximum-likelihood update
            let (_, global_var) = global_moments(&agg);
            let fl = floor_vector(&cfg.floor, &global_var);
            let mut weights = DVector::zeros(cfg.components);
            let mut means = DMatrix::zeros(cfg.components, d);
            let mut covs = Vec::with_capacity(cfg.components);
            let avg_mass = agg.frames as f64 / cfg.components as f64;
            for i in 0..cfg.components {
                if empty.contains(&i) {
                    let j = (rng.random::<u64>() % total_frames as u64) as usize;
                    means.row_mut(i).copy_from(&frame_at(j).transpose());
                    covs.push(global_cov.clone());
                    weights[i] = avg_mass;
                } else {
                    let f_i = agg.first.row(i).transpose();
                    let (mean, cov) =
                        component_from_stats(i, agg.counts[i], &f_i, &agg.second[i], &fl)?;
                    means.row_mut(i).copy_from(&mean.transpose());
                    covs.push(cov);
                    weights[i] = agg.counts[i];
                }
            }
            weights /= weights.sum();
            let s: f64 = weights.iter().sum();
            weights /= s;
            ModelParams::background(dims, weights, means, covs)?
        };
    }
    Ok((params, trace))
}
