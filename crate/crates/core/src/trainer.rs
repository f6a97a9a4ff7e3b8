//! Extractor training: coordinate ascent on the segment-evidence lower bound.
//!
//! Four recipes share one loop skeleton; they differ in where the
//! responsibilities come from and in which parameters move:
//!
//! * `classical`: responsibilities by aligning a fixed background model; only
//!   the loadings are re-estimated.
//! * `phonetic`: responsibilities fixed externally; weights, means and
//!   covariances are fit once from those responsibilities, then only the
//!   loadings move.
//! * `phonetic-joint`: responsibilities fixed externally; means and loadings
//!   are re-estimated jointly (closed form), covariances and optionally
//!   weights follow.
//! * `calibrated`: raw external posteriors are recalibrated every iteration
//!   by maximizing the same bound, then the joint model update runs.
//!
//! Every phase can only raise the bound; the per-phase records in the
//! returned report make that auditable.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::calibration::{
    self, CalibrationParams, CalibrationReport, CalibrationScale, OptimizeOptions, RawPosteriors,
};
use crate::error::{Error, Result};
use crate::gmm::{self, FloorSpec, Responsibilities};
use crate::model::{Covariance, CovarianceMode, ModelDims, ModelParams, SegmentFeatures};
use crate::posterior::{self, IVectorPosterior, PrecomputedProjections};
use crate::reduce;
use crate::stats::{self, SecondMoment, SegmentStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recipe {
    Classical,
    Phonetic,
    PhoneticJoint,
    Calibrated,
}

impl Recipe {
    pub fn as_str(self) -> &'static str {
        match self {
            Recipe::Classical => "classical",
            Recipe::Phonetic => "phonetic",
            Recipe::PhoneticJoint => "phonetic-joint",
            Recipe::Calibrated => "calibrated",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classical" => Ok(Recipe::Classical),
            "phonetic" => Ok(Recipe::Phonetic),
            "phonetic-joint" => Ok(Recipe::PhoneticJoint),
            "calibrated" => Ok(Recipe::Calibrated),
            other => Err(Error::InvalidArgument(format!(
                "unknown recipe {other:?} (expected classical, phonetic, phonetic-joint or calibrated)"
            ))),
        }
    }

    /// Whether the recipe moves means, covariances and weights during the
    /// iteration loop (as opposed to fixing them up front).
    pub fn updates_model(self) -> bool {
        matches!(self, Recipe::PhoneticJoint | Recipe::Calibrated)
    }
}

/// Where the per-frame responsibilities come from.
pub enum RespSource {
    /// Alignment against the fixed background model (classical recipe).
    Align,
    /// Externally supplied, fixed for the whole run (phonetic recipes).
    Fixed(Vec<Responsibilities>),
    /// Raw external posteriors, recalibrated every iteration.
    Calibrated {
        raws: Vec<RawPosteriors>,
        init: Option<CalibrationParams>,
    },
}

/// Calibration settings inside the training loop.
#[derive(Debug, Clone)]
pub struct CalibrationConfig {
    /// One scale per component instead of a single shared scale.
    pub per_component_scale: bool,
    /// Start each iteration's optimization from the previous parameters
    /// instead of from the identity.
    pub warm_start: bool,
    pub options: OptimizeOptions,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            per_component_scale: false,
            warm_start: true,
            options: OptimizeOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub recipe: Recipe,
    pub iterations: usize,
    pub ivector_dim: usize,
    /// Re-estimate mixture weights in model-updating recipes.
    pub update_weights: bool,
    /// Whether the loop may move means/covariances/weights; implied by the
    /// recipe and validated against it.
    pub update_model: bool,
    /// Early stop when the bound improves by less than this per frame
    /// between iterations; zero disables early stopping.
    pub min_improvement_per_frame: f64,
    pub reproducible: bool,
    pub floor: FloorSpec,
    /// Covariance mode when the recipe builds its own model; must match the
    /// input model when one is given.
    pub mode: CovarianceMode,
    pub seed: u64,
    /// Loading initialization scale; default 0.1 times the average per-dim
    /// feature standard deviation.
    pub loading_scale: Option<f64>,
    pub calibration: CalibrationConfig,
    /// Emit `iter=<k> phase=<name> elbo=<v>` lines on standard error.
    pub progress: bool,
}

impl TrainConfig {
    pub fn new(recipe: Recipe, ivector_dim: usize) -> Self {
        TrainConfig {
            recipe,
            iterations: 10,
            ivector_dim,
            update_weights: true,
            update_model: recipe.updates_model(),
            min_improvement_per_frame: 1e-4,
            reproducible: false,
            floor: FloorSpec::default(),
            mode: CovarianceMode::Diagonal,
            seed: 0,
            loading_scale: None,
            calibration: CalibrationConfig::default(),
            progress: false,
        }
    }

    fn validate(&self) -> Result<()> {
        self.floor.validate()?;
        if self.ivector_dim == 0 {
            return Err(Error::InvalidArgument("ivector_dim must be positive".into()));
        }
        if self.update_model != self.recipe.updates_model() {
            return Err(Error::InvalidArgument(format!(
                "recipe {} {} move the model parameters",
                self.recipe.as_str(),
                if self.recipe.updates_model() { "must" } else { "cannot" }
            )));
        }
        if let Some(s) = self.loading_scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "loading_scale must be positive, got {s}"
                )));
            }
        }
        if !(self.min_improvement_per_frame.is_finite() && self.min_improvement_per_frame >= 0.0) {
            return Err(Error::InvalidArgument(
                "min_improvement_per_frame must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Init,
    Posterior,
    Calibration,
    Loadings,
    Model,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Posterior => "posterior",
            Phase::Calibration => "calibration",
            Phase::Loadings => "loadings",
            Phase::Model => "model",
        }
    }
}

/// Bound value after one update phase. `delta` is relative to the previous
/// record; coordinate ascent keeps it non-negative up to roundoff.
#[derive(Debug, Clone)]
pub struct PhaseRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub elbo: f64,
    pub delta: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub recipe: Recipe,
    pub phases: Vec<PhaseRecord>,
    /// Bound at the end of each completed iteration.
    pub iteration_bounds: Vec<f64>,
    pub stopped_early: bool,
    pub total_frames: u64,
    /// One entry per calibration phase (calibrated recipe only).
    pub calibrations: Vec<CalibrationReport>,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub calibration: Option<CalibrationParams>,
    pub report: TrainReport,
}

/// Seeded Gaussian loading initialization: entries are `scale` times a
/// standard normal, independent per component.
pub fn init_loadings(dims: ModelDims, scale: f64, seed: u64) -> Vec<DMatrix<f64>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(5);
    let (d, m) = (dims.feature_dim, dims.ivector_dim);
    (0..dims.components)
        .map(|_| {
            let mut t = DMatrix::zeros(d, m);
            for r in 0..d {
                for c in 0..m {
                    t[(r, c)] = scale * rand::Rng::sample::<f64, _>(&mut rng, StandardNormal);
                }
            }
            t
        })
        .collect()
}

/// Per-component moments of the (statistics, posterior) pairs that the
/// closed-form updates need.
struct Moments {
    /// Soft counts n_i.
    counts: DVector<f64>,
    /// Centered first moments, rows f_i.
    first: DMatrix<f64>,
    /// b_i = sum_s f_si m_s' (D x M).
    cross: Vec<DMatrix<f64>>,
    /// p_i = sum_s n_si m_s (M).
    latent_first: Vec<DVector<f64>>,
    /// a_i = sum_s n_si (Sigma_s + m_s m_s') (M x M).
    latent_second: Vec<DMatrix<f64>>,
    /// Centered second moments summed over segments.
    second: Vec<SecondMoment>,
    frames: u64,
}

fn moments(
    stats: &[SegmentStats],
    posts: &[IVectorPosterior],
    dims: ModelDims,
    reproducible: bool,
) -> Result<Moments> {
    if stats.is_empty() || stats.len() != posts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} statistics sets paired with {} posteriors",
            stats.len(),
            posts.len()
        )));
    }
    let (n, d, m) = (dims.components, dims.feature_dim, dims.ivector_dim);
    let mode = stats[0].second[0].mode();
    let centering = stats[0].centering;
    let idx: Vec<usize> = (0..stats.len()).collect();
    let zero = || Moments {
        counts: DVector::zeros(n),
        first: DMatrix::zeros(n, d),
        cross: vec![DMatrix::zeros(d, m); n],
        latent_first: vec![DVector::zeros(m); n],
        latent_second: vec![DMatrix::zeros(m, m); n],
        second: (0..n).map(|_| SecondMoment::zeros(mode, d)).collect(),
        frames: 0,
    };
    let out = reduce::map_reduce(
        &idx,
        reproducible,
        |&k| {
            let s = &stats[k];
            let p = &posts[k];
            if s.centering != centering {
                return Err(Error::StaleStats(format!(
                    "segment {:?} statistics centered on different means",
                    s.segment_id
                )));
            }
            if s.counts.len() != n || s.first.ncols() != d || p.dim() != m {
                return Err(Error::DimensionMismatch {
                    context: format!("segment {:?}", s.segment_id),
                    expected: format!("{n} components x {d} dims, latent {m}"),
                    got: format!(
                        "{} x {}, latent {}",
                        s.counts.len(),
                        s.first.ncols(),
                        p.dim()
                    ),
                });
            }
            let ex2 = p.second_moment();
            let mut acc = zero();
            acc.frames = s.frames;
            for i in 0..n {
                let n_i = s.counts[i];
                acc.counts[i] = n_i;
                let f_i = s.first.row(i).transpose();
                acc.first.row_mut(i).copy_from(&s.first.row(i));
                acc.cross[i] = &f_i * p.mean.transpose();
                acc.latent_first[i] = n_i * &p.mean;
                acc.latent_second[i] = n_i * &ex2;
                acc.second[i] = s.second[i].clone();
            }
            Ok(acc)
        },
        |mut a, b| {
            a.counts += &b.counts;
            a.first += &b.first;
            for i in 0..n {
                a.cross[i] += &b.cross[i];
                a.latent_first[i] += &b.latent_first[i];
                a.latent_second[i] += &b.latent_second[i];
                match (&mut a.second[i], &b.second[i]) {
                    (SecondMoment::Diagonal(x), SecondMoment::Diagonal(y)) => *x += y,
                    (SecondMoment::Full(x), SecondMoment::Full(y)) => *x += y,
                    _ => {
                        return Err(Error::DimensionMismatch {
                            context: "second moment merge".into(),
                            expected: "matching modes".into(),
                            got: "mixed".into(),
                        })
                    }
                }
            }
            a.frames += b.frames;
            Ok(a)
        },
    )?;
    out.ok_or_else(|| Error::InvalidArgument("no segments".into()))
}

fn spd_solve_transposed(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    component: usize,
) -> Result<DMatrix<f64>> {
    let chol = nalgebra::Cholesky::new(a.clone()).ok_or_else(|| Error::SingularSystem {
        component,
        detail: format!("normal equations of size {} are not positive definite", a.nrows()),
    })?;
    // solve X A = B via A X' = B'
    Ok(chol.solve(&b.transpose()).transpose())
}

/// Closed-form loading update at fixed means: per component,
/// `T_i = b_i a_i^{-1}` with `b_i = sum_s f_si m_s'` and
/// `a_i = sum_s n_si (Sigma_s + m_s m_s')`. Maximizes the bound over the
/// loadings with everything else held fixed.
pub fn loadings_mstep(
    stats: &[SegmentStats],
    posts: &[IVectorPosterior],
    params: &ModelParams,
    reproducible: bool,
) -> Result<Vec<DMatrix<f64>>> {
    check_centering(stats, params)?;
    let mom = moments(stats, posts, params.dims, reproducible)?;
    let mut out = Vec::with_capacity(params.dims.components);
    for i in 0..params.dims.components {
        if mom.counts[i] < gmm::MIN_COMPONENT_MASS {
            return Err(Error::EmptyComponent {
                component: i,
                mass: mom.counts[i],
            });
        }
        out.push(spd_solve_transposed(&mom.latent_second[i], &mom.cross[i], i)?);
    }
    Ok(out)
}

fn check_centering(stats: &[SegmentStats], params: &ModelParams) -> Result<()> {
    let want = params.means_fingerprint();
    if let Some(s) = stats.iter().find(|s| s.centering != want) {
        return Err(Error::StaleStats(format!(
            "statistics for segment {:?} are not centered on the current means",
            s.segment_id
        )));
    }
    Ok(())
}

/// Joint closed-form update of means and loadings (plus covariances and
/// optionally weights) via the augmented-loadings device: append a constant
/// one to the latent vector, solve the joint normal equations
/// `[mu_i T_i] = b~_i a~_i^{-1}`, then re-estimate each covariance around the
/// new shifted means and apply the variance floor. One coordinate-ascent
/// sweep: the bound cannot decrease.
pub fn joint_mstep(
    stats: &[SegmentStats],
    posts: &[IVectorPosterior],
    params: &ModelParams,
    update_weights: bool,
    floor: &FloorSpec,
    reproducible: bool,
) -> Result<ModelParams> {
    floor.validate()?;
    check_centering(stats, params)?;
    let dims = params.dims;
    let (n, d, m) = (dims.components, dims.feature_dim, dims.ivector_dim);
    let mom = moments(stats, posts, dims, reproducible)?;
    let total = mom.frames as f64;

    // global per-dim variance for the floor, from uncentered totals
    let mut gmean: DVector<f64> = DVector::zeros(d);
    let mut graw: DVector<f64> = DVector::zeros(d);
    for i in 0..n {
        let mu_old = params.mean(i);
        let n_i = mom.counts[i];
        let f_i = mom.first.row(i).transpose();
        let g_i = &f_i + n_i * &mu_old;
        gmean += &g_i;
        let diag_s: DVector<f64> = match &mom.second[i] {
            SecondMoment::Diagonal(s) => s.clone(),
            SecondMoment::Full(s) => s.diagonal(),
        };
        // uncentered raw second moment per dim
        for k in 0..d {
            graw[k] += diag_s[k] + 2.0 * f_i[k] * mu_old[k] + n_i * mu_old[k] * mu_old[k];
        }
    }
    gmean /= total;
    let gvar: DVector<f64> =
        DVector::from_fn(d, |k, _| (graw[k] / total - gmean[k] * gmean[k]).max(0.0));
    let floor_vec = gvar.map(|v| floor.absolute.max(floor.relative * v));

    let mut weights = params.weights.clone();
    let mut means = DMatrix::zeros(n, d);
    let mut covariances = Vec::with_capacity(n);
    let mut loadings = Vec::with_capacity(n);
    for i in 0..n {
        let n_i = mom.counts[i];
        if n_i < gmm::MIN_COMPONENT_MASS {
            return Err(Error::EmptyComponent {
                component: i,
                mass: n_i,
            });
        }
        let mu_old = params.mean(i);
        let f_i = mom.first.row(i).transpose();
        let g_i = &f_i + n_i * &mu_old; // uncentered first moment
        let b_i = &mom.cross[i];
        let p_i = &mom.latent_first[i];
        let a_i = &mom.latent_second[i];

        // augmented system: columns [mu | T], latent [1; x]
        let mut b_aug = DMatrix::zeros(d, m + 1);
        b_aug.column_mut(0).copy_from(&g_i);
        let cross_uncentered = b_i + &mu_old * p_i.transpose();
        b_aug.view_mut((0, 1), (d, m)).copy_from(&cross_uncentered);
        let mut a_aug = DMatrix::zeros(m + 1, m + 1);
        a_aug[(0, 0)] = n_i;
        a_aug.view_mut((1, 0), (m, 1)).copy_from(p_i);
        a_aug.view_mut((0, 1), (1, m)).copy_from(&p_i.transpose());
        a_aug.view_mut((1, 1), (m, m)).copy_from(a_i);
        let solved = spd_solve_transposed(&a_aug, &b_aug, i)?;
        let mu_new: DVector<f64> = solved.column(0).into();
        let t_new: DMatrix<f64> = solved.view((0, 1), (d, m)).into();

        // recenter the statistics on the new mean
        let delta = &mu_new - &mu_old;
        let b_new = b_i - &delta * p_i.transpose();
        let cov = match &mom.second[i] {
            SecondMoment::Diagonal(s) => {
                let ta = &t_new * a_i;
                let c = DVector::from_fn(d, |k, _| {
                    let s_new =
                        s[k] - 2.0 * f_i[k] * delta[k] + n_i * delta[k] * delta[k];
                    let cross_term: f64 =
                        (0..m).map(|j| b_new[(k, j)] * t_new[(k, j)]).sum();
                    let quad_term: f64 = (0..m).map(|j| ta[(k, j)] * t_new[(k, j)]).sum();
                    ((s_new - 2.0 * cross_term + quad_term) / n_i).max(floor_vec[k])
                });
                Covariance::Diagonal(c)
            }
            SecondMoment::Full(s) => {
                let s_new = s - &f_i * delta.transpose() - &delta * f_i.transpose()
                    + n_i * &delta * delta.transpose();
                let bt = &b_new * t_new.transpose();
                let mut c =
                    (s_new - &bt - bt.transpose() + &t_new * a_i * t_new.transpose()) / n_i;
                c = (&c + c.transpose()) * 0.5;
                for k in 0..d {
                    c[(k, k)] = c[(k, k)].max(floor_vec[k]);
                }
                if Covariance::Full(c.clone()).factor("candidate").is_err() {
                    c += DMatrix::from_diagonal(&floor_vec);
                }
                let cov = Covariance::Full(c);
                cov.validate(&format!("covariance {i} after flooring"))?;
                cov
            }
        };
        means.row_mut(i).copy_from(&mu_new.transpose());
        covariances.push(cov);
        loadings.push(t_new);
        if update_weights {
            weights[i] = n_i;
        }
    }
    if update_weights {
        weights /= weights.sum();
        let s: f64 = weights.iter().sum();
        weights /= s;
    }
    ModelParams::new(dims, weights, means, covariances, loadings)
}

fn compute_stats(
    segs: &[SegmentFeatures],
    resps: &[Responsibilities],
    params: &ModelParams,
) -> Result<Vec<SegmentStats>> {
    let mode = params.covariance_mode();
    let idx: Vec<usize> = (0..segs.len()).collect();
    reduce::par_map(&idx, |&k| stats::accumulate(&segs[k], &resps[k], &params.means, mode))
}

fn compute_posts(
    stats: &[SegmentStats],
    proj: &PrecomputedProjections,
) -> Result<Vec<IVectorPosterior>> {
    reduce::par_map(stats, |s| IVectorPosterior::from_stats(s, proj))
}

fn total_bound(
    resps: &[Responsibilities],
    stats: &[SegmentStats],
    posts: &[IVectorPosterior],
    params: &ModelParams,
    proj: &PrecomputedProjections,
    reproducible: bool,
) -> Result<f64> {
    let idx: Vec<usize> = (0..stats.len()).collect();
    reduce::sum(&idx, reproducible, |&k| {
        posterior::elbo(&resps[k], &stats[k], &posts[k], params, proj)
    })
}

fn global_feature_std(segs: &[SegmentFeatures]) -> f64 {
    let d = segs[0].dim();
    let mut total = 0usize;
    let mut mean = DVector::zeros(d);
    let mut raw = DVector::zeros(d);
    for s in segs {
        for t in 0..s.num_frames() {
            let phi = s.frame(t);
            mean += &phi;
            raw += phi.component_mul(&phi);
        }
        total += s.num_frames();
    }
    mean /= total as f64;
    let var = DVector::from_fn(d, |k, _| (raw[k] / total as f64 - mean[k] * mean[k]).max(0.0));
    var.map(f64::sqrt).mean()
}

struct Recorder {
    phases: Vec<PhaseRecord>,
    last: Option<f64>,
    progress: bool,
}

impl Recorder {
    fn push(&mut self, iteration: usize, phase: Phase, elbo: f64) {
        let delta = self.last.map_or(0.0, |prev| elbo - prev);
        if self.progress {
            eprintln!("iter={iteration} phase={} elbo={elbo:.9}", phase.as_str());
        }
        self.phases.push(PhaseRecord {
            iteration,
            phase,
            elbo,
            delta,
        });
        self.last = Some(elbo);
    }
}

/// Runs one training recipe. `initial` supplies the background model for the
/// classical recipe (required there) and an optional warm start for the
/// others; external-responsibility recipes rebuild weights, means and
/// covariances from the data before iterating.
pub fn train(
    segs: &[SegmentFeatures],
    initial: Option<&ModelParams>,
    source: RespSource,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if segs.is_empty() {
        return Err(Error::InvalidArgument("no training segments".into()));
    }
    let d = segs[0].dim();
    if segs.iter().any(|s| s.dim() != d) {
        return Err(Error::DimensionMismatch {
            context: "training segments".into(),
            expected: format!("{d} feature dims"),
            got: "mixed".into(),
        });
    }
    if let Some(p) = initial {
        if p.dims.feature_dim != d {
            return Err(Error::DimensionMismatch {
                context: "initial model".into(),
                expected: format!("{d} feature dims"),
                got: format!("{}", p.dims.feature_dim),
            });
        }
        if p.covariance_mode() != config.mode {
            return Err(Error::InvalidArgument(format!(
                "initial model is {} but config requests {}",
                p.covariance_mode().as_str(),
                config.mode.as_str()
            )));
        }
    }

    // resolve responsibilities and calibration state
    let mut current_cal: Option<CalibrationParams> = None;
    let (mut resps, raws): (Vec<Responsibilities>, Option<Vec<RawPosteriors>>) = match source {
        RespSource::Align => {
            if config.recipe != Recipe::Classical {
                return Err(Error::InvalidArgument(format!(
                    "recipe {} needs externally supplied responsibilities",
                    config.recipe.as_str()
                )));
            }
            let base = initial.ok_or_else(|| {
                Error::InvalidArgument("classical recipe requires a background model".into())
            })?;
            (reduce::par_map(segs, |s| gmm::align(base, s))?, None)
        }
        RespSource::Fixed(r) => {
            if !matches!(config.recipe, Recipe::Phonetic | Recipe::PhoneticJoint) {
                return Err(Error::InvalidArgument(format!(
                    "fixed responsibilities only drive the phonetic recipes, not {}",
                    config.recipe.as_str()
                )));
            }
            check_pairing(segs, r.len(), |k| (r[k].segment_id.clone(), r[k].num_frames()))?;
            (r, None)
        }
        RespSource::Calibrated { raws, init } => {
            if config.recipe != Recipe::Calibrated {
                return Err(Error::InvalidArgument(format!(
                    "raw posteriors only drive the calibrated recipe, not {}",
                    config.recipe.as_str()
                )));
            }
            check_pairing(segs, raws.len(), |k| {
                (raws[k].segment_id.clone(), raws[k].num_frames())
            })?;
            let n = raws[0].num_components();
            let cal = match init {
                Some(c) => {
                    if c.components() != n {
                        return Err(Error::DimensionMismatch {
                            context: "initial calibration".into(),
                            expected: format!("{n} components"),
                            got: format!("{}", c.components()),
                        });
                    }
                    c
                }
                None if config.calibration.per_component_scale => CalibrationParams::new(
                    CalibrationScale::PerComponent(DVector::from_element(n, 1.0)),
                    DVector::zeros(n),
                )?,
                None => CalibrationParams::identity(n),
            };
            let q = reduce::par_map(&raws, |r| calibration::apply_calibration(r, &cal))?;
            current_cal = Some(cal);
            (q, Some(raws))
        }
    };
    let components = resps[0].num_components();
    if resps.iter().any(|r| r.num_components() != components) {
        return Err(Error::DimensionMismatch {
            context: "responsibilities".into(),
            expected: format!("{components} components"),
            got: "mixed".into(),
        });
    }
    let dims = ModelDims::new(components, d, config.ivector_dim)?;

    // base parameters
    let mut params = match config.recipe {
        Recipe::Classical => {
            let base = initial.expect("checked above");
            if base.dims.components != components {
                return Err(Error::DimensionMismatch {
                    context: "background model".into(),
                    expected: format!("{components} components"),
                    got: format!("{}", base.dims.components),
                });
            }
            reshape_latent(base, dims)?
        }
        _ => {
            // one closed-form fit of weights/means/covariances at the fixed
            // (or initially calibrated) responsibilities
            let fitted = gmm::ubm_mstep(
                segs,
                &resps,
                config.mode,
                &config.floor,
                config.ivector_dim,
                config.reproducible,
            )?;
            match initial {
                Some(warm) if !warm.loadings_all_zero() => {
                    // keep the supplied loadings as a warm start
                    let reshaped = reshape_latent(warm, dims)?;
                    fitted.with_loadings(reshaped.loadings)?
                }
                _ => fitted,
            }
        }
    };
    if params.loadings_all_zero() {
        let scale = config
            .loading_scale
            .unwrap_or_else(|| 0.1 * global_feature_std(segs));
        params = params.with_loadings(init_loadings(dims, scale, config.seed))?;
    }

    let total_frames: u64 = segs.iter().map(|s| s.num_frames() as u64).sum();
    let mut recorder = Recorder {
        phases: Vec::new(),
        last: None,
        progress: config.progress,
    };
    let mut report = TrainReport {
        recipe: config.recipe,
        phases: Vec::new(),
        iteration_bounds: Vec::new(),
        stopped_early: false,
        total_frames,
        calibrations: Vec::new(),
    };

    // starting point: latent posteriors at the prior
    let mut stats = compute_stats(segs, &resps, &params)?;
    let mut proj = PrecomputedProjections::new(&params)?;
    let mut posts: Vec<IVectorPosterior> =
        (0..segs.len()).map(|_| IVectorPosterior::prior(config.ivector_dim)).collect();
    let init_bound = total_bound(&resps, &stats, &posts, &params, &proj, config.reproducible)?;
    recorder.push(0, Phase::Init, init_bound);

    for it in 1..=config.iterations {
        // latent posterior update
        posts = compute_posts(&stats, &proj)?;
        let bound = total_bound(&resps, &stats, &posts, &params, &proj, config.reproducible)?;
        recorder.push(it, Phase::Posterior, bound);

        // calibration update (calibrated recipe only)
        if let Some(raws) = raws.as_ref() {
            let idx: Vec<usize> = (0..segs.len()).collect();
            let log_resp: Vec<DMatrix<f64>> = reduce::par_map(&idx, |&k| {
                let ll = posterior::expected_log_likelihoods(&segs[k], &posts[k], &params, &proj)?;
                Ok(calibration::log_normalize_rows(&ll))
            })?;
            let warm = current_cal.clone().expect("calibrated recipe keeps parameters");
            let start = if config.calibration.warm_start {
                warm
            } else if config.calibration.per_component_scale {
                CalibrationParams::new(
                    CalibrationScale::PerComponent(DVector::from_element(components, 1.0)),
                    DVector::zeros(components),
                )?
            } else {
                CalibrationParams::identity(components)
            };
            let (cal, calrep) =
                calibration::optimize(raws, &log_resp, &start, &config.calibration.options)?;
            report.calibrations.push(calrep);
            resps = reduce::par_map(raws, |r| calibration::apply_calibration(r, &cal))?;
            current_cal = Some(cal);
            stats = compute_stats(segs, &resps, &params)?;
            let bound =
                total_bound(&resps, &stats, &posts, &params, &proj, config.reproducible)?;
            recorder.push(it, Phase::Calibration, bound);
        }

        // model update
        let (phase, new_params) = match config.recipe {
            Recipe::Classical | Recipe::Phonetic => {
                let t_new = loadings_mstep(&stats, &posts, &params, config.reproducible)?;
                (Phase::Loadings, params.with_loadings(t_new)?)
            }
            Recipe::PhoneticJoint | Recipe::Calibrated => (
                Phase::Model,
                joint_mstep(
                    &stats,
                    &posts,
                    &params,
                    config.update_weights,
                    &config.floor,
                    config.reproducible,
                )?,
            ),
        };
        let means_moved = new_params.means_fingerprint() != params.means_fingerprint();
        params = new_params;
        proj = PrecomputedProjections::new(&params)?;
        if means_moved {
            stats = compute_stats(segs, &resps, &params)?;
        }
        let bound = total_bound(&resps, &stats, &posts, &params, &proj, config.reproducible)?;
        recorder.push(it, phase, bound);

        report.iteration_bounds.push(bound);
        if config.min_improvement_per_frame > 0.0 && report.iteration_bounds.len() >= 2 {
            let k = report.iteration_bounds.len();
            let gain = report.iteration_bounds[k - 1] - report.iteration_bounds[k - 2];
            if gain < config.min_improvement_per_frame * total_frames as f64 {
                report.stopped_early = true;
                break;
            }
        }
    }

    report.phases = recorder.phases;
    Ok(TrainOutcome {
        params,
        calibration: current_cal,
        report,
    })
}

fn reshape_latent(base: &ModelParams, dims: ModelDims) -> Result<ModelParams> {
    if base.dims.ivector_dim == dims.ivector_dim {
        return ModelParams::new(
            dims,
            base.weights.clone(),
            base.means.clone(),
            base.covariances.clone(),
            base.loadings.clone(),
        );
    }
    if !base.loadings_all_zero() {
        return Err(Error::DimensionMismatch {
            context: "initial model loadings".into(),
            expected: format!("latent dim {}", dims.ivector_dim),
            got: format!("{}", base.dims.ivector_dim),
        });
    }
    ModelParams::new(
        dims,
        base.weights.clone(),
        base.means.clone(),
        base.covariances.clone(),
        vec![DMatrix::zeros(dims.feature_dim, dims.ivector_dim); dims.components],
    )
}

fn check_pairing<F>(segs: &[SegmentFeatures], count: usize, info: F) -> Result<()>
where
    F: Fn(usize) -> (String, usize),
{
    if count != segs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} responsibility/posterior sets for {} segments",
            count,
            segs.len()
        )));
    }
    for (k, seg) in segs.iter().enumerate() {
        let (id, frames) = info(k);
        if id != seg.segment_id {
            return Err(Error::StaleStats(format!(
                "entry {k} is for segment {id:?}, expected {:?}",
                seg.segment_id
            )));
        }
        if frames != seg.num_frames() {
            return Err(Error::DimensionMismatch {
                context: format!("segment {:?}", seg.segment_id),
                expected: format!("{} frames", seg.num_frames()),
                got: format!("{frames}"),
            });
        }
    }
    Ok(())
}
