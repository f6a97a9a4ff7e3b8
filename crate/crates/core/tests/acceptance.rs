//! End-to-end acceptance checks against independent oracles: numerical
//! quadrature, exhaustive path enumeration, Monte Carlo sampling and finite
//! differences. Each test prints one `criterion NN ...: PASS` line; run with
//! `cargo test --test acceptance -- --nocapture` to see them all.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use ivector::calibration::{
    self, apply_calibration, log_normalize_rows, CalibrationParams, CalibrationScale,
    OptimizeOptions, RawPosteriors,
};
use ivector::gmm::{
    align, log_likelihood, lower_bound, train_ubm, Responsibilities, UbmConfig,
};
use ivector::io;
use ivector::model::{
    random_params, sample_dataset, Covariance, CovarianceMode, ModelDims, ModelParams,
    SegmentFeatures,
};
use ivector::numeric::{item_seed, logsumexp, LN_2PI};
use ivector::posterior::{
    elbo, expected_log_gauss, expected_log_likelihoods, IVectorPosterior,
    PrecomputedProjections,
};
use ivector::stats::accumulate;
use ivector::trainer::{train, Recipe, RespSource, TrainConfig};

fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha12Rng) -> f64 {
    r.sample::<f64, _>(StandardNormal)
}

/// Random rows on the probability simplex, bounded away from zero by the
/// softmax of moderate logits.
fn simplex_rows(r: &mut ChaCha12Rng, frames: usize, components: usize, spread: f64) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(frames, components);
    for t in 0..frames {
        let logits: Vec<f64> = (0..components).map(|_| spread * normal(r)).collect();
        let lse = logsumexp(&logits);
        for i in 0..components {
            out[(t, i)] = (logits[i] - lse).exp();
        }
    }
    out
}

/// Random latent posterior with precision I + G'G, so it dominates the prior.
fn random_posterior(r: &mut ChaCha12Rng, m: usize) -> IVectorPosterior {
    let g = DMatrix::from_fn(m, m, |_, _| 0.7 * normal(r));
    let precision = DMatrix::identity(m, m) + g.transpose() * &g;
    let natural = DVector::from_fn(m, |_, _| normal(r));
    IVectorPosterior::from_natural(natural, precision).expect("constructed SPD precision")
}

fn scalar_variance(cov: &Covariance) -> f64 {
    match cov {
        Covariance::Diagonal(d) => d[0],
        Covariance::Full(m) => m[(0, 0)],
    }
}

/// log N(phi | mean, var) in one dimension.
fn log_gauss_1d(phi: f64, mean: f64, var: f64) -> f64 {
    let r = phi - mean;
    -0.5 * (LN_2PI + var.ln() + r * r / var)
}

// Criterion 1. On tiny one-dimensional instances with one-hot
// responsibilities the latent posterior is the exact conditional, so its
// mean and variance must match direct numerical integration.
#[test]
fn criterion_01_posterior_matches_quadrature() {
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    for k in 0..20u64 {
        let seed = 1000 + k;
        let n = 1 + (k as usize) % 3;
        let mode = if k % 2 == 0 { CovarianceMode::Diagonal } else { CovarianceMode::Full };
        let dims = ModelDims::new(n, 1, 1).unwrap();
        let params = random_params(dims, mode, 0.8, seed).unwrap();
        let frames = 1 + (k as usize) % 5;
        let (seg, truth) = ivector::model::sample_segment(&params, frames, seed).unwrap();
        let resp = Responsibilities::one_hot(seg.segment_id.clone(), &truth.path, n).unwrap();
        let stats = accumulate(&seg, &resp, &params.means, mode).unwrap();
        let proj = PrecomputedProjections::new(&params).unwrap();
        let post = IVectorPosterior::from_stats(&stats, &proj).unwrap();

        // Simpson quadrature of the unnormalized conditional over a range
        // wide enough for any posterior this model family can produce (the
        // prior bounds the variance by 1).
        let (lo, hi, points) = (-14.0f64, 14.0f64, 28001usize);
        let h = (hi - lo) / (points - 1) as f64;
        let mut logf = vec![0.0f64; points];
        for (j, lf) in logf.iter_mut().enumerate() {
            let x = lo + h * j as f64;
            let mut v = -0.5 * (x * x + LN_2PI);
            for (t, &i) in truth.path.iter().enumerate() {
                let mean = params.means[(i, 0)] + params.loadings[i][(0, 0)] * x;
                v += log_gauss_1d(seg.frames[(t, 0)], mean, scalar_variance(&params.covariances[i]));
            }
            *lf = v;
        }
        let peak = logf.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (mut z, mut s1, mut s2) = (0.0f64, 0.0f64, 0.0f64);
        for (j, &lf) in logf.iter().enumerate() {
            let w = if j == 0 || j == points - 1 {
                1.0
            } else if j % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let x = lo + h * j as f64;
            let f = w * (lf - peak).exp();
            z += f;
            s1 += f * x;
            s2 += f * x * x;
        }
        let mean = s1 / z;
        let var = s2 / z - mean * mean;

        let dm = (post.mean[0] - mean).abs();
        let dv = (post.covariance[(0, 0)] - var).abs();
        worst_mean = worst_mean.max(dm);
        worst_var = worst_var.max(dv);
        assert!(dm < 1e-6, "instance {k}: mean {} vs quadrature {mean} (diff {dm:.3e})", post.mean[0]);
        assert!(dv < 1e-6, "instance {k}: var {} vs quadrature {var} (diff {dv:.3e})", post.covariance[(0, 0)]);
    }
    println!(
        "criterion 01 posterior vs quadrature: PASS (20 instances, worst mean diff {worst_mean:.2e}, worst var diff {worst_var:.2e})"
    );
}

/// Exact log evidence of one segment by enumerating every component path and
/// integrating the latent vector out in closed form.
fn exact_log_evidence(params: &ModelParams, seg: &SegmentFeatures) -> f64 {
    let proj = PrecomputedProjections::new(params).unwrap();
    let dims = params.dims;
    let (n, m, frames) = (dims.components, dims.ivector_dim, seg.num_frames());
    let mut path = vec![0usize; frames];
    let mut terms = Vec::new();
    loop {
        // static part: mixture weights and densities at the unshifted means
        let mut lp = 0.0;
        let mut precision = DMatrix::identity(m, m);
        let mut natural = DVector::zeros(m);
        for (t, &i) in path.iter().enumerate() {
            let phi = seg.frame(t);
            lp += params.weights[i].ln() + proj.factors[i].log_density(&phi, &params.mean(i));
            precision += &proj.gram[i];
            natural += &proj.cross[i] * (phi - params.mean(i));
        }
        // latent integral: -1/2 ln|P| + 1/2 a'P^{-1}a for P = I + sum gram
        let chol = nalgebra::Cholesky::new(precision.clone()).expect("P dominates identity");
        let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let solved = chol.solve(&natural);
        lp += -0.5 * log_det + 0.5 * natural.dot(&solved);
        terms.push(lp);

        // next path in lexicographic order
        let mut t = 0;
        loop {
            if t == frames {
                let total = logsumexp(&terms);
                assert_eq!(terms.len(), n.pow(frames as u32));
                return total;
            }
            path[t] += 1;
            if path[t] < n {
                break;
            }
            path[t] = 0;
            t += 1;
        }
    }
}

// Criterion 2. The variational bound never exceeds the exact log evidence,
// whatever responsibilities and latent posterior it is evaluated at.
#[test]
fn criterion_02_bound_below_exact_evidence() {
    let mut worst_slack = f64::INFINITY;
    let mut checks = 0usize;
    for k in 0..20u64 {
        let seed = 2000 + k;
        let n = 1 + (k as usize) % 3;
        let d = 1 + (k as usize) % 2;
        let mode = if k % 2 == 0 { CovarianceMode::Diagonal } else { CovarianceMode::Full };
        let dims = ModelDims::new(n, d, 1).unwrap();
        let params = random_params(dims, mode, 0.7, seed).unwrap();
        let frames = 1 + (k as usize) % 4;
        let (seg, truth) = ivector::model::sample_segment(&params, frames, seed).unwrap();
        let exact = exact_log_evidence(&params, &seg);
        let proj = PrecomputedProjections::new(&params).unwrap();
        let mut r = rng(seed ^ 0x5eed);

        // one-hot truth, then random soft responsibilities, each evaluated at
        // the prior, the matched optimum, and an arbitrary valid posterior
        let mut resps =
            vec![Responsibilities::one_hot(seg.segment_id.clone(), &truth.path, n).unwrap()];
        for _ in 0..3 {
            let probs = simplex_rows(&mut r, frames, n, 1.5);
            resps.push(Responsibilities::new(seg.segment_id.clone(), probs).unwrap());
        }
        for resp in &resps {
            let stats = accumulate(&seg, resp, &params.means, mode).unwrap();
            let posts = [
                IVectorPosterior::prior(1),
                IVectorPosterior::from_stats(&stats, &proj).unwrap(),
                random_posterior(&mut r, 1),
            ];
            for post in &posts {
                let bound = elbo(resp, &stats, post, &params, &proj).unwrap();
                let slack = exact - bound;
                worst_slack = worst_slack.min(slack);
                checks += 1;
                assert!(
                    slack >= -1e-8,
                    "instance {k}: bound {bound} exceeds exact evidence {exact} by {:.3e}",
                    -slack
                );
            }
        }
    }
    println!(
        "criterion 02 bound below exact evidence: PASS ({checks} evaluations, smallest slack {worst_slack:.3e})"
    );
}

fn standard_set() -> (ModelParams, Vec<(SegmentFeatures, ivector::model::SyntheticTruth)>) {
    let dims = ModelDims::new(4, 5, 2).unwrap();
    let truth = random_params(dims, CovarianceMode::Diagonal, 0.5, 42).unwrap();
    let data = sample_dataset(&truth, 200, 100, 42).unwrap();
    (truth, data)
}

fn noisy_resps(data: &[(SegmentFeatures, ivector::model::SyntheticTruth)], temperature: f64, seed: u64) -> Vec<DMatrix<f64>> {
    data.iter()
        .enumerate()
        .map(|(s, (_, truth))| {
            ivector::model::noisy_path_posteriors(&truth.path, 4, temperature, item_seed(seed, s as u64))
                .unwrap()
        })
        .collect()
}

// Criterion 3. Every recorded phase of every training recipe moves the total
// bound up, to within roundoff relative to its magnitude, for at least ten
// outer iterations on the standard synthetic set.
#[test]
fn criterion_03_coordinate_ascent_monotone() {
    let (_, data) = standard_set();
    let segs: Vec<SegmentFeatures> = data.iter().map(|(s, _)| s.clone()).collect();
    let noisy = noisy_resps(&data, 0.5, 42);

    let mut summaries = Vec::new();
    for recipe in [Recipe::Classical, Recipe::Phonetic, Recipe::PhoneticJoint, Recipe::Calibrated] {
        let mut cfg = TrainConfig::new(recipe, 2);
        cfg.iterations = 10;
        cfg.min_improvement_per_frame = 0.0;
        cfg.reproducible = true;
        cfg.seed = 7;

        let ubm;
        let (initial, source) = match recipe {
            Recipe::Classical => {
                let mut ucfg = UbmConfig::new(4);
                ucfg.iterations = 5;
                ucfg.ivector_dim = 2;
                ucfg.seed = 7;
                ubm = train_ubm(&segs, &ucfg).unwrap().0;
                (Some(&ubm), RespSource::Align)
            }
            Recipe::Phonetic | Recipe::PhoneticJoint => {
                let resps: Vec<Responsibilities> = segs
                    .iter()
                    .zip(&noisy)
                    .map(|(s, p)| Responsibilities::new(s.segment_id.clone(), p.clone()).unwrap())
                    .collect();
                (None, RespSource::Fixed(resps))
            }
            Recipe::Calibrated => {
                let raws: Vec<RawPosteriors> = segs
                    .iter()
                    .zip(&noisy)
                    .map(|(s, p)| RawPosteriors::from_probs(s.segment_id.clone(), p.clone()).unwrap())
                    .collect();
                (None, RespSource::Calibrated { raws, init: None })
            }
        };
        let outcome = train(&segs, initial, source, &cfg).unwrap();
        let report = outcome.report;
        assert!(!report.stopped_early, "{recipe:?} stopped before 10 iterations");
        let last_iter = report.phases.iter().map(|p| p.iteration).max().unwrap();
        assert!(last_iter >= 10, "{recipe:?} ran only {last_iter} iterations");
        let mut worst = 0.0f64;
        for rec in &report.phases {
            let tol = 1e-6 * rec.elbo.abs().max(1.0);
            assert!(
                rec.delta >= -tol,
                "{recipe:?} iteration {} phase {:?} decreased the bound by {:.3e}",
                rec.iteration,
                rec.phase,
                -rec.delta
            );
            worst = worst.min(rec.delta);
        }
        summaries.push(format!("{}: {} phases, min delta {worst:.2e}", recipe.as_str(), report.phases.len()));
    }
    println!("criterion 03 coordinate ascent monotone: PASS ({})", summaries.join("; "));
}

// Criterion 4. The closed-form expected Gaussian log density under the latent
// posterior agrees with brute-force Monte Carlo within sampling error.
#[test]
fn criterion_04_expected_likelihood_matches_monte_carlo() {
    let draws = 1_000_000usize;
    let mut worst_sigma = 0.0f64;
    let mut checks = 0usize;
    for k in 0..10u64 {
        let seed = 4000 + k;
        let n = 2 + (k as usize) % 2;
        let d = 2 + (k as usize) % 3;
        let m = 1 + (k as usize) % 2;
        let mode = if k % 2 == 0 { CovarianceMode::Diagonal } else { CovarianceMode::Full };
        let dims = ModelDims::new(n, d, m).unwrap();
        let params = random_params(dims, mode, 0.6, seed).unwrap();
        let mut r = rng(seed);
        let post = random_posterior(&mut r, m);
        let phi = DVector::from_fn(d, |_, _| 1.5 * normal(&mut r));

        let factors: Vec<_> = (0..n)
            .map(|i| params.covariances[i].factor("covariance").unwrap())
            .collect();
        let chol = nalgebra::Cholesky::new(post.covariance.clone()).unwrap();
        let l = chol.l();

        let mut sums = vec![0.0f64; n];
        let mut sumsqs = vec![0.0f64; n];
        for _ in 0..draws {
            let xi = DVector::from_fn(m, |_, _| normal(&mut r));
            let x = &post.mean + &l * xi;
            for i in 0..n {
                let shifted = params.mean(i) + &params.loadings[i] * &x;
                let v = factors[i].log_density(&phi, &shifted);
                sums[i] += v;
                sumsqs[i] += v * v;
            }
        }
        for i in 0..n {
            let closed = expected_log_gauss(&phi, i, &post, &params).unwrap();
            let mc = sums[i] / draws as f64;
            let var = (sumsqs[i] / draws as f64 - mc * mc).max(0.0);
            let se = (var / draws as f64).sqrt();
            let sigmas = (closed - mc).abs() / se;
            worst_sigma = worst_sigma.max(sigmas);
            checks += 1;
            assert!(
                sigmas <= 3.0,
                "instance {k} component {i}: closed form {closed} vs MC {mc} ({sigmas:.2} standard errors)"
            );
        }
    }
    println!(
        "criterion 04 expected likelihood vs Monte Carlo: PASS ({checks} checks over 1e6 draws each, worst {worst_sigma:.2} se)"
    );
}

fn flat_gradient(g: &calibration::CalibrationGradient) -> Vec<f64> {
    let mut out = match &g.scale {
        CalibrationScale::Scalar(v) => vec![*v],
        CalibrationScale::PerComponent(v) => v.iter().cloned().collect(),
    };
    out.extend(g.offsets.iter().cloned());
    out
}

/// Rebuilds calibration parameters with one flat coordinate perturbed.
/// Offsets are re-centered on construction, which leaves the objective
/// unchanged because it is invariant to constant offset shifts.
fn perturbed(cal: &CalibrationParams, coord: usize, h: f64) -> CalibrationParams {
    let (scale_len, mut scale_vals) = match &cal.scale {
        CalibrationScale::Scalar(v) => (1usize, vec![*v]),
        CalibrationScale::PerComponent(v) => (v.len(), v.iter().cloned().collect()),
    };
    let mut offsets = cal.offsets.clone();
    if coord < scale_len {
        scale_vals[coord] += h;
    } else {
        offsets[coord - scale_len] += h;
    }
    let scale = if scale_len == 1 && matches!(cal.scale, CalibrationScale::Scalar(_)) {
        CalibrationScale::Scalar(scale_vals[0])
    } else {
        CalibrationScale::PerComponent(DVector::from_vec(scale_vals))
    };
    CalibrationParams::new(scale, offsets).expect("perturbation keeps parameters valid")
}

// Criterion 5. The analytic calibration gradient matches central finite
// differences of the objective.
#[test]
fn criterion_05_calibration_gradient_matches_finite_differences() {
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checks = 0usize;
    for k in 0..20u64 {
        let seed = 5000 + k;
        let n = [2usize, 10, 50][(k as usize) % 3];
        let mut r = rng(seed);
        let segments = 1 + (k as usize) % 2;
        let mut raws = Vec::new();
        let mut log_resp = Vec::new();
        for s in 0..segments {
            let frames = 3 + ((k as usize) + s) % 4;
            raws.push(
                RawPosteriors::from_probs(format!("s{s}"), simplex_rows(&mut r, frames, n, 1.3))
                    .unwrap(),
            );
            let scores = DMatrix::from_fn(frames, n, |_, _| normal(&mut r));
            log_resp.push(log_normalize_rows(&scores));
        }
        let cal = if k % 2 == 0 {
            CalibrationParams::new(
                CalibrationScale::Scalar(0.7 + 0.6 * r.random::<f64>()),
                DVector::from_fn(n, |_, _| 0.4 * normal(&mut r)),
            )
            .unwrap()
        } else {
            CalibrationParams::new(
                CalibrationScale::PerComponent(DVector::from_fn(n, |_, _| {
                    0.6 + 0.8 * r.random::<f64>()
                })),
                DVector::from_fn(n, |_, _| 0.4 * normal(&mut r)),
            )
            .unwrap()
        };

        let analytic = flat_gradient(&calibration::gradient(&raws, &log_resp, &cal).unwrap());
        for (coord, &g) in analytic.iter().enumerate() {
            let up = calibration::objective(&raws, &log_resp, &perturbed(&cal, coord, h)).unwrap();
            let dn = calibration::objective(&raws, &log_resp, &perturbed(&cal, coord, -h)).unwrap();
            let fd = (up - dn) / (2.0 * h);
            let rel = (g - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(rel);
            checks += 1;
            assert!(
                rel <= 1e-5,
                "instance {k} (N={n}) coordinate {coord}: analytic {g} vs finite difference {fd}"
            );
        }
    }
    println!(
        "criterion 05 calibration gradient vs finite differences: PASS ({checks} coordinates, worst relative error {worst:.2e})"
    );
}

// Criterion 6. When target responsibilities are an exact calibration of the
// raw posteriors, the optimizer recovers the planted scale and offsets.
#[test]
fn criterion_06_planted_calibration_recovered() {
    let n = 4;
    let alpha_true = 2.0;
    let beta_true = DVector::from_vec(vec![0.6f64, -0.2, -0.1, -0.3]);
    assert!(beta_true.sum().abs() < 1e-12);

    let mut r = rng(6000);
    let mut raws = Vec::new();
    let mut log_resp = Vec::new();
    for s in 0..2 {
        let frames = 40;
        let raw = simplex_rows(&mut r, frames, n, 1.2);
        let mut scores = DMatrix::zeros(frames, n);
        for t in 0..frames {
            for i in 0..n {
                scores[(t, i)] = alpha_true * raw[(t, i)].ln() + beta_true[i];
            }
        }
        log_resp.push(log_normalize_rows(&scores));
        raws.push(RawPosteriors::from_probs(format!("s{s}"), raw).unwrap());
    }

    let opts = OptimizeOptions {
        gradient_tolerance_per_frame: 1e-10,
        max_iterations: 500,
        memory: 10,
    };
    let (cal, report) = calibration::optimize(&raws, &log_resp, &CalibrationParams::identity(n), &opts).unwrap();
    let alpha = match cal.scale {
        CalibrationScale::Scalar(a) => a,
        CalibrationScale::PerComponent(_) => panic!("scalar start stays scalar"),
    };
    let da = (alpha - alpha_true).abs();
    let db = (&cal.offsets - &beta_true).abs().max();
    assert!(da < 1e-3, "recovered alpha {alpha} (error {da:.2e})");
    assert!(db < 1e-3, "recovered offsets {:?} (max error {db:.2e})", cal.offsets.as_slice());
    assert!(report.objective_after >= report.objective_before);
    println!(
        "criterion 06 planted calibration recovered: PASS (alpha error {da:.2e}, max offset error {db:.2e}, {} iterations)",
        report.iterations
    );
}

// Criterion 7. Running calibration never lowers the total bound, whether the
// raw posteriors are nearly exact or heavily corrupted.
#[test]
fn criterion_07_calibration_never_hurts() {
    let dims = ModelDims::new(3, 4, 2).unwrap();
    let truth = random_params(dims, CovarianceMode::Diagonal, 0.5, 7000).unwrap();
    let data = sample_dataset(&truth, 50, 60, 7000).unwrap();
    let proj = PrecomputedProjections::new(&truth).unwrap();
    let mode = truth.covariance_mode();

    let mut lines = Vec::new();
    for (label, temperature) in [("clean", 0.1), ("noisy", 1.0)] {
        let raws: Vec<RawPosteriors> = data
            .iter()
            .enumerate()
            .map(|(s, (seg, truth_s))| {
                let probs = ivector::model::noisy_path_posteriors(
                    &truth_s.path,
                    3,
                    temperature,
                    item_seed(7001, s as u64),
                )
                .unwrap();
                RawPosteriors::from_probs(seg.segment_id.clone(), probs).unwrap()
            })
            .collect();

        // total bound at a calibration, with the latent posterior re-solved
        let total_at = |cal: &CalibrationParams| -> (f64, Vec<IVectorPosterior>) {
            let mut total = 0.0;
            let mut posts = Vec::new();
            for ((seg, _), raw) in data.iter().zip(&raws) {
                let resp = apply_calibration(raw, cal).unwrap();
                let stats = accumulate(seg, &resp, &truth.means, mode).unwrap();
                let post = IVectorPosterior::from_stats(&stats, &proj).unwrap();
                total += elbo(&resp, &stats, &post, &truth, &proj).unwrap();
                posts.push(post);
            }
            (total, posts)
        };

        let identity = CalibrationParams::identity(3);
        let (before, posts) = total_at(&identity);
        let log_resp: Vec<DMatrix<f64>> = data
            .iter()
            .zip(&posts)
            .map(|((seg, _), post)| {
                log_normalize_rows(&expected_log_likelihoods(seg, post, &truth, &proj).unwrap())
            })
            .collect();
        let (cal, _) =
            calibration::optimize(&raws, &log_resp, &identity, &OptimizeOptions::default()).unwrap();
        let (after, _) = total_at(&cal);

        let tol = 1e-9 * before.abs().max(1.0);
        assert!(
            after >= before - tol,
            "{label}: bound fell from {before} to {after}"
        );
        lines.push(format!("{label}: {before:.3} -> {after:.3}"));
    }
    println!("criterion 07 calibration never hurts: PASS ({})", lines.join("; "));
}

// Criterion 8. With oracle responsibilities the learned loadings span the
// planted subspace: largest principal angle below 15 degrees.
#[test]
fn criterion_08_subspace_recovery() {
    let (truth, data) = standard_set();
    let segs: Vec<SegmentFeatures> = data.iter().map(|(s, _)| s.clone()).collect();
    let resps: Vec<Responsibilities> = data
        .iter()
        .map(|(seg, t)| Responsibilities::one_hot(seg.segment_id.clone(), &t.path, 4).unwrap())
        .collect();

    let mut cfg = TrainConfig::new(Recipe::Phonetic, 2);
    cfg.iterations = 20;
    cfg.min_improvement_per_frame = 0.0;
    cfg.reproducible = true;
    cfg.seed = 8;
    let outcome = train(&segs, None, RespSource::Fixed(resps), &cfg).unwrap();

    let stack = |params: &ModelParams| -> DMatrix<f64> {
        let (n, d, m) = (4, 5, 2);
        let mut out = DMatrix::zeros(n * d, m);
        for i in 0..n {
            out.view_mut((i * d, 0), (d, m)).copy_from(&params.loadings[i]);
        }
        out
    };
    let q_true = stack(&truth).qr().q();
    let q_learned = stack(&outcome.params).qr().q();
    let overlap = q_true.transpose() * q_learned;
    let sigma_min = overlap
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
        .clamp(-1.0, 1.0);
    let angle = sigma_min.acos().to_degrees();
    assert!(angle < 15.0, "largest principal angle {angle:.2} degrees");
    println!("criterion 08 subspace recovery: PASS (largest principal angle {angle:.2} degrees)");
}

// Criterion 9. Plain GMM training never lowers its bound, and aligning to
// the model's own posteriors makes the bound tight against the exact
// mixture log likelihood.
#[test]
fn criterion_09_gmm_baseline() {
    let mut lines = Vec::new();
    for (mode, seed) in [(CovarianceMode::Diagonal, 9000u64), (CovarianceMode::Full, 9001)] {
        let dims = ModelDims::new(3, 3, 2).unwrap();
        let gen = random_params(dims, mode, 0.0, seed).unwrap();
        let data = sample_dataset(&gen, 60, 50, seed).unwrap();
        let segs: Vec<SegmentFeatures> = data.into_iter().map(|(s, _)| s).collect();

        let mut cfg = UbmConfig::new(3);
        cfg.iterations = 12;
        cfg.seed = seed;
        cfg.mode = mode;
        cfg.ivector_dim = 2;
        let (ubm, trace) = train_ubm(&segs, &cfg).unwrap();
        assert!(trace.len() >= 12);
        for w in trace.windows(2) {
            let tol = 1e-8 * w[0].abs().max(1.0);
            assert!(w[1] >= w[0] - tol, "bound fell from {} to {}", w[0], w[1]);
        }

        let mut worst = 0.0f64;
        for seg in segs.iter().take(5) {
            let resp = align(&ubm, seg).unwrap();
            let lb = lower_bound(&ubm, seg, &resp).unwrap();
            let ll = log_likelihood(&ubm, seg).unwrap();
            let gap = (lb - ll).abs() / ll.abs().max(1.0);
            worst = worst.max(gap);
            assert!(gap <= 1e-9, "alignment bound {lb} vs exact {ll}");
        }
        lines.push(format!("{}: final {:.3}, tightness {worst:.2e}", mode.as_str(), trace.last().unwrap()));
    }
    println!("criterion 09 gmm baseline: PASS ({})", lines.join("; "));
}

// Criterion 10. All four file formats reproduce their inputs bit for bit on
// randomized cases: features, sparse posteriors, model directories, and
// extracted vectors in both text and binary form.
#[test]
fn criterion_10_format_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let mut r = rng(10_000);
    let cases = 1000usize;

    // features: random shapes and magnitudes, all values f32-representable
    let feat_path = tmp.path().join("case.feat");
    for c in 0..cases {
        let frames = 1 + c % 6;
        let d = 1 + c % 5;
        let scale = [1.0f64, 1e-20, 1e20, 1e-38][c % 4];
        let m = DMatrix::from_fn(frames, d, |_, _| (scale * normal(&mut r)) as f32 as f64);
        let seg = SegmentFeatures::new(format!("c{c}"), m).unwrap();
        io::write_features(&feat_path, &seg).unwrap();
        let back = io::read_features(&feat_path, &seg.segment_id).unwrap();
        assert_eq!(back.frames.shape(), seg.frames.shape());
        for (a, b) in seg.frames.iter().zip(back.frames.iter()) {
            assert_eq!((*a as f32).to_bits(), (*b as f32).to_bits(), "feature case {c}");
        }
    }

    // sparse posteriors: random support per frame, probabilities normalized
    let post_path = tmp.path().join("case.post");
    for c in 0..cases {
        let n = 2 + c % 6;
        let frames = 1 + c % 5;
        let mut sparse = Vec::with_capacity(frames);
        for _ in 0..frames {
            let k = 1 + r.random_range(0..n);
            let mut idx: Vec<u32> = (0..n as u32).collect();
            for i in 0..k {
                let j = i + r.random_range(0..(n - i));
                idx.swap(i, j);
            }
            idx.truncate(k);
            idx.sort_unstable();
            let raw: Vec<f64> = (0..k).map(|_| 0.05 + r.random::<f64>()).collect();
            let sum: f64 = raw.iter().sum();
            sparse.push(
                idx.into_iter()
                    .zip(raw)
                    .map(|(i, v)| (i, (v / sum) as f32))
                    .collect::<Vec<_>>(),
            );
        }
        io::write_posteriors(&post_path, n as u32, &sparse).unwrap();
        let (n_back, back) = io::read_posteriors_sparse(&post_path).unwrap();
        assert_eq!(n_back, n as u32);
        assert_eq!(back.len(), sparse.len());
        for (fa, fb) in sparse.iter().zip(&back) {
            assert_eq!(fa.len(), fb.len());
            for ((ia, pa), (ib, pb)) in fa.iter().zip(fb) {
                assert_eq!(ia, ib, "posterior case {c}");
                assert_eq!(pa.to_bits(), pb.to_bits(), "posterior case {c}");
            }
        }
    }

    // model directories: both covariance modes, all calibration shapes
    for c in 0..cases {
        let n = 1 + c % 3;
        let d = 1 + c % 3;
        let m = 1 + c % 2;
        let mode = if c % 2 == 0 { CovarianceMode::Diagonal } else { CovarianceMode::Full };
        let params = random_params(ModelDims::new(n, d, m).unwrap(), mode, 0.5, 10_100 + c as u64).unwrap();
        let cal = match c % 3 {
            0 => None,
            1 => Some(
                CalibrationParams::new(
                    CalibrationScale::Scalar(0.5 + r.random::<f64>()),
                    DVector::from_fn(n, |_, _| 0.3 * normal(&mut r)),
                )
                .unwrap(),
            ),
            _ => Some(
                CalibrationParams::new(
                    CalibrationScale::PerComponent(DVector::from_fn(n, |_, _| {
                        0.5 + r.random::<f64>()
                    })),
                    DVector::from_fn(n, |_, _| 0.3 * normal(&mut r)),
                )
                .unwrap(),
            ),
        };
        let dir = tmp.path().join(format!("model{c}"));
        io::write_model(&dir, &params, cal.as_ref()).unwrap();
        let (back, cal_back) = io::read_model(&dir).unwrap();
        assert_eq!(back.dims, params.dims);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(params.weights.as_slice()), bits(back.weights.as_slice()));
        assert_eq!(bits(params.means.as_slice()), bits(back.means.as_slice()));
        for i in 0..n {
            match (&params.covariances[i], &back.covariances[i]) {
                (Covariance::Diagonal(a), Covariance::Diagonal(b)) => {
                    assert_eq!(bits(a.as_slice()), bits(b.as_slice()))
                }
                (Covariance::Full(a), Covariance::Full(b)) => {
                    assert_eq!(bits(a.as_slice()), bits(b.as_slice()))
                }
                _ => panic!("covariance mode changed in case {c}"),
            }
            assert_eq!(bits(params.loadings[i].as_slice()), bits(back.loadings[i].as_slice()));
        }
        match (&cal, &cal_back) {
            (None, None) => {}
            (Some(a), Some(b)) => {
                match (&a.scale, &b.scale) {
                    (CalibrationScale::Scalar(x), CalibrationScale::Scalar(y)) => {
                        assert_eq!(x.to_bits(), y.to_bits())
                    }
                    (CalibrationScale::PerComponent(x), CalibrationScale::PerComponent(y)) => {
                        assert_eq!(bits(x.as_slice()), bits(y.as_slice()))
                    }
                    _ => panic!("calibration shape changed in case {c}"),
                }
                assert_eq!(bits(a.offsets.as_slice()), bits(b.offsets.as_slice()));
            }
            _ => panic!("calibration presence changed in case {c}"),
        }
    }

    // extracted vectors: text and binary, with and without covariances
    let text_path = tmp.path().join("case.tsv");
    let bin_path = tmp.path().join("case.ivec");
    for c in 0..cases {
        let m = 1 + c % 4;
        let count = c % 4;
        let entries: Vec<io::IVectorEntry> = (0..count)
            .map(|s| {
                let mean = DVector::from_fn(m, |_, _| 3.0 * normal(&mut r));
                let covariance = if (c + s) % 2 == 0 {
                    let g = DMatrix::from_fn(m, m, |_, _| normal(&mut r));
                    Some(&g + g.transpose())
                } else {
                    None
                };
                io::IVectorEntry { segment_id: format!("seg-{c}.{s}"), mean, covariance }
            })
            .collect();
        // mixed covariance presence is rejected by the writer; make it uniform
        let uniform: Vec<io::IVectorEntry> = if entries.iter().any(|e| e.covariance.is_none()) {
            entries.into_iter().map(|mut e| { e.covariance = None; e }).collect()
        } else {
            entries
        };

        io::write_ivectors_text(&text_path, &uniform).unwrap();
        let back_text = io::read_ivectors_text(&text_path).unwrap();
        io::write_ivectors_binary(&bin_path, &uniform).unwrap();
        let back_bin = io::read_ivectors_binary(&bin_path).unwrap();
        for back in [back_text, back_bin] {
            assert_eq!(back.len(), uniform.len());
            for (a, b) in uniform.iter().zip(&back) {
                assert_eq!(a.segment_id, b.segment_id);
                let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a.mean.as_slice()), bits(b.mean.as_slice()), "ivector case {c}");
                match (&a.covariance, &b.covariance) {
                    (None, None) => {}
                    (Some(x), Some(y)) => assert_eq!(bits(x.as_slice()), bits(y.as_slice())),
                    _ => panic!("covariance presence changed in case {c}"),
                }
            }
        }
    }

    println!(
        "criterion 10 format round trips: PASS ({cases} cases each for features, posteriors, models, ivectors)"
    );
}
