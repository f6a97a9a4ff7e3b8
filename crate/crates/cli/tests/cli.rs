//! End-to-end tests of the command line interface: pipelines over real
//! files, exit codes, determinism, and agreement with the library API.

use std::fs;
use std::path::Path;
use std::process::Output;

use nalgebra::DVector;

use ivector::calibration::CalibrationScale;
use ivector::gmm::align;
use ivector::io;
use ivector::posterior::{
    elbo, expected_log_likelihoods, optimal_responsibilities, IVectorPosterior,
    PrecomputedProjections,
};
use ivector::stats::accumulate;

fn ivector_cmd(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_ivector"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> (String, String) {
    let out = ivector_cmd(args);
    assert!(
        out.status.success(),
        "command {:?} failed with {:?}\nstderr: {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    (
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

fn assert_exit(args: &[&str], code: i32) -> String {
    let out = ivector_cmd(args);
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(
        out.status.code(),
        Some(code),
        "command {args:?} expected exit {code}\nstderr: {stderr}"
    );
    stderr
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth_small(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "synth",
        "--out",
        s(dir),
        "--components",
        "3",
        "--feature-dim",
        "4",
        "--ivector-dim",
        "2",
        "--segments",
        "20",
        "--frames",
        "40",
        "--seed",
        "11",
    ];
    args.extend_from_slice(extra);
    run_ok(&args);
}

fn total_from_elbo_output(stdout: &str) -> (f64, f64) {
    let mut sum = 0.0;
    let mut total = f64::NAN;
    for line in stdout.lines() {
        let (id, value) = line.split_once('\t').expect("tab separated");
        let v: f64 = value.parse().unwrap();
        if id == "TOTAL" {
            total = v;
        } else {
            sum += v;
        }
    }
    assert!(total.is_finite(), "missing TOTAL row");
    (total, sum)
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        synth_small(dir, &["--posteriors", "noisy"]);
    }
    for rel in [
        "data.tsv",
        "seg00000.feat",
        "seg00019.post",
        "truth-ivectors.tsv",
        "truth-model/model.meta",
        "truth-model/params.bin",
    ] {
        let x = fs::read(a.join(rel)).unwrap();
        let y = fs::read(b.join(rel)).unwrap();
        assert_eq!(x, y, "{rel} differs between identical synth runs");
    }
    // refusing to overwrite is a usage error; --force succeeds
    let out = ivector_cmd(&["synth", "--out", s(&a)]);
    assert_eq!(out.status.code(), Some(2));
    synth_small(&a, &["--force"]);
}

#[test]
fn pipeline_trains_extracts_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data, &[]);
    let manifest = data.join("data.tsv");

    let ubm = tmp.path().join("ubm");
    let (_, stderr) = run_ok(&[
        "train-ubm",
        "--manifest",
        s(&manifest),
        "--out",
        s(&ubm),
        "--components",
        "3",
        "--iterations",
        "4",
        "--ivector-dim",
        "2",
    ]);
    assert!(stderr.contains("phase=ubm"), "missing progress trace: {stderr}");

    let model = tmp.path().join("model");
    let report = tmp.path().join("report.txt");
    let train_args = [
        "train",
        "--manifest",
        s(&manifest),
        "--recipe",
        "classical",
        "--model-in",
        s(&ubm),
        "--out",
        s(&model),
        "--iterations",
        "3",
        "--report",
        s(&report),
        "--quiet",
        "--reproducible",
    ];
    run_ok(&train_args);
    let report_text = fs::read_to_string(&report).unwrap();
    assert!(report_text.contains("recipe = classical"));
    assert!(report_text.contains("iterations_run = 3"));

    // identical invocation reproduces the model and the report byte for byte
    let model2 = tmp.path().join("model2");
    let report2 = tmp.path().join("report2.txt");
    let mut again: Vec<&str> = train_args.to_vec();
    again[8] = s(&model2);
    again[12] = s(&report2);
    run_ok(&again);
    assert_eq!(
        fs::read(model.join("params.bin")).unwrap(),
        fs::read(model2.join("params.bin")).unwrap()
    );
    assert_eq!(fs::read(&report).unwrap(), fs::read(&report2).unwrap());

    let vectors = tmp.path().join("vectors.tsv");
    run_ok(&[
        "extract",
        "--manifest",
        s(&manifest),
        "--model",
        s(&model),
        "--out",
        s(&vectors),
        "--covariances",
    ]);
    let entries = io::read_ivectors_text(&vectors).unwrap();
    assert_eq!(entries.len(), 20);
    assert!(entries.iter().all(|e| e.covariance.is_some()));

    // elbo rows are consistent with their printed total
    let (stdout, _) = run_ok(&["elbo", "--manifest", s(&manifest), "--model", s(&model)]);
    let (total, sum) = total_from_elbo_output(&stdout);
    assert!((total - sum).abs() <= 1e-9 * total.abs().max(1.0));

    // and the total matches the library evaluated on the same files
    let (params, cal) = io::read_model(&model).unwrap();
    assert!(cal.is_none());
    let proj = PrecomputedProjections::new(&params).unwrap();
    let segs = io::read_manifest(&manifest).unwrap().load_features().unwrap();
    let mut lib_total = 0.0;
    for seg in &segs {
        let resp = align(&params, seg).unwrap();
        let stats = accumulate(seg, &resp, &params.means, params.covariance_mode()).unwrap();
        let post = IVectorPosterior::from_stats(&stats, &proj).unwrap();
        lib_total += elbo(&resp, &stats, &post, &params, &proj).unwrap();
    }
    assert!(
        (total - lib_total).abs() <= 1e-12 * lib_total.abs(),
        "cli total {total} vs library total {lib_total}"
    );
}

#[test]
fn elbo_of_empty_manifest_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data, &[]);
    let manifest = tmp.path().join("empty.tsv");
    fs::write(&manifest, "").unwrap();
    let (stdout, _) = run_ok(&[
        "elbo",
        "--manifest",
        s(&manifest),
        "--model",
        s(&data.join("truth-model")),
    ]);
    let (total, sum) = total_from_elbo_output(&stdout);
    assert_eq!(total, 0.0);
    assert_eq!(sum, 0.0);
}

#[test]
fn exit_codes_separate_usage_data_and_numerical_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data, &[]);
    let manifest = data.join("data.tsv");
    let truth_model = data.join("truth-model");

    // usage: unknown recipe, unknown flag, unknown config key
    assert_exit(
        &["train", "--manifest", s(&manifest), "--recipe", "nonsense", "--out", s(&tmp.path().join("x"))],
        2,
    );
    assert_exit(&["extract", "--manifest", s(&manifest), "--no-such-flag"], 2);
    let cfg = tmp.path().join("bad.conf");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    assert_exit(
        &["train", "--manifest", s(&manifest), "--recipe", "phonetic-joint", "--config", s(&cfg), "--out", s(&tmp.path().join("y"))],
        2,
    );

    // data: missing manifest, truncated feature file
    assert_exit(
        &["elbo", "--manifest", s(&tmp.path().join("missing.tsv")), "--model", s(&truth_model)],
        3,
    );
    let feat = data.join("seg00000.feat");
    let bytes = fs::read(&feat).unwrap();
    fs::write(&feat, &bytes[..bytes.len() - 3]).unwrap();
    let stderr = assert_exit(&["elbo", "--manifest", s(&manifest), "--model", s(&truth_model)], 3);
    assert!(stderr.contains("seg00000"), "error does not name the file: {stderr}");
    fs::write(&feat, &bytes).unwrap();

    // numerical: a model whose stored covariance is not positive definite
    let one = tmp.path().join("one");
    run_ok(&[
        "synth", "--out", s(&one), "--components", "1", "--feature-dim", "1",
        "--ivector-dim", "1", "--segments", "2", "--frames", "5",
    ]);
    let blob_path = one.join("truth-model/params.bin");
    let mut blob = fs::read(&blob_path).unwrap();
    // layout for a 1x1x1 diagonal model: weight, mean, covariance, loading
    assert_eq!(blob.len(), 32);
    blob[16..24].copy_from_slice(&(-1.0f64).to_le_bytes());
    fs::write(&blob_path, &blob).unwrap();
    assert_exit(
        &["elbo", "--manifest", s(&one.join("data.tsv")), "--model", s(&one.join("truth-model"))],
        4,
    );
}

#[test]
fn extract_without_loadings_gives_prior_posteriors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data, &["--loading-sd", "0"]);
    let vectors = tmp.path().join("vectors.tsv");
    run_ok(&[
        "extract",
        "--manifest",
        s(&data.join("data.tsv")),
        "--model",
        s(&data.join("truth-model")),
        "--out",
        s(&vectors),
        "--covariances",
    ]);
    for e in io::read_ivectors_text(&vectors).unwrap() {
        assert!(e.mean.iter().all(|&v| v == 0.0), "nonzero mean {:?}", e.mean.as_slice());
        let c = e.covariance.unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(c[(i, j)], if i == j { 1.0 } else { 0.0 });
            }
        }
    }
}

#[test]
fn phonetic_recipes_require_posterior_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data, &[]);
    let stderr = assert_exit(
        &[
            "train",
            "--manifest",
            s(&data.join("data.tsv")),
            "--recipe",
            "phonetic",
            "--out",
            s(&tmp.path().join("m")),
        ],
        3,
    );
    assert!(stderr.contains("posterior"), "unhelpful error: {stderr}");
}

#[test]
fn config_file_sets_defaults_and_flags_override() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data, &["--posteriors", "noisy"]);
    let manifest = data.join("data.tsv");
    let cfg = tmp.path().join("train.conf");
    fs::write(&cfg, "recipe = phonetic-joint\niterations = 3\nquiet = true\n").unwrap();

    let report = tmp.path().join("r1.txt");
    run_ok(&[
        "train", "--manifest", s(&manifest), "--config", s(&cfg),
        "--out", s(&tmp.path().join("m1")), "--report", s(&report),
    ]);
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("recipe = phonetic-joint"));
    assert!(text.contains("iterations_run = 3"));

    let report2 = tmp.path().join("r2.txt");
    run_ok(&[
        "train", "--manifest", s(&manifest), "--config", s(&cfg), "--iterations", "2",
        "--out", s(&tmp.path().join("m2")), "--report", s(&report2),
    ]);
    assert!(fs::read_to_string(&report2).unwrap().contains("iterations_run = 2"));
}

#[test]
fn train_ubm_rejects_more_components_than_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    run_ok(&[
        "synth", "--out", s(&data), "--components", "1", "--feature-dim", "2",
        "--ivector-dim", "1", "--segments", "2", "--frames", "5",
    ]);
    let stderr = assert_exit(
        &[
            "train-ubm", "--manifest", s(&data.join("data.tsv")),
            "--out", s(&tmp.path().join("u")), "--components", "50",
        ],
        2,
    );
    assert!(stderr.contains("50"), "error does not state the count: {stderr}");
}

// Posterior files that already equal the model's own optimal responsibilities
// leave calibration nothing to do: the fit comes back as the identity map.
#[test]
fn calibrate_is_identity_on_self_consistent_posteriors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    run_ok(&[
        "synth", "--out", s(&data), "--components", "3", "--feature-dim", "4",
        "--ivector-dim", "2", "--segments", "10", "--frames", "30", "--seed", "11",
    ]);
    let manifest = data.join("data.tsv");
    let model_dir = data.join("truth-model");

    let (params, _) = io::read_model(&model_dir).unwrap();
    let proj = PrecomputedProjections::new(&params).unwrap();
    let mode = params.covariance_mode();
    let mut entries = Vec::new();
    for seg in io::read_manifest(&manifest).unwrap().load_features().unwrap() {
        // mean-field fixed point: responsibilities optimal for the latent
        // posterior they themselves induce
        let mut resp = align(&params, &seg).unwrap();
        for _ in 0..200 {
            let stats = accumulate(&seg, &resp, &params.means, mode).unwrap();
            let post = IVectorPosterior::from_stats(&stats, &proj).unwrap();
            let ell = expected_log_likelihoods(&seg, &post, &params, &proj).unwrap();
            let next = optimal_responsibilities(seg.segment_id.clone(), &ell).unwrap();
            let moved = (&next.probs - &resp.probs).amax();
            resp = next;
            if moved < 1e-13 {
                break;
            }
        }
        let name = format!("{}.post", seg.segment_id);
        io::write_posteriors(&data.join(&name), 3, &io::sparsify(&resp.probs, 0.0)).unwrap();
        entries.push(io::ManifestEntry {
            segment_id: seg.segment_id.clone(),
            feature: format!("{}.feat", seg.segment_id),
            posterior: Some(name),
        });
    }
    io::write_manifest(&manifest, &entries).unwrap();

    let out = tmp.path().join("calibrated");
    run_ok(&["calibrate", "--manifest", s(&manifest), "--model", s(&model_dir), "--out", s(&out)]);
    let (_, cal) = io::read_model(&out).unwrap();
    let cal = cal.expect("calibration written");
    let alpha = match cal.scale {
        CalibrationScale::Scalar(a) => a,
        CalibrationScale::PerComponent(_) => panic!("default fit is scalar"),
    };
    assert!((alpha - 1.0).abs() < 1e-3, "scale drifted to {alpha}");
    assert!(cal.offsets.amax() < 1e-3, "offsets drifted to {:?}", cal.offsets.as_slice());
}

#[test]
fn calibrate_improves_the_reported_bound() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data, &["--posteriors", "noisy", "--temperature", "1.0"]);
    let manifest = data.join("data.tsv");

    let model = tmp.path().join("model");
    run_ok(&[
        "train", "--manifest", s(&manifest), "--recipe", "phonetic-joint",
        "--iterations", "3", "--out", s(&model), "--quiet",
    ]);
    let (before_out, _) = run_ok(&["elbo", "--manifest", s(&manifest), "--model", s(&model)]);
    let (before, _) = total_from_elbo_output(&before_out);

    let calibrated = tmp.path().join("calibrated");
    let (stdout, _) = run_ok(&[
        "calibrate", "--manifest", s(&manifest), "--model", s(&model), "--out", s(&calibrated),
    ]);
    assert!(stdout.contains("objective_before"), "missing summary: {stdout}");
    let (after_out, _) = run_ok(&["elbo", "--manifest", s(&manifest), "--model", s(&calibrated)]);
    let (after, _) = total_from_elbo_output(&after_out);
    assert!(
        after >= before - 1e-9 * before.abs().max(1.0),
        "calibration lowered the bound: {before} -> {after}"
    );

    // the calibrated model reloads with its calibration intact
    let (_, cal) = io::read_model(&calibrated).unwrap();
    assert!(cal.is_some());

    // the calibrated training recipe also persists its fitted calibration
    let trained = tmp.path().join("trained-calibrated");
    run_ok(&[
        "train", "--manifest", s(&manifest), "--recipe", "calibrated",
        "--iterations", "2", "--out", s(&trained), "--quiet",
    ]);
    let (_, cal) = io::read_model(&trained).unwrap();
    assert!(cal.is_some(), "calibrated recipe did not store its calibration");
}

#[test]
fn extracted_means_track_the_planted_vectors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    run_ok(&[
        "synth", "--out", s(&data), "--components", "3", "--feature-dim", "5",
        "--ivector-dim", "2", "--segments", "100", "--frames", "80",
        "--loading-sd", "0.6", "--seed", "5",
    ]);
    let vectors = tmp.path().join("vectors.tsv");
    run_ok(&[
        "extract",
        "--manifest",
        s(&data.join("data.tsv")),
        "--model",
        s(&data.join("truth-model")),
        "--out",
        s(&vectors),
    ]);
    let truth = io::read_ivectors_text(&data.join("truth-ivectors.tsv")).unwrap();
    let got = io::read_ivectors_text(&vectors).unwrap();
    assert_eq!(truth.len(), got.len());

    for dim in 0..2 {
        let a = DVector::from_iterator(truth.len(), truth.iter().map(|e| e.mean[dim]));
        let b = DVector::from_iterator(got.len(), got.iter().map(|e| e.mean[dim]));
        // planted vectors are standard normal draws: their empirical mean
        // stays within three standard errors of zero
        assert!(a.mean().abs() < 3.0 / (truth.len() as f64).sqrt());
        let am = a.mean();
        let bm = b.mean();
        let ac = a.map(|v| v - am);
        let bc = b.map(|v| v - bm);
        let corr = ac.dot(&bc) / (ac.norm() * bc.norm());
        let mean_abs = (&a - &b).abs().mean();
        assert!(corr > 0.9, "dimension {dim}: correlation {corr:.3}");
        assert!(mean_abs < 0.35, "dimension {dim}: mean absolute error {mean_abs:.3}");
    }
}
