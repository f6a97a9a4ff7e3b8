//! Model directories: a human-readable metadata file plus one binary blob of
//! all arrays as 64-bit little-endian floats, in the order weights, means,
//! covariances, loadings, calibration scale, calibration offsets. The
//! metadata records dims, covariance mode and the byte offset of every
//! section so the blob can be inspected without this code.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::calibration::{CalibrationParams, CalibrationScale};
use crate::error::{Error, Result};
use crate::io::bytes::{read_file, read_text, write_file, write_text, ByteReader, ByteWriter};
use crate::model::{Covariance, CovarianceMode, ModelDims, ModelParams};

pub const META_FILE: &str = "model.meta";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT: &str = "IVMD";
const VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CalKind {
    None,
    Scalar,
    PerComponent,
}

impl CalKind {
    fn as_str(self) -> &'static str {
        match self {
            CalKind::None => "none",
            CalKind::Scalar => "scalar",
            CalKind::PerComponent => "per-component",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(CalKind::None),
            "scalar" => Some(CalKind::Scalar),
            "per-component" => Some(CalKind::PerComponent),
            _ => None,
        }
    }

    fn scale_floats(self, components: usize) -> usize {
        match self {
            CalKind::None => 0,
            CalKind::Scalar => 1,
            CalKind::PerComponent => components,
        }
    }
}

struct Layout {
    weights: u64,
    means: u64,
    covariances: u64,
    loadings: u64,
    calibration_scale: Option<u64>,
    calibration_offsets: Option<u64>,
    total_bytes: u64,
}

fn layout(dims: ModelDims, mode: CovarianceMode, cal: CalKind) -> Layout {
    let (n, d, m) = (dims.components, dims.feature_dim, dims.ivector_dim);
    let cov_floats = match mode {
        CovarianceMode::Diagonal => n * d,
        CovarianceMode::Full => n * d * d,
    };
    let mut at = 0u64;
    let mut take = |floats: usize| {
        let here = at;
        at += 8 * floats as u64;
        here
    };
    let weights = take(n);
    let means = take(n * d);
    let covariances = take(cov_floats);
    let loadings = take(n * d * m);
    let (cs, co) = match cal {
        CalKind::None => (None, None),
        _ => (
            Some(take(cal.scale_floats(n))),
            Some(take(n)),
        ),
    };
    Layout {
        weights,
        means,
        covariances,
        loadings,
        calibration_scale: cs,
        calibration_offsets: co,
        total_bytes: at,
    }
}

pub fn write_model(
    dir: &Path,
    params: &ModelParams,
    calibration: Option<&CalibrationParams>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dims = params.dims;
    let (n, d, m) = (dims.components, dims.feature_dim, dims.ivector_dim);
    let mode = params.covariance_mode();
    let cal_kind = match calibration {
        None => CalKind::None,
        Some(c) if c.is_per_component() => CalKind::PerComponent,
        Some(_) => CalKind::Scalar,
    };
    if let Some(c) = calibration {
        if c.components() != n {
            return Err(Error::DimensionMismatch {
                context: "calibration in model file".into(),
                expected: format!("{n} components"),
                got: format!("{}", c.components()),
            });
        }
    }
    let lay = layout(dims, mode, cal_kind);

    let mut w = ByteWriter::new();
    for i in 0..n {
        w.f64(params.weights[i]);
    }
    for i in 0..n {
        for k in 0..d {
            w.f64(params.means[(i, k)]);
        }
    }
    for cov in &params.covariances {
        match cov {
            Covariance::Diagonal(v) => {
                for k in 0..d {
                    w.f64(v[k]);
                }
            }
            Covariance::Full(c) => {
                for r in 0..d {
                    for k in 0..d {
                        w.f64(c[(r, k)]);
                    }
                }
            }
        }
    }
    for t in &params.loadings {
        for r in 0..d {
            for c in 0..m {
                w.f64(t[(r, c)]);
            }
        }
    }
    if let Some(c) = calibration {
        match &c.scale {
            CalibrationScale::Scalar(a) => w.f64(*a),
            CalibrationScale::PerComponent(a) => {
                for i in 0..n {
                    w.f64(a[i]);
                }
            }
        }
        for i in 0..n {
            w.f64(c.offsets[i]);
        }
    }
    let blob = w.into_inner();
    debug_assert_eq!(blob.len() as u64, lay.total_bytes);

    let mut meta = String::new();
    let _ = writeln!(meta, "format = {FORMAT}");
    let _ = writeln!(meta, "version = {VERSION}");
    let _ = writeln!(meta, "components = {n}");
    let _ = writeln!(meta, "feature_dim = {d}");
    let _ = writeln!(meta, "ivector_dim = {m}");
    let _ = writeln!(meta, "covariance = {}", mode.as_str());
    let _ = writeln!(meta, "calibration = {}", cal_kind.as_str());
    let _ = writeln!(meta, "blob = {BLOB_FILE}");
    let _ = writeln!(meta, "offset_weights = {}", lay.weights);
    let _ = writeln!(meta, "offset_means = {}", lay.means);
    let _ = writeln!(meta, "offset_covariances = {}", lay.covariances);
    let _ = writeln!(meta, "offset_loadings = {}", lay.loadings);
    if let (Some(cs), Some(co)) = (lay.calibration_scale, lay.calibration_offsets) {
        let _ = writeln!(meta, "offset_calibration_scale = {cs}");
        let _ = writeln!(meta, "offset_calibration_offsets = {co}");
    }
    let _ = writeln!(meta, "blob_bytes = {}", lay.total_bytes);

    write_file(&dir.join(BLOB_FILE), &blob)?;
    write_text(&dir.join(META_FILE), &meta)
}

struct Meta {
    entries: Vec<(String, String, u64)>,
}

impl Meta {
    fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line_num = (lineno + 1) as u64;
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format(path, line_num, format!("line {line_num}: expected key = value"))
            })?;
            let key = k.trim().to_string();
            let val = v.trim().to_string();
            if entries.iter().any(|(ek, _, _)| *ek == key) {
                return Err(Error::format(
                    path,
                    line_num,
                    format!("duplicate key {key:?}"),
                ));
            }
            entries.push((key, val, line_num));
        }
        Ok(Meta { entries })
    }

    fn get(&self, key: &str, path: &Path) -> Result<&str> {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, _)| v.as_str())
            .ok_or_else(|| Error::format(path, 0, format!("missing key {key:?}")))
    }

    fn get_u64(&self, key: &str, path: &Path) -> Result<u64> {
        let v = self.get(key, path)?;
        v.parse::<u64>()
            .map_err(|_| Error::format(path, 0, format!("key {key:?}: {v:?} is not an integer")))
    }

    fn check_no_unknown(&self, known: &[&str], path: &Path) -> Result<()> {
        for (k, _, line) in &self.entries {
            if !known.contains(&k.as_str()) {
                return Err(Error::format(path, *line, format!("unknown key {k:?}")));
            }
        }
        Ok(())
    }
}

pub fn read_model(dir: &Path) -> Result<(ModelParams, Option<CalibrationParams>)> {
    let meta_path = dir.join(META_FILE);
    let meta = Meta::parse(&read_text(&meta_path)?, &meta_path)?;

    let format = meta.get("format", &meta_path)?;
    if format != FORMAT {
        return Err(Error::format(
            &meta_path,
            0,
            format!("unknown format {format:?}, expected {FORMAT:?}"),
        ));
    }
    let version = meta.get_u64("version", &meta_path)?;
    if version != VERSION {
        return Err(Error::format(
            &meta_path,
            0,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let n = meta.get_u64("components", &meta_path)? as usize;
    let d = meta.get_u64("feature_dim", &meta_path)? as usize;
    let m = meta.get_u64("ivector_dim", &meta_path)? as usize;
    let dims = ModelDims::new(n, d, m)?;
    let mode = CovarianceMode::parse(meta.get("covariance", &meta_path)?)?;
    let cal_text = meta.get("calibration", &meta_path)?;
    let cal_kind = CalKind::parse(cal_text).ok_or_else(|| {
        Error::format(&meta_path, 0, format!("unknown calibration kind {cal_text:?}"))
    })?;
    let blob_name = meta.get("blob", &meta_path)?.to_string();

    let mut known = vec![
        "format",
        "version",
        "components",
        "feature_dim",
        "ivector_dim",
        "covariance",
        "calibration",
        "blob",
        "offset_weights",
        "offset_means",
        "offset_covariances",
        "offset_loadings",
        "blob_bytes",
    ];
    if cal_kind != CalKind::None {
        known.push("offset_calibration_scale");
        known.push("offset_calibration_offsets");
    }
    meta.check_no_unknown(&known, &meta_path)?;

    let lay = layout(dims, mode, cal_kind);
    let offset_checks = [
        ("offset_weights", lay.weights),
        ("offset_means", lay.means),
        ("offset_covariances", lay.covariances),
        ("offset_loadings", lay.loadings),
    ];
    for (key, expected) in offset_checks {
        let got = meta.get_u64(key, &meta_path)?;
        if got != expected {
            return Err(Error::format(
                &meta_path,
                0,
                format!("{key} = {got} does not match the canonical layout ({expected})"),
            ));
        }
    }
    if let (Some(cs), Some(co)) = (lay.calibration_scale, lay.calibration_offsets) {
        if meta.get_u64("offset_calibration_scale", &meta_path)? != cs
            || meta.get_u64("offset_calibration_offsets", &meta_path)? != co
        {
            return Err(Error::format(
                &meta_path,
                0,
                "calibration offsets do not match the canonical layout".to_string(),
            ));
        }
    }
    let blob_bytes = meta.get_u64("blob_bytes", &meta_path)?;
    if blob_bytes != lay.total_bytes {
        return Err(Error::format(
            &meta_path,
            0,
            format!(
                "blob_bytes = {blob_bytes} inconsistent with dims (expected {})",
                lay.total_bytes
            ),
        ));
    }

    let blob_path = dir.join(&blob_name);
    let blob = read_file(&blob_path)?;
    if blob.len() as u64 != lay.total_bytes {
        return Err(Error::format(
            &blob_path,
            blob.len().min(lay.total_bytes as usize) as u64,
            format!(
                "blob holds {} bytes, metadata dims require {}",
                blob.len(),
                lay.total_bytes
            ),
        ));
    }

    let mut r = ByteReader::new(&blob, &blob_path);
    let mut weights = DVector::zeros(n);
    for i in 0..n {
        weights[i] = r.f64("weight")?;
    }
    let mut means = DMatrix::zeros(n, d);
    for i in 0..n {
        for k in 0..d {
            means[(i, k)] = r.f64("mean")?;
        }
    }
    let mut covariances = Vec::with_capacity(n);
    for _ in 0..n {
        match mode {
            CovarianceMode::Diagonal => {
                let mut v = DVector::zeros(d);
                for k in 0..d {
                    v[k] = r.f64("covariance diagonal")?;
                }
                covariances.push(Covariance::Diagonal(v));
            }
            CovarianceMode::Full => {
                let mut c = DMatrix::zeros(d, d);
                for row in 0..d {
                    for k in 0..d {
                        c[(row, k)] = r.f64("covariance")?;
                    }
                }
                covariances.push(Covariance::Full(c));
            }
        }
    }
    let mut loadings = Vec::with_capacity(n);
    for _ in 0..n {
        let mut t = DMatrix::zeros(d, m);
        for row in 0..d {
            for c in 0..m {
                t[(row, c)] = r.f64("loading")?;
            }
        }
        loadings.push(t);
    }
    let calibration = match cal_kind {
        CalKind::None => None,
        _ => {
            let scale = match cal_kind {
                CalKind::Scalar => CalibrationScale::Scalar(r.f64("calibration scale")?),
                _ => {
                    let mut a = DVector::zeros(n);
                    for i in 0..n {
                        a[i] = r.f64("calibration scale")?;
                    }
                    CalibrationScale::PerComponent(a)
                }
            };
            let mut offsets = DVector::zeros(n);
            for i in 0..n {
                offsets[i] = r.f64("calibration offset")?;
            }
            Some(CalibrationParams::from_canonical(scale, offsets)?)
        }
    };
    r.finish()?;
    let params = ModelParams::new(dims, weights, means, covariances, loadings)?;
    Ok((params, calibration))
}
