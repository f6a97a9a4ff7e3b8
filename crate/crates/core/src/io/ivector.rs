//! Extracted i-vector files. Two equivalent encodings:
//!
//! * text: a header line `IVTX <version> <dim> <mean|mean+cov>`, then one
//!   tab-separated row per segment with the id, the posterior mean, and
//!   optionally the upper triangle of the posterior covariance, all printed
//!   to 17 significant digits so f64 values survive exactly;
//! * binary: magic "IVIV", u32 version, u32 dim, u32 covariance flag,
//!   u64 segment count, then per segment a length-prefixed UTF-8 id and the
//!   same values as little-endian f64. Bit-exact round trip.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::io::bytes::{read_file, read_text, write_file, write_text, ByteReader, ByteWriter};

const MAGIC: &[u8; 4] = b"IVIV";
const VERSION: u32 = 1;
const TEXT_HEADER: &str = "IVTX";

#[derive(Debug, Clone, PartialEq)]
pub struct IVectorEntry {
    pub segment_id: String,
    pub mean: DVector<f64>,
    /// Posterior covariance, symmetric; stored as its upper triangle.
    pub covariance: Option<DMatrix<f64>>,
}

fn validate(entries: &[IVectorEntry], path: &Path) -> Result<(usize, bool)> {
    let Some(first) = entries.first() else {
        return Ok((0, false));
    };
    let dim = first.mean.len();
    let with_cov = first.covariance.is_some();
    for (row, e) in entries.iter().enumerate() {
        let ragged = e.mean.len() != dim
            || e.covariance.is_some() != with_cov
            || e.covariance.as_ref().is_some_and(|c| c.nrows() != dim || c.ncols() != dim);
        if ragged {
            return Err(Error::format(
                path,
                (row + 1) as u64,
                format!("ragged row for segment {:?}", e.segment_id),
            ));
        }
        if e.segment_id.is_empty() || e.segment_id.contains(['\t', '\n', '\r']) {
            return Err(Error::format(
                path,
                (row + 1) as u64,
                format!("segment id {:?} is empty or contains separators", e.segment_id),
            ));
        }
        if e.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(
                path,
                (row + 1) as u64,
                format!("non-finite mean for segment {:?}", e.segment_id),
            ));
        }
        if let Some(c) = &e.covariance {
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::format(
                    path,
                    (row + 1) as u64,
                    format!("non-finite covariance for segment {:?}", e.segment_id),
                ));
            }
            let scale = c.amax().max(1.0);
            for i in 0..dim {
                for j in (i + 1)..dim {
                    if (c[(i, j)] - c[(j, i)]).abs() > 1e-9 * scale {
                        return Err(Error::format(
                            path,
                            (row + 1) as u64,
                            format!("asymmetric covariance for segment {:?}", e.segment_id),
                        ));
                    }
                }
            }
        }
    }
    Ok((dim, with_cov))
}

fn upper_triangle(c: &DMatrix<f64>) -> Vec<f64> {
    let d = c.nrows();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in i..d {
            out.push(c[(i, j)]);
        }
    }
    out
}

fn from_upper_triangle(vals: &[f64], dim: usize) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(dim, dim);
    let mut k = 0;
    for i in 0..dim {
        for j in i..dim {
            c[(i, j)] = vals[k];
            c[(j, i)] = vals[k];
            k += 1;
        }
    }
    c
}

pub fn write_ivectors_text(path: &Path, entries: &[IVectorEntry]) -> Result<()> {
    let (dim, with_cov) = validate(entries, path)?;
    let mut out = String::new();
    let kind = if with_cov { "mean+cov" } else { "mean" };
    let _ = writeln!(out, "{TEXT_HEADER} {VERSION} {dim} {kind}");
    for e in entries {
        out.push_str(&e.segment_id);
        for v in e.mean.iter() {
            let _ = write!(out, "\t{v:.16e}");
        }
        if let Some(c) = &e.covariance {
            for v in upper_triangle(c) {
                let _ = write!(out, "\t{v:.16e}");
            }
        }
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn read_ivectors_text(path: &Path) -> Result<Vec<IVectorEntry>> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format(path, 0, "empty file, expected header".to_string()))?;
    let parts: Vec<&str> = header.split(' ').collect();
    if parts.len() != 4 || parts[0] != TEXT_HEADER {
        return Err(Error::format(path, 1, format!("bad header {header:?}")));
    }
    if parts[1] != VERSION.to_string() {
        return Err(Error::format(
            path,
            1,
            format!("unsupported version {:?}, expected {VERSION}", parts[1]),
        ));
    }
    let dim: usize = parts[2]
        .parse()
        .map_err(|_| Error::format(path, 1, format!("bad dim {:?}", parts[2])))?;
    let with_cov = match parts[3] {
        "mean" => false,
        "mean+cov" => true,
        other => return Err(Error::format(path, 1, format!("bad kind {other:?}"))),
    };
    let cov_len = if with_cov { dim * (dim + 1) / 2 } else { 0 };
    let mut entries = Vec::new();
    for (lineno, line) in lines {
        let line_num = (lineno + 1) as u64;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 1 + dim + cov_len {
            return Err(Error::format(
                path,
                line_num,
                format!(
                    "ragged row: {} fields, expected {}",
                    fields.len(),
                    1 + dim + cov_len
                ),
            ));
        }
        let mut vals = Vec::with_capacity(dim + cov_len);
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| {
                Error::format(path, line_num, format!("bad float {f:?}"))
            })?;
            vals.push(v);
        }
        let mean = DVector::from_row_slice(&vals[..dim]);
        let covariance = with_cov.then(|| from_upper_triangle(&vals[dim..], dim));
        entries.push(IVectorEntry {
            segment_id: fields[0].to_string(),
            mean,
            covariance,
        });
    }
    validate(&entries, path)?;
    Ok(entries)
}

pub fn write_ivectors_binary(path: &Path, entries: &[IVectorEntry]) -> Result<()> {
    let (dim, with_cov) = validate(entries, path)?;
    let mut w = ByteWriter::new();
    w.magic(MAGIC);
    w.u32(VERSION);
    w.u32(dim as u32);
    w.u32(with_cov as u32);
    w.u64(entries.len() as u64);
    for e in entries {
        let id = e.segment_id.as_bytes();
        w.u32(id.len() as u32);
        w.bytes(id);
        for v in e.mean.iter() {
            w.f64(*v);
        }
        if let Some(c) = &e.covariance {
            for v in upper_triangle(c) {
                w.f64(v);
            }
        }
    }
    write_file(path, &w.into_inner())
}

pub fn read_ivectors_binary(path: &Path) -> Result<Vec<IVectorEntry>> {
    let buf = read_file(path)?;
    let mut r = ByteReader::new(&buf, path);
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.error_at(4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let dim = r.u32("dim")? as usize;
    let cov_flag = r.u32("covariance flag")?;
    if cov_flag > 1 {
        return Err(r.error_at(12, format!("bad covariance flag {cov_flag}")));
    }
    let with_cov = cov_flag == 1;
    let count = r.u64("segment count")? as usize;
    let cov_len = if with_cov { dim * (dim + 1) / 2 } else { 0 };
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let id_at = r.offset();
        let id_len = r.u32("id length")? as usize;
        let id_bytes = r.bytes(id_len, "segment id")?;
        let segment_id = std::str::from_utf8(id_bytes)
            .map_err(|_| r.error_at(id_at, "segment id is not UTF-8".to_string()))?
            .to_string();
        let mut mean = DVector::zeros(dim);
        for k in 0..dim {
            mean[k] = r.f64("mean value")?;
        }
        let covariance = if with_cov {
            let mut vals = Vec::with_capacity(cov_len);
            for _ in 0..cov_len {
                vals.push(r.f64("covariance value")?);
            }
            Some(from_upper_triangle(&vals, dim))
        } else {
            None
        };
        entries.push(IVectorEntry {
            segment_id,
            mean,
            covariance,
        });
    }
    r.finish()?;
    validate(&entries, path)?;
    Ok(entries)
}
