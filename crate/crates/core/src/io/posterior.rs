//! Posterior files. Layout POST-v1, little-endian:
//! magic "IVPO", u32 version (1), u32 component count, u64 frame count, then
//! per frame a u32 non-zero count followed by that many (u32 index,
//! f32 probability) pairs with strictly increasing indices. Unlisted entries
//! are zero; the calibration layer floors them on load. Writers must produce
//! rows summing to 1 within 1e-4; readers accept up to 1e-3.

use std::path::Path;

use nalgebra::DMatrix;

use crate::calibration::RawPosteriors;
use crate::error::Result;
use crate::io::bytes::{read_file, write_file, ByteReader, ByteWriter};

const MAGIC: &[u8; 4] = b"IVPO";
const VERSION: u32 = 1;
const WRITE_SUM_TOLERANCE: f64 = 1e-4;
const READ_SUM_TOLERANCE: f64 = 1e-3;

/// One frame as stored on disk: sorted (component, probability) pairs.
pub type SparseFrame = Vec<(u32, f32)>;

fn check_frame(
    frame: &SparseFrame,
    components: u32,
    t: usize,
    tolerance: f64,
) -> std::result::Result<(), String> {
    let mut sum = 0.0f64;
    let mut prev: Option<u32> = None;
    for &(idx, p) in frame {
        if idx >= components {
            return Err(format!(
                "frame {t}: component index {idx} out of range (count {components})"
            ));
        }
        if let Some(q) = prev {
            if idx <= q {
                return Err(format!(
                    "frame {t}: duplicate or unsorted component index {idx} after {q}"
                ));
            }
        }
        prev = Some(idx);
        if !p.is_finite() || p < 0.0 {
            return Err(format!("frame {t}: invalid probability {p} at component {idx}"));
        }
        sum += p as f64;
    }
    if (sum - 1.0).abs() > tolerance {
        return Err(format!(
            "frame {t}: probabilities sum to {sum}, deviation exceeds {tolerance}"
        ));
    }
    Ok(())
}

pub fn write_posteriors(path: &Path, components: u32, frames: &[SparseFrame]) -> Result<()> {
    for (t, frame) in frames.iter().enumerate() {
        check_frame(frame, components, t, WRITE_SUM_TOLERANCE)
            .map_err(|m| crate::error::Error::format(path, 0, m))?;
    }
    let mut w = ByteWriter::new();
    w.magic(MAGIC);
    w.u32(VERSION);
    w.u32(components);
    w.u64(frames.len() as u64);
    for frame in frames {
        w.u32(frame.len() as u32);
        for &(idx, p) in frame {
            w.u32(idx);
            w.f32(p);
        }
    }
    write_file(path, &w.into_inner())
}

/// Raw sparse rows exactly as stored; bit-exact round trip partner of
/// `write_posteriors`.
pub fn read_posteriors_sparse(path: &Path) -> Result<(u32, Vec<SparseFrame>)> {
    let buf = read_file(path)?;
    let mut r = ByteReader::new(&buf, path);
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.error_at(4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let components = r.u32("component count")?;
    if components == 0 {
        return Err(r.error_at(8, "component count is zero".to_string()));
    }
    let num_frames = r.u64("frame count")? as usize;
    let mut frames = Vec::with_capacity(num_frames);
    for t in 0..num_frames {
        let frame_at = r.offset();
        let k = r.u32("non-zero count")? as usize;
        if k as u32 > components {
            return Err(r.error_at(
                frame_at,
                format!("frame {t}: {k} entries for {components} components"),
            ));
        }
        let mut frame = Vec::with_capacity(k);
        for _ in 0..k {
            let idx = r.u32("component index")?;
            let p = r.f32("probability")?;
            frame.push((idx, p));
        }
        check_frame(&frame, components, t, READ_SUM_TOLERANCE)
            .map_err(|m| r.error_at(frame_at, m))?;
        frames.push(frame);
    }
    r.finish()?;
    Ok((components, frames))
}

/// Densifies into floored log probabilities ready for calibration.
pub fn read_posteriors(path: &Path, segment_id: &str) -> Result<RawPosteriors> {
    let (components, frames) = read_posteriors_sparse(path)?;
    let mut dense = DMatrix::zeros(frames.len(), components as usize);
    for (t, frame) in frames.iter().enumerate() {
        for &(idx, p) in frame {
            dense[(t, idx as usize)] = p as f64;
        }
    }
    RawPosteriors::from_probs_with_tolerance(segment_id, dense, READ_SUM_TOLERANCE)
}

/// Converts dense rows to the sparse storage form, keeping every entry above
/// `threshold`. The caller owns keeping the dropped mass within the writer
/// tolerance.
pub fn sparsify(probs: &DMatrix<f64>, threshold: f64) -> Vec<SparseFrame> {
    (0..probs.nrows())
        .map(|t| {
            (0..probs.ncols())
                .filter(|&i| probs[(t, i)] > threshold)
                .map(|i| (i as u32, probs[(t, i)] as f32))
                .collect()
        })
        .collect()
}
