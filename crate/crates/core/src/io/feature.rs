//! Feature files. Layout FEAT-v1, all little-endian:
//! magic "IVFE", u32 version (1), u32 feature dim, u64 frame count,
//! then frame-major 32-bit floats. Values are stored at f32 precision;
//! round-trips of f32-representable data are bit-exact.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::io::bytes::{read_file, write_file, ByteReader, ByteWriter};
use crate::model::SegmentFeatures;

const MAGIC: &[u8; 4] = b"IVFE";
const VERSION: u32 = 1;

pub fn write_features(path: &Path, seg: &SegmentFeatures) -> Result<()> {
    let mut w = ByteWriter::new();
    w.magic(MAGIC);
    w.u32(VERSION);
    w.u32(seg.dim() as u32);
    w.u64(seg.num_frames() as u64);
    for t in 0..seg.num_frames() {
        for d in 0..seg.dim() {
            w.f32(seg.frames[(t, d)] as f32);
        }
    }
    write_file(path, &w.into_inner())
}

pub fn read_features(path: &Path, segment_id: &str) -> Result<SegmentFeatures> {
    let buf = read_file(path)?;
    let mut r = ByteReader::new(&buf, path);
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.error_at(4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let dim = r.u32("feature dim")? as usize;
    let frames = r.u64("frame count")? as usize;
    if dim == 0 {
        return Err(r.error_at(8, "feature dim is zero".to_string()));
    }
    let payload_start = r.offset();
    let mut data = DMatrix::zeros(frames, dim);
    for t in 0..frames {
        for d in 0..dim {
            let at = r.offset();
            let v = r.f32("feature value")?;
            if !v.is_finite() {
                return Err(r.error_at(
                    at,
                    format!("non-finite value {v} at frame {t}, dim {d}"),
                ));
            }
            data[(t, d)] = v as f64;
        }
    }
    r.finish()?;
    SegmentFeatures::new(segment_id, data).map_err(|e| {
        Error::format(path, payload_start, format!("invalid feature payload: {e}"))
    })
}
