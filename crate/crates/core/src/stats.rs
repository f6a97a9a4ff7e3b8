//! Baum-Welch sufficient statistics, centered on the current component means.
//!
//! For component i of one segment: the soft count `n_i = sum_t q_ti`, the
//! centered first moment `f_i = sum_t q_ti (phi_t - mu_i)`, and the centered
//! second moment `S_i = sum_t q_ti (phi_t - mu_i)(phi_t - mu_i)'` (diagonal
//! only in diagonal covariance mode). Statistics carry a fingerprint of the
//! means they were centered on; consumers refuse stale statistics instead of
//! silently mixing centerings.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gmm::Responsibilities;
use crate::model::{means_fingerprint, CovarianceMode, SegmentFeatures};

/// Centered second moment of one component, diagonal or full to match the
/// model's covariance mode.
#[derive(Debug, Clone, PartialEq)]
pub enum SecondMoment {
    Diagonal(DVector<f64>),
    Full(DMatrix<f64>),
}

impl SecondMoment {
    pub fn zeros(mode: CovarianceMode, dim: usize) -> Self {
        match mode {
            CovarianceMode::Diagonal => SecondMoment::Diagonal(DVector::zeros(dim)),
            CovarianceMode::Full => SecondMoment::Full(DMatrix::zeros(dim, dim)),
        }
    }

    pub fn mode(&self) -> CovarianceMode {
        match self {
            SecondMoment::Diagonal(_) => CovarianceMode::Diagonal,
            SecondMoment::Full(_) => CovarianceMode::Full,
        }
    }

    fn add_weighted_outer(&mut self, q: f64, r: &DVector<f64>) {
        match self {
            SecondMoment::Diagonal(s) => {
                for (k, v) in s.iter_mut().enumerate() {
                    *v += q * r[k] * r[k];
                }
            }
            SecondMoment::Full(s) => {
                s.syupdate(q, r);
            }
        }
    }

    fn add(&mut self, other: &SecondMoment) -> Result<()> {
        match (self, other) {
            (SecondMoment::Diagonal(a), SecondMoment::Diagonal(b)) if a.len() == b.len() => {
                *a += b;
                Ok(())
            }
            (SecondMoment::Full(a), SecondMoment::Full(b)) if a.shape() == b.shape() => {
                *a += b;
                Ok(())
            }
            _ => Err(Error::DimensionMismatch {
                context: "second moment merge".into(),
                expected: "matching mode and dimension".into(),
                got: "mixed".into(),
            }),
        }
    }
}

// symmetric rank-one update helper; nalgebra has ger but keeping this local
// avoids pulling in BLAS-flavored naming for a three-line loop
trait SymUpdate {
    fn syupdate(&mut self, q: f64, r: &DVector<f64>);
}

impl SymUpdate for DMatrix<f64> {
    fn syupdate(&mut self, q: f64, r: &DVector<f64>) {
        let d = r.len();
        for a in 0..d {
            let qa = q * r[a];
            for b in 0..d {
                self[(a, b)] += qa * r[b];
            }
        }
    }
}

/// Sufficient statistics of one segment.
#[derive(Debug, Clone)]
pub struct SegmentStats {
    pub segment_id: String,
    /// Soft frame counts per component; sums to the frame count.
    pub counts: DVector<f64>,
    /// Row i is the centered first moment of component i.
    pub first: DMatrix<f64>,
    pub second: Vec<SecondMoment>,
    /// Fingerprint of the means used for centering.
    pub centering: u64,
    /// Fingerprint of the responsibilities the statistics came from.
    pub resp_fingerprint: u64,
    pub frames: u64,
}

/// Statistics merged over segments; all accumulation in f64.
#[derive(Debug, Clone)]
pub struct DatasetStats {
    pub counts: DVector<f64>,
    pub first: DMatrix<f64>,
    pub second: Vec<SecondMoment>,
    pub centering: u64,
    pub frames: u64,
    pub segments: u64,
}

/// Accumulates centered statistics for one segment in a single pass over the
/// frames. `means` must be the N x D matrix the caller will keep using; its
/// fingerprint is stored so later consumers can detect staleness.
pub fn accumulate(
    seg: &SegmentFeatures,
    resp: &Responsibilities,
    means: &DMatrix<f64>,
    mode: CovarianceMode,
) -> Result<SegmentStats> {
    if resp.segment_id != seg.segment_id {
        return Err(Error::StaleStats(format!(
            "responsibilities for {:?} paired with segment {:?}",
            resp.segment_id, seg.segment_id
        )));
    }
    let (t_s, d) = (seg.num_frames(), seg.dim());
    let n = resp.num_components();
    if resp.num_frames() != t_s {
        return Err(Error::DimensionMismatch {
            context: format!("responsibilities for segment {:?}", seg.segment_id),
            expected: format!("{t_s} frames"),
            got: format!("{}", resp.num_frames()),
        });
    }
    if means.nrows() != n || means.ncols() != d {
        return Err(Error::DimensionMismatch {
            context: "means for accumulation".into(),
            expected: format!("{n}x{d}"),
            got: format!("{}x{}", means.nrows(), means.ncols()),
        });
    }
    let mean_rows: Vec<DVector<f64>> = (0..n).map(|i| means.row(i).transpose()).collect();
    let mut counts = DVector::zeros(n);
    let mut first = DMatrix::zeros(n, d);
    let mut second: Vec<SecondMoment> = (0..n).map(|_| SecondMoment::zeros(mode, d)).collect();
    for t in 0..t_s {
        let phi = seg.frame(t);
        for i in 0..n {
            let q = resp.probs[(t, i)];
            if q == 0.0 {
                continue;
            }
            let r = &phi - &mean_rows[i];
            counts[i] += q;
            for k in 0..d {
                first[(i, k)] += q * r[k];
            }
            second[i].add_weighted_outer(q, &r);
        }
    }
    Ok(SegmentStats {
        segment_id: seg.segment_id.clone(),
        counts,
        first,
        second,
        centering: means_fingerprint(means),
        resp_fingerprint: resp.fingerprint(),
        frames: t_s as u64,
    })
}

impl DatasetStats {
    pub fn components(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.first.ncols()
    }

    pub fn mode(&self) -> CovarianceMode {
        self.second[0].mode()
    }

    pub fn from_segment(s: &SegmentStats) -> Self {
        DatasetStats {
            counts: s.counts.clone(),
            first: s.first.clone(),
            second: s.second.clone(),
            centering: s.centering,
            frames: s.frames,
            segments: 1,
        }
    }

    /// Merges statistics from disjoint segment sets. Rejects mismatched
    /// shapes and mismatched centering fingerprints.
    pub fn merge(mut a: DatasetStats, b: DatasetStats) -> Result<DatasetStats> {
        if a.centering != b.centering {
            return Err(Error::StaleStats(
                "merging statistics centered on different means".into(),
            ));
        }
        if a.components() != b.components() || a.dim() != b.dim() {
            return Err(Error::DimensionMismatch {
                context: "statistics merge".into(),
                expected: format!("{}x{}", a.components(), a.dim()),
                got: format!("{}x{}", b.components(), b.dim()),
            });
        }
        a.counts += &b.counts;
        a.first += &b.first;
        for (sa, sb) in a.second.iter_mut().zip(b.second.iter()) {
            sa.add(sb)?;
        }
        a.frames += b.frames;
        a.segments += b.segments;
        Ok(a)
    }
}
