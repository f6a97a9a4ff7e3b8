//! Parallel map/merge over segments.
//!
//! Training and evaluation sum per-segment quantities. The fast path lets
//! rayon reduce in whatever order the scheduler produces; the reproducible
//! path still maps in parallel but merges sequentially in segment order, so
//! results are bitwise identical run to run.

use rayon::prelude::*;

use crate::error::Result;

/// Maps every item in parallel, then merges. Returns `None` for empty input.
/// With `reproducible` set the merge is sequential in input order.
pub fn map_reduce<T, R, M, G>(items: &[T], reproducible: bool, map: M, merge: G) -> Result<Option<R>>
where
    T: Sync,
    R: Send,
    M: Fn(&T) -> Result<R> + Sync + Send,
    G: Fn(R, R) -> Result<R> + Sync + Send,
{
    if reproducible {
        let mapped: Vec<R> = items.par_iter().map(&map).collect::<Result<Vec<_>>>()?;
        let mut it = mapped.into_iter();
        let Some(mut acc) = it.next() else {
            return Ok(None);
        };
        for r in it {
            acc = merge(acc, r)?;
        }
        Ok(Some(acc))
    } else {
        items.par_iter().map(&map).try_reduce_with(merge).transpose()
    }
}

/// Parallel map preserving input order.
pub fn par_map<T, R, M>(items: &[T], map: M) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    M: Fn(&T) -> Result<R> + Sync + Send,
{
    items.par_iter().map(map).collect()
}

/// Sums one f64 per item; reproducible mode gives a fixed summation order.
pub fn sum<T, M>(items: &[T], reproducible: bool, map: M) -> Result<f64>
where
    T: Sync,
    M: Fn(&T) -> Result<f64> + Sync + Send,
{
    Ok(map_reduce(items, reproducible, map, |a, b| Ok(a + b))?.unwrap_or(0.0))
}
