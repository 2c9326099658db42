use serde::Serialize;

use super::order::{ScanOrder, ScanScheme};
use crate::error::{Error, Result};

/// How far apart face-adjacent cells land in a serialized order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LocalityReport {
    pub scheme: ScanScheme,
    pub grid: Vec<usize>,
    pub pairs: usize,
    /// Mean of `|rank(a) - rank(b)|` over every unordered face-adjacent pair.
    pub mean_adjacent_index_gap: f64,
    /// Nearest-rank 95th percentile of the same gaps.
    pub p95_adjacent_index_gap: f64,
    /// Nearest-rank median gap.
    pub median_adjacent_index_gap: f64,
    /// Mean of `log2(gap)`; less sensitive to the rare long seams of
    /// recursive curves than the plain mean.
    pub mean_log2_adjacent_index_gap: f64,
}

pub const MAX_LOCALITY_EXTENT: usize = 64;

pub fn locality_report(scheme: ScanScheme, extents: &[usize]) -> Result<LocalityReport> {
    if extents.len() < 2 || extents.len() > 3 {
        return Err(Error::Parameter(format!(
            "locality needs a 2-D or 3-D grid, got {extents:?}"
        )));
    }
    if extents.iter().any(|&e| e > MAX_LOCALITY_EXTENT) {
        return Err(Error::Parameter(format!(
            "grid {extents:?} exceeds {MAX_LOCALITY_EXTENT} per axis"
        )));
    }
    let order = ScanOrder::new(scheme, extents)?;
    let rank = order.rank();
    let mut gaps = Vec::new();
    let mut stride = 1;
    let n = rank.len();
    for axis in (0..extents.len()).rev() {
        let e = extents[axis];
        for cell in 0..n {
            if (cell / stride) % e + 1 < e {
                gaps.push(rank[cell].abs_diff(rank[cell + stride]));
            }
        }
        stride *= e;
    }
    if gaps.is_empty() {
        return Err(Error::Parameter(format!(
            "grid {extents:?} has no adjacent pairs; locality is undefined"
        )));
    }
    let count = gaps.len() as f64;
    let mean = gaps.iter().map(|&g| g as f64).sum::<f64>() / count;
    let mean_log2 = gaps.iter().map(|&g| (g as f64).log2()).sum::<f64>() / count;
    gaps.sort_unstable();
    let nearest_rank = |q: f64| gaps[((q * count).ceil() as usize).max(1) - 1] as f64;
    Ok(LocalityReport {
        scheme,
        grid: extents.to_vec(),
        pairs: gaps.len(),
        mean_adjacent_index_gap: mean,
        p95_adjacent_index_gap: nearest_rank(0.95),
        median_adjacent_index_gap: nearest_rank(0.5),
        mean_log2_adjacent_index_gap: mean_log2,
    })
}
