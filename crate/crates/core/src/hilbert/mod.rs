//! Hilbert-curve serialization of 2-D/3-D grids.
//!
//! Curve convention: index 0 sits at the origin and the order-1 tour steps
//! along x first. Coordinates are `[x, y, z]` with x the fastest tensor axis (W),
//! y the rows (H) and z the slices (D). Tables are built by recursive
//! composition: the order-`k` curve is the order-1 Gray-code tour of the
//! `2^dims` sub-cubes, each visited by a rotated and reflected copy of the
//! order-`k-1` curve. [`curve`] provides the same mapping one index at a
//! time for orders too large to tabulate.

pub mod curve;
mod locality;
pub mod morton;
mod order;

pub use locality::{locality_report, LocalityReport};
pub use order::{PadPolicy, ScanOrder, ScanScheme};

use crate::error::{Error, Result};
use curve::{direction, entry, gray, rotate_left, start_direction};

/// Largest table (in `dims·order` bits) that [`build_hilbert_map`] will
/// allocate.
pub const MAX_TABLE_BITS: u32 = 24;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HilbertMap {
    dims: u32,
    order: u32,
    index_to_coord: Vec<[u32; 3]>,
    coord_to_index: Vec<u32>,
}

pub fn build_hilbert_map(dims: u32, order: u32) -> Result<HilbertMap> {
    if dims != 2 && dims != 3 {
        return Err(Error::Parameter(format!("hilbert map dims must be 2 or 3, got {dims}")));
    }
    if order == 0 {
        return Err(Error::Parameter("hilbert map order must be at least 1".into()));
    }
    if dims * order > MAX_TABLE_BITS {
        return Err(Error::Parameter(format!(
            "hilbert table of 2^{} entries exceeds the 2^{MAX_TABLE_BITS} limit; use hilbert::curve",
            dims * order
        )));
    }
    let d0 = start_direction(dims);
    let mut table: Vec<[u32; 3]> = vec![[0; 3]];
    for level in 1..=order {
        let half = 1u32 << (level - 1);
        let mut next = Vec::with_capacity(table.len() << dims);
        for w in 0..(1u32 << dims) {
            let top = rotate_left(gray(w), d0 + 1, dims);
            let flip = rotate_left(entry(w), d0 + 1, dims);
            let turn = (direction(w, dims) + 1) % dims;
            for c in &table {
                let mut nc = [0u32; 3];
                for j in 0..dims {
                    nc[((j + turn) % dims) as usize] = c[j as usize];
                }
                for (j, v) in nc.iter_mut().enumerate().take(dims as usize) {
                    if (flip >> j) & 1 == 1 {
                        *v = half - 1 - *v;
                    }
                    *v += ((top >> j) & 1) * half;
                }
                next.push(nc);
            }
        }
        table = next;
    }
    let side = 1usize << order;
    let mut inverse = vec![0u32; table.len()];
    for (i, c) in table.iter().enumerate() {
        inverse[linear(c, side)] = i as u32;
    }
    Ok(HilbertMap {
        dims,
        order,
        index_to_coord: table,
        coord_to_index: inverse,
    })
}

fn linear(c: &[u32; 3], side: usize) -> usize {
    c[0] as usize + side * (c[1] as usize + side * c[2] as usize)
}

impl HilbertMap {
    pub fn dims(&self) -> u32 {
        self.dims
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn side(&self) -> usize {
        1 << self.order
    }

    pub fn len(&self) -> usize {
        self.index_to_coord.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_to_coord.is_empty()
    }

    pub fn coord(&self, index: usize) -> [u32; 3] {
        self.index_to_coord[index]
    }

    pub fn index(&self, coord: [u32; 3]) -> usize {
        self.coord_to_index[linear(&coord, self.side())] as usize
    }

    pub fn coords(&self) -> &[[u32; 3]] {
        &self.index_to_coord
    }

    /// `index,x,y[,z]` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(if self.dims == 3 { "index,x,y,z\n" } else { "index,x,y\n" });
        for (i, c) in self.index_to_coord.iter().enumerate() {
            if self.dims == 3 {
                s.push_str(&format!("{i},{},{},{}\n", c[0], c[1], c[2]));
            } else {
                s.push_str(&format!("{i},{},{}\n", c[0], c[1]));
            }
        }
        s
    }
}
