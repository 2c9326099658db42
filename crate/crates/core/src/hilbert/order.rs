use std::fmt;
use std::sync::Arc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{build_hilbert_map, morton, HilbertMap};
use crate::error::{Error, Result};
use crate::numkernel::{Tensor, Var};

/// Serialization order for grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanScheme {
    Hilbert,
    Raster,
    Morton,
}

impl ScanScheme {
    pub const ALL: [ScanScheme; 3] = [ScanScheme::Hilbert, ScanScheme::Raster, ScanScheme::Morton];

    pub fn as_str(self) -> &'static str {
        match self {
            ScanScheme::Hilbert => "hilbert",
            ScanScheme::Raster => "raster",
            ScanScheme::Morton => "morton",
        }
    }
}

impl fmt::Display for ScanScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScanScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hilbert" => Ok(ScanScheme::Hilbert),
            "raster" => Ok(ScanScheme::Raster),
            "morton" => Ok(ScanScheme::Morton),
            other => Err(Error::Parameter(format!(
                "unknown scan scheme '{other}' (expected hilbert, raster or morton)"
            ))),
        }
    }
}

/// How grids smaller than the curve's `2^k` cube are handled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PadPolicy {
    /// Embed in the enclosing cube and drop out-of-grid cells from the
    /// sequence.
    #[default]
    Mask,
    /// Require the grid to fill the cube exactly.
    Exact,
}

/// A permutation of the cells of a grid: `sequence()[t]` is the row-major
/// linear index of the cell visited at position `t`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanOrder {
    scheme: ScanScheme,
    extents: Vec<usize>,
    sequence: Arc<Vec<usize>>,
    rank: Arc<Vec<usize>>,
}

/// `[D, H, W]`-style extents padded to three axes, slowest first.
fn as_3d(extents: &[usize]) -> Result<[usize; 3]> {
    match *extents {
        [w] => Ok([1, 1, w]),
        [h, w] => Ok([1, h, w]),
        [d, h, w] => Ok([d, h, w]),
        _ => Err(Error::Parameter(format!(
            "scan order needs 1 to 3 spatial extents, got {extents:?}"
        ))),
    }
}

fn curve_order(extents: &[usize]) -> u32 {
    let side = extents.iter().copied().max().unwrap_or(1).next_power_of_two();
    side.trailing_zeros().max(1)
}

impl ScanOrder {
    /// Scan order for a grid of `extents` (1 to 3 axes, slowest first). A
    /// 1-D grid is always visited in index order.
    pub fn new(scheme: ScanScheme, extents: &[usize]) -> Result<Self> {
        if extents.contains(&0) {
            return Err(Error::Parameter(format!("zero extent in {extents:?}")));
        }
        let [d, h, w] = as_3d(extents)?;
        let dims = extents.len() as u32;
        let n = d * h * w;
        let sequence: Vec<usize> = if dims == 1 || n == 1 {
            (0..n).collect()
        } else {
            match scheme {
                ScanScheme::Raster => (0..n).collect(),
                ScanScheme::Hilbert => {
                    let map = build_hilbert_map(dims, curve_order(extents))?;
                    return Self::from_map(&map, extents, PadPolicy::Mask);
                }
                ScanScheme::Morton => {
                    let side = extents.iter().copied().max().unwrap_or(1).next_power_of_two();
                    let mut cells: Vec<(u64, usize)> = Vec::with_capacity(n);
                    for z in 0..d {
                        for y in 0..h {
                            for x in 0..w {
                                let c = [x as u32, y as u32, if dims == 3 { z as u32 } else { 0 }];
                                cells.push((morton::encode(dims, c), (z * h + y) * w + x));
                            }
                        }
                    }
                    debug_assert!(side <= 1 << 21);
                    cells.sort_unstable();
                    cells.into_iter().map(|(_, i)| i).collect()
                }
            }
        };
        Ok(Self::from_sequence(scheme, extents, sequence))
    }

    /// Hilbert order of `extents` read off a prebuilt map.
    pub fn from_map(map: &HilbertMap, extents: &[usize], pad: PadPolicy) -> Result<Self> {
        let [d, h, w] = as_3d(extents)?;
        if extents.len() as u32 != map.dims() {
            return Err(Error::Parameter(format!(
                "{}-D map cannot serialize extents {extents:?}",
                map.dims()
            )));
        }
        let side = map.side();
        if extents.iter().any(|&e| e > side) {
            return Err(Error::Parameter(format!(
                "extents {extents:?} exceed the curve side {side}"
            )));
        }
        if pad == PadPolicy::Exact && extents.iter().any(|&e| e != side) {
            return Err(Error::Parameter(format!(
                "extents {extents:?} do not fill the {side}-cube and padding is disabled"
            )));
        }
        let sequence = map
            .coords()
            .iter()
            .filter(|c| (c[0] as usize) < w && (c[1] as usize) < h && (c[2] as usize) < d)
            .map(|c| (c[2] as usize * h + c[1] as usize) * w + c[0] as usize)
            .collect();
        Ok(Self::from_sequence(ScanScheme::Hilbert, extents, sequence))
    }

    fn from_sequence(scheme: ScanScheme, extents: &[usize], sequence: Vec<usize>) -> Self {
        let mut rank = vec![0; sequence.len()];
        for (t, &cell) in sequence.iter().enumerate() {
            rank[cell] = t;
        }
        ScanOrder {
            scheme,
            extents: extents.to_vec(),
            sequence: Arc::new(sequence),
            rank: Arc::new(rank),
        }
    }

    pub fn scheme(&self) -> ScanScheme {
        self.scheme
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    pub fn sequence(&self) -> &[usize] {
        &self.sequence
    }

    /// Position in the sequence of each row-major cell.
    pub fn rank(&self) -> &[usize] {
        &self.rank
    }

    fn check_spatial(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() != self.extents.len() + 1 || shape[1..] != self.extents[..] {
            return Err(Error::Parameter(format!(
                "feature shape {shape:?} does not match scan extents {:?}",
                self.extents
            )));
        }
        Ok(shape[0])
    }

    /// `[C×spatial] → [C×N]` gather indices.
    fn flatten_index(&self, channels: usize) -> Vec<usize> {
        let n = self.len();
        (0..channels)
            .flat_map(|c| self.sequence.iter().map(move |&cell| c * n + cell))
            .collect()
    }

    fn unflatten_index(&self, channels: usize) -> Vec<usize> {
        let n = self.len();
        (0..channels)
            .flat_map(|c| self.rank.iter().map(move |&t| c * n + t))
            .collect()
    }

    /// `[C×spatial] → [C×N]`, channels untouched.
    pub fn flatten<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let c = self.check_spatial(&x.shape())?;
        x.gather(Arc::new(self.flatten_index(c)), &[c, self.len()])
    }

    /// `[C×N] → [C×spatial]`, inverse of [`ScanOrder::flatten`].
    pub fn unflatten<'t>(&self, seq: Var<'t>) -> Result<Var<'t>> {
        let s = seq.shape();
        if s.len() != 2 || s[1] != self.len() {
            return Err(Error::dim("hilbert_unflatten", &s, &[self.len()]));
        }
        let mut shape = vec![s[0]];
        shape.extend_from_slice(&self.extents);
        seq.gather(Arc::new(self.unflatten_index(s[0])), &shape)
    }

    /// `[C×spatial] → [N×C]`: flatten and transpose in one gather, giving a
    /// token-major sequence for the scan.
    pub fn to_tokens<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let c = self.check_spatial(&x.shape())?;
        let n = self.len();
        let idx: Vec<usize> = self
            .sequence
            .iter()
            .flat_map(|&cell| (0..c).map(move |ch| ch * n + cell))
            .collect();
        x.gather(Arc::new(idx), &[n, c])
    }

    /// `[N×C] → [C×spatial]`, inverse of [`ScanOrder::to_tokens`].
    pub fn from_tokens<'t>(&self, tokens: Var<'t>) -> Result<Var<'t>> {
        let s = tokens.shape();
        if s.len() != 2 || s[0] != self.len() {
            return Err(Error::dim("from_tokens", &s, &[self.len()]));
        }
        let c = s[1];
        let idx: Vec<usize> = (0..c)
            .flat_map(|ch| self.rank.iter().map(move |&t| t * c + ch))
            .collect();
        let mut shape = vec![c];
        shape.extend_from_slice(&self.extents);
        tokens.gather(Arc::new(idx), &shape)
    }

    /// Tape-free flatten of a tensor.
    pub fn flatten_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.check_spatial(x.shape())?;
        let data = self.flatten_index(c).iter().map(|&i| x.data()[i]).collect();
        Tensor::new(vec![c, self.len()], data)
    }

    pub fn unflatten_tensor(&self, seq: &Tensor) -> Result<Tensor> {
        let s = seq.shape();
        if s.len() != 2 || s[1] != self.len() {
            return Err(Error::dim("hilbert_unflatten", s, &[self.len()]));
        }
        let data = self
            .unflatten_index(s[0])
            .iter()
            .map(|&i| seq.data()[i])
            .collect();
        let mut shape = vec![s[0]];
        shape.extend_from_slice(&self.extents);
        Tensor::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_scheme_is_a_permutation() {
        for scheme in ScanScheme::ALL {
            for ext in [vec![5], vec![3, 7], vec![4, 4], vec![5, 6, 3], vec![8, 8, 8]] {
                let o = ScanOrder::new(scheme, &ext).unwrap();
                let mut seen = o.sequence().to_vec();
                seen.sort_unstable();
                assert_eq!(seen, (0..ext.iter().product()).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn constant_volume_gives_constant_sequence() {
        let o = ScanOrder::new(ScanScheme::Hilbert, &[3, 5, 6]).unwrap();
        let x = Tensor::full(&[2, 3, 5, 6], 1.25);
        let s = o.flatten_tensor(&x).unwrap();
        assert!(s.data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn single_voxel() {
        let o = ScanOrder::new(ScanScheme::Hilbert, &[1, 1, 1]).unwrap();
        let x = Tensor::full(&[1, 1, 1, 1], -3.0);
        let s = o.flatten_tensor(&x).unwrap();
        assert_eq!(s.shape(), &[1, 1]);
        assert_eq!(s.data(), &[-3.0]);
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[2, 8, 8, 8], 1.0, &mut rng);
        let o = ScanOrder::new(ScanScheme::Hilbert, &[8, 8, 8]).unwrap();
        let back = o.unflatten_tensor(&o.flatten_tensor(&x).unwrap()).unwrap();
        assert_eq!(back, x);

        let y = Tensor::randn(&[3, 5, 7, 6], 1.0, &mut rng);
        let o = ScanOrder::new(ScanScheme::Hilbert, &[5, 7, 6]).unwrap();
        let tape = Tape::new();
        let v = tape.constant(y.clone());
        let back = o.unflatten(o.flatten(v).unwrap()).unwrap().value();
        assert_eq!(*back, y);
        let back = o.from_tokens(o.to_tokens(v).unwrap()).unwrap().value();
        assert_eq!(*back, y);
    }

    #[test]
    fn flatten_gradient_is_the_inverse_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 4, 3, 5], 1.0, &mut rng);
        let o = ScanOrder::new(ScanScheme::Hilbert, &[4, 3, 5]).unwrap();
        let g = Tensor::randn(&[2, 60], 1.0, &mut rng);
        // Same products, different summation order: compare the multisets.
        let products = |a: &Tensor, b: &Tensor| {
            let mut p: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            p.sort_by(f64::total_cmp);
            p
        };
        let lhs = products(&o.flatten_tensor(&x).unwrap(), &g);
        let rhs = products(&x, &o.unflatten_tensor(&g).unwrap());
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn extent_errors() {
        let map = build_hilbert_map(3, 2).unwrap();
        assert!(ScanOrder::from_map(&map, &[5, 4, 4], PadPolicy::Mask).is_err());
        assert!(ScanOrder::from_map(&map, &[3, 4, 4], PadPolicy::Exact).is_err());
        assert!(ScanOrder::from_map(&map, &[3, 4, 4], PadPolicy::Mask).is_ok());
        assert!(ScanOrder::from_map(&map, &[4, 4], PadPolicy::Mask).is_err());
        let o = ScanOrder::new(ScanScheme::Hilbert, &[4, 4]).unwrap();
        let tape = Tape::new();
        assert!(o.flatten(tape.constant(Tensor::zeros(&[1, 4, 5]))).is_err());
    }

    #[test]
    fn parse_scheme() {
        assert_eq!("morton".parse::<ScanScheme>().unwrap(), ScanScheme::Morton);
        assert!("zigzag".parse::<ScanScheme>().is_err());
    }
}
