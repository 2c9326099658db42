//! Image and mask volumes and the HVOL container.
//!
//! HVOL layout, little-endian: magic `HVOL`, `u32` version (1), `u32` C, D,
//! H, W, `u8` dtype (0 = f32 image, 1 = u8 mask), three `f32` voxel
//! spacings in mm, then the payload in `C×D×H×W` row-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::numkernel::Tensor;

const MAGIC: &[u8; 4] = b"HVOL";
const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 16 + 1 + 12;

/// Spacing in mm along (D, H, W).
pub type Spacing = [f64; 3];

fn check_spacing(spacing: Spacing) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("voxel spacing must be positive, got {spacing:?}")))
    }
}

/// Multimodal image, `C×D×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Tensor,
    pub spacing: Spacing,
}

impl Volume {
    pub fn new(data: Tensor, spacing: Spacing) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::dim("volume", data.shape(), &[4]));
        }
        check_spacing(spacing)?;
        Ok(Volume { data, spacing })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn extents(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }
}

/// Source index of each destination voxel after mirroring the chosen
/// (D, H, W) axes.
fn flip_index(ext: [usize; 3], axes: [bool; 3]) -> Vec<usize> {
    let [d, h, w] = ext;
    let mut idx = Vec::with_capacity(d * h * w);
    for z in 0..d {
        let sz = if axes[0] { d - 1 - z } else { z };
        for y in 0..h {
            let sy = if axes[1] { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if axes[2] { w - 1 - x } else { x };
                idx.push((sz * h + sy) * w + sx);
            }
        }
    }
    idx
}

impl Volume {
    /// Mirror image along the chosen (D, H, W) axes.
    pub fn flipped(&self, axes: [bool; 3]) -> Volume {
        let ext = self.extents();
        let n: usize = ext.iter().product();
        let idx = flip_index(ext, axes);
        let src = self.data.data();
        let data = Tensor::from_fn(self.data.shape(), |i| src[(i / n) * n + idx[i % n]]);
        Volume { data, spacing: self.spacing }
    }
}

/// Binary label volume, `D×H×W`, values 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskVolume {
    pub extents: [usize; 3],
    pub spacing_bits: [u64; 3],
    pub data: Vec<u8>,
}

impl MaskVolume {
    pub fn new(extents: [usize; 3], spacing: Spacing, data: Vec<u8>) -> Result<Self> {
        check_spacing(spacing)?;
        if extents.contains(&0) || data.len() != extents.iter().product::<usize>() {
            return Err(Error::dim("mask", &extents, &[data.len()]));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Parameter("mask values must be 0 or 1".into()));
        }
        Ok(MaskVolume {
            extents,
            spacing_bits: spacing.map(f64::to_bits),
            data,
        })
    }

    pub fn zeros(extents: [usize; 3], spacing: Spacing) -> Result<Self> {
        Self::new(extents, spacing, vec![0; extents.iter().product()])
    }

    /// Threshold probabilities at 0.5.
    pub fn from_probs(probs: &Tensor, spacing: Spacing) -> Result<Self> {
        let s = probs.shape();
        let extents = match s.len() {
            3 => [s[0], s[1], s[2]],
            4 if s[0] == 1 => [s[1], s[2], s[3]],
            _ => return Err(Error::dim("mask from probabilities", s, &[1, 0, 0, 0])),
        };
        Self::new(extents, spacing, probs.data().iter().map(|&p| u8::from(p >= 0.5)).collect())
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing_bits.map(f64::from_bits)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        let [_, h, w] = self.extents;
        self.data[(z * h + y) * w + x] == 1
    }

    pub fn flipped(&self, axes: [bool; 3]) -> MaskVolume {
        let data = flip_index(self.extents, axes).into_iter().map(|i| self.data[i]).collect();
        MaskVolume { data, ..self.clone() }
    }

    /// As a `[1×D×H×W]` tensor of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.extents;
        Tensor::from_fn(&[1, d, h, w], |i| f64::from(self.data[i]))
    }
}

fn header(c: usize, ext: [usize; 3], dtype: u8, spacing: Spacing) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for e in [c, ext[0], ext[1], ext[2]] {
        let e = u32::try_from(e).map_err(|_| Error::Format("extent exceeds u32".into()))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    out.push(dtype);
    for s in spacing {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    let mut out = header(v.channels(), v.extents(), 0, v.spacing)?;
    out.reserve(v.data.numel() * 4);
    for &x in v.data.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn encode_mask(m: &MaskVolume) -> Result<Vec<u8>> {
    let mut out = header(1, m.extents, 1, m.spacing())?;
    out.extend_from_slice(&m.data);
    Ok(out)
}

/// Either payload kind read from an HVOL file.
#[derive(Clone, Debug, PartialEq)]
pub enum Hvol {
    Image(Volume),
    Mask(MaskVolume),
}

fn u32_at(b: &[u8], off: usize) -> usize {
    u32::from_le_bytes(b[off..off + 4].try_into().expect("4 bytes")) as usize
}

pub fn decode(bytes: &[u8]) -> Result<Hvol> {
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(Error::Format("not an HVOL file".into()));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported HVOL version {version}")));
    }
    let c = u32_at(bytes, 8);
    let ext = [u32_at(bytes, 12), u32_at(bytes, 16), u32_at(bytes, 20)];
    let dtype = bytes[24];
    let mut spacing = [0.0; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let off = 25 + 4 * i;
        *s = f64::from(f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")));
    }
    let n = c
        .checked_mul(ext.iter().product())
        .ok_or_else(|| Error::Format("HVOL extents overflow".into()))?;
    let payload = &bytes[HEADER..];
    match dtype {
        0 => {
            if payload.len() != n * 4 {
                return Err(Error::Format(format!("HVOL image payload is {} bytes, expected {}", payload.len(), n * 4)));
            }
            let data = payload
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
                .collect();
            let t = Tensor::new(vec![c, ext[0], ext[1], ext[2]], data)?;
            Ok(Hvol::Image(Volume::new(t, spacing)?))
        }
        1 => {
            if c != 1 || payload.len() != n {
                return Err(Error::Format("HVOL mask must be single-channel u8".into()));
            }
            Ok(Hvol::Mask(MaskVolume::new(ext, spacing, payload.to_vec())?))
        }
        other => Err(Error::Format(format!("unknown HVOL dtype {other}"))),
    }
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    write_atomic(path, &encode_volume(v)?)
}

pub fn save_mask(m: &MaskVolume, path: &Path) -> Result<()> {
    write_atomic(path, &encode_mask(m)?)
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    match decode(&std::fs::read(path)?)? {
        Hvol::Image(v) => Ok(v),
        Hvol::Mask(_) => Err(Error::Format(format!("{} holds a mask, expected an image", path.display()))),
    }
}

pub fn load_mask(path: &Path) -> Result<MaskVolume> {
    match decode(&std::fs::read(path)?)? {
        Hvol::Mask(m) => Ok(m),
        Hvol::Image(_) => Err(Error::Format(format!("{} holds an image, expected a mask", path.display()))),
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn flips_mirror_and_invert() {
        let v = Volume::new(Tensor::from_fn(&[2, 2, 3, 4], |i| i as f64), [1.0; 3]).unwrap();
        let f = v.flipped([false, true, true]);
        // channel 1, z 0, y 0, x 0 comes from y 2, x 3
        assert_eq!(f.data.data()[24], v.data.data()[24 + 2 * 4 + 3]);
        assert_eq!(f.flipped([false, true, true]), v);
        let m = MaskVolume::new([2, 1, 2], [1.0; 3], vec![1, 0, 0, 0]).unwrap();
        assert_eq!(m.flipped([true, false, true]).data, vec![0, 0, 0, 1]);
    }

    use super::*;

    #[test]
    fn image_roundtrip_and_header() {
        let t = Tensor::from_fn(&[2, 2, 3, 4], |i| (i as f32 * 0.25) as f64 - 3.0);
        let v = Volume::new(t, [1.0, 1.5, 2.0]).unwrap();
        let bytes = encode_volume(&v).unwrap();
        assert_eq!(&bytes[..4], b"HVOL");
        assert_eq!(u32_at(&bytes, 4), 1);
        assert_eq!([u32_at(&bytes, 8), u32_at(&bytes, 12), u32_at(&bytes, 16), u32_at(&bytes, 20)], [2, 2, 3, 4]);
        assert_eq!(bytes[24], 0);
        assert_eq!(bytes.len(), HEADER + 48 * 4);
        assert_eq!(decode(&bytes).unwrap(), Hvol::Image(v));
    }

    #[test]
    fn mask_roundtrip() {
        let m = MaskVolume::new([2, 2, 2], [1.0; 3], vec![0, 1, 1, 0, 0, 0, 1, 0]).unwrap();
        let bytes = encode_mask(&m).unwrap();
        assert_eq!(bytes[24], 1);
        assert_eq!(decode(&bytes).unwrap(), Hvol::Mask(m.clone()));
        assert_eq!(m.count(), 3);
        assert!(m.get(0, 0, 1));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode(b"HVOX").is_err());
        let m = MaskVolume::zeros([1, 1, 2], [1.0; 3]).unwrap();
        let mut bytes = encode_mask(&m).unwrap();
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
        assert!(MaskVolume::new([1, 1, 1], [1.0; 3], vec![2]).is_err());
        assert!(MaskVolume::new([1, 1, 1], [0.0, 1.0, 1.0], vec![0]).is_err());
    }
}
