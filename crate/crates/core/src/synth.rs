//! Synthetic two-modality phantoms with exact lesion masks.
//!
//! Every volume holds an ellipsoidal "head" with smooth intensity shading
//! and Gaussian noise. One lesion is drawn per volume from three geometric
//! analogues:
//!
//! * `glioma-like`: bright ellipsoid with a non-lesion edema halo, strongest
//!   in modality 2;
//! * `fcd-like`: small, blurred, low-contrast blob just inside the head
//!   boundary;
//! * `infarct-like`: angular wedge of a radial shell, strongest in
//!   modality 1.
//!
//! These are shapes for exercising the pipeline, not models of disease.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::volume::{MaskVolume, Spacing, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Diagnosis {
    #[serde(rename = "glioma-like")]
    Glioma,
    #[serde(rename = "fcd-like")]
    Fcd,
    #[serde(rename = "infarct-like")]
    Infarct,
}

impl Diagnosis {
    pub const ALL: [Diagnosis; 3] = [Diagnosis::Glioma, Diagnosis::Fcd, Diagnosis::Infarct];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Diagnosis::Glioma => "glioma-like",
            Diagnosis::Fcd => "fcd-like",
            Diagnosis::Infarct => "infarct-like",
        }
    }
}

impl std::fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    /// Number of volumes; sample `i` has class `i mod 3`.
    pub n: usize,
    /// (D, H, W)
    pub extents: [usize; 3],
    pub spacing: Spacing,
    /// Lesion radius range in voxels.
    pub radius: (f64, f64),
    /// Lesion contrast range above the local background.
    pub contrast: (f64, f64),
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n: 60,
            extents: [32, 32, 32],
            spacing: [1.0; 3],
            radius: (3.0, 6.0),
            contrast: (0.6, 1.0),
            noise: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub volume: Volume,
    pub mask: MaskVolume,
    pub label: Diagnosis,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let min_ext = *self.extents.iter().min().unwrap_or(&0) as f64;
        let (lo, hi) = self.radius;
        if self.extents.iter().any(|&e| e < 8) {
            return Err(Error::Parameter(format!("extents {:?} must be at least 8", self.extents)));
        }
        if !(lo > 0.0 && lo <= hi) || 2.0 * hi >= 0.8 * min_ext {
            return Err(Error::Parameter(format!(
                "lesion radius range {:?} does not fit in extents {:?}",
                self.radius, self.extents
            )));
        }
        if !(self.contrast.0 > 0.0 && self.contrast.0 <= self.contrast.1) || !(self.noise >= 0.0) {
            return Err(Error::Parameter("contrast range must be positive and noise non-negative".into()));
        }
        if self.spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Parameter("spacing must be positive".into()));
        }
        Ok(())
    }
}

/// Dense voxel grid helper in normalized head coordinates.
struct Grid {
    ext: [usize; 3],
    center: [f64; 3],
    semi: [f64; 3],
}

impl Grid {
    fn len(&self) -> usize {
        self.ext.iter().product()
    }

    fn coord(&self, i: usize) -> [f64; 3] {
        let [_, h, w] = self.ext;
        [(i / (h * w)) as f64, (i / w % h) as f64, (i % w) as f64]
    }

    /// Normalized ellipsoidal radius relative to the head.
    fn head_radius(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.semi[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: [f64; 3] = [n.sample(rng), n.sample(rng), n.sample(rng)];
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if len > 1e-6 {
            return v.map(|x| x / len);
        }
    }
}

/// Lesion field: per voxel (in-mask, modality-1 gain, modality-2 gain).
fn lesion(
    label: Diagnosis,
    spec: &SynthSpec,
    grid: &Grid,
    rng: &mut ChaCha8Rng,
) -> (Vec<u8>, Vec<f64>, Vec<f64>) {
    let n = grid.len();
    let (mut mask, mut g1, mut g2) = (vec![0u8; n], vec![0.0; n], vec![0.0; n]);
    let contrast = rng.random_range(spec.contrast.0..=spec.contrast.1);
    let (rlo, rhi) = spec.radius;
    match label {
        Diagnosis::Glioma => {
            let r = [0; 3].map(|_| rng.random_range(rlo..=rhi));
            let dir = unit_vector(rng);
            let off = rng.random_range(0.0..0.35);
            let c: [f64; 3] = std::array::from_fn(|a| grid.center[a] + dir[a] * off * grid.semi[a]);
            for i in 0..n {
                let p = grid.coord(i);
                let q = (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>().sqrt();
                if q <= 1.0 {
                    mask[i] = 1;
                    g1[i] = 0.4 * contrast;
                    g2[i] = contrast;
                } else if q <= 1.6 {
                    g2[i] = 0.35 * contrast * (1.6 - q) / 0.6;
                }
            }
        }
        Diagnosis::Fcd => {
            let r = rng.random_range(rlo..=(rlo + rhi) / 2.0);
            let dir = unit_vector(rng);
            let depth = rng.random_range(0.7..0.8);
            let c: [f64; 3] = std::array::from_fn(|a| grid.center[a] + dir[a] * depth * grid.semi[a]);
            let sigma = 0.6 * r;
            for i in 0..n {
                let p = grid.coord(i);
                let d2 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>();
                let blob = (-d2 / (2.0 * sigma * sigma)).exp();
                let inside = grid.head_radius(p) < 1.0;
                if inside && d2.sqrt() <= r {
                    mask[i] = 1;
                }
                if inside {
                    g1[i] = 0.5 * contrast * blob;
                    g2[i] = 0.5 * contrast * blob;
                }
            }
        }
        Diagnosis::Infarct => {
            let dir = unit_vector(rng);
            let half_angle = rng.random_range(0.35..0.6f64);
            let (r_in, r_out) = (rng.random_range(0.25..0.4), rng.random_range(0.75..0.9));
            for i in 0..n {
                let p = grid.coord(i);
                let v: [f64; 3] = std::array::from_fn(|a| (p[a] - grid.center[a]) / grid.semi[a]);
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if len < 1e-9 {
                    continue;
                }
                let cos = (v[0] * dir[0] + v[1] * dir[1] + v[2] * dir[2]) / len;
                if len >= r_in && len <= r_out && cos >= half_angle.cos() {
                    mask[i] = 1;
                    g1[i] = contrast;
                    g2[i] = 0.3 * contrast;
                }
            }
        }
    }
    (mask, g1, g2)
}

/// One sample; depends only on (`spec`, `seed`, `index`).
pub fn synth_sample(spec: &SynthSpec, seed: u64, index: usize) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let label = Diagnosis::ALL[index % 3];
    let ext = spec.extents;
    let grid = Grid {
        ext,
        center: std::array::from_fn(|a| (ext[a] as f64 - 1.0) / 2.0 + rng.random_range(-1.0..1.0)),
        semi: std::array::from_fn(|a| ext[a] as f64 * rng.random_range(0.42..0.47)),
    };
    let (mask, g1, g2) = lesion(label, spec, &grid, &mut rng);
    if mask.iter().all(|&m| m == 0) {
        return Err(Error::Parameter(format!("sample {index}: lesion fell outside the volume")));
    }
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("noise sd");
    let base1 = rng.random_range(0.35..0.45);
    let base2 = rng.random_range(0.2..0.3);
    let shade: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.1..0.1));
    let n = grid.len();
    let mut data = vec![0.0; 2 * n];
    for i in 0..n {
        let p = grid.coord(i);
        let r = grid.head_radius(p);
        let tissue = if r < 1.0 {
            let s: f64 = (0..3).map(|a| shade[a] * (p[a] - grid.center[a]) / grid.semi[a]).sum();
            1.0 + s - 0.2 * r * r
        } else {
            0.0
        };
        let v1 = base1 * tissue + g1[i] + if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        let v2 = base2 * tissue + g2[i] + if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        // stored as f32 on disk; round here so files and memory agree
        data[i] = v1 as f32 as f64;
        data[n + i] = v2 as f32 as f64;
    }
    let spacing = spec.spacing.map(|s| s as f32 as f64);
    let volume = Volume::new(Tensor::new(vec![2, ext[0], ext[1], ext[2]], data)?, spacing)?;
    let mask = MaskVolume::new(ext, spacing, mask)?;
    Ok(Sample { volume, mask, label })
}

pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Vec<Sample>> {
    (0..spec.n).map(|i| synth_sample(spec, seed, i)).collect()
}
