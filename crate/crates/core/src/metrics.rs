//! Segmentation and classification metrics.
//!
//! Overlap conventions: when a ratio's denominator is zero, the score is 1
//! if both masks are empty and 0 otherwise. HD95 is the larger of the two
//! directed 95th percentiles (linear interpolation) of distances between
//! surface voxels, with physical spacing; it is undefined when either mask
//! is empty.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::volume::{MaskVolume, Spacing};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn of(pred: &MaskVolume, gt: &MaskVolume) -> Result<Self> {
        if pred.extents != gt.extents {
            return Err(Error::dim("mask comparison", &pred.extents, &gt.extents));
        }
        let mut c = Confusion::default();
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            match (p, g) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        Ok(c)
    }

    fn ratio(&self, num: usize, den: usize) -> f64 {
        if den == 0 {
            if self.tp + self.fp + self.fn_ == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            num as f64 / den as f64
        }
    }

    pub fn dice(&self) -> f64 {
        self.ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn iou(&self) -> f64 {
        self.ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        self.ratio(self.tp, self.tp + self.fp)
    }

    pub fn sensitivity(&self) -> f64 {
        self.ratio(self.tp, self.tp + self.fn_)
    }
}

pub fn dice(pred: &MaskVolume, gt: &MaskVolume) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.dice())
}

pub fn iou(pred: &MaskVolume, gt: &MaskVolume) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.iou())
}

pub fn precision(pred: &MaskVolume, gt: &MaskVolume) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.precision())
}

pub fn sensitivity(pred: &MaskVolume, gt: &MaskVolume) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.sensitivity())
}

/// Voxels of the mask with at least one face neighbour outside the mask;
/// the volume border counts as outside.
pub fn surface(mask: &MaskVolume) -> Vec<bool> {
    let [d, h, w] = mask.extents;
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut out = vec![false; mask.data.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if mask.data[idx(z, y, x)] == 0 {
                    continue;
                }
                let edge = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                out[idx(z, y, x)] = edge
                    || mask.data[idx(z - 1, y, x)] == 0
                    || mask.data[idx(z + 1, y, x)] == 0
                    || mask.data[idx(z, y - 1, x)] == 0
                    || mask.data[idx(z, y + 1, x)] == 0
                    || mask.data[idx(z, y, x - 1)] == 0
                    || mask.data[idx(z, y, x + 1)] == 0;
            }
        }
    }
    out
}

/// One pass of the lower-envelope squared distance transform along a line
/// with sample spacing `s`.
fn edt_line(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let pos = |q: usize| q as f64 * s;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let boundary = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if boundary <= *z.last().expect("paired with v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(boundary);
                break;
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < pos(q) {
            k += 1;
        }
        let dx = pos(q) - pos(v[k]);
        *o = dx * dx + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every voxel to the nearest `true`
/// voxel of `seeds`, under anisotropic `spacing` (D, H, W).
pub fn squared_edt(seeds: &[bool], extents: [usize; 3], spacing: Spacing) -> Vec<f64> {
    let [d, h, w] = extents;
    let mut g: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let strides = [h * w, w, 1];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = extents[axis];
        let stride = strides[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        for base in 0..d * h * w {
            // visit each line once, from its first element
            let coord = base / stride % n;
            if coord != 0 {
                continue;
            }
            for (i, l) in line.iter_mut().enumerate() {
                *l = g[base + i * stride];
            }
            edt_line(&line, spacing[axis], &mut out, &mut v, &mut z);
            for (i, o) in out.iter().enumerate() {
                g[base + i * stride] = *o;
            }
        }
    }
    g
}

/// numpy-style percentile with linear interpolation on sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn directed(from: &[bool], to_dist: &[f64]) -> Vec<f64> {
    let mut d: Vec<f64> = from
        .iter()
        .zip(to_dist)
        .filter(|(s, _)| **s)
        .map(|(_, &d2)| d2.sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    d
}

/// 95th-percentile Hausdorff distance in mm, `None` if either mask is empty.
pub fn hd95(pred: &MaskVolume, gt: &MaskVolume, spacing: Spacing) -> Result<Option<f64>> {
    if pred.extents != gt.extents {
        return Err(Error::dim("hd95", &pred.extents, &gt.extents));
    }
    if pred.count() == 0 || gt.count() == 0 {
        return Ok(None);
    }
    let (sp, sg) = (surface(pred), surface(gt));
    let to_g = squared_edt(&sg, gt.extents, spacing);
    let to_p = squared_edt(&sp, pred.extents, spacing);
    let a = percentile(&directed(&sp, &to_g), 95.0);
    let b = percentile(&directed(&sg, &to_p), 95.0);
    Ok(Some(a.max(b)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SegMetrics {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub hd95: Option<f64>,
}

pub fn seg_metrics(pred: &MaskVolume, gt: &MaskVolume) -> Result<SegMetrics> {
    let c = Confusion::of(pred, gt)?;
    Ok(SegMetrics {
        dice: c.dice(),
        iou: c.iou(),
        precision: c.precision(),
        sensitivity: c.sensitivity(),
        hd95: hd95(pred, gt, gt.spacing())?,
    })
}

/// Macro-averaged classification metrics; `f1` is the harmonic mean of the
/// macro precision and macro recall.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClsMetrics {
    pub acc: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

pub fn cls_metrics(pred: &[usize], truth: &[usize], classes: usize) -> Result<ClsMetrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::dim("cls_metrics", &[pred.len()], &[truth.len()]));
    }
    if pred.iter().chain(truth).any(|&c| c >= classes) {
        return Err(Error::Parameter(format!("class index out of range 0..{classes}")));
    }
    let mut cm = vec![vec![0usize; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        cm[t][p] += 1;
    }
    let correct: usize = (0..classes).map(|c| cm[c][c]).sum();
    let (mut prec, mut rec) = (0.0, 0.0);
    for c in 0..classes {
        let predicted: usize = (0..classes).map(|t| cm[t][c]).sum();
        let actual: usize = cm[c].iter().sum();
        prec += if predicted == 0 { 0.0 } else { cm[c][c] as f64 / predicted as f64 };
        rec += if actual == 0 { 0.0 } else { cm[c][c] as f64 / actual as f64 };
    }
    let (precision, recall) = (prec / classes as f64, rec / classes as f64);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ClsMetrics {
        acc: correct as f64 / pred.len() as f64,
        recall,
        precision,
        f1,
    })
}
