//! Evaluation runs, versioned CSV reports and the ablation harness.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::ScanScheme;
use crate::io::write_atomic;
use crate::metrics::{cls_metrics, seg_metrics, ClsMetrics, SegMetrics};
use crate::net::{SegConfig, Segmenter};
use crate::prompt::{Classifier, ClassifierInput, ClsExample, PromptConfig, CLASSES};
use crate::synth::{synth_dataset, Diagnosis, Sample, SynthSpec};
use crate::volume::{load_mask, load_volume, save_mask, save_volume, MaskVolume, Volume};

pub const SEG_SCHEMA: &str = "hilbertmed.seg-metrics.v1";
pub const ABLATION_SCHEMA: &str = "hilbertmed.ablation.v1";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseMetrics {
    pub case: String,
    pub metrics: SegMetrics,
}

/// Per-case metrics of predicted against reference masks.
pub fn evaluate_masks(cases: &[(String, &MaskVolume, &MaskVolume)]) -> Result<Vec<CaseMetrics>> {
    cases
        .iter()
        .map(|(name, pred, gt)| {
            Ok(CaseMetrics {
                case: name.clone(),
                metrics: seg_metrics(pred, gt)?,
            })
        })
        .collect()
}

/// Mean of every metric; hd95 averages the defined values only.
pub fn mean_metrics(rows: &[SegMetrics]) -> Option<SegMetrics> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let hd: Vec<f64> = rows.iter().filter_map(|m| m.hd95).collect();
    Some(SegMetrics {
        dice: rows.iter().map(|m| m.dice).sum::<f64>() / n,
        iou: rows.iter().map(|m| m.iou).sum::<f64>() / n,
        precision: rows.iter().map(|m| m.precision).sum::<f64>() / n,
        sensitivity: rows.iter().map(|m| m.sensitivity).sum::<f64>() / n,
        hd95: (!hd.is_empty()).then(|| hd.iter().sum::<f64>() / hd.len() as f64),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn seg_fields(m: &SegMetrics) -> [String; 5] {
    [
        format!("{:.6}", m.dice),
        format!("{:.6}", m.iou),
        format!("{:.6}", m.precision),
        format!("{:.6}", m.sensitivity),
        fmt_opt(m.hd95),
    ]
}

fn csv_bytes(schema: &str, header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut out = format!("# schema: {schema}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let fail = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(header).map_err(fail)?;
        for r in rows {
            w.write_record(r).map_err(fail)?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

/// Schema line, header, one row per case and a final `mean` row.
pub fn metrics_csv(rows: &[CaseMetrics]) -> Result<Vec<u8>> {
    let mut lines: Vec<Vec<String>> = rows
        .iter()
        .map(|r| std::iter::once(r.case.clone()).chain(seg_fields(&r.metrics)).collect())
        .collect();
    let all: Vec<SegMetrics> = rows.iter().map(|r| r.metrics).collect();
    if let Some(mean) = mean_metrics(&all) {
        lines.push(std::iter::once("mean".to_string()).chain(seg_fields(&mean)).collect());
    }
    csv_bytes(SEG_SCHEMA, &["case", "dice", "iou", "precision", "sensitivity", "hd95_mm"], &lines)
}

pub fn write_metrics_csv(path: &Path, rows: &[CaseMetrics]) -> Result<()> {
    write_atomic(path, &metrics_csv(rows)?)
}

/// Datasets for one experiment, each drawn from its own seed. The classifier
/// gets a larger training set of its own: labels are cheap once masks exist,
/// and it only ever sees ground-truth masks during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPlan {
    pub synth: SynthSpec,
    pub train: usize,
    pub test: usize,
    pub cls_train: usize,
    pub train_seed: u64,
    pub test_seed: u64,
    pub cls_train_seed: u64,
}

pub struct Benchmark {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub cls_train: Vec<Sample>,
}

impl Default for DataPlan {
    fn default() -> Self {
        DataPlan {
            synth: SynthSpec::default(),
            train: 60,
            test: 20,
            cls_train: 180,
            train_seed: 100,
            test_seed: 200,
            cls_train_seed: 300,
        }
    }
}

impl DataPlan {
    pub fn build(&self) -> Result<Benchmark> {
        let make = |n, seed| synth_dataset(&SynthSpec { n, ..self.synth.clone() }, seed);
        Ok(Benchmark {
            train: make(self.train, self.train_seed)?,
            test: make(self.test, self.test_seed)?,
            cls_train: make(self.cls_train, self.cls_train_seed)?,
        })
    }
}

pub struct SegRun {
    pub segmenter: Segmenter,
    pub predictions: Vec<MaskVolume>,
    pub cases: Vec<CaseMetrics>,
    pub mean: SegMetrics,
}

/// Train a segmenter on `train` and score it on `test`.
pub fn train_and_eval_seg(cfg: SegConfig, train: &[Sample], test: &[Sample]) -> Result<SegRun> {
    let mut segmenter = Segmenter::new(cfg)?;
    let pairs: Vec<_> = train.iter().map(|s| (&s.volume, &s.mask)).collect();
    let steps = segmenter.model.cfg.steps;
    segmenter.fit(&pairs, steps, |_, _| {})?;
    let predictions = test.iter().map(|s| segmenter.segment(&s.volume)).collect::<Result<Vec<_>>>()?;
    let named: Vec<_> = test
        .iter()
        .zip(&predictions)
        .enumerate()
        .map(|(i, (s, p))| (format!("case{i:03}"), p, &s.mask))
        .collect();
    let cases = evaluate_masks(&named)?;
    let all: Vec<SegMetrics> = cases.iter().map(|c| c.metrics).collect();
    let mean = mean_metrics(&all).ok_or_else(|| Error::Parameter("empty test set".into()))?;
    Ok(SegRun { segmenter, predictions, cases, mean })
}

/// Train a classifier on ground-truth masks, then classify `test` with the
/// given masks (usually a segmenter's predictions).
pub fn train_and_eval_cls(
    cfg: PromptConfig,
    train: &[Sample],
    test: &[Sample],
    test_masks: &[MaskVolume],
) -> Result<(Classifier, ClsMetrics)> {
    if test.len() != test_masks.len() {
        return Err(Error::dim("classification test masks", &[test.len()], &[test_masks.len()]));
    }
    let mut c = Classifier::new(cfg)?;
    let examples: Vec<_> = train
        .iter()
        .map(|s| ClsExample { volume: &s.volume, mask: &s.mask, gt_mask: &s.mask, label: s.label })
        .collect();
    let steps = c.model.cfg.steps;
    c.fit(&examples, steps, |_, _| {})?;
    let pred = test
        .iter()
        .zip(test_masks)
        .map(|(s, m)| Ok(c.classify(&ClassifierInput { volume: &s.volume, mask: m })?.label.index()))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<usize> = test.iter().map(|s| s.label.index()).collect();
    let m = cls_metrics(&pred, &truth, CLASSES)?;
    Ok((c, m))
}

/// Cartesian grid of runs; every `(scan, memory, seed)` cell trains one
/// segmenter, and every λ then trains one classifier on top of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationGrid {
    pub scan_orders: Vec<ScanScheme>,
    pub memory: Vec<bool>,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub seg: SegConfig,
    pub cls: PromptConfig,
    pub data: DataPlan,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            scan_orders: vec![ScanScheme::Hilbert, ScanScheme::Raster],
            memory: vec![true],
            lambdas: vec![],
            seeds: vec![0],
            seg: SegConfig::default(),
            cls: PromptConfig::default(),
            data: DataPlan::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub scan_order: ScanScheme,
    pub memory: bool,
    pub lambda: Option<f64>,
    pub seed: u64,
    pub seg: Option<SegMetrics>,
    pub cls: Option<ClsMetrics>,
    /// `ok`, or the error that stopped this run.
    pub status: String,
}

fn run_cell(
    grid: &AblationGrid,
    data: &Benchmark,
    scan: ScanScheme,
    memory: bool,
    seed: u64,
) -> Vec<AblationRow> {
    let row = |lambda, seg, cls, status: String| AblationRow { scan_order: scan, memory, lambda, seed, seg, cls, status };
    let cfg = SegConfig { hilbert_variant: scan, memory, seed, ..grid.seg.clone() };
    let run = match train_and_eval_seg(cfg, &data.train, &data.test) {
        Ok(r) => r,
        Err(e) => {
            let lambdas: Vec<Option<f64>> = if grid.lambdas.is_empty() {
                vec![None]
            } else {
                grid.lambdas.iter().map(|&l| Some(l)).collect()
            };
            return lambdas.into_iter().map(|l| row(l, None, None, e.to_string())).collect();
        }
    };
    if grid.lambdas.is_empty() {
        return vec![row(None, Some(run.mean), None, "ok".into())];
    }
    grid.lambdas
        .iter()
        .map(|&lambda| {
            let cfg = PromptConfig { lambda, seed, ..grid.cls.clone() };
            match train_and_eval_cls(cfg, &data.cls_train, &data.test, &run.predictions) {
                Ok((_, m)) => row(Some(lambda), Some(run.mean), Some(m), "ok".into()),
                Err(e) => row(Some(lambda), Some(run.mean), None, e.to_string()),
            }
        })
        .collect()
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    if jobs == 0 {
        return Err(Error::Parameter("jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| Error::State(e.to_string()))
}

/// Segment every volume on up to `jobs` threads; output order follows input.
pub fn segment_all(seg: &Segmenter, volumes: &[&Volume], jobs: usize) -> Result<Vec<MaskVolume>> {
    pool(jobs)?.install(|| volumes.par_iter().map(|v| seg.segment(v)).collect())
}

/// Run every grid cell on up to `jobs` threads. Rows come back in grid order
/// regardless of scheduling; a failing run is reported in its row.
pub fn run_ablation(grid: &AblationGrid, jobs: usize) -> Result<Vec<AblationRow>> {
    if grid.scan_orders.is_empty() || grid.memory.is_empty() || grid.seeds.is_empty() {
        return Err(Error::Parameter("ablation grid has an empty axis".into()));
    }
    let data = grid.data.build()?;
    let mut cells = Vec::new();
    for &scan in &grid.scan_orders {
        for &memory in &grid.memory {
            for &seed in &grid.seeds {
                cells.push((scan, memory, seed));
            }
        }
    }
    let rows: Vec<Vec<AblationRow>> = pool(jobs)?.install(|| {
        cells
            .par_iter()
            .map(|&(scan, memory, seed)| run_cell(grid, &data, scan, memory, seed))
            .collect()
    });
    Ok(rows.into_iter().flatten().collect())
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<Vec<u8>> {
    let header = [
        "scan_order", "memory", "lambda", "seed", "dice", "iou", "precision", "sensitivity", "hd95_mm", "acc",
        "cls_recall", "cls_precision", "cls_f1", "status",
    ];
    let lines: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![
                r.scan_order.as_str().to_string(),
                if r.memory { "on" } else { "off" }.to_string(),
                fmt_opt(r.lambda),
                r.seed.to_string(),
            ];
            match &r.seg {
                Some(m) => v.extend(seg_fields(m)),
                None => v.extend(std::iter::repeat_n(String::new(), 5)),
            }
            match &r.cls {
                Some(c) => v.extend([c.acc, c.recall, c.precision, c.f1].map(|x| format!("{x:.6}"))),
                None => v.extend(std::iter::repeat_n(String::new(), 4)),
            }
            v.push(r.status.clone());
            v
        })
        .collect();
    csv_bytes(ABLATION_SCHEMA, &header, &lines)
}

/// Mean test Dice per scan order, over the rows that completed.
pub fn mean_dice_by_order(rows: &[AblationRow], scan: ScanScheme) -> Option<f64> {
    let d: Vec<f64> = rows
        .iter()
        .filter(|r| r.scan_order == scan)
        .filter_map(|r| r.seg.as_ref().map(|m| m.dice))
        .collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

/// Fraction of a label set per class; used to sanity-check generated data.
pub fn class_counts(samples: &[Sample]) -> [usize; CLASSES] {
    let mut c = [0; CLASSES];
    for s in samples {
        c[s.label.index()] += 1;
    }
    c
}

pub const DATASET_SCHEMA: &str = "hilbertmed.dataset.v1";
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub label: Diagnosis,
}

/// `manifest.json` of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub seed: u64,
    pub spec: SynthSpec,
    pub cases: Vec<CaseEntry>,
}

/// Write `samples` as HVOL image/mask pairs plus a manifest.
pub fn save_dataset(dir: &Path, spec: &SynthSpec, seed: u64, samples: &[Sample]) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut cases = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let id = format!("case{i:03}");
        let entry = CaseEntry {
            image: format!("{id}_image.hvol"),
            mask: format!("{id}_mask.hvol"),
            id,
            label: s.label,
        };
        save_volume(&s.volume, &dir.join(&entry.image))?;
        save_mask(&s.mask, &dir.join(&entry.mask))?;
        cases.push(entry);
    }
    let manifest = Manifest { schema: DATASET_SCHEMA.into(), seed, spec: spec.clone(), cases };
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    json.push(b'\n');
    write_atomic(&dir.join(MANIFEST), &json)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<Sample>)> {
    let path = dir.join(MANIFEST);
    let bytes = std::fs::read(&path)
        .map_err(|e| Error::State(format!("cannot read dataset manifest {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::Format(e.to_string()))?;
    if manifest.schema != DATASET_SCHEMA {
        return Err(Error::Format(format!("unsupported dataset schema '{}'", manifest.schema)));
    }
    let samples = manifest
        .cases
        .iter()
        .map(|c| {
            Ok(Sample {
                volume: load_volume(&dir.join(&c.image))?,
                mask: load_mask(&dir.join(&c.mask))?,
                label: c.label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(ext: [usize; 3], on: &[usize]) -> MaskVolume {
        let mut d = vec![0u8; ext.iter().product()];
        on.iter().for_each(|&i| d[i] = 1);
        MaskVolume::new(ext, [1.0; 3], d).unwrap()
    }

    #[test]
    fn csv_has_schema_rows_and_mean() {
        let a = mask([2, 2, 2], &[0, 1]);
        let b = mask([2, 2, 2], &[0]);
        let empty = mask([2, 2, 2], &[]);
        let rows = evaluate_masks(&[("a".into(), &a, &a), ("b".into(), &b, &a), ("e".into(), &empty, &a)]).unwrap();
        let text = String::from_utf8(metrics_csv(&rows).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], format!("# schema: {SEG_SCHEMA}"));
        assert_eq!(lines[1], "case,dice,iou,precision,sensitivity,hd95_mm");
        assert_eq!(lines.len(), 2 + 3 + 1);
        assert!(lines[2].starts_with("a,1.000000,1.000000,1.000000,1.000000,0.000000"));
        assert!(lines[4].ends_with(','), "undefined hd95 is blank: {}", lines[4]);
        let mean_dice: f64 = lines[5].split(',').nth(1).unwrap().parse().unwrap();
        assert!((mean_dice - (1.0 + 2.0 / 3.0 + 0.0) / 3.0).abs() < 1e-6);
    }

    #[test]
    fn ablation_rows_keep_failures() {
        let rows = vec![
            AblationRow {
                scan_order: ScanScheme::Hilbert,
                memory: true,
                lambda: Some(0.5),
                seed: 1,
                seg: None,
                cls: None,
                status: "numeric error: boom".into(),
            },
        ];
        let text = String::from_utf8(ablation_csv(&rows).unwrap()).unwrap();
        let last = text.lines().last().unwrap();
        assert_eq!(last, "hilbert,on,0.500000,1,,,,,,,,,,numeric error: boom");
    }

    #[test]
    fn tiny_grid_one_row_and_failure_isolated() {
        let tiny = AblationGrid {
            scan_orders: vec![ScanScheme::Raster],
            seeds: vec![3],
            seg: SegConfig { steps: 1, channels: [2, 2, 2, 2], d_state: 2, ..SegConfig::default() },
            data: DataPlan {
                synth: SynthSpec { extents: [16, 16, 16], radius: (2.0, 3.0), ..SynthSpec::default() },
                train: 2,
                test: 2,
                cls_train: 4,
                ..DataPlan::default()
            },
            ..AblationGrid::default()
        };
        let rows = run_ablation(&tiny, 1).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].status, "ok");
        assert_eq!(rows, run_ablation(&tiny, 1).unwrap());
        let bad = AblationGrid { lambdas: vec![0.5], cls: PromptConfig { batch: 5, ..PromptConfig::default() }, ..tiny };
        let rows = run_ablation(&bad, 1).unwrap();
        assert!(rows[0].seg.is_some());
        assert!(rows[0].status.contains("at least 5"), "{}", rows[0].status);
    }

    #[test]
    fn dataset_roundtrip() {
        let spec = SynthSpec { n: 3, extents: [16, 16, 16], radius: (2.0, 3.0), ..SynthSpec::default() };
        let s = synth_dataset(&spec, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = save_dataset(dir.path(), &spec, 5, &s).unwrap();
        let (m2, back) = load_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(back.len(), 3);
        for (a, b) in s.iter().zip(&back) {
            assert_eq!(a.volume, b.volume);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.label, b.label);
        }
        assert!(matches!(load_dataset(&dir.path().join("missing")), Err(Error::State(_))));
    }

    #[test]
    fn class_mix_is_balanced() {
        let s = synth_dataset(&SynthSpec { n: 9, extents: [16, 16, 16], radius: (2.0, 3.0), ..SynthSpec::default() }, 1).unwrap();
        assert_eq!(class_counts(&s), [3, 3, 3]);
        assert!(s.iter().all(|x| Diagnosis::ALL.contains(&x.label)));
    }
}
