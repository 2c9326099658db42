//! `hilbertmed` command-line tool.
//!
//! Data goes to stdout (CSV or JSON), progress and logs to stderr. Runtime
//! failures exit with status 1 and a single JSON object on stderr; usage
//! errors exit with status 2.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::json;

use hilbertmed::evalkit::{
    ablation_csv, evaluate_masks, load_dataset, metrics_csv, run_ablation, save_dataset, segment_all, AblationGrid,
};
use hilbertmed::gradsuite;
use hilbertmed::hilbert::{build_hilbert_map, locality_report, ScanScheme};
use hilbertmed::io::write_atomic;
use hilbertmed::memory::GateKernel;
use hilbertmed::metrics::cls_metrics;
use hilbertmed::net::{SegConfig, Segmenter};
use hilbertmed::prompt::{
    extract_attributes, render_sentence, Classifier, ClassifierInput, ClassifierMode, ClsExample, PromptConfig,
    CLASSES,
};
use hilbertmed::synth::{synth_dataset, Diagnosis, SynthSpec};
use hilbertmed::volume::{load_mask, load_volume, save_mask, MaskVolume};
use hilbertmed::{Error, Result};

#[derive(Parser)]
#[command(name = "hilbertmed", version, about = "Hilbert-serialized state-space segmentation and prompt-fused classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Curve tables and locality statistics.
    #[command(subcommand)]
    Hilbert(HilbertCmd),
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train a segmentation model.
    TrainSeg(TrainSegArgs),
    /// Score a segmentation model on a dataset; writes a metrics CSV.
    EvalSeg(EvalSegArgs),
    /// Train a lesion classifier.
    TrainCls(TrainClsArgs),
    /// Score a classifier on a dataset.
    EvalCls(EvalClsArgs),
    /// Segment one volume.
    Segment(SegmentArgs),
    /// Print the attributes and sentence derived from a mask.
    Prompt(PromptArgs),
    /// Classify one volume given its lesion mask.
    Classify(ClassifyArgs),
    /// Run an ablation grid; writes a CSV report.
    Ablate(AblateArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Subcommand)]
enum HilbertCmd {
    /// Print `index,x,y[,z]` rows of a Hilbert curve.
    Map {
        #[arg(long, value_parser = clap::value_parser!(u32).range(2..=3))]
        dims: u32,
        #[arg(long)]
        order: u32,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adjacent-index gap statistics of each scan order on a grid.
    Locality {
        /// Grid extents, e.g. `16,16,16`.
        #[arg(long, value_parser = parse_grid)]
        grid: Grid,
        #[arg(long, value_enum, default_value = "all")]
        scheme: SchemeArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Hilbert,
    Raster,
    Morton,
    All,
}

impl SchemeArg {
    fn schemes(self) -> Vec<ScanScheme> {
        match self {
            SchemeArg::Hilbert => vec![ScanScheme::Hilbert],
            SchemeArg::Raster => vec![ScanScheme::Raster],
            SchemeArg::Morton => vec![ScanScheme::Morton],
            SchemeArg::All => ScanScheme::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScanArg {
    Hilbert,
    Raster,
    Morton,
}

impl From<ScanArg> for ScanScheme {
    fn from(a: ScanArg) -> Self {
        match a {
            ScanArg::Hilbert => ScanScheme::Hilbert,
            ScanArg::Raster => ScanScheme::Raster,
            ScanArg::Morton => ScanScheme::Morton,
        }
    }
}

#[derive(Args)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed; falls back to the config file, then HVLM_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Volume extents `D,H,W`.
    #[arg(long, value_parser = parse_triple::<usize>)]
    extents: Option<[usize; 3]>,
}

#[derive(Args)]
struct TrainSegArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path; the config is written next to it as `<path>.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    scan_order: Option<ScanArg>,
    #[arg(long)]
    memory: Option<bool>,
    #[arg(long, value_enum)]
    gate_kernel: Option<GateArg>,
    /// Worker threads; training is sequential, so any value gives the same model.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Print the mean loss every this many steps (0 disables).
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum GateArg {
    Pixel,
    Conv3,
}

#[derive(Args)]
struct EvalSegArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct TrainClsArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fused,
    ImageOnly,
}

#[derive(Args)]
struct EvalClsArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Build prompts from this segmenter's predictions instead of the
    /// dataset's reference masks.
    #[arg(long)]
    seg_ckpt: Option<PathBuf>,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PromptArgs {
    #[arg(long)]
    mask: PathBuf,
    /// Voxel spacing `D,H,W` in mm; defaults to the file's spacing.
    #[arg(long, value_parser = parse_triple::<f64>)]
    spacing: Option<[f64; 3]>,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    mask: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// TOML grid; defaults to hilbert vs raster, memory on, seed 0.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// `ops`, `ssm`, `blocks`, `all` or a single target name.
    #[arg(long, default_value = "all")]
    target: String,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Hilbert(h) => hilbert(h),
        Command::Synth(a) => synth(a),
        Command::TrainSeg(a) => train_seg(a),
        Command::EvalSeg(a) => eval_seg(a),
        Command::TrainCls(a) => train_cls(a),
        Command::EvalCls(a) => eval_cls(a),
        Command::Segment(a) => segment(a),
        Command::Prompt(a) => prompt(a),
        Command::Classify(a) => classify(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, bytes),
        None => {
            use std::io::Write;
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    emit(None, s.as_bytes())
}

/// Parse a TOML config into `T`, reporting whether it set `seed`.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<(T, bool)> {
    let Some(path) = path else {
        return Ok((T::default(), false));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Parameter(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Format(format!("config {}: {}", path.display(), e.message())))?;
    let has_seed = table.contains_key("seed");
    let cfg = T::deserialize(toml::Value::Table(table))
        .map_err(|e| Error::Format(format!("config {}: {}", path.display(), e.message())))?;
    Ok((cfg, has_seed))
}

/// Flag, then config file, then `HVLM_SEED`, then the built-in default.
fn resolve_seed(flag: Option<u64>, from_file: bool, current: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if from_file {
        return Ok(current);
    }
    match std::env::var("HVLM_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Parameter(format!("HVLM_SEED must be an unsigned integer, got '{v}'"))),
        Err(_) => Ok(current),
    }
}

fn hilbert(cmd: HilbertCmd) -> Result<()> {
    match cmd {
        HilbertCmd::Map { dims, order, out } => {
            let map = build_hilbert_map(dims, order)?;
            emit(out.as_deref(), map.to_csv().as_bytes())
        }
        HilbertCmd::Locality { grid, scheme } => {
            let reports = scheme
                .schemes()
                .into_iter()
                .map(|s| locality_report(s, &grid.0))
                .collect::<Result<Vec<_>>>()?;
            print_json(&reports)
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let (mut spec, has_seed): (SynthSpec, bool) = load_config(a.common.config.as_deref())?;
    let seed = resolve_seed(a.common.seed, has_seed, 0)?;
    if let Some(n) = a.n {
        spec.n = n;
    }
    if let Some(e) = a.extents {
        spec.extents = e;
    }
    let samples = synth_dataset(&spec, seed)?;
    let manifest = save_dataset(&a.out, &spec, seed, &samples)?;
    eprintln!("wrote {} cases to {}", manifest.cases.len(), a.out.display());
    Ok(())
}

fn seg_config(a: &TrainSegArgs) -> Result<SegConfig> {
    let (mut cfg, has_seed): (SegConfig, bool) = load_config(a.common.config.as_deref())?;
    cfg.seed = resolve_seed(a.common.seed, has_seed, cfg.seed)?;
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.scan_order {
        cfg.hilbert_variant = v.into();
    }
    if let Some(v) = a.memory {
        cfg.memory = v;
    }
    if let Some(v) = a.gate_kernel {
        cfg.gate_kernel = match v {
            GateArg::Pixel => GateKernel::Pixel,
            GateArg::Conv3 => GateKernel::Conv3,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("'{p}' is not a valid number")))
        .collect()
}

fn parse_triple<T: std::str::FromStr + Copy>(s: &str) -> std::result::Result<[T; 3], String> {
    let v = parse_list::<T>(s)?;
    <[T; 3]>::try_from(v).map_err(|v| format!("expected 3 comma-separated values, got {}", v.len()))
}

#[derive(Clone)]
struct Grid(Vec<usize>);

fn parse_grid(s: &str) -> std::result::Result<Grid, String> {
    let v = parse_list(s)?;
    if !(2..=3).contains(&v.len()) {
        return Err(format!("expected 2 or 3 comma-separated extents, got {}", v.len()));
    }
    Ok(Grid(v))
}

fn check_jobs(jobs: usize) -> Result<()> {
    if jobs == 0 {
        return Err(Error::Parameter("--jobs must be at least 1".into()));
    }
    Ok(())
}

fn train_seg(a: TrainSegArgs) -> Result<()> {
    check_jobs(a.jobs)?;
    let cfg = seg_config(&a)?;
    let (_, samples) = load_dataset(&a.data)?;
    let pairs: Vec<_> = samples.iter().map(|s| (&s.volume, &s.mask)).collect();
    let steps = cfg.steps;
    let mut seg = Segmenter::new(cfg)?;
    let (mut acc, mut last) = (0.0, f64::NAN);
    seg.fit(&pairs, steps, |i, loss| {
        acc += loss;
        last = loss;
        if a.log_every > 0 && (i + 1) % a.log_every == 0 {
            eprintln!("step {} mean_loss {:.6}", i + 1, acc / a.log_every as f64);
            acc = 0.0;
        }
    })?;
    seg.save(&a.out)?;
    print_json(&json!({ "checkpoint": a.out, "steps": steps, "final_loss": last }))
}

fn eval_seg(a: EvalSegArgs) -> Result<()> {
    check_jobs(a.jobs)?;
    let seg = Segmenter::load(&a.ckpt)?;
    let (manifest, samples) = load_dataset(&a.data)?;
    let volumes: Vec<_> = samples.iter().map(|s| &s.volume).collect();
    let preds = segment_all(&seg, &volumes, a.jobs)?;
    let cases: Vec<_> = manifest
        .cases
        .iter()
        .zip(&samples)
        .zip(&preds)
        .map(|((c, s), p)| (c.id.clone(), p, &s.mask))
        .collect();
    let rows = evaluate_masks(&cases)?;
    emit(a.out.as_deref(), &metrics_csv(&rows)?)
}

fn train_cls(a: TrainClsArgs) -> Result<()> {
    let (mut cfg, has_seed): (PromptConfig, bool) = load_config(a.common.config.as_deref())?;
    cfg.seed = resolve_seed(a.common.seed, has_seed, cfg.seed)?;
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(m) = a.mode {
        cfg.mode = match m {
            ModeArg::Fused => ClassifierMode::Fused,
            ModeArg::ImageOnly => ClassifierMode::ImageOnly,
        };
    }
    let (_, samples) = load_dataset(&a.data)?;
    let examples: Vec<_> = samples
        .iter()
        .map(|s| ClsExample { volume: &s.volume, mask: &s.mask, gt_mask: &s.mask, label: s.label })
        .collect();
    let steps = cfg.steps;
    let mut c = Classifier::new(cfg)?;
    let (mut acc, mut last) = (0.0, f64::NAN);
    c.fit(&examples, steps, |i, loss| {
        acc += loss;
        last = loss;
        if a.log_every > 0 && (i + 1) % a.log_every == 0 {
            eprintln!("step {} mean_loss {:.6}", i + 1, acc / a.log_every as f64);
            acc = 0.0;
        }
    })?;
    c.save(&a.out)?;
    print_json(&json!({ "checkpoint": a.out, "steps": steps, "final_loss": last }))
}

fn eval_cls(a: EvalClsArgs) -> Result<()> {
    let c = Classifier::load(&a.ckpt)?;
    let (_, samples) = load_dataset(&a.data)?;
    let masks: Vec<MaskVolume> = match &a.seg_ckpt {
        Some(p) => {
            let seg = Segmenter::load(p)?;
            samples.iter().map(|s| seg.segment(&s.volume)).collect::<Result<_>>()?
        }
        None => samples.iter().map(|s| s.mask.clone()).collect(),
    };
    let pred = samples
        .iter()
        .zip(&masks)
        .map(|(s, m)| Ok(c.classify(&ClassifierInput { volume: &s.volume, mask: m })?.label.index()))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<usize> = samples.iter().map(|s| s.label.index()).collect();
    print_json(&cls_metrics(&pred, &truth, CLASSES)?)
}

fn segment(a: SegmentArgs) -> Result<()> {
    let seg = Segmenter::load(&a.ckpt)?;
    let vol = load_volume(&a.volume)?;
    let mask = seg.segment(&vol)?;
    save_mask(&mask, &a.out)?;
    print_json(&json!({ "mask": a.out, "voxels": mask.count() }))
}

fn prompt(a: PromptArgs) -> Result<()> {
    let mask = load_mask(&a.mask)?;
    let spacing = match a.spacing {
        Some(s) => {
            if s.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Parameter(format!("spacing must be positive, got {s:?}")));
            }
            s
        }
        None => mask.spacing(),
    };
    let attrs = extract_attributes(&mask, spacing);
    let sentence = render_sentence(&attrs);
    print_json(&json!({ "attributes": attrs, "sentence": sentence }))
}

fn classify(a: ClassifyArgs) -> Result<()> {
    let c = Classifier::load(&a.ckpt)?;
    let vol = load_volume(&a.volume)?;
    let mask = load_mask(&a.mask)?;
    let p = c.classify(&ClassifierInput { volume: &vol, mask: &mask })?;
    let probs: serde_json::Map<String, serde_json::Value> = Diagnosis::ALL
        .iter()
        .map(|d| (d.as_str().to_string(), json!(p.probs[d.index()])))
        .collect();
    print_json(&json!({ "label": p.label, "probs": probs }))
}

fn ablate(a: AblateArgs) -> Result<()> {
    check_jobs(a.jobs)?;
    let (grid, _): (AblationGrid, bool) = load_config(a.config.as_deref())?;
    let rows = run_ablation(&grid, a.jobs)?;
    for r in &rows {
        eprintln!(
            "{} memory={} lambda={:?} seed={} dice={:?} status={}",
            r.scan_order.as_str(),
            r.memory,
            r.lambda,
            r.seed,
            r.seg.as_ref().map(|m| m.dice),
            r.status
        );
    }
    emit(a.out.as_deref(), &ablation_csv(&rows)?)
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(Error::Parameter("--seeds must be at least 1".into()));
    }
    let targets = gradsuite::select(&a.target)?;
    let mut out = String::from("target,group,seeds,max_rel_err,tolerance,pass\n");
    let mut failed = Vec::new();
    for t in &targets {
        let mut worst = 0.0f64;
        for seed in 0..a.seeds {
            let r = t.run(seed)?;
            // NaN must not read as a pass
            worst = if r.max_rel_err.is_nan() { f64::NAN } else { worst.max(r.max_rel_err) };
        }
        let tol = t.group.tolerance();
        let pass = worst <= tol;
        if !pass {
            failed.push(t.name);
        }
        out.push_str(&format!(
            "{},{},{},{:.3e},{:.0e},{}\n",
            t.name,
            serde_json::to_value(t.group).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
            a.seeds,
            worst,
            tol,
            pass
        ));
    }
    emit(None, out.as_bytes())?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check above tolerance: {}", failed.join(", "))))
    }
}
