//! Acceptance suite: one line per criterion, thresholds pinned.
//!
//! Runs as a plain binary (no libtest harness) so the report stays in
//! criterion order. Set `ACCEPTANCE_ONLY=1,3,7` to run a subset while
//! developing; the default runs everything.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use hilbertmed::blocks::zero_params;
use hilbertmed::evalkit::{train_and_eval_cls, train_and_eval_seg, Benchmark, DataPlan, SegRun};
use hilbertmed::gradsuite;
use hilbertmed::hilbert::{build_hilbert_map, locality_report, ScanOrder, ScanScheme};
use hilbertmed::init::Init;
use hilbertmed::memory::{gate_update, GateKernel, GateWeights};
use hilbertmed::metrics::{dice, hd95, iou, precision, sensitivity};
use hilbertmed::net::{SegConfig, SegModel, Segmenter};
use hilbertmed::numkernel::{Ctx, ParamStore, Tape, Tensor};
use hilbertmed::prompt::{extract_attributes, jvlm_loss, ClassifierMode, PromptConfig};
use hilbertmed::ssm::{scan_chunked, scan_sequential, ScanInputs};
use hilbertmed::volume::MaskVolume;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria that cannot hold as stated; they still run and print FAIL, and
/// passing unexpectedly is reported as an error so this list stays honest.
const KNOWN_UNATTAINABLE: &[u32] = &[2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Criterion {
    id: u32,
    title: &'static str,
    budget: Duration,
}

/// Trained segmentation state shared by criteria 8, 9 and 11.
#[derive(Default)]
struct Shared {
    data: Option<Benchmark>,
    hilbert_seed0: Option<SegRun>,
}

impl Shared {
    fn data(&mut self) -> &Benchmark {
        self.data.get_or_insert_with(|| DataPlan::default().build().expect("synthetic benchmark"))
    }

    fn hilbert_seed0(&mut self) -> &SegRun {
        if self.hilbert_seed0.is_none() {
            let cfg = SegConfig { hilbert_variant: ScanScheme::Hilbert, seed: 0, ..SegConfig::default() };
            let data = self.data();
            let run = train_and_eval_seg(cfg, &data.train, &data.test).expect("segmentation run");
            self.hilbert_seed0 = Some(run);
        }
        self.hilbert_seed0.as_ref().expect("set above")
    }
}

fn main() {
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mins = |m: u64| Duration::from_secs(60 * m);
    let secs = Duration::from_secs;
    let table: Vec<(Criterion, fn(&mut Shared) -> Outcome)> = vec![
        (Criterion { id: 1, title: "hilbert codec bijection, continuity, roundtrip", budget: secs(30) }, c1_codec),
        (Criterion { id: 2, title: "locality dominance on 16^3", budget: secs(5) }, c2_locality),
        (Criterion { id: 3, title: "chunked scan equals sequential scan", budget: secs(60) }, c3_scan),
        (Criterion { id: 4, title: "gradient suite, 20 seeds", budget: mins(5) }, c4_grad),
        (Criterion { id: 5, title: "gating algebra", budget: secs(30) }, c5_gate),
        (Criterion { id: 6, title: "dual-path decoder structure", budget: secs(60) }, c6_decoder),
        (Criterion { id: 7, title: "metric oracles", budget: secs(60) }, c7_metrics),
        (Criterion { id: 10, title: "composite loss", budget: secs(10) }, c10_loss),
        (Criterion { id: 12, title: "CLI determinism", budget: mins(60) }, c12_determinism),
        (Criterion { id: 8, title: "toy segmentation", budget: mins(30) }, c8_segmentation),
        (Criterion { id: 9, title: "scan-order ablation", budget: mins(120) }, c9_ablation),
        (Criterion { id: 11, title: "toy classification", budget: mins(30) }, c11_classification),
    ];
    let mut shared = Shared::default();
    let mut failures = Vec::new();
    for (c, run) in table {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        let t = Instant::now();
        let out = run(&mut shared);
        let elapsed = t.elapsed();
        let in_budget = elapsed <= c.budget;
        let pass = out.pass && in_budget;
        let known = KNOWN_UNATTAINABLE.contains(&c.id);
        let tag = match (pass, known) {
            (true, false) => "PASS",
            (false, false) => "FAIL",
            (false, true) => "FAIL (known, unattainable as stated)",
            (true, true) => "PASS (unexpected; update the known list)",
        };
        let budget_note = if in_budget { String::new() } else { format!(" over budget {:?}", c.budget) };
        println!(
            "criterion {:>2} [{tag}] {}: {} ({:.1} s{budget_note})",
            c.id,
            c.title,
            out.detail,
            elapsed.as_secs_f64()
        );
        if pass == known {
            failures.push(c.id);
        }
    }
    if !failures.is_empty() {
        println!("acceptance: unexpected results for criteria {failures:?}");
        std::process::exit(1);
    }
}

fn c1_codec(_: &mut Shared) -> Outcome {
    let mut checked = 0usize;
    for (dims, max_order) in [(2u32, 9u32), (3, 6)] {
        for order in 1..=max_order {
            let map = build_hilbert_map(dims, order).expect("map");
            let side = 1u32 << order;
            let n = (side as usize).pow(dims);
            if map.len() != n {
                return outcome(false, format!("dims {dims} order {order}: {} cells, want {n}", map.len()));
            }
            let mut seen = vec![false; n];
            let mut prev: Option<[u32; 3]> = None;
            for i in 0..n {
                let c = map.coord(i);
                if c.iter().take(dims as usize).any(|&v| v >= side) || c.iter().skip(dims as usize).any(|&v| v != 0) {
                    return outcome(false, format!("dims {dims} order {order}: coord {c:?} out of range"));
                }
                let flat = c.iter().take(dims as usize).fold(0usize, |acc, &v| acc * side as usize + v as usize);
                if std::mem::replace(&mut seen[flat], true) || map.index(c) != i {
                    return outcome(false, format!("dims {dims} order {order}: not a bijection at {i}"));
                }
                if let Some(p) = prev {
                    let l1: u32 = (0..3).map(|a| p[a].abs_diff(c[a])).sum();
                    if l1 != 1 {
                        return outcome(false, format!("dims {dims} order {order}: jump of {l1} at {i}"));
                    }
                }
                prev = Some(c);
            }
            checked += n;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for extents in [vec![4, 4], vec![16, 16, 16], vec![5, 7, 3], vec![9, 2], vec![1, 6, 11]] {
        for scheme in ScanScheme::ALL {
            let order = ScanOrder::new(scheme, &extents).expect("order");
            let mut shape = vec![3];
            shape.extend(&extents);
            let x = Tensor::randn(&shape, 1.0, &mut rng);
            let back = order.unflatten_tensor(&order.flatten_tensor(&x).expect("flatten")).expect("unflatten");
            let same = x.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return outcome(false, format!("{} roundtrip on {extents:?} not bit-identical", scheme.as_str()));
            }
        }
    }
    outcome(true, format!("{checked} cells over 2-D orders 1-9 and 3-D orders 1-6; roundtrips bit-identical"))
}

fn c2_locality(_: &mut Shared) -> Outcome {
    let r44 = locality_report(ScanScheme::Raster, &[4, 4]).expect("raster 4x4");
    let h = locality_report(ScanScheme::Hilbert, &[16, 16, 16]).expect("hilbert");
    let r = locality_report(ScanScheme::Raster, &[16, 16, 16]).expect("raster");
    let pass = r44.mean_adjacent_index_gap == 2.5 && h.mean_adjacent_index_gap < r.mean_adjacent_index_gap;
    outcome(
        pass,
        format!(
            "raster 4x4 mean gap {} (want 2.5); 16^3 mean gap hilbert {:.4} vs raster {:.4} (need hilbert < raster); median {} vs {}",
            r44.mean_adjacent_index_gap,
            h.mean_adjacent_index_gap,
            r.mean_adjacent_index_gap,
            h.median_adjacent_index_gap,
            r.median_adjacent_index_gap
        ),
    )
}

fn c3_scan(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let l = rng.random_range(1..=512usize);
        let chunk = rng.random_range(1..=64usize);
        let d = rng.random_range(1..=4usize);
        let n = rng.random_range(1..=8usize);
        let v = |rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64| -> Vec<f64> {
            (0..len).map(|_| rng.random_range(lo..hi)).collect()
        };
        let x = v(&mut rng, l * d, -1.0, 1.0);
        let delta = v(&mut rng, l * d, 0.001, 0.5);
        let a = v(&mut rng, d * n, -2.0, -0.01);
        let b = v(&mut rng, l * n, -1.0, 1.0);
        let c = v(&mut rng, l * n, -1.0, 1.0);
        let skip = v(&mut rng, d, -1.0, 1.0);
        let inp = ScanInputs { x: &x, delta: &delta, a: &a, b: &b, c: &c, d: &skip, len: l, d_model: d, d_state: n };
        let s = scan_sequential(&inp).expect("sequential");
        let k = scan_chunked(&inp, chunk).expect("chunked");
        let diff = s.y.iter().zip(&k.y).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        worst = worst.max(diff);
    }
    outcome(worst <= 1e-12, format!("100 cases, max |y_seq - y_chunk| = {worst:.3e} (<= 1e-12)"))
}

fn c4_grad(_: &mut Shared) -> Outcome {
    let targets = gradsuite::targets();
    let mut bad = Vec::new();
    let (mut worst_op, mut worst_block) = (0.0f64, 0.0f64);
    for t in &targets {
        for seed in 0..20 {
            match t.run(seed) {
                Ok(r) => {
                    if t.group == gradsuite::Group::Ops {
                        worst_op = worst_op.max(r.max_rel_err);
                    } else {
                        worst_block = worst_block.max(r.max_rel_err);
                    }
                    if !r.pass {
                        bad.push(format!("{}@{seed}={:.2e}", t.name, r.max_rel_err));
                    }
                }
                Err(e) => bad.push(format!("{}@{seed}: {e}", t.name)),
            }
        }
    }
    outcome(
        bad.is_empty(),
        format!(
            "{} targets x 20 seeds; worst op {worst_op:.2e} (<= 1e-5), worst scan/block {worst_block:.2e} (<= 1e-4){}",
            targets.len(),
            if bad.is_empty() { String::new() } else { format!("; failing {bad:?}") }
        ),
    )
}

fn c5_gate(_: &mut Shared) -> Outcome {
    let (c, h, w) = (3, 5, 5);
    let mut problems = Vec::new();
    let mut steps = 0usize;
    for (k, kernel) in [GateKernel::Pixel, GateKernel::Conv3, GateKernel::Pixel, GateKernel::Conv3].into_iter().enumerate() {
        let mut store = ParamStore::new();
        let gw = GateWeights::new(&mut Init::new(&mut store, k as u64), "gate", c, kernel).expect("gate");
        let mut rng = ChaCha8Rng::seed_from_u64(50 + k as u64);
        // push weights well beyond their initial scale
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.get(id).value.shape().to_vec();
            store.set(id, Tensor::randn(&shape, 1.5, &mut rng)).expect("shape");
        }
        let mut m = Tensor::uniform(&[c, h, w], -2.0, 2.0, &mut rng);
        let bound = m.max_abs().max(1.0);
        for _ in 0..1000 {
            let f = Tensor::randn(&[c, h, w], 2.0, &mut rng);
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store);
            let g = gate_update(ctx, ctx.constant(f), ctx.constant(m.clone()), &gw).expect("gate update");
            let (u, r, cand, next) = (g.u.value(), g.r.value(), g.candidate.value(), g.m.value());
            if !u.data().iter().chain(r.data()).all(|&v| v > 0.0 && v < 1.0) {
                problems.push("gate outside (0,1)".to_string());
            }
            for i in 0..next.numel() {
                let (lo, hi) = {
                    let (a, b) = (m.data()[i], cand.data()[i]);
                    (a.min(b), a.max(b))
                };
                let v = next.data()[i];
                if v < lo - 1e-15 || v > hi + 1e-15 {
                    problems.push(format!("M_t[{i}]={v} outside [{lo}, {hi}]"));
                }
            }
            if next.max_abs() > bound + 1e-15 {
                problems.push(format!("|M_t| {} exceeds {bound}", next.max_abs()));
            }
            m = (*next).clone();
            steps += 1;
        }
    }
    let mut store = ParamStore::new();
    let gw = GateWeights::new(&mut Init::new(&mut store, 9), "gate", c, GateKernel::Pixel).expect("gate");
    zero_params(&mut store, "gate");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let prev = Tensor::randn(&[c, h, w], 3.0, &mut rng);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let f = ctx.constant(Tensor::randn(&[c, h, w], 1.0, &mut rng));
    let out = gate_update(ctx, f, ctx.constant(prev.clone()), &gw).expect("zero gate").m.value();
    let halved = out.data().iter().zip(prev.data()).all(|(a, b)| a.to_bits() == (0.5 * b).to_bits());
    if !halved {
        problems.push("zero weights did not give M_t = 0.5 M_prev exactly".into());
    }
    problems.truncate(3);
    outcome(
        problems.is_empty(),
        format!("{steps} rollout steps over 4 runs, zero-weight fixed point exact={halved}{}", if problems.is_empty() { String::new() } else { format!("; {problems:?}") }),
    )
}

fn c6_decoder(_: &mut Shared) -> Outcome {
    let cfg = SegConfig { channels: [3, 3, 4, 4], d_state: 4, window: 16, ..SegConfig::default() };
    let mut store = ParamStore::new();
    let model = SegModel::new(cfg, &mut store).expect("model");
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let x = Tensor::randn(&[2, 16, 16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(6));
    let [p1, p2] = model.encode(ctx, ctx.constant(x)).expect("encode");
    let fused = model.fuse_modalities(ctx, &p1, &p2).expect("fuse");
    let bank = model.bank(ctx, &fused).expect("bank");
    let (c1, r1, trace) = model.decode_dual_path(ctx, &fused, &bank).expect("decode");
    let zeros: Vec<_> = bank
        .iter()
        .map(|b| b.map(|v| ctx.constant(Tensor::zeros(&v.shape()))))
        .collect();
    let (c0, r0, _) = model.decode_dual_path(ctx, &fused, &zeros).expect("decode zero bank");
    let coarse_same = *c0.value() == *c1.value();
    let refined_diff = r0.value().max_abs_diff(&r1.value());
    let pass = trace.concat_arity == [3, 3, 3, 2] && coarse_same && refined_diff > 0.0;
    outcome(
        pass,
        format!(
            "arity j=1..4 {:?} (want [3,3,3,2]); zero bank: coarse unchanged={coarse_same}, refined max change {refined_diff:.3e}",
            trace.concat_arity
        ),
    )
}

/// Independent surface: on-voxels with an off or out-of-volume face neighbor.
fn oracle_surface(m: &MaskVolume) -> Vec<[usize; 3]> {
    let [d, h, w] = m.extents;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !m.get(z, y, x) {
                    continue;
                }
                let p = [z as i64, y as i64, x as i64];
                let edge = (0..3).any(|a| {
                    [-1i64, 1].iter().any(|&s| {
                        let mut q = p;
                        q[a] += s;
                        let ext = [d, h, w];
                        q[a] < 0 || q[a] >= ext[a] as i64 || !m.get(q[0] as usize, q[1] as usize, q[2] as usize)
                    })
                });
                if edge {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

fn oracle_hd95(a: &MaskVolume, b: &MaskVolume, sp: [f64; 3]) -> Option<f64> {
    let (sa, sb) = (oracle_surface(a), oracle_surface(b));
    if a.count() == 0 || b.count() == 0 {
        return None;
    }
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| -> f64 {
        let mut d: Vec<f64> = from
            .iter()
            .map(|p| {
                to.iter()
                    .map(|q| (0..3).map(|k| ((p[k] as f64 - q[k] as f64) * sp[k]).powi(2)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect();
        d.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
        let rank = 0.95 * (d.len() - 1) as f64;
        let (i, frac) = (rank.floor() as usize, rank.fract());
        if i + 1 < d.len() {
            d[i] * (1.0 - frac) + d[i + 1] * frac
        } else {
            d[i]
        }
    };
    Some(directed(&sa, &sb).max(directed(&sb, &sa)))
}

fn c7_metrics(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut worst_hd, mut worst_id) = (0.0f64, 0.0f64);
    let mut problems = Vec::new();
    for case in 0..200 {
        let ext = [rng.random_range(1..=16usize), rng.random_range(1..=16), rng.random_range(1..=16)];
        let sp = [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
        let n: usize = ext.iter().product();
        let (pa, pb) = (rng.random_range(0.0..0.6), rng.random_range(0.0..0.6));
        let a: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(pa))).collect();
        let b: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(pb))).collect();
        let (ma, mb) = (MaskVolume::new(ext, sp, a.clone()).unwrap(), MaskVolume::new(ext, sp, b.clone()).unwrap());
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for i in 0..n {
            match (a[i], b[i]) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fneg += 1,
                _ => {}
            }
        }
        let ratio = |num: usize, den: usize| if den == 0 { if num == 0 { 1.0 } else { 0.0 } } else { num as f64 / den as f64 };
        let both_empty = tp + fp + fneg == 0;
        let want = [
            if both_empty { 1.0 } else { ratio(2 * tp, 2 * tp + fp + fneg) },
            if both_empty { 1.0 } else { ratio(tp, tp + fp + fneg) },
            if tp + fp == 0 { if tp + fneg == 0 { 1.0 } else { 0.0 } } else { ratio(tp, tp + fp) },
            if tp + fneg == 0 { if tp + fp == 0 { 1.0 } else { 0.0 } } else { ratio(tp, tp + fneg) },
        ];
        let got = [
            dice(&ma, &mb).unwrap(),
            iou(&ma, &mb).unwrap(),
            precision(&ma, &mb).unwrap(),
            sensitivity(&ma, &mb).unwrap(),
        ];
        if got != want {
            problems.push(format!("case {case}: {got:?} vs {want:?}"));
        }
        worst_id = worst_id.max((got[0] - 2.0 * got[1] / (1.0 + got[1])).abs());
        let h = hd95(&ma, &mb, sp).unwrap();
        match (h, oracle_hd95(&ma, &mb, sp)) {
            (Some(x), Some(y)) => worst_hd = worst_hd.max((x - y).abs()),
            (None, None) => {}
            other => problems.push(format!("case {case}: hd95 definedness {other:?}")),
        }
    }
    let pass = problems.is_empty() && worst_hd <= 1e-9 && worst_id <= 1e-12;
    problems.truncate(3);
    outcome(
        pass,
        format!(
            "200 pairs; set-count metrics exact={}; max hd95 error {worst_hd:.2e} (<= 1e-9); dice/iou identity error {worst_id:.2e} (<= 1e-12){}",
            problems.is_empty(),
            if problems.is_empty() { String::new() } else { format!("; {problems:?}") }
        ),
    )
}

fn c10_loss(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let tape = Tape::new();
    let b = 8;
    let logits = Tensor::randn(&[b, 3], 1.5, &mut rng);
    let y: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
    let lv = tape.constant(logits.clone());
    let pick: Vec<usize> = y.iter().enumerate().map(|(i, &c)| i * 3 + c).collect();
    let ce_tape = lv.log_softmax_last().gather(pick.into(), &[b]).unwrap().mean().neg().value().item();
    let l0 = jvlm_loss(lv, &y, &[], &[], 0.0, 0.1).unwrap().value().item();
    let exact = l0.to_bits() == ce_tape.to_bits();

    let uniform = jvlm_loss(tape.constant(Tensor::zeros(&[5, 3])), &[0, 1, 2, 1, 0], &[], &[], 0.0, 0.1)
        .unwrap()
        .value()
        .item();
    let ln3_err = (uniform - 3f64.ln()).abs();

    let enh: Vec<Tensor> = (0..b).map(|i| Tensor::randn(&[2 + i % 3, 6], 1.0, &mut rng)).collect();
    let refs: Vec<Tensor> = (0..b).map(|i| Tensor::randn(&[1 + i % 4, 6], 1.0, &mut rng)).collect();
    let got = jvlm_loss(
        lv,
        &y,
        &enh.iter().map(|t| tape.constant(t.clone())).collect::<Vec<_>>(),
        &refs.iter().map(|t| tape.constant(t.clone())).collect::<Vec<_>>(),
        1.0,
        0.1,
    )
    .unwrap()
    .value()
    .item();
    let want = oracle_jvlm(&logits, &y, &enh, &refs, 1.0, 0.1);
    let err = (got - want).abs();
    outcome(
        exact && ln3_err <= 1e-9 && err <= 1e-10,
        format!("lambda=0 equals CE bitwise={exact}; uniform CE - ln3 = {ln3_err:.1e} (<= 1e-9); lambda=1 batch 8 oracle error {err:.1e} (<= 1e-10)"),
    )
}

fn oracle_jvlm(logits: &Tensor, y: &[usize], enh: &[Tensor], refs: &[Tensor], lambda: f64, tau: f64) -> f64 {
    let lse = |v: &[f64]| {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let k = logits.shape()[1];
    let rows: Vec<&[f64]> = logits.data().chunks(k).collect();
    let b = rows.len() as f64;
    let ce: f64 = rows.iter().zip(y).map(|(r, &c)| lse(r) - r[c]).sum::<f64>() / b;
    let pooled_unit = |t: &Tensor| -> Vec<f64> {
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| t.data()[i * d + j]).sum::<f64>() / n as f64).collect();
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        mean.into_iter().map(|v| v / norm).collect()
    };
    let e: Vec<Vec<f64>> = enh.iter().map(pooled_unit).collect();
    let r: Vec<Vec<f64>> = refs.iter().map(pooled_unit).collect();
    let mut nce = 0.0;
    for i in 0..e.len() {
        let s: Vec<f64> = r.iter().map(|rj| e[i].iter().zip(rj).map(|(p, q)| p * q).sum::<f64>() / tau).collect();
        nce += lse(&s) - s[i];
    }
    ce + lambda * nce / b
}

fn cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hilbertmed"))
        .env_remove("HVLM_SEED")
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(out.stdout)
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn c12_determinism(_: &mut Shared) -> Outcome {
    let run = |root: &Path| -> Result<(Vec<(String, Vec<u8>)>, Vec<u8>, Vec<u8>, Vec<u8>), String> {
        let s = |p: &str| root.join(p).to_str().unwrap().to_string();
        cli(&["synth", "--n", "6", "--seed", "11", "--out", &s("data")])?;
        cli(&["train-seg", "--data", &s("data"), "--out", &s("seg.hvck"), "--seed", "4", "--steps", "12", "--jobs", "1"])?;
        let csv = cli(&["eval-seg", "--ckpt", &s("seg.hvck"), "--data", &s("data"), "--jobs", "1"])?;
        let ck = std::fs::read(root.join("seg.hvck")).map_err(|e| e.to_string())?;
        let side = std::fs::read(root.join("seg.hvck.json")).map_err(|e| e.to_string())?;
        Ok((tree(&root.join("data")), ck, side, csv))
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    match (run(a.path()), run(b.path())) {
        (Ok(x), Ok(y)) => {
            let same = [x.0 == y.0, x.1 == y.1 && x.2 == y.2, x.3 == y.3];
            outcome(
                same.iter().all(|&s| s),
                format!("two runs: synth identical={}, checkpoint identical={}, metrics CSV identical={}", same[0], same[1], same[2]),
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

fn c8_segmentation(shared: &mut Shared) -> Outcome {
    let dice_test = shared.hilbert_seed0().mean.dice;
    let sample = &shared.data().train[0];
    let mut seg = Segmenter::new(SegConfig::default()).expect("segmenter");
    seg.fit(&[(&sample.volume, &sample.mask)], 200, |_, _| {}).expect("overfit");
    let overfit = dice(&seg.segment(&sample.volume).expect("segment"), &sample.mask).expect("dice");
    outcome(
        dice_test >= 0.70 && overfit >= 0.95,
        format!("60 train / 20 test at 2x32^3: test Dice {dice_test:.4} (>= 0.70); single-sample Dice after 200 steps {overfit:.4} (>= 0.95)"),
    )
}

fn c9_ablation(shared: &mut Shared) -> Outcome {
    let h0 = shared.hilbert_seed0().mean.dice;
    let data = shared.data();
    let (train, test) = (&data.train, &data.test);
    let mut hil = vec![h0];
    let mut ras = Vec::new();
    for seed in 0..3u64 {
        for scheme in [ScanScheme::Hilbert, ScanScheme::Raster] {
            if scheme == ScanScheme::Hilbert && seed == 0 {
                continue;
            }
            let cfg = SegConfig { hilbert_variant: scheme, seed, ..SegConfig::default() };
            match train_and_eval_seg(cfg, train, test) {
                Ok(r) if scheme == ScanScheme::Hilbert => hil.push(r.mean.dice),
                Ok(r) => ras.push(r.mean.dice),
                Err(e) => return outcome(false, format!("{} seed {seed}: {e}", scheme.as_str())),
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mh, mr) = (mean(&hil), mean(&ras));
    let paired: Vec<String> = hil.iter().zip(&ras).enumerate().map(|(s, (h, r))| format!("seed {s}: {h:.4}/{r:.4}")).collect();
    outcome(
        mh >= mr - 0.01,
        format!(
            "hilbert/raster Dice {}; mean {mh:.4} vs {mr:.4} (need hilbert >= raster - 0.01); hilbert ahead: {}",
            paired.join(", "),
            if mh > mr { "yes" } else { "no" }
        ),
    )
}

fn c11_classification(shared: &mut Shared) -> Outcome {
    let preds = shared.hilbert_seed0().predictions.clone();
    let data = shared.data();
    // attribute extraction against a plain voxel loop, on every mask used
    let mut attr_ok = true;
    for m in preds.iter().chain(data.test.iter().map(|s| &s.mask)) {
        let a = extract_attributes(m, m.spacing());
        let [d, h, w] = m.extents;
        let (mut n, mut sx, mut sy, mut sz) = (0usize, 0.0, 0.0, 0.0);
        for i in 0..d * h * w {
            if m.data[i] == 1 {
                n += 1;
                sx += (i % w) as f64;
                sy += (i / w % h) as f64;
                sz += (i / (w * h)) as f64;
            }
        }
        let cen = (n > 0).then(|| [sx / n as f64, sy / n as f64, sz / n as f64]);
        attr_ok &= a.volume_voxels == n && a.centroid == cen;
    }
    let mut fused = Vec::new();
    let mut image = Vec::new();
    for seed in 0..3u64 {
        for mode in [ClassifierMode::Fused, ClassifierMode::ImageOnly] {
            let cfg = PromptConfig { mode, seed, ..PromptConfig::default() };
            match train_and_eval_cls(cfg, &data.cls_train, &data.test, &preds) {
                Ok((_, m)) if mode == ClassifierMode::Fused => fused.push(m.acc),
                Ok((_, m)) => image.push(m.acc),
                Err(e) => return outcome(false, format!("seed {seed}: {e}")),
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mf, mi) = (mean(&fused), mean(&image));
    outcome(
        attr_ok && mf >= mi,
        format!(
            "accuracy fused {fused:.3?} mean {mf:.4} vs image-only {image:.3?} mean {mi:.4} (need fused >= image-only); attributes match voxel loop={attr_ok}"
        ),
    )
}
