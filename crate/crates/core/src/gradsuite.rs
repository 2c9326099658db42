//! Registry of finite-difference gradient checks over every differentiable
//! op and composite block, grouped and toleranced for batch runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{Ffn, Hmb, HmbConfig, Hmca, HmcaConfig, Interaction, LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::hilbert::{ScanOrder, ScanScheme};
use crate::init::Init;
use crate::memory::{gate_update, GateKernel, GateWeights, MemoryConfig, MemoryStack};
use crate::net::{bce_with_logits, dice_loss, ConvLayer, Mcau, UpLayer};
use crate::numkernel::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use crate::numkernel::{ConvSpec, Ctx, ParamStore, Tensor, Var};
use crate::prompt::jvlm_loss;
use crate::ssm::{ScanMode, SsmConfig, SsmParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Ops,
    Ssm,
    Blocks,
}

impl Group {
    pub fn tolerance(self) -> f64 {
        match self {
            Group::Ops => 1e-5,
            Group::Ssm | Group::Blocks => 1e-4,
        }
    }
}

pub struct Target {
    pub name: &'static str,
    pub group: Group,
    run: fn(u64) -> Result<GradCheckReport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TargetResult {
    pub name: &'static str,
    pub group: Group,
    pub seed: u64,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub worst: Option<String>,
    pub pass: bool,
}

impl Target {
    pub fn run(&self, seed: u64) -> Result<TargetResult> {
        let report = (self.run)(seed)?;
        let max_rel_err = report.max_rel_err();
        let tolerance = self.group.tolerance();
        Ok(TargetResult {
            name: self.name,
            group: self.group,
            seed,
            max_rel_err,
            tolerance,
            worst: report.worst().map(|t| t.name.clone()),
            pass: max_rel_err <= tolerance,
        })
    }
}

/// `ops`, `ssm`, `blocks`, `all`, or a single target name.
pub fn select(which: &str) -> Result<Vec<Target>> {
    let all = targets();
    let picked: Vec<Target> = match which {
        "all" => all,
        "ops" => all.into_iter().filter(|t| t.group == Group::Ops).collect(),
        "ssm" => all.into_iter().filter(|t| t.group == Group::Ssm).collect(),
        "blocks" => all.into_iter().filter(|t| t.group == Group::Blocks).collect(),
        name => all.into_iter().filter(|t| t.name == name).collect(),
    };
    if picked.is_empty() {
        return Err(Error::Parameter(format!("unknown gradcheck target '{which}'")));
    }
    Ok(picked)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x6d5a_93c1)
}

fn randn(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions { seed, ..Default::default() }
}

/// Checks a parameter-free function of the given inputs.
fn op_check<F>(seed: u64, inputs: Vec<Tensor>, f: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(Ctx<'a>, &[Var<'a>]) -> Result<Var<'a>>,
{
    check_gradients(&ParamStore::new(), &inputs, f, opts(seed))
}

/// Perturb every parameter so zero-initialized paths carry gradient.
fn jitter(store: &mut ParamStore, r: &mut ChaCha8Rng, std: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let v = &store.get(id).value;
        let noise = Tensor::randn(v.shape(), std, r);
        let next = Tensor::from_fn(v.shape(), |i| v.data()[i] + noise.data()[i]);
        store.set(id, next).expect("same shape");
    }
}

macro_rules! target {
    ($name:literal, $group:ident, $f:expr) => {
        Target { name: $name, group: Group::$group, run: $f }
    };
}

pub fn targets() -> Vec<Target> {
    vec![
        target!("add", Ops, |s| {
            let mut r = rng(s);
            op_check(s, vec![randn(&mut r, &[3, 4]), randn(&mut r, &[3, 4])], |_, v| v[0].add(v[1]))
        }),
        target!("sub", Ops, |s| {
            let mut r = rng(s);
            op_check(s, vec![randn(&mut r, &[3, 4]), randn(&mut r, &[3, 4])], |_, v| v[0].sub(v[1]))
        }),
        target!("mul", Ops, |s| {
            let mut r = rng(s);
            op_check(s, vec![randn(&mut r, &[3, 4]), randn(&mut r, &[3, 4])], |_, v| v[0].mul(v[1]))
        }),
        target!("unary", Ops, |s| {
            let mut r = rng(s);
            let x = randn(&mut r, &[5, 4]);
            op_check(s, vec![x], |_, v| {
                let x = v[0];
                let parts = [x.neg(), x.sigmoid(), x.tanh(), x.gelu(), x.softplus(), x.exp(), x.square()];
                let mut acc = x.scale(0.7).offset(0.3);
                for p in parts {
                    acc = acc.add(p)?;
                }
                Ok(acc)
            })
        }),
        target!("relu", Ops, |s| {
            let mut r = rng(s);
            // keep clear of the kink
            let x = randn(&mut r, &[5, 4]).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
            op_check(s, vec![x], |_, v| Ok(v[0].relu()))
        }),
        target!("ln", Ops, |s| {
            let mut r = rng(s);
            op_check(s, vec![Tensor::uniform(&[4, 4], 0.5, 2.0, &mut r)], |_, v| Ok(v[0].ln()))
        }),
        target!("reductions", Ops, |s| {
            let mut r = rng(s);
            op_check(s, vec![randn(&mut r, &[4, 3])], |_, v| {
                let x = v[0];
                let m = x.mean_rows()?;
                x.square().sum().add(x.mean())?.reshape(&[1, 1])?.matmul(m)
            })
        }),
        target!("shape", Ops, |s| {
            let mut r = rng(s);
            let idx: Vec<usize> = (0..10).map(|_| r.random_range(0..12)).collect();
            op_check(s, vec![randn(&mut r, &[3, 4]), randn(&mut r, &[2, 4])], move |_, v| {
                let t = v[0].transpose()?.reshape(&[3, 4])?;
                let cat = Var::concat0(&[t, v[1], v[0].narrow0(1, 3)?])?;
                let g = v[0].gather(idx.clone().into(), &[2, 5])?;
                Var::concat0(&[cat.reshape(&[7 * 4])?, g.reshape(&[10])?])
            })
        }),
        target!("matmul", Ops, |s| {
            let mut r = rng(s);
            op_check(s, vec![randn(&mut r, &[3, 5]), randn(&mut r, &[5, 2]), randn(&mut r, &[2])], |_, v| {
                v[0].matmul(v[1])?.add_row_bias(v[2])
            })
        }),
        target!("channel_bias", Ops, |s| {
            let mut r = rng(s);
            op_check(s, vec![randn(&mut r, &[3, 2, 2, 2]), randn(&mut r, &[3])], |_, v| v[0].add_channel_bias(v[1]))
        }),
        target!("softmax", Ops, |s| {
            let mut r = rng(s);
            op_check(s, vec![randn(&mut r, &[3, 5])], |_, v| v[0].softmax_last().add(v[0].log_softmax_last()))
        }),
        target!("layer_norm", Ops, |s| {
            let mut r = rng(s);
            let inputs = vec![randn(&mut r, &[4, 6]), randn(&mut r, &[6]), randn(&mut r, &[6])];
            op_check(s, inputs, |_, v| v[0].layer_norm(v[1], v[2], 1e-5))
        }),
        target!("normalize_rows", Ops, |s| {
            let mut r = rng(s);
            op_check(s, vec![randn(&mut r, &[4, 5])], |_, v| v[0].normalize_rows(1e-12))
        }),
        target!("conv3d", Ops, |s| {
            let mut r = rng(s);
            let inputs = vec![randn(&mut r, &[2, 5, 4, 5]), randn(&mut r, &[3, 2, 3, 3, 3])];
            op_check(s, inputs, |_, v| {
                let a = v[0].conv3d(v[1], ConvSpec::new(1, 1))?.reshape(&[3 * 5 * 4 * 5])?;
                let b = v[0].conv3d(v[1], ConvSpec::new(2, 1))?.reshape(&[3 * 3 * 2 * 3])?;
                let c = v[0].conv3d(v[1], ConvSpec::dilated(2))?.reshape(&[3 * 5 * 4 * 5])?;
                Var::concat0(&[a, b, c])
            })
        }),
        target!("conv_transpose3d", Ops, |s| {
            let mut r = rng(s);
            let inputs = vec![randn(&mut r, &[3, 2, 3, 2]), randn(&mut r, &[3, 2, 2, 2, 2])];
            op_check(s, inputs, |_, v| {
                let a = v[0].conv_transpose3d(v[1], ConvSpec::new(2, 0))?;
                let b = v[0].conv_transpose3d_to(v[1], ConvSpec::new(2, 0), Some([5, 7, 4]))?;
                Var::concat0(&[a.reshape(&[a.numel()])?, b.reshape(&[b.numel()])?])
            })
        }),
        target!("attention", Ops, |s| {
            let mut r = rng(s);
            let inputs = vec![randn(&mut r, &[6, 4]), randn(&mut r, &[6, 4]), randn(&mut r, &[6, 3])];
            op_check(s, inputs, |_, v| {
                let g = v[0].attention(v[1], v[2], None)?;
                let w = v[0].attention(v[1], v[2], Some(2))?;
                g.add(w)
            })
        }),
        target!("attention_cross", Ops, |s| {
            let mut r = rng(s);
            let inputs = vec![randn(&mut r, &[3, 4]), randn(&mut r, &[7, 4]), randn(&mut r, &[7, 2])];
            op_check(s, inputs, |_, v| v[0].attention(v[1], v[2], None))
        }),
        target!("scan_order", Ops, |s| {
            let mut r = rng(s);
            let order = ScanOrder::new(ScanScheme::Hilbert, &[4, 4, 2]).expect("valid extents");
            op_check(s, vec![randn(&mut r, &[3, 4, 4, 2])], move |_, v| {
                let t = order.to_tokens(v[0])?.square();
                order.from_tokens(t)
            })
        }),
        target!("dice_loss", Ops, |s| {
            let mut r = rng(s);
            let p = Tensor::uniform(&[1, 3, 3, 3], 0.05, 0.95, &mut r);
            let y = Tensor::from_fn(&[1, 3, 3, 3], |_| f64::from(u8::from(r.random_bool(0.4))));
            op_check(s, vec![p, y], |_, v| dice_loss(v[0], v[1], 1.0))
        }),
        target!("bce_with_logits", Ops, |s| {
            let mut r = rng(s);
            let z = randn(&mut r, &[1, 3, 3, 3]).map(|v| 3.0 * v);
            let y = Tensor::from_fn(&[1, 3, 3, 3], |_| f64::from(u8::from(r.random_bool(0.4))));
            op_check(s, vec![z, y], |_, v| bce_with_logits(v[0], v[1]))
        }),
        target!("jvlm_loss", Ops, |s| {
            let mut r = rng(s);
            let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..3)).collect();
            let mut inputs = vec![randn(&mut r, &[4, 3])];
            inputs.extend((0..8).map(|i| randn(&mut r, &[2 + i % 3, 5])));
            op_check(s, inputs, move |_, v| jvlm_loss(v[0], &labels, &v[1..5], &v[5..9], 0.5, 0.1))
        }),
        target!("selective_scan", Ssm, |s| scan_op(s, ScanMode::Sequential)),
        target!("selective_scan_chunked", Ssm, |s| scan_op(s, ScanMode::Chunked(3))),
        target!("ssm", Ssm, |s| {
            let mut r = rng(s);
            let mut store = ParamStore::new();
            let cfg = SsmConfig { d_model: 3, d_state: 4, mode: ScanMode::Chunked(4) };
            let ssm = SsmParams::new(&mut Init::new(&mut store, s), cfg)?;
            jitter(&mut store, &mut r, 0.3);
            check_gradients(&store, &[randn(&mut r, &[9, 3])], |ctx, v| ssm.forward(ctx, v[0]), opts(s))
        }),
        target!("linear", Blocks, |s| {
            let mut r = rng(s);
            let mut store = ParamStore::new();
            let lin = Linear::new(&mut Init::new(&mut store, s), "lin", 4, 3)?;
            jitter(&mut store, &mut r, 0.3);
            check_gradients(&store, &[randn(&mut r, &[5, 4])], |ctx, v| lin.forward(ctx, v[0]), opts(s))
        }),
        target!("layer_norm_block", Blocks, |s| {
            let mut r = rng(s);
            let mut store = ParamStore::new();
            let ln = LayerNorm::new(&mut Init::new(&mut store, s), "ln", 5)?;
            jitter(&mut store, &mut r, 0.3);
            check_gradients(&store, &[randn(&mut r, &[4, 5])], |ctx, v| ln.forward(ctx, v[0]), opts(s))
        }),
        target!("hmb", Blocks, |s| hmb_check(s, false)),
        target!("hmb_bidirectional", Blocks, |s| hmb_check(s, true)),
        target!("ffn", Blocks, |s| {
            let mut r = rng(s);
            let mut store = ParamStore::new();
            let ffn = Ffn::new(&mut Init::new(&mut store, s), "ffn", 3, 6)?;
            jitter(&mut store, &mut r, 0.3);
            check_gradients(&store, &[randn(&mut r, &[3, 2, 2, 2])], |ctx, v| ffn.forward(ctx, v[0]), opts(s))
        }),
        target!("hmca_attention", Blocks, |s| hmca_check(s, Interaction::Attention)),
        target!("hmca_mamba", Blocks, |s| hmca_check(s, Interaction::Mamba)),
        target!("memory_gate", Blocks, |s| gate_check(s, GateKernel::Pixel)),
        target!("memory_gate_conv3", Blocks, |s| gate_check(s, GateKernel::Conv3)),
        target!("memory_stack", Blocks, |s| {
            let mut r = rng(s);
            let mut store = ParamStore::new();
            let cfg = MemoryConfig { channels: 2, d_state: 3, ffn_hidden: 4, depth: 2, kernel: GateKernel::Pixel };
            let stack = MemoryStack::new(&mut Init::new(&mut store, s), "mem", cfg)?;
            jitter(&mut store, &mut r, 0.2);
            let order = ScanOrder::new(ScanScheme::Hilbert, &[2, 2])?;
            let x = randn(&mut r, &[2, 3, 2, 2]);
            check_gradients(&store, &[x], move |ctx, v| stack.forward_volume(ctx, v[0], &order), opts(s))
        }),
        target!("mcau", Blocks, |s| {
            let mut r = rng(s);
            let mut store = ParamStore::new();
            let mcau = Mcau::new(&mut Init::new(&mut store, s), "mcau", 2)?;
            jitter(&mut store, &mut r, 0.2);
            check_gradients(&store, &[randn(&mut r, &[2, 4, 3, 4])], |ctx, v| mcau.forward(ctx, v[0]), opts(s))
        }),
        target!("decoder_stage", Blocks, |s| {
            // up-sample, mix with a skip feature, activate, refine
            let mut r = rng(s);
            let mut store = ParamStore::new();
            let (up, mix, mcau) = {
                let mut init = Init::new(&mut store, s);
                (
                    UpLayer::new(&mut init, "up", 3, 2)?,
                    ConvLayer::new(&mut init, "mix", 2, 4, 1)?,
                    Mcau::new(&mut init, "mcau", 2)?,
                )
            };
            jitter(&mut store, &mut r, 0.2);
            let inputs = vec![randn(&mut r, &[3, 2, 2, 2]), randn(&mut r, &[2, 4, 5, 4])];
            check_gradients(
                &store,
                &inputs,
                move |ctx, v| {
                    let u = up.up(ctx, v[0], [4, 5, 4])?;
                    let cat = Var::concat0(&[v[1], u])?;
                    mcau.forward(ctx, mix.conv(ctx, cat, ConvSpec::new(1, 0))?.gelu())
                },
                opts(s),
            )
        }),
    ]
}

fn scan_op(seed: u64, mode: ScanMode) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (l, d, n) = (7, 2, 3);
    let delta = Tensor::uniform(&[l, d], 0.05, 0.8, &mut r);
    let a = Tensor::uniform(&[d, n], -1.5, -0.1, &mut r);
    let inputs = vec![
        randn(&mut r, &[l, d]),
        delta,
        a,
        randn(&mut r, &[l, n]),
        randn(&mut r, &[l, n]),
        randn(&mut r, &[d]),
    ];
    op_check(seed, inputs, move |_, v| v[0].selective_scan(v[1], v[2], v[3], v[4], v[5], mode))
}

fn hmb_check(seed: u64, bidirectional: bool) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let cfg = HmbConfig { bidirectional, ..HmbConfig::new(3, 4) };
    let hmb = Hmb::new(&mut Init::new(&mut store, seed), "hmb", cfg)?;
    jitter(&mut store, &mut r, 0.3);
    let order = ScanOrder::new(ScanScheme::Hilbert, &[2, 2, 2])?;
    check_gradients(&store, &[randn(&mut r, &[3, 2, 2, 2])], move |ctx, v| hmb.forward(ctx, v[0], &order), opts(seed))
}

fn hmca_check(seed: u64, interaction: Interaction) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let cfg = HmcaConfig { hmb: HmbConfig::new(3, 3), mlp_hidden: 5, window: Some(3), interaction };
    let hmca = Hmca::new(&mut Init::new(&mut store, seed), "hmca", cfg)?;
    jitter(&mut store, &mut r, 0.3);
    let order = ScanOrder::new(ScanScheme::Hilbert, &[2, 2, 2])?;
    let inputs = vec![randn(&mut r, &[3, 2, 2, 2]), randn(&mut r, &[3, 2, 2, 2])];
    check_gradients(&store, &inputs, move |ctx, v| hmca.forward(ctx, v[0], v[1], &order), opts(seed))
}

fn gate_check(seed: u64, kernel: GateKernel) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let w = GateWeights::new(&mut Init::new(&mut store, seed), "gate", 2, kernel)?;
    jitter(&mut store, &mut r, 0.3);
    let inputs = vec![randn(&mut r, &[2, 3, 3]), randn(&mut r, &[2, 3, 3])];
    check_gradients(&store, &inputs, move |ctx, v| Ok(gate_update(ctx, v[0], v[1], &w)?.m), opts(seed))
}
