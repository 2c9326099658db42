//! Gated slice memory.
//!
//! A memory state `M` of shape `[C×H×W]` is carried across the depth slices
//! of a feature volume. At slice `t`, with `[a, b]` the channel
//! concatenation and each `W` a per-pixel (or 3×3) linear map:
//!
//! ```text
//! u_t = σ(W_u [f_t, M_{t-1}])
//! r_t = σ(W_r [f_t, M_{t-1}])
//! M̃_t = tanh(W_m [f_t, r_t ⊙ M_{t-1}])
//! M_t = (1 - u_t) ⊙ M_{t-1} + u_t ⊙ M̃_t
//! ```
//!
//! Each slice is first refined by a 2-D HMB and an FFN, then conditioned on
//! `M_t` by concatenation and a 1×1 projection.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::blocks::{Ffn, Hmb, HmbConfig};
use crate::error::{Error, Result};
use crate::hilbert::ScanOrder;
use crate::init::Init;
use crate::numkernel::{ConvSpec, Ctx, ParamId, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKernel {
    /// Per-pixel linear maps.
    #[default]
    Pixel,
    /// 3×3 in-plane neighbourhood. The slice is convolved as a one-deep
    /// volume with a 3×3×3 kernel, so only the middle kernel plane sees data.
    Conv3,
}

impl GateKernel {
    fn size(self) -> usize {
        match self {
            GateKernel::Pixel => 1,
            GateKernel::Conv3 => 3,
        }
    }
}

/// One linear map from `2C` concatenated channels to `C`.
#[derive(Clone, Debug)]
pub struct GateMap {
    pub w: ParamId,
    pub b: ParamId,
    kernel: GateKernel,
}

impl GateMap {
    fn new(init: &mut Init<'_>, name: &str, c: usize, kernel: GateKernel) -> Result<Self> {
        let k = kernel.size();
        init.scoped(name, |init| {
            Ok(GateMap {
                w: init.fan_in("w", &[c, 2 * c, k, k, k], 2 * c * k * k)?,
                b: init.full("b", &[c], 0.0)?,
                kernel,
            })
        })
    }

    /// `a`, `b`: `[C×H×W]`.
    fn apply<'a>(&self, ctx: Ctx<'a>, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>> {
        let s = a.shape();
        let cat = Var::concat0(&[a, b])?.reshape(&[2 * s[0], 1, s[1], s[2]])?;
        let spec = ConvSpec::new(1, self.kernel.size() / 2);
        let y = cat.conv3d(ctx.p(self.w), spec)?.add_channel_bias(ctx.p(self.b))?;
        y.reshape(&s)
    }
}

#[derive(Clone, Debug)]
pub struct GateWeights {
    pub update: GateMap,
    pub reset: GateMap,
    pub candidate: GateMap,
}

impl GateWeights {
    pub fn new(init: &mut Init<'_>, name: &str, c: usize, kernel: GateKernel) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(GateWeights {
                update: GateMap::new(init, "w_u", c, kernel)?,
                reset: GateMap::new(init, "w_r", c, kernel)?,
                candidate: GateMap::new(init, "w_m", c, kernel)?,
            })
        })
    }
}

pub struct GateOutput<'a> {
    pub m: Var<'a>,
    pub u: Var<'a>,
    pub r: Var<'a>,
    pub candidate: Var<'a>,
}

/// One memory update; `f` and `m_prev` are `[C×H×W]`.
pub fn gate_update<'a>(
    ctx: Ctx<'a>,
    f: Var<'a>,
    m_prev: Var<'a>,
    w: &GateWeights,
) -> Result<GateOutput<'a>> {
    let (fs, ms) = (f.shape(), m_prev.shape());
    if fs.len() != 3 || fs != ms {
        return Err(Error::dim("gate_update", &fs, &ms));
    }
    let wc = ctx.params.get(w.update.w).value.shape()[0];
    if wc != fs[0] {
        return Err(Error::dim("gate_update weights", &fs, &[wc]));
    }
    let u = w.update.apply(ctx, f, m_prev)?.sigmoid();
    let r = w.reset.apply(ctx, f, m_prev)?.sigmoid();
    let candidate = w.candidate.apply(ctx, f, r.mul(m_prev)?)?.tanh();
    // (1 - u)·M + u·M̃, written so that u→0 returns M exactly
    let m = m_prev.add(u.mul(candidate.sub(m_prev)?)?)?;
    Ok(GateOutput { m, u, r, candidate })
}

/// Memory carried across slices.
pub struct MemoryState<'a> {
    pub m: Var<'a>,
    /// Number of slices consumed.
    pub t: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub channels: usize,
    pub d_state: usize,
    pub ffn_hidden: usize,
    pub depth: usize,
    pub kernel: GateKernel,
}

#[derive(Clone, Debug)]
pub struct MemoryModule {
    pub hmb: Hmb,
    pub ffn: Ffn,
    pub gate: GateWeights,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

impl MemoryModule {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: &MemoryConfig) -> Result<Self> {
        let c = cfg.channels;
        init.scoped(name, |init| {
            Ok(MemoryModule {
                hmb: Hmb::new(init, "hmb", HmbConfig::new(c, cfg.d_state))?,
                ffn: Ffn::new(init, "ffn", c, cfg.ffn_hidden)?,
                gate: GateWeights::new(init, "gate", c, cfg.kernel)?,
                proj_w: init.fan_in("proj_w", &[c, 2 * c, 1, 1, 1], 2 * c)?,
                proj_b: init.full("proj_b", &[c], 0.0)?,
            })
        })
    }

    /// Process one slice, returning the refined slice and the new memory.
    pub fn step<'a>(
        &self,
        ctx: Ctx<'a>,
        slice: Var<'a>,
        state: MemoryState<'a>,
        order: &ScanOrder,
    ) -> Result<(Var<'a>, MemoryState<'a>)> {
        let f = self.ffn.forward(ctx, self.hmb.forward(ctx, slice, order)?)?;
        let g = gate_update(ctx, f, state.m, &self.gate)?;
        let s = f.shape();
        let cat = Var::concat0(&[f, g.m])?.reshape(&[2 * s[0], 1, s[1], s[2]])?;
        let proj = cat
            .conv3d(ctx.p(self.proj_w), ConvSpec::new(1, 0))?
            .add_channel_bias(ctx.p(self.proj_b))?
            .reshape(&s)?;
        Ok((
            f.add(proj)?,
            MemoryState {
                m: g.m,
                t: state.t + 1,
            },
        ))
    }
}

/// Stack of memory modules applied slice by slice.
#[derive(Clone, Debug)]
pub struct MemoryStack {
    pub cfg: MemoryConfig,
    pub modules: Vec<MemoryModule>,
}

impl MemoryStack {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: MemoryConfig) -> Result<Self> {
        if cfg.depth == 0 {
            return Err(Error::Parameter("memory stack depth must be >= 1".into()));
        }
        init.scoped(name, |init| {
            let modules = (0..cfg.depth)
                .map(|l| MemoryModule::new(init, &format!("m{l}"), &cfg))
                .collect::<Result<Vec<_>>>()?;
            Ok(MemoryStack { cfg, modules })
        })
    }

    /// Refine `slices` (each `[C×H×W]`, ascending depth) starting from zero
    /// memory. Returns the refined slices and the final state of each module.
    pub fn forward<'a>(
        &self,
        ctx: Ctx<'a>,
        slices: &[Var<'a>],
        order: &ScanOrder,
    ) -> Result<(Vec<Var<'a>>, Vec<MemoryState<'a>>)> {
        let Some(first) = slices.first() else {
            return Err(Error::Parameter("memory module needs at least one slice".into()));
        };
        let shape = first.shape();
        let mut current = slices.to_vec();
        let mut finals = Vec::with_capacity(self.modules.len());
        for module in &self.modules {
            let mut state = MemoryState {
                m: ctx.constant(Tensor::zeros(&shape)),
                t: 0,
            };
            let mut next = Vec::with_capacity(current.len());
            for &slice in &current {
                let (out, s) = module.step(ctx, slice, state, order)?;
                next.push(out);
                state = s;
            }
            finals.push(state);
            current = next;
        }
        Ok((current, finals))
    }

    /// Whole-volume wrapper: `[C×D×H×W]` split along depth, refined, and
    /// restacked.
    pub fn forward_volume<'a>(&self, ctx: Ctx<'a>, x: Var<'a>, order: &ScanOrder) -> Result<Var<'a>> {
        let slices = split_depth(x)?;
        let (out, _) = self.forward(ctx, &slices, order)?;
        stack_depth(&out)
    }
}

/// `[C×D×H×W] → D × [C×H×W]`.
pub fn split_depth(x: Var<'_>) -> Result<Vec<Var<'_>>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::dim("split_depth", &s, &[4]));
    }
    let (c, d, hw) = (s[0], s[1], s[2] * s[3]);
    (0..d)
        .map(|z| {
            let idx: Vec<usize> = (0..c)
                .flat_map(|ch| (0..hw).map(move |i| (ch * d + z) * hw + i))
                .collect();
            x.gather(Arc::new(idx), &[c, s[2], s[3]])
        })
        .collect()
}

/// Inverse of [`split_depth`].
pub fn stack_depth<'a>(slices: &[Var<'a>]) -> Result<Var<'a>> {
    let Some(first) = slices.first() else {
        return Err(Error::Parameter("no slices to stack".into()));
    };
    let s = first.shape();
    let (c, hw, d) = (s[0], s[1] * s[2], slices.len());
    let cat = Var::concat0(slices)?;
    // cat is [D·C × H × W] ordered (z, ch); reorder to (ch, z)
    let idx: Vec<usize> = (0..c)
        .flat_map(|ch| (0..d).flat_map(move |z| (0..hw).map(move |i| (z * c + ch) * hw + i)))
        .collect();
    cat.gather(Arc::new(idx), &[c, d, s[1], s[2]])
}
