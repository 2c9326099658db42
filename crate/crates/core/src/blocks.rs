//! Composite blocks: linear and norm layers, the Hilbert-Mamba block (HMB),
//! the feed-forward block and Hilbert-Mamba cross-attention (HMCA).
//!
//! Every block is residual: with all of its own parameters zeroed it is the
//! identity on its (query) input.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::ScanOrder;
use crate::init::Init;
use crate::numkernel::{Ctx, ParamId, ParamStore, Tensor, Var};
use crate::ssm::{ScanMode, SsmConfig, SsmParams};

const LN_EPS: f64 = 1e-5;

/// `[L×in] → [L×out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Linear {
                w: init.fan_in("w", &[d_in, d_out], d_in)?,
                b: init.full("b", &[d_out], 0.0)?,
            })
        })
    }

    pub fn forward<'a>(&self, ctx: Ctx<'a>, x: Var<'a>) -> Result<Var<'a>> {
        x.matmul(ctx.p(self.w))?.add_row_bias(ctx.p(self.b))
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(LayerNorm {
                gamma: init.full("gamma", &[d], 1.0)?,
                beta: init.full("beta", &[d], 0.0)?,
            })
        })
    }

    pub fn forward<'a>(&self, ctx: Ctx<'a>, x: Var<'a>) -> Result<Var<'a>> {
        x.layer_norm(ctx.p(self.gamma), ctx.p(self.beta), LN_EPS)
    }
}

/// `[C×spatial] ↔ [N×C]` in plain storage order, for per-voxel layers.
fn voxel_tokens(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    x.reshape(&[s[0], x.numel() / s[0]])?.transpose()
}

fn voxel_untokens<'a>(t: Var<'a>, shape: &[usize]) -> Result<Var<'a>> {
    t.transpose()?.reshape(shape)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HmbConfig {
    pub d_model: usize,
    pub d_state: usize,
    /// Pre-norm before the scan.
    pub norm: bool,
    /// Add a second scan over the reversed sequence.
    pub bidirectional: bool,
    /// `0` scans sequentially, otherwise in chunks of this length.
    pub chunk: usize,
}

impl HmbConfig {
    pub fn new(d_model: usize, d_state: usize) -> Self {
        HmbConfig {
            d_model,
            d_state,
            norm: true,
            bidirectional: false,
            chunk: 0,
        }
    }
}

/// Hilbert-Mamba block: serialize, normalize, scan, deserialize, add.
#[derive(Clone, Debug)]
pub struct Hmb {
    pub cfg: HmbConfig,
    pub norm: Option<LayerNorm>,
    pub fwd: SsmParams,
    pub bwd: Option<SsmParams>,
}

impl Hmb {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: HmbConfig) -> Result<Self> {
        if cfg.d_model == 0 {
            return Err(Error::Parameter("HMB needs d_model > 0".into()));
        }
        let ssm_cfg = SsmConfig {
            d_model: cfg.d_model,
            d_state: cfg.d_state,
            mode: if cfg.chunk == 0 {
                ScanMode::Sequential
            } else {
                ScanMode::Chunked(cfg.chunk)
            },
        };
        init.scoped(name, |init| {
            Ok(Hmb {
                cfg,
                norm: if cfg.norm {
                    Some(LayerNorm::new(init, "norm", cfg.d_model)?)
                } else {
                    None
                },
                fwd: init.scoped("ssm", |i| SsmParams::new(i, ssm_cfg))?,
                bwd: if cfg.bidirectional {
                    Some(init.scoped("ssm_rev", |i| SsmParams::new(i, ssm_cfg))?)
                } else {
                    None
                },
            })
        })
    }

    /// Scan branch on an already serialized `[N×C]` sequence, without the
    /// residual.
    pub fn branch<'a>(&self, ctx: Ctx<'a>, tokens: Var<'a>) -> Result<Var<'a>> {
        let s = tokens.shape();
        if s.len() != 2 || s[1] != self.cfg.d_model {
            return Err(Error::Parameter(format!(
                "HMB expects tokens of width {}, got {s:?}",
                self.cfg.d_model
            )));
        }
        let z = match &self.norm {
            Some(n) => n.forward(ctx, tokens)?,
            None => tokens,
        };
        let mut y = self.fwd.forward(ctx, z)?;
        if let Some(bwd) = &self.bwd {
            let (n, c) = (s[0], s[1]);
            let rev: Arc<Vec<usize>> = Arc::new(
                (0..n)
                    .rev()
                    .flat_map(|t| (0..c).map(move |ch| t * c + ch))
                    .collect(),
            );
            let back = bwd.forward(ctx, z.gather(rev.clone(), &[n, c])?)?;
            y = y.add(back.gather(rev, &[n, c])?)?;
        }
        Ok(y)
    }

    /// `[N×C] → [N×C]` with residual.
    pub fn forward_tokens<'a>(&self, ctx: Ctx<'a>, tokens: Var<'a>) -> Result<Var<'a>> {
        tokens.add(self.branch(ctx, tokens)?)
    }

    /// `[C×spatial] → [C×spatial]`, scanning in `order`.
    pub fn forward<'a>(&self, ctx: Ctx<'a>, x: Var<'a>, order: &ScanOrder) -> Result<Var<'a>> {
        let tokens = order.to_tokens(x)?;
        x.add(order.from_tokens(self.branch(ctx, tokens)?)?)
    }
}

/// Pre-norm two-layer GELU MLP with residual.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize, hidden: usize) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Ffn {
                norm: LayerNorm::new(init, "norm", d)?,
                up: Linear::new(init, "up", d, hidden)?,
                down: Linear::new(init, "down", hidden, d)?,
            })
        })
    }

    pub fn forward_tokens<'a>(&self, ctx: Ctx<'a>, x: Var<'a>) -> Result<Var<'a>> {
        let h = self.up.forward(ctx, self.norm.forward(ctx, x)?)?.gelu();
        x.add(self.down.forward(ctx, h)?)
    }

    /// Applied independently at every voxel of `[C×spatial]`.
    pub fn forward<'a>(&self, ctx: Ctx<'a>, x: Var<'a>) -> Result<Var<'a>> {
        let y = self.forward_tokens(ctx, voxel_tokens(x)?)?;
        voxel_untokens(y, &x.shape())
    }
}

/// How the query stream meets the key/value context in HMCA.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interaction {
    /// Scaled dot-product attention over the serialized sequence, then HMB.
    #[default]
    Attention,
    /// One scan over `[V; Q]`, reading off the query positions.
    Mamba,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HmcaConfig {
    pub hmb: HmbConfig,
    pub mlp_hidden: usize,
    /// Attention window along the sequence; `None` attends globally.
    pub window: Option<usize>,
    pub interaction: Interaction,
}

/// Hilbert-Mamba cross-attention: modality 2 is contextualized by an HMB
/// and an MLP into keys and values, the query stream of modality 1 attends
/// to them, a second HMB mixes the result, and the output is added back onto
/// the query features.
#[derive(Clone, Debug)]
pub struct Hmca {
    pub cfg: HmcaConfig,
    pub ctx_hmb: Hmb,
    pub mlp: Linear,
    pub key: Linear,
    pub value: Linear,
    pub query: Linear,
    pub fuse_hmb: Hmb,
}

impl Hmca {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: HmcaConfig) -> Result<Self> {
        let d = cfg.hmb.d_model;
        init.scoped(name, |init| {
            Ok(Hmca {
                cfg,
                ctx_hmb: Hmb::new(init, "ctx_hmb", cfg.hmb)?,
                mlp: Linear::new(init, "mlp", d, cfg.mlp_hidden)?,
                key: Linear::new(init, "key", cfg.mlp_hidden, d)?,
                value: Linear::new(init, "value", cfg.mlp_hidden, d)?,
                query: Linear::new(init, "query", d, d)?,
                fuse_hmb: Hmb::new(init, "fuse_hmb", cfg.hmb)?,
            })
        })
    }

    /// Fusion branch on token sequences `q[Nq×C]`, `kv[Nk×C]`, without the
    /// final residual.
    pub fn branch<'a>(&self, ctx: Ctx<'a>, q: Var<'a>, kv: Var<'a>) -> Result<Var<'a>> {
        let (qs, ks) = (q.shape(), kv.shape());
        if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
            return Err(Error::dim("hmca", &qs, &ks));
        }
        let context = self.ctx_hmb.forward_tokens(ctx, kv)?;
        let hidden = self.mlp.forward(ctx, context)?.gelu();
        let v = self.value.forward(ctx, hidden)?;
        let q = self.query.forward(ctx, q)?;
        match self.cfg.interaction {
            Interaction::Attention => {
                let k = self.key.forward(ctx, hidden)?;
                let window = if qs[0] == ks[0] { self.cfg.window } else { None };
                let attended = q.attention(k, v, window)?;
                self.fuse_hmb.forward_tokens(ctx, q.add(attended)?)
            }
            Interaction::Mamba => {
                let joint = Var::concat0(&[v, q])?;
                let mixed = self.fuse_hmb.branch(ctx, joint)?;
                q.add(mixed.narrow0(ks[0], ks[0] + qs[0])?)
            }
        }
    }

    pub fn forward_tokens<'a>(&self, ctx: Ctx<'a>, q: Var<'a>, kv: Var<'a>) -> Result<Var<'a>> {
        q.add(self.branch(ctx, q, kv)?)
    }

    /// `q_feat`, `kv_feat`: `[C×spatial]` of equal shape.
    pub fn forward<'a>(
        &self,
        ctx: Ctx<'a>,
        q_feat: Var<'a>,
        kv_feat: Var<'a>,
        order: &ScanOrder,
    ) -> Result<Var<'a>> {
        if q_feat.shape() != kv_feat.shape() {
            return Err(Error::dim("hmca", &q_feat.shape(), &kv_feat.shape()));
        }
        let fused = self.branch(ctx, order.to_tokens(q_feat)?, order.to_tokens(kv_feat)?)?;
        q_feat.add(order.from_tokens(fused)?)
    }
}

/// Set every parameter whose name starts with `prefix` to zero.
pub fn zero_params(store: &mut ParamStore, prefix: &str) {
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let shape = store.get(id).value.shape().to_vec();
        store.get_mut(id).value = Tensor::zeros(&shape);
    }
}
