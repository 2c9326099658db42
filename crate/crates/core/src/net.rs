//! Segmentation network.
//!
//! Two per-modality encoders (strided conv + HMB, four scales), per-scale
//! HMCA fusion with modality 1 as query, a gated slice-memory bank per scale,
//! and a dual-path decoder:
//!
//! * coarse path: HMB stages upsampling from the coarsest fused features,
//!   never reading the bank;
//! * refined path: from coarse to fine,
//!   `g_4 = MCAU(Conv(Cat(F_4, B_4)))` and
//!   `g_j = MCAU(Conv(Cat(F_j, B_j, UP(g_{j+1}))))` for `j < 4`, where `B_j`
//!   is the bank feature, `UP` a transposed convolution and MCAU the sum of
//!   three dilated 3³ convolutions (rates 1, 2, 3).
//!
//! The head is `σ(Conv(Cat(coarse, refined)))`.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{Hmb, HmbConfig, Hmca, HmcaConfig, Interaction};
use crate::error::{Error, Result};
use crate::hilbert::{ScanOrder, ScanScheme};
use crate::init::Init;
use crate::io::write_atomic;
use crate::memory::{GateKernel, MemoryConfig, MemoryStack};
use crate::numkernel::{checkpoint, Adam, ConvSpec, Ctx, ParamId, ParamStore, Tape, Tensor, Var};
use crate::volume::{MaskVolume, Volume};

pub const SCALES: usize = 4;
pub const MODALITIES: usize = 2;

/// Model and training settings. Unknown keys are rejected when parsing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegConfig {
    pub seed: u64,
    pub lr: f64,
    /// The learning rate holds for the first half of a `fit` call, then
    /// decays along a cosine to `lr * lr_final_ratio`; 1 keeps it constant.
    pub lr_final_ratio: f64,
    pub steps: usize,
    pub channels: [usize; SCALES],
    pub d_state: usize,
    pub hilbert_variant: ScanScheme,
    pub memory: bool,
    pub memory_depth: usize,
    pub window: usize,
    pub bidirectional: bool,
    pub interaction: Interaction,
    pub gate_kernel: GateKernel,
    /// Scan chunk length; 0 scans sequentially.
    pub chunk: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            seed: 0,
            lr: 5e-3,
            lr_final_ratio: 0.1,
            steps: 600,
            channels: [8, 8, 16, 16],
            d_state: 16,
            hilbert_variant: ScanScheme::Hilbert,
            memory: true,
            memory_depth: 2,
            window: 64,
            bidirectional: false,
            interaction: Interaction::Attention,
            gate_kernel: GateKernel::Pixel,
            chunk: 0,
        }
    }
}

impl SegConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SegConfig = toml::from_str(text).map_err(|e| Error::Format(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.d_state == 0 {
            return Err(Error::Parameter("channels and d_state must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.lr_final_ratio) {
            return Err(Error::Parameter(format!("lr_final_ratio must lie in [0, 1], got {}", self.lr_final_ratio)));
        }
        if self.memory && self.memory_depth == 0 {
            return Err(Error::Parameter("memory_depth must be >= 1".into()));
        }
        if self.window == 0 {
            return Err(Error::Parameter("attention window must be >= 1".into()));
        }
        Ok(())
    }

    fn hmb(&self, c: usize) -> HmbConfig {
        HmbConfig {
            d_model: c,
            d_state: self.d_state,
            norm: true,
            bidirectional: self.bidirectional,
            chunk: self.chunk,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConvLayer {
    w: ParamId,
    b: ParamId,
}

impl ConvLayer {
    pub(crate) fn new(init: &mut Init<'_>, name: &str, cout: usize, cin: usize, k: usize) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(ConvLayer {
                w: init.fan_in("w", &[cout, cin, k, k, k], cin * k * k * k)?,
                b: init.full("b", &[cout], 0.0)?,
            })
        })
    }

    pub(crate) fn conv<'a>(&self, ctx: Ctx<'a>, x: Var<'a>, spec: ConvSpec) -> Result<Var<'a>> {
        x.conv3d(ctx.p(self.w), spec)?.add_channel_bias(ctx.p(self.b))
    }
}

/// Transposed 2³ stride-2 convolution doubling every extent; weight layout
/// `[C_in×C_out×2×2×2]` (the adjoint of a `C_out → C_in` forward conv).
#[derive(Clone, Debug)]
pub(crate) struct UpLayer {
    w: ParamId,
    b: ParamId,
}

impl UpLayer {
    pub(crate) fn new(init: &mut Init<'_>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(UpLayer {
                w: init.fan_in("w", &[cin, cout, 2, 2, 2], cin)?,
                b: init.full("b", &[cout], 0.0)?,
            })
        })
    }

    pub(crate) fn up<'a>(&self, ctx: Ctx<'a>, x: Var<'a>, extents: [usize; 3]) -> Result<Var<'a>> {
        x.conv_transpose3d_to(ctx.p(self.w), ConvSpec::new(2, 0), Some(extents))?
            .add_channel_bias(ctx.p(self.b))
    }
}

/// Multi-scale context aggregation: parallel dilated 3³ convolutions with
/// rates 1, 2, 3, summed, activated and added back.
#[derive(Clone, Debug)]
pub(crate) struct Mcau {
    branches: Vec<ParamId>,
    b: ParamId,
}

const MCAU_RATES: [usize; 3] = [1, 2, 3];

impl Mcau {
    pub(crate) fn new(init: &mut Init<'_>, name: &str, c: usize) -> Result<Self> {
        init.scoped(name, |init| {
            let branches = MCAU_RATES
                .iter()
                .map(|r| init.normal(&format!("w_d{r}"), &[c, c, 3, 3, 3], (1.0 / (3.0 * 27.0 * c as f64)).sqrt()))
                .collect::<Result<Vec<_>>>()?;
            Ok(Mcau {
                branches,
                b: init.full("b", &[c], 0.0)?,
            })
        })
    }

    pub(crate) fn forward<'a>(&self, ctx: Ctx<'a>, x: Var<'a>) -> Result<Var<'a>> {
        let mut acc: Option<Var<'a>> = None;
        for (&w, &rate) in self.branches.iter().zip(&MCAU_RATES) {
            let y = x.conv3d(ctx.p(w), ConvSpec::dilated(rate))?;
            acc = Some(match acc {
                Some(a) => a.add(y)?,
                None => y,
            });
        }
        let sum = acc.expect("three branches").add_channel_bias(ctx.p(self.b))?;
        x.add(sum.gelu())
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    down: ConvLayer,
    hmb: Hmb,
}

#[derive(Clone, Debug)]
struct CoarseStage {
    up: UpLayer,
    mix: ConvLayer,
    hmb: Hmb,
}

#[derive(Clone, Debug)]
struct RefineStage {
    up: Option<UpLayer>,
    mix: ConvLayer,
    mcau: Mcau,
}

/// Per-input-size scan orders: one 3-D order per scale and one 2-D order
/// per scale for the slice memory.
struct Orders {
    extents: [usize; 3],
    volume: Vec<ScanOrder>,
    slice: Vec<ScanOrder>,
}

pub struct SegModel {
    pub cfg: SegConfig,
    encoders: [Vec<EncoderStage>; MODALITIES],
    fusion: Vec<Hmca>,
    memory: Option<Vec<MemoryStack>>,
    coarse_top: Hmb,
    coarse: Vec<CoarseStage>,
    coarse_out: UpLayer,
    refine: Vec<RefineStage>,
    refine_out: UpLayer,
    head: ConvLayer,
    orders: Mutex<Option<Arc<Orders>>>,
}

/// Concatenation arity used by the refined path at scales `j = 1..=4`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DecodeTrace {
    pub concat_arity: [usize; SCALES],
}

pub struct SegOutput<'a> {
    pub coarse: Var<'a>,
    pub refined: Var<'a>,
    /// Head logits; probabilities are their sigmoid.
    pub logits: Var<'a>,
    pub probs: Var<'a>,
    pub trace: DecodeTrace,
}

/// Per-scale feature pyramid, finest first.
pub type Pyramid<'a> = Vec<Var<'a>>;

impl SegModel {
    /// Build the model and register its freshly initialized parameters.
    pub fn new(cfg: SegConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.channels;
        let mut init = Init::new(store, cfg.seed);
        let init = &mut init;
        let mut encoders: [Vec<EncoderStage>; MODALITIES] = Default::default();
        for (m, enc) in encoders.iter_mut().enumerate() {
            *enc = init.scoped(&format!("enc{m}"), |init| {
                (0..SCALES)
                    .map(|j| {
                        let cin = if j == 0 { 1 } else { ch[j - 1] };
                        Ok(EncoderStage {
                            down: ConvLayer::new(init, &format!("down{j}"), ch[j], cin, 3)?,
                            hmb: Hmb::new(init, &format!("hmb{j}"), cfg.hmb(ch[j]))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
        }
        let fusion = (0..SCALES)
            .map(|j| {
                let hc = HmcaConfig {
                    hmb: cfg.hmb(ch[j]),
                    mlp_hidden: 2 * ch[j],
                    window: Some(cfg.window),
                    interaction: cfg.interaction,
                };
                Hmca::new(init, &format!("fuse{j}"), hc)
            })
            .collect::<Result<Vec<_>>>()?;
        let memory = if cfg.memory {
            Some(
                (0..SCALES)
                    .map(|j| {
                        let mc = MemoryConfig {
                            channels: ch[j],
                            d_state: cfg.d_state,
                            ffn_hidden: 2 * ch[j],
                            depth: cfg.memory_depth,
                            kernel: cfg.gate_kernel,
                        };
                        MemoryStack::new(init, &format!("mem{j}"), mc)
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let coarse_top = Hmb::new(init, "coarse.hmb3", cfg.hmb(ch[3]))?;
        let coarse = init.scoped("coarse", |init| {
            (0..SCALES - 1)
                .map(|j| {
                    Ok(CoarseStage {
                        up: UpLayer::new(init, &format!("up{j}"), ch[j + 1], ch[j])?,
                        mix: ConvLayer::new(init, &format!("mix{j}"), ch[j], 2 * ch[j], 1)?,
                        hmb: Hmb::new(init, &format!("hmb{j}"), cfg.hmb(ch[j]))?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let coarse_out = UpLayer::new(init, "coarse.out", ch[0], 1)?;
        let refine = init.scoped("refine", |init| {
            (0..SCALES)
                .map(|j| {
                    let coarsest = j == SCALES - 1;
                    Ok(RefineStage {
                        up: if coarsest {
                            None
                        } else {
                            Some(UpLayer::new(init, &format!("up{j}"), ch[j + 1], ch[j])?)
                        },
                        mix: ConvLayer::new(init, &format!("mix{j}"), ch[j], if coarsest { 2 } else { 3 } * ch[j], 1)?,
                        mcau: Mcau::new(init, &format!("mcau{j}"), ch[j])?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let refine_out = UpLayer::new(init, "refine.out", ch[0], 1)?;
        let head = ConvLayer::new(init, "head", 1, 2, 1)?;
        Ok(SegModel {
            cfg,
            encoders,
            fusion,
            memory,
            coarse_top,
            coarse,
            coarse_out,
            refine,
            refine_out,
            head,
            orders: Mutex::new(None),
        })
    }

    fn scale_extents(extents: [usize; 3], j: usize) -> [usize; 3] {
        extents.map(|e| e >> (j + 1))
    }

    fn orders(&self, extents: [usize; 3]) -> Result<Arc<Orders>> {
        if extents.iter().any(|&e| e == 0 || e % (1 << SCALES) != 0) {
            return Err(Error::Parameter(format!(
                "volume extents {extents:?} must be positive multiples of {}",
                1 << SCALES
            )));
        }
        let mut cache = self.orders.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(o) = cache.as_ref().filter(|o| o.extents == extents) {
            return Ok(Arc::clone(o));
        }
        let scheme = self.cfg.hilbert_variant;
        let mut volume = Vec::with_capacity(SCALES);
        let mut slice = Vec::with_capacity(SCALES);
        for j in 0..SCALES {
            let [d, h, w] = Self::scale_extents(extents, j);
            volume.push(ScanOrder::new(scheme, &[d, h, w])?);
            slice.push(ScanOrder::new(scheme, &[h, w])?);
        }
        let orders = Arc::new(Orders { extents, volume, slice });
        *cache = Some(Arc::clone(&orders));
        Ok(orders)
    }

    fn with_orders<T>(&self, extents: [usize; 3], f: impl FnOnce(&Orders) -> Result<T>) -> Result<T> {
        f(self.orders(extents)?.as_ref())
    }

    fn extents_of(x: Var<'_>) -> Result<[usize; 3]> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::dim("segmentation input", &s, &[MODALITIES, 0, 0, 0]));
        }
        Ok([s[1], s[2], s[3]])
    }

    /// Encode a `[2×D×H×W]` volume into one pyramid per modality.
    pub fn encode<'a>(&self, ctx: Ctx<'a>, x: Var<'a>) -> Result<[Pyramid<'a>; MODALITIES]> {
        let extents = Self::extents_of(x)?;
        let c = x.shape()[0];
        if c != MODALITIES {
            return Err(Error::Parameter(format!("expected {MODALITIES} modalities, got {c}")));
        }
        self.with_orders(extents, |orders| {
            let mut out: [Pyramid<'a>; MODALITIES] = Default::default();
            for (m, enc) in self.encoders.iter().enumerate() {
                let mut h = x.narrow0(m, m + 1)?;
                for (j, stage) in enc.iter().enumerate() {
                    h = stage.down.conv(ctx, h, ConvSpec::new(2, 1))?.gelu();
                    h = stage.hmb.forward(ctx, h, &orders.volume[j])?;
                    out[m].push(h);
                }
            }
            Ok(out)
        })
    }

    /// Per-scale HMCA with modality 1 as query and modality 2 as context.
    pub fn fuse_modalities<'a>(&self, ctx: Ctx<'a>, p1: &[Var<'a>], p2: &[Var<'a>]) -> Result<Pyramid<'a>> {
        if p1.len() != SCALES || p2.len() != SCALES {
            return Err(Error::dim("fuse_modalities", &[p1.len()], &[p2.len()]));
        }
        let extents = self.cached_extents()?;
        self.with_orders(extents, |orders| {
            (0..SCALES)
                .map(|j| self.fusion[j].forward(ctx, p1[j], p2[j], &orders.volume[j]))
                .collect()
        })
    }

    fn cached_extents(&self) -> Result<[usize; 3]> {
        self.orders
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .as_ref()
            .map(|o| o.extents)
            .ok_or_else(|| Error::State("encode must run before fusion and decoding".into()))
    }

    /// Memory-bank features per scale; zeros when the memory is disabled.
    pub fn bank<'a>(&self, ctx: Ctx<'a>, fused: &[Var<'a>]) -> Result<Vec<Option<Var<'a>>>> {
        let extents = self.cached_extents()?;
        self.with_orders(extents, |orders| {
            fused
                .iter()
                .enumerate()
                .map(|(j, &f)| match &self.memory {
                    Some(stacks) => stacks[j].forward_volume(ctx, f, &orders.slice[j]).map(Some),
                    None => Ok(Some(ctx.constant(Tensor::zeros(&f.shape())))),
                })
                .collect()
        })
    }

    /// Returns coarse and refined logits at input resolution and the
    /// refined-path concatenation arities.
    pub fn decode_dual_path<'a>(
        &self,
        ctx: Ctx<'a>,
        fused: &[Var<'a>],
        bank: &[Option<Var<'a>>],
    ) -> Result<(Var<'a>, Var<'a>, DecodeTrace)> {
        if fused.len() != SCALES {
            return Err(Error::dim("decode", &[fused.len()], &[SCALES]));
        }
        if bank.len() != SCALES {
            return Err(Error::Contract(format!("memory bank has {} scales, expected {SCALES}", bank.len())));
        }
        let mut bank_feats = Vec::with_capacity(SCALES);
        for (j, b) in bank.iter().enumerate() {
            let b = b.ok_or_else(|| Error::Contract(format!("memory bank missing at scale {}", j + 1)))?;
            if b.shape() != fused[j].shape() {
                return Err(Error::dim("memory bank", &b.shape(), &fused[j].shape()));
            }
            bank_feats.push(b);
        }
        let extents = self.cached_extents()?;
        self.with_orders(extents, |orders| {
            let scale = |j: usize| Self::scale_extents(extents, j);

            let mut c = self.coarse_top.forward(ctx, fused[SCALES - 1], &orders.volume[SCALES - 1])?;
            for j in (0..SCALES - 1).rev() {
                let st = &self.coarse[j];
                let up = st.up.up(ctx, c, scale(j))?;
                let mixed = st.mix.conv(ctx, Var::concat0(&[fused[j], up])?, ConvSpec::new(1, 0))?.gelu();
                c = st.hmb.forward(ctx, mixed, &orders.volume[j])?;
            }
            let coarse = self.coarse_out.up(ctx, c, extents)?;

            let mut trace = DecodeTrace::default();
            let mut g: Option<Var<'a>> = None;
            for j in (0..SCALES).rev() {
                let st = &self.refine[j];
                let mut parts = vec![fused[j], bank_feats[j]];
                if let (Some(up), Some(prev)) = (&st.up, g) {
                    parts.push(up.up(ctx, prev, scale(j))?);
                }
                trace.concat_arity[j] = parts.len();
                let mixed = st.mix.conv(ctx, Var::concat0(&parts)?, ConvSpec::new(1, 0))?.gelu();
                g = Some(st.mcau.forward(ctx, mixed)?);
            }
            let refined = self.refine_out.up(ctx, g.expect("four scales"), extents)?;
            Ok((coarse, refined, trace))
        })
    }

    /// `σ(Conv(Cat(coarse, refined)))`, returned as (logits, probabilities).
    pub fn seg_head<'a>(&self, ctx: Ctx<'a>, coarse: Var<'a>, refined: Var<'a>) -> Result<(Var<'a>, Var<'a>)> {
        if coarse.shape() != refined.shape() {
            return Err(Error::dim("seg_head", &coarse.shape(), &refined.shape()));
        }
        let logits = self.head.conv(ctx, Var::concat0(&[coarse, refined])?, ConvSpec::new(1, 0))?;
        Ok((logits, logits.sigmoid()))
    }

    pub fn forward<'a>(&self, ctx: Ctx<'a>, x: Var<'a>) -> Result<SegOutput<'a>> {
        let [p1, p2] = self.encode(ctx, x)?;
        let fused = self.fuse_modalities(ctx, &p1, &p2)?;
        let bank = self.bank(ctx, &fused)?;
        let (coarse, refined, trace) = self.decode_dual_path(ctx, &fused, &bank)?;
        let (logits, probs) = self.seg_head(ctx, coarse, refined)?;
        Ok(SegOutput {
            coarse,
            refined,
            logits,
            probs,
            trace,
        })
    }
}

/// Soft Dice loss `1 - (2Σpy + s) / (Σp + Σy + s)` with smoothing `s`.
pub fn dice_loss<'a>(p: Var<'a>, y: Var<'a>, smooth: f64) -> Result<Var<'a>> {
    let (pv, yv) = (p.value(), y.value());
    if pv.shape() != yv.shape() {
        return Err(Error::dim("dice_loss", pv.shape(), yv.shape()));
    }
    let inter: f64 = pv.data().iter().zip(yv.data()).map(|(a, b)| a * b).sum();
    let denom = pv.sum() + yv.sum() + smooth;
    let num = 2.0 * inter + smooth;
    Ok(p.tape().op(
        "dice_loss",
        &[p, y],
        Tensor::scalar(1.0 - num / denom),
        Box::new(move |v, _, g| {
            let g = g[0];
            let d2 = denom * denom;
            let gp = v[1].data().iter().map(|&y| -g * (2.0 * y * denom - num) / d2).collect();
            let gy = v[0].data().iter().map(|&p| -g * (2.0 * p * denom - num) / d2).collect();
            vec![Some(gp), Some(gy)]
        }),
    ))
}

/// Mean binary cross-entropy of `σ(z)` against `y`, computed from logits.
pub fn bce_with_logits<'a>(z: Var<'a>, y: Var<'a>) -> Result<Var<'a>> {
    Ok(z.softplus().sub(z.mul(y)?)?.mean())
}

const DICE_SMOOTH: f64 = 1.0;

/// BCE + Dice on the head output and on both decoder paths, equally weighted.
pub fn seg_loss<'a>(out: &SegOutput<'a>, target: Var<'a>) -> Result<Var<'a>> {
    let mut total: Option<Var<'a>> = None;
    for z in [out.logits, out.coarse, out.refined] {
        let term = bce_with_logits(z, target)?.add(dice_loss(z.sigmoid(), target, DICE_SMOOTH)?)?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("three terms"))
}

/// Model, parameters and optimizer state.
pub struct Segmenter {
    pub model: SegModel,
    pub store: ParamStore,
    pub adam: Adam,
}

impl Segmenter {
    pub fn new(cfg: SegConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let lr = cfg.lr;
        let model = SegModel::new(cfg, &mut store)?;
        Ok(Segmenter {
            model,
            store,
            adam: Adam::new(lr),
        })
    }

    /// One Adam step on the mean loss over `batch`.
    pub fn train_step(&mut self, batch: &[(&Volume, &MaskVolume)], batch_id: usize) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Parameter("empty training batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        self.store.zero_grad();
        for (vol, mask) in batch {
            if vol.extents() != mask.extents {
                return Err(Error::dim("train_step", &vol.extents(), &mask.extents));
            }
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &self.store);
            let out = self.model.forward(ctx, ctx.constant(vol.data.clone()))?;
            let loss = seg_loss(&out, ctx.constant(mask.to_tensor()))?;
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss in batch {batch_id}")));
            }
            total += value * scale;
            let grads = tape.backward(loss)?;
            self.store.accumulate(&grads, scale);
        }
        self.adam.step(&mut self.store);
        Ok(total)
    }

    /// Run `steps` single-sample steps, visiting the data in a fresh
    /// seeded permutation each epoch. `log` sees (step, loss).
    pub fn fit(
        &mut self,
        data: &[(&Volume, &MaskVolume)],
        steps: usize,
        mut log: impl FnMut(usize, f64),
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Parameter("no training data".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.model.cfg.seed ^ 0x5eed);
        let mut perm: Vec<usize> = Vec::new();
        let (lr, floor) = (self.model.cfg.lr, self.model.cfg.lr_final_ratio);
        for step in 0..steps {
            if perm.is_empty() {
                perm = (0..data.len()).collect();
                perm.shuffle(&mut rng);
            }
            let progress = (2.0 * step as f64 / (steps - 1).max(1) as f64 - 1.0).max(0.0);
            self.adam.lr = lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
            let i = perm.pop().expect("refilled");
            let loss = self.train_step(&[data[i]], step)?;
            log(step, loss);
        }
        Ok(())
    }

    /// Foreground probabilities `[1×D×H×W]`.
    pub fn predict(&self, vol: &Volume) -> Result<Tensor> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store);
        let out = self.model.forward(ctx, ctx.constant(vol.data.clone()))?;
        let probs = (*out.probs.value()).clone();
        Ok(probs)
    }

    pub fn segment(&self, vol: &Volume) -> Result<MaskVolume> {
        MaskVolume::from_probs(&self.predict(vol)?, vol.spacing)
    }

    /// Write parameters to `path` and the config to `path` + `.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, path)?;
        let json = serde_json::to_vec_pretty(&self.model.cfg).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(&sidecar(path), &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar(path);
        let text = std::fs::read(&side)
            .map_err(|e| Error::State(format!("cannot read model config {}: {e}", side.display())))?;
        let cfg: SegConfig = serde_json::from_slice(&text).map_err(|e| Error::Format(e.to_string()))?;
        let mut seg = Segmenter::new(cfg)?;
        let stored = checkpoint::load(path)?;
        seg.store.load_from(&stored)?;
        Ok(seg)
    }
}

pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::zero_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> SegConfig {
        SegConfig {
            channels: [2, 2, 3, 3],
            d_state: 4,
            window: 16,
            ..SegConfig::default()
        }
    }

    fn input(seed: u64, e: usize) -> Tensor {
        Tensor::randn(&[2, e, e, e], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn pyramid_halves_each_scale() {
        let mut store = ParamStore::new();
        let model = SegModel::new(small_cfg(), &mut store).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let [p1, p2] = model.encode(ctx, ctx.constant(input(0, 32))).unwrap();
        let sizes: Vec<usize> = p1.iter().map(|v| v.shape()[1]).collect();
        assert_eq!(sizes, vec![16, 8, 4, 2]);
        assert!(p1.iter().zip(&p2).all(|(a, b)| a.value().max_abs_diff(&b.value()) > 0.0));
        let bad = model.encode(ctx, ctx.constant(Tensor::zeros(&[3, 16, 16, 16])));
        assert!(matches!(bad, Err(Error::Parameter(_))));
    }

    #[test]
    fn decoder_structure_and_path_isolation() {
        let mut store = ParamStore::new();
        let model = SegModel::new(small_cfg(), &mut store).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let [p1, p2] = model.encode(ctx, ctx.constant(input(1, 16))).unwrap();
        let fused = model.fuse_modalities(ctx, &p1, &p2).unwrap();
        let bank = model.bank(ctx, &fused).unwrap();
        let (c1, r1, trace) = model.decode_dual_path(ctx, &fused, &bank).unwrap();
        assert_eq!(trace.concat_arity, [3, 3, 3, 2]);
        assert_eq!(c1.shape(), vec![1, 16, 16, 16]);
        let zeros: Vec<_> = fused.iter().map(|f| Some(ctx.constant(Tensor::zeros(&f.shape())))).collect();
        let (c0, r0, _) = model.decode_dual_path(ctx, &fused, &zeros).unwrap();
        assert_eq!(*c0.value(), *c1.value());
        assert!(r0.value().max_abs_diff(&r1.value()) > 0.0);
        let mut missing = bank.clone();
        missing[2] = None;
        assert!(matches!(model.decode_dual_path(ctx, &fused, &missing), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_fusion_keeps_modality_one() {
        let mut store = ParamStore::new();
        let model = SegModel::new(small_cfg(), &mut store).unwrap();
        zero_params(&mut store, "fuse");
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let [p1, p2] = model.encode(ctx, ctx.constant(input(2, 16))).unwrap();
        let fused = model.fuse_modalities(ctx, &p1, &p2).unwrap();
        for (f, p) in fused.iter().zip(&p1) {
            assert_eq!(*f.value(), *p.value());
        }
    }

    #[test]
    fn fusion_gradient_reaches_second_encoder() {
        let mut store = ParamStore::new();
        let model = SegModel::new(small_cfg(), &mut store).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let [p1, p2] = model.encode(ctx, ctx.constant(input(3, 16))).unwrap();
        let fused = model.fuse_modalities(ctx, &p1, &p2).unwrap();
        let loss = Var::concat0(&[fused[0].reshape(&[fused[0].numel()]).unwrap()]).unwrap().square().sum();
        let grads = tape.backward(loss).unwrap();
        let id = store.id_of("enc1.down0.w").unwrap();
        let g = grads.param_grads().find(|(p, _)| *p == id).and_then(|(_, g)| g).unwrap();
        assert!(g.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn head_outputs_probabilities() {
        let mut store = ParamStore::new();
        let model = SegModel::new(small_cfg(), &mut store).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let out = model.forward(ctx, ctx.constant(input(4, 16))).unwrap();
        assert_eq!(out.probs.shape(), vec![1, 16, 16, 16]);
        assert!(out.probs.value().data().iter().all(|&p| p > 0.0 && p < 1.0));
        let z = ctx.constant(Tensor::full(&[1, 2, 2, 2], 0.3));
        let (_, p) = model.seg_head(ctx, z, z).unwrap();
        assert!(p.value().data().iter().all(|&p| p > 0.0 && p < 1.0));
        let bad = ctx.constant(Tensor::zeros(&[1, 2, 2, 4]));
        assert!(model.seg_head(ctx, z, bad).is_err());
    }

    #[test]
    fn perfect_prediction_losses() {
        let tape = Tape::new();
        let y = Tensor::from_fn(&[1, 2, 2, 2], |i| (i % 2) as f64);
        let d = dice_loss(tape.constant(y.clone()), tape.constant(y.clone()), 1.0).unwrap();
        assert_eq!(d.value().item(), 0.0);
        let z = tape.constant(y.map(|v| if v > 0.5 { 40.0 } else { -40.0 }));
        let b = bce_with_logits(z, tape.constant(y)).unwrap().value().item();
        assert!(b > 0.0 && b < 1e-15);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        use crate::numkernel::gradcheck::{check_gradients, GradCheckOptions};
        let store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = Tensor::randn(&[1, 2, 2, 2], 1.0, &mut rng);
        let y = Tensor::from_fn(&[1, 2, 2, 2], |i| (i % 3 == 0) as u8 as f64);
        let report = check_gradients(
            &store,
            &[z, y],
            |_, v| bce_with_logits(v[0], v[1])?.add(dice_loss(v[0].sigmoid(), v[1], 1.0)?),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err() <= 1e-5, "{report:?}");
    }

    #[test]
    fn config_parsing() {
        let cfg = SegConfig::from_toml("seed = 3\nlr = 0.01\nhilbert_variant = \"raster\"\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.hilbert_variant, ScanScheme::Raster);
        assert!(matches!(SegConfig::from_toml("bogus = 1"), Err(Error::Format(_))));
        assert!(SegConfig::from_toml("lr = -1.0").is_err());
    }
}
