//! Mask-derived prompts and the fused-prompt classifier.
//!
//! A predicted lesion mask is summarized as attributes (size, centroid,
//! region, bounding box) and rendered as a sentence. The sentence is
//! embedded byte by byte; the mask is encoded into visual tokens. HMCA fuses
//! the two with text as query, and the fused sequence `R_enhanced` is
//! prepended to image query tokens before a scan-and-pool classifier.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{Hmb, HmbConfig, Hmca, HmcaConfig, Interaction, Linear};
use crate::error::{Error, Result};
use crate::hilbert::{ScanOrder, ScanScheme};
use crate::init::Init;
use crate::io::write_atomic;
use crate::net::sidecar;
use crate::numkernel::{checkpoint, Adam, ConvSpec, Ctx, ParamId, ParamStore, Tape, Var};
use crate::synth::Diagnosis;
use crate::volume::{MaskVolume, Spacing, Volume};

pub const CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionAttributes {
    pub present: bool,
    pub volume_voxels: usize,
    pub volume_ml: f64,
    /// (x, y, z) in voxel coordinates.
    pub centroid: Option<[f64; 3]>,
    pub location_label: String,
    /// Inclusive (x, y, z) corners.
    pub bbox: Option<([usize; 3], [usize; 3])>,
}

const AXIS_WORDS: [[&str; 2]; 3] = [["left", "right"], ["anterior", "posterior"], ["inferior", "superior"]];

/// Region of a 3×3×3 partition of the volume containing `centroid`.
/// Axes x, y, z run along W, H, D; the middle third of every axis reads as
/// "center".
pub fn location_label(centroid: [f64; 3], extents_xyz: [usize; 3]) -> String {
    let bin = |c: f64, n: usize| ((3.0 * (c + 0.5) / n as f64).floor() as isize).clamp(0, 2) as usize;
    let b = [0, 1, 2].map(|a| bin(centroid[a], extents_xyz[a]));
    // anterior/posterior, then left/right, then inferior/superior
    let parts: Vec<&str> = [1, 0, 2]
        .iter()
        .filter_map(|&a| match b[a] {
            0 => Some(AXIS_WORDS[a][0]),
            2 => Some(AXIS_WORDS[a][1]),
            _ => None,
        })
        .collect();
    if parts.is_empty() {
        "center".to_string()
    } else {
        parts.join("-")
    }
}

pub fn extract_attributes(mask: &MaskVolume, spacing: Spacing) -> LesionAttributes {
    let [d, h, w] = mask.extents;
    let mut n = 0usize;
    let mut sum = [0.0f64; 3];
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask.get(z, y, x) {
                    continue;
                }
                let p = [x, y, z];
                n += 1;
                for a in 0..3 {
                    sum[a] += p[a] as f64;
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
        }
    }
    if n == 0 {
        return LesionAttributes {
            present: false,
            volume_voxels: 0,
            volume_ml: 0.0,
            centroid: None,
            location_label: "no lesion".to_string(),
            bbox: None,
        };
    }
    let centroid = sum.map(|s| s / n as f64);
    LesionAttributes {
        present: true,
        volume_voxels: n,
        volume_ml: n as f64 * spacing.iter().product::<f64>() / 1000.0,
        centroid: Some(centroid),
        location_label: location_label(centroid, [w, h, d]),
        bbox: Some((lo, hi)),
    }
}

pub fn render_sentence(a: &LesionAttributes) -> String {
    match (a.present, a.bbox) {
        (true, Some((lo, hi))) => format!(
            "Lesion detected in the {}; volume {:.3} ml; bounding box x {}-{}, y {}-{}, z {}-{}.",
            a.location_label, a.volume_ml, lo[0], hi[0], lo[1], hi[1], lo[2], hi[2]
        ),
        _ => "No lesion detected.".to_string(),
    }
}

/// Cross-entropy over rows of `logits[B×K]` plus `λ`·InfoNCE between the
/// mean-pooled `r_enhanced[i]` and `r_reference[i]` (cosine similarity over
/// temperature `tau`; positives on the diagonal).
pub fn jvlm_loss<'a>(
    logits: Var<'a>,
    labels: &[usize],
    r_enhanced: &[Var<'a>],
    r_reference: &[Var<'a>],
    lambda: f64,
    tau: f64,
) -> Result<Var<'a>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&y| y >= s[1]) {
        return Err(Error::dim("jvlm_loss", &s, &[labels.len()]));
    }
    if !(lambda >= 0.0) || !(tau > 0.0) {
        return Err(Error::Parameter(format!("need lambda >= 0 and tau > 0, got {lambda}, {tau}")));
    }
    let (b, k) = (s[0], s[1]);
    let pick: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * k + y).collect();
    let ce = logits
        .log_softmax_last()
        .gather(pick.into(), &[b])?
        .mean()
        .neg();
    if lambda == 0.0 {
        return Ok(ce);
    }
    if b < 2 {
        return Err(Error::Contract("contrastive consistency needs a batch of at least 2".into()));
    }
    if r_enhanced.len() != b || r_reference.len() != b {
        return Err(Error::dim("jvlm_loss", &[r_enhanced.len()], &[r_reference.len()]));
    }
    let pool = |rs: &[Var<'a>]| -> Result<Var<'a>> {
        let pooled = rs.iter().map(|r| r.mean_rows()).collect::<Result<Vec<_>>>()?;
        Var::concat0(&pooled)?.normalize_rows(1e-12)
    };
    let (e, r) = (pool(r_enhanced)?, pool(r_reference)?);
    let sim = e.matmul(r.transpose()?)?.scale(1.0 / tau);
    let diag: Vec<usize> = (0..b).map(|i| i * b + i).collect();
    let nce = sim.log_softmax_last().gather(diag.into(), &[b])?.mean().neg();
    ce.add(nce.scale(lambda))
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierMode {
    /// Prompt fusion plus image query tokens.
    #[default]
    Fused,
    /// Image query tokens only.
    ImageOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub seed: u64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub mode: ClassifierMode,
    /// Token width.
    pub width: usize,
    pub d_state: usize,
    pub max_text: usize,
    pub lambda: f64,
    pub tau: f64,
    /// Text serves as the query stream when true, visual tokens otherwise.
    pub text_query: bool,
    /// Random axis flips of each training case.
    pub augment: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            seed: 0,
            lr: 2e-3,
            steps: 600,
            batch: 6,
            mode: ClassifierMode::Fused,
            width: 16,
            d_state: 8,
            max_text: 128,
            lambda: 0.5,
            tau: 0.1,
            text_query: true,
            augment: true,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.d_state == 0 || self.max_text == 0 || self.batch == 0 {
            return Err(Error::Parameter("width, d_state, max_text and batch must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.tau > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Parameter("need lr > 0, tau > 0, lambda >= 0".into()));
        }
        if self.mode == ClassifierMode::Fused && self.lambda > 0.0 && self.batch < 2 {
            return Err(Error::Contract("contrastive consistency needs batch >= 2".into()));
        }
        Ok(())
    }
}

/// Three stride-2 3³ convolutions producing `[width × D/8 × H/8 × W/8]`,
/// read out as Hilbert-ordered tokens.
#[derive(Clone, Debug)]
struct TokenEncoder {
    convs: Vec<(ParamId, ParamId)>,
}

impl TokenEncoder {
    fn new(init: &mut Init<'_>, name: &str, cin: usize, width: usize) -> Result<Self> {
        let chans = [cin, width / 2, width, width];
        init.scoped(name, |init| {
            let convs = (0..3)
                .map(|i| {
                    let (a, b) = (chans[i], chans[i + 1]);
                    Ok((
                        init.fan_in(&format!("conv{i}.w"), &[b, a, 3, 3, 3], a * 27)?,
                        init.full(&format!("conv{i}.b"), &[b], 0.0)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TokenEncoder { convs })
        })
    }

    fn forward<'a>(&self, ctx: Ctx<'a>, x: Var<'a>) -> Result<Var<'a>> {
        let mut h = x;
        for (i, &(w, b)) in self.convs.iter().enumerate() {
            h = h.conv3d(ctx.p(w), ConvSpec::new(2, 1))?.add_channel_bias(ctx.p(b))?;
            if i + 1 < self.convs.len() {
                h = h.gelu();
            }
        }
        let s = h.shape();
        let order = ScanOrder::new(ScanScheme::Hilbert, &s[1..])?;
        order.to_tokens(h)
    }
}

/// Byte embedding plus learned positions.
#[derive(Clone, Debug)]
struct TextEmbedding {
    bytes: ParamId,
    positions: ParamId,
    width: usize,
    max_len: usize,
}

impl TextEmbedding {
    fn new(init: &mut Init<'_>, width: usize, max_len: usize) -> Result<Self> {
        Ok(TextEmbedding {
            bytes: init.normal("text.bytes", &[256, width], 0.5)?,
            positions: init.normal("text.positions", &[max_len, width], 0.1)?,
            width,
            max_len,
        })
    }

    fn forward<'a>(&self, ctx: Ctx<'a>, text: &str) -> Result<Var<'a>> {
        let bytes: Vec<u8> = text.bytes().take(self.max_len).collect();
        if bytes.is_empty() {
            return Err(Error::Parameter("empty prompt text".into()));
        }
        let (t, d) = (bytes.len(), self.width);
        let idx: Vec<usize> = bytes
            .iter()
            .flat_map(|&b| (0..d).map(move |k| b as usize * d + k))
            .collect();
        let tokens = ctx.p(self.bytes).gather(idx.into(), &[t, d])?;
        tokens.add(ctx.p(self.positions).narrow0(0, t)?)
    }
}

/// Everything the classifier reads for one case.
#[derive(Clone, Copy)]
pub struct ClassifierInput<'s> {
    pub volume: &'s Volume,
    pub mask: &'s MaskVolume,
}

/// A training case: the prompt is built from `mask`, the consistency target
/// from `gt_mask`.
#[derive(Clone, Copy)]
pub struct ClsExample<'s> {
    pub volume: &'s Volume,
    pub mask: &'s MaskVolume,
    pub gt_mask: &'s MaskVolume,
    pub label: Diagnosis,
}

impl<'s> ClsExample<'s> {
    pub fn input(&self) -> ClassifierInput<'s> {
        ClassifierInput { volume: self.volume, mask: self.mask }
    }
}

pub struct FusedPrompt<'a> {
    pub visual: Var<'a>,
    pub text: Var<'a>,
    pub r_enhanced: Var<'a>,
}

pub struct PromptModel {
    pub cfg: PromptConfig,
    image: TokenEncoder,
    visual: Option<TokenEncoder>,
    text: Option<TextEmbedding>,
    fusion: Option<Hmca>,
    mixer: Hmb,
    readout: Linear,
}

pub struct Prediction {
    pub label: Diagnosis,
    pub probs: [f64; CLASSES],
}

impl PromptModel {
    pub fn new(cfg: PromptConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(store, cfg.seed);
        let init = &mut init;
        let d = cfg.width;
        let hmb = HmbConfig::new(d, cfg.d_state);
        let fused = cfg.mode == ClassifierMode::Fused;
        Ok(PromptModel {
            image: TokenEncoder::new(init, "image", 2, d)?,
            visual: if fused { Some(TokenEncoder::new(init, "visual", 1, d)?) } else { None },
            text: if fused { Some(TextEmbedding::new(init, d, cfg.max_text)?) } else { None },
            fusion: if fused {
                let hc = HmcaConfig {
                    hmb,
                    mlp_hidden: 2 * d,
                    window: None,
                    interaction: Interaction::Attention,
                };
                Some(Hmca::new(init, "fusion", hc)?)
            } else {
                None
            },
            mixer: Hmb::new(init, "mixer", hmb)?,
            readout: Linear::new(init, "readout", d, CLASSES)?,
            cfg,
        })
    }

    /// Visual tokens `[T_v×d]` of a binary mask.
    pub fn encode_visual<'a>(&self, ctx: Ctx<'a>, mask: &MaskVolume) -> Result<Var<'a>> {
        let enc = self.visual.as_ref().ok_or_else(|| Error::State("image-only model has no visual encoder".into()))?;
        enc.forward(ctx, ctx.constant(mask.to_tensor()))
    }

    pub fn embed_text<'a>(&self, ctx: Ctx<'a>, text: &str) -> Result<Var<'a>> {
        let emb = self.text.as_ref().ok_or_else(|| Error::State("image-only model has no text embedding".into()))?;
        emb.forward(ctx, text)
    }

    /// `R_enhanced = Cat(visual, HMCA(query stream, context stream))`.
    pub fn fuse_prompt<'a>(&self, ctx: Ctx<'a>, visual: Var<'a>, text: Var<'a>) -> Result<Var<'a>> {
        let (vs, ts) = (visual.shape(), text.shape());
        if vs.len() != 2 || ts.len() != 2 || vs[1] != ts[1] {
            return Err(Error::dim("fuse_prompt", &vs, &ts));
        }
        let hmca = self.fusion.as_ref().ok_or_else(|| Error::State("image-only model has no fusion block".into()))?;
        let fused = if self.cfg.text_query {
            hmca.forward_tokens(ctx, text, visual)?
        } else {
            hmca.forward_tokens(ctx, visual, text)?
        };
        let other = if self.cfg.text_query { visual } else { text };
        Var::concat0(&[other, fused])
    }

    pub fn prompt<'a>(&self, ctx: Ctx<'a>, mask: &MaskVolume) -> Result<FusedPrompt<'a>> {
        let sentence = render_sentence(&extract_attributes(mask, mask.spacing()));
        let visual = self.encode_visual(ctx, mask)?;
        let text = self.embed_text(ctx, &sentence)?;
        let r_enhanced = self.fuse_prompt(ctx, visual, text)?;
        Ok(FusedPrompt { visual, text, r_enhanced })
    }

    /// Class logits `[1×3]` and, in fused mode, `R_enhanced`.
    pub fn logits<'a>(&self, ctx: Ctx<'a>, input: &ClassifierInput<'_>) -> Result<(Var<'a>, Option<Var<'a>>)> {
        if input.volume.extents() != input.mask.extents {
            return Err(Error::dim("classify", &input.volume.extents(), &input.mask.extents));
        }
        let query = self.image.forward(ctx, ctx.constant(input.volume.data.clone()))?;
        let (seq, r) = match self.cfg.mode {
            ClassifierMode::Fused => {
                let p = self.prompt(ctx, input.mask)?;
                (Var::concat0(&[p.r_enhanced, query])?, Some(p.r_enhanced))
            }
            ClassifierMode::ImageOnly => (query, None),
        };
        let pooled = self.mixer.forward_tokens(ctx, seq)?.mean_rows()?;
        Ok((self.readout.forward(ctx, pooled)?, r))
    }
}

pub struct Classifier {
    pub model: PromptModel,
    pub store: ParamStore,
    pub adam: Adam,
}

impl Classifier {
    pub fn new(cfg: PromptConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let lr = cfg.lr;
        let model = PromptModel::new(cfg, &mut store)?;
        Ok(Classifier { model, store, adam: Adam::new(lr) })
    }

    /// One optimizer step on a batch.
    pub fn train_step(&mut self, batch: &[ClsExample<'_>]) -> Result<f64> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store);
        let cfg = &self.model.cfg;
        let lambda = if cfg.mode == ClassifierMode::Fused { cfg.lambda } else { 0.0 };
        let mut logits = Vec::with_capacity(batch.len());
        let (mut enh, mut refs) = (Vec::new(), Vec::new());
        for ex in batch {
            let (l, r) = self.model.logits(ctx, &ex.input())?;
            logits.push(l);
            if let (Some(r), true) = (r, lambda > 0.0) {
                let truth = render_sentence(&extract_attributes(ex.gt_mask, ex.gt_mask.spacing()));
                enh.push(r);
                refs.push(self.model.embed_text(ctx, &truth)?);
            }
        }
        let labels: Vec<usize> = batch.iter().map(|ex| ex.label.index()).collect();
        let loss = jvlm_loss(Var::concat0(&logits)?, &labels, &enh, &refs, lambda, cfg.tau)?;
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(Error::Numeric("non-finite classifier loss".into()));
        }
        let grads = tape.backward(loss)?;
        self.store.zero_grad();
        self.store.accumulate(&grads, 1.0);
        self.adam.step(&mut self.store);
        Ok(value)
    }

    /// `steps` optimizer steps over seeded, epoch-shuffled batches.
    pub fn fit(&mut self, data: &[ClsExample<'_>], steps: usize, mut log: impl FnMut(usize, f64)) -> Result<()> {
        let batch = self.model.cfg.batch;
        if data.len() < batch {
            return Err(Error::Parameter(format!("need at least {batch} training cases, got {}", data.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.model.cfg.seed ^ 0xc1a5);
        let mut perm: Vec<usize> = Vec::new();
        for step in 0..steps {
            let mut picked = Vec::with_capacity(batch);
            while picked.len() < batch {
                if perm.is_empty() {
                    perm = (0..data.len()).collect();
                    perm.shuffle(&mut rng);
                }
                picked.push(data[perm.pop().expect("refilled")]);
            }
            if !self.model.cfg.augment {
                log(step, self.train_step(&picked)?);
                continue;
            }
            let owned: Vec<_> = picked
                .iter()
                .map(|ex| {
                    let axes: [bool; 3] = rng.random();
                    (ex.volume.flipped(axes), ex.mask.flipped(axes), ex.gt_mask.flipped(axes), ex.label)
                })
                .collect();
            let batch: Vec<_> = owned
                .iter()
                .map(|(v, m, g, label)| ClsExample { volume: v, mask: m, gt_mask: g, label: *label })
                .collect();
            log(step, self.train_step(&batch)?);
        }
        Ok(())
    }

    pub fn classify(&self, input: &ClassifierInput<'_>) -> Result<Prediction> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store);
        let (logits, _) = self.model.logits(ctx, input)?;
        let probs_t = logits.softmax_last().value();
        let probs: [f64; CLASSES] = probs_t.data().try_into().map_err(|_| Error::dim("classify", probs_t.shape(), &[1, CLASSES]))?;
        let label = Diagnosis::from_index(argmax(&probs)).expect("three classes");
        Ok(Prediction { label, probs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, path)?;
        let json = serde_json::to_vec_pretty(&self.model.cfg).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(&sidecar(path), &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar(path);
        let text = std::fs::read(&side)
            .map_err(|e| Error::State(format!("cannot read classifier config {}: {e}", side.display())))?;
        let cfg: PromptConfig = serde_json::from_slice(&text).map_err(|e| Error::Format(e.to_string()))?;
        let stored = checkpoint::load(path).map_err(|e| Error::State(format!("classifier checkpoint: {e}")))?;
        let mut c = Classifier::new(cfg)?;
        c.store.load_from(&stored)?;
        Ok(c)
    }
}
