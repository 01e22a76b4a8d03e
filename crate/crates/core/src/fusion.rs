//! Multimodal encoder: text self-attention, cross-attention over visual
//! memories, and a tied-embedding output head.
//!
//! Each block is pre-norm: `x += SelfAttn(LN(x))`, then one residual around
//! the whole cross stage, then `x += FFN(LN(x))`. The cross stage is
//!
//! * single:   `CA_v(h; v)`
//! * stack:    `CA_v(CA_i(h; I); v)`
//! * parallel: `α·CA_v(h; v) + β·CA_i(h; I)`
//!
//! with `h = LN(x)`. Visual memories are projected to the fusion width by
//! one linear map per source before entering any block.

use diffcore::{Graph, ParamStore, ParamVars, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{normal_tensor, AttentionMask, FeedForward, LayerNorm, Linear, MultiHeadAttention, Segments};
use crate::vision::VisFeat;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlendMode {
    Single,
    Stack,
    Parallel,
}

impl BlendMode {
    pub fn name(self) -> &'static str {
        match self {
            BlendMode::Single => "single",
            BlendMode::Stack => "stack",
            BlendMode::Parallel => "parallel",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(BlendMode::Single),
            "stack" => Ok(BlendMode::Stack),
            "parallel" => Ok(BlendMode::Parallel),
            other => Err(Error::Config(format!("unknown blend mode {other:?}"))),
        }
    }

    pub fn uses_image(self) -> bool {
        self != BlendMode::Single
    }
}

/// Blend mode and cross-attention sharing. The α/β scalars live in the
/// parameter store as `fusion.alpha` / `fusion.beta` in parallel mode only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlendConfig {
    pub mode: BlendMode,
    pub share_cross_attn: bool,
}

impl Default for BlendConfig {
    fn default() -> Self {
        BlendConfig {
            mode: BlendMode::Parallel,
            share_cross_attn: true,
        }
    }
}

impl BlendConfig {
    pub fn single() -> Self {
        BlendConfig {
            mode: BlendMode::Single,
            share_cross_attn: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnPattern {
    Bidirectional,
    Causal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    /// Width of the visual features fed to the memory projections.
    pub visual_width: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            vocab_size: crate::data::VOCAB_SIZE,
            max_len: 16,
            width: 32,
            depth: 4,
            heads: 2,
            ffn_ratio: 4,
            visual_width: 32,
        }
    }
}

/// Padded token ids for a batch, `batch × len`, with per-item real lengths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionInput {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    pub lengths: Vec<usize>,
}

impl FusionInput {
    pub fn new(seqs: &[Vec<usize>]) -> Result<Self> {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seqs.is_empty() || len == 0 {
            return Err(Error::Contract("empty fusion input".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat(crate::data::PAD).take(len - s.len()));
        }
        Ok(FusionInput {
            ids,
            batch: seqs.len(),
            len,
            lengths: seqs.iter().map(Vec::len).collect(),
        })
    }

    pub fn segments(&self) -> Segments {
        Segments::new(self.batch, self.len)
    }

    pub fn row(&self, item: usize, pos: usize) -> usize {
        item * self.len + pos
    }
}

/// Projected visual memory: `count` items of `len` rows each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Memory {
    pub var: Var,
    pub segments: Segments,
}

/// Cross-attention from text queries to one projected memory per item.
pub fn cross_attend(
    g: &mut Graph,
    p: &ParamVars,
    attn: &MultiHeadAttention,
    x: Var,
    queries: Segments,
    mem: &Memory,
) -> Result<Var> {
    if mem.segments.len == 0 || mem.segments.count == 0 {
        return Err(Error::Contract("cross-attention over an empty memory".into()));
    }
    attn.forward_segmented(
        g,
        p,
        x,
        mem.var,
        queries,
        mem.segments,
        &[AttentionMask::bidirectional()],
    )
}

#[derive(Clone, Debug)]
pub struct FusedBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_v: MultiHeadAttention,
    /// Absent in single mode and when sharing.
    pub cross_i: Option<MultiHeadAttention>,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl FusedBlock {
    fn new(prefix: &str, cfg: &FusionConfig, blend: &BlendConfig) -> Result<Self> {
        let w = cfg.width;
        let cross = |name: &str| MultiHeadAttention::new(&format!("{prefix}.{name}"), w, w, cfg.heads);
        let cross_i = if blend.mode.uses_image() && !blend.share_cross_attn {
            Some(cross("cross_i")?)
        } else {
            None
        };
        Ok(FusedBlock {
            ln_self: LayerNorm::new(&format!("{prefix}.ln_self"), w),
            self_attn: MultiHeadAttention::new(&format!("{prefix}.self_attn"), w, w, cfg.heads)?,
            ln_cross: LayerNorm::new(&format!("{prefix}.ln_cross"), w),
            cross_v: cross("cross_v")?,
            cross_i,
            ln_ffn: LayerNorm::new(&format!("{prefix}.ln_ffn"), w),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), w, w * cfg.ffn_ratio),
        })
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.ln_self.init(store);
        self.self_attn.init(store, rng);
        self.ln_cross.init(store);
        self.cross_v.init(store, rng);
        if let Some(ci) = &self.cross_i {
            ci.init(store, rng);
        }
        self.ln_ffn.init(store);
        self.ffn.init(store, rng);
    }

    fn cross_image(&self) -> &MultiHeadAttention {
        self.cross_i.as_ref().unwrap_or(&self.cross_v)
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        x: Var,
        input: &FusionInput,
        masks: &[AttentionMask],
        mems: &Memories,
        blend: &BlendConfig,
        mix: Option<(Var, Var)>,
    ) -> Result<Var> {
        let seg = input.segments();
        let h = self.ln_self.forward(g, p, x)?;
        let h = self.self_attn.forward_segmented(g, p, h, h, seg, seg, masks)?;
        let x = g.add(x, h)?;

        let h = self.ln_cross.forward(g, p, x)?;
        let ca = match (blend.mode, &mems.image) {
            (BlendMode::Single, _) => cross_attend(g, p, &self.cross_v, h, seg, &mems.video)?,
            (BlendMode::Stack, Some(img)) => {
                let hi = cross_attend(g, p, self.cross_image(), h, seg, img)?;
                cross_attend(g, p, &self.cross_v, hi, seg, &mems.video)?
            }
            (BlendMode::Parallel, Some(img)) => {
                let (alpha, beta) = mix.expect("parallel mode binds alpha/beta");
                let cv = cross_attend(g, p, &self.cross_v, h, seg, &mems.video)?;
                let ci = cross_attend(g, p, self.cross_image(), h, seg, img)?;
                let cv = g.mul(cv, alpha)?;
                let ci = g.mul(ci, beta)?;
                g.add(cv, ci)?
            }
            (mode, None) => {
                return Err(Error::Config(format!(
                    "{} blending needs image features",
                    mode.name()
                )))
            }
        };
        let x = g.add(x, ca)?;

        let h = self.ln_ffn.forward(g, p, x)?;
        let h = self.ffn.forward(g, p, h)?;
        Ok(g.add(x, h)?)
    }
}

/// Projected memories for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Memories {
    pub video: Memory,
    pub image: Option<Memory>,
}

#[derive(Clone, Debug)]
pub struct FusionEncoder {
    pub cfg: FusionConfig,
    pub blend: BlendConfig,
    pub embed: String,
    pub pos: String,
    pub mem_proj_v: Linear,
    pub mem_proj_i: Option<Linear>,
    pub blocks: Vec<FusedBlock>,
    pub ln_final: LayerNorm,
    pub head_bias: String,
    pub alpha: String,
    pub beta: String,
}

impl FusionEncoder {
    pub fn new(prefix: &str, cfg: &FusionConfig, blend: &BlendConfig) -> Result<Self> {
        let blocks = (0..cfg.depth)
            .map(|i| FusedBlock::new(&format!("{prefix}.blocks.{i}"), cfg, blend))
            .collect::<Result<Vec<_>>>()?;
        Ok(FusionEncoder {
            cfg: cfg.clone(),
            blend: *blend,
            embed: format!("{prefix}.embed"),
            pos: format!("{prefix}.pos"),
            mem_proj_v: Linear::new(&format!("{prefix}.mem_proj_v"), cfg.visual_width, cfg.width),
            mem_proj_i: blend
                .mode
                .uses_image()
                .then(|| Linear::new(&format!("{prefix}.mem_proj_i"), cfg.visual_width, cfg.width)),
            blocks,
            ln_final: LayerNorm::new(&format!("{prefix}.ln_final"), cfg.width),
            head_bias: format!("{prefix}.head_bias"),
            alpha: format!("{prefix}.alpha"),
            beta: format!("{prefix}.beta"),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let std = 1.0 / (self.cfg.width as f64).sqrt();
        store.insert(&self.embed, normal_tensor(vec![self.cfg.vocab_size, self.cfg.width], std, rng));
        store.insert(&self.pos, normal_tensor(vec![self.cfg.max_len, self.cfg.width], std, rng));
        self.mem_proj_v.init(store, rng);
        if let Some(mi) = &self.mem_proj_i {
            mi.init(store, rng);
        }
        for b in &self.blocks {
            b.init(store, rng);
        }
        self.ln_final.init(store);
        store.insert(&self.head_bias, Tensor::zeros(vec![self.cfg.vocab_size]));
        if self.blend.mode == BlendMode::Parallel {
            store.insert(&self.alpha, Tensor::scalar(0.5));
            store.insert(&self.beta, Tensor::scalar(0.5));
        }
    }

    /// Names of the cross-attention stage parameters.
    pub fn cross_param_names(&self) -> Vec<String> {
        self.blocks
            .iter()
            .flat_map(|b| {
                let mut names: Vec<String> = b.cross_v.param_names().into_iter().map(String::from).collect();
                if let Some(ci) = &b.cross_i {
                    names.extend(ci.param_names().into_iter().map(String::from));
                }
                names
            })
            .collect()
    }

    fn project(&self, g: &mut Graph, p: &ParamVars, proj: &Linear, feat: &VisFeat) -> Result<Memory> {
        Ok(Memory {
            var: proj.forward(g, p, feat.var)?,
            segments: feat.item_segments(),
        })
    }

    /// Projects the video features and, in blending modes, the image features.
    pub fn memories(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        video: &VisFeat,
        image: Option<&VisFeat>,
    ) -> Result<Memories> {
        let video_mem = self.project(g, p, &self.mem_proj_v, video)?;
        let image = match (&self.mem_proj_i, image) {
            (Some(proj), Some(img)) => {
                if img.batch != video.batch {
                    return Err(Error::Contract(format!(
                        "image batch {} differs from video batch {}",
                        img.batch, video.batch
                    )));
                }
                Some(self.project(g, p, proj, img)?)
            }
            (Some(_), None) => {
                return Err(Error::Config(format!(
                    "{} blending needs image features",
                    self.blend.mode.name()
                )))
            }
            (None, _) => None,
        };
        Ok(Memories {
            video: video_mem,
            image,
        })
    }

    fn masks(&self, input: &FusionInput, pattern: AttnPattern) -> Result<Vec<AttentionMask>> {
        Ok(match pattern {
            AttnPattern::Causal => vec![AttentionMask::causal()],
            AttnPattern::Bidirectional if input.lengths.iter().all(|&l| l == input.len) => {
                vec![AttentionMask::bidirectional()]
            }
            AttnPattern::Bidirectional => input
                .lengths
                .iter()
                .map(|&real| {
                    let l = input.len;
                    let vis = (0..l * l).map(|k| if k % l < real { 1.0 } else { 0.0 }).collect();
                    AttentionMask::custom(Tensor::new(vec![l, l], vis)?)
                })
                .collect::<Result<Vec<_>>>()?,
        })
    }

    /// Final hidden states, `(B·L) × width`.
    pub fn hidden(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        input: &FusionInput,
        mems: &Memories,
        pattern: AttnPattern,
    ) -> Result<Var> {
        if input.len > self.cfg.max_len {
            return Err(Error::Contract(format!(
                "fusion input of {} tokens exceeds max length {}",
                input.len, self.cfg.max_len
            )));
        }
        if mems.video.segments.count != input.batch {
            return Err(Error::Contract(format!(
                "{} memories for {} sequences",
                mems.video.segments.count, input.batch
            )));
        }
        let tok = g.embedding(p.get(&self.embed)?, &input.ids)?;
        let pos_rows: Vec<usize> = (0..input.ids.len()).map(|r| r % input.len).collect();
        let pos = g.embedding(p.get(&self.pos)?, &pos_rows)?;
        let mut x = g.add(tok, pos)?;
        let masks = self.masks(input, pattern)?;
        let mix = if self.blend.mode == BlendMode::Parallel {
            Some((p.get(&self.alpha)?, p.get(&self.beta)?))
        } else {
            None
        };
        for b in &self.blocks {
            x = b.forward(g, p, x, input, &masks, mems, &self.blend, mix)?;
        }
        self.ln_final.forward(g, p, x)
    }

    /// Logits over the vocabulary, `(B·L) × vocab`, via the tied embedding.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        input: &FusionInput,
        mems: &Memories,
        pattern: AttnPattern,
    ) -> Result<Var> {
        let h = self.hidden(g, p, input, mems, pattern)?;
        let table = g.transpose(p.get(&self.embed)?)?;
        let logits = g.matmul(h, table)?;
        Ok(g.add(logits, p.get(&self.head_bias)?)?)
    }
}
