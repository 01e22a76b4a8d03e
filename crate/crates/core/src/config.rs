//! Flat `key = value` run configuration.
//!
//! Every key has a default, unknown keys are rejected, and the canonical
//! rendering (all keys, sorted) is hashed with SHA-256 so checkpoints and
//! results can name the exact configuration they came from.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::BlendMode;
use crate::model::{ModelConfig, RetrievalFeature};
use crate::objectives::VtcDirection;

/// Which loss a training stage minimizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Objective {
    /// Contrastive + masked LM + causal LM.
    #[default]
    Pretrain,
    /// Answer-only causal loss on the QA pairs.
    Vqa,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Pretrain => "pretrain",
            Objective::Vqa => "vqa",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Optimizer steps for adapt, tune and blend.
    pub steps: [usize; 3],
    pub batch_size: usize,
    /// Learning rate of new modules (adapters, fusion, projections, tau).
    pub lr: f64,
    /// Backbone learning rate as a fraction of `lr`.
    pub backbone_lr_ratio: f64,
    pub drop_rate: f64,
    pub clip_norm: f64,
    pub unfreeze_text: bool,
    pub unfreeze_image: bool,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: [50, 50, 25],
            batch_size: 8,
            lr: 1e-3,
            // 5e-7 / 1e-4.
            backbone_lr_ratio: 0.005,
            drop_rate: 0.1,
            clip_norm: 1.0,
            unfreeze_text: false,
            unfreeze_image: false,
            objective: Objective::Pretrain,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub dual_softmax: bool,
    pub dual_softmax_temp: f64,
    pub beam: usize,
    pub max_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            dual_softmax: true,
            dual_softmax_temp: 100.0,
            beam: 1,
            max_len: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// One documented key: name, help text.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed; VLAB_SEED overrides it"),
    ("frames", "frames sampled per video"),
    ("embed_dim", "joint embedding width for contrast and retrieval"),
    ("vision.width", "vision transformer width"),
    ("vision.depth", "vision transformer blocks"),
    ("vision.heads", "vision attention heads"),
    ("vision.patch", "patch side in pixels"),
    ("vision.ffn_ratio", "vision FFN expansion"),
    ("adapter.layers", "comma-separated block indices carrying adapters, or none"),
    ("adapter.width", "adapter bottleneck width"),
    ("adapter.kernel", "dynamic convolution kernel side"),
    ("adapter.heads", "temporal transformer heads"),
    ("adapter.residual", "add the adapter output to its input (false replaces it)"),
    ("text.width", "text encoder width"),
    ("text.depth", "text encoder blocks"),
    ("text.heads", "text attention heads"),
    ("fusion.width", "multimodal encoder width"),
    ("fusion.depth", "multimodal encoder blocks"),
    ("fusion.heads", "multimodal attention heads"),
    ("blend.mode", "stack | parallel, used by the blended model"),
    ("blend.share", "share cross-attention weights between image and video"),
    ("vtc.direction", "symmetric | video_to_text"),
    ("retrieval.feature", "mean | adapted, video embedding of the blended model"),
    ("mlm.rate", "fraction of caption tokens masked"),
    ("vqa.answer_mask_rate", "probability of masking each answer token"),
    ("train.steps.adapt", "optimizer steps in adaptive transferring"),
    ("train.steps.tune", "optimizer steps in integrated tuning"),
    ("train.steps.blend", "optimizer steps in feature blending"),
    ("train.batch_size", "pairs per step"),
    ("train.lr", "learning rate of new modules"),
    ("train.backbone_lr_ratio", "backbone learning rate as a fraction of train.lr"),
    ("train.drop_rate", "stochastic depth rate of the video backbone"),
    ("train.clip_norm", "global gradient norm clip"),
    ("train.unfreeze_text", "train the text encoder while blending"),
    ("train.unfreeze_image", "train the plain image encoder while blending"),
    ("train.objective", "pretrain | vqa"),
    ("eval.dual_softmax", "re-score retrieval with dual softmax"),
    ("eval.dual_softmax_temp", "dual softmax temperature"),
    ("eval.beam", "beam width for generation (1 = greedy)"),
    ("eval.max_len", "generated tokens at most"),
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl RunConfig {
    /// Parses `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.insert(k.to_string(), n + 1).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let e = &mut self.eval;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "frames" => m.frames = parse(key, v)?,
            "embed_dim" => m.embed_dim = parse(key, v)?,
            "vision.width" => {
                m.vision.width = parse(key, v)?;
                m.fusion.visual_width = m.vision.width;
            }
            "vision.depth" => m.vision.depth = parse(key, v)?,
            "vision.heads" => m.vision.heads = parse(key, v)?,
            "vision.patch" => m.vision.patch = parse(key, v)?,
            "vision.ffn_ratio" => m.vision.ffn_ratio = parse(key, v)?,
            "adapter.layers" => {
                m.adapter_layers = if v == "none" || v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?
                }
            }
            "adapter.width" => m.adapter_width = parse(key, v)?,
            "adapter.kernel" => m.vision.adapter.kernel = parse(key, v)?,
            "adapter.heads" => m.vision.adapter.heads = parse(key, v)?,
            "adapter.residual" => m.vision.adapter.residual = parse(key, v)?,
            "text.width" => m.text.width = parse(key, v)?,
            "text.depth" => m.text.depth = parse(key, v)?,
            "text.heads" => m.text.heads = parse(key, v)?,
            "fusion.width" => m.fusion.width = parse(key, v)?,
            "fusion.depth" => m.fusion.depth = parse(key, v)?,
            "fusion.heads" => m.fusion.heads = parse(key, v)?,
            "blend.mode" => m.blend.mode = BlendMode::from_name(v)?,
            "blend.share" => m.blend.share_cross_attn = parse(key, v)?,
            "vtc.direction" => {
                m.vtc = match v {
                    "symmetric" => VtcDirection::Symmetric,
                    "video_to_text" => VtcDirection::VideoToText,
                    _ => return Err(Error::Config(format!("{key}: unknown direction {v:?}"))),
                }
            }
            "retrieval.feature" => {
                m.retrieval = match v {
                    "mean" => RetrievalFeature::Mean,
                    "adapted" => RetrievalFeature::AdaptedOnly,
                    _ => return Err(Error::Config(format!("{key}: unknown feature {v:?}"))),
                }
            }
            "mlm.rate" => m.masking.rate = parse(key, v)?,
            "vqa.answer_mask_rate" => m.answer_mask_rate = parse(key, v)?,
            "train.steps.adapt" => t.steps[0] = parse(key, v)?,
            "train.steps.tune" => t.steps[1] = parse(key, v)?,
            "train.steps.blend" => t.steps[2] = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.backbone_lr_ratio" => t.backbone_lr_ratio = parse(key, v)?,
            "train.drop_rate" => t.drop_rate = parse(key, v)?,
            "train.clip_norm" => t.clip_norm = parse(key, v)?,
            "train.unfreeze_text" => t.unfreeze_text = parse(key, v)?,
            "train.unfreeze_image" => t.unfreeze_image = parse(key, v)?,
            "train.objective" => {
                t.objective = match v {
                    "pretrain" => Objective::Pretrain,
                    "vqa" => Objective::Vqa,
                    _ => return Err(Error::Config(format!("{key}: unknown objective {v:?}"))),
                }
            }
            "eval.dual_softmax" => e.dual_softmax = parse(key, v)?,
            "eval.dual_softmax_temp" => e.dual_softmax_temp = parse(key, v)?,
            "eval.beam" => e.beam = parse(key, v)?,
            "eval.max_len" => e.max_len = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Value of every key as it would be written back.
    pub fn values(&self) -> BTreeMap<&'static str, String> {
        let m = &self.model;
        let t = &self.train;
        let e = &self.eval;
        let layers = if m.adapter_layers.is_empty() {
            "none".to_string()
        } else {
            m.adapter_layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
        };
        let vals: Vec<(&'static str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("frames", m.frames.to_string()),
            ("embed_dim", m.embed_dim.to_string()),
            ("vision.width", m.vision.width.to_string()),
            ("vision.depth", m.vision.depth.to_string()),
            ("vision.heads", m.vision.heads.to_string()),
            ("vision.patch", m.vision.patch.to_string()),
            ("vision.ffn_ratio", m.vision.ffn_ratio.to_string()),
            ("adapter.layers", layers),
            ("adapter.width", m.adapter_width.to_string()),
            ("adapter.kernel", m.vision.adapter.kernel.to_string()),
            ("adapter.heads", m.vision.adapter.heads.to_string()),
            ("adapter.residual", m.vision.adapter.residual.to_string()),
            ("text.width", m.text.width.to_string()),
            ("text.depth", m.text.depth.to_string()),
            ("text.heads", m.text.heads.to_string()),
            ("fusion.width", m.fusion.width.to_string()),
            ("fusion.depth", m.fusion.depth.to_string()),
            ("fusion.heads", m.fusion.heads.to_string()),
            ("blend.mode", m.blend.mode.name().to_string()),
            ("blend.share", m.blend.share_cross_attn.to_string()),
            (
                "vtc.direction",
                match m.vtc {
                    VtcDirection::Symmetric => "symmetric",
                    VtcDirection::VideoToText => "video_to_text",
                }
                .to_string(),
            ),
            (
                "retrieval.feature",
                match m.retrieval {
                    RetrievalFeature::Mean => "mean",
                    RetrievalFeature::AdaptedOnly => "adapted",
                }
                .to_string(),
            ),
            ("mlm.rate", m.masking.rate.to_string()),
            ("vqa.answer_mask_rate", m.answer_mask_rate.to_string()),
            ("train.steps.adapt", t.steps[0].to_string()),
            ("train.steps.tune", t.steps[1].to_string()),
            ("train.steps.blend", t.steps[2].to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.backbone_lr_ratio", t.backbone_lr_ratio.to_string()),
            ("train.drop_rate", t.drop_rate.to_string()),
            ("train.clip_norm", t.clip_norm.to_string()),
            ("train.unfreeze_text", t.unfreeze_text.to_string()),
            ("train.unfreeze_image", t.unfreeze_image.to_string()),
            ("train.objective", t.objective.name().to_string()),
            ("eval.dual_softmax", e.dual_softmax.to_string()),
            ("eval.dual_softmax_temp", e.dual_softmax_temp.to_string()),
            ("eval.beam", e.beam.to_string()),
            ("eval.max_len", e.max_len.to_string()),
        ];
        vals.into_iter().collect()
    }

    /// Every key, sorted, one `key = value` per line.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.values() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Hex SHA-256 of the canonical rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be at least 2".into()));
        }
        if t.steps.contains(&0) {
            return Err(Error::Config("every stage needs at least one step".into()));
        }
        if !(t.lr > 0.0) || !(t.backbone_lr_ratio >= 0.0) || !(t.clip_norm > 0.0) {
            return Err(Error::Config("learning rates and clip norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.drop_rate) {
            return Err(Error::Config(format!("train.drop_rate {} outside [0, 1)", t.drop_rate)));
        }
        let e = &self.eval;
        if e.beam == 0 || e.max_len == 0 || e.max_len >= self.model.fusion.max_len {
            return Err(Error::Config(format!(
                "eval.beam must be positive and eval.max_len in 1..{}",
                self.model.fusion.max_len
            )));
        }
        if !(e.dual_softmax_temp > 0.0) {
            return Err(Error::Config("eval.dual_softmax_temp must be positive".into()));
        }
        Ok(())
    }

    /// Applies `VLAB_SEED` when set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var("VLAB_SEED") {
            self.seed = parse("VLAB_SEED", v.trim())?;
        }
        Ok(self)
    }
}
