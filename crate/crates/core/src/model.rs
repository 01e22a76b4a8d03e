//! The full video-language model: adapted video encoder, optional plain
//! image encoder, text encoder, multimodal encoder and temperature.
//!
//! Parameter names:
//!
//! * `vision.*` (video model) or `vision_adapted.*` and `vision_image.*`
//!   (blended model), each with `.backbone.*` and `.adapter.{layer}.*`
//! * `text.*`, `fusion.*`
//! * `proj.video`, `proj.image`, `proj.text` joint-space projections
//! * `tau`

use diffcore::{Graph, ParamStore, ParamVars, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, Vocab};
use crate::error::{Error, Result};
use crate::fusion::{AttnPattern, BlendConfig, BlendMode, FusionConfig, FusionEncoder, FusionInput, Memories, Memory};
use crate::nn::{DropPath, Segments};
use crate::objectives::{
    mlm_loss, mlm_sequence, total_loss, unilm_loss, unilm_sequence, vqa_loss, vtc_loss, MaskingConfig,
    MaskingPlan, VqaPlan, VtcDirection, TAU_INIT,
};
use crate::text::{TextConfig, TextEncoder, TokenSeq};
use crate::vision::{AdapterPlacement, VisFeat, VisionConfig, VisionEncoder};

pub const TAU: &str = "tau";

/// Which video embedding feeds retrieval and the contrastive loss when the
/// model carries two visual encoders.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RetrievalFeature {
    /// Mean of the two pooled projections, re-normalized.
    #[default]
    Mean,
    AdaptedOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub text: TextConfig,
    pub fusion: FusionConfig,
    pub embed_dim: usize,
    /// Blocks that carry a video adapter; empty for a plain image encoder.
    pub adapter_layers: Vec<usize>,
    pub adapter_width: usize,
    /// Frames sampled per video.
    pub frames: usize,
    /// Used by the blended model only; the video model always runs single.
    pub blend: BlendConfig,
    pub vtc: VtcDirection,
    pub retrieval: RetrievalFeature,
    pub masking: MaskingConfig,
    /// Probability of masking each answer token in QA fine-tuning.
    pub answer_mask_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let vision = VisionConfig::default();
        let adapter_width = vision.width / 4;
        let depth = vision.depth;
        ModelConfig {
            fusion: FusionConfig {
                visual_width: vision.width,
                ..FusionConfig::default()
            },
            vision,
            text: TextConfig::default(),
            embed_dim: 32,
            adapter_layers: (depth / 2..depth).collect(),
            adapter_width,
            frames: 4,
            blend: BlendConfig::default(),
            vtc: VtcDirection::Symmetric,
            retrieval: RetrievalFeature::Mean,
            masking: MaskingConfig::default(),
            answer_mask_rate: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn placement(&self) -> Result<AdapterPlacement> {
        AdapterPlacement::new(self.adapter_layers.clone(), self.adapter_width, self.vision.depth)
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.placement()?;
        if self.fusion.visual_width != self.vision.width {
            return Err(Error::Config(format!(
                "fusion memory width {} differs from vision width {}",
                self.fusion.visual_width, self.vision.width
            )));
        }
        if self.text.vocab_size != self.fusion.vocab_size {
            return Err(Error::Config("text and fusion vocabularies differ".into()));
        }
        if self.frames == 0 || self.frames > self.vision.adapter.max_frames {
            return Err(Error::Config(format!(
                "frames must lie in 1..={}, got {}",
                self.vision.adapter.max_frames, self.frames
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        for (name, v) in [
            ("mask_rate", self.masking.rate),
            ("answer_mask_rate", self.answer_mask_rate),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// One adapted video encoder; fusion attends to it alone.
    Video,
    /// Adapted video encoder plus plain image encoder, blended in fusion.
    Blended,
}

/// Visual features of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Visual {
    pub video: VisFeat,
    pub video_emb: Var,
    pub image: Option<(VisFeat, Var)>,
}

/// Visual features computed without gradient, kept for decoding.
#[derive(Clone, Debug)]
pub struct VisualTensors {
    pub video: Tensor,
    pub image: Option<Tensor>,
    /// Rows per item in `video` and `image`.
    pub rows_per_item: usize,
    pub batch: usize,
    /// Unit-norm retrieval embeddings, `B × embed_dim`.
    pub embedding: Tensor,
}

#[derive(Clone, Debug)]
pub struct VlabModel {
    pub cfg: ModelConfig,
    pub kind: ModelKind,
    pub video: VisionEncoder,
    pub image: Option<VisionEncoder>,
    pub text: TextEncoder,
    pub fusion: FusionEncoder,
}

impl VlabModel {
    pub fn new(cfg: &ModelConfig, kind: ModelKind) -> Result<Self> {
        cfg.validate()?;
        let placement = cfg.placement()?;
        let (video_prefix, blend) = match kind {
            ModelKind::Video => ("vision", BlendConfig::single()),
            ModelKind::Blended => {
                if cfg.blend.mode == BlendMode::Single {
                    return Err(Error::Config("a blended model needs stack or parallel mode".into()));
                }
                ("vision_adapted", cfg.blend)
            }
        };
        let video = VisionEncoder::new(video_prefix, "proj.video", &cfg.vision, &placement, cfg.embed_dim)?;
        let image = match kind {
            ModelKind::Video => None,
            ModelKind::Blended => Some(VisionEncoder::new(
                "vision_image",
                "proj.image",
                &cfg.vision,
                &AdapterPlacement::none(),
                cfg.embed_dim,
            )?),
        };
        Ok(VlabModel {
            cfg: cfg.clone(),
            kind,
            video,
            image,
            text: TextEncoder::new("text", "proj.text", &cfg.text, cfg.embed_dim)?,
            fusion: FusionEncoder::new("fusion", &cfg.fusion, &blend)?,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.video.init(store, rng);
        if let Some(img) = &self.image {
            img.init(store, rng);
        }
        self.text.init(store, rng);
        self.fusion.init(store, rng);
        store.insert(TAU, Tensor::scalar(TAU_INIT));
    }

    /// Builds the blended model from a trained video-model store. The plain
    /// image encoder starts as a copy of the video backbone, `proj.image` as
    /// a copy of `proj.video`, and every image-side fusion parameter as a
    /// copy of its video-side twin.
    pub fn blend_from(cfg: &ModelConfig, video_store: &ParamStore) -> Result<(Self, ParamStore)> {
        let model = VlabModel::new(cfg, ModelKind::Blended)?;
        let mut store = ParamStore::new();
        for (name, t) in video_store.iter() {
            let renamed = match name.strip_prefix("vision.") {
                Some(rest) => format!("vision_adapted.{rest}"),
                None => name.to_string(),
            };
            store.insert(renamed, t.clone());
            if let Some(rest) = name.strip_prefix("vision.backbone.") {
                store.insert(format!("vision_image.backbone.{rest}"), t.clone());
            }
        }
        for part in ["weight", "bias"] {
            let copy = |store: &mut ParamStore, from: String, to: String| -> Result<()> {
                let t = store.get(&from)?.clone();
                store.insert(to, t);
                Ok(())
            };
            copy(&mut store, format!("proj.video.{part}"), format!("proj.image.{part}"))?;
            copy(&mut store, format!("fusion.mem_proj_v.{part}"), format!("fusion.mem_proj_i.{part}"))?;
        }
        for b in &model.fusion.blocks {
            if let Some(ci) = &b.cross_i {
                for (dst, src) in ci.param_names().into_iter().zip(b.cross_v.param_names()) {
                    let t = store.get(src)?.clone();
                    store.insert(dst, t);
                }
            }
        }
        if model.fusion.blend.mode == BlendMode::Parallel {
            store.insert(model.fusion.alpha.clone(), Tensor::scalar(0.5));
            store.insert(model.fusion.beta.clone(), Tensor::scalar(0.5));
        }
        model.check_store(&store)?;
        Ok((model, store))
    }

    /// Every parameter the model reads, in store order.
    pub fn param_names(&self) -> Vec<String> {
        let mut store = ParamStore::new();
        self.init(&mut store, &mut <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
        store.names().map(String::from).collect()
    }

    /// Errors unless `store` holds exactly the model's parameters with the
    /// expected shapes.
    pub fn check_store(&self, store: &ParamStore) -> Result<()> {
        let mut want = ParamStore::new();
        self.init(&mut want, &mut <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
        for (name, t) in want.iter() {
            let have = store
                .get(name)
                .map_err(|_| Error::Data(format!("checkpoint lacks parameter {name}")))?;
            if have.dims() != t.dims() {
                return Err(Error::Data(format!(
                    "parameter {name} has dims {:?}, expected {:?}",
                    have.dims(),
                    t.dims()
                )));
            }
        }
        if let Some(extra) = store.names().find(|n| !want.contains(n)) {
            return Err(Error::Data(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    pub fn encode_visual(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        frames: &Tensor,
        drop: Option<&mut DropPath<'_, ChaCha8Rng>>,
    ) -> Result<Visual> {
        let (video, video_emb) = match drop {
            Some(d) => self.video.encode_video(g, p, frames, Some(d))?,
            None => self.video.encode_video(g, p, frames, None)?,
        };
        let image = match &self.image {
            // Stochastic depth applies to the trainable video path only.
            Some(enc) => Some(enc.encode_video(g, p, frames, None)?),
            None => None,
        };
        Ok(Visual {
            video,
            video_emb,
            image,
        })
    }

    fn encode_training(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        frames: &Tensor,
        rng: &mut ChaCha8Rng,
        drop_rate: f64,
    ) -> Result<Visual> {
        if drop_rate > 0.0 {
            let mut dp = DropPath::new(drop_rate, rng)?;
            self.encode_visual(g, p, frames, Some(&mut dp))
        } else {
            self.encode_visual(g, p, frames, None)
        }
    }

    /// Unit-norm video embedding used for contrast and retrieval.
    pub fn video_embedding(&self, g: &mut Graph, vis: &Visual) -> Result<Var> {
        match (vis.image, self.cfg.retrieval) {
            (Some((_, img)), RetrievalFeature::Mean) => {
                let s = g.add(vis.video_emb, img)?;
                Ok(g.l2_normalize_rows(s)?)
            }
            _ => Ok(vis.video_emb),
        }
    }

    pub fn memories(&self, g: &mut Graph, p: &ParamVars, vis: &Visual) -> Result<Memories> {
        let image = vis.image.as_ref().map(|(f, _)| f);
        self.fusion.memories(g, p, &vis.video, image)
    }

    /// The three pre-training losses and their sum on one batch.
    pub fn pretrain_loss(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        batch: &Batch,
        rng: &mut ChaCha8Rng,
        drop_rate: f64,
    ) -> Result<(Var, [Var; 3])> {
        let vis = self.encode_training(g, p, &batch.frames, rng, drop_rate)?;
        let video_emb = self.video_embedding(g, &vis)?;
        let (_, text_emb) = self.text.encode_text(g, p, &batch.captions)?;
        let tau = p.get(TAU)?;
        let vtc = vtc_loss(g, video_emb, text_emb, tau, self.cfg.vtc)?;

        let mems = self.memories(g, p, &vis)?;
        let vocab = Vocab::new();
        let mut mlm_inputs = Vec::with_capacity(batch.len());
        let mut plans = Vec::with_capacity(batch.len());
        for cap in &batch.captions {
            let seq = mlm_sequence(cap);
            let plan = MaskingPlan::sample(&seq, &self.cfg.masking, vocab.content_ids(), rng)?;
            mlm_inputs.push(plan.apply(&seq));
            plans.push(plan);
        }
        let input = FusionInput::new(&mlm_inputs)?;
        let logits = self.fusion.forward(g, p, &input, &mems, AttnPattern::Bidirectional)?;
        let mlm = mlm_loss(g, logits, &input, &plans)?;

        let (uni_inputs, targets): (Vec<_>, Vec<_>) = batch.captions.iter().map(unilm_sequence).unzip();
        let input = FusionInput::new(&uni_inputs)?;
        let logits = self.fusion.forward(g, p, &input, &mems, AttnPattern::Causal)?;
        let unilm = unilm_loss(g, logits, &input, &targets)?;

        let total = total_loss(g, vtc, mlm, unilm)?;
        Ok((total, [vtc, mlm, unilm]))
    }

    /// Answer-only causal loss for question answering.
    pub fn vqa_loss(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        batch: &Batch,
        rng: &mut ChaCha8Rng,
        drop_rate: f64,
    ) -> Result<Var> {
        let vis = self.encode_training(g, p, &batch.frames, rng, drop_rate)?;
        let mems = self.memories(g, p, &vis)?;
        let plans = batch
            .questions
            .iter()
            .zip(&batch.answers)
            .map(|(q, a)| VqaPlan::sample(q, a, self.cfg.answer_mask_rate, rng))
            .collect::<Result<Vec<_>>>()?;
        let inputs: Vec<Vec<usize>> = plans.iter().map(|pl| pl.input.clone()).collect();
        let input = FusionInput::new(&inputs)?;
        let logits = self.fusion.forward(g, p, &input, &mems, AttnPattern::Causal)?;
        vqa_loss(g, logits, &input, &plans)
    }

    /// Evaluates visual features and retrieval embeddings without gradient.
    pub fn visual_tensors(&self, store: &ParamStore, frames: &Tensor) -> Result<VisualTensors> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let vis = self.encode_visual(&mut g, &p, frames, None)?;
        let emb = self.video_embedding(&mut g, &vis)?;
        Ok(VisualTensors {
            video: g.tensor(vis.video.var),
            image: vis.image.map(|(f, _)| g.tensor(f.var)),
            rows_per_item: vis.video.frames * vis.video.tokens,
            batch: vis.video.batch,
            embedding: g.tensor(emb),
        })
    }

    /// Unit-norm text embeddings without gradient, `B × embed_dim`.
    pub fn text_embeddings(&self, store: &ParamStore, captions: &[TokenSeq]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let (_, emb) = self.text.encode_text(&mut g, &p, captions)?;
        Ok(g.tensor(emb))
    }

    /// Causal logits `(n·L) × vocab` for `prefixes[i]` attending to the
    /// memory of item `items[i]`. Shorter prefixes are right-padded, which a
    /// causal mask makes invisible to the real positions.
    pub fn causal_logits(
        &self,
        store: &ParamStore,
        vis: &VisualTensors,
        items: &[usize],
        prefixes: &[Vec<usize>],
    ) -> Result<(Tensor, usize)> {
        if items.len() != prefixes.len() {
            return Err(Error::Contract("one item per prefix".into()));
        }
        if let Some(&bad) = items.iter().find(|&&i| i >= vis.batch) {
            return Err(Error::Contract(format!("item {bad} outside a batch of {}", vis.batch)));
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let rows: Vec<usize> = items
            .iter()
            .flat_map(|&i| i * vis.rows_per_item..(i + 1) * vis.rows_per_item)
            .collect();
        let segments = Segments::new(items.len(), vis.rows_per_item);
        let gather = |g: &mut Graph, t: &Tensor| -> Result<Var> {
            let table = g.constant(t);
            Ok(g.embedding(table, &rows)?)
        };
        let project = |g: &mut Graph, var: Var, proj: &crate::nn::Linear| -> Result<Memory> {
            Ok(Memory {
                var: proj.forward(g, &p, var)?,
                segments,
            })
        };
        let v = gather(&mut g, &vis.video)?;
        let video = project(&mut g, v, &self.fusion.mem_proj_v)?;
        let image = match (&vis.image, &self.fusion.mem_proj_i) {
            (Some(t), Some(proj)) => {
                let var = gather(&mut g, t)?;
                Some(project(&mut g, var, proj)?)
            }
            _ => None,
        };
        let input = FusionInput::new(prefixes)?;
        let logits = self.fusion.forward(&mut g, &p, &input, &Memories { video, image }, AttnPattern::Causal)?;
        Ok((g.tensor(logits), input.len))
    }
}

#[cfg(test)]
mod tests {
    use crate::testutil::tiny_cfg;
    use super::*;
    use crate::data::Scene;
    use rand::SeedableRng;

    fn batch(n: usize, frames: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scenes: Vec<Scene> = (0..n).map(|_| Scene::random(&mut rng)).collect();
        Batch::from_scenes(&scenes, frames, crate::data::QaKind::Direction).unwrap()
    }

    fn model(kind: ModelKind, cfg: &ModelConfig, seed: u64) -> (VlabModel, ParamStore) {
        let m = VlabModel::new(cfg, kind).unwrap();
        let mut store = ParamStore::new();
        m.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        (m, store)
    }

    #[test]
    fn parameter_names_follow_the_layout() {
        let (m, store) = model(ModelKind::Video, &ModelConfig::default(), 1);
        assert!(store.contains("tau"));
        assert!(store.contains("proj.video.weight") && store.contains("proj.text.weight"));
        assert!(store.names().any(|n| n.starts_with("vision.backbone.blocks.3.")));
        assert!(store.names().any(|n| n.starts_with("vision.adapter.2.")));
        assert!(store.names().any(|n| n.starts_with("vision.adapter.3.")));
        assert!(!store.names().any(|n| n.starts_with("vision.adapter.1.")));
        assert!(!store.contains("fusion.alpha"));
        assert_eq!(m.param_names(), store.names().map(String::from).collect::<Vec<_>>());
        m.check_store(&store).unwrap();
    }

    #[test]
    fn blending_copies_the_video_side() {
        for share in [true, false] {
            let mut cfg = tiny_cfg();
            cfg.blend.share_cross_attn = share;
            let (_, store) = model(ModelKind::Video, &cfg, 2);
            let (blended, bstore) = VlabModel::blend_from(&cfg, &store).unwrap();
            blended.check_store(&bstore).unwrap();
            for (name, t) in store.iter() {
                let renamed = name.replacen("vision.", "vision_adapted.", 1);
                let renamed = if name.starts_with("vision.") { renamed } else { name.to_string() };
                assert_eq!(bstore.get(&renamed).unwrap(), t, "{name}");
            }
            assert_eq!(
                bstore.get("vision_image.backbone.pos").unwrap(),
                store.get("vision.backbone.pos").unwrap()
            );
            assert!(!bstore.names().any(|n| n.starts_with("vision_image.adapter")));
            assert_eq!(bstore.get("fusion.alpha").unwrap().data(), &[0.5]);
        }
    }

    #[test]
    fn wrong_checkpoints_are_rejected() {
        let cfg = tiny_cfg();
        let (m, mut store) = model(ModelKind::Video, &cfg, 3);
        store.insert("stray", Tensor::scalar(1.0));
        assert!(matches!(m.check_store(&store), Err(Error::Data(_))));
        store.remove("stray");
        store.remove("tau");
        assert!(matches!(m.check_store(&store), Err(Error::Data(_))));
    }

    #[test]
    fn every_loss_reaches_its_parameter_group() {
        let cfg = tiny_cfg();
        let (m, store) = model(ModelKind::Video, &cfg, 4);
        let b = batch(3, cfg.frames, 5);
        let rng = ChaCha8Rng::seed_from_u64(6);
        let nonzero = |names: &[&str], which: usize| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, |_| true);
            let (_, parts) = m.pretrain_loss(&mut g, &p, &b, &mut rng.clone(), 0.0).unwrap();
            g.backward(parts[which]).unwrap();
            let grads = p.grads(&g);
            names
                .iter()
                .map(|n| grads.get(*n).is_some_and(|gr| gr.iter().any(|x| *x != 0.0)))
                .collect::<Vec<_>>()
        };
        // VTC reaches both encoders and tau, not the fusion encoder.
        assert_eq!(nonzero(&["text.embed", "vision.backbone.pos", "tau", "fusion.embed"], 0), [true, true, true, false]);
        // MLM and Uni-LM reach fusion and the video encoder, not the text encoder.
        for which in [1, 2] {
            assert_eq!(nonzero(&["fusion.embed", "vision.backbone.pos", "text.embed"], which), [true, true, false]);
        }
    }

    #[test]
    fn decoding_logits_match_the_training_forward() {
        let cfg = tiny_cfg();
        let (m, store) = model(ModelKind::Video, &cfg, 7);
        let b = batch(2, cfg.frames, 8);
        let vis = m.visual_tensors(&store, &b.frames).unwrap();
        let (inp, _) = unilm_sequence(&b.captions[1]);
        let (full, len) = m.causal_logits(&store, &vis, &[1], std::slice::from_ref(&inp)).unwrap();
        assert_eq!(len, inp.len());
        for k in 1..inp.len() {
            let (short, l) = m.causal_logits(&store, &vis, &[0, 1], &[vec![1, 7], inp[..k].to_vec()]).unwrap();
            let row = short.row(l + k - 1);
            let d: f64 = row.iter().zip(full.row(k - 1)).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
            assert!(d < 1e-12, "prefix {k}: {d}");
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::default();
        cfg.validate().unwrap();
        cfg.frames = 9;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ModelConfig::default();
        cfg.adapter_layers = vec![4];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ModelConfig::default();
        cfg.blend = BlendConfig::single();
        assert!(matches!(VlabModel::new(&cfg, ModelKind::Blended), Err(Error::Config(_))));
    }
}
