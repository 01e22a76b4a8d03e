//! Training orchestration: stages, freeze masks, Adam with learning-rate
//! groups, frame sampling, checkpoints and metrics.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use diffcore::{Graph, ParamStore};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Objective, RunConfig};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{ModelKind, VlabModel, TAU};
use crate::objectives::{TAU_MAX, TAU_MIN};

/// How frame indices are picked inside each segment.
#[derive(Debug)]
pub enum FrameMode<'a> {
    /// Segment centres.
    Eval,
    /// Uniform within each segment.
    Train(&'a mut ChaCha8Rng),
}

/// `t` frame indices out of `len`: one per equal segment. When `t > len` the
/// last index is repeated.
pub fn sample_frames(len: usize, t: usize, mode: &mut FrameMode<'_>) -> Result<Vec<usize>> {
    if len == 0 || t == 0 {
        return Err(Error::Data(format!("cannot sample {t} frames from {len}")));
    }
    if t > len {
        log::warn!("video has {len} frames, padding to {t} by repeating the last");
        return Ok((0..t).map(|i| i.min(len - 1)).collect());
    }
    Ok((0..t)
        .map(|s| match mode {
            FrameMode::Eval => ((2 * s + 1) * len) / (2 * t),
            FrameMode::Train(rng) => {
                let lo = s * len / t;
                let hi = ((s + 1) * len / t).max(lo + 1);
                rng.gen_range(lo..hi)
            }
        })
        .collect())
}


#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Adaptive transferring: backbone and text encoder frozen.
    Adapt,
    /// Integrated tuning: everything trainable.
    Tune,
    /// Feature blending: both visual encoders and the text encoder frozen.
    Blend,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Adapt, Stage::Tune, Stage::Blend];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Adapt => "adapt",
            Stage::Tune => "tune",
            Stage::Blend => "blend",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "adapt" | "adaptive_transferring" => Ok(Stage::Adapt),
            "tune" | "integrated_tuning" => Ok(Stage::Tune),
            "blend" | "blending" | "feature_blending" => Ok(Stage::Blend),
            other => Err(Error::Config(format!("unknown stage {other:?}"))),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn model_kind(self) -> ModelKind {
        match self {
            Stage::Adapt | Stage::Tune => ModelKind::Video,
            Stage::Blend => ModelKind::Blended,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub backbone_lr: f64,
    pub drop_rate: f64,
    pub clip_norm: f64,
    pub unfreeze_text: bool,
    pub unfreeze_image: bool,
    pub objective: Objective,
}

impl StageConfig {
    pub fn from_run(run: &RunConfig, stage: Stage) -> Self {
        let t = &run.train;
        StageConfig {
            stage,
            steps: t.steps[stage.index()],
            batch_size: t.batch_size,
            seed: run.seed,
            lr: t.lr,
            backbone_lr: t.lr * t.backbone_lr_ratio,
            drop_rate: t.drop_rate,
            clip_norm: t.clip_norm,
            unfreeze_text: t.unfreeze_text,
            unfreeze_image: t.unfreeze_image,
            objective: t.objective,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size < 2 {
            return Err(Error::Config(format!(
                "a stage needs positive steps and a batch of at least 2, got {} and {}",
                self.steps, self.batch_size
            )));
        }
        Ok(())
    }
}

/// Parameters updated by the optimizer in the backbone learning-rate group.
pub fn is_backbone(name: &str) -> bool {
    name.contains(".backbone.") || name.starts_with("text.")
}

/// Trainable flag for every named parameter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeMask {
    trainable: BTreeMap<String, bool>,
}

impl FreezeMask {
    pub fn build<'a>(
        stage: Stage,
        names: impl IntoIterator<Item = &'a str>,
        unfreeze_text: bool,
        unfreeze_image: bool,
    ) -> Self {
        let trainable = names
            .into_iter()
            .map(|n| {
                let text = n.starts_with("text.");
                let flag = match stage {
                    Stage::Adapt => !(n.starts_with("vision.backbone.") || text),
                    Stage::Tune => true,
                    Stage::Blend => {
                        !(n.starts_with("vision_adapted.")
                            || (n.starts_with("vision_image.") && !unfreeze_image)
                            || (text && !unfreeze_text))
                    }
                };
                (n.to_string(), flag)
            })
            .collect();
        FreezeMask { trainable }
    }

    pub fn for_store(cfg: &StageConfig, store: &ParamStore) -> Self {
        FreezeMask::build(cfg.stage, store.names(), cfg.unfreeze_text, cfg.unfreeze_image)
    }

    /// Unknown names are frozen.
    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.get(name).copied().unwrap_or(false)
    }

    pub fn frozen(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().filter(|(_, &t)| !t).map(|(n, _)| n.as_str())
    }

    pub fn trainable(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().filter(|(_, &t)| t).map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.trainable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trainable.is_empty()
    }
}

/// Learning rates of the two parameter groups.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrGroups {
    pub base: f64,
    pub backbone: f64,
}

impl LrGroups {
    pub fn lr_for(&self, name: &str) -> f64 {
        if is_backbone(name) {
            self.backbone
        } else {
            self.base
        }
    }
}

/// Adam with bias correction and optional global-norm clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(clip_norm: Option<f64>) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        Some((self.m.get(name)?, self.v.get(name)?))
    }

    /// Updates every trainable parameter that has a gradient. Returns the
    /// global gradient norm before clipping.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
        mask: &FreezeMask,
        lr: &LrGroups,
    ) -> Result<f64> {
        let live: Vec<(&String, &Vec<f64>)> = grads.iter().filter(|(n, _)| mask.is_trainable(n)).collect();
        for (name, g) in &live {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in {name}")));
            }
            let p = store.get(name)?;
            if p.numel() != g.len() {
                return Err(Error::Contract(format!(
                    "gradient of {name} has {} entries for {} parameters",
                    g.len(),
                    p.numel()
                )));
            }
        }
        let norm = live
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in live {
            let p = store.get_mut(name)?.data_mut();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let rate = lr.lr_for(name);
            for i in 0..g.len() {
                let gi = g[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= rate * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(norm)
    }
}

/// Loss components of one training step, one JSON line in the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_vtc: f64,
    pub l_mlm: f64,
    pub l_unilm: f64,
    pub l_total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_vqa: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub metrics: Vec<StepMetrics>,
}

impl StageReport {
    pub fn first_loss(&self) -> Option<f64> {
        self.metrics.first().map(|m| m.l_total)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.l_total)
    }
}

/// Independent random streams derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RngStream {
    Init = 0,
    Order = 1,
    Frames = 2,
    Loss = 3,
    Eval = 4,
}

pub fn stream_rng(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Cycles through shuffled passes over the training ids.
struct BatchOrder {
    ids: Vec<String>,
    queue: Vec<String>,
    batch: usize,
}

impl BatchOrder {
    fn next(&mut self, rng: &mut impl Rng) -> Vec<String> {
        if self.queue.len() < self.batch {
            let mut pass = self.ids.clone();
            pass.shuffle(rng);
            self.queue.extend(pass);
        }
        self.queue.drain(..self.batch).collect()
    }
}

/// Runs one stage in place. On a non-finite loss or gradient the stage stops
/// with a numeric error and `store` keeps the last good parameters.
pub fn run_stage(
    cfg: &StageConfig,
    corpus: &Corpus,
    train_ids: &[String],
    model: &VlabModel,
    store: &mut ParamStore,
    mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<StageReport> {
    cfg.validate()?;
    if model.kind != cfg.stage.model_kind() {
        return Err(Error::Config(format!(
            "stage {} needs a {:?} model, got {:?}",
            cfg.stage.name(),
            cfg.stage.model_kind(),
            model.kind
        )));
    }
    model.check_store(store)?;
    if train_ids.len() < 2 {
        return Err(Error::Data(format!("{} training samples; need at least 2", train_ids.len())));
    }
    let mask = FreezeMask::for_store(cfg, store);
    let lr = LrGroups {
        base: cfg.lr,
        backbone: cfg.backbone_lr,
    };
    let mut adam = Adam::new(Some(cfg.clip_norm));
    let mut order_rng = stream_rng(cfg.seed, RngStream::Order);
    let mut frame_rng = stream_rng(cfg.seed, RngStream::Frames);
    let mut loss_rng = stream_rng(cfg.seed, RngStream::Loss);
    let mut order = BatchOrder {
        ids: train_ids.to_vec(),
        queue: Vec::new(),
        batch: cfg.batch_size.min(train_ids.len()),
    };
    let frames = model.cfg.frames;
    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let ids = order.next(&mut order_rng);
        let batch = corpus.load_batch(&ids, frames, &mut FrameMode::Train(&mut frame_rng))?;
        let mut g = Graph::new();
        let p = store.bind(&mut g, |n| mask.is_trainable(n));
        let m = match cfg.objective {
            Objective::Pretrain => {
                let (total, parts) = model.pretrain_loss(&mut g, &p, &batch, &mut loss_rng, cfg.drop_rate)?;
                g.backward(total)?;
                StepMetrics {
                    step,
                    l_vtc: g.scalar(parts[0]),
                    l_mlm: g.scalar(parts[1]),
                    l_unilm: g.scalar(parts[2]),
                    l_total: g.scalar(total),
                    l_vqa: None,
                }
            }
            Objective::Vqa => {
                let loss = model.vqa_loss(&mut g, &p, &batch, &mut loss_rng, cfg.drop_rate)?;
                g.backward(loss)?;
                StepMetrics {
                    step,
                    l_vtc: 0.0,
                    l_mlm: 0.0,
                    l_unilm: 0.0,
                    l_total: g.scalar(loss),
                    l_vqa: Some(g.scalar(loss)),
                }
            }
        };
        if !m.l_total.is_finite() {
            return Err(Error::Numeric(format!(
                "loss diverged at step {step} of stage {}",
                cfg.stage.name()
            )));
        }
        let grads = p.grads(&g);
        drop(g);
        // Updating a copy keeps the last good parameters if the step fails.
        let mut next = store.clone();
        adam.step(&mut next, &grads, &mask, &lr)?;
        if mask.is_trainable(TAU) {
            let tau = next.get_mut(TAU)?.data_mut();
            tau[0] = tau[0].clamp(TAU_MIN, TAU_MAX);
        }
        *store = next;
        on_step(&m)?;
        metrics.push(m);
    }
    Ok(StageReport { metrics })
}

/// Sidecar metadata stored next to each checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub config_hash: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub steps: usize,
}

impl CheckpointMeta {
    pub fn new(run: &RunConfig, stage: Stage, steps: usize) -> Self {
        CheckpointMeta {
            stage,
            config_hash: run.hash(),
            config: run.values().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            seed: run.seed,
            steps,
        }
    }

    /// The run configuration the checkpoint was trained with.
    pub fn run_config(&self) -> Result<RunConfig> {
        let text: String = self.config.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        RunConfig::parse(&text)
    }
}

pub fn meta_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    store.write_to(&mut w)?;
    w.flush().map_err(|e| Error::io(path, e))?;
    let mp = meta_path(path);
    let json = serde_json::to_string_pretty(meta)?;
    fs::write(&mp, json + "\n").map_err(|e| Error::io(&mp, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let store = ParamStore::read_from(&mut BufReader::new(file))?;
    let mp = meta_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta = serde_json::from_str(&text)?;
    Ok((store, meta))
}

pub fn write_metrics(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Hex SHA-256 over the serialized entries whose names pass `keep`.
pub fn param_digest(store: &ParamStore, keep: impl Fn(&str) -> bool) -> String {
    let mut h = Sha256::new();
    for (name, t) in store.iter().filter(|(n, _)| keep(n)) {
        h.update(name.as_bytes());
        h.update(diffcore::io::tensor_to_bytes(t));
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Builds the model and starting parameters of a stage. Adapt and tune
/// start fresh without `init`; blend needs a trained video checkpoint.
pub fn prepare_stage(
    run: &RunConfig,
    stage: Stage,
    init: Option<(ParamStore, CheckpointMeta)>,
) -> Result<(VlabModel, ParamStore)> {
    match (stage, init) {
        (Stage::Blend, None) => Err(Error::Config(
            "stage blend needs an adapted checkpoint from stage adapt or tune".into(),
        )),
        (Stage::Blend, Some((store, meta))) => {
            if meta.stage == Stage::Blend {
                return Err(Error::Config(
                    "stage blend needs an adapted checkpoint from stage adapt or tune, got a blend checkpoint".into(),
                ));
            }
            VlabModel::new(&run.model, ModelKind::Video)?.check_store(&store)?;
            VlabModel::blend_from(&run.model, &store)
        }
        (_, Some((store, meta))) => {
            if meta.stage == Stage::Blend {
                return Err(Error::Config(format!(
                    "stage {} cannot start from a blend checkpoint",
                    stage.name()
                )));
            }
            let model = VlabModel::new(&run.model, ModelKind::Video)?;
            model.check_store(&store)?;
            Ok((model, store))
        }
        (_, None) => {
            let model = VlabModel::new(&run.model, ModelKind::Video)?;
            let mut store = ParamStore::new();
            model.init(&mut store, &mut stream_rng(run.seed, RngStream::Init));
            Ok((model, store))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn frame_sampling_examples() {
        assert_eq!(sample_frames(16, 4, &mut FrameMode::Eval).unwrap(), [2, 6, 10, 14]);
        assert_eq!(sample_frames(4, 4, &mut FrameMode::Eval).unwrap(), [0, 1, 2, 3]);
        assert_eq!(sample_frames(2, 4, &mut FrameMode::Eval).unwrap(), [0, 1, 1, 1]);
        assert_eq!(sample_frames(8, 4, &mut FrameMode::Eval).unwrap(), [1, 3, 5, 7]);
    }

    #[test]
    fn training_samples_stay_in_their_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for len in 4..40 {
            for _ in 0..20 {
                let idx = sample_frames(len, 4, &mut FrameMode::Train(&mut rng)).unwrap();
                assert!(idx.windows(2).all(|w| w[0] < w[1]), "{idx:?}");
                for (s, &i) in idx.iter().enumerate() {
                    assert!(i >= s * len / 4 && i < (s + 1) * len / 4);
                }
            }
        }
    }

    use crate::data::{generate_corpus, CorpusSpec, Split};
    use crate::testutil::tiny_cfg;
    use diffcore::Tensor;

    fn tiny_run(steps: usize) -> RunConfig {
        let mut run = RunConfig::default();
        run.model = tiny_cfg();
        run.train.steps = [steps; 3];
        run.train.batch_size = 4;
        run
    }

    fn corpus(n: usize) -> (tempfile::TempDir, Corpus) {
        let dir = tempfile::tempdir().unwrap();
        generate_corpus(&CorpusSpec::new(n, 5), dir.path()).unwrap();
        let c = Corpus::open(dir.path()).unwrap();
        (dir, c)
    }

    fn train(run: &RunConfig, stage: Stage, c: &Corpus, init: Option<(ParamStore, CheckpointMeta)>) -> (ParamStore, StageReport) {
        let (model, mut store) = prepare_stage(run, stage, init).unwrap();
        let cfg = StageConfig::from_run(run, stage);
        let rep = run_stage(&cfg, c, &c.ids(Split::Train), &model, &mut store, |_| Ok(())).unwrap();
        (store, rep)
    }

    #[test]
    fn stage_names_and_aliases() {
        for s in Stage::ALL {
            assert_eq!(Stage::from_name(s.name()).unwrap(), s);
        }
        assert_eq!(Stage::from_name("integrated_tuning").unwrap(), Stage::Tune);
        assert_eq!(Stage::from_name("blending").unwrap(), Stage::Blend);
        assert!(matches!(Stage::from_name("warmup"), Err(Error::Config(_))));
    }

    #[test]
    fn freeze_masks_per_stage() {
        let names = [
            "vision.backbone.block0.w",
            "vision.adapter1.down.weight",
            "text.block0.w",
            "fusion.block0.w",
            "tau",
            "vision_adapted.backbone.x",
            "vision_adapted.adapter1.x",
            "vision_image.backbone.x",
            "proj.image.weight",
        ];
        let adapt = FreezeMask::build(Stage::Adapt, names, false, false);
        assert_eq!(
            adapt.frozen().collect::<Vec<_>>(),
            ["text.block0.w", "vision.backbone.block0.w"]
        );
        let tune = FreezeMask::build(Stage::Tune, names, false, false);
        assert_eq!(tune.frozen().count(), 0);
        let blend = FreezeMask::build(Stage::Blend, names, false, false);
        assert_eq!(
            blend.frozen().collect::<Vec<_>>(),
            [
                "text.block0.w",
                "vision_adapted.adapter1.x",
                "vision_adapted.backbone.x",
                "vision_image.backbone.x"
            ]
        );
        let open = FreezeMask::build(Stage::Blend, names, true, true);
        assert_eq!(open.frozen().collect::<Vec<_>>(), ["vision_adapted.adapter1.x", "vision_adapted.backbone.x"]);
        assert!(!adapt.is_trainable("unknown"));
    }

    #[test]
    fn lr_groups_split_backbone_and_text() {
        let lr = LrGroups { base: 1.0, backbone: 0.01 };
        assert_eq!(lr.lr_for("vision.backbone.block0.w"), 0.01);
        assert_eq!(lr.lr_for("vision_image.backbone.x"), 0.01);
        assert_eq!(lr.lr_for("text.block0.w"), 0.01);
        assert_eq!(lr.lr_for("vision.adapter1.x"), 1.0);
        assert_eq!(lr.lr_for("fusion.x"), 1.0);
    }

    fn one_param(v: &[f64]) -> (ParamStore, FreezeMask) {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![v.len()], v.to_vec()).unwrap());
        let mask = FreezeMask::build(Stage::Tune, ["w"], false, false);
        (store, mask)
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let (mut store, mask) = one_param(&[1.0, -2.0, 0.5]);
        let mut adam = Adam::new(None);
        let grads = BTreeMap::from([("w".to_string(), vec![0.3, -4.0, 0.0])]);
        let lr = LrGroups { base: 0.1, backbone: 0.1 };
        adam.step(&mut store, &grads, &mask, &lr).unwrap();
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 1.9).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn adam_zero_grads_leave_params_unchanged() {
        let (mut store, mask) = one_param(&[1.0, -2.0]);
        let before = store.clone();
        let mut adam = Adam::new(Some(1.0));
        let grads = BTreeMap::from([("w".to_string(), vec![0.0, 0.0])]);
        let lr = LrGroups { base: 0.1, backbone: 0.1 };
        for _ in 0..3 {
            adam.step(&mut store, &grads, &mask, &lr).unwrap();
        }
        assert_eq!(store, before);
    }

    #[test]
    fn adam_rejects_nan_naming_the_parameter() {
        let (mut store, mask) = one_param(&[1.0]);
        let before = store.clone();
        let grads = BTreeMap::from([("w".to_string(), vec![f64::NAN])]);
        let lr = LrGroups { base: 0.1, backbone: 0.1 };
        match Adam::new(None).step(&mut store, &grads, &mask, &lr) {
            Err(Error::Numeric(m)) => assert!(m.contains('w')),
            other => panic!("{other:?}"),
        }
        assert_eq!(store, before);
    }

    #[test]
    fn adam_clips_global_norm() {
        let (mut store, mask) = one_param(&[0.0, 0.0]);
        let mut adam = Adam::new(Some(1.0));
        let grads = BTreeMap::from([("w".to_string(), vec![3.0, 4.0])]);
        let lr = LrGroups { base: 1.0, backbone: 1.0 };
        let norm = adam.step(&mut store, &grads, &mask, &lr).unwrap();
        assert_eq!(norm, 5.0);
        let (m, _) = adam.moments("w").unwrap();
        assert!((m[0] - 0.1 * 0.6).abs() < 1e-12 && (m[1] - 0.1 * 0.8).abs() < 1e-12);
    }

    #[test]
    fn adam_skips_frozen() {
        let (mut store, _) = one_param(&[1.0]);
        let mask = FreezeMask::build(Stage::Adapt, ["text.w"], false, false);
        let before = store.clone();
        let grads = BTreeMap::from([("w".to_string(), vec![1.0])]);
        Adam::new(None)
            .step(&mut store, &grads, &mask, &LrGroups { base: 1.0, backbone: 1.0 })
            .unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn adapt_keeps_frozen_bits_and_is_deterministic() {
        let (_d, c) = corpus(20);
        let run = tiny_run(3);
        let (_, start) = prepare_stage(&run, Stage::Adapt, None).unwrap();
        let (a, rep_a) = train(&run, Stage::Adapt, &c, None);
        let (b, rep_b) = train(&run, Stage::Adapt, &c, None);
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(rep_a, rep_b);
        let frozen = |n: &str| n.starts_with("vision.backbone.") || n.starts_with("text.");
        assert_eq!(param_digest(&start, frozen), param_digest(&a, frozen));
        assert_ne!(param_digest(&start, |n| !frozen(n)), param_digest(&a, |n| !frozen(n)));
        assert!(rep_a.metrics.iter().all(|m| m.l_total.is_finite()));
    }

    #[test]
    fn blend_requires_video_checkpoint_and_freezes_encoders() {
        let (_d, c) = corpus(20);
        let run = tiny_run(2);
        assert!(matches!(prepare_stage(&run, Stage::Blend, None), Err(Error::Config(_))));
        let (tuned, _) = train(&run, Stage::Tune, &c, None);
        let meta = CheckpointMeta::new(&run, Stage::Tune, 2);
        let (model, start) = prepare_stage(&run, Stage::Blend, Some((tuned, meta.clone()))).unwrap();
        assert_eq!(model.kind, ModelKind::Blended);
        let mut store = start.clone();
        let cfg = StageConfig::from_run(&run, Stage::Blend);
        run_stage(&cfg, &c, &c.ids(Split::Train), &model, &mut store, |_| Ok(())).unwrap();
        let frozen = |n: &str| n.starts_with("vision_") || n.starts_with("text.");
        assert_eq!(param_digest(&start, frozen), param_digest(&store, frozen));
        let blend_meta = CheckpointMeta { stage: Stage::Blend, ..meta };
        assert!(matches!(
            prepare_stage(&run, Stage::Blend, Some((store, blend_meta))),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_byte_stable() {
        let run = tiny_run(1);
        let (_, store) = prepare_stage(&run, Stage::Adapt, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x/ckpt.bin");
        let meta = CheckpointMeta::new(&run, Stage::Adapt, 1);
        save_checkpoint(&p, &store, &meta).unwrap();
        let (back, meta2) = load_checkpoint(&p).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(meta2.run_config().unwrap().hash(), run.hash());
        let q = dir.path().join("again.bin");
        save_checkpoint(&q, &back, &meta2).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
    }

    #[test]
    fn nan_loss_keeps_last_good_store() {
        let (_d, c) = corpus(20);
        let run = tiny_run(3);
        let (model, mut store) = prepare_stage(&run, Stage::Adapt, None).unwrap();
        store.get_mut(TAU).unwrap().data_mut()[0] = f64::NAN;
        let before = store.clone();
        let cfg = StageConfig::from_run(&run, Stage::Adapt);
        let err = run_stage(&cfg, &c, &c.ids(Split::Train), &model, &mut store, |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Numeric(_) | Error::Contract(_)), "{err:?}");
        assert_eq!(store.to_bytes(), before.to_bytes());
    }

    #[test]
    fn metrics_lines_carry_the_loss_keys() {
        let m = StepMetrics { step: 0, l_vtc: 1.0, l_mlm: 2.0, l_unilm: 3.0, l_total: 6.0, l_vqa: None };
        let line = serde_json::to_string(&m).unwrap();
        assert_eq!(line, r#"{"step":0,"l_vtc":1.0,"l_mlm":2.0,"l_unilm":3.0,"l_total":6.0}"#);
    }
}
