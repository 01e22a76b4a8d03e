//! Self-verification suites: finite-difference gradient checks from single
//! ops up to the full pre-training loss, and structural invariants of the
//! model, losses and metrics.

use std::fmt;

use diffcore::fault::FaultGuard;
use diffcore::opsuite::check_op;
use diffcore::{grad_check_params, Graph, OpKind, ParamGradReport, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, QaKind, Scene, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::evalkit::{dual_softmax, recall_at_k, SimMatrix, DUAL_SOFTMAX_TEMP};
use crate::fusion::{AttnPattern, BlendConfig, BlendMode, FusionEncoder, FusionInput, Memories, Memory};
use crate::model::{ModelConfig, ModelKind, VlabModel};
use crate::nn::{normal_tensor, Segments};
use crate::objectives::{mlm_loss, unilm_loss, vtc_loss, MaskingPlan, Replacement, VtcDirection};
use crate::pipeline::{FreezeMask, Stage};
use crate::vision::{AdapterPlacement, VisionConfig, VisionEncoder};

pub const GRAD_H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Entries perturbed per parameter tensor in end-to-end checks.
pub const E2E_ENTRIES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuiteKind {
    Grads,
    Invariants,
    All,
}

impl SuiteKind {
    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "grads" => Ok(SuiteKind::Grads),
            "invariants" => Ok(SuiteKind::Invariants),
            "all" => Ok(SuiteKind::All),
            other => Err(Error::Config(format!("unknown suite {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_grads(name: impl Into<String>, r: &ParamGradReport) -> Self {
        let detail = format!(
            "max rel err {:.2e} over {} entries, worst {}",
            r.report.max_rel_error,
            r.report.checked,
            r.worst_param.as_deref().unwrap_or("-")
        );
        Check::new(name, r.passed(), detail)
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag}  {:<34} {}", self.name, self.detail)
    }
}

/// Small model with every component: adapters, both losses' heads, fusion.
pub fn verify_model_config(blend: BlendConfig) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.vision.width = 16;
    cfg.vision.depth = 2;
    cfg.vision.ffn_ratio = 2;
    cfg.adapter_layers = vec![1];
    cfg.adapter_width = 4;
    cfg.text.width = 16;
    cfg.text.depth = 1;
    cfg.text.ffn_ratio = 2;
    cfg.fusion.width = 16;
    cfg.fusion.depth = 2;
    cfg.fusion.ffn_ratio = 2;
    cfg.fusion.visual_width = 16;
    cfg.embed_dim = 8;
    cfg.frames = 4;
    cfg.blend = blend;
    cfg
}

/// Adds a seeded offset to every parameter except τ, so zero-initialised
/// branches carry gradients and attention is far from uniform.
fn wake(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for (name, t) in store.iter_mut() {
        if name == crate::model::TAU {
            continue;
        }
        for x in t.data_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
}

/// A model of `kind` with awake parameters. Blended models are built from
/// a video store the way the blend stage does it.
pub fn verify_model(cfg: &ModelConfig, kind: ModelKind, seed: u64) -> Result<(VlabModel, ParamStore)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let video = VlabModel::new(cfg, ModelKind::Video)?;
    let mut store = ParamStore::new();
    video.init(&mut store, &mut rng);
    // Fresh adapters output zero, which starves their inner gradients.
    for (_, a) in &video.video.adapters {
        a.fc2.init(&mut store, &mut rng);
        a.fc4.init(&mut store, &mut rng);
    }
    wake(&mut store, &mut rng);
    match kind {
        ModelKind::Video => Ok((video, store)),
        ModelKind::Blended => {
            let (model, mut store) = VlabModel::blend_from(cfg, &store)?;
            wake(&mut store, &mut rng);
            Ok((model, store))
        }
    }
}

pub fn scene_batch(n: usize, frames: usize, seed: u64) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes: Vec<Scene> = (0..n).map(|_| Scene::random(&mut rng)).collect();
    Batch::from_scenes(&scenes, frames, QaKind::Direction)
}

/// Central differences of the total pre-training loss with respect to every
/// parameter, on a 2-item batch with fixed masking and no stochastic depth.
pub fn grad_check_end_to_end(kind: ModelKind, blend: BlendConfig, max_per_param: usize) -> Result<ParamGradReport> {
    let cfg = verify_model_config(blend);
    let (model, store) = verify_model(&cfg, kind, 11)?;
    let batch = scene_batch(2, cfg.frames, 12)?;
    let names: Vec<String> = store.names().map(String::from).collect();
    grad_check_params(
        &store,
        &names,
        |g, p| {
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            model.pretrain_loss(g, p, &batch, &mut rng, 0.0).map(|(total, _)| total)
        },
        GRAD_H,
        GRAD_TOL,
        max_per_param,
    )
}

/// Gradient suite. With `fault` armed, that op's backward rule is corrupted
/// on this thread and the affected checks must fail.
pub fn grad_suite(fault: Option<OpKind>) -> Result<Vec<Check>> {
    let _guard = fault.map(FaultGuard::arm);
    let mut checks = Vec::new();
    for kind in OpKind::ALL {
        let r = check_op(kind, GRAD_H, GRAD_TOL)?;
        checks.push(Check::new(
            format!("op {kind}"),
            r.passed(),
            format!("max rel err {:.2e} over {} entries", r.max_rel_error, r.checked),
        ));
    }
    let e2e = [
        ("total loss, video model", ModelKind::Video, BlendConfig::single()),
        (
            "total loss, parallel blend",
            ModelKind::Blended,
            BlendConfig {
                mode: BlendMode::Parallel,
                share_cross_attn: false,
            },
        ),
        (
            "total loss, stacked blend",
            ModelKind::Blended,
            BlendConfig {
                mode: BlendMode::Stack,
                share_cross_attn: false,
            },
        ),
    ];
    for (name, kind, blend) in e2e {
        let r = grad_check_end_to_end(kind, blend, E2E_ENTRIES)?;
        checks.push(Check::from_grads(name, &r));
    }
    Ok(checks)
}

/// Plain and freshly adapted encoders over the same backbone agree
/// bit-for-bit on features and pooled embeddings.
pub fn identity_at_init(seed: u64) -> Result<Check> {
    let cfg = ModelConfig::default();
    let vcfg = VisionConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plain = VisionEncoder::new("vision", "proj.video", &vcfg, &AdapterPlacement::none(), cfg.embed_dim)?;
    let adapted = VisionEncoder::new("vision", "proj.video", &vcfg, &cfg.placement()?, cfg.embed_dim)?;
    let mut store_a = ParamStore::new();
    adapted.init(&mut store_a, &mut rng);
    let mut store_p = ParamStore::new();
    for (n, t) in store_a.iter().filter(|(n, _)| !n.contains(".adapter.")) {
        store_p.insert(n, t.clone());
    }
    let frames = normal_tensor(vec![2, cfg.frames, vcfg.channels, vcfg.image_size, vcfg.image_size], 1.0, &mut rng);
    let run = |enc: &VisionEncoder, store: &ParamStore| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let (feat, pooled) = enc.encode_video(&mut g, &p, &frames, None)?;
        Ok((g.value(feat.var).to_vec(), g.value(pooled).to_vec()))
    };
    let (fa, pa) = run(&adapted, &store_a)?;
    let (fp, pp) = run(&plain, &store_p)?;
    let same = fa.iter().zip(&fp).all(|(a, b)| a.to_bits() == b.to_bits())
        && pa.iter().zip(&pp).all(|(a, b)| a.to_bits() == b.to_bits());
    Ok(Check::new(
        "identity at init",
        same && fa.len() == fp.len(),
        format!("{} feature values, {} adapters", fa.len(), cfg.adapter_layers.len()),
    ))
}

/// VTC on identical embeddings, MLM and Uni-LM under uniform logits.
pub fn analytic_losses() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let ln4 = 4f64.ln();
    let ln_v = (VOCAB_SIZE as f64).ln();
    for (dir, name) in [(VtcDirection::Symmetric, "symmetric"), (VtcDirection::VideoToText, "video-to-text")] {
        let mut g = Graph::new();
        let row = [0.6, 0.0, -0.8, 0.0];
        let emb: Vec<f64> = row.iter().copied().cycle().take(16).collect();
        let v = g.constant_from(vec![4, 4], emb.clone())?;
        let t = g.constant_from(vec![4, 4], emb)?;
        let tau = g.constant(&Tensor::scalar(0.07));
        let l = vtc_loss(&mut g, v, t, tau, dir)?;
        let err = (g.scalar(l) - ln4).abs();
        checks.push(Check::new(format!("VTC ln 4 ({name})"), err <= 1e-9, format!("error {err:.1e}")));
    }
    let seqs = vec![vec![1, 10, 11, 12, 4], vec![1, 13, 14, 4]];
    let input = FusionInput::new(&seqs)?;
    let mut g = Graph::new();
    let logits = g.constant(&Tensor::zeros(vec![input.batch * input.len, VOCAB_SIZE]));
    let plans = vec![
        MaskingPlan::new(&seqs[0], vec![1, 3], vec![Replacement::Mask, Replacement::Keep])?,
        MaskingPlan::new(&seqs[1], vec![2], vec![Replacement::Random(20)])?,
    ];
    let mlm = mlm_loss(&mut g, logits, &input, &plans)?;
    let err = (g.scalar(mlm) - ln_v).abs();
    checks.push(Check::new("MLM ln 64, uniform logits", err <= 1e-9, format!("error {err:.1e}")));
    let targets = vec![vec![10, 11, 12, 4], vec![13, 14, 4]];
    let uni = unilm_loss(&mut g, logits, &input, &targets)?;
    let err = (g.scalar(uni) - ln_v).abs();
    checks.push(Check::new("Uni-LM ln 64, uniform logits", err <= 1e-9, format!("error {err:.1e}")));
    Ok(checks)
}

fn fusion_logits(
    enc: &FusionEncoder,
    store: &ParamStore,
    seqs: &[Vec<usize>],
    video: &Tensor,
    image: Option<&Tensor>,
    rows: usize,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, |_| false);
    let input = FusionInput::new(seqs)?;
    let segments = Segments::new(seqs.len(), rows);
    let proj = |g: &mut Graph, t: &Tensor, which: &crate::nn::Linear| -> Result<Memory> {
        let c = g.constant(t);
        Ok(Memory {
            var: which.forward(g, &p, c)?,
            segments,
        })
    };
    let video = proj(&mut g, video, &enc.mem_proj_v)?;
    let image = match (image, &enc.mem_proj_i) {
        (Some(t), Some(lin)) => Some(proj(&mut g, t, lin)?),
        _ => None,
    };
    let out = enc.forward(&mut g, &p, &input, &Memories { video, image }, AttnPattern::Causal)?;
    Ok(g.value(out).to_vec())
}

/// Parallel blending with `(α, β) = (1, 0)`, and with shared weights on
/// identical memories at `α = β = 0.5`, reproduces single cross-attention.
pub fn blend_degeneracies(seed: u64) -> Result<Vec<Check>> {
    let cfg = ModelConfig::default().fusion;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let single = FusionEncoder::new("fusion", &cfg, &BlendConfig::single())?;
    let seqs = vec![vec![1, 7, 8, 9, 4], vec![1, 10, 4]];
    let rows = 5;
    let video = normal_tensor(vec![2 * rows, cfg.visual_width], 1.0, &mut rng);
    let image = normal_tensor(vec![2 * rows, cfg.visual_width], 1.0, &mut rng);
    let mut checks = Vec::new();
    for share in [false, true] {
        let par = FusionEncoder::new(
            "fusion",
            &cfg,
            &BlendConfig {
                mode: BlendMode::Parallel,
                share_cross_attn: share,
            },
        )?;
        let mut store = ParamStore::new();
        par.init(&mut store, &mut rng);
        wake(&mut store, &mut rng);
        let mut sstore = ParamStore::new();
        single.init(&mut sstore, &mut rng);
        let names: Vec<String> = sstore.names().map(String::from).collect();
        for n in names {
            sstore.insert(n.clone(), store.get(&n)?.clone());
        }
        let reference = fusion_logits(&single, &sstore, &seqs, &video, None, rows)?;
        let (name, got) = if share {
            store.insert("fusion.alpha", Tensor::scalar(0.5));
            store.insert("fusion.beta", Tensor::scalar(0.5));
            for part in ["weight", "bias"] {
                let w = store.get(&format!("fusion.mem_proj_v.{part}"))?.clone();
                store.insert(format!("fusion.mem_proj_i.{part}"), w);
            }
            let got = fusion_logits(&par, &store, &seqs, &video, Some(&video), rows)?;
            ("blend shared, I = v, 0.5/0.5", got)
        } else {
            store.insert("fusion.alpha", Tensor::scalar(1.0));
            store.insert("fusion.beta", Tensor::scalar(0.0));
            let got = fusion_logits(&par, &store, &seqs, &video, Some(&image), rows)?;
            ("blend alpha 1, beta 0", got)
        };
        let max = got.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        checks.push(Check::new(name, max == 0.0, format!("max abs diff {max:.1e}")));
    }
    Ok(checks)
}

/// Perturbs each position of a length-`len` sequence in turn and requires
/// every earlier row of `logits` to stay bit-identical.
fn leak_scan(len: usize, vocab: usize, mut logits: impl FnMut(&[usize]) -> Result<Vec<f64>>) -> Result<(bool, usize)> {
    let base: Vec<usize> = std::iter::once(1).chain((0..len - 1).map(|i| 10 + i)).collect();
    let reference = logits(&base)?;
    let mut leaks = 0;
    for k in 1..len {
        let mut edited = base.clone();
        edited[k] = 30 + k;
        let out = logits(&edited)?;
        for pos in 0..k {
            let (a, b) = (&reference[pos * vocab..(pos + 1) * vocab], &out[pos * vocab..(pos + 1) * vocab]);
            if a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                leaks += 1;
            }
        }
    }
    Ok((leaks == 0, leaks))
}

/// Future tokens never reach earlier logits, for the training-time Uni-LM
/// forward and for the decoding path, exhaustively over positions.
pub fn causal_no_leakage(len: usize) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let setups = [
        ("video", ModelKind::Video, BlendConfig::single()),
        ("stacked blend", ModelKind::Blended, BlendConfig { mode: BlendMode::Stack, share_cross_attn: false }),
        ("parallel blend", ModelKind::Blended, BlendConfig::default()),
    ];
    for (label, kind, blend) in setups {
        let mut cfg = verify_model_config(blend);
        cfg.fusion.max_len = cfg.fusion.max_len.max(len);
        let (model, store) = verify_model(&cfg, kind, 21)?;
        let batch = scene_batch(1, cfg.frames, 22)?;
        let v = cfg.fusion.vocab_size;
        let train_path = |seq: &[usize]| -> Result<Vec<f64>> {
            let mut g = Graph::new();
            let p = store.bind(&mut g, |_| false);
            let vis = model.encode_visual(&mut g, &p, &batch.frames, None)?;
            let mems = model.memories(&mut g, &p, &vis)?;
            let input = FusionInput::new(&[seq.to_vec()])?;
            let out = model.fusion.forward(&mut g, &p, &input, &mems, AttnPattern::Causal)?;
            Ok(g.value(out).to_vec())
        };
        let (ok, leaks) = leak_scan(len, v, train_path)?;
        checks.push(Check::new(format!("no leakage, Uni-LM, {label}"), ok, format!("L = {len}, {leaks} leaks")));
        let vis = model.visual_tensors(&store, &batch.frames)?;
        let gen_path = |seq: &[usize]| -> Result<Vec<f64>> {
            let (t, _) = model.causal_logits(&store, &vis, &[0], &[seq.to_vec()])?;
            Ok(t.data().to_vec())
        };
        let (ok, leaks) = leak_scan(len, v, gen_path)?;
        checks.push(Check::new(format!("no leakage, decoding, {label}"), ok, format!("L = {len}, {leaks} leaks")));
    }
    Ok(checks)
}

/// Freeze masks over real parameter names match each stage's contract.
pub fn freeze_masks() -> Result<Vec<Check>> {
    let video_cfg = verify_model_config(BlendConfig::single());
    let video = VlabModel::new(&video_cfg, ModelKind::Video)?.param_names();
    let blend_cfg = verify_model_config(BlendConfig::default());
    let blended = VlabModel::new(&blend_cfg, ModelKind::Blended)?.param_names();
    let adapt = FreezeMask::build(Stage::Adapt, video.iter().map(String::as_str), false, false);
    let adapt_ok = video.iter().all(|n| {
        let frozen = n.starts_with("vision.backbone.") || n.starts_with("text.");
        adapt.is_trainable(n) != frozen
    });
    let tune = FreezeMask::build(Stage::Tune, video.iter().map(String::as_str), false, false);
    let blend = FreezeMask::build(Stage::Blend, blended.iter().map(String::as_str), false, false);
    let blend_ok = blended.iter().all(|n| {
        let frozen = n.starts_with("vision_adapted.") || n.starts_with("vision_image.") || n.starts_with("text.");
        blend.is_trainable(n) != frozen
    }) && blend.trainable().count() > 0;
    Ok(vec![
        Check::new("freeze mask, adapt", adapt_ok, format!("{} frozen of {}", adapt.frozen().count(), adapt.len())),
        Check::new("freeze mask, tune", tune.frozen().count() == 0, format!("{} trainable", tune.len())),
        Check::new("freeze mask, blend", blend_ok, format!("{} frozen of {}", blend.frozen().count(), blend.len())),
    ])
}

fn oracle_rank(row: &[f64], truth: usize) -> usize {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.iter().position(|&j| j == truth).unwrap_or(usize::MAX)
}

fn oracle_dual_softmax(s: &[f64], q: usize, g: usize, t: f64) -> Vec<f64> {
    let e: Vec<f64> = s.iter().map(|x| (t * x).exp()).collect();
    let row_z: Vec<f64> = (0..q).map(|i| (0..g).map(|j| e[i * g + j]).sum()).collect();
    let col_z: Vec<f64> = (0..g).map(|j| (0..q).map(|i| e[i * g + j]).sum()).collect();
    (0..q * g).map(|k| (e[k] / row_z[k / g]) * (e[k] / col_z[k % g])).collect()
}

/// `recall_at_k` and `dual_softmax` against brute force on random matrices
/// up to 20×20. Scores are quantised so ties occur.
pub fn metric_oracles(count: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut rank_bad, mut worst_ds) = (0usize, 0f64);
    for _ in 0..count {
        let q = rng.gen_range(1..=20);
        let g = rng.gen_range(1..=20);
        let levels = rng.gen_range(2..=40) as f64;
        let scores: Vec<f64> = (0..q * g).map(|_| (rng.gen_range(-1.0..1.0f64) * levels).round() / levels).collect();
        let truth: Vec<usize> = (0..q).map(|_| rng.gen_range(0..g)).collect();
        let m = SimMatrix::new(q, g, scores.clone(), truth.clone())?;
        let ks: Vec<usize> = [1, 5, 10].into_iter().filter(|&k| k <= g).collect();
        let r = recall_at_k(&m, &ks)?;
        for (i, &t) in truth.iter().enumerate() {
            if m.rank_of_truth(i) != oracle_rank(&scores[i * g..(i + 1) * g], t) {
                rank_bad += 1;
            }
        }
        for &(k, got) in &r.at {
            let hits = (0..q).filter(|&i| oracle_rank(&scores[i * g..(i + 1) * g], truth[i]) < k).count();
            if got != 100.0 * hits as f64 / q as f64 {
                rank_bad += 1;
            }
        }
        let ds = dual_softmax(&m, DUAL_SOFTMAX_TEMP);
        let want = oracle_dual_softmax(&scores, q, g, DUAL_SOFTMAX_TEMP);
        worst_ds = ds.scores().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(worst_ds, f64::max);
    }
    Ok(vec![
        Check::new("recall oracle", rank_bad == 0, format!("{count} matrices, {rank_bad} mismatches")),
        Check::new("dual softmax oracle", worst_ds <= 1e-12, format!("{count} matrices, max abs diff {worst_ds:.1e}")),
    ])
}

/// Save, load and save again yields identical bytes. Stored values are
/// 32-bit, so the first load rounds and later loads are exact.
pub fn checkpoint_round_trip() -> Result<Check> {
    let (_, store) = verify_model(&verify_model_config(BlendConfig::default()), ModelKind::Blended, 31)?;
    let bytes = store.to_bytes();
    let back = ParamStore::read_from(&mut bytes.as_slice())?;
    let again = ParamStore::read_from(&mut back.to_bytes().as_slice())?;
    let same = back.to_bytes() == bytes && again == back;
    Ok(Check::new("checkpoint round trip", same, format!("{} bytes", bytes.len())))
}

pub fn invariant_suite() -> Result<Vec<Check>> {
    let mut checks = vec![identity_at_init(41)?];
    checks.extend(analytic_losses()?);
    checks.extend(blend_degeneracies(42)?);
    checks.extend(causal_no_leakage(8)?);
    checks.extend(freeze_masks()?);
    checks.extend(metric_oracles(200, 43)?);
    checks.push(checkpoint_round_trip()?);
    Ok(checks)
}

pub fn run_suite(kind: SuiteKind, fault: Option<OpKind>) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    if matches!(kind, SuiteKind::Grads | SuiteKind::All) {
        checks.extend(grad_suite(fault)?);
    }
    if matches!(kind, SuiteKind::Invariants | SuiteKind::All) {
        let _guard = fault.map(FaultGuard::arm);
        checks.extend(invariant_suite()?);
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invariants_hold() {
        for c in invariant_suite().unwrap() {
            assert!(c.passed, "{c}");
        }
    }

    #[test]
    fn grad_suite_passes_clean() {
        for c in grad_suite(None).unwrap() {
            assert!(c.passed, "{c}");
        }
    }

    #[test]
    fn op_fault_is_caught_by_name() {
        let checks = grad_suite(Some(OpKind::Gelu)).unwrap();
        let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        assert!(failed.contains(&"op gelu"), "{failed:?}");
        assert!(failed.iter().all(|n| !n.starts_with("op ") || *n == "op gelu"), "{failed:?}");
    }

    #[test]
    fn suite_names() {
        assert_eq!(SuiteKind::from_name("all").unwrap(), SuiteKind::All);
        assert!(SuiteKind::from_name("speed").is_err());
    }
}
