//! Desk-scale experiments: overfitting a handful of pairs, the value of the
//! temporal adapters on direction questions, and stage ordering.

use std::path::Path;
use std::time::Instant;

use diffcore::ParamStore;

use crate::config::{Objective, RunConfig};
use crate::data::{generate_corpus, Corpus, CorpusSpec, QaKind, Split};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_caption, evaluate_qa, evaluate_retrieval, unique_caption_ids};
use crate::model::VlabModel;
use crate::pipeline::{prepare_stage, run_stage, CheckpointMeta, Stage, StageConfig, StageReport};

fn corpus_at(root: &Path, spec: &CorpusSpec) -> Result<Corpus> {
    generate_corpus(spec, root)?;
    Corpus::open(root)
}

/// Trains `stage` on `ids`, optionally starting from `init`.
fn train(
    run: &RunConfig,
    stage: Stage,
    corpus: &Corpus,
    ids: &[String],
    init: Option<ParamStore>,
) -> Result<(VlabModel, ParamStore, StageReport)> {
    let init = init.map(|s| (s, CheckpointMeta::new(run, Stage::Adapt, 0)));
    let (model, mut store) = prepare_stage(run, stage, init)?;
    let cfg = StageConfig::from_run(run, stage);
    let report = run_stage(&cfg, corpus, ids, &model, &mut store, |_| Ok(()))?;
    Ok((model, store, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverfitReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Retrieval SUM over the training pairs, in points.
    pub retrieval_sum: f64,
    pub caption_em: f64,
    pub hypotheses: Vec<String>,
    pub seconds: f64,
}

impl OverfitReport {
    pub fn passed(&self) -> bool {
        self.final_loss < 0.1 * self.initial_loss && self.retrieval_sum == 300.0 && self.caption_em == 1.0
    }
}

#[derive(Clone, Debug)]
pub struct OverfitSetup {
    pub pairs: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for OverfitSetup {
    fn default() -> Self {
        OverfitSetup {
            pairs: 8,
            steps: 300,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Trains every parameter on a few pairs with distinct captions, then scores
/// retrieval and captioning on those same pairs. Final loss is the mean of
/// the last ten steps, since masking redraws every step.
pub fn overfit(root: &Path, setup: &OverfitSetup) -> Result<OverfitReport> {
    let start = Instant::now();
    // The smallest corpus whose training split has `pairs` distinct captions.
    let mut found = None;
    for corpus_seed in setup.seed..setup.seed + 64 {
        let spec = CorpusSpec::new((setup.pairs * 5 / 4).max(CorpusSpec::MIN_SAMPLES), corpus_seed);
        let dir = root.join(format!("overfit-{corpus_seed}"));
        let corpus = corpus_at(&dir, &spec)?;
        let ids: Vec<String> = corpus.ids(Split::Train).into_iter().take(setup.pairs).collect();
        if ids.len() == setup.pairs && unique_caption_ids(&corpus, &ids)?.len() == setup.pairs {
            found = Some((corpus, ids));
            break;
        }
    }
    let (corpus, ids) =
        found.ok_or_else(|| Error::Data(format!("no small corpus with {} distinct captions", setup.pairs)))?;
    let mut run = RunConfig {
        seed: setup.seed,
        ..RunConfig::default()
    };
    run.train.steps = [setup.steps; 3];
    run.train.batch_size = setup.pairs;
    run.train.lr = setup.lr;
    run.train.backbone_lr_ratio = 1.0;
    run.train.drop_rate = 0.0;
    let (model, store, report) = train(&run, Stage::Tune, &corpus, &ids, None)?;
    let initial_loss = report.first_loss().unwrap_or(f64::NAN);
    let tail = &report.metrics[report.metrics.len().saturating_sub(10)..];
    let final_loss = tail.iter().map(|m| m.l_total).sum::<f64>() / tail.len() as f64;
    let retrieval = evaluate_retrieval(&model, &store, &corpus, &ids, &run.eval, true)?;
    let caption = evaluate_caption(&model, &store, &corpus, &ids, &run.eval)?;
    Ok(OverfitReport {
        initial_loss,
        final_loss,
        retrieval_sum: retrieval.recall.sum,
        caption_em: caption.scores.exact_match,
        hypotheses: caption.hypotheses,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug)]
pub struct DirectionSetup {
    pub samples: usize,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for DirectionSetup {
    fn default() -> Self {
        DirectionSetup {
            samples: 400,
            seeds: vec![0, 1, 2],
            steps: 600,
            batch_size: 16,
            lr: 2e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionArm {
    pub seed: u64,
    pub adapters: bool,
    /// Held-out accuracy in points.
    pub accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionReport {
    pub arms: Vec<DirectionArm>,
    pub seconds: f64,
}

impl DirectionReport {
    pub fn mean(&self, adapters: bool) -> f64 {
        let xs: Vec<f64> = self.arms.iter().filter(|a| a.adapters == adapters).map(|a| a.accuracy).collect();
        xs.iter().sum::<f64>() / xs.len().max(1) as f64
    }

    /// Adapted minus plain mean accuracy, in points.
    pub fn margin(&self) -> f64 {
        self.mean(true) - self.mean(false)
    }
}

/// Direction-only QA on a frozen backbone, with and without the temporal
/// adapters. Everything else is identical, including the seed, so the
/// difference isolates the adapters. Held-out means validation plus test.
pub fn direction_qa(root: &Path, setup: &DirectionSetup) -> Result<DirectionReport> {
    let start = Instant::now();
    let mut arms = Vec::new();
    for &seed in &setup.seeds {
        let mut spec = CorpusSpec::new(setup.samples, seed);
        spec.qa_kinds = vec![QaKind::Direction];
        let corpus = corpus_at(&root.join(format!("direction-{seed}")), &spec)?;
        let train_ids = corpus.ids(Split::Train);
        let held_out: Vec<String> = corpus.ids(Split::Val).into_iter().chain(corpus.ids(Split::Test)).collect();
        for adapters in [true, false] {
            let t = Instant::now();
            let mut run = RunConfig {
                seed,
                ..RunConfig::default()
            };
            if !adapters {
                run.model.adapter_layers.clear();
            }
            run.train.objective = Objective::Vqa;
            run.train.steps = [setup.steps; 3];
            run.train.batch_size = setup.batch_size;
            run.train.lr = setup.lr;
            let (model, store, _) = train(&run, Stage::Adapt, &corpus, &train_ids, None)?;
            let qa = evaluate_qa(&model, &store, &corpus, &held_out, &run.eval)?;
            arms.push(DirectionArm {
                seed,
                adapters,
                accuracy: 100.0 * qa.accuracy,
                seconds: t.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(DirectionReport {
        arms,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug)]
pub struct OrderingSetup {
    pub samples: usize,
    pub seeds: Vec<u64>,
    pub adapt_steps: usize,
    pub tune_steps: usize,
}

impl Default for OrderingSetup {
    fn default() -> Self {
        OrderingSetup {
            samples: 200,
            seeds: vec![0, 1, 2],
            adapt_steps: 150,
            tune_steps: 150,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderingRun {
    pub seed: u64,
    /// Held-out retrieval SUM after adapt then tune.
    pub two_step: f64,
    /// Held-out retrieval SUM after tuning alone for the same total steps.
    pub tune_only: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderingReport {
    pub runs: Vec<OrderingRun>,
    pub seconds: f64,
}

impl OrderingReport {
    pub fn mean_two_step(&self) -> f64 {
        self.runs.iter().map(|r| r.two_step).sum::<f64>() / self.runs.len().max(1) as f64
    }

    pub fn mean_tune_only(&self) -> f64 {
        self.runs.iter().map(|r| r.tune_only).sum::<f64>() / self.runs.len().max(1) as f64
    }

    pub fn margin(&self) -> f64 {
        self.mean_two_step() - self.mean_tune_only()
    }
}

/// Adapt followed by tune against tune alone at equal total steps, scored
/// by test-split retrieval SUM.
pub fn stage_ordering(root: &Path, setup: &OrderingSetup) -> Result<OrderingReport> {
    let start = Instant::now();
    let mut runs = Vec::new();
    for &seed in &setup.seeds {
        let corpus = corpus_at(&root.join(format!("ordering-{seed}")), &CorpusSpec::new(setup.samples, seed))?;
        let train_ids = corpus.ids(Split::Train);
        let test_ids = corpus.ids(Split::Test);
        let mut run = RunConfig {
            seed,
            ..RunConfig::default()
        };
        run.train.steps = [setup.adapt_steps, setup.tune_steps, 1];
        let (_, adapted, _) = train(&run, Stage::Adapt, &corpus, &train_ids, None)?;
        let (model, two_step, _) = train(&run, Stage::Tune, &corpus, &train_ids, Some(adapted))?;
        let a = evaluate_retrieval(&model, &two_step, &corpus, &test_ids, &run.eval, true)?;
        run.train.steps = [1, setup.adapt_steps + setup.tune_steps, 1];
        let (model, tuned, _) = train(&run, Stage::Tune, &corpus, &train_ids, None)?;
        let b = evaluate_retrieval(&model, &tuned, &corpus, &test_ids, &run.eval, true)?;
        runs.push(OrderingRun {
            seed,
            two_step: a.recall.sum,
            tune_only: b.recall.sum,
        });
    }
    Ok(OrderingReport {
        runs,
        seconds: start.elapsed().as_secs_f64(),
    })
}
