//! Acceptance suite: one PASS/FAIL line per criterion. Criteria run one
//! after another so the timed ones measure a single busy core.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use vlab::config::RunConfig;
use vlab::data::{generate_corpus, Corpus, CorpusSpec, Split};
use vlab::evalkit::{evaluate, Task};
use vlab::experiments::{direction_qa, overfit, stage_ordering, DirectionSetup, OrderingSetup, OverfitSetup};
use vlab::pipeline::{
    load_checkpoint, param_digest, prepare_stage, run_stage, save_checkpoint, CheckpointMeta, Stage, StageConfig,
};
use vlab::verify::{self, Check};
use vlab::Result;

struct Outcome {
    passed: bool,
    detail: String,
}

fn all(checks: &[Check]) -> Outcome {
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.to_string()).collect();
    Outcome {
        passed: failed.is_empty(),
        detail: if failed.is_empty() {
            format!("{} checks", checks.len())
        } else {
            failed.join("; ")
        },
    }
}

fn gradients() -> Result<Outcome> {
    let start = Instant::now();
    let checks = verify::grad_suite(None)?;
    let secs = start.elapsed().as_secs_f64();
    let mut o = all(&checks);
    let worst = checks
        .iter()
        .filter(|c| c.name.starts_with("total loss"))
        .map(|c| format!("{}: {}", c.name, c.detail))
        .collect::<Vec<_>>()
        .join("; ");
    o.passed &= secs < 120.0;
    o.detail = format!("{:.1}s; {worst}", secs);
    Ok(o)
}

fn corpus(root: &Path, n: usize, seed: u64) -> Result<Corpus> {
    generate_corpus(&CorpusSpec::new(n, seed), root)?;
    Corpus::open(root)
}

fn freeze_invariance(root: &Path) -> Result<Outcome> {
    let c = corpus(&root.join("freeze"), 40, 6)?;
    let train_ids = c.ids(Split::Train);
    let mut run = RunConfig::default();
    run.train.steps = [4, 3, 3];
    let frozen_1 = |n: &str| n.starts_with("vision.backbone.") || n.starts_with("text.");
    let (model, mut store) = prepare_stage(&run, Stage::Adapt, None)?;
    let before = (param_digest(&store, frozen_1), param_digest(&store, |n| !frozen_1(n)));
    run_stage(&StageConfig::from_run(&run, Stage::Adapt), &c, &train_ids, &model, &mut store, |_| Ok(()))?;
    let after = (param_digest(&store, frozen_1), param_digest(&store, |n| !frozen_1(n)));
    let stage1 = before.0 == after.0 && before.1 != after.1;

    let meta = CheckpointMeta::new(&run, Stage::Adapt, 4);
    let (model, mut store) = prepare_stage(&run, Stage::Blend, Some((store, meta)))?;
    let frozen_3 = |n: &str| n.starts_with("vision_adapted.") || n.starts_with("vision_image.");
    let before = (param_digest(&store, frozen_3), param_digest(&store, |n| !frozen_3(n)));
    run_stage(&StageConfig::from_run(&run, Stage::Blend), &c, &train_ids, &model, &mut store, |_| Ok(()))?;
    let after = (param_digest(&store, frozen_3), param_digest(&store, |n| !frozen_3(n)));
    let stage3 = before.0 == after.0 && before.1 != after.1;
    Ok(Outcome {
        passed: stage1 && stage3 && train_ids.len() == 32,
        detail: format!("{} training samples; adapt frozen bytes kept: {stage1}; blend encoders kept: {stage3}", train_ids.len()),
    })
}

fn overfit_sanity(root: &Path) -> Result<Outcome> {
    let r = overfit(&root.join("overfit"), &OverfitSetup::default())?;
    Ok(Outcome {
        passed: r.passed(),
        detail: format!(
            "loss {:.3} -> {:.3} (ratio {:.3}), retrieval SUM {:.0}, caption EM {:.2}, {:.0}s",
            r.initial_loss,
            r.final_loss,
            r.final_loss / r.initial_loss,
            r.retrieval_sum,
            r.caption_em,
            r.seconds
        ),
    })
}

fn temporal_signal(root: &Path) -> Result<Outcome> {
    let r = direction_qa(&root.join("direction"), &DirectionSetup::default())?;
    let per_seed: Vec<String> = r
        .arms
        .chunks(2)
        .map(|a| format!("seed {}: {:.1} vs {:.1}", a[0].seed, a[0].accuracy, a[1].accuracy))
        .collect();
    Ok(Outcome {
        passed: r.margin() >= 15.0 && r.seconds < 900.0,
        detail: format!(
            "adapted {:.1}%, plain {:.1}%, margin {:+.1} points, {:.0}s ({})",
            r.mean(true),
            r.mean(false),
            r.margin(),
            r.seconds,
            per_seed.join(", ")
        ),
    })
}

fn stage_order(root: &Path) -> Result<Outcome> {
    let r = stage_ordering(&root.join("ordering"), &OrderingSetup::default())?;
    let per_seed: Vec<String> = r
        .runs
        .iter()
        .map(|x| format!("seed {}: {:.1} vs {:.1}", x.seed, x.two_step, x.tune_only))
        .collect();
    Ok(Outcome {
        passed: r.margin() >= -5.0,
        detail: format!(
            "adapt+tune SUM {:.1}, tune-only SUM {:.1}, margin {:+.1}, {:.0}s ({})",
            r.mean_two_step(),
            r.mean_tune_only(),
            r.margin(),
            r.seconds,
            per_seed.join(", ")
        ),
    })
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).expect("read dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).expect("prefix").display().to_string();
                out.push((rel, fs::read(&p).expect("read file")));
            }
        }
    }
    out.sort();
    out
}

fn determinism(root: &Path) -> Result<Outcome> {
    let (a, b) = (root.join("det-a"), root.join("det-b"));
    generate_corpus(&CorpusSpec::new(30, 9), &a)?;
    generate_corpus(&CorpusSpec::new(30, 9), &b)?;
    let corpora = dir_bytes(&a) == dir_bytes(&b);

    let c = Corpus::open(&a)?;
    let mut run = RunConfig {
        seed: 9,
        ..RunConfig::default()
    };
    run.train.steps = [3, 3, 3];
    let train_once = |path: &Path| -> Result<()> {
        let (model, mut store) = prepare_stage(&run, Stage::Adapt, None)?;
        let cfg = StageConfig::from_run(&run, Stage::Adapt);
        run_stage(&cfg, &c, &c.ids(Split::Train), &model, &mut store, |_| Ok(()))?;
        save_checkpoint(path, &store, &CheckpointMeta::new(&run, Stage::Adapt, cfg.steps))
    };
    let (ca, cb) = (root.join("det-a.bin"), root.join("det-b.bin"));
    train_once(&ca)?;
    train_once(&cb)?;
    let read = |p: &Path| fs::read(p).map_err(|e| vlab::Error::io(p, e));
    let checkpoints = read(&ca)? == read(&cb)?;

    let (store, meta) = load_checkpoint(&ca)?;
    let cc = root.join("det-c.bin");
    save_checkpoint(&cc, &store, &meta)?;
    let round_trip = read(&ca)? == read(&cc)?;

    let model = vlab::model::VlabModel::new(&run.model, meta.stage.model_kind())?;
    let ids = c.ids(Split::Train);
    let r1 = serde_json::to_string(&evaluate(Task::Retrieval, &run, &model, &store, &c, &ids)?)?;
    let r2 = serde_json::to_string(&evaluate(Task::Retrieval, &run, &model, &store, &c, &ids)?)?;
    let results = r1 == r2;
    Ok(Outcome {
        passed: corpora && checkpoints && round_trip && results,
        detail: format!(
            "corpora {corpora}, checkpoints {checkpoints}, save-load-save {round_trip}, results {results}"
        ),
    })
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    type Criterion<'a> = (&'a str, Box<dyn Fn() -> Result<Outcome> + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("gradient integrity", Box::new(gradients)),
        ("identity at init", Box::new(|| Ok(all(&[verify::identity_at_init(1)?])))),
        ("analytic loss values", Box::new(|| Ok(all(&verify::analytic_losses()?)))),
        ("blend degeneracies", Box::new(|| Ok(all(&verify::blend_degeneracies(2)?)))),
        ("causal no-leakage", Box::new(|| Ok(all(&verify::causal_no_leakage(8)?)))),
        ("freeze invariance", Box::new(|| freeze_invariance(root))),
        ("overfit sanity", Box::new(|| overfit_sanity(root))),
        ("temporal signal", Box::new(|| temporal_signal(root))),
        ("stage ordering", Box::new(|| stage_order(root))),
        ("metric oracles", Box::new(|| Ok(all(&verify::metric_oracles(200, 3)?)))),
        ("determinism and round trip", Box::new(|| determinism(root))),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run().unwrap_or_else(|e| Outcome {
            passed: false,
            detail: format!("error: {e}"),
        });
        let tag = if outcome.passed { "PASS" } else { "FAIL" };
        failures += usize::from(!outcome.passed);
        println!(
            "{tag} criterion {:>2} {name}: {} [{:.1}s]",
            i + 1,
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
