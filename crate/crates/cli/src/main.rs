//! `vlab` command-line entry point: corpus generation, staged training,
//! evaluation and self-verification.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vlab::config::RunConfig;
use vlab::data::{generate_corpus, Corpus, CorpusSpec, QaKind, Split};
use vlab::evalkit::{evaluate, Task};
use vlab::pipeline::{
    load_checkpoint, prepare_stage, run_stage, save_checkpoint, write_metrics, CheckpointMeta, Stage, StageConfig,
};
use vlab::verify::{run_suite, SuiteKind};
use vlab::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "vlab", version, about = "Desk-scale video-language pre-training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic corpus of moving-shape videos with captions and QA.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated question kinds: color, shape, direction.
        #[arg(long, value_delimiter = ',')]
        qa_kinds: Option<Vec<String>>,
    },
    /// Run one training stage and write a checkpoint plus a metrics log.
    Train {
        /// adapt, tune or blend (full stage names are accepted too).
        #[arg(long)]
        stage: String,
        /// key = value config file. Defaults to the init checkpoint's config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init_ckpt: Option<PathBuf>,
        /// Checkpoint path. Metrics go to `<out>.metrics.jsonl`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and write a results JSON file.
    Eval {
        /// retrieval, caption or qa.
        #[arg(long)]
        task: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Overrides the checkpoint's config (evaluation keys matter most).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run gradient checks and structural invariants.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        /// Corrupt one op's backward rule (negative control), e.g. `gelu`.
        #[arg(long)]
        inject_fault: Option<String>,
    },
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("unknown split {other:?}"))),
    }
}

fn resolve_config(config: Option<&Path>, meta: Option<&CheckpointMeta>) -> Result<RunConfig> {
    let run = match (config, meta) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(meta)) => meta.run_config()?,
        (None, None) => RunConfig::default(),
    };
    let run = run.with_env_seed()?;
    run.validate()?;
    Ok(run)
}

fn gen_data(n: usize, seed: u64, out: &Path, kinds: Option<Vec<String>>) -> Result<()> {
    let seed = match std::env::var("VLAB_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("VLAB_SEED {v:?} is not an unsigned integer")))?,
        Err(_) => seed,
    };
    let mut spec = CorpusSpec::new(n, seed);
    if let Some(kinds) = kinds {
        spec.qa_kinds = kinds
            .iter()
            .map(|k| QaKind::from_word(k.trim()).ok_or_else(|| Error::Config(format!("unknown question kind {k:?}"))))
            .collect::<Result<_>>()?;
    }
    let entries = generate_corpus(&spec, out)?;
    println!("wrote {} samples to {} (seed {seed})", entries.len(), out.display());
    Ok(())
}

fn train(stage: &str, config: Option<&Path>, data: &Path, init: Option<&Path>, out: &Path) -> Result<()> {
    let stage = Stage::from_name(stage)?;
    let init = match init {
        Some(p) => Some(load_checkpoint(p)?),
        None if stage == Stage::Blend => {
            return Err(Error::Config(
                "stage blend needs --init-ckpt from stage adapt or tune".into(),
            ))
        }
        None => None,
    };
    let run = resolve_config(config, init.as_ref().map(|(_, m)| m))?;
    println!("config {}", run.hash());
    let corpus = Corpus::open(data)?;
    let (model, mut store) = prepare_stage(&run, stage, init)?;
    let cfg = StageConfig::from_run(&run, stage);
    let metrics_path = {
        let mut s = out.as_os_str().to_owned();
        s.push(".metrics.jsonl");
        PathBuf::from(s)
    };
    let result = run_stage(&cfg, &corpus, &corpus.ids(Split::Train), &model, &mut store, |m| {
        log::info!("step {} total {:.4}", m.step, m.l_total);
        Ok(())
    });
    match result {
        Ok(report) => {
            write_metrics(&metrics_path, &report.metrics)?;
            save_checkpoint(out, &store, &CheckpointMeta::new(&run, stage, cfg.steps))?;
            println!(
                "stage {} finished {} steps, loss {:.4} -> {:.4}, checkpoint {}",
                stage.name(),
                cfg.steps,
                report.first_loss().unwrap_or(f64::NAN),
                report.last_loss().unwrap_or(f64::NAN),
                out.display()
            );
            Ok(())
        }
        Err(e @ Error::Numeric(_)) => {
            let mut s = out.as_os_str().to_owned();
            s.push(".last-good");
            let good = PathBuf::from(s);
            save_checkpoint(&good, &store, &CheckpointMeta::new(&run, stage, 0))?;
            eprintln!("last good parameters saved to {}", good.display());
            Err(e)
        }
        Err(e) => Err(e),
    }
}

fn eval(task: &str, ckpt: &Path, data: &Path, out: &Path, split: &str, config: Option<&Path>) -> Result<()> {
    let task = Task::from_name(task)?;
    let split = parse_split(split)?;
    let (store, meta) = load_checkpoint(ckpt)?;
    let run = resolve_config(config, Some(&meta))?;
    let trained = meta.run_config()?.train.objective;
    let needs = match task {
        Task::Qa => vlab::config::Objective::Vqa,
        Task::Retrieval | Task::Caption => vlab::config::Objective::Pretrain,
    };
    if trained != needs {
        return Err(Error::Config(format!(
            "task {} needs a checkpoint trained with objective {}, but {} was trained with {}",
            task.name(),
            needs.name(),
            ckpt.display(),
            trained.name()
        )));
    }
    println!("config {}", run.hash());
    let model = vlab::model::VlabModel::new(&run.model, meta.stage.model_kind())?;
    model.check_store(&store)?;
    let corpus = Corpus::open(data)?;
    let results = evaluate(task, &run, &model, &store, &corpus, &corpus.ids(split))?;
    let json = serde_json::to_string_pretty(&results)?;
    std::fs::write(out, json + "\n").map_err(|e| Error::io(out, e))?;
    let summary: Vec<String> = results.metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
    println!("{} {}", task.name(), summary.join(" "));
    Ok(())
}

fn verify(suite: &str, fault: Option<&str>) -> Result<()> {
    let kind = SuiteKind::from_name(suite)?;
    let fault = fault
        .map(|f| diffcore::OpKind::from_name(f).ok_or_else(|| Error::Config(format!("unknown op {f:?}"))))
        .transpose()?;
    println!("config {}", RunConfig::default().hash());
    let checks = run_suite(kind, fault)?;
    for c in &checks {
        println!("{c}");
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    println!("{} checks, {} failed", checks.len(), failed.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("failed checks: {}", failed.join(", "))))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { n, seed, out, qa_kinds } => gen_data(n, seed, &out, qa_kinds),
        Command::Train {
            stage,
            config,
            data,
            init_ckpt,
            out,
        } => train(&stage, config.as_deref(), &data, init_ckpt.as_deref(), &out),
        Command::Eval {
            task,
            ckpt,
            data,
            out,
            split,
            config,
        } => eval(&task, &ckpt, &data, &out, &split, config.as_deref()),
        Command::Verify { suite, inject_fault } => verify(&suite, inject_fault.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
