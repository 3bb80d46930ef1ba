//! Command line front end: training, evaluation, prediction, the HTTP
//! service and the gradient check.

pub mod server;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use cmc_core::data::{load_corpus, HistoryFlags, HistoryMode};
use cmc_core::diagnostics::{full_gradcheck, shared_theta_adjoint, TinyProblem};
use cmc_core::metrics::{attach_human_scores, read_jsonl, write_jsonl, EvalReport, HumanScore};
use cmc_core::pipeline::{evaluate, EvalOptions};
use cmc_core::training::{build_vocab, default_run_dir, train, TrainConfig};
use cmc_core::{Checkpoint, Predictor};

#[derive(Debug, Parser)]
#[command(name = "cmc", version, about = "Conversational machine comprehension")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a TOML config.
    Train(TrainArgs),
    /// Score a corpus and write a metrics report.
    Eval(EvalArgs),
    /// Write JSON-lines predictions for a corpus.
    Predict(PredictArgs),
    /// Serve the HTTP session API.
    Serve(ServeArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Training corpus (dataset JSON or corpus cache).
    #[arg(long)]
    pub train: PathBuf,
    /// Development corpus used to pick the best checkpoint.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Output directory; defaults to runs/<config stem>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the parsed training corpus as a cache file.
    #[arg(long)]
    pub write_cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HistoryArgs {
    /// Answer history source.
    #[arg(long, value_parser = ["gold", "predicted"], default_value = "gold")]
    pub history: String,
    /// Leave out previous questions.
    #[arg(long)]
    pub no_question_history: bool,
    /// Leave out previous answers.
    #[arg(long)]
    pub no_answer_history: bool,
    /// Use only the N most recent turns (at most the model's k).
    #[arg(long = "k", value_name = "N")]
    pub k: Option<usize>,
}

impl HistoryArgs {
    fn options(&self, model_k: usize) -> anyhow::Result<EvalOptions> {
        if let Some(n) = self.k {
            if n > model_k {
                return Err(UsageError(format!("--k {n} exceeds the checkpoint's k = {model_k}")).into());
            }
        }
        Ok(EvalOptions {
            history: self.history.parse::<HistoryMode>()?,
            history_limit: self.k,
            flags: HistoryFlags {
                questions: !self.no_question_history,
                answers: !self.no_answer_history,
            },
        })
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub history: HistoryArgs,
    /// JSON-lines of {dialogue_id, turn, f1} human scores, enabling HEQ.
    #[arg(long)]
    pub human_scores: Option<PathBuf>,
    /// Drop turn buckets with fewer than 100 questions.
    #[arg(long)]
    pub fidelity: bool,
    /// Where to write the tab-separated report (default: stdout).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Where to write the JSON summary.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Also write predictions as JSON-lines.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub history: HistoryArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Idle session lifetime in seconds.
    #[arg(long, default_value_t = 3600)]
    pub ttl_secs: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Number of sampled parameter coordinates.
    #[arg(long, default_value_t = 60)]
    pub coords: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

/// Bad flags or paths; the binary exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn existing(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.exists() {
        return Err(UsageError(format!("{what} {} does not exist", path.display())).into());
    }
    Ok(())
}

pub fn load_predictor(path: &Path) -> anyhow::Result<Predictor> {
    existing(path, "checkpoint")?;
    let ckpt = Checkpoint::load(path)?;
    Ok(Predictor::from_checkpoint(ckpt)?)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Predict(a) => run_predict(a),
        Command::Serve(a) => run_serve(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    }
}

fn run_train(a: TrainArgs) -> anyhow::Result<()> {
    existing(&a.config, "config")?;
    existing(&a.train, "training corpus")?;
    if let Some(dev) = &a.dev {
        existing(dev, "dev corpus")?;
    }
    let cfg = TrainConfig::load(&a.config)?;
    let corpus = load_corpus(&a.train, cfg.dataset_mode)?;
    if let Some(path) = &a.write_cache {
        corpus.save_cache(path)?;
    }
    let dev = a.dev.as_deref().map(|p| load_corpus(p, cfg.dataset_mode)).transpose()?;
    let out = a.out.unwrap_or_else(|| default_run_dir(&a.config));
    let vocab = build_vocab(&corpus, &cfg);
    log::info!(
        "training on {} dialogues ({} questions), vocabulary {}",
        corpus.dialogues.len(),
        corpus.num_questions(),
        vocab.len()
    );
    let started = Instant::now();
    let run = train(&corpus, dev.as_ref(), vocab, &cfg, Some(&out))?;
    println!(
        "trained {} steps on {} examples in {:.1}s; final loss {:.4}; checkpoints in {}",
        run.last.meta.step,
        run.examples,
        started.elapsed().as_secs_f64(),
        run.curve.last().map_or(f64::NAN, |s| s.loss),
        out.display()
    );
    if let Some(f1) = run.best_dev_f1 {
        println!("best dev F1 {:.2}", 100.0 * f1);
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> anyhow::Result<()> {
    existing(&a.data, "corpus")?;
    if let Some(p) = &a.human_scores {
        existing(p, "human scores")?;
    }
    let predictor = load_predictor(&a.checkpoint)?;
    let opts = a.history.options(predictor.k())?;
    let corpus = load_corpus(&a.data, predictor.mode)?;
    let (lines, mut records) = evaluate(&predictor, &corpus, &opts)?;
    if let Some(p) = &a.human_scores {
        let scores: Vec<HumanScore> = read_jsonl(p)?;
        attach_human_scores(&mut records, &scores);
    }
    let report = EvalReport::build(&records, a.fidelity);
    match &a.report {
        Some(p) => std::fs::write(p, report.to_tsv()).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{}", report.to_tsv()),
    }
    if let Some(p) = &a.summary {
        let json = serde_json::to_string_pretty(&report)?;
        std::fs::write(p, json).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.predictions {
        write_jsonl(p, &lines)?;
    }
    Ok(())
}

fn run_predict(a: PredictArgs) -> anyhow::Result<()> {
    existing(&a.data, "corpus")?;
    let predictor = load_predictor(&a.checkpoint)?;
    let opts = a.history.options(predictor.k())?;
    let corpus = load_corpus(&a.data, predictor.mode)?;
    let (lines, _) = evaluate(&predictor, &corpus, &opts)?;
    write_jsonl(&a.out, &lines)?;
    log::info!("wrote {} predictions to {}", lines.len(), a.out.display());
    Ok(())
}

fn run_serve(a: ServeArgs) -> anyhow::Result<()> {
    let predictor = load_predictor(&a.checkpoint)?;
    let app = server::AppState::new(predictor, Duration::from_secs(a.ttl_secs));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .with_context(|| format!("binding {}", a.addr))?;
        println!("listening on http://{}", listener.local_addr()?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        server::serve(listener, app, shutdown).await?;
        Ok(())
    })
}

fn run_gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    if a.coords == 0 {
        return Err(UsageError("--coords must be positive".into()).into());
    }
    let started = Instant::now();
    let problem = TinyProblem::new(1, a.seed)?;
    let report = full_gradcheck(&problem, a.coords, a.seed)?;
    let adjoint = shared_theta_adjoint(&problem)?;
    for c in &report.checks {
        log::debug!("{} analytic {:.6e} numeric {:.6e} rel {:.2e}", c.label, c.analytic, c.numeric, c.rel_err);
    }
    println!(
        "checked {} coordinates: max relative error {:.3e} (tolerance {:.0e}); shared-weight adjoint {:.3e}; {:.1}s",
        report.checks.len(),
        report.max_rel_err,
        a.tolerance,
        adjoint,
        started.elapsed().as_secs_f64()
    );
    if !report.passes(a.tolerance) || adjoint >= 1e-10 {
        bail!("gradient check failed");
    }
    Ok(())
}
