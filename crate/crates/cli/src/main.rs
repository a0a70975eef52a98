//! `kbqa`: synthesize data, generate candidates, train, evaluate, ablate and
//! export attention weights.

mod error;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kbqa_core::candidates::CandidateSet;
use kbqa_core::dataset::{Dataset, Split, SplitProportions};
use kbqa_core::export::attention_csv;
use kbqa_core::kb::{parse_kb, KnowledgeBase};
use kbqa_core::metrics::format_table;
use kbqa_core::model::{AspectSet, Model};
use kbqa_core::par::{self, Execution};
use kbqa_core::synth::{desk_templates, generate_dataset, generate_kb, KbProfile};
use kbqa_core::templates::{parse_template_file, templates_to_json, QaInstance, Template};
use kbqa_core::train::{ablate, candidate_sets, evaluate, loss_log_csv, train, TrainConfig};
use serde_json::json;

use error::CliError;
use manifest::Recorder;

#[derive(Parser, Debug)]
#[command(name = "kbqa", version, about = "Knowledge-base question answering with aspect attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic KB and QA dataset from a profile.
    Synth(SynthArgs),
    /// Dump pruned candidate sets, one JSON object per candidate.
    Candidates(CandidatesArgs),
    /// Train a ranker and keep the best dev checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train and test one model per aspect subset.
    Ablate(AblateArgs),
    /// Export attention weights of each question's top answer as CSV.
    AttnExport(AttnArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Random seed for every stochastic step.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 runs sequentially, 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Output directory (default: runs/<timestamp>-seed<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Data {
    /// Triple file.
    #[arg(long)]
    kb: PathBuf,
    /// QA dataset in JSON lines.
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Args, Debug)]
struct Hyper {
    /// JSON training config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Margin for training (also the inference threshold unless the config sets one).
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Active aspects, e.g. `full` or `type+path`.
    #[arg(long)]
    aspects: Option<String>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Built-in profile name (`desk`, `medications`) or a profile JSON file.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Scale entity, triple and hub counts.
    #[arg(long)]
    scale: Option<f64>,
    /// Template JSON file; the built-in desk templates otherwise.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct CandidatesArgs {
    #[command(flatten)]
    data: Data,
    /// Restrict to one split.
    #[arg(long)]
    split: Option<Split>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: Data,
    #[command(flatten)]
    hyper: Hyper,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: Data,
    /// Checkpoint manifest written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Inference threshold; defaults to the one used in training.
    #[arg(long)]
    gamma: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    data: Data,
    #[command(flatten)]
    hyper: Hyper,
    /// Comma-separated aspect subsets, reported in the given order.
    #[arg(long, default_value = "entity+context,type,path,type+path")]
    subsets: String,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct AttnArgs {
    #[command(flatten)]
    data: Data,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[command(flatten)]
    common: Common,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Candidates(a) => candidates(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::AttnExport(a) => attn(a),
    }
}

fn execution(jobs: usize) -> Execution {
    if jobs == 1 {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn run_dir(out: &Option<PathBuf>, seed: u64) -> Result<PathBuf, CliError> {
    let dir = match out {
        Some(d) => d.clone(),
        None => PathBuf::from("runs").join(format!("{}-seed{seed}", chrono::Local::now().format("%Y%m%dT%H%M%S"))),
    };
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn load_data(data: &Data, rec: &mut Recorder) -> Result<(KnowledgeBase, Dataset), CliError> {
    let kb = parse_kb(&read(&data.kb)?)?;
    let ds = Dataset::from_jsonl(&read(&data.dataset)?, &kb)?;
    rec.input(&data.kb)?;
    rec.input(&data.dataset)?;
    Ok((kb, ds))
}

/// Defaults, then the config file, then flags.
fn train_config(h: &Hyper, seed: Option<u64>) -> Result<TrainConfig, CliError> {
    let mut cfg = match &h.config {
        Some(path) => {
            let bad = |e: serde_json::Error| CliError::Config(format!("{}: {e}", path.display()));
            let mut v: serde_json::Value = serde_json::from_str(&read(path)?).map_err(bad)?;
            // A bare `emb_dim` implies the matching LSTM width.
            if let Some(m) = v.get_mut("model").and_then(|m| m.as_object_mut()) {
                if let (Some(d), false) = (m.get("emb_dim").and_then(|d| d.as_u64()), m.contains_key("hidden")) {
                    m.insert("hidden".into(), json!(d / 2));
                }
            }
            serde_json::from_value::<TrainConfig>(v).map_err(bad)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(g) = h.gamma {
        cfg.gamma = g;
    }
    if let Some(e) = h.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = h.lr {
        cfg.lr = lr;
    }
    if let Some(a) = &h.aspects {
        cfg.model.aspects = a.parse().map_err(|e| CliError::Config(format!("--aspects: {e}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synth(a: SynthArgs) -> Result<(), CliError> {
    let seed = a.common.seed.unwrap_or(0);
    let dir = run_dir(&a.common.out, seed)?;
    let mut rec = Recorder::new("synth", seed, &dir);
    let mut profile = match KbProfile::builtin(&a.profile) {
        Some(p) => p,
        None => {
            let path = Path::new(&a.profile);
            let p = serde_json::from_str::<KbProfile>(&read(path)?)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            rec.input(path)?;
            p
        }
    };
    if let Some(f) = a.scale {
        if !(f > 0.0 && f.is_finite()) {
            return Err(CliError::Config("--scale must be positive".into()));
        }
        profile = profile.scaled(f);
    }
    let templates: Vec<Template> = match &a.templates {
        Some(path) => {
            let t = parse_template_file(&read(path)?)?;
            rec.input(path)?;
            t
        }
        None => desk_templates(),
    };
    let kb = generate_kb(&profile, seed)?;
    let ds = generate_dataset(&kb, &templates, SplitProportions::default(), seed)?;
    rec.manifest.config = json!({ "profile": profile });
    rec.output("profile.json", &serde_json::to_string_pretty(&profile).expect("profile serializes"))?;
    rec.output("kb.tsv", &kb.to_tsv())?;
    rec.output("templates.json", &templates_to_json(&templates))?;
    rec.output("dataset.jsonl", &ds.to_jsonl(&kb))?;
    let counts = [Split::Train, Split::Dev, Split::Test].map(|s| ds.split(s).len());
    let stats = json!({
        "kb": kb.stats(),
        "questions": ds.len(),
        "train": counts[0],
        "dev": counts[1],
        "test": counts[2],
    });
    rec.output("stats.json", &serde_json::to_string_pretty(&stats).expect("stats serialize"))?;
    println!("{}", serde_json::to_string(&stats).expect("stats serialize"));
    rec.finish()?;
    Ok(())
}

fn select(ds: &Dataset, split: Option<Split>) -> Vec<&QaInstance> {
    match split {
        Some(s) => ds.split(s),
        None => ds.instances.iter().collect(),
    }
}

fn candidates(a: CandidatesArgs) -> Result<(), CliError> {
    let seed = a.common.seed.unwrap_or(0);
    let dir = run_dir(&a.common.out, seed)?;
    let mut rec = Recorder::new("candidates", seed, &dir);
    let (kb, ds) = load_data(&a.data, &mut rec)?;
    let qs = select(&ds, a.split);
    let exec = execution(a.common.jobs);
    let sets: Vec<CandidateSet> = par::with_threads(a.common.jobs, || candidate_sets(&kb, &qs, exec))
        .map_err(|e| CliError::Data(e.to_string()))?;
    let mut out = String::new();
    let (mut entries, mut covered) = (0usize, 0usize);
    for (q, set) in qs.iter().zip(&sets) {
        let ents = set.entities();
        if q.gold_answers.iter().all(|g| ents.binary_search(g).is_ok()) {
            covered += 1;
        }
        for c in &set.candidates {
            let e = &kb.entities()[c.entity];
            let line = json!({
                "question_id": q.id,
                "entity": e.name,
                "etype": e.etype,
                "path": c.path.key,
                "context_size": c.context.len(),
                "gold": q.gold_answers.contains(&c.entity),
            });
            out.push_str(&line.to_string());
            out.push('\n');
            entries += 1;
        }
    }
    rec.output("candidates.jsonl", &out)?;
    let summary = json!({ "questions": qs.len(), "candidates": entries, "gold_covered": covered });
    rec.output("summary.json", &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    println!("{summary}");
    rec.finish()?;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<(), CliError> {
    let cfg = train_config(&a.hyper, a.common.seed)?;
    let dir = run_dir(&a.common.out, cfg.seed)?;
    let mut rec = Recorder::new("train", cfg.seed, &dir);
    if let Some(p) = &a.hyper.config {
        rec.input(p)?;
    }
    let (kb, ds) = load_data(&a.data, &mut rec)?;
    rec.manifest.config = serde_json::to_value(&cfg).expect("config serializes");
    let exec = execution(a.common.jobs);
    let out = par::with_threads(a.common.jobs, || train(&ds, &kb, &cfg, exec))?;
    let ckpt = dir.join("model.json");
    let extra = json!({
        "train_config": cfg,
        "best_epoch": out.best_epoch,
        "best_dev": out.best_dev,
    });
    out.model.save(&ckpt, extra)?;
    rec.note_output(&ckpt);
    rec.note_output(&ckpt.with_extension("bin"));
    rec.output("loss_log.csv", &loss_log_csv(&out.log))?;
    let dev = json!({ "best_epoch": out.best_epoch, "dev": out.best_dev, "skipped_questions": out.skipped_questions });
    rec.output("dev_metrics.json", &serde_json::to_string_pretty(&dev).expect("metrics serialize"))?;
    rec.output("config.json", &serde_json::to_string_pretty(&cfg).expect("config serializes"))?;
    for e in &out.log {
        eprintln!("epoch {:>3}  loss {:.6}  dev micro-F1 {:.4}", e.epoch, e.train_loss, e.dev_micro_f1);
    }
    println!("{dev}");
    rec.finish()?;
    Ok(())
}

fn load_model(path: &Path, rec: &mut Recorder) -> Result<(Model, serde_json::Value), CliError> {
    if !path.exists() {
        return Err(CliError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    let (model, extra) = Model::load(path)?;
    rec.input(path)?;
    rec.input(&path.with_extension("bin"))?;
    Ok((model, extra))
}

fn checkpoint_gamma(extra: &serde_json::Value) -> f64 {
    serde_json::from_value::<TrainConfig>(extra["train_config"].clone())
        .map(|c| c.inference_gamma())
        .unwrap_or_else(|_| TrainConfig::default().inference_gamma())
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let seed = a.common.seed.unwrap_or(0);
    let dir = run_dir(&a.common.out, seed)?;
    let mut rec = Recorder::new("eval", seed, &dir);
    let (model, extra) = load_model(&a.checkpoint, &mut rec)?;
    let (kb, ds) = load_data(&a.data, &mut rec)?;
    let gamma = a.gamma.unwrap_or_else(|| checkpoint_gamma(&extra));
    if gamma.is_nan() || gamma < 0.0 {
        return Err(CliError::Config("--gamma must be non-negative".into()));
    }
    rec.manifest.config = json!({ "split": a.split, "gamma": gamma, "model": model.config });
    let qs = ds.split(a.split);
    if qs.is_empty() {
        return Err(CliError::Data(format!("{} split is empty", a.split)));
    }
    let exec = execution(a.common.jobs);
    let (metrics, outcomes) = par::with_threads(a.common.jobs, || -> Result<_, CliError> {
        let cands = candidate_sets(&kb, &qs, exec).map_err(|e| CliError::Data(e.to_string()))?;
        Ok(evaluate(&model, &qs, &cands, gamma, exec)?)
    })?;
    rec.output("metrics.json", &serde_json::to_string_pretty(&metrics).expect("metrics serialize"))?;
    let table = format_table(&[(model.config.aspects.to_string(), metrics)]);
    rec.output("metrics.txt", &table)?;
    let mut preds = String::new();
    for o in &outcomes {
        let names = |ids: &std::collections::BTreeSet<usize>| -> Vec<String> {
            ids.iter().map(|&e| kb.entities()[e].name.clone()).collect()
        };
        let line = json!({ "question_id": o.id, "predicted": names(&o.predicted), "gold": names(&o.gold) });
        preds.push_str(&line.to_string());
        preds.push('\n');
    }
    rec.output("predictions.jsonl", &preds)?;
    print!("{table}");
    rec.finish()?;
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Result<(), CliError> {
    let cfg = train_config(&a.hyper, a.common.seed)?;
    let subsets: Vec<AspectSet> = a
        .subsets
        .split(',')
        .map(|s| s.parse().map_err(|e| CliError::Config(format!("--subsets: {e}"))))
        .collect::<Result<_, _>>()?;
    let dir = run_dir(&a.common.out, cfg.seed)?;
    let mut rec = Recorder::new("ablate", cfg.seed, &dir);
    if let Some(p) = &a.hyper.config {
        rec.input(p)?;
    }
    let (kb, ds) = load_data(&a.data, &mut rec)?;
    rec.manifest.config = json!({ "train": cfg, "subsets": subsets });
    let exec = execution(a.common.jobs);
    let rows = par::with_threads(a.common.jobs, || ablate(&ds, &kb, &cfg, &subsets, exec))?;
    let table = format_table(&rows.iter().map(|r| (r.aspects.to_string(), r.metrics)).collect::<Vec<_>>());
    rec.output("ablation.json", &serde_json::to_string_pretty(&rows).expect("rows serialize"))?;
    rec.output("ablation.txt", &table)?;
    print!("{table}");
    rec.finish()?;
    Ok(())
}

fn attn(a: AttnArgs) -> Result<(), CliError> {
    let seed = a.common.seed.unwrap_or(0);
    let dir = run_dir(&a.common.out, seed)?;
    let mut rec = Recorder::new("attn-export", seed, &dir);
    let (model, _) = load_model(&a.checkpoint, &mut rec)?;
    let (kb, ds) = load_data(&a.data, &mut rec)?;
    rec.manifest.config = json!({ "split": a.split });
    let qs = ds.split(a.split);
    let exec = execution(a.common.jobs);
    let csv = par::with_threads(a.common.jobs, || -> Result<String, CliError> {
        let cands = candidate_sets(&kb, &qs, exec).map_err(|e| CliError::Data(e.to_string()))?;
        Ok(attention_csv(&model, &kb, &qs, &cands)?)
    })?;
    let path = rec.output("attention.csv", &csv)?;
    println!("{}", path.display());
    rec.finish()?;
    Ok(())
}
