//! Command-line front end: `train`, `generate`, `bench`, `probe`, `eval-ppl`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::checkpoint::load_checkpoint;
use crate::config::RunConfig;
use crate::corpus::Corpus;
use crate::decoder::{bench_markdown, generate, run_bench, write_bench_csv, DecodeMode};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::probe::{layer_perplexities, layerwise_predictions, summarize, write_probe_csv};
use crate::tokenizer::{decode, encode};
use crate::trainer::train_run;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "layerskip",
    version,
    about = "Early-exit training and self-speculative decoding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on a corpus (one document per line).
    Train(Common),
    /// Generate a continuation of `prompt`.
    Generate(Common),
    /// Run all decoding modes over a prompts file.
    Bench(Common),
    /// Record each layer's greedy prediction while generating.
    Probe(Common),
    /// Per-layer perplexity of a checkpoint on a corpus.
    EvalPpl(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// `key = value` config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable. Wins over the file.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    corpus: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    output_dir: Option<String>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    prompts: Option<String>,
    #[arg(long)]
    mode: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut flags = BTreeMap::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
            flags.insert(k.trim().to_string(), v.trim().to_string());
        }
        let named = [
            ("corpus", &self.corpus),
            ("checkpoint", &self.checkpoint),
            ("output_dir", &self.output_dir),
            ("prompt", &self.prompt),
            ("prompts", &self.prompts),
            ("mode", &self.mode),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                flags.insert(k.to_string(), v.clone());
            }
        }
        match &self.config {
            Some(path) => RunConfig::from_file(path, &flags),
            None => RunConfig::resolve(&BTreeMap::new(), &flags),
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Empty(_)
        | Error::TokenOutOfRange { .. }
        | Error::ContextOverflow { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    let (name, common) = match &cmd {
        Command::Train(c) => ("train", c),
        Command::Generate(c) => ("generate", c),
        Command::Bench(c) => ("bench", c),
        Command::Probe(c) => ("probe", c),
        Command::EvalPpl(c) => ("eval_ppl", c),
    };
    let cfg = common.resolve()?;
    match cmd {
        Command::Train(_) => cmd_train(&cfg, name),
        Command::Generate(_) => cmd_generate(&cfg, name),
        Command::Bench(_) => cmd_bench(&cfg, name),
        Command::Probe(_) => cmd_probe(&cfg, name),
        Command::EvalPpl(_) => cmd_eval_ppl(&cfg, name),
    }
}

/// Creates the output directory and writes the resolved config there.
fn prepare_output(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    let echo = cfg.to_kv();
    std::fs::write(dir.join(format!("{name}_config.txt")), &echo)?;
    eprint!("{echo}");
    Ok(dir)
}

fn load_params(cfg: &RunConfig) -> Result<ModelParams<f32>> {
    Ok(load_checkpoint(cfg.require_file("checkpoint", &cfg.checkpoint)?)?.params)
}

fn prompt_tokens(cfg: &RunConfig) -> Result<Vec<u32>> {
    let text = cfg
        .prompt
        .as_deref()
        .ok_or_else(|| Error::Config("prompt is required".into()))?;
    let tokens = encode(text);
    if tokens.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    Ok(tokens)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_train(cfg: &RunConfig, name: &str) -> Result<()> {
    let corpus_path = cfg.require_file("corpus", &cfg.corpus)?;
    let heldout_path = match &cfg.heldout {
        Some(_) => Some(cfg.require_file("heldout", &cfg.heldout)?),
        None => None,
    };
    let model = cfg.model()?;
    let train = cfg.train()?;
    let dir = prepare_output(cfg, name)?;
    let corpus = Corpus::load(corpus_path)?;
    let (train_set, heldout) = match heldout_path {
        Some(p) => (corpus, Some(Corpus::load(p)?)),
        None if cfg.heldout_fraction > 0.0 => {
            let (a, b) = corpus.split(cfg.heldout_fraction);
            (a, Some(b))
        }
        None => (corpus, None),
    };
    let heldout = heldout.filter(|h| h.len() > train.context_len);
    let (_, log) = train_run(
        &train_set.tokens,
        heldout.as_ref().map(|h| h.tokens.as_slice()),
        model,
        &train,
        Some(&dir),
    )?;
    let last = log.steps.last().map(|s| s.loss).unwrap_or(f64::NAN);
    println!("trained {} steps, final loss {last:.4}", log.steps.len());
    for (l, p) in log.final_perplexities().iter().enumerate() {
        println!("layer {l:>3}  perplexity {p:.4}");
    }
    println!("checkpoint {}", dir.join("final.lskp").display());
    Ok(())
}

fn cmd_generate(cfg: &RunConfig, name: &str) -> Result<()> {
    let params = load_params(cfg)?;
    let dc = cfg.decode(&params.config)?;
    let prompt = prompt_tokens(cfg)?;
    let dir = prepare_output(cfg, name)?;
    let (tokens, report) = generate(&params, &prompt, &dc)?;
    let text = decode(&tokens)?;
    println!("{text}");
    write_json(
        &dir.join("generate_report.json"),
        &json!({ "prompt": cfg.prompt, "tokens": tokens, "text": text, "report": report }),
    )
}

fn cmd_bench(cfg: &RunConfig, name: &str) -> Result<()> {
    let params = load_params(cfg)?;
    let dc = cfg.decode(&params.config)?;
    let dc = crate::decoder::DecodeConfig {
        mode: DecodeMode::SelfSpeculative,
        ..dc
    };
    dc.validate(&params.config)?;
    let path = cfg.require_file("prompts", &cfg.prompts)?;
    let prompts: Vec<Vec<u32>> = std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(encode)
        .collect();
    if prompts.is_empty() {
        return Err(Error::Empty("prompts file"));
    }
    let dir = prepare_output(cfg, name)?;
    let rows = run_bench(&params, &prompts, &dc)?;
    write_bench_csv(&rows, &dir.join("bench.csv"))?;
    let md = bench_markdown(&rows);
    std::fs::write(dir.join("bench.md"), &md)?;
    print!("{md}");
    Ok(())
}

fn cmd_probe(cfg: &RunConfig, name: &str) -> Result<()> {
    let params = load_params(cfg)?;
    let prompt = prompt_tokens(cfg)?;
    if cfg.probe_tokens < 1 {
        return Err(Error::Config("probe_tokens must be at least 1".into()));
    }
    let dir = prepare_output(cfg, name)?;
    let preds = layerwise_predictions(&params, &prompt, cfg.probe_tokens)?;
    write_probe_csv(&preds, BufWriter::new(File::create(dir.join("probe.csv"))?))?;
    let summary = summarize(&preds, params.config.n_layers)?;
    write_json(
        &dir.join("probe_summary.json"),
        &serde_json::to_value(&summary)?,
    )?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_eval_ppl(cfg: &RunConfig, name: &str) -> Result<()> {
    let params = load_params(cfg)?;
    let path = match &cfg.heldout {
        Some(_) => cfg.require_file("heldout", &cfg.heldout)?,
        None => cfg.require_file("corpus", &cfg.corpus)?,
    };
    let ctx = cfg.context_len.min(params.config.max_context);
    let dir = prepare_output(cfg, name)?;
    let corpus = Corpus::load(path)?;
    let ppl = layer_perplexities(&params, &corpus.tokens, ctx)?;
    for (l, p) in ppl.iter().enumerate() {
        println!("layer {l:>3}  perplexity {p:.4}");
    }
    write_json(
        &dir.join("eval_ppl.json"),
        &json!({ "context_len": ctx, "perplexity": ppl }),
    )
}
