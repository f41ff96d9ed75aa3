use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use absorber_core::absorption::absorb_context_at;
use absorber_core::checkpoint::{load_checkpoint, read_header, save_checkpoint, Provenance};
use absorber_core::config::RunConfig;
use absorber_core::corpus::{build_pretraining_corpus, pretrain_toy_with, FALLBACK_TEXT};
use absorber_core::eval::{
    agreement_eval, cells_to_jsonl, latency_csv, measure_latency, run_ablation_grid, tabulate, Axis,
    EpisodeSource, Metric, RecallEpisodes,
};
use absorber_core::gradcheck::{run_suite, DEFAULT_STEP, DEFAULT_TOLERANCE, OPS};
use absorber_core::model::{init_model, lora_merge, ModelWeights};
use absorber_core::streaming::{absorber_generate_with, events_to_jsonl, CostMode, StreamOptions};
use absorber_core::tokenizer::{decode, encode, EOS};
use absorber_core::{Error, Result};

#[derive(Parser)]
#[command(name = "absorber", version, about = "Context absorption experiments on toy decoders")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir` from the config
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ModelSource {
    /// Checkpoint to load; overrides `checkpoint` from the config
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a toy model and write `model.absb`
    TrainToy {
        #[command(flatten)]
        common: Common,
        /// Overrides `train_steps`
        #[arg(long)]
        steps: Option<usize>,
    },
    /// One absorption run; prints the report as JSON
    Absorb {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelSource,
        /// Text file for the absorbed segment X
        #[arg(long)]
        x_file: Option<PathBuf>,
        /// Text file for the alignment segment Y
        #[arg(long)]
        y_file: Option<PathBuf>,
    },
    /// Streaming generation with periodic absorption
    Stream {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelSource,
        /// Prompt text file; overrides `stream.prompt_path`
        #[arg(long)]
        prompt_file: Option<PathBuf>,
        /// Overrides `stream.max_new_tokens`
        #[arg(long)]
        max_new_tokens: Option<usize>,
    },
    /// Per-token latency sweep over prefix lengths
    BenchLatency {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelSource,
        /// Comma-separated: standard,absorber
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<String>>,
        /// Comma-separated prefix lengths
        #[arg(long = "N", value_delimiter = ',')]
        prefix_lengths: Option<Vec<usize>>,
        /// Overrides `bench.trials`
        #[arg(long)]
        trials: Option<usize>,
        /// Overrides `bench.k_gen`
        #[arg(long)]
        k_gen: Option<usize>,
    },
    /// Ablation grid over the `[ablation]` axes
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelSource,
    },
    /// Finite-difference check of every differentiable op
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Random cases per op
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
    /// Print a checkpoint header
    Inspect {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file
        path: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::from(1)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn output_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    Ok(&cfg.output_dir)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn load_model(cfg: &RunConfig, source: &ModelSource) -> Result<ModelWeights> {
    match source.checkpoint.as_ref().or(cfg.checkpoint.as_ref()) {
        Some(p) => Ok(load_checkpoint(p)?.0),
        None => init_model(&cfg.model, cfg.seed),
    }
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data")
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::TrainToy { common, steps } => train_toy(&load_config(&common)?, steps),
        Command::Absorb { common, model, x_file, y_file } => {
            absorb(&load_config(&common)?, &model, x_file.as_deref(), y_file.as_deref())
        }
        Command::Stream { common, model, prompt_file, max_new_tokens } => {
            stream(&load_config(&common)?, &model, prompt_file, max_new_tokens)
        }
        Command::BenchLatency { common, model, modes, prefix_lengths, trials, k_gen } => {
            let mut cfg = load_config(&common)?;
            if let Some(modes) = modes {
                cfg.bench.modes = modes.iter().map(|m| parse_mode(m)).collect::<Result<_>>()?;
            }
            if let Some(lengths) = prefix_lengths {
                cfg.bench.prefix_lengths = lengths;
            }
            if let Some(t) = trials {
                cfg.bench.trials = t;
            }
            if let Some(k) = k_gen {
                cfg.bench.k_gen = k;
            }
            cfg.validate()?;
            bench_latency(&cfg, &model)
        }
        Command::Ablate { common, model } => ablate(&load_config(&common)?, &model),
        Command::Gradcheck { common, cases } => gradcheck(&load_config(&common)?, cases),
        Command::Inspect { common, path } => {
            load_config(&common)?;
            println!("{}", json(&read_header(&path)?));
            Ok(())
        }
    }
}

fn parse_mode(s: &str) -> Result<CostMode> {
    match s.trim() {
        "standard" => Ok(CostMode::Standard),
        "absorber" => Ok(CostMode::Absorber),
        other => Err(Error::Config(format!("unknown mode '{other}', expected standard or absorber"))),
    }
}

fn train_toy(cfg: &RunConfig, steps: Option<usize>) -> Result<()> {
    let steps = steps.unwrap_or(cfg.train_steps);
    let text = match &cfg.corpus_path {
        Some(p) => read(p)?,
        None => FALLBACK_TEXT.as_bytes().to_vec(),
    };
    let corpus = build_pretraining_corpus(Some(&text), &cfg.corpus, cfg.seed)?;
    let report = pretrain_toy_with(&cfg.model, &corpus, steps, cfg.seed, &cfg.pretrain, |step, loss| {
        if step % 100 == 0 {
            eprintln!("step {step} loss {loss:.4}");
        }
    })?;
    let out = output_dir(cfg)?;
    let path = out.join("model.absb");
    let provenance = Provenance { seed: cfg.seed, steps: steps as u64, note: None };
    save_checkpoint(&report.weights, &provenance, &path)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    write(&out.join("train_losses.csv"), &csv)?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": path,
            "steps": steps,
            "heldout_initial": report.heldout_initial,
            "heldout_final": report.heldout_final,
        })
    );
    Ok(())
}

fn absorb(cfg: &RunConfig, source: &ModelSource, x_file: Option<&Path>, y_file: Option<&Path>) -> Result<()> {
    let weights = load_model(cfg, source)?;
    let (x, y) = match (x_file, y_file) {
        (None, None) => {
            let episodes = RecallEpisodes { num_pairs: cfg.task.num_pairs };
            episodes.episode(cfg.absorption.n, cfg.absorption.m, cfg.seed)?
        }
        (x, y) => {
            let x = x.map(read).transpose()?.unwrap_or_default();
            let y = y.map(read).transpose()?.unwrap_or_default();
            (encode(&x), encode(&y))
        }
    };
    let mut acfg = cfg.absorption.clone();
    (acfg.n, acfg.m) = (x.len(), y.len());
    acfg.validate()?;
    let (adapters, report) = absorb_context_at(&weights, &x, &y, &acfg, cfg.seed, 0)?;
    let out = output_dir(cfg)?;
    write(&out.join("absorb_report.json"), &report.to_json())?;
    write(&out.join("absorb_losses.csv"), &report.to_csv())?;
    if !y.is_empty() {
        let absorbed = lora_merge(&weights, &adapters)?;
        let agreement = agreement_eval(&weights, &absorbed, &x, &y, cfg.task.holdout_len)?;
        write(&out.join("agreement.json"), &json(&agreement))?;
    }
    println!("{}", report.to_json());
    Ok(())
}

fn stream(cfg: &RunConfig, source: &ModelSource, prompt_file: Option<PathBuf>, max_new: Option<usize>) -> Result<()> {
    let weights = load_model(cfg, source)?;
    let prompt = match prompt_file.or_else(|| cfg.stream.prompt_path.clone()) {
        Some(p) => read(&p)?,
        None => Vec::new(),
    };
    let opts = StreamOptions {
        max_new_tokens: max_new.unwrap_or(cfg.stream.max_new_tokens),
        eos: cfg.stream.stop_at_eos.then_some(EOS),
    };
    let outcome = absorber_generate_with(&weights, &encode(&prompt), &cfg.absorption, opts, cfg.seed)?;
    let out = output_dir(cfg)?;
    write(&out.join("stream_events.jsonl"), &events_to_jsonl(&outcome.events))?;
    let text = String::from_utf8_lossy(&decode(&outcome.tokens)).into_owned();
    write(&out.join("stream_output.txt"), &text)?;
    println!("{text}");
    eprintln!(
        "rounds {} max_attention_width {} generated {}",
        outcome.rounds,
        outcome.max_attention_width,
        outcome.tokens.len()
    );
    Ok(())
}

fn bench_latency(cfg: &RunConfig, source: &ModelSource) -> Result<()> {
    let weights = load_model(cfg, source)?;
    let mut records = Vec::new();
    for &mode in &cfg.bench.modes {
        for &n in &cfg.bench.prefix_lengths {
            let r = measure_latency(&weights, mode, n, cfg.bench.k_gen, cfg.bench.trials, &cfg.absorption, cfg.seed)?;
            eprintln!("{}", r.csv_row());
            records.push(r);
        }
    }
    let csv = latency_csv(&records);
    write(&output_dir(cfg)?.join("latency.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn ablate(cfg: &RunConfig, source: &ModelSource) -> Result<()> {
    let weights = load_model(cfg, source)?;
    let episodes = RecallEpisodes { num_pairs: cfg.task.num_pairs };
    let cells = run_ablation_grid(
        &cfg.ablation,
        &cfg.absorption,
        &weights,
        &episodes,
        &cfg.seed_list(),
        cfg.task.holdout_len,
    )?;
    let out = output_dir(cfg)?;
    write(&out.join("ablation_cells.jsonl"), &cells_to_jsonl(&cells))?;

    let mut md = String::new();
    let n_by_m = tabulate(&cells, Axis::N, Axis::M, Metric::Agreement);
    write(&out.join("ablation_n_m.csv"), &n_by_m.to_csv())?;
    md.push_str("## Top-1 agreement (%) by n and m\n\n");
    md.push_str(&n_by_m.to_markdown());
    for (axis, name) in [
        (Axis::AlignmentTarget, "alignment"),
        (Axis::LossNorm, "loss_norm"),
        (Axis::PositionMode, "position_mode"),
    ] {
        for (metric, label) in [
            (Metric::Agreement, "top-1 agreement (%)"),
            (Metric::LogitDiff, "mean absolute logit difference"),
            (Metric::F1, "token F1 (%)"),
        ] {
            let t = tabulate(&cells, axis, Axis::M, metric);
            md.push_str(&format!("\n## {label} by {name} and m\n\n"));
            md.push_str(&t.to_markdown());
            let metric_name = serde_json::to_value(metric).expect("plain data");
            let file = format!("ablation_{name}_{}.csv", metric_name.as_str().expect("string"));
            write(&out.join(file), &t.to_csv())?;
        }
    }
    let failed = cells.iter().filter(|c| c.error.is_some()).count();
    write(&out.join("ablation.md"), &md)?;
    print!("{md}");
    if failed > 0 {
        eprintln!("{failed} of {} cells failed; see ablation_cells.jsonl", cells.len());
    }
    Ok(())
}

fn gradcheck(cfg: &RunConfig, cases: usize) -> Result<()> {
    let reports = run_suite(OPS, cases, cfg.seed, DEFAULT_STEP, DEFAULT_TOLERANCE)?;
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<18} cases {:>4} max_rel_err {:.3e} {}",
            r.op,
            r.cases,
            r.max_relative_error,
            if r.passed { "ok" } else { "FAIL" }
        );
        if !r.passed {
            failed.push(r.op.clone());
        }
    }
    let out = output_dir(cfg)?;
    write(&out.join("gradcheck.json"), &json(&reports))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!("gradient check failed for {}", failed.join(", "))))
    }
}
