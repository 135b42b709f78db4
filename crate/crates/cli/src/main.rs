//! `imb`: reproducible experiments for long-tail text classification.
//!
//! Every subcommand reads an optional JSON config, applies `key=value`
//! overrides, writes its artifacts plus a manifest (resolved config,
//! seed, input/output hashes) into the output directory, and exits with
//! 0 on success, 1 on usage errors, 2 on data errors, 3 on numeric
//! errors.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use imb_core::checkpoint::Checkpoint;
use imb_core::data::{
    inject_label_noise, length_stats, load_jsonl, save_jsonl, scan_labels, synth_generate,
    LabelMap, StatsConfig, SynthConfig,
};
use imb_core::encoder::AttentionMode;
use imb_core::error::{Error, Result};
use imb_core::gradcheck::full_model_grad_check;
use imb_core::head::HeadConfig;
use imb_core::model::{Model, ModelConfig};
use imb_core::pooling::PoolingMode;
use imb_core::rerank::{pipeline_eval, Backend, BackendConfig};
use imb_core::rng::RngState;
use imb_core::trainer::{compare_arms, evaluate, train, TrainConfig};

use manifest::Manifest;

#[derive(Parser)]
#[command(name = "imb", version, about = "Long-tail text classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts and the run manifest.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Additional `key=value` config overrides (dotted paths allowed).
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Class distribution and clipped length histograms of a dataset.
    Stats(Common),
    /// Generate a synthetic long-tail dataset with a label map.
    Synth(Common),
    /// Fine-tune a classifier and write checkpoint + history.
    Train(Common),
    /// Evaluate a checkpoint on a dataset.
    Eval(Common),
    /// Finite-difference verification of every model gradient.
    Gradcheck(Common),
    /// Fine-tuned bidirectional arm vs frozen causal feature arm.
    Compare(Common),
    /// Top-K candidate generation plus re-ranking backend evaluation.
    Rerank(Common),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own exit code for usage errors is 2; this tool
            // reserves 2 for data errors.
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match &cli.command {
        Command::Stats(c) => cmd_stats(c),
        Command::Synth(c) => cmd_synth(c),
        Command::Train(c) => cmd_train(c),
        Command::Eval(c) => cmd_eval(c),
        Command::Gradcheck(c) => cmd_gradcheck(c),
        Command::Compare(c) => cmd_compare(c),
        Command::Rerank(c) => cmd_rerank(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Load the JSON config, apply --seed and key=value overrides, and
/// deserialize into the command's config type.
fn resolve_config<C: serde::de::DeserializeOwned>(
    common: &Common,
) -> Result<(C, serde_json::Value)> {
    let mut value = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Data(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Parse(format!("config {}: {e}", path.display())))?
        }
        None => json!({}),
    };
    if let Some(seed) = common.seed {
        set_path(&mut value, "seed", json!(seed))?;
    }
    for item in &common.overrides {
        let (key, raw) = item.split_once('=').ok_or_else(|| {
            Error::Config(format!("override '{item}' is not of the form key=value"))
        })?;
        let parsed: serde_json::Value =
            serde_json::from_str(raw).unwrap_or_else(|_| json!(raw));
        set_path(&mut value, key, parsed)?;
    }
    let config: C = serde_json::from_value(value.clone())
        .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    Ok((config, value))
}

fn set_path(root: &mut serde_json::Value, dotted: &str, new: serde_json::Value) -> Result<()> {
    let mut cursor = root;
    let parts: Vec<&str> = dotted.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        if !cursor.is_object() {
            return Err(Error::Config(format!("cannot descend into '{part}'")));
        }
        cursor = cursor
            .as_object_mut()
            .unwrap()
            .entry(part.to_string())
            .or_insert_with(|| json!({}));
    }
    let last = parts.last().unwrap();
    cursor
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("cannot set '{dotted}'")))?
        .insert(last.to_string(), new);
    Ok(())
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Parse(format!("serialization failure: {e}")))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn load_examples(
    data: &Path,
    labels: Option<&Path>,
    extra_scan: Option<&Path>,
) -> Result<(Vec<imb_core::data::Example>, LabelMap)> {
    let label_map = match labels {
        Some(path) => LabelMap::load(path)?,
        None => {
            let mut names = scan_labels(data)?;
            if let Some(extra) = extra_scan {
                names.extend(scan_labels(extra)?);
            }
            LabelMap::from_labels(names)
        }
    };
    let examples = load_jsonl(data, &label_map)?;
    Ok((examples, label_map))
}

#[derive(serde::Deserialize, Serialize)]
struct StatsCmdConfig {
    data: PathBuf,
    #[serde(default)]
    labels: Option<PathBuf>,
    #[serde(default = "default_clip")]
    clip_percentile: f64,
    #[serde(default = "default_word_bin")]
    word_bin: usize,
    #[serde(default = "default_char_bin")]
    char_bin: usize,
}

fn default_clip() -> f64 {
    99.5
}
fn default_word_bin() -> usize {
    1
}
fn default_char_bin() -> usize {
    5
}

fn cmd_stats(common: &Common) -> Result<()> {
    let (config, resolved) = resolve_config::<StatsCmdConfig>(common)?;
    let (examples, label_map) = load_examples(&config.data, config.labels.as_deref(), None)?;
    if examples.is_empty() {
        return Err(Error::Data(format!(
            "dataset {} holds no examples",
            config.data.display()
        )));
    }
    let stats = length_stats(
        &examples,
        label_map.len(),
        &StatsConfig {
            clip_percentile: config.clip_percentile,
            word_bin: config.word_bin,
            char_bin: config.char_bin,
        },
    )?;
    std::fs::create_dir_all(&common.out)?;
    let out = common.out.join("stats.json");
    write_json(&out, &stats)?;
    Manifest::new("stats", resolved, None)
        .input(&config.data)?
        .output(&out)?
        .write(&common.out)?;
    let max = stats.class_counts.iter().max().copied().unwrap_or(0);
    let min = stats.class_counts.iter().min().copied().unwrap_or(0);
    println!(
        "stats: {} examples, {} classes, counts {min}..{max}, wrote {}",
        examples.len(),
        label_map.len(),
        out.display()
    );
    Ok(())
}

#[derive(serde::Deserialize, Serialize)]
struct SynthCmdConfig {
    #[serde(flatten)]
    synth: SynthConfig,
    /// Optional label-noise rate applied with the sibling confusion map.
    #[serde(default)]
    noise_rate: f64,
}

fn cmd_synth(common: &Common) -> Result<()> {
    let (config, resolved) = resolve_config::<SynthCmdConfig>(common)?;
    let dataset = synth_generate(&config.synth)?;
    let (examples, flips) = if config.noise_rate > 0.0 {
        let mut rng = RngState::new(config.synth.seed ^ 0x6e6f6973);
        inject_label_noise(dataset.examples, config.noise_rate, &dataset.confusion, &mut rng)?
    } else {
        (dataset.examples, 0)
    };
    std::fs::create_dir_all(&common.out)?;
    let data_path = common.out.join("data.jsonl");
    let labels_path = common.out.join("labels.json");
    let confusion_path = common.out.join("confusion.json");
    save_jsonl(&data_path, &examples, &dataset.label_map)?;
    dataset.label_map.save(&labels_path)?;
    write_json(&confusion_path, &dataset.confusion)?;
    Manifest::new("synth", resolved, Some(config.synth.seed))
        .output(&data_path)?
        .output(&labels_path)?
        .output(&confusion_path)?
        .write(&common.out)?;
    println!(
        "synth: {} examples over {} classes ({flips} labels flipped), wrote {}",
        examples.len(),
        config.synth.num_classes,
        data_path.display()
    );
    Ok(())
}

#[derive(serde::Deserialize, Serialize)]
struct TrainCmdConfig {
    data: PathBuf,
    dev: PathBuf,
    #[serde(default)]
    labels: Option<PathBuf>,
    #[serde(flatten)]
    train: TrainConfig,
}

fn cmd_train(common: &Common) -> Result<()> {
    let (config, resolved) = resolve_config::<TrainCmdConfig>(common)?;
    let (train_set, label_map) =
        load_examples(&config.data, config.labels.as_deref(), Some(&config.dev))?;
    let dev_set = load_jsonl(&config.dev, &label_map)?;
    let outcome = train::<f64>(&config.train, &train_set, &dev_set, &label_map)?;

    std::fs::create_dir_all(&common.out)?;
    let ckpt_path = common.out.join("checkpoint.imb");
    let history_path = common.out.join("history.jsonl");
    outcome.checkpoint.save(&ckpt_path)?;
    let mut history_text = String::new();
    for epoch in &outcome.history {
        history_text.push_str(&serde_json::to_string(epoch).unwrap());
        history_text.push('\n');
    }
    std::fs::write(&history_path, history_text)?;
    Manifest::new("train", resolved, Some(config.train.seed))
        .input(&config.data)?
        .input(&config.dev)?
        .output(&ckpt_path)?
        .output(&history_path)?
        .write(&common.out)?;
    let best = outcome
        .history
        .iter()
        .map(|e| e.dev_macro_f1)
        .fold(f64::NAN, f64::max);
    println!(
        "train: {} epochs, best dev macro-F1 {best:.4}, wrote {}",
        outcome.history.len(),
        ckpt_path.display()
    );
    Ok(())
}

#[derive(serde::Deserialize, Serialize)]
struct EvalCmdConfig {
    checkpoint: PathBuf,
    data: PathBuf,
}

fn cmd_eval(common: &Common) -> Result<()> {
    let (config, resolved) = resolve_config::<EvalCmdConfig>(common)?;
    let ckpt: Checkpoint<f64> = Checkpoint::load(&config.checkpoint)?;
    let examples = load_jsonl(&config.data, &ckpt.label_map)?;
    let report = evaluate(&ckpt, &examples)?;
    std::fs::create_dir_all(&common.out)?;
    let out = common.out.join("metrics.json");
    write_json(&out, &report)?;
    Manifest::new("eval", resolved, None)
        .input(&config.checkpoint)?
        .input(&config.data)?
        .output(&out)?
        .write(&common.out)?;
    println!(
        "eval: accuracy {:.4}, macro-F1 {:.4}, wrote {}",
        report.accuracy,
        report.macro_f1,
        out.display()
    );
    Ok(())
}

#[derive(serde::Deserialize, Serialize)]
struct GradcheckCmdConfig {
    #[serde(default = "d_gc_vocab")]
    vocab_size: usize,
    #[serde(default = "d_gc_dmodel")]
    d_model: usize,
    #[serde(default = "d_gc_heads")]
    num_heads: usize,
    #[serde(default = "d_gc_layers")]
    num_layers: usize,
    #[serde(default)]
    ffn_dim: Option<usize>,
    #[serde(default = "d_gc_classes")]
    num_classes: usize,
    #[serde(default = "d_gc_pooling")]
    pooling: PoolingMode,
    #[serde(default = "d_gc_eps")]
    eps: f64,
    #[serde(default = "d_gc_tol")]
    tolerance: f64,
    #[serde(default = "d_gc_std")]
    init_std: f64,
    #[serde(default)]
    seed: u64,
}

fn d_gc_vocab() -> usize {
    10
}
fn d_gc_dmodel() -> usize {
    8
}
fn d_gc_heads() -> usize {
    2
}
fn d_gc_layers() -> usize {
    2
}
fn d_gc_classes() -> usize {
    3
}
fn d_gc_pooling() -> PoolingMode {
    PoolingMode::Hybrid
}
fn d_gc_eps() -> f64 {
    1e-5
}
fn d_gc_tol() -> f64 {
    1e-4
}
fn d_gc_std() -> f64 {
    0.5
}

fn cmd_gradcheck(common: &Common) -> Result<()> {
    let (config, resolved) = resolve_config::<GradcheckCmdConfig>(common)?;
    let model_config = ModelConfig {
        encoder: imb_core::encoder::EncoderConfig {
            vocab_size: config.vocab_size,
            d_model: config.d_model,
            num_heads: config.num_heads,
            num_layers: config.num_layers,
            ffn_dim: config.ffn_dim,
            max_len: config.vocab_size.max(2),
            attention_mode: AttentionMode::Bidirectional,
        },
        pooling: config.pooling,
        head: HeadConfig::with_classes(config.num_classes),
        feature_extraction: None,
    };
    let model: Model<f64> = Model::init_with_std(model_config, config.seed, config.init_std)?;
    let started = std::time::Instant::now();
    let report = full_model_grad_check(&model, config.eps)?;
    let elapsed = started.elapsed().as_secs_f64();
    let passed = report.passes(config.tolerance);

    std::fs::create_dir_all(&common.out)?;
    let out = common.out.join("gradcheck.json");
    let per_tensor: serde_json::Map<String, serde_json::Value> = report
        .per_tensor
        .iter()
        .map(|(n, e)| (n.clone(), json!(e)))
        .collect();
    write_json(
        &out,
        &json!({
            "max_rel_err": report.max_rel_err,
            "tolerance": config.tolerance,
            "eps": config.eps,
            "passed": passed,
            "seconds": elapsed,
            "per_tensor": per_tensor,
        }),
    )?;
    Manifest::new("gradcheck", resolved, Some(config.seed))
        .output(&out)?
        .write(&common.out)?;
    for (name, err) in &report.per_tensor {
        println!("gradcheck: {name}: {err:.3e}");
    }
    println!(
        "gradcheck: max relative error {:.3e} over {} tensors in {elapsed:.2}s -> {}",
        report.max_rel_err,
        report.per_tensor.len(),
        if passed { "PASS" } else { "FAIL" }
    );
    if !passed {
        return Err(Error::Numeric(format!(
            "gradient check failed: {:.3e} >= {:.3e}",
            report.max_rel_err, config.tolerance
        )));
    }
    Ok(())
}

#[derive(serde::Deserialize, Serialize)]
struct CompareCmdConfig {
    data: PathBuf,
    dev: PathBuf,
    #[serde(default)]
    labels: Option<PathBuf>,
    /// Seeds for the multi-run sign test; defaults to the train seed.
    #[serde(default)]
    seeds: Option<Vec<u64>>,
    #[serde(flatten)]
    train: TrainConfig,
}

fn cmd_compare(common: &Common) -> Result<()> {
    let (config, resolved) = resolve_config::<CompareCmdConfig>(common)?;
    let (train_set, label_map) =
        load_examples(&config.data, config.labels.as_deref(), Some(&config.dev))?;
    let dev_set = load_jsonl(&config.dev, &label_map)?;
    let seeds = config.seeds.clone().unwrap_or(vec![config.train.seed]);
    let mut runs = Vec::new();
    let mut fine_tuned_wins = 0usize;
    for &seed in &seeds {
        let mut base = config.train.clone();
        base.seed = seed;
        let report = compare_arms::<f64>(&base, &train_set, &dev_set, &label_map)?;
        if report.delta_macro_f1 > 0.0 {
            fine_tuned_wins += 1;
        }
        println!(
            "compare[seed {seed}]: fine-tuned {:.4} vs frozen-causal {:.4} (delta {:+.4})",
            report.fine_tuned.macro_f1, report.frozen_causal.macro_f1, report.delta_macro_f1
        );
        runs.push(json!({ "seed": seed, "report": report }));
    }
    std::fs::create_dir_all(&common.out)?;
    let out = common.out.join("compare.json");
    write_json(
        &out,
        &json!({
            "runs": runs,
            "fine_tuned_wins": fine_tuned_wins,
            "total_runs": seeds.len(),
        }),
    )?;
    Manifest::new("compare", resolved, Some(config.train.seed))
        .input(&config.data)?
        .input(&config.dev)?
        .output(&out)?
        .write(&common.out)?;
    println!(
        "compare: fine-tuned arm won {fine_tuned_wins} of {} runs, wrote {}",
        seeds.len(),
        out.display()
    );
    Ok(())
}

#[derive(serde::Deserialize, Serialize)]
struct RerankCmdConfig {
    checkpoint: PathBuf,
    data: PathBuf,
    backend: BackendConfig,
    #[serde(default = "d_k")]
    k: usize,
}

fn d_k() -> usize {
    15
}

fn cmd_rerank(common: &Common) -> Result<()> {
    let (config, resolved) = resolve_config::<RerankCmdConfig>(common)?;
    let ckpt: Checkpoint<f64> = Checkpoint::load(&config.checkpoint)?;
    let examples = load_jsonl(&config.data, &ckpt.label_map)?;
    let mut backend = Backend::from_config(&config.backend)?;
    let report = pipeline_eval(&ckpt, &mut backend, &examples, config.k)?;
    std::fs::create_dir_all(&common.out)?;
    let out = common.out.join("pipeline.json");
    write_json(&out, &report)?;
    Manifest::new("rerank", resolved, None)
        .input(&config.checkpoint)?
        .input(&config.data)?
        .output(&out)?
        .write(&common.out)?;
    println!(
        "rerank: classifier macro-F1 {:.4}, reranked {:.4} (delta {:+.4}; matched {}, invalid {}, timeout {}), wrote {}",
        report.classifier.macro_f1,
        report.reranked.macro_f1,
        report.delta_macro_f1,
        report.resolution_counts.matched,
        report.resolution_counts.fallback_invalid,
        report.resolution_counts.fallback_timeout,
        out.display()
    );
    Ok(())
}
