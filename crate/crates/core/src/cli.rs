//! Command-line surface: argument definitions, config files, run manifests
//! and the subcommand implementations behind the `imoe` binary.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interaction::MaskStrategy;
use crate::interpret::{build_reports, write_reports};
use crate::model::{Activation, FusionKind, InteractionMoe};
use crate::pidoracle::{dominant, pid_decompose, DiscreteJoint};
use crate::synthdata::{format_f64, generate, read_dataset, write_dataset, Dataset, GenKind, GenSpec, TaskKind};
use crate::trainer::{
    compare_mask_strategies, evaluate, measure_overhead, run_ablations, summarize, train_baseline, train_run, write_epoch_log, Ablation,
    Baseline, Metrics, MetricSummary, Splits, TrainConfig,
};

/// Relative `--out` paths are resolved against this directory when set.
pub const OUTPUT_ROOT_ENV: &str = "IMOE_OUTPUT_ROOT";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Parser, Debug)]
#[command(name = "imoe", version, about = "Interaction-aware mixture of experts for multimodal data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with a known interaction structure.
    Gen(GenArgs),
    /// Train one model per seed and write checkpoints, logs and metrics.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Write local and global interpretation reports for a checkpoint.
    Interpret(InterpretArgs),
    /// Decompose a discrete joint distribution into information components.
    Pid(PidArgs),
    /// Train the full model and every ablation variant.
    Ablate(AblateArgs),
    /// Measure training and inference overhead and compare masking strategies.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Unique,
    Redundant,
    SynergyXor,
    Mixture,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// One-based modality carrying the label for `--kind unique`.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, value_delimiter = ',', default_value = "8,8")]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 0.2)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "multiclass")]
    pub task: TaskKind,
    /// Mixture weights in the order uniqueness-1..n, synergy, redundancy.
    #[arg(long, value_delimiter = ',')]
    pub proportions: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

macro_rules! hyper_args {
    ($($(#[$meta:meta])* $field:ident : $ty:ty),* $(,)?) => {
        /// Training hyperparameters; each flag overrides the config file.
        #[derive(Args, Debug, Default, Clone)]
        pub struct HyperArgs {
            $(
                $(#[$meta])*
                #[arg(long = stringify!($field))]
                pub $field: Option<$ty>,
            )*
        }

        impl HyperArgs {
            pub fn apply(&self, config: &mut TrainConfig) {
                $(
                    if let Some(v) = &self.$field {
                        config.$field = v.clone();
                    }
                )*
            }
        }

        /// Sets one `TrainConfig` field from its textual value.
        pub fn set_config_key(config: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
            match key {
                $(stringify!($field) => config.$field = parse_value::<$ty>(key, value)?,)*
                other => return Err(Error::Config(format!("unknown config key '{other}'"))),
            }
            Ok(())
        }
    };
}

hyper_args! {
    lr: f64,
    train_epochs: usize,
    batch_size: usize,
    /// Weight of the mean interaction loss.
    interaction_loss_weight: f64,
    temperature_rw: f64,
    hidden_dim_rw: usize,
    num_layer_rw: usize,
    hidden_dim: usize,
    num_layers_enc: usize,
    num_layers_fus: usize,
    num_layers_pred: usize,
    num_heads: usize,
    /// mlp or attention.
    fusion: FusionKind,
    /// relu, tanh or sigmoid.
    activation: Activation,
    /// random, mean or zero.
    mask_strategy: MaskStrategy,
    triplet_margin: f64,
    synergy_margin: f64,
    normalize_triplet: bool,
    single_expert: bool,
    seed: u64,
    /// none, no-interaction, latent-contrastive, simple-weight, less-forward or synergy-redundancy.
    ablation: Ablation,
    /// none, early-fusion or late-fusion.
    baseline: Baseline,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e| Error::Config(format!("invalid value '{value}' for {key}: {e}")))
}

/// Options shared by every command that trains.
#[derive(Args, Debug, Default, Clone)]
pub struct RunArgs {
    /// key = value file; '#' starts a comment.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training seeds; defaults to `--seed`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Seed of the train/validation/test split.
    #[arg(long = "split_seed")]
    pub split_seed: Option<u64>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

/// Fully merged settings of a training command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRun {
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
    pub split_seed: u64,
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!("config line {}: expected key = value", i + 1)));
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(Error::Config(format!("config line {}: empty key or value", i + 1)));
        }
        entries.push((key.to_string(), value.to_string()));
    }
    Ok(entries)
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

impl RunArgs {
    /// Defaults, then the config file, then command-line flags.
    pub fn resolve(&self) -> Result<ResolvedRun> {
        let mut config = TrainConfig::default();
        let mut seeds = None;
        let mut split_seed = 0;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
            for (key, value) in parse_config_text(&text)? {
                match key.as_str() {
                    "seeds" => seeds = Some(parse_list(&key, &value)?),
                    "split_seed" => split_seed = parse_value(&key, &value)?,
                    _ => set_config_key(&mut config, &key, &value)?,
                }
            }
        }
        self.hyper.apply(&mut config);
        if let Some(s) = &self.seeds {
            seeds = Some(s.clone());
        }
        if let Some(s) = self.split_seed {
            split_seed = s;
        }
        let seeds = seeds.unwrap_or_else(|| vec![config.seed]);
        if seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        config.validate()?;
        Ok(ResolvedRun { config, seeds, split_seed })
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Defaults to the split seed stored in the checkpoint.
    #[arg(long = "split_seed")]
    pub split_seed: Option<u64>,
    /// Directory for `metrics.json`; metrics are always printed.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct InterpretArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long = "split_seed")]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct PidArgs {
    /// CSV with columns x1,x2,t,p.
    #[arg(long)]
    pub joint: PathBuf,
    /// Also write the result as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    /// `all` or a comma-separated list of variant names.
    #[arg(long, default_value = "all")]
    pub variants: String,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    /// Only measure overhead.
    #[arg(long = "skip_masking")]
    pub skip_masking: bool,
    #[command(flatten)]
    pub run: RunArgs,
}

/// Provenance record written into every output directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub output: PathBuf,
    pub started_unix_s: f64,
    pub finished_unix_s: Option<f64>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String], config: serde_json::Value, seeds: Vec<u64>, inputs: BTreeMap<String, PathBuf>, output: &Path) -> Self {
        Self {
            artifact: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv: argv.to_vec(),
            config,
            seeds,
            inputs,
            output: output.to_path_buf(),
            started_unix_s: now(),
            finished_unix_s: None,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(RUN_MANIFEST_FILE), self)
    }

    pub fn finish(&mut self, dir: &Path) -> Result<()> {
        self.finished_unix_s = Some(now());
        self.write(dir)
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Applies the output-root override to relative paths.
pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Creates `dir`, refusing a non-empty existing directory unless `force`.
pub fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = !dir.is_dir() || std::fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn gen_kind(args: &GenArgs) -> Result<GenKind> {
    Ok(match args.kind {
        KindArg::Unique => {
            if args.k == 0 || args.k > args.dims.len() {
                return Err(Error::Config(format!("--k must be in 1..={}, got {}", args.dims.len(), args.k)));
            }
            GenKind::Unique(args.k - 1)
        }
        KindArg::Redundant => GenKind::Redundant,
        KindArg::SynergyXor => GenKind::SynergyXor,
        KindArg::Mixture => {
            let p = args.proportions.clone().ok_or_else(|| Error::Config("--kind mixture needs --proportions".into()))?;
            GenKind::Mixture(p)
        }
    })
}

fn run_gen(args: &GenArgs, argv: &[String]) -> Result<()> {
    if args.proportions.is_some() && args.kind != KindArg::Mixture {
        return Err(Error::Config("--proportions only applies to --kind mixture".into()));
    }
    let spec = GenSpec { task: args.task, ..GenSpec::new(gen_kind(args)?, args.n, args.dims.clone(), args.sigma, args.seed) };
    spec.validate()?;
    let out = resolve_output(&args.out);
    prepare_output(&out, args.force)?;
    let mut manifest = RunManifest::new("gen", argv, serde_json::to_value(&spec)?, vec![args.seed], BTreeMap::new(), &out);
    manifest.write(&out)?;
    let dataset = generate(&spec)?;
    write_dataset(&dataset, &out)?;
    manifest.finish(&out)?;
    println!("wrote {} samples of '{}' to {}", dataset.len(), dataset.name, out.display());
    Ok(())
}

/// Per-seed result file of `train`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub best_epoch: usize,
    /// Final-epoch model.
    pub test: Metrics,
    /// Best-validation model.
    pub test_best: Metrics,
    pub val: Metrics,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seeds: Vec<u64>,
    pub metric: String,
    pub test: MetricSummary,
    pub test_best: MetricSummary,
}

fn run_config_value(run: &ResolvedRun, seed: u64) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(ResolvedRun { config: TrainConfig { seed, ..run.config.clone() }, seeds: vec![seed], split_seed: run.split_seed })?)
}

fn inputs(pairs: &[(&str, &Path)]) -> BTreeMap<String, PathBuf> {
    pairs.iter().map(|(k, p)| (k.to_string(), p.to_path_buf())).collect()
}

fn load_splits(data: &Path, split_seed: u64) -> Result<(Dataset, Splits)> {
    let dataset = read_dataset(data)?;
    let splits = Splits::new(&dataset, split_seed)?;
    Ok((dataset, splits))
}

fn run_train(args: &TrainArgs, argv: &[String]) -> Result<()> {
    let run = args.run.resolve()?;
    let (dataset, splits) = load_splits(&args.data, run.split_seed)?;
    run.config.preflight(&dataset)?;
    let out = resolve_output(&args.out);
    prepare_output(&out, args.force)?;
    let mut manifest = RunManifest::new("train", argv, serde_json::to_value(&run)?, run.seeds.clone(), inputs(&[("data", &args.data)]), &out);
    manifest.write(&out)?;

    let mut finals = Vec::new();
    let mut bests = Vec::new();
    for &seed in &run.seeds {
        let cfg = TrainConfig { seed, ..run.config.clone() };
        let dir = out.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&dir)?;
        let metrics = if cfg.baseline == Baseline::None {
            let outcome = train_run(&cfg, &splits.train, Some(&splits.val))?;
            write_epoch_log(&dir.join("epochs.csv"), &outcome.log, outcome.model.num_experts())?;
            outcome.model.save_checkpoint(&dir.join("checkpoint.json"), Some(run_config_value(&run, seed)?))?;
            outcome.best_model.save_checkpoint(&dir.join("checkpoint_best.json"), Some(run_config_value(&run, seed)?))?;
            SeedMetrics {
                seed,
                best_epoch: outcome.best_epoch,
                test: evaluate(&outcome.model, &splits.test)?,
                test_best: evaluate(&outcome.best_model, &splits.test)?,
                val: evaluate(&outcome.model, &splits.val)?,
            }
        } else {
            let outcome = train_baseline(&cfg, &splits.train, Some(&splits.val))?;
            write_epoch_log(&dir.join("epochs.csv"), &outcome.log, 0)?;
            SeedMetrics {
                seed,
                best_epoch: outcome.best_epoch,
                test: evaluate(&outcome.model, &splits.test)?,
                test_best: evaluate(&outcome.best_model, &splits.test)?,
                val: evaluate(&outcome.model, &splits.val)?,
            }
        };
        write_json(&dir.join("metrics.json"), &metrics)?;
        println!("seed {seed}: test {} {:.4}", metrics.test.headline_name(), metrics.test.headline());
        finals.push(metrics.test.clone());
        bests.push(metrics.test_best.clone());
    }
    let summary = TrainSummary {
        seeds: run.seeds.clone(),
        metric: finals[0].headline_name().into(),
        test: summarize(&finals)?,
        test_best: summarize(&bests)?,
    };
    write_json(&out.join("summary.json"), &summary)?;
    if let Some(s) = headline_summary(&summary.test, &summary.metric) {
        println!("test {}: {:.4} ± {:.4} over {} seed(s)", summary.metric, s.0, s.1, run.seeds.len());
    }
    manifest.finish(&out)
}

fn headline_summary(summary: &MetricSummary, metric: &str) -> Option<(f64, f64)> {
    let m = if metric == "mse" { summary.mse } else { summary.accuracy }?;
    Some((m.mean, m.std))
}

/// Reads a checkpoint and picks the requested split of `data`.
fn checkpoint_split(checkpoint: &Path, data: &Path, split: SplitArg, split_seed: Option<u64>) -> Result<(InteractionMoe, Dataset, u64)> {
    let (model, run) = InteractionMoe::load_checkpoint(checkpoint)?;
    let stored = run.and_then(|v| serde_json::from_value::<ResolvedRun>(v).ok()).map(|r| r.split_seed);
    let seed = split_seed.or(stored).unwrap_or(0);
    let dataset = read_dataset(data)?;
    let part = match split {
        SplitArg::All => dataset,
        other => {
            let s = Splits::new(&dataset, seed)?;
            match other {
                SplitArg::Train => s.train,
                SplitArg::Val => s.val,
                _ => s.test,
            }
        }
    };
    Ok((model, part, seed))
}

fn run_eval(args: &EvalArgs, argv: &[String]) -> Result<()> {
    let (model, part, seed) = checkpoint_split(&args.checkpoint, &args.data, args.split, args.split_seed)?;
    let metrics = evaluate(&model, &part)?;
    if let Some(out) = &args.out {
        let out = resolve_output(out);
        prepare_output(&out, args.force)?;
        let config = serde_json::json!({ "split": args.split, "split_seed": seed });
        let mut manifest = RunManifest::new("eval", argv, config, vec![], inputs(&[("checkpoint", &args.checkpoint), ("data", &args.data)]), &out);
        manifest.write(&out)?;
        write_json(&out.join("metrics.json"), &metrics)?;
        manifest.finish(&out)?;
    }
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn run_interpret(args: &InterpretArgs, argv: &[String]) -> Result<()> {
    let (model, part, seed) = checkpoint_split(&args.checkpoint, &args.data, args.split, args.split_seed)?;
    let out = resolve_output(&args.out);
    prepare_output(&out, args.force)?;
    let config = serde_json::json!({ "split": args.split, "split_seed": seed });
    let mut manifest = RunManifest::new("interpret", argv, config, vec![], inputs(&[("checkpoint", &args.checkpoint), ("data", &args.data)]), &out);
    manifest.write(&out)?;
    let reports = build_reports(&model, &part)?;
    write_reports(&reports, &out)?;
    for s in &reports.global.experts {
        println!("{:>6}: mean weight {:.3} (median {:.3}, min {:.3}, max {:.3})", s.expert, s.mean, s.median, s.min, s.max);
    }
    manifest.finish(&out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PidReport {
    pub redundancy: f64,
    pub unique1: f64,
    pub unique2: f64,
    pub synergy: f64,
    pub total_mi: f64,
    /// `None` when the largest component is not unique.
    pub dominant: Option<String>,
}

fn run_pid(args: &PidArgs) -> Result<()> {
    let joint = DiscreteJoint::from_csv(&args.joint)?;
    let pid = pid_decompose(&joint);
    let report = PidReport {
        redundancy: pid.red,
        unique1: pid.unq1,
        unique2: pid.unq2,
        synergy: pid.syn,
        total_mi: pid.total_mi,
        dominant: dominant(&pid).ok().map(|c| c.tag().to_string()),
    };
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &args.out {
        let out = resolve_output(out);
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(out, text.clone() + "\n")?;
    }
    println!("{text}");
    Ok(())
}

fn parse_variants(spec: &str) -> Result<Vec<Ablation>> {
    if spec == "all" {
        return Ok(Ablation::VARIANTS.to_vec());
    }
    spec.split(',').map(|v| v.trim().parse()).collect()
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn run_ablate(args: &AblateArgs, argv: &[String]) -> Result<()> {
    let variants = parse_variants(&args.variants)?;
    let run = args.run.resolve()?;
    let (dataset, splits) = load_splits(&args.data, run.split_seed)?;
    for &v in &variants {
        TrainConfig { ablation: v, ..run.config.clone() }.preflight(&dataset)?;
    }
    let out = resolve_output(&args.out);
    prepare_output(&out, args.force)?;
    let config = serde_json::json!({ "run": run, "variants": variants });
    let mut manifest = RunManifest::new("ablate", argv, config, run.seeds.clone(), inputs(&[("data", &args.data)]), &out);
    manifest.write(&out)?;
    let report = run_ablations(&variants, &run.config, &splits, &run.seeds)?;
    write_json(&out.join("ablation.json"), &report)?;
    let mut csv = csv::Writer::from_path(out.join("ablation.csv")).map_err(csv_error)?;
    csv.write_record(["variant", "seed", &report.metric, "delta"]).map_err(csv_error)?;
    for row in &report.rows {
        csv.write_record([row.variant.to_string(), row.seed.to_string(), format_f64(row.metrics.headline()), format_f64(row.delta)])
            .map_err(csv_error)?;
    }
    csv.flush()?;
    for s in &report.summary {
        println!("{:>20}: {} {:.4} ± {:.4} (delta {:+.4})", s.variant.to_string(), report.metric, s.headline.mean, s.headline.std, s.mean_delta);
    }
    manifest.finish(&out)
}

fn run_bench(args: &BenchArgs, argv: &[String]) -> Result<()> {
    let run = args.run.resolve()?;
    let (dataset, splits) = load_splits(&args.data, run.split_seed)?;
    run.config.preflight(&dataset)?;
    let out = resolve_output(&args.out);
    prepare_output(&out, args.force)?;
    let mut manifest = RunManifest::new("bench", argv, serde_json::to_value(&run)?, run.seeds.clone(), inputs(&[("data", &args.data)]), &out);
    manifest.write(&out)?;

    let overhead = measure_overhead(&run.config, &splits)?;
    write_json(&out.join("overhead.json"), &overhead)?;
    let mut csv = csv::Writer::from_path(out.join("overhead.csv")).map_err(csv_error)?;
    csv.write_record(["model", "train_s_per_epoch", "inference_s", "params", "expert_params"]).map_err(csv_error)?;
    for r in &overhead.rows {
        csv.write_record([
            r.model.clone(),
            format_f64(r.train_s_per_epoch),
            format_f64(r.inference_s),
            r.param_count.to_string(),
            r.expert_param_count.to_string(),
        ])
        .map_err(csv_error)?;
        println!("{:>8}: {:.4} s/epoch, {:.5} s inference, {} params", r.model, r.train_s_per_epoch, r.inference_s, r.param_count);
    }
    csv.flush()?;

    if !args.skip_masking {
        let cmp = compare_mask_strategies(&run.config, &splits, &run.seeds)?;
        write_json(&out.join("masking.json"), &cmp)?;
        let mut csv = csv::Writer::from_path(out.join("masking.csv")).map_err(csv_error)?;
        csv.write_record(["strategy", "mean", "std"]).map_err(csv_error)?;
        for r in &cmp.rows {
            csv.write_record([r.strategy.name(), &format_f64(r.result.mean), &format_f64(r.result.std)]).map_err(csv_error)?;
            println!("{:>8}: {} {:.4} ± {:.4}", r.strategy.name(), cmp.metric, r.result.mean, r.result.std);
        }
        csv.flush()?;
    }
    manifest.finish(&out)
}

/// Runs a parsed command line; `argv` is recorded in run manifests.
pub fn run(cli: &Cli, argv: &[String]) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => run_gen(a, argv),
        Command::Train(a) => run_train(a, argv),
        Command::Eval(a) => run_eval(a, argv),
        Command::Interpret(a) => run_interpret(a, argv),
        Command::Pid(a) => run_pid(a),
        Command::Ablate(a) => run_ablate(a, argv),
        Command::Bench(a) => run_bench(a, argv),
    }
}
