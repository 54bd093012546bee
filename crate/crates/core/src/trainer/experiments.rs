use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interaction::MaskStrategy;
use crate::model::InteractionMoe;
use crate::synthdata::TaskKind;

use super::{evaluate, train_run, Ablation, Metrics, Splits, TrainConfig, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Self { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub runs: usize,
    pub accuracy: Option<MeanStd>,
    pub auroc: Option<MeanStd>,
    pub micro_f1: Option<MeanStd>,
    pub macro_f1: Option<MeanStd>,
    pub mse: Option<MeanStd>,
}

/// Mean ± std of every metric present in all runs.
pub fn summarize(metrics: &[Metrics]) -> Result<MetricSummary> {
    if metrics.is_empty() {
        return Err(Error::Contract("nothing to summarize".into()));
    }
    let field = |f: fn(&Metrics) -> Option<f64>| -> Option<MeanStd> {
        let values: Option<Vec<f64>> = metrics.iter().map(f).collect();
        values.and_then(|v| MeanStd::of(&v))
    };
    Ok(MetricSummary {
        runs: metrics.len(),
        accuracy: field(|m| m.accuracy),
        auroc: field(|m| m.auroc),
        micro_f1: field(|m| m.micro_f1),
        macro_f1: field(|m| m.macro_f1),
        mse: field(|m| m.mse),
    })
}

/// One seed of a multi-seed run.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub outcome: TrainOutcome<InteractionMoe>,
    /// Test metrics of the final-epoch model.
    pub test: Metrics,
    /// Test metrics of the best-validation model.
    pub test_best: Metrics,
}

/// Trains one model per seed on the same splits.
pub fn run_seeds(config: &TrainConfig, splits: &Splits, seeds: &[u64]) -> Result<Vec<SeedRun>> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    seeds
        .iter()
        .map(|&seed| {
            let cfg = TrainConfig { seed, ..config.clone() };
            let outcome = train_run(&cfg, &splits.train, Some(&splits.val))?;
            let test = evaluate(&outcome.model, &splits.test)?;
            let test_best = evaluate(&outcome.best_model, &splits.test)?;
            Ok(SeedRun { seed, outcome, test, test_best })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    /// `None` marks the full model.
    pub variant: Ablation,
    pub seed: u64,
    pub experts: usize,
    pub reweighter_params: usize,
    pub metrics: Metrics,
    /// Headline metric minus the full model's on the same seed.
    pub delta: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variant: Ablation,
    pub headline: MeanStd,
    pub mean_delta: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub metric: String,
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummary>,
}

impl AblationReport {
    pub fn mean_headline(&self, variant: Ablation) -> Option<f64> {
        self.summary.iter().find(|s| s.variant == variant).map(|s| s.headline.mean)
    }
}

/// Trains the full model and each variant on every seed.
pub fn run_ablations(variants: &[Ablation], config: &TrainConfig, splits: &Splits, seeds: &[u64]) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let arms: Vec<Ablation> = std::iter::once(Ablation::None).chain(variants.iter().copied().filter(|v| *v != Ablation::None)).collect();
    let mut rows: Vec<AblationRow> = Vec::new();
    for &seed in seeds {
        let mut full = None;
        for &variant in &arms {
            let cfg = TrainConfig { seed, ablation: variant, ..config.clone() };
            let outcome = train_run(&cfg, &splits.train, Some(&splits.val))?;
            let metrics = evaluate(&outcome.model, &splits.test)?;
            let headline = metrics.headline();
            let base = *full.get_or_insert(headline);
            rows.push(AblationRow {
                variant,
                seed,
                experts: outcome.model.num_experts(),
                reweighter_params: outcome.model.reweighter_parameter_count(),
                metrics,
                delta: headline - base,
            });
        }
    }
    let summary = arms
        .iter()
        .map(|&variant| {
            let arm: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == variant).collect();
            let values: Vec<f64> = arm.iter().map(|r| r.metrics.headline()).collect();
            AblationSummary {
                variant,
                headline: MeanStd::of(&values).expect("one row per seed"),
                mean_delta: arm.iter().map(|r| r.delta).sum::<f64>() / arm.len() as f64,
            }
        })
        .collect();
    let metric = rows[0].metrics.headline_name().to_string();
    Ok(AblationReport { metric, rows, summary })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OverheadRow {
    pub model: String,
    pub train_s_per_epoch: f64,
    pub inference_s: f64,
    pub param_count: usize,
    pub expert_param_count: usize,
    pub masked_passes_at_inference: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OverheadReport {
    pub dataset: String,
    pub modalities: usize,
    pub epochs: usize,
    pub rows: Vec<OverheadRow>,
    /// Expert-owned parameters of the full model over those of the single-expert model.
    pub expert_param_ratio: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Wall-clock and size comparison of a single-expert fusion model and the
/// full model trained with `config` for at least 3 epochs.
pub fn measure_overhead(config: &TrainConfig, splits: &Splits) -> Result<OverheadReport> {
    let epochs = config.train_epochs.max(3);
    let arms = [
        ("vanilla", TrainConfig { single_expert: true, interaction_loss_weight: 0.0, ablation: Ablation::SimpleWeight, train_epochs: epochs, ..config.clone() }),
        ("full", TrainConfig { train_epochs: epochs, ..config.clone() }),
    ];
    let mut rows = Vec::new();
    for (name, cfg) in arms {
        let outcome = train_run(&cfg, &splits.train, None)?;
        let mut per_epoch: Vec<f64> = outcome.log.iter().map(|e| e.seconds).collect();
        let inputs = splits.test.all_inputs();
        let mut inference = Vec::with_capacity(3);
        let mut masked = 0;
        for _ in 0..3 {
            let start = Instant::now();
            let p = outcome.model.predict(&inputs)?;
            inference.push(start.elapsed().as_secs_f64());
            masked = p.masked_passes;
        }
        rows.push(OverheadRow {
            model: name.into(),
            train_s_per_epoch: median(&mut per_epoch),
            inference_s: median(&mut inference),
            param_count: outcome.model.parameter_count(),
            expert_param_count: outcome.model.expert_parameter_count(),
            masked_passes_at_inference: masked,
        });
    }
    let expert_param_ratio = rows[1].expert_param_count as f64 / rows[0].expert_param_count as f64;
    Ok(OverheadReport { dataset: splits.train.name.clone(), modalities: splits.train.modalities.len(), epochs, rows, expert_param_ratio })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskRow {
    pub strategy: MaskStrategy,
    pub per_seed: Vec<f64>,
    pub result: MeanStd,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskComparison {
    pub metric: String,
    pub rows: Vec<MaskRow>,
    pub best: MaskStrategy,
}

impl MaskComparison {
    pub fn row(&self, strategy: MaskStrategy) -> &MaskRow {
        self.rows.iter().find(|r| r.strategy == strategy).expect("every strategy has a row")
    }
}

/// Test headline metric of the full model under each masking strategy.
pub fn compare_mask_strategies(config: &TrainConfig, splits: &Splits, seeds: &[u64]) -> Result<MaskComparison> {
    let mut rows = Vec::new();
    let mut metric = String::new();
    for strategy in MaskStrategy::ALL {
        let cfg = TrainConfig { mask_strategy: strategy, ..config.clone() };
        let runs = run_seeds(&cfg, splits, seeds)?;
        metric = runs[0].test.headline_name().to_string();
        let per_seed: Vec<f64> = runs.iter().map(|r| r.test.headline()).collect();
        let result = MeanStd::of(&per_seed).expect("at least one seed");
        rows.push(MaskRow { strategy, per_seed, result });
    }
    let lower_is_better = splits.train.task_kind() == TaskKind::Regression;
    let best = rows
        .iter()
        .max_by(|a, b| {
            let ord = a.result.mean.total_cmp(&b.result.mean);
            if lower_is_better {
                ord.reverse()
            } else {
                ord
            }
        })
        .map(|r| r.strategy)
        .expect("three strategies");
    Ok(MaskComparison { metric, rows, best })
}
