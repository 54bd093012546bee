//! Training loop, dataset splits, metrics, baselines and ablations.
//!
//! Every batch runs the encoders once, then the clean and masked passes of
//! each expert, the per-expert interaction losses, the reweighter and the
//! weighted combination, and takes one Adam step on
//! `task + λ · mean(interaction losses)`.

mod adam;
mod baselines;
mod experiments;
mod metrics;

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use baselines::{BaselineKind, BaselineModel};
pub use experiments::{
    compare_mask_strategies, measure_overhead, run_ablations, run_seeds, summarize, AblationReport, AblationRow,
    MaskComparison, MaskRow, MeanStd, MetricSummary, OverheadReport, OverheadRow, SeedRun,
};
pub use metrics::{auroc, compute_metrics, predicted_classes, predicted_labels, ClassCounts, Metrics};

use crate::diffcore::{NodeId, Tensor};
use crate::error::{Error, Result};
use crate::interaction::{forward_multiple, interaction_loss, total_loss, LossTarget, LossWeights, MaskStrategy, PassSelection};
use crate::model::{combine, Activation, ExpertLayout, FusionKind, Graph, InteractionMoe, ModelConfig, ParamStore, ReweighterKind};
use crate::rng::{self, Stream, StreamRng};
use crate::synthdata::{Dataset, TaskKind, Targets};

/// Ablation arms; `None` is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// Interaction loss weight forced to 0.
    NoInteraction,
    /// Interaction losses on fused embeddings instead of expert outputs.
    LatentContrastive,
    /// Global learnable expert weights instead of the reweighting network.
    SimpleWeight,
    /// Two random masked passes per sample instead of all of them.
    LessForward,
    /// Only the synergy and redundancy experts.
    SynergyRedundancy,
}

impl Ablation {
    pub const VARIANTS: [Ablation; 5] = [
        Ablation::NoInteraction,
        Ablation::LatentContrastive,
        Ablation::SimpleWeight,
        Ablation::LessForward,
        Ablation::SynergyRedundancy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoInteraction => "no-interaction",
            Ablation::LatentContrastive => "latent-contrastive",
            Ablation::SimpleWeight => "simple-weight",
            Ablation::LessForward => "less-forward",
            Ablation::SynergyRedundancy => "synergy-redundancy",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        std::iter::once(Ablation::None)
            .chain(Ablation::VARIANTS)
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    #[default]
    None,
    EarlyFusion,
    LateFusion,
}

impl FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Baseline::None),
            "early-fusion" => Ok(Baseline::EarlyFusion),
            "late-fusion" => Ok(Baseline::LateFusion),
            other => Err(Error::Config(format!("unknown baseline '{other}'"))),
        }
    }
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub train_epochs: usize,
    pub batch_size: usize,
    pub interaction_loss_weight: f64,
    pub temperature_rw: f64,
    pub hidden_dim_rw: usize,
    pub num_layer_rw: usize,
    pub hidden_dim: usize,
    pub num_layers_enc: usize,
    pub num_layers_fus: usize,
    pub num_layers_pred: usize,
    pub num_heads: usize,
    pub fusion: FusionKind,
    pub activation: Activation,
    pub mask_strategy: MaskStrategy,
    pub triplet_margin: f64,
    pub synergy_margin: f64,
    pub normalize_triplet: bool,
    /// Replace the expert set by one plain fusion expert.
    pub single_expert: bool,
    pub seed: u64,
    pub ablation: Ablation,
    pub baseline: Baseline,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            train_epochs: 30,
            batch_size: 32,
            interaction_loss_weight: 0.5,
            temperature_rw: 1.0,
            hidden_dim_rw: 32,
            num_layer_rw: 2,
            hidden_dim: 16,
            num_layers_enc: 1,
            num_layers_fus: 2,
            num_layers_pred: 1,
            num_heads: 1,
            fusion: FusionKind::Mlp,
            activation: Activation::Relu,
            mask_strategy: MaskStrategy::Random,
            triplet_margin: 1.0,
            synergy_margin: 1.0,
            normalize_triplet: false,
            single_expert: false,
            seed: 0,
            ablation: Ablation::None,
            baseline: Baseline::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.train_epochs == 0 {
            return Err(Error::Config("train_epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.loss_weights().validate()?;
        if self.ablation != Ablation::None && self.baseline != Baseline::None {
            return Err(Error::Config("an ablation variant cannot be combined with a baseline".into()));
        }
        if self.single_expert && self.ablation == Ablation::SynergyRedundancy {
            return Err(Error::Config("single_expert conflicts with the synergy-redundancy variant".into()));
        }
        Ok(())
    }

    /// Interaction loss weight after the ablation is applied.
    pub fn effective_lambda(&self) -> f64 {
        match self.ablation {
            Ablation::NoInteraction => 0.0,
            _ => self.interaction_loss_weight,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_int: self.effective_lambda(),
            triplet_margin: self.triplet_margin,
            synergy_margin: self.synergy_margin,
            normalize_triplet: self.normalize_triplet,
        }
    }

    /// Checks the config against the dataset before any work starts.
    pub fn preflight(&self, dataset: &Dataset) -> Result<()> {
        self.validate()?;
        dataset.validate()?;
        if dataset.modalities.len() < 2 && self.baseline == Baseline::None {
            return Err(Error::Config("the interaction model needs at least 2 modalities".into()));
        }
        if dataset.task_kind() == TaskKind::Regression && self.ablation == Ablation::LatentContrastive {
            return Err(Error::Config(
                "latent-contrastive applies classification losses to fused embeddings; not available for regression".into(),
            ));
        }
        Ok(())
    }

    pub fn model_config(&self, dataset: &Dataset) -> ModelConfig {
        let experts = if self.single_expert {
            ExpertLayout::Single
        } else if self.ablation == Ablation::SynergyRedundancy {
            ExpertLayout::SynergyRedundancy
        } else {
            ExpertLayout::Interaction
        };
        ModelConfig {
            input_dims: dataset.dims(),
            output_dim: dataset.output_dim(),
            hidden_dim: self.hidden_dim,
            num_layers_enc: self.num_layers_enc,
            num_layers_fus: self.num_layers_fus,
            num_layers_pred: self.num_layers_pred,
            num_heads: self.num_heads,
            fusion: self.fusion,
            activation: self.activation,
            hidden_dim_rw: self.hidden_dim_rw,
            num_layer_rw: self.num_layer_rw,
            temperature_rw: self.temperature_rw,
            experts,
            reweighter: if self.ablation == Ablation::SimpleWeight { ReweighterKind::Global } else { ReweighterKind::Mlp },
        }
    }
}

/// Row indices of a train/validation/test split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled split with sizes `⌊0.7N⌋ / ⌊0.15N⌋ / rest`.
pub fn split(n: usize, seed: u64) -> Result<SplitIndices> {
    if n < 10 {
        return Err(Error::Config(format!("need at least 10 samples to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Split));
    let n_train = n * 70 / 100;
    let n_val = n * 15 / 100;
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok(SplitIndices { train: order, val, test })
}

/// The three splits of a dataset.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn new(dataset: &Dataset, seed: u64) -> Result<Self> {
        let idx = split(dataset.len(), seed)?;
        Ok(Self { train: dataset.subset(&idx.train), val: dataset.subset(&idx.val), test: dataset.subset(&idx.test) })
    }
}

/// Anything that maps per-modality inputs to output logits in one clean pass.
pub trait Predictor {
    fn predict_logits(&self, inputs: &[Tensor]) -> Result<Tensor>;
}

impl Predictor for InteractionMoe {
    fn predict_logits(&self, inputs: &[Tensor]) -> Result<Tensor> {
        Ok(self.predict(inputs)?.logits)
    }
}

/// Metrics of one clean forward pass over `dataset`.
pub fn evaluate(model: &dyn Predictor, dataset: &Dataset) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let logits = model.predict_logits(&dataset.all_inputs())?;
    compute_metrics(&logits, &dataset.targets)
}

/// Task loss of `logits` for the given rows of `dataset`.
pub fn task_loss(g: &mut Graph, logits: NodeId, dataset: &Dataset, rows: &[usize]) -> Result<NodeId> {
    Ok(match &dataset.targets {
        Targets::Classes(y) => {
            let t: Vec<usize> = rows.iter().map(|&r| y[r]).collect();
            g.tape.cross_entropy(logits, &t)?
        }
        Targets::Multilabel(t) => {
            let c = t.cols();
            let data = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
            g.tape.bce_with_logits(logits, Tensor::matrix(rows.len(), c, data))?
        }
        Targets::Regression(y) => {
            let target = g.tape.constant(Tensor::matrix(rows.len(), 1, rows.iter().map(|&r| y[r]).collect()));
            g.tape.mse(logits, target)?
        }
    })
}

/// Random streams used while training.
pub struct RunRngs {
    pub shuffle: StreamRng,
    pub mask: StreamRng,
    pub less_forward: StreamRng,
}

impl RunRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            shuffle: rng::stream(seed, Stream::Shuffle),
            mask: rng::stream(seed, Stream::Mask),
            less_forward: rng::stream(seed, Stream::LessForward),
        }
    }
}

/// Loss of one batch on its graph.
pub struct BatchLoss {
    pub graph: Graph,
    pub total: NodeId,
    pub task: f64,
    pub interaction: Option<Vec<f64>>,
}

/// A model the generic loop can train.
pub trait Trainable: Predictor + Clone {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn batch_loss(&self, config: &TrainConfig, rngs: &mut RunRngs, data: &Dataset, rows: &[usize]) -> Result<BatchLoss>;
}

impl Trainable for InteractionMoe {
    fn store(&self) -> &ParamStore {
        self.params()
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        self.params_mut()
    }

    fn batch_loss(&self, config: &TrainConfig, rngs: &mut RunRngs, data: &Dataset, rows: &[usize]) -> Result<BatchLoss> {
        let mut g = Graph::training(self);
        let inputs = data.inputs(rows);
        let emb = self.encode(&mut g, &inputs)?;
        let weights = config.loss_weights();
        let regression = data.task_kind() == TaskKind::Regression;

        let (expert_logits, interaction) = if !config.single_expert {
            let selection = if config.ablation == Ablation::LessForward {
                PassSelection::two_per_sample(rows.len(), self.modalities(), &mut rngs.less_forward)
            } else {
                PassSelection::All
            };
            let bundle = forward_multiple(self, &mut g, &emb, config.mask_strategy, &mut rngs.mask, &selection)?;
            let target = if config.ablation == Ablation::LatentContrastive { LossTarget::Fused } else { LossTarget::Outputs };
            let mut losses = Vec::with_capacity(bundle.experts.len());
            for e in &bundle.experts {
                losses.push(interaction_loss(&mut g.tape, e.kind, &e.row(target), &weights, regression)?);
            }
            (bundle.experts.iter().map(|e| e.clean.logits).collect::<Vec<_>>(), Some(losses))
        } else {
            let mut logits = Vec::with_capacity(self.num_experts());
            for i in 0..self.num_experts() {
                logits.push(self.expert_forward(&mut g, i, &emb)?.logits);
            }
            (logits, None)
        };

        let w = self.reweight(&mut g, &emb)?;
        let combined = combine(&mut g.tape, w, &expert_logits)?;
        let task = task_loss(&mut g, combined, data, rows)?;
        let (total, interaction) = match interaction {
            Some(losses) => {
                let values = losses.iter().map(|&l| g.tape.value(l).item()).collect();
                (total_loss(&mut g.tape, task, &losses, weights.lambda_int)?, Some(values))
            }
            None => (task, None),
        };
        let task = g.tape.value(task).item();
        Ok(BatchLoss { graph: g, total, task, interaction })
    }
}

/// One row of the per-epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Sample-weighted mean task loss over the epoch's batches.
    pub task_loss: f64,
    /// Sample-weighted mean interaction loss of each expert; `None` for
    /// models without interaction experts.
    pub interaction_losses: Option<Vec<f64>>,
    /// Accuracy, or MSE for regression.
    pub train_metric: f64,
    pub val_metric: Option<f64>,
    pub seconds: f64,
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    /// Final-epoch model.
    pub model: M,
    /// Model of the best validation epoch (the final one without validation data).
    pub best_model: M,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

fn better(task: TaskKind, candidate: f64, best: f64) -> bool {
    match task {
        TaskKind::Regression => candidate < best,
        _ => candidate > best,
    }
}

/// Trains `model` on `train` for `config.train_epochs` epochs.
pub fn fit<M: Trainable>(mut model: M, config: &TrainConfig, train: &Dataset, val: Option<&Dataset>) -> Result<TrainOutcome<M>> {
    config.validate()?;
    let mut rngs = RunRngs::new(config.seed);
    let mut adam = Adam::new(model.store(), config.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(config.train_epochs);
    let mut best: Option<(usize, f64, M)> = None;
    let mut last_finite = f64::NAN;
    let task_kind = train.task_kind();

    for epoch in 1..=config.train_epochs {
        let start = Instant::now();
        order.shuffle(&mut rngs.shuffle);
        let mut task_sum = 0.0;
        let mut int_sums: Option<Vec<f64>> = None;
        for (step, rows) in order.chunks(config.batch_size).enumerate() {
            let batch = model.batch_loss(config, &mut rngs, train, rows)?;
            let total = batch.graph.tape.value(batch.total).item();
            if !total.is_finite() {
                return Err(Error::Diverged { epoch, step: step + 1, last_finite_loss: last_finite });
            }
            last_finite = total;
            let grads = batch.graph.store_grads(model.store(), batch.total)?;
            adam.step(model.store_mut(), &grads)?;
            let weight = rows.len() as f64;
            task_sum += batch.task * weight;
            if let Some(ints) = batch.interaction {
                let sums = int_sums.get_or_insert_with(|| vec![0.0; ints.len()]);
                for (s, v) in sums.iter_mut().zip(ints) {
                    *s += v * weight;
                }
            }
        }
        let n = train.len() as f64;
        let train_metric = evaluate(&model, train)?.headline();
        let val_metric = val.map(|v| evaluate(&model, v)).transpose()?.map(|m| m.headline());
        let score = val_metric.unwrap_or(train_metric);
        if best.as_ref().is_none_or(|(_, b, _)| better(task_kind, score, *b)) {
            best = Some((epoch, score, model.clone()));
        }
        log.push(EpochLog {
            epoch,
            task_loss: task_sum / n,
            interaction_losses: int_sums.map(|s| s.into_iter().map(|v| v / n).collect()),
            train_metric,
            val_metric,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let (best_epoch, _, best_model) = best.expect("at least one epoch");
    let best_model = if val.is_some() { best_model } else { model.clone() };
    let best_epoch = if val.is_some() { best_epoch } else { config.train_epochs };
    Ok(TrainOutcome { model, best_model, best_epoch, log })
}

/// Builds the model `config` describes and trains it.
pub fn train_run(config: &TrainConfig, train: &Dataset, val: Option<&Dataset>) -> Result<TrainOutcome<InteractionMoe>> {
    config.preflight(train)?;
    if config.baseline != Baseline::None {
        return Err(Error::Config("train_run builds the interaction model; use train_baseline for baselines".into()));
    }
    let model = InteractionMoe::new(config.model_config(train), config.seed)?;
    fit(model, config, train, val)
}

/// Builds and trains a baseline model.
pub fn train_baseline(config: &TrainConfig, train: &Dataset, val: Option<&Dataset>) -> Result<TrainOutcome<BaselineModel>> {
    config.preflight(train)?;
    let kind = match config.baseline {
        Baseline::EarlyFusion => BaselineKind::EarlyFusion,
        Baseline::LateFusion => BaselineKind::LateFusion,
        Baseline::None => return Err(Error::Config("no baseline selected".into())),
    };
    let model = BaselineModel::new(kind, config, train)?;
    fit(model, config, train, val)
}

/// Column names of the epoch log for `experts` experts.
pub fn epoch_log_header(experts: usize) -> Vec<String> {
    let mut h = vec!["epoch".to_string(), "task_loss".to_string()];
    h.extend((0..experts).map(|i| format!("int_loss_expert_{i}")));
    h.extend(["train_acc", "val_acc", "seconds"].map(String::from));
    h
}

/// Writes the epoch log as CSV. Missing values are empty fields.
pub fn write_epoch_log(path: &Path, log: &[EpochLog], experts: usize) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", epoch_log_header(experts).join(","))?;
    let fmt = crate::synthdata::format_f64;
    for row in log {
        let mut fields = vec![row.epoch.to_string(), fmt(row.task_loss)];
        match &row.interaction_losses {
            Some(v) => fields.extend(v.iter().map(|&x| fmt(x))),
            None => fields.extend((0..experts).map(|_| String::new())),
        }
        fields.push(fmt(row.train_metric));
        fields.push(row.val_metric.map(fmt).unwrap_or_default());
        fields.push(format!("{:.6}", row.seconds));
        writeln!(out, "{}", fields.join(","))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
