//! Modality encoders, interaction experts, the reweighting network and their
//! assembly into one predictor.
//!
//! Expert order is fixed: one uniqueness expert per modality (in modality
//! order), then the synergy expert, then the redundancy expert.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::{self, Stream, StreamRng};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionKind {
    /// Concatenated embeddings through an MLP.
    Mlp,
    /// One multi-head attention block across modality embeddings, then the MLP.
    Attention,
}

/// Interaction type an expert is trained to capture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpertKind {
    /// Unique information of the modality with this zero-based index.
    Uniqueness(usize),
    Synergy,
    Redundancy,
    /// No interaction objective; used for single-model baselines.
    Plain,
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpertKind::Uniqueness(k) => write!(f, "uni{}", k + 1),
            ExpertKind::Synergy => write!(f, "syn"),
            ExpertKind::Redundancy => write!(f, "red"),
            ExpertKind::Plain => write!(f, "plain"),
        }
    }
}

/// Which experts a model is built with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpertLayout {
    /// `n` uniqueness experts plus synergy and redundancy.
    Interaction,
    /// Synergy and redundancy only.
    SynergyRedundancy,
    /// A single plain expert (vanilla fusion).
    Single,
}

impl ExpertLayout {
    pub fn kinds(self, modalities: usize) -> Vec<ExpertKind> {
        match self {
            ExpertLayout::Interaction => (0..modalities)
                .map(ExpertKind::Uniqueness)
                .chain([ExpertKind::Synergy, ExpertKind::Redundancy])
                .collect(),
            ExpertLayout::SynergyRedundancy => vec![ExpertKind::Synergy, ExpertKind::Redundancy],
            ExpertLayout::Single => vec![ExpertKind::Plain],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReweighterKind {
    /// Input-conditioned MLP over all embeddings.
    Mlp,
    /// One learnable logit per expert, shared by every sample.
    Global,
}

macro_rules! kebab_from_str {
    ($ty:ty, $($name:literal => $variant:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} '{other}' (expected one of: {})",
                        stringify!($ty),
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
    };
}

kebab_from_str!(Activation, "relu" => Activation::Relu, "tanh" => Activation::Tanh, "sigmoid" => Activation::Sigmoid);
kebab_from_str!(FusionKind, "mlp" => FusionKind::Mlp, "attention" => FusionKind::Attention);

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dims: Vec<usize>,
    /// Classes (multiclass/multilabel) or 1 (regression).
    pub output_dim: usize,
    pub hidden_dim: usize,
    pub num_layers_enc: usize,
    pub num_layers_fus: usize,
    pub num_layers_pred: usize,
    pub num_heads: usize,
    pub fusion: FusionKind,
    pub activation: Activation,
    pub hidden_dim_rw: usize,
    pub num_layer_rw: usize,
    pub temperature_rw: f64,
    pub experts: ExpertLayout,
    pub reweighter: ReweighterKind,
}

impl ModelConfig {
    pub fn new(input_dims: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dims,
            output_dim,
            hidden_dim: 16,
            num_layers_enc: 1,
            num_layers_fus: 2,
            num_layers_pred: 1,
            num_heads: 1,
            fusion: FusionKind::Mlp,
            activation: Activation::Relu,
            hidden_dim_rw: 32,
            num_layer_rw: 2,
            temperature_rw: 1.0,
            experts: ExpertLayout::Interaction,
            reweighter: ReweighterKind::Mlp,
        }
    }

    pub fn modalities(&self) -> usize {
        self.input_dims.len()
    }

    pub fn expert_kinds(&self) -> Vec<ExpertKind> {
        self.experts.kinds(self.modalities())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("num_layers_enc", self.num_layers_enc),
            ("num_layers_fus", self.num_layers_fus),
            ("num_layers_pred", self.num_layers_pred),
            ("num_heads", self.num_heads),
            ("hidden_dim_rw", self.hidden_dim_rw),
            ("num_layer_rw", self.num_layer_rw),
            ("output_dim", self.output_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.input_dims.is_empty() || self.input_dims.contains(&0) {
            return Err(Error::Config(format!("invalid modality dims {:?}", self.input_dims)));
        }
        if self.experts == ExpertLayout::Interaction && self.modalities() < 2 {
            return Err(Error::Config("interaction experts need at least 2 modalities".into()));
        }
        if !(self.temperature_rw > 0.0) {
            return Err(Error::Config(format!("temperature_rw must be > 0, got {}", self.temperature_rw)));
        }
        if self.fusion == FusionKind::Attention && self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Named trainable tensors in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    fn push(&mut self, name: String, value: Tensor) -> ParamId {
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.value.len()).sum()
    }

    /// All parameter values concatenated in creation order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    pub fn fill(&mut self, value: f64) {
        for p in &mut self.params {
            p.value.data_mut().fill(value);
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    weight: ParamId,
    bias: ParamId,
}

/// Stack of affine layers with the activation between layers and,
/// optionally, after the last one.
#[derive(Clone, Debug)]
pub(crate) struct Mlp {
    layers: Vec<Linear>,
    final_activation: bool,
}

pub(crate) struct Builder<'a> {
    pub(crate) store: &'a mut ParamStore,
    pub(crate) rng: &'a mut StreamRng,
}

impl Builder<'_> {
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)); biases start at zero.
    fn glorot(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng::uniform(self.rng, -bound, bound)).collect();
        self.store.push(name, Tensor::matrix(fan_in, fan_out, data))
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Linear {
        let weight = self.glorot(format!("{prefix}.weight"), fan_in, fan_out);
        let bias = self.store.push(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
        Linear { weight, bias }
    }

    /// `layers` affine maps: `input -> width -> ... -> output`.
    pub(crate) fn mlp(&mut self, prefix: &str, input: usize, width: usize, output: usize, layers: usize, final_activation: bool) -> Mlp {
        let layers = (0..layers)
            .map(|l| {
                let fan_in = if l == 0 { input } else { width };
                let fan_out = if l + 1 == layers { output } else { width };
                self.linear(&format!("{prefix}.{l}"), fan_in, fan_out)
            })
            .collect();
        Mlp { layers, final_activation }
    }
}

#[derive(Clone, Debug)]
struct AttentionHead {
    query: ParamId,
    key: ParamId,
    value: ParamId,
}

#[derive(Clone, Debug)]
enum FusionBody {
    Mlp(Mlp),
    Attention { heads: Vec<AttentionHead>, mlp: Mlp },
}

#[derive(Clone, Debug)]
pub struct InteractionExpert {
    kind: ExpertKind,
    fusion: FusionBody,
    head: Mlp,
}

impl InteractionExpert {
    pub fn kind(&self) -> ExpertKind {
        self.kind
    }
}

#[derive(Clone, Debug)]
enum Reweighter {
    Mlp(Mlp),
    Global(ParamId),
}

/// A tape plus the mapping from model parameters to tape leaves.
pub struct Graph {
    pub tape: Tape,
    bound: Vec<Option<NodeId>>,
    trainable: bool,
}

impl Graph {
    /// Graph whose parameter leaves receive gradients.
    pub fn training(model: &InteractionMoe) -> Self {
        Self { tape: Tape::new(), bound: vec![None; model.store.len()], trainable: true }
    }

    /// Graph with parameters recorded as constants.
    pub fn inference(model: &InteractionMoe) -> Self {
        Self { tape: Tape::new(), bound: vec![None; model.store.len()], trainable: false }
    }

    pub(crate) fn for_store(store: &ParamStore, trainable: bool) -> Self {
        Self { tape: Tape::new(), bound: vec![None; store.len()], trainable }
    }

    /// Like [`Graph::param_grads`] for any parameter store.
    pub(crate) fn store_grads(&self, store: &ParamStore, loss: NodeId) -> Result<Vec<Tensor>> {
        let grads = self.tape.backward(loss)?;
        Ok(store
            .iter()
            .zip(&self.bound)
            .map(|(p, node)| node.and_then(|n| grads.get(n).cloned()).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect())
    }

    pub(crate) fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(node) = self.bound[id.0] {
            return node;
        }
        let value = store.get(id).value.clone();
        let node = if self.trainable { self.tape.param(value) } else { self.tape.constant(value) };
        self.bound[id.0] = Some(node);
        node
    }

    /// Tape node bound to each parameter, if it was used.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, NodeId)> + '_ {
        self.bound.iter().enumerate().filter_map(|(i, n)| n.map(|n| (ParamId(i), n)))
    }

    /// Per-parameter gradients of `loss`, zero for parameters not on the tape.
    pub fn param_grads(&self, model: &InteractionMoe, loss: NodeId) -> Result<Vec<Tensor>> {
        self.store_grads(&model.store, loss)
    }
}

/// Clean-pass outputs of one expert.
#[derive(Clone, Copy, Debug)]
pub struct ExpertOutput {
    /// Fused embedding `x_i`.
    pub fused: NodeId,
    /// Prediction `ŷ_i`.
    pub logits: NodeId,
}

/// Result of a single clean inference pass over a batch.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[batch, experts]`.
    pub weights: Tensor,
    /// One `[batch, output_dim]` tensor per expert.
    pub expert_logits: Vec<Tensor>,
    /// `[batch, output_dim]`, the weighted sum of expert logits.
    pub logits: Tensor,
    /// Masked-embedding leaves recorded during the pass (always zero).
    pub masked_passes: usize,
    /// Primitive operations recorded during the pass.
    pub op_count: usize,
}

/// Full mixture-of-interaction-experts predictor.
#[derive(Clone, Debug)]
pub struct InteractionMoe {
    config: ModelConfig,
    store: ParamStore,
    encoders: Vec<Mlp>,
    experts: Vec<InteractionExpert>,
    reweighter: Reweighter,
}

impl InteractionMoe {
    /// Builds and initializes a model from the `Init` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut rng = rng::stream(seed, Stream::Init);
        let mut b = Builder { store: &mut store, rng: &mut rng };
        let h = config.hidden_dim;
        let n = config.modalities();

        let encoders = config
            .input_dims
            .iter()
            .enumerate()
            .map(|(m, &dim)| b.mlp(&format!("encoder.{m}"), dim, h, h, config.num_layers_enc, false))
            .collect();

        let experts = config
            .expert_kinds()
            .into_iter()
            .enumerate()
            .map(|(i, kind)| {
                let prefix = format!("expert.{i}");
                let fusion = match config.fusion {
                    FusionKind::Mlp => {
                        FusionBody::Mlp(b.mlp(&format!("{prefix}.fusion"), n * h, h, h, config.num_layers_fus, true))
                    }
                    FusionKind::Attention => {
                        let dh = h / config.num_heads;
                        let heads = (0..config.num_heads)
                            .map(|k| AttentionHead {
                                query: b.glorot(format!("{prefix}.attn.{k}.query"), h, dh),
                                key: b.glorot(format!("{prefix}.attn.{k}.key"), h, dh),
                                value: b.glorot(format!("{prefix}.attn.{k}.value"), h, dh),
                            })
                            .collect();
                        let mlp = b.mlp(&format!("{prefix}.fusion"), n * h, h, h, config.num_layers_fus, true);
                        FusionBody::Attention { heads, mlp }
                    }
                };
                let head = b.mlp(&format!("{prefix}.head"), h, h, config.output_dim, config.num_layers_pred, false);
                InteractionExpert { kind, fusion, head }
            })
            .collect::<Vec<_>>();

        let e = experts.len();
        let reweighter = match config.reweighter {
            ReweighterKind::Mlp => {
                Reweighter::Mlp(b.mlp("reweighter", n * h, config.hidden_dim_rw, e, config.num_layer_rw, false))
            }
            ReweighterKind::Global => Reweighter::Global(b.store.push("reweighter.logits".into(), Tensor::zeros(&[e]))),
        };

        Ok(Self { config, store, encoders, experts, reweighter })
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.store.fill(0.0);
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn experts(&self) -> &[InteractionExpert] {
        &self.experts
    }

    pub fn expert_kinds(&self) -> Vec<ExpertKind> {
        self.experts.iter().map(|e| e.kind).collect()
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn modalities(&self) -> usize {
        self.config.modalities()
    }

    pub fn set_temperature(&mut self, temperature: f64) -> Result<()> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
        }
        self.config.temperature_rw = temperature;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Scalars owned by the experts (fusion bodies and heads).
    pub fn expert_parameter_count(&self) -> usize {
        self.store.count_with_prefix("expert.")
    }

    pub fn reweighter_parameter_count(&self) -> usize {
        self.store.count_with_prefix("reweighter")
    }

    pub fn encoder_parameter_count(&self) -> usize {
        self.store.count_with_prefix("encoder.")
    }

    fn mlp_forward(&self, g: &mut Graph, mlp: &Mlp, x: NodeId) -> Result<NodeId> {
        run_mlp(g, &self.store, self.config.activation, mlp, x)
    }

    /// Checks a batch of per-modality feature tables and returns the batch size.
    pub fn check_inputs(&self, inputs: &[Tensor]) -> Result<usize> {
        if inputs.len() != self.modalities() {
            return Err(Error::Input(format!("expected {} modalities, got {}", self.modalities(), inputs.len())));
        }
        let rows = inputs[0].rows();
        for (m, (x, &dim)) in inputs.iter().zip(&self.config.input_dims).enumerate() {
            if x.cols() != dim {
                return Err(Error::Input(format!("modality {m} has width {}, expected {dim}", x.cols())));
            }
            if x.rows() != rows {
                return Err(Error::Input(format!("modality {m} has {} rows, expected {rows}", x.rows())));
            }
        }
        Ok(rows)
    }

    /// Embeds every modality; each result is `[batch, hidden_dim]`.
    pub fn encode(&self, g: &mut Graph, inputs: &[Tensor]) -> Result<Vec<NodeId>> {
        self.check_inputs(inputs)?;
        inputs
            .iter()
            .zip(&self.encoders)
            .map(|(x, enc)| {
                let x = g.tape.constant(x.clone());
                self.mlp_forward(g, enc, x)
            })
            .collect()
    }

    /// Runs expert `index` on the given (possibly masked) embeddings.
    pub fn expert_forward(&self, g: &mut Graph, index: usize, embeddings: &[NodeId]) -> Result<ExpertOutput> {
        let expert = self
            .experts
            .get(index)
            .ok_or_else(|| Error::Contract(format!("expert {index} out of range")))?;
        if embeddings.len() != self.modalities() {
            return Err(Error::Input(format!("expected {} embeddings, got {}", self.modalities(), embeddings.len())));
        }
        let fused = match &expert.fusion {
            FusionBody::Mlp(mlp) => {
                let cat = g.tape.concat(embeddings)?;
                self.mlp_forward(g, mlp, cat)?
            }
            FusionBody::Attention { heads, mlp } => {
                let attended = self.attention(g, heads, embeddings)?;
                let cat = g.tape.concat(&attended)?;
                self.mlp_forward(g, mlp, cat)?
            }
        };
        let logits = self.mlp_forward(g, &expert.head, fused)?;
        Ok(ExpertOutput { fused, logits })
    }

    /// Multi-head attention where each modality embedding is one token;
    /// returns one residual-updated token per modality.
    fn attention(&self, g: &mut Graph, heads: &[AttentionHead], tokens: &[NodeId]) -> Result<Vec<NodeId>> {
        let dh = self.config.hidden_dim / heads.len();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut per_head: Vec<Vec<NodeId>> = vec![Vec::with_capacity(heads.len()); tokens.len()];
        for head in heads {
            let (wq, wk, wv) =
                (g.param(&self.store, head.query), g.param(&self.store, head.key), g.param(&self.store, head.value));
            let mut q = Vec::with_capacity(tokens.len());
            let mut k = Vec::with_capacity(tokens.len());
            let mut v = Vec::with_capacity(tokens.len());
            for &t in tokens {
                q.push(g.tape.matmul(t, wq)?);
                k.push(g.tape.matmul(t, wk)?);
                v.push(g.tape.matmul(t, wv)?);
            }
            for (i, &qi) in q.iter().enumerate() {
                let mut scores = Vec::with_capacity(tokens.len());
                for &kj in &k {
                    let prod = g.tape.mul(qi, kj)?;
                    let dot = g.tape.row_sum(prod)?;
                    scores.push(g.tape.mul_scalar(dot, scale)?);
                }
                let scores = g.tape.concat(&scores)?;
                let attn = g.tape.softmax(scores, 1.0)?;
                let mut out = None;
                for (j, &vj) in v.iter().enumerate() {
                    let a = g.tape.column(attn, j)?;
                    let term = g.tape.scale_rows(vj, a)?;
                    out = Some(match out {
                        None => term,
                        Some(acc) => g.tape.add(acc, term)?,
                    });
                }
                per_head[i].push(out.expect("at least one token"));
            }
        }
        tokens
            .iter()
            .zip(per_head)
            .map(|(&t, heads_out)| {
                let cat = if heads_out.len() == 1 { heads_out[0] } else { g.tape.concat(&heads_out)? };
                Ok(g.tape.add(t, cat)?)
            })
            .collect()
    }

    /// Softmax weights over experts, `[batch, experts]`.
    pub fn reweight(&self, g: &mut Graph, embeddings: &[NodeId]) -> Result<NodeId> {
        self.reweight_with_temperature(g, embeddings, self.config.temperature_rw)
    }

    pub fn reweight_with_temperature(&self, g: &mut Graph, embeddings: &[NodeId], temperature: f64) -> Result<NodeId> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
        }
        let logits = match &self.reweighter {
            Reweighter::Mlp(mlp) => {
                let cat = g.tape.concat(embeddings)?;
                self.mlp_forward(g, mlp, cat)?
            }
            Reweighter::Global(id) => {
                let rows = g.tape.value(embeddings[0]).rows();
                let ones = g.tape.constant(Tensor::filled(&[rows, 1], 1.0));
                let logits = g.param(&self.store, *id);
                let e = self.experts.len();
                let row = g.tape.constant(Tensor::zeros(&[1, e]));
                // [e] -> [1, e] so it can be broadcast with a matmul.
                let row = g.tape.add_row(row, logits)?;
                g.tape.matmul(ones, row)?
            }
        };
        Ok(g.tape.softmax(logits, temperature)?)
    }

    /// Single clean pass over a batch: encoders, every expert, the
    /// reweighter and the weighted combination. No masked passes.
    pub fn predict(&self, inputs: &[Tensor]) -> Result<Prediction> {
        let mut g = Graph::inference(self);
        let embeddings = self.encode(&mut g, inputs)?;
        let mut expert_nodes = Vec::with_capacity(self.experts.len());
        for i in 0..self.experts.len() {
            expert_nodes.push(self.expert_forward(&mut g, i, &embeddings)?.logits);
        }
        let weights = self.reweight(&mut g, &embeddings)?;
        let logits = combine(&mut g.tape, weights, &expert_nodes)?;
        Ok(Prediction {
            weights: g.tape.value(weights).clone(),
            expert_logits: expert_nodes.iter().map(|&n| g.tape.value(n).clone()).collect(),
            logits: g.tape.value(logits).clone(),
            masked_passes: g.tape.count("masked"),
            op_count: g.tape.len(),
        })
    }

    /// Writes parameters and a config echo as one JSON document.
    pub fn save_checkpoint(&self, path: &Path, run_config: Option<serde_json::Value>) -> Result<()> {
        let doc = self.checkpoint(run_config);
        std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
        Ok(())
    }

    pub fn checkpoint(&self, run_config: Option<serde_json::Value>) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: CheckpointConfig { model: self.config.clone(), run: run_config },
            parameters: self
                .store
                .iter()
                .map(|p| ParamRecord { name: p.name.clone(), shape: p.value.shape().to_vec(), data: p.value.data().to_vec() })
                .collect(),
        }
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, Option<serde_json::Value>)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
        let doc: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::load(path, e.to_string()))?;
        let run = doc.config.run.clone();
        let model = Self::from_checkpoint(doc).map_err(|e| Error::load(path, e.to_string()))?;
        Ok((model, run))
    }

    pub fn from_checkpoint(doc: Checkpoint) -> Result<Self> {
        if doc.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint format {}", doc.format_version)));
        }
        let mut model = Self::new(doc.config.model, 0)?;
        if doc.parameters.len() != model.store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model expects {}",
                doc.parameters.len(),
                model.store.len()
            )));
        }
        for (p, rec) in model.store.iter_mut().zip(doc.parameters) {
            if p.name != rec.name || p.value.shape() != rec.shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {} {:?} does not match checkpoint entry {} {:?}",
                    p.name,
                    p.value.shape(),
                    rec.name,
                    rec.shape
                )));
            }
            p.value = Tensor::new(rec.shape, rec.data)?;
        }
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: CheckpointConfig,
    pub parameters: Vec<ParamRecord>,
}

fn activate(tape: &mut Tape, activation: Activation, x: NodeId) -> Result<NodeId> {
    Ok(match activation {
        Activation::Relu => tape.relu(x)?,
        Activation::Tanh => tape.tanh(x)?,
        Activation::Sigmoid => tape.sigmoid(x)?,
    })
}

/// Forward pass of `mlp` with parameters from `store`.
pub(crate) fn run_mlp(g: &mut Graph, store: &ParamStore, activation: Activation, mlp: &Mlp, mut x: NodeId) -> Result<NodeId> {
    let last = mlp.layers.len() - 1;
    for (l, layer) in mlp.layers.iter().enumerate() {
        let w = g.param(store, layer.weight);
        let b = g.param(store, layer.bias);
        x = g.tape.matmul(x, w)?;
        x = g.tape.add_row(x, b)?;
        if l < last || mlp.final_activation {
            x = activate(&mut g.tape, activation, x)?;
        }
    }
    Ok(x)
}

/// `Σ_i w[:, i] · logits_i` on the tape, accumulated in expert order.
pub fn combine(tape: &mut Tape, weights: NodeId, expert_logits: &[NodeId]) -> Result<NodeId> {
    let e = tape.value(weights).cols();
    if e != expert_logits.len() {
        return Err(Error::Contract(format!("{e} weights for {} experts", expert_logits.len())));
    }
    let mut acc: Option<NodeId> = None;
    for (i, &logits) in expert_logits.iter().enumerate() {
        let w = tape.column(weights, i)?;
        let term = tape.scale_rows(logits, w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::Contract("no experts to combine".into()))
}

/// `Σ_i w_i · ŷ_i` for one sample, accumulated in expert order.
pub fn combined_prediction(weights: &[f64], expert_logits: &[&[f64]]) -> Result<Vec<f64>> {
    if weights.len() != expert_logits.len() || weights.is_empty() {
        return Err(Error::Contract(format!("{} weights for {} experts", weights.len(), expert_logits.len())));
    }
    let width = expert_logits[0].len();
    if expert_logits.iter().any(|l| l.len() != width) {
        return Err(Error::Contract("expert outputs differ in width".into()));
    }
    let mut out: Vec<f64> = expert_logits[0].iter().map(|y| y * weights[0]).collect();
    for (w, logits) in weights.iter().zip(expert_logits).skip(1) {
        for (o, y) in out.iter_mut().zip(logits.iter()) {
            *o += y * w;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(dims: Vec<usize>, out: usize) -> ModelConfig {
        ModelConfig::new(dims, out)
    }

    fn batch(rows: usize, dims: &[usize], seed: u64) -> Vec<Tensor> {
        let mut rng = rng::stream(seed, Stream::Generate);
        dims.iter()
            .map(|&d| Tensor::matrix(rows, d, (0..rows * d).map(|_| rng::normal(&mut rng)).collect()))
            .collect()
    }

    #[test]
    fn expert_count_is_modalities_plus_two() {
        for n in 2..=4 {
            let model = InteractionMoe::new(config(vec![3; n], 2), 0).unwrap();
            assert_eq!(model.num_experts(), n + 2);
            let kinds = model.expert_kinds();
            assert_eq!(kinds.iter().filter(|k| **k == ExpertKind::Synergy).count(), 1);
            assert_eq!(kinds.iter().filter(|k| **k == ExpertKind::Redundancy).count(), 1);
            for m in 0..n {
                assert_eq!(kinds[m], ExpertKind::Uniqueness(m));
            }
        }
        let two = InteractionMoe::new(config(vec![3, 3], 2), 0).unwrap();
        let names: Vec<String> = two.expert_kinds().iter().map(ToString::to_string).collect();
        assert_eq!(names, ["uni1", "uni2", "syn", "red"]);
    }

    #[test]
    fn encode_shapes_and_errors() {
        let model = InteractionMoe::new(config(vec![5, 7], 3), 1).unwrap();
        let mut g = Graph::inference(&model);
        let emb = model.encode(&mut g, &batch(4, &[5, 7], 0)).unwrap();
        assert_eq!(emb.len(), 2);
        for e in emb {
            assert_eq!(g.tape.value(e).shape(), &[4, 16]);
        }
        assert!(matches!(model.encode(&mut g, &batch(4, &[5], 0)), Err(Error::Input(_))));
        assert!(matches!(model.encode(&mut g, &batch(4, &[5, 6], 0)), Err(Error::Input(_))));
    }

    #[test]
    fn zero_weight_encoder_gives_zero_embedding() {
        let model = InteractionMoe::zeroed(config(vec![2, 2], 2)).unwrap();
        let mut g = Graph::inference(&model);
        let emb = model.encode(&mut g, &[Tensor::matrix(1, 2, vec![1.0, 0.0]), Tensor::matrix(1, 2, vec![0.0, 1.0])]).unwrap();
        assert!(g.tape.value(emb[0]).data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn identity_encoder_passes_input_through() {
        let mut cfg = config(vec![2, 2], 2);
        cfg.hidden_dim = 2;
        let mut model = InteractionMoe::new(cfg, 0).unwrap();
        for p in model.params_mut().iter_mut() {
            if p.name.starts_with("encoder.") && p.name.ends_with("weight") {
                p.value = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
            }
        }
        let mut g = Graph::inference(&model);
        let emb = model.encode(&mut g, &[Tensor::matrix(1, 2, vec![1.0, 0.0]), Tensor::matrix(1, 2, vec![0.0, 1.0])]).unwrap();
        assert_eq!(g.tape.value(emb[0]).data(), &[1.0, 0.0]);
        assert_eq!(g.tape.value(emb[1]).data(), &[0.0, 1.0]);
    }

    #[test]
    fn same_seed_same_embedding() {
        let inputs = batch(3, &[4, 4], 5);
        let run = || {
            let model = InteractionMoe::new(config(vec![4, 4], 2), 42).unwrap();
            let mut g = Graph::inference(&model);
            let e = model.encode(&mut g, &inputs).unwrap();
            g.tape.value(e[0]).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn expert_head_shapes_and_zero_head() {
        let model = InteractionMoe::new(config(vec![3, 3], 3), 0).unwrap();
        let mut g = Graph::inference(&model);
        let emb = model.encode(&mut g, &batch(2, &[3, 3], 1)).unwrap();
        let out = model.expert_forward(&mut g, 0, &emb).unwrap();
        assert_eq!(g.tape.value(out.logits).shape(), &[2, 3]);
        assert_eq!(g.tape.value(out.fused).shape(), &[2, 16]);

        let mut zeroed = model.clone();
        for p in zeroed.params_mut().iter_mut() {
            if p.name.starts_with("expert.0.head") {
                p.value.data_mut().fill(0.0);
            }
        }
        let mut g = Graph::inference(&zeroed);
        let emb = zeroed.encode(&mut g, &batch(2, &[3, 3], 1)).unwrap();
        let out = zeroed.expert_forward(&mut g, 0, &emb).unwrap();
        assert!(g.tape.value(out.logits).data().iter().all(|x| *x == 0.0));
    }

    /// Hand-set expert: fusion stacks identity blocks so the fused embedding
    /// of e1=[1,0], e2=[0,1] is [1,1]; logits are then the column sums of the
    /// head weight (the sum of its rows).
    #[test]
    fn hand_set_expert_matches_hand_matmul() {
        let mut cfg = config(vec![2, 2], 3);
        cfg.hidden_dim = 2;
        cfg.num_layers_fus = 1;
        let mut model = InteractionMoe::new(cfg, 0).unwrap();
        let head = vec![0.5, -1.0, 2.0, 1.5, 0.25, -3.0];
        for p in model.params_mut().iter_mut() {
            match p.name.as_str() {
                "expert.0.fusion.0.weight" => p.value = Tensor::matrix(4, 2, vec![1., 0., 0., 1., 1., 0., 0., 1.]),
                "expert.0.head.0.weight" => p.value = Tensor::matrix(2, 3, head.clone()),
                _ => {}
            }
        }
        let mut g = Graph::inference(&model);
        let e1 = g.tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]));
        let e2 = g.tape.constant(Tensor::matrix(1, 2, vec![0.0, 1.0]));
        let out = model.expert_forward(&mut g, 0, &[e1, e2]).unwrap();
        let expected: Vec<f64> = (0..3).map(|j| head[j] + head[3 + j]).collect();
        assert_eq!(g.tape.value(out.logits).data(), expected.as_slice());
    }

    #[test]
    fn reweight_simplex_and_temperature() {
        let model = InteractionMoe::zeroed(config(vec![3, 3], 2)).unwrap();
        let pred = model.predict(&batch(3, &[3, 3], 2)).unwrap();
        assert!(pred.weights.data().iter().all(|w| (*w - 0.25).abs() < 1e-15));

        let model = InteractionMoe::new(config(vec![3, 3], 2), 3).unwrap();
        let inputs = batch(5, &[3, 3], 2);
        let mut g = Graph::inference(&model);
        let emb = model.encode(&mut g, &inputs).unwrap();
        let w = model.reweight(&mut g, &emb).unwrap();
        for r in 0..5 {
            let row = g.tape.value(w).row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|x| *x > 0.0 && *x < 1.0));
        }
        let hot = model.reweight_with_temperature(&mut g, &emb, 1e6).unwrap();
        assert!(g.tape.value(hot).data().iter().all(|x| (x - 0.25).abs() < 1e-4));
        assert!(matches!(model.reweight_with_temperature(&mut g, &emb, 0.0), Err(Error::Config(_))));
        assert!(matches!(model.reweight_with_temperature(&mut g, &emb, -1.0), Err(Error::Config(_))));

        let mut cfg = config(vec![3, 3], 2);
        cfg.temperature_rw = 2.0;
        assert!(InteractionMoe::new(cfg, 0).is_ok());
    }

    #[test]
    fn combined_prediction_examples() {
        let l = [[2.0, 1.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]];
        let refs: Vec<&[f64]> = l.iter().map(|x| x.as_slice()).collect();
        assert_eq!(combined_prediction(&[1.0, 0.0, 0.0, 0.0], &refs).unwrap(), vec![2.0, 1.0]);
        let same = [[1.0, -1.0]; 4];
        let refs: Vec<&[f64]> = same.iter().map(|x| x.as_slice()).collect();
        assert_eq!(combined_prediction(&[0.25; 4], &refs).unwrap(), vec![1.0, -1.0]);
        let out = combined_prediction(&[0.5, 0.3, 0.2], &[&[2.0], &[0.0], &[-1.0]]).unwrap();
        assert!((out[0] - 0.8).abs() < 1e-15);
        assert!(matches!(combined_prediction(&[0.5, 0.5], &[&[1.0]]), Err(Error::Contract(_))));
    }

    #[test]
    fn predict_matches_plain_combination_and_has_no_masked_passes() {
        let model = InteractionMoe::new(config(vec![4, 3, 2], 3), 9).unwrap();
        let pred = model.predict(&batch(6, &[4, 3, 2], 3)).unwrap();
        assert_eq!(pred.masked_passes, 0);
        for r in 0..6 {
            let logits: Vec<&[f64]> = pred.expert_logits.iter().map(|t| t.row(r)).collect();
            let expected = combined_prediction(pred.weights.row(r), &logits).unwrap();
            assert_eq!(pred.logits.row(r), expected.as_slice());
        }
    }

    #[test]
    fn parameter_counts() {
        // encoder: one linear 3 -> hidden
        let mut cfg = config(vec![3, 3], 2);
        cfg.hidden_dim = 2;
        let model = InteractionMoe::new(cfg.clone(), 0).unwrap();
        assert_eq!(model.params().count_with_prefix("encoder.0."), 3 * 2 + 2);

        let mut single = cfg.clone();
        single.experts = ExpertLayout::Single;
        let one = InteractionMoe::new(single, 0).unwrap();
        assert_eq!(model.expert_parameter_count(), 4 * one.expert_parameter_count());
        assert_eq!(
            model.parameter_count(),
            model.encoder_parameter_count() + model.expert_parameter_count() + model.reweighter_parameter_count()
        );

        let mut wide = cfg.clone();
        wide.hidden_dim = 4;
        let wide = InteractionMoe::new(wide, 0).unwrap();
        let fusion = |m: &InteractionMoe| m.params().count_with_prefix("expert.0.fusion");
        assert!(fusion(&wide) >= 2 * fusion(&model));

        let mut global = cfg;
        global.reweighter = ReweighterKind::Global;
        assert_eq!(InteractionMoe::new(global, 0).unwrap().reweighter_parameter_count(), 4);
    }

    #[test]
    fn attention_fusion_runs_and_validates_heads() {
        let mut cfg = config(vec![3, 4, 5], 2);
        cfg.fusion = FusionKind::Attention;
        cfg.num_heads = 4;
        let model = InteractionMoe::new(cfg.clone(), 0).unwrap();
        let pred = model.predict(&batch(3, &[3, 4, 5], 0)).unwrap();
        assert_eq!(pred.logits.shape(), &[3, 2]);
        cfg.num_heads = 3;
        assert!(matches!(InteractionMoe::new(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let model = InteractionMoe::new(config(vec![3, 2], 2), 17).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save_checkpoint(&path, Some(serde_json::json!({"seed": 17}))).unwrap();
        let (loaded, run) = InteractionMoe::load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params(), model.params());
        assert_eq!(run.unwrap()["seed"], 17);
        assert!(InteractionMoe::load_checkpoint(&dir.path().join("missing.json")).is_err());
    }
}
