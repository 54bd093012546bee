use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{run_mlp, Activation, Builder, Graph, Mlp, ParamStore};
use crate::rng::{self, Stream};
use crate::synthdata::Dataset;

use super::{task_loss, BatchLoss, Predictor, RunRngs, TrainConfig, Trainable};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    /// Concatenated raw features through one MLP.
    EarlyFusion,
    /// One MLP per modality; logits averaged.
    LateFusion,
}

#[derive(Clone, Debug)]
pub struct BaselineModel {
    kind: BaselineKind,
    store: ParamStore,
    activation: Activation,
    input_dims: Vec<usize>,
    nets: Vec<Mlp>,
}

impl BaselineModel {
    /// Depth is `num_layers_enc + num_layers_fus + num_layers_pred` affine
    /// layers of width `hidden_dim`, matching one expert path of the full model.
    pub fn new(kind: BaselineKind, config: &TrainConfig, dataset: &Dataset) -> Result<Self> {
        let dims = dataset.dims();
        let layers = config.num_layers_enc + config.num_layers_fus + config.num_layers_pred;
        if layers == 0 || config.hidden_dim == 0 {
            return Err(Error::Config("baseline needs at least one layer of positive width".into()));
        }
        let out = dataset.output_dim();
        let mut store = ParamStore::default();
        let mut rng = rng::stream(config.seed, Stream::Init);
        let mut b = Builder { store: &mut store, rng: &mut rng };
        let nets = match kind {
            BaselineKind::EarlyFusion => {
                vec![b.mlp("early", dims.iter().sum(), config.hidden_dim, out, layers, false)]
            }
            BaselineKind::LateFusion => dims
                .iter()
                .enumerate()
                .map(|(m, &d)| b.mlp(&format!("late.{m}"), d, config.hidden_dim, out, layers, false))
                .collect(),
        };
        Ok(Self { kind, store, activation: config.activation, input_dims: dims, nets })
    }

    pub fn kind(&self) -> BaselineKind {
        self.kind
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    fn logits(&self, g: &mut Graph, inputs: &[Tensor]) -> Result<crate::diffcore::NodeId> {
        if inputs.len() != self.input_dims.len() || inputs.iter().zip(&self.input_dims).any(|(x, &d)| x.cols() != d) {
            return Err(Error::Input("inputs do not match the baseline's modalities".into()));
        }
        let nodes: Vec<_> = inputs.iter().map(|x| g.tape.constant(x.clone())).collect();
        match self.kind {
            BaselineKind::EarlyFusion => {
                let cat = g.tape.concat(&nodes)?;
                run_mlp(g, &self.store, self.activation, &self.nets[0], cat)
            }
            BaselineKind::LateFusion => {
                let mut sum = None;
                for (net, x) in self.nets.iter().zip(nodes) {
                    let y = run_mlp(g, &self.store, self.activation, net, x)?;
                    sum = Some(match sum {
                        None => y,
                        Some(s) => g.tape.add(s, y)?,
                    });
                }
                Ok(g.tape.mul_scalar(sum.expect("at least one modality"), 1.0 / self.nets.len() as f64)?)
            }
        }
    }
}

impl Predictor for BaselineModel {
    fn predict_logits(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::for_store(&self.store, false);
        let out = self.logits(&mut g, inputs)?;
        Ok(g.tape.value(out).clone())
    }
}

impl Trainable for BaselineModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn batch_loss(&self, _config: &TrainConfig, _rngs: &mut RunRngs, data: &Dataset, rows: &[usize]) -> Result<BatchLoss> {
        let mut g = Graph::for_store(&self.store, true);
        let logits = self.logits(&mut g, &data.inputs(rows))?;
        let total = task_loss(&mut g, logits, data, rows)?;
        let task = g.tape.value(total).item();
        Ok(BatchLoss { graph: g, total, task, interaction: None })
    }
}
