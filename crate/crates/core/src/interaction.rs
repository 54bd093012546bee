//! Masked forward passes and the interaction losses that specialize experts.
//!
//! For every expert the clean output `ŷ⁽⁰⁾` is the anchor. Pass `j` replaces
//! modality `j`'s embedding and yields `ŷ⁽ʲ⁾`:
//!
//! * uniqueness expert `i`: `ŷ⁽ⁱ⁾` is the negative, every other `ŷ⁽ʲ⁾` a
//!   positive (triplet margin loss);
//! * synergy expert: every masked output is a negative (mean cosine similarity);
//! * redundancy expert: every masked output is a positive (mean `1 - cos`).
//!
//! Regression swaps distances for squared errors and hinges the synergy
//! term so it cannot grow without bound.

use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::diffcore::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{ExpertKind, ExpertOutput, Graph, InteractionMoe};
use crate::rng::{self, StreamRng};

/// What replaces a masked modality embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskStrategy {
    /// Fresh i.i.d. standard normal entries per pass.
    Random,
    /// Per-dimension mean of that modality's embeddings over the batch.
    Mean,
    Zero,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 3] = [MaskStrategy::Random, MaskStrategy::Mean, MaskStrategy::Zero];

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::Random => "random",
            MaskStrategy::Mean => "mean",
            MaskStrategy::Zero => "zero",
        }
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(MaskStrategy::Random),
            "mean" => Ok(MaskStrategy::Mean),
            "zero" => Ok(MaskStrategy::Zero),
            other => Err(Error::Config(format!("unknown mask strategy '{other}' (random, mean, zero)"))),
        }
    }
}

/// Loss hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_int: f64,
    pub triplet_margin: f64,
    /// Hinge margin of the regression synergy term.
    pub synergy_margin: f64,
    /// Measure triplet distances between L2-normalized outputs instead of raw ones.
    pub normalize_triplet: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_int: 0.5, triplet_margin: 1.0, synergy_margin: 1.0, normalize_triplet: false }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_int >= 0.0) {
            return Err(Error::Config(format!("interaction_loss_weight must be >= 0, got {}", self.lambda_int)));
        }
        if !(self.triplet_margin > 0.0) || !(self.synergy_margin > 0.0) {
            return Err(Error::Config("loss margins must be > 0".into()));
        }
        Ok(())
    }
}

/// Which masked passes to run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PassSelection {
    /// Every modality masked once for every sample.
    All,
    /// For each sample, the modality indices to mask.
    PerSample(Vec<Vec<usize>>),
}

impl PassSelection {
    /// Two distinct modalities per sample, drawn uniformly without replacement.
    pub fn two_per_sample(batch: usize, modalities: usize, rng: &mut StreamRng) -> Self {
        let k = modalities.min(2);
        PassSelection::PerSample(
            (0..batch)
                .map(|_| {
                    let mut picked = sample(rng, modalities, k).into_vec();
                    picked.sort_unstable();
                    picked
                })
                .collect(),
        )
    }

    /// Rows whose modality `k` is masked; `None` means every row.
    fn rows_for(&self, k: usize) -> Option<Vec<usize>> {
        match self {
            PassSelection::All => None,
            PassSelection::PerSample(sel) => {
                Some(sel.iter().enumerate().filter(|(_, m)| m.contains(&k)).map(|(r, _)| r).collect())
            }
        }
    }
}

/// Replacement rows for a masked embedding.
///
/// `context` holds the batch's embeddings of the masked modality; it is only
/// read by [`MaskStrategy::Mean`].
pub fn replacement(strategy: MaskStrategy, context: &[&[f64]], rows: usize, width: usize, rng: &mut StreamRng) -> Result<Tensor> {
    Ok(match strategy {
        MaskStrategy::Zero => Tensor::zeros(&[rows, width]),
        MaskStrategy::Random => Tensor::matrix(rows, width, (0..rows * width).map(|_| rng::normal(rng)).collect()),
        MaskStrategy::Mean => {
            if context.is_empty() {
                return Err(Error::Config("mean masking needs a non-empty batch".into()));
            }
            let mut mean = vec![0.0; width];
            for row in context {
                if row.len() != width {
                    return Err(Error::Contract(format!("context row width {} != {width}", row.len())));
                }
                for (m, x) in mean.iter_mut().zip(row.iter()) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= context.len() as f64);
            Tensor::matrix(rows, width, mean.iter().cycle().take(rows * width).copied().collect())
        }
    })
}

/// Returns `embeddings` with modality `k` replaced per `strategy`; the other
/// embeddings are the same nodes. The batch mean is taken over the rows of
/// embedding `k` currently on the tape.
pub fn mask_embedding(
    tape: &mut Tape,
    embeddings: &[NodeId],
    k: usize,
    strategy: MaskStrategy,
    rng: &mut StreamRng,
) -> Result<Vec<NodeId>> {
    if k >= embeddings.len() {
        return Err(Error::Contract(format!("modality {k} out of range for {} embeddings", embeddings.len())));
    }
    let current = tape.value(embeddings[k]);
    let (rows, width) = (current.rows(), current.cols());
    let context: Vec<&[f64]> = (0..rows).map(|r| current.row(r)).collect();
    let value = replacement(strategy, &context, rows, width, rng)?;
    let mut out = embeddings.to_vec();
    out[k] = tape.masked(value);
    Ok(out)
}

/// One masked pass of one expert, possibly over a subset of the batch.
#[derive(Clone, Debug)]
pub struct MaskedPass {
    pub output: ExpertOutput,
    /// Batch rows the pass covers, in order; `None` means all rows.
    pub rows: Option<Vec<usize>>,
}

/// Clean and masked outputs of one expert.
#[derive(Clone, Debug)]
pub struct ExpertPasses {
    pub kind: ExpertKind,
    pub clean: ExpertOutput,
    /// Indexed by masked modality; `None` if that pass was skipped.
    pub masked: Vec<Option<MaskedPass>>,
}

/// Outputs of every expert under the clean pass and each masked pass.
#[derive(Clone, Debug)]
pub struct ForwardBundle {
    pub embeddings: Vec<NodeId>,
    pub experts: Vec<ExpertPasses>,
}

impl ForwardBundle {
    /// Number of passes recorded for each expert (clean included).
    pub fn passes_per_expert(&self) -> Vec<usize> {
        self.experts.iter().map(|e| 1 + e.masked.iter().filter(|m| m.is_some()).count()).collect()
    }
}

/// Which representation the interaction losses compare.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTarget {
    /// Expert predictions `ŷ_i`.
    Outputs,
    /// Fused embeddings `x_i`.
    Fused,
}

/// Anchor and masked nodes of one expert, restricted to one representation.
#[derive(Clone, Debug)]
pub struct PassRow {
    pub clean: NodeId,
    pub masked: Vec<Option<(NodeId, Option<Vec<usize>>)>>,
}

impl ExpertPasses {
    pub fn row(&self, target: LossTarget) -> PassRow {
        let pick = |o: &ExpertOutput| match target {
            LossTarget::Outputs => o.logits,
            LossTarget::Fused => o.fused,
        };
        PassRow {
            clean: pick(&self.clean),
            masked: self.masked.iter().map(|m| m.as_ref().map(|p| (pick(&p.output), p.rows.clone()))).collect(),
        }
    }
}

impl PassRow {
    /// Row with every masked pass covering the full batch.
    pub fn full(clean: NodeId, masked: &[NodeId]) -> Self {
        Self { clean, masked: masked.iter().map(|&m| Some((m, None))).collect() }
    }
}

/// Runs the clean pass and the selected masked passes for every expert.
///
/// The clean pass uses exactly `embeddings`, the same nodes the reweighter
/// sees. Replacement vectors are drawn from `rng` per (expert, modality).
pub fn forward_multiple(
    model: &InteractionMoe,
    g: &mut Graph,
    embeddings: &[NodeId],
    strategy: MaskStrategy,
    rng: &mut StreamRng,
    selection: &PassSelection,
) -> Result<ForwardBundle> {
    let n = model.modalities();
    if n < 2 {
        return Err(Error::Contract("masked passes need at least two modalities".into()));
    }
    if embeddings.len() != n {
        return Err(Error::Input(format!("expected {n} embeddings, got {}", embeddings.len())));
    }
    if let PassSelection::PerSample(sel) = selection {
        let rows = g.tape.value(embeddings[0]).rows();
        if sel.len() != rows || sel.iter().flatten().any(|&k| k >= n) {
            return Err(Error::Contract("pass selection does not match the batch".into()));
        }
    }
    let row_sets: Vec<Option<Vec<usize>>> = (0..n).map(|k| selection.rows_for(k)).collect();

    let mut experts = Vec::with_capacity(model.num_experts());
    for (i, kind) in model.expert_kinds().into_iter().enumerate() {
        let clean = model.expert_forward(g, i, embeddings)?;
        let mut masked = Vec::with_capacity(n);
        for (k, rows) in row_sets.iter().enumerate() {
            let base: Vec<NodeId> = match rows {
                None => embeddings.to_vec(),
                Some(r) if r.is_empty() => {
                    masked.push(None);
                    continue;
                }
                Some(r) => embeddings.iter().map(|&e| g.tape.gather_rows(e, r)).collect::<std::result::Result<_, _>>()?,
            };
            let replaced = mask_embedding(&mut g.tape, &base, k, strategy, rng)?;
            let output = model.expert_forward(g, i, &replaced)?;
            masked.push(Some(MaskedPass { output, rows: rows.clone() }));
        }
        experts.push(ExpertPasses { kind, clean, masked });
    }
    Ok(ForwardBundle { embeddings: embeddings.to_vec(), experts })
}

/// Accumulates per-row loss terms and divides by the number of terms.
struct TermMean {
    total: Option<NodeId>,
    count: usize,
}

impl TermMean {
    fn new() -> Self {
        Self { total: None, count: 0 }
    }

    fn push(&mut self, tape: &mut Tape, per_row: NodeId) -> Result<()> {
        let rows = tape.value(per_row).rows();
        let s = tape.sum(per_row)?;
        self.total = Some(match self.total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
        self.count += rows;
        Ok(())
    }

    fn finish(self, tape: &mut Tape) -> Result<NodeId> {
        Ok(match self.total {
            None => tape.constant(Tensor::scalar(0.0)),
            Some(t) => tape.mul_scalar(t, 1.0 / self.count as f64)?,
        })
    }
}

/// Aligned views of the anchor and two masked passes over the rows both
/// passes cover.
fn align(
    tape: &mut Tape,
    clean: NodeId,
    a: &(NodeId, Option<Vec<usize>>),
    b: Option<&(NodeId, Option<Vec<usize>>)>,
) -> Result<Option<(NodeId, NodeId, Option<NodeId>)>> {
    let (a_node, a_rows) = a;
    let b_rows = b.and_then(|x| x.1.as_ref());
    if a_rows.is_none() && b_rows.is_none() {
        return Ok(Some((clean, *a_node, b.map(|x| x.0))));
    }
    let batch = tape.value(clean).rows();
    let all: Vec<usize> = (0..batch).collect();
    let ar = a_rows.as_ref().unwrap_or(&all);
    let br = b_rows.unwrap_or(&all);
    let common: Vec<usize> = ar.iter().copied().filter(|r| br.binary_search(r).is_ok()).collect();
    if common.is_empty() {
        return Ok(None);
    }
    let pos = |rows: &[usize]| -> Vec<usize> { common.iter().map(|r| rows.binary_search(r).expect("row present")).collect() };
    let anchor = tape.gather_rows(clean, &common)?;
    let a_view = match a_rows {
        None => tape.gather_rows(*a_node, &common)?,
        Some(rows) => tape.gather_rows(*a_node, &pos(rows))?,
    };
    let b_view = match b {
        None => None,
        Some((node, None)) => Some(tape.gather_rows(*node, &common)?),
        Some((node, Some(rows))) => Some(tape.gather_rows(*node, &pos(rows))?),
    };
    Ok(Some((anchor, a_view, b_view)))
}

fn check_row(row: &PassRow) -> Result<usize> {
    let n = row.masked.len();
    if n < 2 {
        return Err(Error::Contract(format!("interaction losses need at least 2 modalities, got {n}")));
    }
    Ok(n)
}

/// Triplet margin loss of uniqueness expert `i`: anchor `ŷ⁽⁰⁾`, positives
/// `ŷ⁽ʲ⁾` for `j ≠ i`, negative `ŷ⁽ⁱ⁾`, Euclidean distance.
pub fn uniqueness_loss(tape: &mut Tape, i: usize, row: &PassRow, weights: &LossWeights) -> Result<NodeId> {
    let n = check_row(row)?;
    if i >= n {
        return Err(Error::Contract(format!("uniqueness index {i} out of range for {n} modalities")));
    }
    let mut acc = TermMean::new();
    let Some(negative) = row.masked[i].as_ref() else { return acc.finish(tape) };
    for (j, positive) in row.masked.iter().enumerate() {
        let Some(positive) = positive else { continue };
        if j == i {
            continue;
        }
        let Some((anchor, pos, neg)) = align(tape, row.clean, positive, Some(negative))? else { continue };
        let neg = neg.expect("negative requested");
        let (anchor, pos, neg) = if weights.normalize_triplet {
            (tape.l2_normalize(anchor)?, tape.l2_normalize(pos)?, tape.l2_normalize(neg)?)
        } else {
            (anchor, pos, neg)
        };
        let d_pos = tape.euclidean(anchor, pos)?;
        let d_neg = tape.euclidean(anchor, neg)?;
        let gap = tape.sub(d_pos, d_neg)?;
        let shifted = tape.add_scalar(gap, weights.triplet_margin)?;
        let term = tape.hinge(shifted)?;
        acc.push(tape, term)?;
    }
    acc.finish(tape)
}

/// Mean cosine similarity between `ŷ⁽⁰⁾` and every masked output.
pub fn synergy_loss(tape: &mut Tape, row: &PassRow) -> Result<NodeId> {
    cosine_family(tape, row, false)
}

/// Mean `1 - cos` between `ŷ⁽⁰⁾` and every masked output.
pub fn redundancy_loss(tape: &mut Tape, row: &PassRow) -> Result<NodeId> {
    cosine_family(tape, row, true)
}

fn cosine_family(tape: &mut Tape, row: &PassRow, one_minus: bool) -> Result<NodeId> {
    check_row(row)?;
    let mut acc = TermMean::new();
    for masked in row.masked.iter().flatten() {
        let Some((anchor, other, _)) = align(tape, row.clean, masked, None)? else { continue };
        let a = tape.l2_normalize(anchor)?;
        let b = tape.l2_normalize(other)?;
        let mut term = tape.cosine(a, b)?;
        if one_minus {
            let neg = tape.mul_scalar(term, -1.0)?;
            term = tape.add_scalar(neg, 1.0)?;
        }
        acc.push(tape, term)?;
    }
    acc.finish(tape)
}

/// Squared-error counterparts of the classification losses for scalar outputs.
pub fn regression_interaction_loss(tape: &mut Tape, kind: ExpertKind, row: &PassRow, weights: &LossWeights) -> Result<NodeId> {
    let n = check_row(row)?;
    let scalar_outputs = std::iter::once(row.clean)
        .chain(row.masked.iter().flatten().map(|m| m.0))
        .all(|node| tape.value(node).cols() == 1);
    if !scalar_outputs {
        return Err(Error::Contract("regression interaction losses need scalar outputs".into()));
    }
    let sq = |tape: &mut Tape, a: NodeId, b: NodeId| -> Result<NodeId> {
        let d = tape.sub(a, b)?;
        Ok(tape.square(d)?)
    };
    let mut acc = TermMean::new();
    match kind {
        ExpertKind::Redundancy => {
            for masked in row.masked.iter().flatten() {
                let Some((anchor, other, _)) = align(tape, row.clean, masked, None)? else { continue };
                let term = sq(tape, anchor, other)?;
                acc.push(tape, term)?;
            }
        }
        ExpertKind::Synergy => {
            for masked in row.masked.iter().flatten() {
                let Some((anchor, other, _)) = align(tape, row.clean, masked, None)? else { continue };
                let e = sq(tape, anchor, other)?;
                let neg = tape.mul_scalar(e, -1.0)?;
                let shifted = tape.add_scalar(neg, weights.synergy_margin)?;
                let term = tape.hinge(shifted)?;
                acc.push(tape, term)?;
            }
        }
        ExpertKind::Uniqueness(i) => {
            if i >= n {
                return Err(Error::Contract(format!("uniqueness index {i} out of range for {n} modalities")));
            }
            if let Some(negative) = row.masked[i].as_ref() {
                for (j, positive) in row.masked.iter().enumerate() {
                    let Some(positive) = positive else { continue };
                    if j == i {
                        continue;
                    }
                    let Some((anchor, pos, neg)) = align(tape, row.clean, positive, Some(negative))? else { continue };
                    let e_pos = sq(tape, anchor, pos)?;
                    let e_neg = sq(tape, anchor, neg.expect("negative requested"))?;
                    let gap = tape.sub(e_pos, e_neg)?;
                    let shifted = tape.add_scalar(gap, weights.triplet_margin)?;
                    let term = tape.hinge(shifted)?;
                    acc.push(tape, term)?;
                }
            }
        }
        ExpertKind::Plain => {}
    }
    acc.finish(tape)
}

/// Interaction loss for one expert; `regression` selects the squared-error family.
pub fn interaction_loss(tape: &mut Tape, kind: ExpertKind, row: &PassRow, weights: &LossWeights, regression: bool) -> Result<NodeId> {
    if regression {
        return regression_interaction_loss(tape, kind, row, weights);
    }
    match kind {
        ExpertKind::Uniqueness(i) => uniqueness_loss(tape, i, row, weights),
        ExpertKind::Synergy => synergy_loss(tape, row),
        ExpertKind::Redundancy => redundancy_loss(tape, row),
        ExpertKind::Plain => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}

/// `task + lambda_int · mean(interaction_losses)` on the tape.
pub fn total_loss(tape: &mut Tape, task: NodeId, interaction_losses: &[NodeId], lambda_int: f64) -> Result<NodeId> {
    if interaction_losses.is_empty() {
        return Err(Error::Contract("no interaction losses".into()));
    }
    let mut sum = interaction_losses[0];
    for &l in &interaction_losses[1..] {
        sum = tape.add(sum, l)?;
    }
    let scaled = tape.mul_scalar(sum, lambda_int / interaction_losses.len() as f64)?;
    Ok(tape.add(task, scaled)?)
}

/// Scalar form of [`total_loss`].
pub fn total_loss_value(task: f64, interaction_losses: &[f64], lambda_int: f64) -> f64 {
    task + lambda_int * interaction_losses.iter().sum::<f64>() / interaction_losses.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::check_gradients;
    use crate::model::ModelConfig;
    use crate::rng::Stream;

    fn vec_node(tape: &mut Tape, v: &[f64]) -> NodeId {
        tape.constant(Tensor::matrix(1, v.len(), v.to_vec()))
    }

    fn loss_of(tape: &mut Tape, node: NodeId) -> f64 {
        tape.value(node).item()
    }

    #[test]
    fn zero_mask_replaces_only_target() {
        let mut tape = Tape::new();
        let e1 = vec_node(&mut tape, &[1.0, 2.0]);
        let e2 = vec_node(&mut tape, &[3.0, 4.0]);
        let mut rng = rng::stream(0, Stream::Mask);
        let out = mask_embedding(&mut tape, &[e1, e2], 1, MaskStrategy::Zero, &mut rng).unwrap();
        assert_eq!(out[0], e1);
        assert_eq!(tape.value(out[1]).data(), &[0.0, 0.0]);
        assert_eq!(tape.count("masked"), 1);
        assert!(mask_embedding(&mut tape, &[e1, e2], 2, MaskStrategy::Zero, &mut rng).is_err());
    }

    #[test]
    fn random_mask_is_seeded() {
        let draw = || {
            let mut tape = Tape::new();
            let e = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]));
            let mut rng = rng::stream(5, Stream::Mask);
            let out = mask_embedding(&mut tape, &[e, e], 0, MaskStrategy::Random, &mut rng).unwrap();
            tape.value(out[0]).clone()
        };
        let a = draw();
        assert_eq!(a, draw());
        assert!(a.data().iter().any(|x| *x != 0.0));
    }

    #[test]
    fn mean_mask_uses_batch_mean() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::matrix(2, 2, vec![1.0, 1.0, 3.0, 3.0]));
        let mut rng = rng::stream(0, Stream::Mask);
        let out = mask_embedding(&mut tape, &[e, e], 0, MaskStrategy::Mean, &mut rng).unwrap();
        assert_eq!(tape.value(out[0]).data(), &[2.0, 2.0, 2.0, 2.0]);
        assert!(matches!(replacement(MaskStrategy::Mean, &[], 1, 2, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn uniqueness_examples() {
        let w = LossWeights::default();
        // n = 2, i = 0: positive is pass 1, negative is pass 0.
        let mut t = Tape::new();
        let anchor = vec_node(&mut t, &[0.0, 0.0]);
        let neg = vec_node(&mut t, &[2.0, 0.0]);
        let row = PassRow::full(anchor, &[neg, anchor]);
        let l = uniqueness_loss(&mut t, 0, &row, &w).unwrap();
        assert_eq!(loss_of(&mut t, l), 0.0);

        let pos = vec_node(&mut t, &[0.0, 1.0]);
        let row = PassRow::full(anchor, &[anchor, pos]);
        let l = uniqueness_loss(&mut t, 0, &row, &w).unwrap();
        assert_eq!(loss_of(&mut t, l), 2.0);
    }

    #[test]
    fn uniqueness_matches_direct_formula() {
        let mut rng = rng::stream(1, Stream::GradCheck);
        let mut draw = || -> Vec<f64> { (0..3).map(|_| rng::uniform(&mut rng, -1.0, 1.0)).collect() };
        let (y0, y1, y2) = (draw(), draw(), draw());
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        for (i, expected) in [(0, (dist(&y0, &y2) - dist(&y0, &y1) + 1.0).max(0.0)), (1, (dist(&y0, &y1) - dist(&y0, &y2) + 1.0).max(0.0))] {
            let mut t = Tape::new();
            let a = vec_node(&mut t, &y0);
            let m1 = vec_node(&mut t, &y1);
            let m2 = vec_node(&mut t, &y2);
            let l = uniqueness_loss(&mut t, i, &PassRow::full(a, &[m1, m2]), &LossWeights::default()).unwrap();
            assert!((loss_of(&mut t, l) - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn cosine_loss_examples() {
        let cases = [([1.0, 2.0], [1.0, 2.0], 1.0), ([1.0, 0.0], [0.0, 3.0], 0.0), ([1.0, 2.0], [-1.0, -2.0], -1.0)];
        for (clean, other, cos) in cases {
            let mut t = Tape::new();
            let a = vec_node(&mut t, &clean);
            let b = vec_node(&mut t, &other);
            let row = PassRow::full(a, &[b, b]);
            let s = synergy_loss(&mut t, &row).unwrap();
            let r = redundancy_loss(&mut t, &row).unwrap();
            assert!((loss_of(&mut t, s) - cos).abs() < 1e-15);
            assert!((loss_of(&mut t, r) - (1.0 - cos)).abs() < 1e-15);
        }
        // zero vectors: similarity 0, no NaN
        let mut t = Tape::new();
        let z = vec_node(&mut t, &[0.0, 0.0]);
        let s = synergy_loss(&mut t, &PassRow::full(z, &[z, z])).unwrap();
        assert_eq!(loss_of(&mut t, s), 0.0);
    }

    #[test]
    fn regression_examples() {
        let w = LossWeights::default();
        let mut t = Tape::new();
        let a = vec_node(&mut t, &[1.5]);
        let red = regression_interaction_loss(&mut t, ExpertKind::Redundancy, &PassRow::full(a, &[a, a]), &w).unwrap();
        assert_eq!(loss_of(&mut t, red), 0.0);

        let far = vec_node(&mut t, &[3.5]);
        let syn = regression_interaction_loss(&mut t, ExpertKind::Synergy, &PassRow::full(a, &[far, far]), &w).unwrap();
        assert_eq!(loss_of(&mut t, syn), 0.0);

        let neg = vec_node(&mut t, &[1.5 + 3f64.sqrt()]);
        let uni = regression_interaction_loss(&mut t, ExpertKind::Uniqueness(0), &PassRow::full(a, &[neg, a]), &w).unwrap();
        assert_eq!(loss_of(&mut t, uni), 0.0);

        let wide = vec_node(&mut t, &[1.0, 2.0]);
        assert!(regression_interaction_loss(&mut t, ExpertKind::Synergy, &PassRow::full(wide, &[wide, wide]), &w).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert!((total_loss_value(0.5, &[0.2, 0.4, 0.6, 0.8], 0.5) - 0.75).abs() < 1e-15);
        assert_eq!(total_loss_value(0.123, &[5.0, 7.0], 0.0), 0.123);
        let mut t = Tape::new();
        let task = t.constant(Tensor::scalar(0.5));
        let losses: Vec<NodeId> = [0.2, 0.4, 0.6, 0.8].iter().map(|&v| t.constant(Tensor::scalar(v))).collect();
        let total = total_loss(&mut t, task, &losses, 0.5).unwrap();
        assert!((t.value(total).item() - 0.75).abs() < 1e-15);
        let total = total_loss(&mut t, task, &losses, 0.0).unwrap();
        assert_eq!(t.value(total).item(), 0.5);
    }

    #[test]
    fn forward_multiple_shapes() {
        for n in 2..=4 {
            let model = InteractionMoe::new(ModelConfig::new(vec![3; n], 2), 0).unwrap();
            let mut g = Graph::training(&model);
            let inputs = vec![Tensor::matrix(4, 3, vec![0.5; 12]); n];
            let emb = model.encode(&mut g, &inputs).unwrap();
            let mut rng = rng::stream(0, Stream::Mask);
            let bundle = forward_multiple(&model, &mut g, &emb, MaskStrategy::Random, &mut rng, &PassSelection::All).unwrap();
            assert_eq!(bundle.experts.len(), n + 2);
            assert!(bundle.passes_per_expert().iter().all(|&p| p == n + 1));
            assert_eq!(g.tape.count("masked"), (n + 2) * n);
            for e in &bundle.experts {
                let shape = g.tape.value(e.clean.logits).shape().to_vec();
                assert!(e.masked.iter().flatten().all(|m| g.tape.value(m.output.logits).shape() == shape.as_slice()));
            }
        }
    }

    #[test]
    fn zero_model_losses_are_finite() {
        let model = InteractionMoe::zeroed(ModelConfig::new(vec![2, 2], 2)).unwrap();
        let mut g = Graph::training(&model);
        let inputs = vec![Tensor::matrix(3, 2, vec![1.0; 6]); 2];
        let emb = model.encode(&mut g, &inputs).unwrap();
        let mut rng = rng::stream(0, Stream::Mask);
        let bundle = forward_multiple(&model, &mut g, &emb, MaskStrategy::Random, &mut rng, &PassSelection::All).unwrap();
        for e in &bundle.experts {
            assert!(g.tape.value(e.clean.logits).data().iter().all(|x| *x == 0.0));
            let row = e.row(LossTarget::Outputs);
            let l = interaction_loss(&mut g.tape, e.kind, &row, &LossWeights::default(), false).unwrap();
            assert!(g.tape.value(l).item().is_finite());
        }
    }

    #[test]
    fn less_forward_runs_only_selected_passes() {
        let model = InteractionMoe::new(ModelConfig::new(vec![3; 4], 2), 1).unwrap();
        let mut g = Graph::training(&model);
        let inputs = vec![Tensor::matrix(5, 3, (0..15).map(|x| x as f64 / 10.0).collect()); 4];
        let emb = model.encode(&mut g, &inputs).unwrap();
        let mut rng = rng::stream(0, Stream::LessForward);
        let sel = PassSelection::two_per_sample(5, 4, &mut rng);
        let PassSelection::PerSample(s) = &sel else { unreachable!() };
        assert!(s.iter().all(|m| m.len() == 2 && m[0] != m[1]));
        let masked_rows: usize = s.iter().map(Vec::len).sum();
        let mut mrng = rng::stream(0, Stream::Mask);
        let bundle = forward_multiple(&model, &mut g, &emb, MaskStrategy::Random, &mut mrng, &sel).unwrap();
        let covered: usize = bundle.experts[0].masked.iter().flatten().map(|m| m.rows.as_ref().unwrap().len()).sum();
        assert_eq!(covered, masked_rows);
        for e in &bundle.experts {
            let row = e.row(LossTarget::Outputs);
            let l = interaction_loss(&mut g.tape, e.kind, &row, &LossWeights::default(), false).unwrap();
            assert!(g.tape.value(l).item().is_finite());
        }
    }

    /// Every interaction loss differentiated through a whole model agrees with
    /// central differences on the parameters.
    #[test]
    fn interaction_loss_gradients_match_finite_differences() {
        let mut cfg = ModelConfig::new(vec![3, 2], 3);
        cfg.hidden_dim = 4;
        cfg.activation = crate::model::Activation::Tanh;
        let model = InteractionMoe::new(cfg, 4).unwrap();
        let inputs = vec![
            Tensor::matrix(2, 3, vec![0.3, -0.2, 0.9, -0.5, 0.1, 0.4]),
            Tensor::matrix(2, 2, vec![0.7, -0.6, 0.2, 0.8]),
        ];
        for regression in [false, true] {
            let mut model = model.clone();
            if regression {
                let mut cfg = model.config().clone();
                cfg.output_dim = 1;
                model = InteractionMoe::new(cfg, 4).unwrap();
            }
            for expert in 0..model.num_experts() {
                let err = check_gradients(
                    |_, tape| {
                        let mut g = Graph::training(&model);
                        let contract = |e: Error| crate::diffcore::DiffError::Contract(e.to_string());
                        let emb = model.encode(&mut g, &inputs).map_err(contract)?;
                        let mut rng = rng::stream(2, Stream::Mask);
                        let bundle = forward_multiple(&model, &mut g, &emb, MaskStrategy::Random, &mut rng, &PassSelection::All)
                            .map_err(contract)?;
                        let e = &bundle.experts[expert];
                        let weights = LossWeights { synergy_margin: 50.0, ..LossWeights::default() };
                        let loss = interaction_loss(&mut g.tape, e.kind, &e.row(LossTarget::Outputs), &weights, regression)
                            .map_err(contract)?;
                        let leaves: Vec<NodeId> = g.bound_params().map(|(_, n)| n).collect();
                        *tape = std::mem::take(&mut g.tape);
                        Ok((loss, leaves))
                    },
                    1e-5,
                    1,
                    0,
                )
                .unwrap();
                assert!(err < 1e-4, "expert {expert} regression={regression}: {err}");
            }
        }
    }

    #[test]
    fn synergy_plus_redundancy_is_one_per_pair() {
        let mut rng = rng::stream(8, Stream::GradCheck);
        for _ in 0..20 {
            let mut t = Tape::new();
            let mut node = |t: &mut Tape| {
                let v: Vec<f64> = (0..4).map(|_| rng::uniform(&mut rng, -1.0, 1.0)).collect();
                t.constant(Tensor::matrix(1, 4, v))
            };
            let (a, b, c) = (node(&mut t), node(&mut t), node(&mut t));
            let row = PassRow::full(a, &[b, c]);
            let s = synergy_loss(&mut t, &row).unwrap();
            let r = redundancy_loss(&mut t, &row).unwrap();
            assert!((t.value(s).item() + t.value(r).item() - 1.0).abs() < 1e-12);
            let swapped = PassRow::full(a, &[c, b]);
            let s2 = synergy_loss(&mut t, &swapped).unwrap();
            assert!((t.value(s).item() - t.value(s2).item()).abs() < 1e-15);
        }
    }
}
