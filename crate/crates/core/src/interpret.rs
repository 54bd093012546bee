//! Per-sample and test-set interpretation of a trained model: expert weights,
//! contributions, agreement between experts and standalone expert scores.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::InteractionMoe;
use crate::synthdata::{format_f64, Dataset, TaskKind, Targets};
use crate::trainer::{compute_metrics, predicted_classes, predicted_labels, Metrics};

/// A label or prediction in the task's own terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Outcome {
    Class(usize),
    /// Indices of the positive labels.
    Labels(Vec<usize>),
    Value(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalRecord {
    pub index: usize,
    pub weights: Vec<f64>,
    pub expert_logits: Vec<Vec<f64>>,
    /// `weights[i] * expert_logits[i]`.
    pub contributions: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub prediction: Outcome,
    pub label: Outcome,
    /// `None` for regression.
    pub correct: Option<bool>,
}

fn positive_set(flags: &[bool]) -> Vec<usize> {
    flags.iter().enumerate().filter(|(_, &f)| f).map(|(j, _)| j).collect()
}

fn outcomes(logits: &Tensor, task: TaskKind) -> Vec<Outcome> {
    match task {
        TaskKind::Multiclass => predicted_classes(logits).into_iter().map(Outcome::Class).collect(),
        TaskKind::Multilabel => predicted_labels(logits).iter().map(|f| Outcome::Labels(positive_set(f))).collect(),
        TaskKind::Regression => (0..logits.rows()).map(|r| Outcome::Value(logits.row(r)[0])).collect(),
    }
}

fn labels(targets: &Targets) -> Vec<Outcome> {
    match targets {
        Targets::Classes(y) => y.iter().map(|&c| Outcome::Class(c)).collect(),
        Targets::Multilabel(t) => {
            (0..t.rows()).map(|r| Outcome::Labels(positive_set(&t.row(r).iter().map(|&v| v > 0.5).collect::<Vec<_>>()))).collect()
        }
        Targets::Regression(y) => y.iter().map(|&v| Outcome::Value(v)).collect(),
    }
}

/// One record per sample of `dataset`, in row order.
pub fn local_report(model: &InteractionMoe, dataset: &Dataset) -> Result<Vec<LocalRecord>> {
    let p = model.predict(&dataset.all_inputs())?;
    let task = dataset.task_kind();
    let predictions = outcomes(&p.logits, task);
    let labels = labels(&dataset.targets);
    let records = (0..dataset.len())
        .zip(predictions)
        .zip(labels)
        .map(|((r, prediction), label)| {
            let weights = p.weights.row(r).to_vec();
            let expert_logits: Vec<Vec<f64>> = p.expert_logits.iter().map(|l| l.row(r).to_vec()).collect();
            let contributions = expert_logits.iter().zip(&weights).map(|(l, &w)| l.iter().map(|v| w * v).collect()).collect();
            let correct = (task != TaskKind::Regression).then(|| prediction == label);
            LocalRecord { index: r, weights, expert_logits, contributions, logits: p.logits.row(r).to_vec(), prediction, label, correct }
        })
        .collect();
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertWeightStats {
    pub expert: String,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    /// Population standard deviation.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalReport {
    pub samples: usize,
    pub experts: Vec<ExpertWeightStats>,
    /// `[sample][expert]`, in record order.
    pub weights: Vec<Vec<f64>>,
}

impl GlobalReport {
    /// Index of the expert with the largest mean weight; `None` on a tie.
    pub fn dominant(&self) -> Option<usize> {
        let best = (0..self.experts.len()).max_by(|&a, &b| self.experts[a].mean.total_cmp(&self.experts[b].mean))?;
        let top = self.experts[best].mean;
        (self.experts.iter().filter(|e| e.mean == top).count() == 1).then_some(best)
    }
}

fn column_stats(expert: String, mut values: Vec<f64>) -> ExpertWeightStats {
    // sorting first makes every statistic independent of record order
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let mid = values.len() / 2;
    let median = if values.len() % 2 == 1 { values[mid] } else { (values[mid - 1] + values[mid]) / 2.0 };
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    ExpertWeightStats { expert, mean, median, min: values[0], max: values[values.len() - 1], std }
}

/// Weight statistics per expert; `names` labels the columns.
pub fn global_report(records: &[LocalRecord], names: &[String]) -> Result<GlobalReport> {
    let Some(first) = records.first() else {
        return Err(Error::Contract("global report needs at least one record".into()));
    };
    let e = first.weights.len();
    if names.len() != e || records.iter().any(|r| r.weights.len() != e) {
        return Err(Error::Contract("every record needs one weight per named expert".into()));
    }
    let experts = names
        .iter()
        .enumerate()
        .map(|(i, name)| column_stats(name.clone(), records.iter().map(|r| r.weights[i]).collect()))
        .collect();
    Ok(GlobalReport { samples: records.len(), experts, weights: records.iter().map(|r| r.weights.clone()).collect() })
}

/// Percentages of samples by (all experts agree, ensemble correct).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementTable {
    pub samples: usize,
    pub disagree_correct: f64,
    pub disagree_incorrect: f64,
    pub agree_correct: f64,
    pub agree_incorrect: f64,
}

impl AgreementTable {
    pub fn total(&self) -> f64 {
        self.disagree_correct + self.disagree_incorrect + self.agree_correct + self.agree_incorrect
    }

    pub fn rows(&self) -> [(&'static str, f64); 4] {
        [
            ("Disagree, correct", self.disagree_correct),
            ("Disagree, incorrect", self.disagree_incorrect),
            ("Agree, correct", self.agree_correct),
            ("Agree, incorrect", self.agree_incorrect),
        ]
    }
}

pub fn agreement_analysis(model: &InteractionMoe, dataset: &Dataset) -> Result<AgreementTable> {
    let task = dataset.task_kind();
    if task == TaskKind::Regression {
        return Err(Error::Unsupported("agreement analysis needs a classification task".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Contract("agreement analysis needs at least one sample".into()));
    }
    let p = model.predict(&dataset.all_inputs())?;
    let per_expert: Vec<Vec<Outcome>> = p.expert_logits.iter().map(|l| outcomes(l, task)).collect();
    let ensemble = outcomes(&p.logits, task);
    let truth = labels(&dataset.targets);
    let mut counts = [0usize; 4];
    for r in 0..dataset.len() {
        let agree = per_expert.iter().all(|o| o[r] == per_expert[0][r]);
        let correct = ensemble[r] == truth[r];
        counts[match (agree, correct) {
            (false, true) => 0,
            (false, false) => 1,
            (true, true) => 2,
            (true, false) => 3,
        }] += 1;
    }
    let pct = |c: usize| 100.0 * c as f64 / dataset.len() as f64;
    Ok(AgreementTable {
        samples: dataset.len(),
        disagree_correct: pct(counts[0]),
        disagree_incorrect: pct(counts[1]),
        agree_correct: pct(counts[2]),
        agree_incorrect: pct(counts[3]),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExpertScore {
    /// Expert name, or `ensemble`.
    pub name: String,
    pub value: f64,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExpertComparison {
    pub metric: String,
    /// One row per expert, then the ensemble.
    pub rows: Vec<ExpertScore>,
}

impl ExpertComparison {
    pub fn ensemble(&self) -> &ExpertScore {
        self.rows.last().expect("ensemble row")
    }

    pub fn experts(&self) -> &[ExpertScore] {
        &self.rows[..self.rows.len() - 1]
    }
}

/// Scores each expert on its own logits, then the weighted ensemble.
pub fn expert_accuracy_comparison(model: &InteractionMoe, dataset: &Dataset) -> Result<ExpertComparison> {
    let p = model.predict(&dataset.all_inputs())?;
    let mut rows = Vec::with_capacity(p.expert_logits.len() + 1);
    for (kind, logits) in model.expert_kinds().iter().zip(&p.expert_logits) {
        let metrics = compute_metrics(logits, &dataset.targets)?;
        rows.push(ExpertScore { name: kind.to_string(), value: metrics.headline(), metrics });
    }
    let metrics = compute_metrics(&p.logits, &dataset.targets)?;
    let metric = metrics.headline_name().to_string();
    rows.push(ExpertScore { name: "ensemble".into(), value: metrics.headline(), metrics });
    Ok(ExpertComparison { metric, rows })
}

/// Everything the interpret command writes.
#[derive(Clone, Debug)]
pub struct Reports {
    pub local: Vec<LocalRecord>,
    pub global: GlobalReport,
    /// `None` for regression.
    pub agreement: Option<AgreementTable>,
    pub experts: ExpertComparison,
}

pub fn build_reports(model: &InteractionMoe, dataset: &Dataset) -> Result<Reports> {
    let names: Vec<String> = model.expert_kinds().iter().map(|k| k.to_string()).collect();
    let local = local_report(model, dataset)?;
    let global = global_report(&local, &names)?;
    let agreement = match agreement_analysis(model, dataset) {
        Ok(t) => Some(t),
        Err(Error::Unsupported(_)) => None,
        Err(e) => return Err(e),
    };
    let experts = expert_accuracy_comparison(model, dataset)?;
    Ok(Reports { local, global, agreement, experts })
}

/// Writes `local.jsonl`, `global.json`, `agreement.json` (classification only),
/// `experts.csv` and the long-format `weights_long.csv`.
pub fn write_reports(reports: &Reports, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut local = BufWriter::new(File::create(dir.join("local.jsonl"))?);
    for record in &reports.local {
        serde_json::to_writer(&mut local, record)?;
        local.write_all(b"\n")?;
    }
    local.flush()?;
    std::fs::write(dir.join("global.json"), serde_json::to_string_pretty(&reports.global)?)?;
    if let Some(table) = &reports.agreement {
        std::fs::write(dir.join("agreement.json"), serde_json::to_string_pretty(table)?)?;
    }

    let mut experts = csv::Writer::from_path(dir.join("experts.csv")).map_err(csv_error)?;
    experts.write_record(["expert", &reports.experts.metric]).map_err(csv_error)?;
    for row in &reports.experts.rows {
        experts.write_record([row.name.as_str(), &format_f64(row.value)]).map_err(csv_error)?;
    }
    experts.flush()?;

    let mut long = csv::Writer::from_path(dir.join("weights_long.csv")).map_err(csv_error)?;
    long.write_record(["sample", "expert", "weight"]).map_err(csv_error)?;
    for (record, weights) in reports.local.iter().zip(&reports.global.weights) {
        for (stats, w) in reports.global.experts.iter().zip(weights) {
            long.write_record([record.index.to_string(), stats.expert.clone(), format_f64(*w)]).map_err(csv_error)?;
        }
    }
    long.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
