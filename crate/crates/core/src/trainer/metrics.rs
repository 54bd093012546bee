use serde::{Deserialize, Serialize};

use crate::diffcore::{softmax_rows, Tensor};
use crate::error::{Error, Result};
use crate::synthdata::{TaskKind, Targets};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub class: usize,
    pub support: usize,
    pub predicted: usize,
    pub true_positive: usize,
}

impl ClassCounts {
    /// 0 when the class is neither present nor predicted.
    pub fn f1(&self) -> f64 {
        let denom = self.support + self.predicted;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.true_positive as f64 / denom as f64
        }
    }
}

/// Evaluation summary. Fields that do not apply to the task are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub task_kind: TaskKind,
    pub samples: usize,
    pub accuracy: Option<f64>,
    pub auroc: Option<f64>,
    pub micro_f1: Option<f64>,
    pub macro_f1: Option<f64>,
    pub mse: Option<f64>,
    pub per_class: Vec<ClassCounts>,
}

impl Metrics {
    /// Accuracy for classification, MSE for regression.
    pub fn headline(&self) -> f64 {
        match self.task_kind {
            TaskKind::Regression => self.mse.unwrap_or(f64::NAN),
            _ => self.accuracy.unwrap_or(f64::NAN),
        }
    }

    pub fn headline_name(&self) -> &'static str {
        match self.task_kind {
            TaskKind::Regression => "mse",
            _ => "accuracy",
        }
    }
}

/// Area under the ROC curve by the Mann–Whitney statistic; tied scores
/// count one half. `None` without both positives and negatives.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len(), "scores and labels differ in length");
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average 1-based ranks over ties
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg_rank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per row (argmax; first index wins ties).
pub fn predicted_classes(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows()).map(|r| argmax(logits.row(r))).collect()
}

/// Thresholded label sets (`logit > 0`).
pub fn predicted_labels(logits: &Tensor) -> Vec<Vec<bool>> {
    (0..logits.rows()).map(|r| logits.row(r).iter().map(|&v| v > 0.0).collect()).collect()
}

fn macro_auroc(scores: &Tensor, positive: impl Fn(usize, usize) -> bool) -> Option<f64> {
    let classes = scores.cols();
    let rows = scores.rows();
    let per_class: Vec<f64> = (0..classes)
        .filter_map(|c| {
            let s: Vec<f64> = (0..rows).map(|r| scores.row(r)[c]).collect();
            let p: Vec<bool> = (0..rows).map(|r| positive(r, c)).collect();
            auroc(&s, &p)
        })
        .collect();
    if per_class.is_empty() {
        None
    } else {
        Some(per_class.iter().sum::<f64>() / per_class.len() as f64)
    }
}

/// Metrics of `logits` (`[samples, outputs]`) against `targets`.
pub fn compute_metrics(logits: &Tensor, targets: &Targets) -> Result<Metrics> {
    let n = targets.len();
    if n == 0 {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    if logits.rows() != n {
        return Err(Error::Contract(format!("{} predictions for {n} targets", logits.rows())));
    }
    let empty = |task_kind| Metrics {
        task_kind,
        samples: n,
        accuracy: None,
        auroc: None,
        micro_f1: None,
        macro_f1: None,
        mse: None,
        per_class: Vec::new(),
    };
    match targets {
        Targets::Regression(y) => {
            if logits.cols() != 1 {
                return Err(Error::Contract("regression needs one output".into()));
            }
            let mse = logits.data().iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n as f64;
            Ok(Metrics { mse: Some(mse), ..empty(TaskKind::Regression) })
        }
        Targets::Classes(y) => {
            let classes = logits.cols();
            if y.iter().any(|&c| c >= classes) {
                return Err(Error::Contract("class label outside the output range".into()));
            }
            let pred = predicted_classes(logits);
            let mut per_class: Vec<ClassCounts> =
                (0..classes).map(|class| ClassCounts { class, support: 0, predicted: 0, true_positive: 0 }).collect();
            for (&p, &t) in pred.iter().zip(y) {
                per_class[t].support += 1;
                per_class[p].predicted += 1;
                if p == t {
                    per_class[t].true_positive += 1;
                }
            }
            let correct: usize = per_class.iter().map(|c| c.true_positive).sum();
            let accuracy = correct as f64 / n as f64;
            // single-label: micro precision = micro recall = accuracy
            let micro_f1 = accuracy;
            let macro_f1 = per_class.iter().map(ClassCounts::f1).sum::<f64>() / classes as f64;
            let probs = softmax_rows(logits, 1.0);
            let auroc = if classes == 2 {
                let s: Vec<f64> = (0..n).map(|r| probs.row(r)[1]).collect();
                let p: Vec<bool> = y.iter().map(|&c| c == 1).collect();
                auroc(&s, &p)
            } else {
                macro_auroc(&probs, |r, c| y[r] == c)
            };
            Ok(Metrics {
                accuracy: Some(accuracy),
                auroc,
                micro_f1: Some(micro_f1),
                macro_f1: Some(macro_f1),
                per_class,
                ..empty(TaskKind::Multiclass)
            })
        }
        Targets::Multilabel(t) => {
            let classes = t.cols();
            if logits.cols() != classes {
                return Err(Error::Contract("one logit per label expected".into()));
            }
            let pred = predicted_labels(logits);
            let mut per_class: Vec<ClassCounts> =
                (0..classes).map(|class| ClassCounts { class, support: 0, predicted: 0, true_positive: 0 }).collect();
            let mut exact = 0;
            for (r, p) in pred.iter().enumerate() {
                let truth: Vec<bool> = t.row(r).iter().map(|&v| v == 1.0).collect();
                if *p == truth {
                    exact += 1;
                }
                for c in 0..classes {
                    per_class[c].support += usize::from(truth[c]);
                    per_class[c].predicted += usize::from(p[c]);
                    per_class[c].true_positive += usize::from(p[c] && truth[c]);
                }
            }
            let tp: usize = per_class.iter().map(|c| c.true_positive).sum();
            let denom: usize = per_class.iter().map(|c| c.support + c.predicted).sum();
            let micro_f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
            let macro_f1 = per_class.iter().map(ClassCounts::f1).sum::<f64>() / classes as f64;
            let auroc = macro_auroc(logits, |r, c| t.row(r)[c] == 1.0);
            Ok(Metrics {
                accuracy: Some(exact as f64 / n as f64),
                auroc,
                micro_f1: Some(micro_f1),
                macro_f1: Some(macro_f1),
                per_class,
                ..empty(TaskKind::Multilabel)
            })
        }
    }
}
