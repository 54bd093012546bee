//! Synthetic multimodal datasets whose dominant interaction is known by
//! construction, and the on-disk dataset format.
//!
//! Each modality embeds one latent value in its first feature; the remaining
//! features are noise. For classification the latent is a uniform bit in
//! {-1, +1}, for regression a uniform value in [-1, 1]. Noise is
//! `noise_sigma · N(0, 1)`. Modalities that carry no label information still
//! embed an independent latent, so only the label relation tells the
//! interaction types apart.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::ExpertKind;
use crate::rng::{self, Stream, StreamRng};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Multiclass,
    Multilabel,
    Regression,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Multiclass => "multiclass",
            TaskKind::Multilabel => "multilabel",
            TaskKind::Regression => "regression",
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiclass" => Ok(TaskKind::Multiclass),
            "multilabel" => Ok(TaskKind::Multilabel),
            "regression" => Ok(TaskKind::Regression),
            other => Err(Error::Config(format!("unknown task kind '{other}'"))),
        }
    }
}

/// Ground-truth interaction behind a synthetic sample. Uniqueness indices are
/// 0-based; the text form is 1-based (`uniqueness-1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InteractionTag {
    Uniqueness(usize),
    Synergy,
    Redundancy,
}

impl InteractionTag {
    /// Tags in expert order for `n` modalities.
    pub fn all(n: usize) -> Vec<InteractionTag> {
        (0..n).map(InteractionTag::Uniqueness).chain([InteractionTag::Synergy, InteractionTag::Redundancy]).collect()
    }

    pub fn expert_kind(self) -> ExpertKind {
        match self {
            InteractionTag::Uniqueness(k) => ExpertKind::Uniqueness(k),
            InteractionTag::Synergy => ExpertKind::Synergy,
            InteractionTag::Redundancy => ExpertKind::Redundancy,
        }
    }
}

impl fmt::Display for InteractionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InteractionTag::Uniqueness(k) => write!(f, "uniqueness-{}", k + 1),
            InteractionTag::Synergy => f.write_str("synergy"),
            InteractionTag::Redundancy => f.write_str("redundancy"),
        }
    }
}

impl FromStr for InteractionTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synergy" => Ok(InteractionTag::Synergy),
            "redundancy" => Ok(InteractionTag::Redundancy),
            _ => s
                .strip_prefix("uniqueness-")
                .and_then(|k| k.parse::<usize>().ok())
                .filter(|&k| k >= 1)
                .map(|k| InteractionTag::Uniqueness(k - 1))
                .ok_or_else(|| Error::Input(format!("unknown interaction tag '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// Class index per sample.
    Classes(Vec<usize>),
    /// `[samples, classes]` 0/1 indicators.
    Multilabel(Tensor),
    Regression(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Multilabel(t) => t.rows(),
            Targets::Regression(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task_kind(&self) -> TaskKind {
        match self {
            Targets::Classes(_) => TaskKind::Multiclass,
            Targets::Multilabel(_) => TaskKind::Multilabel,
            Targets::Regression(_) => TaskKind::Regression,
        }
    }

    fn subset(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(rows.iter().map(|&r| c[r]).collect()),
            Targets::Multilabel(t) => Targets::Multilabel(gather(t, rows)),
            Targets::Regression(v) => Targets::Regression(rows.iter().map(|&r| v[r]).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Modality {
    pub name: String,
    /// `[samples, dim]`.
    pub features: Tensor,
}

/// Aligned per-modality feature tables plus targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// Classes for classification tasks, 1 for regression.
    pub num_classes: usize,
    pub modalities: Vec<Modality>,
    pub targets: Targets,
    pub tags: Option<Vec<InteractionTag>>,
}

fn gather(t: &Tensor, rows: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::matrix(rows.len(), c, data)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task_kind(&self) -> TaskKind {
        self.targets.task_kind()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.modalities.iter().map(|m| m.features.cols()).collect()
    }

    /// Width of the model output for this task.
    pub fn output_dim(&self) -> usize {
        match self.task_kind() {
            TaskKind::Regression => 1,
            _ => self.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Input("dataset has no samples".into()));
        }
        if self.modalities.is_empty() {
            return Err(Error::Input("dataset has no modalities".into()));
        }
        for m in &self.modalities {
            if m.features.rows() != n {
                return Err(Error::Input(format!("modality '{}' has {} rows, targets have {n}", m.name, m.features.rows())));
            }
        }
        if let Some(tags) = &self.tags {
            if tags.len() != n {
                return Err(Error::Input(format!("{} tags for {n} samples", tags.len())));
            }
        }
        match &self.targets {
            Targets::Classes(c) => {
                if self.num_classes < 2 || c.iter().any(|&y| y >= self.num_classes) {
                    return Err(Error::Input(format!("class labels must lie in 0..{}", self.num_classes)));
                }
            }
            Targets::Multilabel(t) => {
                if t.cols() != self.num_classes || t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Input("multilabel targets must be 0/1 with one column per class".into()));
                }
            }
            Targets::Regression(v) => {
                if self.num_classes != 1 || v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Input("regression targets must be finite with num_classes = 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Rows `rows` of every table, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            num_classes: self.num_classes,
            modalities: self
                .modalities
                .iter()
                .map(|m| Modality { name: m.name.clone(), features: gather(&m.features, rows) })
                .collect(),
            targets: self.targets.subset(rows),
            tags: self.tags.as_ref().map(|t| rows.iter().map(|&r| t[r]).collect()),
        }
    }

    /// Per-modality input batches for `rows`.
    pub fn inputs(&self, rows: &[usize]) -> Vec<Tensor> {
        self.modalities.iter().map(|m| gather(&m.features, rows)).collect()
    }

    /// Every sample as model input.
    pub fn all_inputs(&self) -> Vec<Tensor> {
        self.modalities.iter().map(|m| m.features.clone()).collect()
    }
}

/// Which generator to run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenKind {
    /// Label carried by modality `k` (0-based) only.
    Unique(usize),
    Redundant,
    SynergyXor,
    /// Per-sample draw of a sub-generator; proportions in expert order
    /// `[unique_1..unique_n, synergy, redundant]`.
    Mixture(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub n_samples: usize,
    pub dims: Vec<usize>,
    pub noise_sigma: f64,
    pub seed: u64,
    pub kind: GenKind,
    /// `Multiclass` (binary labels) or `Regression`.
    pub task: TaskKind,
}

impl GenSpec {
    pub fn new(kind: GenKind, n_samples: usize, dims: Vec<usize>, noise_sigma: f64, seed: u64) -> Self {
        Self { n_samples, dims, noise_sigma, seed, kind, task: TaskKind::Multiclass }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dims.len();
        if n < 2 {
            return Err(Error::Config(format!("generators need at least 2 modalities, got {n}")));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("modality dims must be >= 1".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.task == TaskKind::Multilabel {
            return Err(Error::Config("generators produce multiclass or regression targets".into()));
        }
        match &self.kind {
            GenKind::Unique(k) if *k >= n => Err(Error::Config(format!("unique modality {} out of range for {n}", k + 1))),
            GenKind::Mixture(p) => {
                if p.len() != n + 2 {
                    return Err(Error::Config(format!("mixture needs {} proportions for {n} modalities, got {}", n + 2, p.len())));
                }
                if p.iter().any(|x| !(*x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::Config("mixture proportions must be non-negative and sum to 1".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn name(&self) -> String {
        match &self.kind {
            GenKind::Unique(k) => format!("unique-{}", k + 1),
            GenKind::Redundant => "redundant".into(),
            GenKind::SynergyXor => "synergy-xor".into(),
            GenKind::Mixture(_) => "mixture".into(),
        }
    }
}

fn draw_latent(task: TaskKind, rng: &mut StreamRng) -> f64 {
    match task {
        TaskKind::Regression => rng::uniform(rng, -1.0, 1.0),
        _ => {
            if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            }
        }
    }
}

/// Latents per modality and the target of one sample of `tag`.
fn draw_sample(tag: InteractionTag, n: usize, task: TaskKind, rng: &mut StreamRng) -> (Vec<f64>, f64) {
    let mut latents: Vec<f64> = (0..n).map(|_| draw_latent(task, rng)).collect();
    let class = |positive: bool| if positive { 1.0 } else { 0.0 };
    let target = match tag {
        InteractionTag::Uniqueness(k) => match task {
            TaskKind::Regression => latents[k],
            _ => class(latents[k] > 0.0),
        },
        InteractionTag::Redundancy => {
            let z = latents[0];
            latents.iter_mut().for_each(|l| *l = z);
            match task {
                TaskKind::Regression => z,
                _ => class(z > 0.0),
            }
        }
        InteractionTag::Synergy => match task {
            TaskKind::Regression => latents[0] * latents[1],
            _ => class((latents[0] > 0.0) != (latents[1] > 0.0)),
        },
    };
    (latents, target)
}

fn pick_component(proportions: &[f64], n: usize, rng: &mut StreamRng) -> InteractionTag {
    let u: f64 = rng.random();
    let tags = InteractionTag::all(n);
    let mut acc = 0.0;
    for (tag, p) in tags.iter().zip(proportions) {
        acc += p;
        if u < acc {
            return *tag;
        }
    }
    // roundoff at the top end: last component with positive mass
    tags.into_iter().zip(proportions).rev().find(|(_, p)| **p > 0.0).map(|(t, _)| t).expect("proportions sum to 1")
}

/// Runs the generator described by `spec`.
pub fn generate(spec: &GenSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.dims.len();
    let mut rng = rng::stream(spec.seed, Stream::Generate);
    let mut features: Vec<Vec<f64>> = spec.dims.iter().map(|d| Vec::with_capacity(d * spec.n_samples)).collect();
    let mut targets = Vec::with_capacity(spec.n_samples);
    let mut tags = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let tag = match &spec.kind {
            GenKind::Unique(k) => InteractionTag::Uniqueness(*k),
            GenKind::Redundant => InteractionTag::Redundancy,
            GenKind::SynergyXor => InteractionTag::Synergy,
            GenKind::Mixture(p) => pick_component(p, n, &mut rng),
        };
        let (latents, target) = draw_sample(tag, n, spec.task, &mut rng);
        for (m, (&dim, latent)) in spec.dims.iter().zip(latents).enumerate() {
            for j in 0..dim {
                let noise = spec.noise_sigma * rng::normal(&mut rng);
                features[m].push(if j == 0 { latent + noise } else { noise });
            }
        }
        targets.push(target);
        tags.push(tag);
    }
    let modalities = features
        .into_iter()
        .zip(&spec.dims)
        .enumerate()
        .map(|(m, (data, &dim))| Modality { name: format!("m{}", m + 1), features: Tensor::matrix(spec.n_samples, dim, data) })
        .collect();
    let (targets, num_classes) = match spec.task {
        TaskKind::Regression => (Targets::Regression(targets), 1),
        _ => (Targets::Classes(targets.into_iter().map(|t| t as usize).collect()), 2),
    };
    let dataset = Dataset { name: spec.name(), num_classes, modalities, targets, tags: Some(tags) };
    dataset.validate()?;
    Ok(dataset)
}

pub fn gen_unique(spec: &GenSpec, k: usize) -> Result<Dataset> {
    generate(&GenSpec { kind: GenKind::Unique(k), ..spec.clone() })
}

pub fn gen_redundant(spec: &GenSpec) -> Result<Dataset> {
    generate(&GenSpec { kind: GenKind::Redundant, ..spec.clone() })
}

pub fn gen_synergy_xor(spec: &GenSpec) -> Result<Dataset> {
    generate(&GenSpec { kind: GenKind::SynergyXor, ..spec.clone() })
}

pub fn gen_mixture(spec: &GenSpec, proportions: Vec<f64>) -> Result<Dataset> {
    generate(&GenSpec { kind: GenKind::Mixture(proportions), ..spec.clone() })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModalityEntry {
    pub name: String,
    pub file: String,
    pub dim: usize,
}

/// `manifest.json` of a dataset directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub name: String,
    pub task_kind: TaskKind,
    pub num_classes: usize,
    pub modalities: Vec<ModalityEntry>,
    pub labels_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags_file: Option<String>,
}

/// 17 significant digits; parses back to the same `f64`.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_table(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::load(path, e.to_string()))?;
    w.write_record(header).map_err(|e| Error::load(path, e.to_string()))?;
    for row in rows {
        w.write_record(&row).map_err(|e| Error::load(path, e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `dataset` into `dir` (created if needed).
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for m in &dataset.modalities {
        let file = format!("{}.csv", m.name);
        let dim = m.features.cols();
        let header: Vec<String> = (0..dim).map(|j| format!("{}_{j}", m.name)).collect();
        let rows = (0..m.features.rows()).map(|r| m.features.row(r).iter().map(|&x| format_f64(x)).collect());
        write_table(&dir.join(&file), &header, rows)?;
        entries.push(ModalityEntry { name: m.name.clone(), file, dim });
    }
    let labels_file = "labels.csv".to_string();
    let labels_path = dir.join(&labels_file);
    match &dataset.targets {
        Targets::Classes(c) => write_table(&labels_path, &["label".into()], c.iter().map(|y| vec![y.to_string()]))?,
        Targets::Multilabel(t) => {
            let header: Vec<String> = (0..t.cols()).map(|j| format!("class_{j}")).collect();
            let rows = (0..t.rows()).map(|r| t.row(r).iter().map(|&v| (v as u8).to_string()).collect());
            write_table(&labels_path, &header, rows)?
        }
        Targets::Regression(v) => write_table(&labels_path, &["target".into()], v.iter().map(|&y| vec![format_f64(y)]))?,
    }
    let tags_file = match &dataset.tags {
        None => None,
        Some(tags) => {
            let file = "tags.csv".to_string();
            write_table(&dir.join(&file), &["tag".into()], tags.iter().map(|t| vec![t.to_string()]))?;
            Some(file)
        }
    };
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        name: dataset.name.clone(),
        task_kind: dataset.task_kind(),
        num_classes: dataset.num_classes,
        modalities: entries,
        labels_file,
        tags_file,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Rows of a CSV file with a header, each checked to hold `width` fields.
fn read_table(path: &Path, width: Option<usize>, what: &str) -> Result<Vec<csv::StringRecord>> {
    if !path.is_file() {
        return Err(Error::load(path, format!("{what}: file not found")));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::load(path, format!("{what}: {e}")))?;
    let header_len = reader.headers().map_err(|e| Error::load(path, format!("{what}: {e}")))?.len();
    let width = width.unwrap_or(header_len);
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::load(path, format!("{what}: {e}")))?;
        if record.len() != width {
            return Err(Error::load(
                path,
                format!("{what}: manifest declares dim {width} but row {} has {} columns", i + 1, record.len()),
            ));
        }
        rows.push(record);
    }
    if header_len != width {
        return Err(Error::load(path, format!("{what}: manifest declares dim {width} but header has {header_len} columns")));
    }
    Ok(rows)
}

fn parse_field<T: FromStr>(path: &Path, what: &str, row: usize, field: &str) -> Result<T> {
    field.trim().parse().map_err(|_| Error::load(path, format!("{what}: row {row}: cannot parse '{field}'")))
}

/// Reads a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::load(&manifest_path, e.to_string()))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::load(&manifest_path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::load(&manifest_path, format!("unsupported format_version {}", manifest.format_version)));
    }

    let mut modalities = Vec::new();
    for entry in &manifest.modalities {
        let path = dir.join(&entry.file);
        let what = format!("modality '{}'", entry.name);
        let rows = read_table(&path, Some(entry.dim), &what)?;
        if rows.is_empty() {
            return Err(Error::load(&path, format!("{what}: no rows")));
        }
        let mut data = Vec::with_capacity(rows.len() * entry.dim);
        for (i, record) in rows.iter().enumerate() {
            for field in record {
                data.push(parse_field::<f64>(&path, &what, i + 1, field)?);
            }
        }
        modalities.push(Modality { name: entry.name.clone(), features: Tensor::matrix(rows.len(), entry.dim, data) });
    }

    let labels_path = dir.join(&manifest.labels_file);
    let targets = match manifest.task_kind {
        TaskKind::Multiclass => {
            let rows = read_table(&labels_path, Some(1), "labels")?;
            let classes = rows
                .iter()
                .enumerate()
                .map(|(i, r)| parse_field::<usize>(&labels_path, "labels", i + 1, &r[0]))
                .collect::<Result<Vec<_>>>()?;
            Targets::Classes(classes)
        }
        TaskKind::Multilabel => {
            let rows = read_table(&labels_path, Some(manifest.num_classes), "labels")?;
            let mut data = Vec::new();
            for (i, r) in rows.iter().enumerate() {
                for field in r {
                    data.push(f64::from(parse_field::<u8>(&labels_path, "labels", i + 1, field)?));
                }
            }
            if rows.is_empty() {
                return Err(Error::load(&labels_path, "labels: no rows"));
            }
            Targets::Multilabel(Tensor::matrix(rows.len(), manifest.num_classes, data))
        }
        TaskKind::Regression => {
            let rows = read_table(&labels_path, Some(1), "labels")?;
            let values = rows
                .iter()
                .enumerate()
                .map(|(i, r)| parse_field::<f64>(&labels_path, "labels", i + 1, &r[0]))
                .collect::<Result<Vec<_>>>()?;
            Targets::Regression(values)
        }
    };

    let tags = match &manifest.tags_file {
        None => None,
        Some(file) => {
            let path = dir.join(file);
            let rows = read_table(&path, Some(1), "tags")?;
            Some(rows.iter().map(|r| r[0].parse::<InteractionTag>()).collect::<Result<Vec<_>>>().map_err(|e| Error::load(&path, e.to_string()))?)
        }
    };

    let n = targets.len();
    for (entry, m) in manifest.modalities.iter().zip(&modalities) {
        if m.features.rows() != n {
            return Err(Error::load(
                dir.join(&entry.file),
                format!("modality '{}': {} rows but labels have {n}", entry.name, m.features.rows()),
            ));
        }
    }
    if let Some(t) = &tags {
        if t.len() != n {
            return Err(Error::load(dir, format!("tags: {} rows but labels have {n}", t.len())));
        }
    }
    let dataset = Dataset { name: manifest.name, num_classes: manifest.num_classes, modalities, targets, tags };
    dataset.validate().map_err(|e| Error::load(dir, e.to_string()))?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: GenKind, n: usize, sigma: f64) -> GenSpec {
        GenSpec::new(kind, n, vec![3, 3], sigma, 0)
    }

    /// Logistic-regression probe trained by full-batch gradient descent;
    /// returns training accuracy.
    fn probe(features: &[Vec<f64>], labels: &[usize]) -> f64 {
        let d = features[0].len();
        let mut w = vec![0.0; d + 1];
        for _ in 0..400 {
            let mut grad = vec![0.0; d + 1];
            for (x, &y) in features.iter().zip(labels) {
                let z = w[d] + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                let err = 1.0 / (1.0 + (-z).exp()) - y as f64;
                for j in 0..d {
                    grad[j] += err * x[j];
                }
                grad[d] += err;
            }
            for (wj, g) in w.iter_mut().zip(&grad) {
                *wj -= 0.5 * g / features.len() as f64;
            }
        }
        let correct = features
            .iter()
            .zip(labels)
            .filter(|(x, &y)| {
                let z = w[d] + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                (z > 0.0) == (y == 1)
            })
            .count();
        correct as f64 / labels.len() as f64
    }

    fn rows(ds: &Dataset, m: usize) -> Vec<Vec<f64>> {
        let f = &ds.modalities[m].features;
        (0..f.rows()).map(|r| f.row(r).to_vec()).collect()
    }

    fn classes(ds: &Dataset) -> Vec<usize> {
        match &ds.targets {
            Targets::Classes(c) => c.clone(),
            _ => panic!("classification expected"),
        }
    }

    #[test]
    fn unique_probes() {
        let clean = generate(&spec(GenKind::Unique(0), 2000, 0.0)).unwrap();
        assert_eq!(probe(&rows(&clean, 0), &classes(&clean)), 1.0);
        let noisy = generate(&spec(GenKind::Unique(0), 2000, 0.2)).unwrap();
        let other = probe(&rows(&noisy, 1), &classes(&noisy));
        assert!((other - 0.5).abs() <= 0.05, "other-modality probe {other}");
    }

    #[test]
    fn redundant_probes_and_noise() {
        let clean = generate(&spec(GenKind::Redundant, 500, 0.0)).unwrap();
        for m in 0..2 {
            assert_eq!(probe(&rows(&clean, m), &classes(&clean)), 1.0);
        }
        let noisy = generate(&spec(GenKind::Redundant, 50, 0.2)).unwrap();
        assert_ne!(noisy.modalities[0].features, noisy.modalities[1].features);
    }

    #[test]
    fn xor_probes() {
        let ds = generate(&spec(GenKind::SynergyXor, 2000, 0.3)).unwrap();
        let y = classes(&ds);
        for m in 0..2 {
            let acc = probe(&rows(&ds, m), &y);
            assert!((acc - 0.5).abs() <= 0.05, "single-modality probe {acc}");
        }
        let (a, b) = (rows(&ds, 0), rows(&ds, 1));
        let bilinear: Vec<Vec<f64>> = a.iter().zip(&b).map(|(x, z)| vec![x[0], z[0], x[0] * z[0]]).collect();
        assert!(probe(&bilinear, &y) >= 0.95);
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(GenKind::Mixture(vec![0.25; 4]), 300, 0.2);
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        let other = GenSpec { seed: 1, ..s.clone() };
        assert_ne!(generate(&s).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn mixture_single_component_is_unique() {
        let ds = generate(&spec(GenKind::Mixture(vec![1.0, 0.0, 0.0, 0.0]), 400, 0.0)).unwrap();
        assert!(ds.tags.as_ref().unwrap().iter().all(|t| *t == InteractionTag::Uniqueness(0)));
        let y = classes(&ds);
        for (r, &label) in y.iter().enumerate() {
            assert_eq!(label == 1, ds.modalities[0].features.row(r)[0] > 0.0);
        }
    }

    #[test]
    fn mixture_tag_counts_within_three_sigma() {
        let ds = generate(&GenSpec::new(GenKind::Mixture(vec![0.25; 4]), 4000, vec![3, 3], 0.2, 0)).unwrap();
        let tags = ds.tags.unwrap();
        let sigma = (4000.0 * 0.25 * 0.75f64).sqrt();
        for tag in InteractionTag::all(2) {
            let count = tags.iter().filter(|t| **t == tag).count() as f64;
            assert!((count - 1000.0).abs() <= 3.0 * sigma, "{tag}: {count}");
        }
        assert_eq!(tags.len(), 4000);
    }

    #[test]
    fn spec_validation() {
        assert!(generate(&spec(GenKind::Unique(2), 10, 0.1)).is_err());
        assert!(generate(&spec(GenKind::Mixture(vec![0.5, 0.5, 0.5, 0.0]), 10, 0.1)).is_err());
        assert!(generate(&spec(GenKind::Mixture(vec![0.5, 0.5]), 10, 0.1)).is_err());
        assert!(generate(&spec(GenKind::Redundant, 10, -1.0)).is_err());
        assert!(generate(&GenSpec::new(GenKind::Redundant, 10, vec![3], 0.1, 0)).is_err());
    }

    #[test]
    fn regression_targets() {
        let s = GenSpec { task: TaskKind::Regression, ..spec(GenKind::SynergyXor, 50, 0.0) };
        let ds = generate(&s).unwrap();
        let Targets::Regression(y) = &ds.targets else { panic!() };
        for (r, &t) in y.iter().enumerate() {
            let product = ds.modalities[0].features.row(r)[0] * ds.modalities[1].features.row(r)[0];
            assert_eq!(t, product);
        }
        assert_eq!(ds.output_dim(), 1);
    }

    #[test]
    fn tag_text_round_trip() {
        for tag in InteractionTag::all(3) {
            assert_eq!(tag.to_string().parse::<InteractionTag>().unwrap(), tag);
        }
        assert_eq!(InteractionTag::Uniqueness(0).to_string(), "uniqueness-1");
        assert!("uniqueness-0".parse::<InteractionTag>().is_err());
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&spec(GenKind::Mixture(vec![0.25; 4]), 60, 0.3)).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), ds);

        let multilabel = Dataset {
            name: "ml".into(),
            num_classes: 3,
            modalities: ds.modalities.iter().map(|m| Modality { name: m.name.clone(), features: gather(&m.features, &[0, 1]) }).collect(),
            targets: Targets::Multilabel(Tensor::matrix(2, 3, vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0])),
            tags: None,
        };
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(&multilabel, dir2.path()).unwrap();
        assert_eq!(read_dataset(dir2.path()).unwrap(), multilabel);
        assert!(!dir2.path().join("tags.csv").exists());

        let reg = generate(&GenSpec { task: TaskKind::Regression, ..spec(GenKind::Redundant, 20, 0.1) }).unwrap();
        let dir3 = tempfile::tempdir().unwrap();
        write_dataset(&reg, dir3.path()).unwrap();
        assert_eq!(read_dataset(dir3.path()).unwrap(), reg);
    }

    #[test]
    fn load_errors() {
        let ds = generate(&GenSpec::new(GenKind::Redundant, 10, vec![4, 2], 0.1, 0)).unwrap();

        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let manifest_path = dir.path().join("manifest.json");
        let text = fs::read_to_string(&manifest_path).unwrap();
        fs::write(&manifest_path, text.replacen("\"dim\": 4", "\"dim\": 5", 1)).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("modality 'm1'") && err.contains("dim 5"), "{err}");

        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        fs::remove_file(dir.path().join("labels.csv")).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Load { .. })));

        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let m2 = dir.path().join("m2.csv");
        let text = fs::read_to_string(&m2).unwrap();
        let truncated: Vec<&str> = text.lines().take(5).collect();
        fs::write(&m2, truncated.join("\n") + "\n").unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("modality 'm2'"), "{err}");

        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(empty.path()), Err(Error::Load { .. })));
    }

    #[test]
    fn csv_values_have_17_significant_digits() {
        assert_eq!(format_f64(0.1), "1.0000000000000001e-1");
        for x in [0.1, -3.25e-7, 1.0 / 3.0, 12345.678901234567] {
            assert_eq!(format_f64(x).parse::<f64>().unwrap(), x);
        }
    }
}
