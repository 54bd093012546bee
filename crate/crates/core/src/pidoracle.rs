//! Partial information decomposition of small discrete joints `p(x1, x2, t)`
//! with the Williams–Beer `I_min` redundancy measure. All values are in bits.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{Dataset, GenKind, InteractionTag, Targets};

pub const MAX_SYMBOLS: usize = 16;
const SUM_TOLERANCE: f64 = 1e-12;
const TIE_TOLERANCE: f64 = 1e-9;

/// Probability table over `X1 × X2 × T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    sizes: [usize; 3],
    p: Vec<f64>,
}

impl DiscreteJoint {
    /// `p` is indexed `[x1][x2][t]`, row-major.
    pub fn new(n1: usize, n2: usize, nt: usize, p: Vec<f64>) -> Result<Self> {
        let sizes = [n1, n2, nt];
        if sizes.iter().any(|&s| s == 0 || s > MAX_SYMBOLS) {
            return Err(Error::Contract(format!("alphabet sizes must lie in 1..={MAX_SYMBOLS}, got {sizes:?}")));
        }
        if p.len() != n1 * n2 * nt {
            return Err(Error::Contract(format!("{} probabilities for a {n1}x{n2}x{nt} table", p.len())));
        }
        if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Contract("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Contract(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { sizes, p })
    }

    /// Joint from sparse `(x1, x2, t, p)` entries; alphabets span the largest
    /// symbol seen. Repeated cells are rejected.
    pub fn from_entries(entries: &[(usize, usize, usize, f64)]) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Contract("empty joint".into()));
        }
        let n1 = entries.iter().map(|e| e.0).max().unwrap_or(0) + 1;
        let n2 = entries.iter().map(|e| e.1).max().unwrap_or(0) + 1;
        let nt = entries.iter().map(|e| e.2).max().unwrap_or(0) + 1;
        if [n1, n2, nt].iter().any(|&s| s > MAX_SYMBOLS) {
            return Err(Error::Contract(format!("alphabet sizes must be at most {MAX_SYMBOLS}")));
        }
        let mut p = vec![0.0; n1 * n2 * nt];
        let mut seen = vec![false; p.len()];
        for &(a, b, t, v) in entries {
            let i = (a * n2 + b) * nt + t;
            if seen[i] {
                return Err(Error::Contract(format!("cell ({a}, {b}, {t}) listed twice")));
            }
            seen[i] = true;
            p[i] = v;
        }
        Self::new(n1, n2, nt, p)
    }

    /// Parses CSV rows `x1,x2,t,p`; an optional non-numeric header line is skipped.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut entries = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Input(format!("joint CSV: {e}")))?;
            if record.len() != 4 {
                return Err(Error::Input(format!("joint CSV row {}: expected 4 fields, got {}", i + 1, record.len())));
            }
            if i == 0 && record[3].parse::<f64>().is_err() {
                continue;
            }
            let sym = |k: usize| {
                record[k].parse::<usize>().map_err(|_| Error::Input(format!("joint CSV row {}: bad symbol '{}'", i + 1, &record[k])))
            };
            let p = record[3].parse::<f64>().map_err(|_| Error::Input(format!("joint CSV row {}: bad probability '{}'", i + 1, &record[3])))?;
            entries.push((sym(0)?, sym(1)?, sym(2)?, p));
        }
        Self::from_entries(&entries)
    }

    pub fn from_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
        Self::from_csv_str(&text).map_err(|e| Error::load(path, e.to_string()))
    }

    pub fn sizes(&self) -> [usize; 3] {
        self.sizes
    }

    pub fn p(&self, x1: usize, x2: usize, t: usize) -> f64 {
        let [_, n2, nt] = self.sizes;
        self.p[(x1 * n2 + x2) * nt + t]
    }

    /// The same joint with the two sources exchanged.
    pub fn swap_sources(&self) -> Self {
        let [n1, n2, nt] = self.sizes;
        let mut p = vec![0.0; self.p.len()];
        for a in 0..n1 {
            for b in 0..n2 {
                for t in 0..nt {
                    p[(b * n1 + a) * nt + t] = self.p(a, b, t);
                }
            }
        }
        Self { sizes: [n2, n1, nt], p }
    }

    /// `p(source, t)` with `source` ranging over the symbols of `which`.
    fn source_table(&self, which: Source) -> (usize, Vec<f64>) {
        let [n1, n2, nt] = self.sizes;
        let na = match which {
            Source::X1 => n1,
            Source::X2 => n2,
            Source::Both => n1 * n2,
        };
        let mut table = vec![0.0; na * nt];
        for a in 0..n1 {
            for b in 0..n2 {
                let s = match which {
                    Source::X1 => a,
                    Source::X2 => b,
                    Source::Both => a * n2 + b,
                };
                for t in 0..nt {
                    table[s * nt + t] += self.p(a, b, t);
                }
            }
        }
        (na, table)
    }

    fn target_marginal(&self) -> Vec<f64> {
        let nt = self.sizes[2];
        let mut pt = vec![0.0; nt];
        for (i, v) in self.p.iter().enumerate() {
            pt[i % nt] += v;
        }
        pt
    }
}

/// Which source(s) a mutual-information term uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    X1,
    X2,
    Both,
}

/// `I(T; source)` in bits.
pub fn mutual_info(joint: &DiscreteJoint, which: Source) -> f64 {
    let nt = joint.sizes[2];
    let (na, table) = joint.source_table(which);
    let pt = joint.target_marginal();
    let mut mi = 0.0;
    for a in 0..na {
        let pa: f64 = table[a * nt..(a + 1) * nt].iter().sum();
        for t in 0..nt {
            let pat = table[a * nt + t];
            if pat > 0.0 {
                mi += pat * (pat / (pa * pt[t])).log2();
            }
        }
    }
    mi
}

/// `I(T = t; source)` for every `t`; zero where `p(t) = 0`.
fn specific_information(joint: &DiscreteJoint, which: Source) -> Vec<f64> {
    let nt = joint.sizes[2];
    let (na, table) = joint.source_table(which);
    let pt = joint.target_marginal();
    let pa: Vec<f64> = (0..na).map(|a| table[a * nt..(a + 1) * nt].iter().sum()).collect();
    (0..nt)
        .map(|t| {
            if pt[t] == 0.0 {
                return 0.0;
            }
            (0..na)
                .filter(|&a| table[a * nt + t] > 0.0)
                .map(|a| {
                    let p_a_given_t = table[a * nt + t] / pt[t];
                    let p_t_given_a = table[a * nt + t] / pa[a];
                    p_a_given_t * (p_t_given_a / pt[t]).log2()
                })
                .sum()
        })
        .collect()
}

/// Williams–Beer redundancy `Σ_t p(t) · min(I(T=t; X1), I(T=t; X2))`.
pub fn redundancy_imin(joint: &DiscreteJoint) -> f64 {
    let pt = joint.target_marginal();
    let s1 = specific_information(joint, Source::X1);
    let s2 = specific_information(joint, Source::X2);
    pt.iter().zip(s1.iter().zip(&s2)).map(|(p, (a, b))| p * a.min(*b)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PidResult {
    pub red: f64,
    pub unq1: f64,
    pub unq2: f64,
    pub syn: f64,
    pub total_mi: f64,
}

fn clamp(v: f64) -> f64 {
    if (-SUM_TOLERANCE..0.0).contains(&v) {
        0.0
    } else {
        v
    }
}

pub fn pid_decompose(joint: &DiscreteJoint) -> PidResult {
    let red = redundancy_imin(joint);
    let i1 = mutual_info(joint, Source::X1);
    let i2 = mutual_info(joint, Source::X2);
    let total_mi = mutual_info(joint, Source::Both);
    let unq1 = i1 - red;
    let unq2 = i2 - red;
    let syn = total_mi - unq1 - unq2 - red;
    PidResult { red: clamp(red), unq1: clamp(unq1), unq2: clamp(unq2), syn: clamp(syn), total_mi: clamp(total_mi) }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PidComponent {
    Redundancy,
    Unique1,
    Unique2,
    Synergy,
}

impl PidComponent {
    /// Interaction tag of the expert meant to model this component.
    pub fn tag(self) -> InteractionTag {
        match self {
            PidComponent::Redundancy => InteractionTag::Redundancy,
            PidComponent::Unique1 => InteractionTag::Uniqueness(0),
            PidComponent::Unique2 => InteractionTag::Uniqueness(1),
            PidComponent::Synergy => InteractionTag::Synergy,
        }
    }
}

impl fmt::Display for PidComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PidComponent::Redundancy => "redundancy",
            PidComponent::Unique1 => "unique1",
            PidComponent::Unique2 => "unique2",
            PidComponent::Synergy => "synergy",
        })
    }
}

/// The strictly largest component of `pid`.
pub fn dominant(pid: &PidResult) -> Result<PidComponent> {
    if pid.total_mi <= TIE_TOLERANCE {
        return Err(Error::Ambiguous("no information: the sources carry no information about the target".into()));
    }
    let mut ranked = [
        (PidComponent::Redundancy, pid.red),
        (PidComponent::Unique1, pid.unq1),
        (PidComponent::Unique2, pid.unq2),
        (PidComponent::Synergy, pid.syn),
    ];
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    if ranked[0].1 - ranked[1].1 <= TIE_TOLERANCE {
        return Err(Error::Ambiguous(format!("{} and {} tie at {:.6} bits", ranked[0].0, ranked[1].0, ranked[0].1)));
    }
    Ok(ranked[0].0)
}

pub fn classify_dominant(joint: &DiscreteJoint) -> Result<PidComponent> {
    dominant(&pid_decompose(joint))
}

/// First-feature sign: 1 if positive, else 0.
pub fn sign_of_first(row: &[f64]) -> usize {
    usize::from(row[0] > 0.0)
}

/// Empirical joint of two discretized modalities and the class label.
pub fn joint_from_dataset(dataset: &Dataset, sources: (usize, usize), discretize: impl Fn(&[f64]) -> usize) -> Result<DiscreteJoint> {
    let Targets::Classes(labels) = &dataset.targets else {
        return Err(Error::Unsupported("the PID oracle needs single-label class targets".into()));
    };
    let n = dataset.modalities.len();
    if sources.0 >= n || sources.1 >= n || sources.0 == sources.1 {
        return Err(Error::Contract(format!("need two distinct modalities out of {n}")));
    }
    let (f1, f2) = (&dataset.modalities[sources.0].features, &dataset.modalities[sources.1].features);
    let mut cells = Vec::with_capacity(labels.len());
    for (r, &t) in labels.iter().enumerate() {
        cells.push((discretize(f1.row(r)), discretize(f2.row(r)), t));
    }
    let n1 = cells.iter().map(|c| c.0).max().unwrap_or(0) + 1;
    let n2 = cells.iter().map(|c| c.1).max().unwrap_or(0) + 1;
    let nt = dataset.num_classes.max(cells.iter().map(|c| c.2).max().unwrap_or(0) + 1);
    let mut p = vec![0.0; n1 * n2 * nt];
    for (a, b, t) in cells {
        p[(a * n2 + b) * nt + t] += 1.0;
    }
    let total = labels.len() as f64;
    p.iter_mut().for_each(|v| *v /= total);
    // renormalize away accumulated roundoff
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    DiscreteJoint::new(n1, n2, nt, p)
}

/// Analytic joint of (sign of modality 1, sign of modality 2, label) for a
/// noiseless two-modality generator.
pub fn generator_joint(kind: &GenKind) -> Result<DiscreteJoint> {
    let tags = InteractionTag::all(2);
    let weights: Vec<f64> = match kind {
        GenKind::Unique(k) if *k < 2 => tags.iter().map(|t| f64::from(*t == InteractionTag::Uniqueness(*k))).collect(),
        GenKind::Unique(k) => return Err(Error::Unsupported(format!("unique modality {} of a two-source joint", k + 1))),
        GenKind::Redundant => tags.iter().map(|t| f64::from(*t == InteractionTag::Redundancy)).collect(),
        GenKind::SynergyXor => tags.iter().map(|t| f64::from(*t == InteractionTag::Synergy)).collect(),
        GenKind::Mixture(p) if p.len() == 4 => p.clone(),
        GenKind::Mixture(p) => return Err(Error::Unsupported(format!("mixture over {} components; the oracle handles 2 sources", p.len()))),
    };
    let mut p = vec![0.0; 8];
    for (tag, w) in tags.iter().zip(&weights) {
        for a in 0..2usize {
            for b in 0..2usize {
                let (prob, t) = match tag {
                    InteractionTag::Uniqueness(0) => (0.25, a),
                    InteractionTag::Uniqueness(_) => (0.25, b),
                    InteractionTag::Synergy => (0.25, a ^ b),
                    InteractionTag::Redundancy => (if a == b { 0.5 } else { 0.0 }, a),
                };
                p[(a * 2 + b) * 2 + t] += w * prob;
            }
        }
    }
    DiscreteJoint::new(2, 2, 2, p)
}
