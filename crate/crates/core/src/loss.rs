//! Ranking and auxiliary classification losses.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{CgdError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TripletVariant {
    /// `max(0, m + d+ - d-)`
    HardMargin,
    /// `log(1 + exp(d+ - d-))`
    SoftMargin,
}

impl FromStr for TripletVariant {
    type Err = CgdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" | "hard-margin" => Ok(TripletVariant::HardMargin),
            "soft" | "soft-margin" => Ok(TripletVariant::SoftMargin),
            _ => Err(CgdError::Config(format!("unknown triplet variant `{s}`"))),
        }
    }
}

impl fmt::Display for TripletVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TripletVariant::HardMargin => "hard-margin",
            TripletVariant::SoftMargin => "soft-margin",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletConfig {
    pub margin: f64,
    pub variant: TripletVariant,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            variant: TripletVariant::HardMargin,
        }
    }
}

/// A loss over a batch of embeddings and their class labels.
///
/// Batch-hard triplet is the one implementation here; other ranking losses
/// plug in through this trait.
pub trait RankingLoss {
    fn loss(&self, g: &mut Graph, embeddings: Var, labels: &[usize]) -> Result<Var>;
}

impl RankingLoss for TripletConfig {
    fn loss(&self, g: &mut Graph, embeddings: Var, labels: &[usize]) -> Result<Var> {
        batch_hard_triplet(g, embeddings, labels, self)
    }
}

/// Hardest positive and hardest negative index for every anchor.
///
/// Ties resolve to the lowest batch index. Fails if some class has a single
/// member or the batch holds only one class.
pub fn mine_batch_hard(embeddings: &Tensor, labels: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let s = embeddings.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(CgdError::Shape(format!(
            "triplet mining: embeddings {s:?} vs {} labels",
            labels.len()
        )));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if let Some((l, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(CgdError::InvalidArgument(format!(
            "triplet mining: class {l} has a single instance in the batch"
        )));
    }
    if counts.len() < 2 {
        return Err(CgdError::InvalidArgument(
            "triplet mining: batch needs at least two classes".into(),
        ));
    }
    let n = labels.len();
    let dist = |i: usize, j: usize| -> f64 {
        embeddings
            .row(i)
            .iter()
            .zip(embeddings.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut pos = Vec::with_capacity(n);
    let mut neg = Vec::with_capacity(n);
    for a in 0..n {
        let mut best_p: Option<(usize, f64)> = None;
        let mut best_n: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = dist(a, j);
            if labels[j] == labels[a] {
                if best_p.is_none_or(|(_, bd)| d > bd) {
                    best_p = Some((j, d));
                }
            } else if best_n.is_none_or(|(_, bd)| d < bd) {
                best_n = Some((j, d));
            }
        }
        pos.push(best_p.expect("class has two members").0);
        neg.push(best_n.expect("batch has two classes").0);
    }
    Ok((pos, neg))
}

/// Batch-hard triplet loss on Euclidean distances, averaged over anchors.
pub fn batch_hard_triplet(g: &mut Graph, embeddings: Var, labels: &[usize], cfg: &TripletConfig) -> Result<Var> {
    if !(cfg.margin >= 0.0) {
        return Err(CgdError::InvalidArgument(format!(
            "triplet margin must be nonnegative, got {}",
            cfg.margin
        )));
    }
    let (pos, neg) = mine_batch_hard(g.value(embeddings), labels)?;
    let ep = g.gather_rows(embeddings, &pos)?;
    let en = g.gather_rows(embeddings, &neg)?;
    let dp = g.row_distance(embeddings, ep)?;
    let dn = g.row_distance(embeddings, en)?;
    let gap = g.sub(dp, dn)?;
    let per_anchor = match cfg.variant {
        TripletVariant::HardMargin => {
            let shifted = g.add_scalar(gap, cfg.margin);
            g.relu(shifted)
        }
        TripletVariant::SoftMargin => {
            let e = g.exp(gap);
            let one_plus = g.add_scalar(e, 1.0);
            g.log(one_plus)
        }
    };
    Ok(g.mean_all(per_anchor))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftmaxLossConfig {
    pub temperature: f64,
    pub label_smoothing: f64,
    pub num_classes: usize,
}

impl SoftmaxLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(CgdError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(CgdError::Config(format!(
                "label smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if self.num_classes == 0 || (self.num_classes == 1 && self.label_smoothing > 0.0) {
            return Err(CgdError::Config(format!(
                "label smoothing needs at least two classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// `(1 - eps)` on the true class and `eps / (M - 1)` elsewhere.
pub fn smoothed_targets(labels: &[usize], num_classes: usize, eps: f64) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * num_classes];
    let off = if num_classes > 1 { eps / (num_classes - 1) as f64 } else { 0.0 };
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(CgdError::InvalidArgument(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        let row = &mut data[i * num_classes..(i + 1) * num_classes];
        row.fill(off);
        row[l] = 1.0 - eps;
    }
    Tensor::new(&[labels.len(), num_classes], data)
}

/// Temperature-scaled, label-smoothed softmax cross-entropy on `pooled . W^T + b`.
pub fn aux_softmax_loss(
    g: &mut Graph,
    pooled: Var,
    weight: Var,
    bias: Var,
    labels: &[usize],
    cfg: &SoftmaxLossConfig,
) -> Result<Var> {
    cfg.validate()?;
    if g.shape(weight)[0] != cfg.num_classes {
        return Err(CgdError::Shape(format!(
            "classifier has {} rows but {} classes are configured",
            g.shape(weight)[0],
            cfg.num_classes
        )));
    }
    if g.shape(pooled)[0] != labels.len() {
        return Err(CgdError::Shape(format!(
            "{} descriptors but {} labels",
            g.shape(pooled)[0],
            labels.len()
        )));
    }
    let targets = smoothed_targets(labels, cfg.num_classes, cfg.label_smoothing)?;
    let wt = g.transpose(weight)?;
    let raw = g.matmul(pooled, wt)?;
    let logits = g.add_bias(raw, bias)?;
    let scaled = g.scale(logits, 1.0 / cfg.temperature);
    softmax_cross_entropy(g, scaled, targets)
}

/// Mean over rows of `-sum(target * log_softmax(logits))`.
pub fn softmax_cross_entropy(g: &mut Graph, logits: Var, targets: Tensor) -> Result<Var> {
    let logp = g.log_softmax(logits)?;
    let t = g.constant(targets);
    let prod = g.mul(t, logp)?;
    let per_row = g.sum_reduce(prod, 1)?;
    let mean = g.mean_all(per_row);
    Ok(g.scale(mean, -1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub ranking: f64,
    pub classification: f64,
    pub total: f64,
}

/// Sums the two objectives; a non-finite component is a numeric failure.
pub fn joint_loss(ranking: f64, classification: f64) -> Result<LossBundle> {
    if !ranking.is_finite() || !classification.is_finite() {
        return Err(CgdError::Numeric(format!(
            "non-finite loss (ranking {ranking}, classification {classification})"
        )));
    }
    Ok(LossBundle {
        ranking,
        classification,
        total: ranking + classification,
    })
}
