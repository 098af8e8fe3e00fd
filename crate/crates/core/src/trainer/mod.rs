//! Joint ranking + classification training.

mod adam;
mod sampler;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::Adam;
pub use sampler::pk_sample;

use crate::checkpoint::{ParamScope, ParamStore};
use crate::dataio::{augment, stack, LabeledImages};
use crate::descriptor::Architecture;
use crate::error::{CgdError, Result};
use crate::graph::{Graph, Var};
use crate::loss::{aux_softmax_loss, batch_hard_triplet, joint_loss, LossBundle, SoftmaxLossConfig, TripletConfig};
use crate::model::{CgdModel, CLASSIFIER_BIAS, CLASSIFIER_WEIGHT};
use crate::retrieval::{evaluate, EmbeddingSet, RecallReport};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Classes per batch.
    pub batch_p: usize,
    /// Instances per class.
    pub batch_k: usize,
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_p: 8,
            batch_k: 4,
            lr: 1e-4,
            decay_factor: 0.5,
            decay_every: 8,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_k < 2 {
            return Err(CgdError::Config(format!(
                "batch_k must be at least 2 for triplet mining, got {}",
                self.batch_k
            )));
        }
        if self.batch_p < 2 {
            return Err(CgdError::Config(format!(
                "batch_p must be at least 2 for negatives, got {}",
                self.batch_p
            )));
        }
        if !(self.lr >= 0.0) {
            return Err(CgdError::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(CgdError::Config(format!(
                "decay_factor must lie in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.decay_every == 0 {
            return Err(CgdError::Config("decay_every must be positive".into()));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.batch_p * self.batch_k
    }

    /// Step-decayed rate for zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// Loss settings for a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub triplet: TripletConfig,
    pub temperature: f64,
    pub label_smoothing: f64,
    pub rank_weight: f64,
    /// Zero disables the auxiliary classifier entirely.
    pub cls_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            triplet: TripletConfig::default(),
            temperature: 0.5,
            label_smoothing: 0.1,
            rank_weight: 1.0,
            cls_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn softmax(&self, num_classes: usize) -> SoftmaxLossConfig {
        SoftmaxLossConfig {
            temperature: self.temperature,
            label_smoothing: self.label_smoothing,
            num_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub rank_loss: f64,
    pub cls_loss: f64,
    pub total: f64,
    pub val_recall_at_1: f64,
    pub lr: f64,
    /// Per-branch ranking losses (type-A training only).
    pub branch_rank_losses: Vec<f64>,
}

impl EpochMetrics {
    /// `epoch  rank_loss  cls_loss  total  val_recall@1  lr`, tab separated.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch, self.rank_loss, self.cls_loss, self.total, self.val_recall_at_1, self.lr
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    /// Parameters from the epoch with the highest validation Recall@1.
    pub best_params: ParamStore,
    pub best_epoch: usize,
    pub best_recall_at_1: f64,
    /// Every parameter name that entered a forward pass.
    pub touched_params: BTreeSet<String>,
    /// Set when training stopped on a numeric failure.
    pub aborted: Option<String>,
}

impl TrainOutcome {
    pub fn metrics_log(&self) -> String {
        let mut s = String::new();
        for m in &self.metrics {
            let _ = writeln!(s, "{}", m.log_line());
        }
        s
    }

    /// Writes `metrics.tsv`, `checkpoint.ckpt` and, for type-A runs,
    /// `branch_rank_losses.tsv`.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir)?;
        fs::write(out_dir.join("metrics.tsv"), self.metrics_log())?;
        self.best_params.save(&out_dir.join("checkpoint.ckpt"))?;
        if self.metrics.iter().any(|m| !m.branch_rank_losses.is_empty()) {
            let mut s = String::new();
            for m in &self.metrics {
                let cols: Vec<String> = m.branch_rank_losses.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(s, "{}\t{}", m.epoch, cols.join("\t"));
            }
            fs::write(out_dir.join("branch_rank_losses.tsv"), s)?;
        }
        Ok(())
    }
}

/// Embeds `data` (inference preprocessing) with the model's current parameters.
pub fn embed_images(model: &CgdModel, data: &LabeledImages) -> Result<EmbeddingSet> {
    let batch = data.test_batch(model.config.backbone.input_size)?;
    let e = model.embed(&batch)?;
    EmbeddingSet::from_tensor(&e, &data.labels)
}

/// Single-set retrieval protocol: every item queries all others.
pub fn evaluate_single_set(model: &CgdModel, data: &LabeledImages, k_list: &[usize]) -> Result<RecallReport> {
    let set = embed_images(model, data)?;
    evaluate(&set, &set, k_list, true)
}

struct StepLosses {
    bundle: LossBundle,
    branch: Vec<f64>,
}

fn training_step(
    model: &mut CgdModel,
    opt: &mut Adam,
    batch: crate::tensor::Tensor,
    labels: &[usize],
    loss_cfg: &LossConfig,
    lr: f64,
    touched: &mut BTreeSet<String>,
) -> Result<StepLosses> {
    let mut g = Graph::new();
    let (total, bundle, branch, grads, names) = {
        let mut scope = ParamScope::trainable(&model.params);
        let x = g.constant(batch);
        let out = model.forward(&mut g, &mut scope, x)?;

        let mut branch = Vec::new();
        let rank: Var = match model.config.architecture {
            Architecture::TypeA => {
                let mut acc: Option<Var> = None;
                for &e in &out.branch_embeddings {
                    let l = batch_hard_triplet(&mut g, e, labels, &loss_cfg.triplet)?;
                    branch.push(g.value(l).item()?);
                    acc = Some(match acc {
                        None => l,
                        Some(a) => g.add(a, l)?,
                    });
                }
                acc.expect("at least one branch")
            }
            Architecture::Cgd | Architecture::TypeB => {
                batch_hard_triplet(&mut g, out.embedding.var, labels, &loss_cfg.triplet)?
            }
        };
        let rank_w = g.scale(rank, loss_cfg.rank_weight);
        let (total, cls_value) = if loss_cfg.cls_weight > 0.0 {
            let w = scope.get(&mut g, CLASSIFIER_WEIGHT)?;
            let b = scope.get(&mut g, CLASSIFIER_BIAS)?;
            let sm = loss_cfg.softmax(model.config.num_classes);
            let cls = aux_softmax_loss(&mut g, out.pooled[0], w, b, labels, &sm)?;
            let cls_w = g.scale(cls, loss_cfg.cls_weight);
            (g.add(rank_w, cls_w)?, g.value(cls_w).item()?)
        } else {
            (rank_w, 0.0)
        };
        let bundle = joint_loss(g.value(rank_w).item()?, cls_value)?;
        g.backward(total)?;
        let names: Vec<String> = scope.touched().map(str::to_string).collect();
        (total, bundle, branch, scope.grads(&g), names)
    };
    let _ = total;
    for n in &names {
        if !touched.contains(n) {
            touched.insert(n.clone());
        }
    }
    opt.step(&mut model.params, &grads, names.iter().map(String::as_str), lr)?;
    Ok(StepLosses { bundle, branch })
}

/// Trains `model` in place. `val` drives best-checkpoint selection.
///
/// A non-finite loss stops training; the outcome then carries the last good
/// (best-so-far) parameters and an `aborted` message.
pub fn train(model: &mut CgdModel, train_data: &LabeledImages, val: &LabeledImages, cfg: &TrainConfig, loss_cfg: &LossConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_data.len() < cfg.batch_size() {
        log::warn!(
            "training set ({}) smaller than one batch ({}); sampling with replacement",
            train_data.len(),
            cfg.batch_size()
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::default();
    let size = model.config.backbone.input_size;
    let batches_per_epoch = (train_data.len() / cfg.batch_size()).max(1);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best_params = model.params.clone();
    let mut best_epoch = 0;
    let mut best_recall = f64::NEG_INFINITY;
    let mut touched = BTreeSet::new();
    let mut aborted = None;

    'epochs: for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let (mut rank, mut cls, mut total) = (0.0, 0.0, 0.0);
        let mut branch_sum: Vec<f64> = Vec::new();
        for _ in 0..batches_per_epoch {
            let idx = pk_sample(&train_data.labels, cfg.batch_p, cfg.batch_k, &mut rng)?;
            let images = idx
                .iter()
                .map(|&i| augment(&train_data.images[i], &mut rng, true, size))
                .collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train_data.labels[i]).collect();
            let step = match training_step(model, &mut opt, stack(images)?, &labels, loss_cfg, lr, &mut touched) {
                Ok(s) => s,
                Err(CgdError::Numeric(msg)) => {
                    log::error!("epoch {epoch}: {msg}; keeping last good checkpoint");
                    aborted = Some(msg);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            rank += step.bundle.ranking;
            cls += step.bundle.classification;
            total += step.bundle.total;
            if branch_sum.is_empty() {
                branch_sum = vec![0.0; step.branch.len()];
            }
            for (s, b) in branch_sum.iter_mut().zip(&step.branch) {
                *s += b;
            }
        }
        let nb = batches_per_epoch as f64;
        let val_r1 = evaluate_single_set(model, val, &[1])?.recall(1).unwrap_or(0.0);
        let m = EpochMetrics {
            epoch,
            rank_loss: rank / nb,
            cls_loss: cls / nb,
            total: total / nb,
            val_recall_at_1: val_r1,
            lr,
            branch_rank_losses: branch_sum.iter().map(|s| s / nb).collect(),
        };
        log::info!("{}", m.log_line());
        if val_r1 > best_recall {
            best_recall = val_r1;
            best_epoch = epoch;
            best_params = model.params.clone();
        }
        metrics.push(m);
    }
    if best_recall == f64::NEG_INFINITY {
        best_recall = 0.0;
    }
    Ok(TrainOutcome {
        metrics,
        best_params,
        best_epoch,
        best_recall_at_1: best_recall,
        touched_params: touched,
        aborted,
    })
}
