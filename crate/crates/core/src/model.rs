//! The full network: backbone, descriptor head, and auxiliary classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::{self, BackboneConfig};
use crate::checkpoint::{ParamScope, ParamStore};
use crate::descriptor::{
    combine, generalized_pool, project_branch, Architecture, Combination, CombinedEmbedding,
    DescriptorConfig, NORM_EPS,
};
use crate::error::{CgdError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub const CLASSIFIER_BIAS: &str = "classifier.bias";
pub const SHARED_HEAD_WEIGHT: &str = "head.shared.weight";

pub fn branch_weight_name(i: usize) -> String {
    format!("head.branch{i}.weight")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub descriptor: DescriptorConfig,
    pub architecture: Architecture,
    pub combination: Combination,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Output width of each branch FC layer (empty for the shared-FC variant).
    ///
    /// Summation needs equal widths, so every branch then projects to the
    /// full embedding dimension.
    pub fn branch_dims(&self) -> Vec<usize> {
        match (self.architecture, self.combination) {
            (Architecture::TypeB, _) => Vec::new(),
            (_, Combination::Sum) => vec![self.descriptor.total_dim(); self.descriptor.num_branches()],
            (_, Combination::Concat) => self.descriptor.per_branch_dims().to_vec(),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.descriptor.total_dim()
    }
}

/// Tensors produced by one forward pass.
pub struct ModelOutput {
    pub embedding: CombinedEmbedding,
    /// Normalized per-branch embeddings (empty for the shared-FC variant).
    pub branch_embeddings: Vec<Var>,
    /// Pooled descriptors `N x C`, one per branch, in configuration order.
    pub pooled: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct CgdModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let normal = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).expect("positive std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::new(&[rows, cols], data).expect("shape matches data")
}

impl CgdModel {
    /// Builds and deterministically initializes a model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.backbone.validate()?;
        if config.num_classes == 0 {
            return Err(CgdError::Config("model needs at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        backbone::init_params(&config.backbone, &mut rng, &mut params)?;
        let c = config.backbone.out_channels();
        match config.architecture {
            Architecture::Cgd | Architecture::TypeA => {
                for (i, &k) in config.branch_dims().iter().enumerate() {
                    params.insert(branch_weight_name(i), normal_matrix(&mut rng, k, c));
                }
            }
            Architecture::TypeB => {
                let n = config.descriptor.num_branches();
                params.insert(
                    SHARED_HEAD_WEIGHT,
                    normal_matrix(&mut rng, config.descriptor.total_dim(), n * c),
                );
            }
        }
        params.insert(CLASSIFIER_WEIGHT, normal_matrix(&mut rng, config.num_classes, c));
        params.insert(CLASSIFIER_BIAS, Tensor::zeros(&[config.num_classes]));
        Ok(Self { config, params })
    }

    /// Attaches stored parameters, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config, 0)?;
        reference.params.check_compatible(&params)?;
        Ok(Self {
            config: reference.config,
            params,
        })
    }

    /// Number of FC weights in the descriptor head.
    pub fn head_param_count(&self) -> usize {
        self.params.num_scalars_with_prefix("head.")
    }

    pub fn forward(&self, g: &mut Graph, scope: &mut ParamScope, batch: Var) -> Result<ModelOutput> {
        let cfg = &self.config;
        let fmap = backbone::forward(&cfg.backbone, scope, g, batch)?;
        let pooled = cfg
            .descriptor
            .branches()
            .iter()
            .map(|&kind| generalized_pool(g, &fmap, kind))
            .collect::<Result<Vec<_>>>()?;
        match cfg.architecture {
            Architecture::Cgd | Architecture::TypeA => {
                let mut branch_embeddings = Vec::with_capacity(pooled.len());
                for (i, &f) in pooled.iter().enumerate() {
                    let w = scope.get(g, &branch_weight_name(i))?;
                    branch_embeddings.push(project_branch(g, f, w)?);
                }
                let embedding = combine(g, &branch_embeddings, cfg.combination)?;
                Ok(ModelOutput {
                    embedding,
                    branch_embeddings,
                    pooled,
                })
            }
            Architecture::TypeB => {
                let raw = g.concat(&pooled, 1)?;
                let w = scope.get(g, SHARED_HEAD_WEIGHT)?;
                let wt = g.transpose(w)?;
                let projected = g.matmul(raw, wt)?;
                let var = g.l2_normalize(projected, 1, NORM_EPS)?;
                let d = cfg.descriptor.total_dim();
                Ok(ModelOutput {
                    embedding: CombinedEmbedding {
                        var,
                        block_bounds: vec![0..d],
                    },
                    branch_embeddings: Vec::new(),
                    pooled,
                })
            }
        }
    }

    /// Inference embeddings for an `N x 3 x S x S` batch, processed in chunks.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        const CHUNK: usize = 64;
        let s = images.shape();
        if s.len() != 4 {
            return Err(CgdError::Shape(format!("embed expects N x 3 x S x S, got {s:?}")));
        }
        let per_image: usize = s[1..].iter().product();
        let dim = self.config.embedding_dim();
        let mut out = Vec::with_capacity(s[0] * dim);
        for start in (0..s[0]).step_by(CHUNK) {
            let n = CHUNK.min(s[0] - start);
            let chunk = Tensor::new(
                &[n, s[1], s[2], s[3]],
                images.data()[start * per_image..(start + n) * per_image].to_vec(),
            )?;
            let mut g = Graph::new();
            let mut scope = ParamScope::frozen(&self.params);
            let x = g.constant(chunk);
            let o = self.forward(&mut g, &mut scope, x)?;
            out.extend_from_slice(g.value(o.embedding.var).data());
        }
        Tensor::new(&[s[0], dim], out)
    }
}
