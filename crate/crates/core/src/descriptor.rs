//! Global descriptor branches: generalized pooling, per-branch projection and
//! normalization, and combination into one embedding.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::backbone::FeatureMap;
use crate::error::{CgdError, Result};
use crate::graph::{Graph, Var};

/// Floor applied to activations before the GeM power.
pub const GEM_EPS: f64 = 1e-6;
pub const DEFAULT_GEM_P: f64 = 3.0;
/// Denominator floor for every L2 normalization in the head.
pub const NORM_EPS: f64 = 1e-12;

/// The twelve accepted branch orderings. The first letter feeds the
/// auxiliary classifier; for three branches only that letter is free.
pub const CONFIGURATIONS: [&str; 12] = [
    "S", "M", "G", "SM", "MS", "SG", "GS", "MG", "GM", "SMG", "MSG", "GSM",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DescriptorKind {
    /// Average pooling.
    Spoc,
    /// Max pooling.
    Mac,
    /// Power-mean pooling with exponent `p >= 1`.
    Gem(f64),
}

impl DescriptorKind {
    pub fn letter(&self) -> char {
        match self {
            DescriptorKind::Spoc => 'S',
            DescriptorKind::Mac => 'M',
            DescriptorKind::Gem(_) => 'G',
        }
    }

    pub fn from_letter(c: char, gem_p: f64) -> Result<Self> {
        match c {
            'S' => Ok(DescriptorKind::Spoc),
            'M' => Ok(DescriptorKind::Mac),
            'G' => DescriptorKind::gem(gem_p),
            _ => Err(CgdError::Config(format!("unknown descriptor letter `{c}`"))),
        }
    }

    pub fn gem(p: f64) -> Result<Self> {
        if !(p >= 1.0) || !p.is_finite() {
            return Err(CgdError::InvalidArgument(format!("GeM needs p >= 1, got {p}")));
        }
        Ok(DescriptorKind::Gem(p))
    }

    /// Tie-break rank: S < M < G.
    fn order(&self) -> usize {
        match self {
            DescriptorKind::Spoc => 0,
            DescriptorKind::Mac => 1,
            DescriptorKind::Gem(_) => 2,
        }
    }
}

/// Parsed branch configuration such as `"SMG"`.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorConfig {
    branches: Vec<DescriptorKind>,
    total_dim: usize,
    per_branch_dims: Vec<usize>,
}

impl DescriptorConfig {
    pub fn parse(s: &str, total_dim: usize, gem_p: f64) -> Result<Self> {
        if !CONFIGURATIONS.contains(&s) {
            return Err(CgdError::Config(format!(
                "descriptor config `{s}` is not one of {}",
                CONFIGURATIONS.join(", ")
            )));
        }
        let branches = s
            .chars()
            .map(|c| DescriptorKind::from_letter(c, gem_p))
            .collect::<Result<Vec<_>>>()?;
        Self::new(branches, total_dim)
    }

    fn new(branches: Vec<DescriptorKind>, total_dim: usize) -> Result<Self> {
        let n = branches.len();
        if total_dim < n {
            return Err(CgdError::Config(format!(
                "embedding dimension {total_dim} too small for {n} branches"
            )));
        }
        let mut per_branch_dims = vec![total_dim / n; n];
        per_branch_dims[0] += total_dim % n;
        Ok(Self {
            branches,
            total_dim,
            per_branch_dims,
        })
    }

    pub fn branches(&self) -> &[DescriptorKind] {
        &self.branches
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn per_branch_dims(&self) -> &[usize] {
        &self.per_branch_dims
    }

    /// Index of the branch feeding the auxiliary classifier (always the first).
    pub fn aux_branch(&self) -> usize {
        0
    }

    pub fn aux_kind(&self) -> DescriptorKind {
        self.branches[0]
    }

    pub fn notation(&self) -> String {
        self.branches.iter().map(DescriptorKind::letter).collect()
    }
}

impl fmt::Display for DescriptorConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.notation())
    }
}

/// Where multiple descriptors are combined (ablation axis).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// Per-branch FC + L2 norm, concatenate, L2 norm; one ranking loss.
    Cgd,
    /// Same inference path as `Cgd`, but each branch is trained with its own ranking loss.
    TypeA,
    /// Raw pooled vectors concatenated, one shared FC, L2 norm.
    TypeB,
}

impl FromStr for Architecture {
    type Err = CgdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cgd" => Ok(Architecture::Cgd),
            "a" | "type-a" | "typea" => Ok(Architecture::TypeA),
            "b" | "type-b" | "typeb" => Ok(Architecture::TypeB),
            _ => Err(CgdError::Config(format!("unknown architecture `{s}`"))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Cgd => "cgd",
            Architecture::TypeA => "type-a",
            Architecture::TypeB => "type-b",
        })
    }
}

/// How branch embeddings are merged (ablation axis).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combination {
    Concat,
    Sum,
}

impl FromStr for Combination {
    type Err = CgdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "concat" => Ok(Combination::Concat),
            "sum" => Ok(Combination::Sum),
            _ => Err(CgdError::Config(format!("unknown combination `{s}`"))),
        }
    }
}

impl fmt::Display for Combination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Combination::Concat => "concat",
            Combination::Sum => "sum",
        })
    }
}

/// Pools an `N x C x H x W` map to `N x C`.
///
/// MAC is an exact max, not a large-`p` approximation.
pub fn generalized_pool(g: &mut Graph, fmap: &FeatureMap, kind: DescriptorKind) -> Result<Var> {
    let s = g.shape(fmap.var).to_vec();
    if s.len() != 4 {
        return Err(CgdError::Shape(format!("pooling expects N x C x H x W, got {s:?}")));
    }
    let flat = g.reshape(fmap.var, &[s[0], s[1], s[2] * s[3]])?;
    match kind {
        DescriptorKind::Spoc => g.mean_reduce(flat, 2),
        DescriptorKind::Mac => g.max_reduce(flat, 2),
        DescriptorKind::Gem(p) => {
            DescriptorKind::gem(p)?;
            let lifted = g.clamp_min(flat, GEM_EPS);
            let powed = g.pow(lifted, p)?;
            let mean = g.mean_reduce(powed, 2)?;
            g.pow(mean, 1.0 / p)
        }
    }
}

/// `l2_normalize(pooled . W^T)` for a `k x C` weight; no bias.
pub fn project_branch(g: &mut Graph, pooled: Var, weight: Var) -> Result<Var> {
    let (ps, ws) = (g.shape(pooled).to_vec(), g.shape(weight).to_vec());
    if ps.len() != 2 || ws.len() != 2 || ps[1] != ws[1] {
        return Err(CgdError::Shape(format!(
            "branch projection: pooled {ps:?} incompatible with weight {ws:?}"
        )));
    }
    let wt = g.transpose(weight)?;
    let projected = g.matmul(pooled, wt)?;
    g.l2_normalize(projected, 1, NORM_EPS)
}

#[derive(Clone, Debug)]
pub struct CombinedEmbedding {
    pub var: Var,
    /// Column range of each branch inside the combined vector (concat only).
    pub block_bounds: Vec<Range<usize>>,
}

/// Merges unit-norm branch embeddings into one unit-norm embedding.
pub fn combine(g: &mut Graph, branches: &[Var], method: Combination) -> Result<CombinedEmbedding> {
    if branches.is_empty() {
        return Err(CgdError::InvalidArgument("combine needs at least one branch".into()));
    }
    match method {
        Combination::Concat => {
            let mut bounds = Vec::with_capacity(branches.len());
            let mut start = 0;
            for &b in branches {
                let d = g.shape(b)[1];
                bounds.push(start..start + d);
                start += d;
            }
            let cat = g.concat(branches, 1)?;
            let var = g.l2_normalize(cat, 1, NORM_EPS)?;
            Ok(CombinedEmbedding {
                var,
                block_bounds: bounds,
            })
        }
        Combination::Sum => {
            let d = g.shape(branches[0])[1];
            if let Some(&bad) = branches.iter().find(|&&b| g.shape(b)[1] != d) {
                return Err(CgdError::Shape(format!(
                    "sum combination needs equal branch dims, got {d} and {}",
                    g.shape(bad)[1]
                )));
            }
            let mut acc = branches[0];
            for &b in &branches[1..] {
                acc = g.add(acc, b)?;
            }
            let avg = g.scale(acc, 1.0 / branches.len() as f64);
            let var = g.l2_normalize(avg, 1, NORM_EPS)?;
            Ok(CombinedEmbedding {
                var,
                block_bounds: vec![0..d],
            })
        }
    }
}

/// Picks the two best single descriptors; the better one goes first.
///
/// Ties are broken by the order S < M < G.
pub fn select_best_config(
    single_results: &BTreeMap<char, f64>,
    total_dim: usize,
    gem_p: f64,
) -> Result<DescriptorConfig> {
    let mut scored = Vec::with_capacity(3);
    for letter in ['S', 'M', 'G'] {
        let r = single_results.get(&letter).ok_or_else(|| {
            CgdError::InvalidArgument(format!("missing single-descriptor result for `{letter}`"))
        })?;
        if r.is_nan() {
            return Err(CgdError::InvalidArgument(format!("result for `{letter}` is NaN")));
        }
        scored.push((DescriptorKind::from_letter(letter, gem_p)?, *r));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.order().cmp(&b.0.order())));
    DescriptorConfig::new(vec![scored[0].0, scored[1].0], total_dim)
}
