//! Plain conv(3x3) -> bias -> ReLU stack producing the `N x C x H x W` map
//! that the descriptor branches pool.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::{ParamScope, ParamStore};
use crate::error::{CgdError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const INPUT_CHANNELS: usize = 3;
const KERNEL: usize = 3;
const PADDING: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    /// Forces the final stage to stride 1, doubling the last spatial extent.
    pub remove_last_downsample: bool,
    pub input_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![16, 32, 64],
            stage_strides: vec![2, 2, 2],
            remove_last_downsample: true,
            input_size: 32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != self.stage_strides.len() {
            return Err(CgdError::Config(format!(
                "backbone has {} channel entries but {} stride entries",
                self.stage_channels.len(),
                self.stage_strides.len()
            )));
        }
        if self.stage_channels.len() < 2 {
            return Err(CgdError::Config("backbone needs at least two stages".into()));
        }
        if self.stage_channels.contains(&0) {
            return Err(CgdError::Config("backbone stage with zero channels".into()));
        }
        if let Some(s) = self.stage_strides.iter().find(|&&s| s != 1 && s != 2) {
            return Err(CgdError::Config(format!("backbone stride {s} not in {{1, 2}}")));
        }
        if self.input_size == 0 {
            return Err(CgdError::Config("backbone input size must be positive".into()));
        }
        Ok(())
    }

    /// Strides actually applied, after the downsampling-removal switch.
    pub fn effective_strides(&self) -> Vec<usize> {
        let mut s = self.stage_strides.clone();
        if self.remove_last_downsample {
            if let Some(last) = s.last_mut() {
                *last = 1;
            }
        }
        s
    }

    pub fn out_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated backbone has stages")
    }

    /// Spatial extent of the final feature map for a square input.
    pub fn out_size(&self) -> usize {
        self.effective_strides()
            .iter()
            .fold(self.input_size, |len, &s| (len + 2 * PADDING - KERNEL) / s + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

pub(crate) fn weight_name(stage: usize) -> String {
    format!("backbone.stage{stage}.weight")
}

pub(crate) fn bias_name(stage: usize) -> String {
    format!("backbone.stage{stage}.bias")
}

/// He (fan-in) normal weights, zero biases.
pub(crate) fn init_params<R: Rng>(cfg: &BackboneConfig, rng: &mut R, store: &mut ParamStore) -> Result<()> {
    cfg.validate()?;
    let mut in_ch = INPUT_CHANNELS;
    for (i, &out_ch) in cfg.stage_channels.iter().enumerate() {
        let fan_in = in_ch * KERNEL * KERNEL;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let data = (0..out_ch * fan_in).map(|_| normal.sample(rng)).collect();
        store.insert(weight_name(i), Tensor::new(&[out_ch, in_ch, KERNEL, KERNEL], data)?);
        store.insert(bias_name(i), Tensor::zeros(&[out_ch]));
        in_ch = out_ch;
    }
    Ok(())
}

/// Deterministically initializes a standalone backbone parameter set.
pub fn build_backbone(cfg: &BackboneConfig, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_params(cfg, &mut rng, &mut store)?;
    log::debug!("backbone initialized with {} parameters", store.num_scalars());
    Ok(store)
}

pub fn forward(cfg: &BackboneConfig, scope: &mut ParamScope, g: &mut Graph, batch: Var) -> Result<FeatureMap> {
    let s = g.shape(batch).to_vec();
    if s.len() != 4 || s[1] != INPUT_CHANNELS || s[2] != cfg.input_size || s[3] != cfg.input_size {
        return Err(CgdError::Shape(format!(
            "backbone expects N x {INPUT_CHANNELS} x {0} x {0} input, got {s:?}",
            cfg.input_size
        )));
    }
    let mut x = batch;
    for (i, &stride) in cfg.effective_strides().iter().enumerate() {
        let w = scope.get(g, &weight_name(i))?;
        let b = scope.get(g, &bias_name(i))?;
        let y = g.conv2d(x, w, stride, PADDING)?;
        let y = g.add_bias(y, b)?;
        x = g.relu(y);
    }
    let out = g.shape(x);
    Ok(FeatureMap {
        var: x,
        channels: out[1],
        height: out[2],
        width: out[3],
    })
}
