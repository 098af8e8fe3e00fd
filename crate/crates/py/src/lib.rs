//! Python bindings: descriptor configs, models, embedding sets, training and
//! evaluation.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use cgd::checkpoint::ParamStore;
use cgd::config::ExperimentConfig;
use cgd::dataio::{generate_synthetic as gen_synthetic, SyntheticSpec};
use cgd::descriptor::{self, CONFIGURATIONS};
use cgd::experiment::{run_experiment, Dataset};
use cgd::graph::Graph;
use cgd::loss::{batch_hard_triplet as bh_triplet, TripletConfig, TripletVariant};
use cgd::model::{CgdModel, CLASSIFIER_WEIGHT};
use cgd::retrieval::{evaluate, EmbeddingSet};
use cgd::{CgdError, Tensor};

fn to_py(e: CgdError) -> PyErr {
    match e {
        CgdError::Io(io) => PyOSError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn rows_to_tensor(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("expected a non-empty list of equal-length rows"));
    }
    Tensor::new(&[rows.len(), width], rows.concat()).map_err(to_py)
}

fn tensor_to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let w = t.shape()[1];
    t.data().chunks(w).map(<[f64]>::to_vec).collect()
}

/// A parsed descriptor configuration such as "SM" or "GSM".
#[pyclass(name = "DescriptorConfig", frozen)]
struct PyDescriptorConfig {
    inner: descriptor::DescriptorConfig,
}

#[pymethods]
impl PyDescriptorConfig {
    #[new]
    #[pyo3(signature = (config, total_dim = 48, gem_p = 3.0))]
    fn new(config: &str, total_dim: usize, gem_p: f64) -> PyResult<Self> {
        Ok(Self {
            inner: descriptor::DescriptorConfig::parse(config, total_dim, gem_p).map_err(to_py)?,
        })
    }

    #[getter]
    fn notation(&self) -> String {
        self.inner.notation()
    }

    #[getter]
    fn per_branch_dims(&self) -> Vec<usize> {
        self.inner.per_branch_dims().to_vec()
    }

    #[getter]
    fn aux_branch(&self) -> usize {
        self.inner.aux_branch()
    }

    #[getter]
    fn total_dim(&self) -> usize {
        self.inner.total_dim()
    }

    fn __repr__(&self) -> String {
        format!("DescriptorConfig('{}', total_dim={})", self.inner.notation(), self.inner.total_dim())
    }
}

/// Backbone plus descriptor head. Images are flat `3*S*S` lists in `[0, 1]`.
#[pyclass(name = "Model")]
struct PyModel {
    inner: CgdModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (descriptor = "SM", num_classes = 8, seed = 1, architecture = "cgd", combination = "concat", total_dim = 48))]
    fn new(
        descriptor: &str,
        num_classes: usize,
        seed: u64,
        architecture: &str,
        combination: &str,
        total_dim: usize,
    ) -> PyResult<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.set("descriptor", descriptor).map_err(to_py)?;
        cfg.set("architecture", architecture).map_err(to_py)?;
        cfg.set("combination", combination).map_err(to_py)?;
        cfg.total_dim = total_dim;
        cfg.validate().map_err(to_py)?;
        let model = CgdModel::new(cfg.model_config(num_classes).map_err(to_py)?, seed).map_err(to_py)?;
        Ok(Self { inner: model })
    }

    /// Loads a model from a config snapshot and a CKPT1 checkpoint.
    #[staticmethod]
    fn load(config_path: PathBuf, checkpoint_path: PathBuf) -> PyResult<Self> {
        let cfg = ExperimentConfig::load(&config_path).map_err(to_py)?;
        let params = ParamStore::load(&checkpoint_path).map_err(to_py)?;
        let classes = params.require(CLASSIFIER_WEIGHT).map_err(to_py)?.shape()[0];
        let model = CgdModel::from_params(cfg.model_config(classes).map_err(to_py)?, params).map_err(to_py)?;
        Ok(Self { inner: model })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.params.save(&path).map_err(to_py)
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.inner.config.embedding_dim()
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.config.backbone.input_size
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.params.num_scalars()
    }

    #[getter]
    fn head_param_count(&self) -> usize {
        self.inner.head_param_count()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params.names().map(str::to_string).collect()
    }

    /// Unit-norm embeddings, one row per image.
    fn embed(&self, images: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let s = self.inner.config.backbone.input_size;
        if images.iter().any(|im| im.len() != 3 * s * s) {
            return Err(PyValueError::new_err(format!("each image must hold 3*{s}*{s} values")));
        }
        let batch = Tensor::new(&[images.len(), 3, s, s], images.concat()).map_err(to_py)?;
        Ok(tensor_to_rows(&self.inner.embed(&batch).map_err(to_py)?))
    }
}

/// Float32 embeddings with labels (the EMB1 file format).
#[pyclass(name = "EmbeddingSet")]
struct PyEmbeddingSet {
    inner: EmbeddingSet,
}

#[pymethods]
impl PyEmbeddingSet {
    #[new]
    fn new(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<Self> {
        let t = rows_to_tensor(&rows)?;
        Ok(Self {
            inner: EmbeddingSet::from_tensor(&t, &labels).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: EmbeddingSet::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.count()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn labels(&self) -> Vec<u32> {
        self.inner.labels.clone()
    }

    fn rows(&self) -> Vec<Vec<f32>> {
        self.inner.data.chunks(self.inner.dim).map(<[f32]>::to_vec).collect()
    }

    /// Recall@K against `gallery` (or against itself, skipping each query's own row).
    #[pyo3(signature = (gallery = None, k = vec![1, 2, 4, 8]))]
    fn recall(&self, gallery: Option<PyRef<'_, PyEmbeddingSet>>, k: Vec<usize>) -> PyResult<BTreeMap<usize, f64>> {
        let report = match gallery {
            Some(g) => evaluate(&self.inner, &g.inner, &k, false),
            None => evaluate(&self.inner, &self.inner, &k, true),
        }
        .map_err(to_py)?;
        Ok(report.recall_at_k)
    }
}

/// The twelve accepted descriptor configuration strings.
#[pyfunction]
fn configurations() -> Vec<&'static str> {
    CONFIGURATIONS.to_vec()
}

/// Two-branch configuration from single-descriptor Recall@1 values keyed "S", "M", "G".
#[pyfunction]
#[pyo3(signature = (single_results, total_dim = 48))]
fn select_best_config(single_results: HashMap<char, f64>, total_dim: usize) -> PyResult<String> {
    let m: BTreeMap<char, f64> = single_results.into_iter().collect();
    Ok(descriptor::select_best_config(&m, total_dim, descriptor::DEFAULT_GEM_P)
        .map_err(to_py)?
        .notation())
}

/// Writes the synthetic corpus under `out_dir`; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, classes = 8, per_class = 16, size = 32, jitter = 0.2, seed = 7))]
fn generate_synthetic(out_dir: PathBuf, classes: usize, per_class: usize, size: usize, jitter: f64, seed: u64) -> PyResult<String> {
    let spec = SyntheticSpec {
        num_classes: classes,
        instances_per_class: per_class,
        image_size: size,
        intra_class_jitter: jitter,
        seed,
    };
    gen_synthetic(&spec).and_then(|c| c.write_to(&out_dir)).map_err(to_py)?;
    Ok(out_dir.join("manifest.csv").display().to_string())
}

/// Batch-hard triplet loss value for a batch of embeddings.
#[pyfunction]
#[pyo3(signature = (embeddings, labels, margin = 0.1, soft = false))]
fn batch_hard_triplet(embeddings: Vec<Vec<f64>>, labels: Vec<usize>, margin: f64, soft: bool) -> PyResult<f64> {
    let mut g = Graph::new();
    let e = g.constant(rows_to_tensor(&embeddings)?);
    let cfg = TripletConfig {
        margin,
        variant: if soft { TripletVariant::SoftMargin } else { TripletVariant::HardMargin },
    };
    let l = bh_triplet(&mut g, e, &labels, &cfg).map_err(to_py)?;
    g.value(l).item().map_err(to_py)
}

/// Pools an `N x C x H x W` map given as a flat list; returns `N` rows of `C` values.
#[pyfunction]
#[pyo3(signature = (values, shape, kind, p = 3.0))]
fn pool(values: Vec<f64>, shape: (usize, usize, usize, usize), kind: char, p: f64) -> PyResult<Vec<Vec<f64>>> {
    let (n, c, h, w) = shape;
    let mut g = Graph::new();
    let var = g.constant(Tensor::new(&[n, c, h, w], values).map_err(to_py)?);
    let fmap = cgd::backbone::FeatureMap {
        var,
        channels: c,
        height: h,
        width: w,
    };
    let kind = descriptor::DescriptorKind::from_letter(kind, p).map_err(to_py)?;
    let out = descriptor::generalized_pool(&mut g, &fmap, kind).map_err(to_py)?;
    Ok(tensor_to_rows(g.value(out)))
}

/// Trains on a manifest, writes outputs under `out_dir`, and returns a summary.
///
/// `overrides` maps config keys (e.g. "train.epochs") to values.
#[pyfunction]
#[pyo3(signature = (manifest, out_dir, descriptor = "SM", seed = 1, overrides = None))]
fn train(
    py: Python<'_>,
    manifest: PathBuf,
    out_dir: PathBuf,
    descriptor: &str,
    seed: u64,
    overrides: Option<HashMap<String, String>>,
) -> PyResult<HashMap<String, f64>> {
    let mut cfg = ExperimentConfig::default();
    cfg.set("descriptor", descriptor).map_err(to_py)?;
    let mut keys: Vec<_> = overrides.unwrap_or_default().into_iter().collect();
    keys.sort();
    for (k, v) in &keys {
        cfg.set(k, v).map_err(to_py)?;
    }
    cfg.train.seed = seed;
    cfg.manifest = Some(manifest.clone());
    cfg.out_dir = Some(out_dir.clone());
    cfg.validate().map_err(to_py)?;
    let run = py
        .detach(|| -> cgd::Result<_> {
            let data = Dataset::from_manifest(&cgd::dataio::Manifest::read(&manifest)?)?;
            std::fs::create_dir_all(&out_dir)?;
            cfg.save(&out_dir.join("config.ini"))?;
            let run = run_experiment(&cfg, &data, seed)?;
            run.outcome.write(&out_dir)?;
            Ok(run)
        })
        .map_err(to_py)?;
    let mut out: HashMap<String, f64> = run
        .report
        .recall_at_k
        .iter()
        .map(|(k, v)| (format!("recall@{k}"), *v))
        .collect();
    out.insert("best_epoch".into(), run.outcome.best_epoch as f64);
    out.insert("epochs_run".into(), run.outcome.metrics.len() as f64);
    Ok(out)
}

#[pymodule]
fn cgd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDescriptorConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyEmbeddingSet>()?;
    m.add_function(wrap_pyfunction!(configurations, m)?)?;
    m.add_function(wrap_pyfunction!(select_best_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(batch_hard_triplet, m)?)?;
    m.add_function(wrap_pyfunction!(pool, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
