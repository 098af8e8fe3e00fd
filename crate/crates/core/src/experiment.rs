//! Single runs, the configuration sweep, and the ablation study.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::dataio::{LabeledImages, Manifest, Split, SyntheticCorpus};
use crate::descriptor::{select_best_config, Architecture, Combination, DescriptorConfig, CONFIGURATIONS};
use crate::error::{CgdError, Result};
use crate::model::{CgdModel, CLASSIFIER_BIAS, CLASSIFIER_WEIGHT};
use crate::retrieval::{evaluate, RecallReport};
use crate::trainer::{embed_images, train, EpochMetrics, TrainOutcome};

/// Train and test images plus the class count.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: LabeledImages,
    pub test: LabeledImages,
    pub num_classes: usize,
}

impl Dataset {
    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        Ok(Self {
            train: m.load_split(Some(Split::Train))?,
            test: m.load_split(Some(Split::Test))?,
            num_classes: m.num_classes(),
        })
    }

    pub fn from_synthetic(c: &SyntheticCorpus) -> Self {
        Self {
            train: c.split(Split::Train),
            test: c.split(Split::Test),
            num_classes: c.labels.iter().max().map_or(0, |m| m + 1),
        }
    }

    /// Fails when the train split has fewer than `batch_p` classes.
    pub fn check_batch_classes(&self, batch_p: usize) -> Result<()> {
        let mut classes = self.train.labels.clone();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < batch_p {
            return Err(CgdError::Data(format!(
                "PK sampling needs {batch_p} classes, train split has {}",
                classes.len()
            )));
        }
        Ok(())
    }
}

/// One training run followed by test-split evaluation.
pub struct RunResult {
    pub outcome: TrainOutcome,
    /// Model holding the stored (float32-rounded) best parameters.
    pub model: CgdModel,
    pub report: RecallReport,
}

/// Trains with `seed` for both initialization and sampling, then evaluates
/// the retained checkpoint exactly as `embed` + `eval` would.
pub fn run_experiment(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<RunResult> {
    cfg.validate()?;
    let mut model = CgdModel::new(cfg.model_config(data.num_classes)?, seed)?;
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let outcome = train(&mut model, &data.train, &data.test, &tc, &cfg.loss)?;
    let model = CgdModel::from_params(model.config, outcome.best_params.rounded_to_f32())?;
    let set = embed_images(&model, &data.test)?;
    let report = evaluate(&set, &set, &cfg.k_list, true)?;
    Ok(RunResult { outcome, model, report })
}

/// What sweeps and ablations keep from a run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub recall_at_k: BTreeMap<usize, f64>,
    #[serde(skip)]
    pub metrics: Vec<EpochMetrics>,
    pub classifier_touched: bool,
    pub aborted: Option<String>,
}

impl RunSummary {
    pub fn recall(&self, k: usize) -> f64 {
        self.recall_at_k.get(&k).copied().unwrap_or(0.0)
    }
}

/// Memoizes runs by (canonical config text, seed).
#[derive(Default)]
pub struct RunCache {
    runs: HashMap<(String, u64), RunSummary>,
    pub trained: usize,
}

impl RunCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn run(&mut self, cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<RunSummary> {
        let mut key_cfg = cfg.clone();
        key_cfg.train.seed = 0;
        key_cfg.seeds = vec![0];
        key_cfg.out_dir = None;
        let key = (key_cfg.to_text(), seed);
        if let Some(r) = self.runs.get(&key) {
            return Ok(r.clone());
        }
        let r = run_experiment(cfg, data, seed)?;
        let touched = &r.outcome.touched_params;
        let summary = RunSummary {
            seed,
            recall_at_k: r.report.recall_at_k.clone(),
            metrics: r.outcome.metrics.clone(),
            classifier_touched: touched.contains(CLASSIFIER_WEIGHT) || touched.contains(CLASSIFIER_BIAS),
            aborted: r.outcome.aborted.clone(),
        };
        log::info!(
            "{} {} {} seed {seed}: R@1 {:.4}",
            cfg.descriptor,
            cfg.architecture,
            cfg.combination,
            summary.recall(1)
        );
        self.trained += 1;
        self.runs.insert(key, summary.clone());
        Ok(summary)
    }
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub descriptor: String,
    pub median_recall_at_k: BTreeMap<usize, f64>,
    pub runs: Vec<RunSummary>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub k_list: Vec<usize>,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
    /// Two-branch configuration built from the best single descriptors,
    /// present when S, M and G were all swept.
    pub recommendation: Option<String>,
}

impl SweepReport {
    pub fn row(&self, descriptor: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.descriptor == descriptor)
    }

    fn best(&self, combined: bool) -> Option<(&str, f64)> {
        self.rows
            .iter()
            .filter(|r| (r.descriptor.len() > 1) == combined)
            .map(|r| (r.descriptor.as_str(), r.median_recall_at_k.get(&1).copied().unwrap_or(0.0)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }

    pub fn best_single(&self) -> Option<(&str, f64)> {
        self.best(false)
    }

    pub fn best_combined(&self) -> Option<(&str, f64)> {
        self.best(true)
    }

    /// Tab-separated table: medians, then per-seed Recall@1.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("config");
        for k in &self.k_list {
            let _ = write!(s, "\tR@{k}");
        }
        for seed in &self.seeds {
            let _ = write!(s, "\tR@1[seed={seed}]");
        }
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.descriptor);
            for k in &self.k_list {
                let _ = write!(s, "\t{:.4}", row.median_recall_at_k[k]);
            }
            for r in &row.runs {
                let _ = write!(s, "\t{:.4}", r.recall(1));
            }
            s.push('\n');
        }
        if let Some(rec) = &self.recommendation {
            let _ = writeln!(s, "# recommended: {rec}");
        }
        s
    }
}

/// Trains and evaluates every configuration over `base.seeds`.
pub fn cmd_sweep(base: &ExperimentConfig, configs: &[String], data: &Dataset, cache: &mut RunCache) -> Result<SweepReport> {
    if configs.is_empty() {
        return Err(CgdError::Config("sweep needs at least one configuration".into()));
    }
    for c in configs {
        DescriptorConfig::parse(c, base.total_dim, base.gem_p)?;
        let mut probe = base.clone();
        probe.descriptor = c.clone();
        probe.validate()?;
    }
    let mut rows = Vec::with_capacity(configs.len());
    for c in configs {
        let mut cfg = base.clone();
        cfg.descriptor = c.clone();
        let runs = base
            .seeds
            .iter()
            .map(|&seed| cache.run(&cfg, data, seed))
            .collect::<Result<Vec<_>>>()?;
        let median_recall_at_k = base
            .k_list
            .iter()
            .map(|&k| (k, median(&runs.iter().map(|r| r.recall(k)).collect::<Vec<_>>())))
            .collect();
        rows.push(SweepRow {
            descriptor: c.clone(),
            median_recall_at_k,
            runs,
        });
    }
    let singles: BTreeMap<char, f64> = rows
        .iter()
        .filter(|r| r.descriptor.len() == 1)
        .map(|r| (r.descriptor.chars().next().unwrap_or('S'), r.median_recall_at_k[&base.k_list[0]]))
        .collect();
    let recommendation = if singles.len() == 3 {
        Some(select_best_config(&singles, base.total_dim, base.gem_p)?.notation())
    } else {
        None
    };
    Ok(SweepReport {
        k_list: base.k_list.clone(),
        seeds: base.seeds.clone(),
        rows,
        recommendation,
    })
}

/// Every configuration string, in canonical order.
pub fn all_configurations() -> Vec<String> {
    CONFIGURATIONS.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationArm {
    /// Which comparison the arm belongs to.
    pub study: String,
    pub name: String,
    pub median_recall_at_1: f64,
    pub runs: Vec<RunSummary>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub arms: Vec<AblationArm>,
}

impl AblationReport {
    pub fn arm(&self, study: &str, name: &str) -> Option<&AblationArm> {
        self.arms.iter().find(|a| a.study == study && a.name == name)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("study\tarm\tmedian_R@1");
        for seed in &self.seeds {
            let _ = write!(s, "\tR@1[seed={seed}]");
        }
        s.push('\n');
        for a in &self.arms {
            let _ = write!(s, "{}\t{}\t{:.4}", a.study, a.name, a.median_recall_at_1);
            for r in &a.runs {
                let _ = write!(s, "\t{:.4}", r.recall(1));
            }
            s.push('\n');
        }
        s
    }
}

pub const STUDY_LOSS: &str = "loss";
pub const STUDY_TRICKS: &str = "tricks";
pub const STUDY_ARCHITECTURE: &str = "architecture";
pub const STUDY_COMBINATION: &str = "combination";

const DEFAULT_LABEL_SMOOTHING: f64 = 0.1;
const DEFAULT_TEMPERATURE: f64 = 0.5;

/// Arm configurations in report order: `(study, name, config)`.
pub fn ablation_arms(base: &ExperimentConfig) -> Vec<(&'static str, String, ExperimentConfig)> {
    let ls = if base.loss.label_smoothing > 0.0 {
        base.loss.label_smoothing
    } else {
        DEFAULT_LABEL_SMOOTHING
    };
    let ts = if base.loss.temperature != 1.0 {
        base.loss.temperature
    } else {
        DEFAULT_TEMPERATURE
    };
    let cls = if base.loss.cls_weight > 0.0 { base.loss.cls_weight } else { 1.0 };
    let mut cgd = base.clone();
    cgd.architecture = Architecture::Cgd;
    cgd.combination = Combination::Concat;
    cgd.loss.cls_weight = cls;
    cgd.loss.label_smoothing = ls;
    cgd.loss.temperature = ts;

    let mut arms = Vec::new();
    for objective in ["rank-only", "joint"] {
        for tricks in ["none", "LS", "TS", "both"] {
            let mut c = cgd.clone();
            let use_ls = objective == "joint" && (tricks == "LS" || tricks == "both");
            let use_ts = objective == "joint" && (tricks == "TS" || tricks == "both");
            c.loss.label_smoothing = if use_ls { ls } else { 0.0 };
            c.loss.temperature = if use_ts { ts } else { 1.0 };
            if objective == "rank-only" {
                c.loss.cls_weight = 0.0;
            }
            let study = if tricks == "both" || objective == "rank-only" {
                STUDY_LOSS
            } else {
                STUDY_TRICKS
            };
            arms.push((study, format!("{objective}/{tricks}"), c));
        }
    }
    for (name, arch) in [("A", Architecture::TypeA), ("B", Architecture::TypeB), ("CGD", Architecture::Cgd)] {
        let mut c = cgd.clone();
        c.architecture = arch;
        arms.push((STUDY_ARCHITECTURE, name.to_string(), c));
    }
    for (name, comb) in [("sum", Combination::Sum), ("concat", Combination::Concat)] {
        let mut c = cgd.clone();
        c.combination = comb;
        arms.push((STUDY_COMBINATION, name.to_string(), c));
    }
    arms
}

/// Runs every ablation arm over `base.seeds`; identical arms train once.
pub fn cmd_ablation(base: &ExperimentConfig, data: &Dataset, cache: &mut RunCache) -> Result<AblationReport> {
    let arms = ablation_arms(base);
    for (_, _, c) in &arms {
        c.validate()?;
    }
    let mut out = Vec::with_capacity(arms.len());
    for (study, name, c) in arms {
        let runs = base
            .seeds
            .iter()
            .map(|&seed| cache.run(&c, data, seed))
            .collect::<Result<Vec<_>>>()?;
        let median_recall_at_1 = median(&runs.iter().map(|r| r.recall(1)).collect::<Vec<_>>());
        out.push(AblationArm {
            study: study.to_string(),
            name,
            median_recall_at_1,
            runs,
        });
    }
    Ok(AblationReport {
        seeds: base.seeds.clone(),
        arms: out,
    })
}

/// One directional comparison: `better >= worse - tolerance`.
#[derive(Clone, Debug, Serialize)]
pub struct TrendCheck {
    pub name: String,
    pub better: f64,
    pub worse: f64,
    pub tolerance: f64,
    pub holds: bool,
}

impl TrendCheck {
    pub fn new(name: &str, better: f64, worse: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            better,
            worse,
            tolerance,
            holds: better >= worse - tolerance,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{}\t{:.4} vs {:.4} (tolerance {})\t{}",
            self.name,
            self.better,
            self.worse,
            self.tolerance,
            if self.holds { "holds" } else { "REVERSED" }
        )
    }
}

/// Directional comparisons across the ablation (and sweep, when given).
pub fn trend_checks(ablation: &AblationReport, sweep: Option<&SweepReport>, tolerance: f64) -> Vec<TrendCheck> {
    let r = |study: &str, name: &str| ablation.arm(study, name).map_or(f64::NAN, |a| a.median_recall_at_1);
    let mut checks = vec![
        TrendCheck::new("joint >= rank-only", r(STUDY_LOSS, "joint/both"), r(STUDY_LOSS, "rank-only/both"), tolerance),
        TrendCheck::new("LS+TS >= none", r(STUDY_LOSS, "joint/both"), r(STUDY_TRICKS, "joint/none"), tolerance),
        TrendCheck::new("CGD >= type B", r(STUDY_ARCHITECTURE, "CGD"), r(STUDY_ARCHITECTURE, "B"), tolerance),
        TrendCheck::new("concat >= sum", r(STUDY_COMBINATION, "concat"), r(STUDY_COMBINATION, "sum"), tolerance),
    ];
    if let Some(s) = sweep {
        if let (Some(c), Some(single)) = (s.best_combined(), s.best_single()) {
            checks.push(TrendCheck::new("best combined >= best single - 0.05", c.1, single.1, 0.05));
        }
    }
    checks
}
