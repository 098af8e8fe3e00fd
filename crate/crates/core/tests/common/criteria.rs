//! Acceptance criteria as functions returning a verdict and a one-line detail.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use cgd::backbone::{BackboneConfig, FeatureMap};
use cgd::config::ExperimentConfig;
use cgd::dataio::{generate_synthetic, SyntheticSpec};
use cgd::descriptor::{combine, generalized_pool, select_best_config, CONFIGURATIONS};
use cgd::experiment::{
    ablation_arms, cmd_ablation, cmd_sweep, median, run_experiment, trend_checks, Dataset, RunCache, SweepReport,
};
use cgd::loss::{batch_hard_triplet, TripletConfig, TripletVariant};
use cgd::model::{CgdModel, ModelConfig};
use cgd::retrieval::{evaluate, knn_search, EmbeddingSet};
use cgd::{Architecture, Combination, DescriptorConfig, DescriptorKind, Graph, Tensor};
use rand::Rng;

use super::{gradsuite, oracle, pk_labels, rng, uniform, unit_rows};

pub struct Verdict {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

pub fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let reports: Vec<_> = gradsuite::all().into_iter().map(|f| f()).collect();
    let elapsed = start.elapsed();
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let worst = reports.iter().map(|r| r.max_error).fold(0.0, f64::max);
    let min_instances = reports.iter().map(|r| r.instances).min().unwrap_or(0);
    Verdict {
        name: "gradient suite",
        passed: failed.is_empty() && elapsed < Duration::from_secs(120),
        detail: format!(
            "{} ops, >= {min_instances} instances each, max rel err {worst:.2e}, {:.1}s, failing: {failed:?}",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    }
}

/// Pools one `1 x C x H x W` map with the library implementation.
pub fn pool(map: &Tensor, kind: DescriptorKind) -> Vec<f64> {
    let mut g = Graph::new();
    let var = g.constant(map.clone());
    let s = map.shape();
    let fm = FeatureMap {
        var,
        channels: s[1],
        height: s[2],
        width: s[3],
    };
    let v = generalized_pool(&mut g, &fm, kind).unwrap();
    g.value(v).data().to_vec()
}

pub struct PoolingStats {
    pub order_violations: usize,
    pub gem1_max_diff: f64,
    pub gem100_max_rel_gap: f64,
    pub gem100_within: usize,
    pub channels: usize,
}

/// Random nonnegative maps in [0, 1) with 1..=8 channels and 1..=8 rows/cols.
pub fn pooling_stats(maps: usize, seed: u64) -> PoolingStats {
    let mut r = rng(seed);
    let mut st = PoolingStats {
        order_violations: 0,
        gem1_max_diff: 0.0,
        gem100_max_rel_gap: 0.0,
        gem100_within: 0,
        channels: 0,
    };
    for _ in 0..maps {
        let shape = [1, r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=8)];
        let map = uniform(&mut r, &shape, 0.0, 1.0);
        let spoc = pool(&map, DescriptorKind::Spoc);
        let mac = pool(&map, DescriptorKind::Mac);
        for p in [1.0, 2.0, 3.0, 10.0, 100.0] {
            let gem = pool(&map, DescriptorKind::Gem(p));
            for c in 0..spoc.len() {
                if gem[c] < spoc[c] - 1e-12 || gem[c] > mac[c] + 1e-12 {
                    st.order_violations += 1;
                }
                if p == 1.0 {
                    st.gem1_max_diff = st.gem1_max_diff.max((gem[c] - spoc[c]).abs());
                }
                if p == 100.0 {
                    let gap = (mac[c] - gem[c]).abs() / mac[c];
                    st.gem100_max_rel_gap = st.gem100_max_rel_gap.max(gap);
                    st.gem100_within += usize::from(gap <= 1e-2);
                    st.channels += 1;
                }
            }
        }
    }
    st
}

pub fn pooling_algebra() -> Vec<Verdict> {
    let st = pooling_stats(1000, 2024);
    vec![
        Verdict {
            name: "pooling order SPoC <= GeM(p) <= MAC",
            passed: st.order_violations == 0,
            detail: format!("{} violations over 1000 maps, p in {{1,2,3,10,100}}", st.order_violations),
        },
        Verdict {
            name: "pooling GeM(1) = SPoC",
            passed: st.gem1_max_diff <= 1e-12,
            detail: format!("max abs diff {:.2e}", st.gem1_max_diff),
        },
        Verdict {
            name: "pooling GeM(100) within 1e-2 of MAC",
            passed: st.gem100_within == st.channels,
            detail: format!(
                "{}/{} channels within tolerance, worst relative gap {:.4}",
                st.gem100_within, st.channels, st.gem100_max_rel_gap
            ),
        },
    ]
}

fn small_model(desc: &str, seed: u64) -> CgdModel {
    let config = ModelConfig {
        backbone: BackboneConfig {
            stage_channels: vec![4, 8],
            stage_strides: vec![2, 2],
            remove_last_downsample: true,
            input_size: 8,
        },
        descriptor: DescriptorConfig::parse(desc, 13, 3.0).unwrap(),
        architecture: Architecture::Cgd,
        combination: Combination::Concat,
        num_classes: 4,
    };
    CgdModel::new(config, seed).unwrap()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub struct GeometryStats {
    pub norm_err: f64,
    pub block_err: f64,
    pub cosine_err: f64,
}

/// Geometry of concatenated embeddings from random models on random images,
/// and from `combine` on random branch vectors.
pub fn geometry_stats(seed: u64) -> GeometryStats {
    let mut r = rng(seed);
    let mut st = GeometryStats {
        norm_err: 0.0,
        block_err: 0.0,
        cosine_err: 0.0,
    };
    let mut record = |emb: &Tensor, bounds: &[std::ops::Range<usize>]| {
        let n = bounds.len() as f64;
        for i in 0..emb.shape()[0] {
            let row = emb.row(i);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            st.norm_err = st.norm_err.max((norm - 1.0).abs());
            for b in bounds {
                let bn = row[b.clone()].iter().map(|x| x * x).sum::<f64>().sqrt();
                st.block_err = st.block_err.max((bn - 1.0 / n.sqrt()).abs());
            }
            for j in 0..i {
                let other = emb.row(j);
                let avg = bounds.iter().map(|b| cos(&row[b.clone()], &other[b.clone()])).sum::<f64>() / n;
                st.cosine_err = st.cosine_err.max((cos(row, other) - avg).abs());
            }
        }
    };
    for (i, desc) in CONFIGURATIONS.iter().enumerate() {
        let model = small_model(desc, seed + i as u64);
        let x = uniform(&mut r, &[6, 3, 8, 8], 0.0, 1.0);
        let mut g = Graph::new();
        let mut scope = cgd::checkpoint::ParamScope::frozen(&model.params);
        let xv = g.constant(x);
        let out = model.forward(&mut g, &mut scope, xv).unwrap();
        record(g.value(out.embedding.var), &out.embedding.block_bounds);
    }
    for _ in 0..200 {
        let n = r.random_range(1..=3);
        let rows = r.random_range(2..=6);
        let mut g = Graph::new();
        let parts: Vec<_> = (0..n)
            .map(|_| {
                let d = r.random_range(1..=8);
                g.constant(unit_rows(&mut r, rows, d))
            })
            .collect();
        let c = combine(&mut g, &parts, Combination::Concat).unwrap();
        record(g.value(c.var), &c.block_bounds);
    }
    st
}

pub fn embedding_geometry() -> Verdict {
    let st = geometry_stats(77);
    Verdict {
        name: "embedding geometry",
        passed: st.norm_err <= 1e-6 && st.block_err <= 1e-6 && st.cosine_err <= 1e-10,
        detail: format!(
            "row norm err {:.1e}, block norm err {:.1e}, cosine identity err {:.1e}",
            st.norm_err, st.block_err, st.cosine_err
        ),
    }
}

/// `count` random unit rows in `dim` dimensions over `classes` labels, with
/// coordinates quantized so exact similarity ties occur.
pub fn random_set(seed: u64, count: usize, dim: usize, classes: u32) -> EmbeddingSet {
    let mut r = rng(seed);
    let mut data = Vec::with_capacity(count * dim);
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for _ in 0..count {
        let row: Vec<f32> = if !rows.is_empty() && r.random_bool(0.1) {
            rows[r.random_range(0..rows.len())].clone()
        } else {
            (0..dim).map(|_| r.random_range(-2i32..=2) as f32).collect()
        };
        rows.push(row.clone());
        data.extend(row);
    }
    let labels = (0..count).map(|_| r.random_range(0..classes)).collect();
    EmbeddingSet::new(dim, data, labels).unwrap()
}

fn rows_of(set: &EmbeddingSet) -> Vec<Vec<f32>> {
    (0..set.count()).map(|i| set.row(i).to_vec()).collect()
}

/// Mismatches between library kNN/Recall@K and brute-force scans.
pub fn retrieval_mismatches(seed: u64, count: usize) -> usize {
    let set = random_set(seed, count, 4, 10);
    let queries = random_set(seed + 1, count / 4, 4, 10);
    let rows = rows_of(&set);
    let mut mismatches = 0;
    for k in [1, 2, 4, 8, count] {
        let lib = knn_search(&set, &set, k, true).unwrap();
        for (q, r) in lib.iter().enumerate() {
            if r.order != oracle::ranking(&rows[q], &rows, &set.ids, Some(q), k) {
                mismatches += 1;
            }
        }
        let lib = knn_search(&queries, &set, k, false).unwrap();
        for (q, r) in lib.iter().enumerate() {
            if r.order != oracle::ranking(queries.row(q), &rows, &set.ids, None, k) {
                mismatches += 1;
            }
        }
    }
    let k_list = [1, 2, 4, 8];
    let rep = evaluate(&set, &set, &k_list, true).unwrap();
    for k in k_list {
        if rep.recall(k) != Some(oracle::recall_single_set(&rows, &set.labels, k)) {
            mismatches += 1;
        }
    }
    mismatches
}

/// Largest |library - brute force| triplet loss over random batches of 32.
pub fn triplet_max_diff(seed: u64, batches: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for i in 0..batches {
        let labels = pk_labels(&mut r, 8, 4);
        let emb = unit_rows(&mut r, 32, 16);
        let cfg = TripletConfig {
            margin: 0.1,
            variant: if i % 2 == 0 { TripletVariant::HardMargin } else { TripletVariant::SoftMargin },
        };
        let mut g = Graph::new();
        let e = g.constant(emb.clone());
        let l = batch_hard_triplet(&mut g, e, &labels, &cfg).unwrap();
        let lib = g.value(l).item().unwrap();
        let brute = oracle::batch_hard_triplet(&emb, &labels, cfg.margin, cfg.variant == TripletVariant::SoftMargin);
        worst = worst.max((lib - brute).abs());
    }
    worst
}

pub fn oracle_equivalence() -> Verdict {
    let mismatches = retrieval_mismatches(5, 200);
    let triplet = triplet_max_diff(6, 50);
    Verdict {
        name: "oracle equivalence",
        passed: mismatches == 0 && triplet <= 1e-12,
        detail: format!("kNN/recall mismatches on 200 embeddings: {mismatches}; triplet max diff on batches of 32: {triplet:.1e}"),
    }
}

/// Every string of up to three letters from an alphabet wider than S, M, G.
pub fn candidate_strings() -> Vec<String> {
    let alphabet = ['S', 'M', 'G', 'X', 's'];
    let mut out = vec![String::new()];
    let mut frontier = vec![String::new()];
    for _ in 0..3 {
        let mut next = Vec::new();
        for s in &frontier {
            for c in alphabet {
                next.push(format!("{s}{c}"));
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

pub fn configuration_logic() -> Verdict {
    let accepted: Vec<String> = candidate_strings()
        .into_iter()
        .filter(|s| DescriptorConfig::parse(s, 48, 3.0).is_ok())
        .collect();
    let mut expected: Vec<String> = CONFIGURATIONS.iter().map(|s| s.to_string()).collect();
    let mut got = accepted.clone();
    expected.sort();
    got.sort();
    let aux_ok = accepted.iter().all(|s| {
        let c = DescriptorConfig::parse(s, 48, 3.0).unwrap();
        c.aux_branch() == 0 && Some(c.aux_kind().letter()) == s.chars().next()
    });
    let singles = BTreeMap::from([('S', 93.8), ('M', 93.6), ('G', 93.9)]);
    let best = select_best_config(&singles, 48, 3.0).unwrap().notation();
    Verdict {
        name: "configuration logic",
        passed: got == expected && got.len() == 12 && aux_ok && best == "GS",
        detail: format!(
            "{} of {} candidate strings accepted, aux = first letter: {aux_ok}, best config {best}",
            accepted.len(),
            candidate_strings().len()
        ),
    }
}

pub fn desk_dataset() -> Dataset {
    Dataset::from_synthetic(&generate_synthetic(&SyntheticSpec::default()).unwrap())
}

pub fn desk_convergence(data: &Dataset, cache: &mut RunCache) -> Verdict {
    let cfg = ExperimentConfig::default();
    let start = Instant::now();
    let recalls: Vec<f64> = cfg.seeds.iter().map(|&s| cache.run(&cfg, data, s).unwrap().recall(1)).collect();
    let elapsed = start.elapsed();
    let m = median(&recalls);
    Verdict {
        name: "desk-scale convergence",
        passed: m >= 0.90 && elapsed < Duration::from_secs(600) && cfg.train.epochs <= 20,
        detail: format!(
            "{} on 8x16 32x32 corpus, {} epochs: median R@1 {m:.4} over seeds {:?} ({recalls:?}), {:.0}s",
            cfg.descriptor,
            cfg.train.epochs,
            cfg.seeds,
            elapsed.as_secs_f64()
        ),
    }
}

pub fn trend_verdicts(data: &Dataset, cache: &mut RunCache) -> (Vec<Verdict>, SweepReport) {
    let base = ExperimentConfig::default();
    let ablation = cmd_ablation(&base, data, cache).unwrap();
    let configs: Vec<String> = CONFIGURATIONS.iter().map(|s| s.to_string()).collect();
    let sweep = cmd_sweep(&base, &configs, data, cache).unwrap();
    debug_assert_eq!(ablation_arms(&base).len(), ablation.arms.len());
    let verdicts = trend_checks(&ablation, Some(&sweep), 0.0)
        .into_iter()
        .map(|t| Verdict {
            name: "trend",
            passed: t.holds,
            detail: t.line(),
        })
        .collect();
    (verdicts, sweep)
}

pub fn determinism(data: &Dataset) -> Verdict {
    let cfg = ExperimentConfig::default();
    let bytes = |seed| {
        let r = run_experiment(&cfg, data, seed).unwrap();
        let mut ckpt = Vec::new();
        r.outcome.best_params.rounded_to_f32().write_to(&mut ckpt).unwrap();
        (r.outcome.metrics_log().into_bytes(), ckpt)
    };
    let (a, b) = (bytes(3), bytes(3));
    Verdict {
        name: "determinism",
        passed: a == b,
        detail: format!(
            "metrics identical: {}, checkpoints identical: {} ({} bytes)",
            a.0 == b.0,
            a.1 == b.1,
            a.1.len()
        ),
    }
}
