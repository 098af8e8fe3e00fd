//! Random-instance gradient checks for every differentiable operation.

use cgd::backbone::{self, BackboneConfig, FeatureMap};
use cgd::checkpoint::ParamScope;
use cgd::descriptor::{combine, generalized_pool, project_branch, NORM_EPS};
use cgd::loss::{aux_softmax_loss, batch_hard_triplet, SoftmaxLossConfig, TripletConfig, TripletVariant};
use cgd::model::{CgdModel, ModelConfig, CLASSIFIER_BIAS, CLASSIFIER_WEIGHT};
use cgd::{Architecture, Combination, DescriptorConfig, DescriptorKind, Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{run_op, OpReport};
use super::{pk_labels, uniform};

pub const INSTANCES: usize = 100;

/// Inputs kept this far from a kink cannot cross it under a finite-difference step.
const KINK_CLEARANCE: f64 = 1e-4;

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn shape2(rng: &mut ChaCha8Rng, rows: (usize, usize), cols: (usize, usize)) -> [usize; 2] {
    [dims(rng, rows.0, rows.1), dims(rng, cols.0, cols.1)]
}

/// Uniform values whose magnitude is at least `gap`, with random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let mut t = uniform(rng, shape, gap, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Values in (0.05, 1] with every pair at least 0.01 apart, shuffled.
fn distinct_positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n)
        .map(|i| 0.05 + 0.95 * (i as f64 + 0.5 * rng.random::<f64>()) / n as f64)
        .collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape, vals).unwrap()
}

fn dist(t: &Tensor, i: usize, j: usize) -> f64 {
    t.row(i).iter().zip(t.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Smallest gap between a decision the batch-hard loss makes and its runner-up.
pub fn triplet_clearance(emb: &Tensor, labels: &[usize], cfg: &TripletConfig) -> f64 {
    let n = labels.len();
    let mut clearance = f64::INFINITY;
    for a in 0..n {
        let mut pos: Vec<f64> = (0..n).filter(|&j| j != a && labels[j] == labels[a]).map(|j| dist(emb, a, j)).collect();
        let mut neg: Vec<f64> = (0..n).filter(|&j| labels[j] != labels[a]).map(|j| dist(emb, a, j)).collect();
        pos.sort_by(|x, y| y.total_cmp(x));
        neg.sort_by(|x, y| x.total_cmp(y));
        if pos.len() > 1 {
            clearance = clearance.min(pos[0] - pos[1]);
        }
        if neg.len() > 1 {
            clearance = clearance.min(neg[1] - neg[0]);
        }
        clearance = clearance.min(pos[0]).min(neg[0]);
        if cfg.variant == TripletVariant::HardMargin {
            clearance = clearance.min((pos[0] - neg[0] + cfg.margin).abs());
        }
    }
    clearance
}

/// Smallest gap between the top two entries of every pooling window with a positive maximum.
fn max_clearance(map: &Tensor, window: usize) -> f64 {
    map.data()
        .chunks(window)
        .filter_map(|c| {
            let mut v = c.to_vec();
            v.sort_by(|x, y| y.total_cmp(x));
            (v[0] > 0.0 && v.len() > 1).then(|| v[0] - v[1])
        })
        .fold(f64::INFINITY, f64::min)
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        stage_channels: vec![3, 4],
        stage_strides: vec![2, 2],
        remove_last_downsample: true,
        input_size: 6,
    }
}

/// Smallest |pre-activation| in a backbone pass, plus the output map.
fn backbone_clearance(cfg: &BackboneConfig, params: &cgd::checkpoint::ParamStore, x: &Tensor) -> (f64, Tensor) {
    let mut g = Graph::new();
    let mut h = g.constant(x.clone());
    let mut clearance = f64::INFINITY;
    for (i, &s) in cfg.effective_strides().iter().enumerate() {
        let w = g.constant(params.get(&format!("backbone.stage{i}.weight")).unwrap().clone());
        let b = g.constant(params.get(&format!("backbone.stage{i}.bias")).unwrap().clone());
        let y = g.conv2d(h, w, s, 1).unwrap();
        let y = g.add_bias(y, b).unwrap();
        clearance = g.value(y).data().iter().fold(clearance, |m, v| m.min(v.abs()));
        h = g.relu(y);
    }
    (clearance, g.value(h).clone())
}

fn fmap(g: &Graph, v: Var) -> FeatureMap {
    let s = g.shape(v);
    FeatureMap {
        var: v,
        channels: s[1],
        height: s[2],
        width: s[3],
    }
}

pub fn conv2d() -> OpReport {
    run_op("conv2d", 101, INSTANCES, |rng| {
        let (n, c, o) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3));
        let k = if rng.random_bool(0.5) { 3 } else { 1 };
        let (h, w) = (dims(rng, 3, 6), dims(rng, 3, 6));
        let stride = dims(rng, 1, 2);
        let pad = dims(rng, 0, 1);
        let x = uniform(rng, &[n, c, h, w], -1.0, 1.0);
        let wt = uniform(rng, &[o, c, k, k], -1.0, 1.0);
        (vec![x, wt], move |g: &mut Graph, v: &[Var]| g.conv2d(v[0], v[1], stride, pad))
    })
}

pub fn matmul() -> OpReport {
    run_op("matmul", 102, INSTANCES, |rng| {
        let (m, k, n) = (dims(rng, 1, 5), dims(rng, 1, 5), dims(rng, 1, 5));
        let a = uniform(rng, &[m, k], -1.0, 1.0);
        let b = uniform(rng, &[k, n], -1.0, 1.0);
        (vec![a, b], |g: &mut Graph, v: &[Var]| g.matmul(v[0], v[1]))
    })
}

pub fn transpose() -> OpReport {
    run_op("transpose", 103, INSTANCES, |rng| {
        let shape = shape2(rng, (1, 5), (1, 5));
        let a = uniform(rng, &shape, -1.0, 1.0);
        (vec![a], |g: &mut Graph, v: &[Var]| g.transpose(v[0]))
    })
}

pub fn elementwise() -> OpReport {
    run_op("add/sub/mul/div", 104, INSTANCES, |rng| {
        let shape = [dims(rng, 1, 4), dims(rng, 1, 4)];
        let a = uniform(rng, &shape, -1.0, 1.0);
        let b = away_from_zero(rng, &shape, 0.5);
        let which = rng.random_range(0..4);
        (vec![a, b], move |g: &mut Graph, v: &[Var]| match which {
            0 => g.add(v[0], v[1]),
            1 => g.sub(v[0], v[1]),
            2 => g.mul(v[0], v[1]),
            _ => g.div(v[0], v[1]),
        })
    })
}

pub fn scalar_ops() -> OpReport {
    run_op("add_scalar/scale", 105, INSTANCES, |rng| {
        let shape = shape2(rng, (1, 4), (1, 4));
        let a = uniform(rng, &shape, -1.0, 1.0);
        let c: f64 = rng.random_range(-3.0..3.0);
        (vec![a], move |g: &mut Graph, v: &[Var]| {
            let s = g.add_scalar(v[0], c);
            Ok(g.scale(s, c))
        })
    })
}

pub fn pow() -> OpReport {
    run_op("pow", 106, INSTANCES, |rng| {
        let shape = shape2(rng, (1, 4), (1, 4));
        let a = uniform(rng, &shape, 0.2, 2.0);
        let e: f64 = rng.random_range(-2.0..3.0);
        (vec![a], move |g: &mut Graph, v: &[Var]| g.pow(v[0], e))
    })
}

pub fn exp_log() -> OpReport {
    run_op("exp/log", 107, INSTANCES, |rng| {
        let shape = shape2(rng, (1, 4), (1, 4));
        let a = uniform(rng, &shape, 0.2, 3.0);
        let use_log = rng.random_bool(0.5);
        (vec![a], move |g: &mut Graph, v: &[Var]| Ok(if use_log { g.log(v[0]) } else { g.exp(v[0]) }))
    })
}

pub fn relu_clamp() -> OpReport {
    run_op("relu/clamp_min", 108, INSTANCES, |rng| {
        let shape = shape2(rng, (1, 4), (1, 4));
        let a = away_from_zero(rng, &shape, 0.05);
        let clamp = rng.random_bool(0.5);
        (vec![a], move |g: &mut Graph, v: &[Var]| Ok(if clamp { g.clamp_min(v[0], 0.0) } else { g.relu(v[0]) }))
    })
}

pub fn reductions() -> OpReport {
    run_op("max/sum/mean reduce", 109, INSTANCES, |rng| {
        let shape = [dims(rng, 1, 3), dims(rng, 1, 4), dims(rng, 1, 3)];
        let a = distinct_positive(rng, &shape);
        let axis = rng.random_range(0..3);
        let which = rng.random_range(0..5);
        (vec![a], move |g: &mut Graph, v: &[Var]| match which {
            0 => g.max_reduce(v[0], axis),
            1 => g.sum_reduce(v[0], axis),
            2 => g.mean_reduce(v[0], axis),
            3 => Ok(g.sum_all(v[0])),
            _ => Ok(g.mean_all(v[0])),
        })
    })
}

pub fn shape_ops() -> OpReport {
    run_op("concat/narrow/reshape", 110, INSTANCES, |rng| {
        let (r, c1, c2) = (dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4));
        let a = uniform(rng, &[r, c1], -1.0, 1.0);
        let b = uniform(rng, &[r, c2], -1.0, 1.0);
        let start = rng.random_range(0..c1 + c2);
        let len = rng.random_range(1..=c1 + c2 - start);
        (vec![a, b], move |g: &mut Graph, v: &[Var]| {
            let cat = g.concat(&[v[0], v[1]], 1)?;
            let nar = g.narrow(cat, 1, start, len)?;
            g.reshape(nar, &[len, r])
        })
    })
}

pub fn l2_normalize() -> OpReport {
    run_op("l2_normalize", 111, INSTANCES, |rng| {
        let shape = shape2(rng, (1, 4), (1, 6));
        let a = uniform(rng, &shape, -1.0, 1.0);
        (vec![a], |g: &mut Graph, v: &[Var]| g.l2_normalize(v[0], 1, NORM_EPS))
    })
}

pub fn add_bias() -> OpReport {
    run_op("add_bias", 112, INSTANCES, |rng| {
        let c = dims(rng, 1, 4);
        let shape = if rng.random_bool(0.5) {
            vec![dims(rng, 1, 3), c]
        } else {
            vec![dims(rng, 1, 3), c, dims(rng, 1, 3), dims(rng, 1, 3)]
        };
        let a = uniform(rng, &shape, -1.0, 1.0);
        let b = uniform(rng, &[c], -1.0, 1.0);
        (vec![a, b], |g: &mut Graph, v: &[Var]| g.add_bias(v[0], v[1]))
    })
}

pub fn gather_distance() -> OpReport {
    run_op("gather_rows/row_distance", 113, INSTANCES, |rng| {
        let (n, d) = (dims(rng, 2, 6), dims(rng, 1, 5));
        let a = uniform(rng, &[n, d], -1.0, 1.0);
        let idx: Vec<usize> = (0..n).map(|i| (i + rng.random_range(1..n)) % n).collect();
        (vec![a], move |g: &mut Graph, v: &[Var]| {
            let b = g.gather_rows(v[0], &idx)?;
            g.row_distance(v[0], b)
        })
    })
}

pub fn log_softmax() -> OpReport {
    run_op("log_softmax", 114, INSTANCES, |rng| {
        let shape = shape2(rng, (1, 4), (2, 6));
        let a = uniform(rng, &shape, -3.0, 3.0);
        (vec![a], |g: &mut Graph, v: &[Var]| g.log_softmax(v[0]))
    })
}

fn pooling(name: &str, seed: u64, kind: DescriptorKind) -> OpReport {
    run_op(name, seed, INSTANCES, move |rng| {
        let shape = [dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3)];
        let x = distinct_positive(rng, &shape);
        (vec![x], move |g: &mut Graph, v: &[Var]| {
            let fm = fmap(g, v[0]);
            generalized_pool(g, &fm, kind)
        })
    })
}

pub fn pool_spoc() -> OpReport {
    pooling("pool SPoC", 115, DescriptorKind::Spoc)
}

pub fn pool_mac() -> OpReport {
    pooling("pool MAC", 116, DescriptorKind::Mac)
}

pub fn pool_gem1() -> OpReport {
    pooling("pool GeM p=1", 117, DescriptorKind::Gem(1.0))
}

pub fn pool_gem3() -> OpReport {
    pooling("pool GeM p=3", 118, DescriptorKind::Gem(3.0))
}

pub fn project() -> OpReport {
    run_op("project_branch", 119, INSTANCES, |rng| {
        let (n, c, k) = (dims(rng, 1, 4), dims(rng, 2, 6), dims(rng, 1, 4));
        let f = uniform(rng, &[n, c], 0.0, 1.0);
        let w = uniform(rng, &[k, c], -1.0, 1.0);
        (vec![f, w], |g: &mut Graph, v: &[Var]| project_branch(g, v[0], v[1]))
    })
}

pub fn combine_branches() -> OpReport {
    run_op("combine concat/sum", 120, INSTANCES, |rng| {
        let (n, b) = (dims(rng, 1, 3), dims(rng, 1, 3));
        let sum = rng.random_bool(0.5);
        let d = dims(rng, 1, 4);
        let parts: Vec<Tensor> = (0..b)
            .map(|_| {
                let width = if sum { d } else { dims(rng, 1, 4) };
                uniform(rng, &[n, width], -1.0, 1.0)
            })
            .collect();
        let method = if sum { Combination::Sum } else { Combination::Concat };
        (parts, move |g: &mut Graph, v: &[Var]| Ok(combine(g, v, method)?.var))
    })
}

fn triplet(name: &str, seed: u64, cfg: TripletConfig) -> OpReport {
    run_op(name, seed, INSTANCES, move |rng| loop {
        let (p, k, d) = (dims(rng, 2, 4), dims(rng, 2, 3), dims(rng, 2, 5));
        let labels = pk_labels(rng, p, k);
        let emb = uniform(rng, &[p * k, d], -0.5, 0.5);
        if triplet_clearance(&emb, &labels, &cfg) > KINK_CLEARANCE {
            break (vec![emb], move |g: &mut Graph, v: &[Var]| batch_hard_triplet(g, v[0], &labels, &cfg));
        }
    })
}

pub fn triplet_hard() -> OpReport {
    triplet(
        "triplet hard margin",
        121,
        TripletConfig {
            margin: 0.1,
            variant: TripletVariant::HardMargin,
        },
    )
}

pub fn triplet_soft() -> OpReport {
    triplet(
        "triplet soft margin",
        122,
        TripletConfig {
            margin: 0.0,
            variant: TripletVariant::SoftMargin,
        },
    )
}

pub fn aux_softmax() -> OpReport {
    run_op("aux softmax loss", 123, INSTANCES, |rng| {
        let (n, c, m) = (dims(rng, 1, 6), dims(rng, 1, 5), dims(rng, 2, 5));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
        let cfg = SoftmaxLossConfig {
            temperature: rng.random_range(0.3..2.0),
            label_smoothing: rng.random_range(0.0..0.3),
            num_classes: m,
        };
        let f = uniform(rng, &[n, c], 0.0, 1.0);
        let w = uniform(rng, &[m, c], -1.0, 1.0);
        let b = uniform(rng, &[m], -0.5, 0.5);
        (vec![f, w, b], move |g: &mut Graph, v: &[Var]| aux_softmax_loss(g, v[0], v[1], v[2], &labels, &cfg))
    })
}

/// conv -> bias -> ReLU, differentiated with respect to input, weight and bias.
pub fn conv_block() -> OpReport {
    run_op("conv block", 124, INSTANCES, |rng| loop {
        let (c, o) = (dims(rng, 1, 3), dims(rng, 1, 3));
        let x = uniform(rng, &[2, c, 5, 5], -1.0, 1.0);
        let w = uniform(rng, &[o, c, 3, 3], -1.0, 1.0);
        let b = uniform(rng, &[o], -0.5, 0.5);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, 2, 1).unwrap();
        let y = g.add_bias(y, bv).unwrap();
        if g.value(y).data().iter().all(|v| v.abs() > KINK_CLEARANCE) {
            break (vec![x, w, b], |g: &mut Graph, v: &[Var]| {
                let y = g.conv2d(v[0], v[1], 2, 1)?;
                let y = g.add_bias(y, v[2])?;
                Ok(g.relu(y))
            });
        }
    })
}

/// Whole backbone, differentiated with respect to its input.
pub fn backbone_input() -> OpReport {
    let cfg = tiny_backbone();
    run_op("backbone", 125, INSTANCES, move |rng| loop {
        let params = backbone::build_backbone(&cfg, rng.random()).unwrap();
        let x = uniform(rng, &[2, 3, 6, 6], 0.0, 1.0);
        if backbone_clearance(&cfg, &params, &x).0 > KINK_CLEARANCE {
            let cfg = cfg.clone();
            break (vec![x], move |g: &mut Graph, v: &[Var]| {
                let mut scope = ParamScope::frozen(&params);
                Ok(backbone::forward(&cfg, &mut scope, g, v[0])?.var)
            });
        }
    })
}

/// Backbone, GM descriptor head, triplet and auxiliary softmax summed, with
/// respect to the image batch.
pub fn joint_composite() -> OpReport {
    let triplet_cfg = TripletConfig::default();
    run_op("joint loss composite", 126, INSTANCES, move |rng| loop {
        let config = ModelConfig {
            backbone: tiny_backbone(),
            descriptor: DescriptorConfig::parse("GM", 6, 3.0).unwrap(),
            architecture: Architecture::Cgd,
            combination: Combination::Concat,
            num_classes: 2,
        };
        let model = CgdModel::new(config, rng.random()).unwrap();
        let labels = vec![0, 1, 0, 1];
        let x = uniform(rng, &[4, 3, 6, 6], 0.0, 1.0);
        let (relu_gap, map) = backbone_clearance(&model.config.backbone, &model.params, &x);
        let window = map.shape()[2] * map.shape()[3];
        let emb = model.embed(&x).unwrap();
        let clear = relu_gap
            .min(max_clearance(&map, window))
            .min(triplet_clearance(&emb, &labels, &triplet_cfg));
        if clear > KINK_CLEARANCE {
            let sm = SoftmaxLossConfig {
                temperature: 0.5,
                label_smoothing: 0.1,
                num_classes: 2,
            };
            break (vec![x], move |g: &mut Graph, v: &[Var]| {
                let mut scope = ParamScope::frozen(&model.params);
                let out = model.forward(g, &mut scope, v[0])?;
                let rank = batch_hard_triplet(g, out.embedding.var, &labels, &triplet_cfg)?;
                let w = scope.get(g, CLASSIFIER_WEIGHT)?;
                let b = scope.get(g, CLASSIFIER_BIAS)?;
                let cls = aux_softmax_loss(g, out.pooled[0], w, b, &labels, &sm)?;
                g.add(rank, cls)
            });
        }
    })
}

/// Every check, in a fixed order.
pub fn all() -> Vec<fn() -> OpReport> {
    vec![
        conv2d,
        matmul,
        transpose,
        elementwise,
        scalar_ops,
        pow,
        exp_log,
        relu_clamp,
        reductions,
        shape_ops,
        l2_normalize,
        add_bias,
        gather_distance,
        log_softmax,
        pool_spoc,
        pool_mac,
        pool_gem1,
        pool_gem3,
        project,
        combine_branches,
        triplet_hard,
        triplet_soft,
        aux_softmax,
        conv_block,
        backbone_input,
        joint_composite,
    ]
}
