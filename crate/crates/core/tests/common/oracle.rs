//! Slow, obviously-correct reference implementations.

use cgd::Tensor;

/// Direct convolution over all seven indices.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let yy = (y * stride + i) as isize - pad as isize;
                                let xx = (xo * stride + j) as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * c + ic) * h + yy as usize) * wd + xx as usize];
                                let wv = w.data()[((oc * c + ic) * kh + i) * kw + j];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out).unwrap()
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    Tensor::new(&[m, n], out).unwrap()
}

/// Per-channel pooled values of one `C x H x W` map.
pub fn spoc(map: &[f64], channels: usize) -> Vec<f64> {
    map.chunks(map.len() / channels)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

pub fn mac(map: &[f64], channels: usize) -> Vec<f64> {
    map.chunks(map.len() / channels)
        .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

pub fn gem(map: &[f64], channels: usize, p: f64) -> Vec<f64> {
    map.chunks(map.len() / channels)
        .map(|c| (c.iter().map(|v| v.max(1e-6).powf(p)).sum::<f64>() / c.len() as f64).powf(1.0 / p))
        .collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Batch-hard triplet loss: every (anchor, positive, negative) distance
/// computed from scratch, hardest pair picked by a full scan.
pub fn batch_hard_triplet(emb: &Tensor, labels: &[usize], margin: f64, soft: bool) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for a in 0..n {
        let hardest_pos = (0..n)
            .filter(|&j| j != a && labels[j] == labels[a])
            .map(|j| euclid(emb.row(a), emb.row(j)))
            .fold(f64::NEG_INFINITY, f64::max);
        let hardest_neg = (0..n)
            .filter(|&j| labels[j] != labels[a])
            .map(|j| euclid(emb.row(a), emb.row(j)))
            .fold(f64::INFINITY, f64::min);
        let gap = hardest_pos - hardest_neg;
        total += if soft { (1.0 + gap.exp()).ln() } else { (gap + margin).max(0.0) };
    }
    total / n as f64
}

/// Label-smoothed, temperature-scaled softmax cross-entropy from the textbook formula.
pub fn softmax_loss(
    pooled: &Tensor,
    weight: &Tensor,
    bias: &[f64],
    labels: &[usize],
    temperature: f64,
    eps: f64,
) -> f64 {
    let m = weight.shape()[0];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let logits: Vec<f64> = (0..m)
            .map(|c| {
                let z: f64 = pooled.row(i).iter().zip(weight.row(c)).map(|(a, b)| a * b).sum();
                (z + bias[c]) / temperature
            })
            .collect();
        let denom: f64 = logits.iter().map(|z| z.exp()).sum();
        for (c, z) in logits.iter().enumerate() {
            let q = if c == y { 1.0 - eps } else { eps / (m - 1) as f64 };
            total -= q * (z.exp() / denom).ln();
        }
    }
    total / labels.len() as f64
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Gallery indices for one query, built by repeatedly taking the best
/// remaining item (highest cosine, then lowest id).
pub fn ranking(query: &[f32], gallery: &[Vec<f32>], ids: &[u64], skip: Option<usize>, k: usize) -> Vec<usize> {
    let sims: Vec<f64> = gallery.iter().map(|g| cosine(query, g)).collect();
    let mut taken = vec![false; gallery.len()];
    if let Some(s) = skip {
        taken[s] = true;
    }
    let mut order = Vec::new();
    while order.len() < k {
        let mut best: Option<usize> = None;
        for j in 0..gallery.len() {
            if taken[j] {
                continue;
            }
            best = match best {
                None => Some(j),
                Some(b) if sims[j] > sims[b] || (sims[j] == sims[b] && ids[j] < ids[b]) => Some(j),
                keep => keep,
            };
        }
        match best {
            Some(b) => {
                taken[b] = true;
                order.push(b);
            }
            None => break,
        }
    }
    order
}

/// Recall@K on a single set where each item queries all the others.
pub fn recall_single_set(rows: &[Vec<f32>], labels: &[u32], k: usize) -> f64 {
    let ids: Vec<u64> = (0..rows.len() as u64).collect();
    let mut hits = 0;
    let mut evaluated = 0;
    for q in 0..rows.len() {
        if !(0..rows.len()).any(|j| j != q && labels[j] == labels[q]) {
            continue;
        }
        evaluated += 1;
        let top = ranking(&rows[q], rows, &ids, Some(q), k);
        if top.iter().any(|&j| labels[j] == labels[q]) {
            hits += 1;
        }
    }
    hits as f64 / evaluated as f64
}
