#![allow(dead_code)]

pub mod criteria;
pub mod gradcheck;
pub mod gradsuite;
pub mod oracle;

use cgd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Rows of a `rows x cols` tensor, each scaled to unit length.
pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = uniform(rng, &[rows, cols], -1.0, 1.0);
    for r in t.data_mut().chunks_mut(cols) {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// `k` labels per class for `p` classes, in a shuffled order.
pub fn pk_labels(rng: &mut ChaCha8Rng, p: usize, k: usize) -> Vec<usize> {
    let mut l: Vec<usize> = (0..p * k).map(|i| i / k).collect();
    for i in (1..l.len()).rev() {
        l.swap(i, rng.random_range(0..=i));
    }
    l
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
