//! Central finite-difference gradient checking.

use cgd::{Graph, Result, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-7;

/// Largest error over all input elements: 0 when the absolute difference is
/// below `ABS_FLOOR`, the relative difference otherwise.
pub fn max_error<F>(inputs: &[Tensor], rng: &mut ChaCha8Rng, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars).expect("forward");
    let weights = {
        let shape = g.shape(out).to_vec();
        let n: usize = shape.iter().product::<usize>().max(1);
        Tensor::new(&shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("projection")
    };
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).expect("projection shape");
    let loss = g.sum_all(prod);
    g.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).expect("forward");
        g.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] = orig - STEP;
            let down = eval(&xs);
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[i].data()[j];
            let diff = (a - numeric).abs();
            if diff > ABS_FLOOR {
                worst = worst.max(diff / a.abs().max(numeric.abs()));
            }
        }
    }
    worst
}

/// Result of checking one operation over many random instances.
#[derive(Debug)]
pub struct OpReport {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.instances >= 100 && self.max_error < REL_TOL
    }
}

/// Runs `instances` random cases of one op; `case` draws inputs and returns the op.
pub fn run_op<C, F>(name: &str, seed: u64, instances: usize, mut case: C) -> OpReport
where
    C: FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, F),
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = super::rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (inputs, f) = case(&mut rng);
        worst = worst.max(max_error(&inputs, &mut rng, f));
    }
    OpReport {
        name: name.to_string(),
        instances,
        max_error: worst,
    }
}
