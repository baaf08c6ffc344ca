#![allow(dead_code)]

use coda_core::tensor::{Graph, Real, Tensor, Var};

/// Worst relative error between reverse-mode gradients and central
/// differences, over all inputs of a scalar function built on a fresh graph.
///
/// The relative error of one input is `||g_auto - g_fd|| / max(||g_auto||, ||g_fd||, floor)`.
pub fn gradient_error(inputs: &[Tensor], h: Real, build: impl Fn(&mut Graph, &[Var]) -> Var) -> Real {
    let eval = |vals: &[Tensor]| -> Real {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).expect("backward");
    let mut worst: Real = 0.0;
    for (idx, input) in inputs.iter().enumerate() {
        let auto = grads.get(vars[idx]).expect("gradient populated").clone();
        let mut fd = vec![0.0; input.len()];
        for j in 0..input.len() {
            let mut plus: Vec<Tensor> = inputs.to_vec();
            plus[idx].data_mut()[j] += h;
            let mut minus: Vec<Tensor> = inputs.to_vec();
            minus[idx].data_mut()[j] -= h;
            fd[j] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let diff: Real = auto
            .data()
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<Real>()
            .sqrt();
        let scale = auto.norm().max(fd.iter().map(|v| v * v).sum::<Real>().sqrt()).max(1e-8);
        worst = worst.max(diff / scale);
    }
    worst
}

pub fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

/// A fixed random projection to turn any tensor output into a scalar, so
/// every output entry takes part in the check.
pub fn project_to_scalar(g: &mut Graph, v: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let w = Tensor::randn(g.value(v).shape(), &mut r);
    let wv = g.constant(w);
    let prod = g.mul(v, wv).expect("same shape");
    g.sum(prod)
}
