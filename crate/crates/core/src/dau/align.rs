//! Output maximisation of a bank over a fixed sample set, and the linear
//! algebra used to inspect what the fitted units encode.

use super::{DauBank, WeightMode};
use crate::error::{contract_err, dim_err, Result};
use crate::tensor::{Graph, Real, Tensor};
use nalgebra::DMatrix;

/// Gradient ascent on the mean unit output over `samples`.
///
/// Every step evaluates all samples, averages the outputs of all units and
/// moves every parameter by `lr` times its gradient.
pub fn align_fit(bank: &DauBank, samples: &[Vec<Real>], steps: usize, lr: Real) -> Result<DauBank> {
    Ok(align_fit_with_history(bank, samples, steps, lr)?.0)
}

/// [`align_fit`], also returning the mean output before each step.
pub fn align_fit_with_history(
    bank: &DauBank,
    samples: &[Vec<Real>],
    steps: usize,
    lr: Real,
) -> Result<(DauBank, Vec<Real>)> {
    if samples.is_empty() {
        return contract_err("align_fit needs at least one sample");
    }
    let d = bank.dim();
    if let Some(bad) = samples.iter().find(|s| s.len() != d) {
        return dim_err(format!("sample of length {} for a bank over {d} dimensions", bad.len()));
    }
    let n = samples.len();
    let mut cols = vec![0.0; d * n];
    for (t, s) in samples.iter().enumerate() {
        for (i, &v) in s.iter().enumerate() {
            cols[i * n + t] = v;
        }
    }
    let x = Tensor::new(&[d, n], cols)?;
    let mut fitted = bank.clone();
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let vars = fitted.bind(&mut g, true);
        let out = fitted.record(&mut g, xv, vars, WeightMode::Dynamic)?;
        let objective = g.mean(out);
        history.push(g.value(objective).item());
        let grads = g.backward(objective)?;
        for p in fitted.params_mut() {
            p.zero_grad();
        }
        fitted.accumulate(&grads, vars)?;
        for p in fitted.params_mut() {
            let grad = p.grad.clone();
            for (v, gv) in p.value.data_mut().iter_mut().zip(grad.data()) {
                *v += lr * gv;
            }
            p.zero_grad();
        }
    }
    Ok((fitted, history))
}

/// Orthonormal basis (as columns, `d x r`) of the right singular vectors of
/// `A B` for unit `unit`, ordered by decreasing singular value.
pub fn singular_subspace(bank: &DauBank, unit: usize) -> Result<(DMatrix<Real>, Vec<Real>)> {
    let u = bank.unit(unit)?;
    let (d, r) = (u.dim(), u.rank());
    let a = DMatrix::from_row_slice(d, r, u.a().data());
    let bt = DMatrix::from_row_slice(r, d, u.b().data()).transpose();
    // B^T = Q R, so A B = (A R^T) Q^T and the right singular vectors of A B
    // are Q times those of A R^T.
    let qr = bt.qr();
    let (q, rmat) = (qr.q(), qr.r());
    let small = &a * rmat.transpose();
    let svd = small.svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let mut basis = DMatrix::zeros(d, order.len());
    for (col, &i) in order.iter().enumerate() {
        let v = vt.row(i).transpose();
        basis.set_column(col, &(&q * v));
    }
    let values = order.iter().map(|&i| svd.singular_values[i]).collect();
    Ok((basis, values))
}

/// Cosine between `x` and its orthogonal projection onto the span of the
/// orthonormal columns of `basis`.
pub fn subspace_cosine(x: &[Real], basis: &DMatrix<Real>) -> Real {
    let xv = nalgebra::DVector::from_column_slice(x);
    let coeffs = basis.transpose() * &xv;
    let xn = xv.norm();
    if xn == 0.0 {
        return 0.0;
    }
    coeffs.norm() / xn
}
