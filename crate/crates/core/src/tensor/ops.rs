//! Differentiable operations recorded on a [`Graph`].

use super::linalg::gemm;
use super::{Graph, Real, Tensor, Var};
use crate::error::{dim_err, Result};

/// How an operand of a binary op lines up with the output.
///
/// The smaller operand must have the shape of a leading prefix of the larger
/// one, optionally followed by singleton axes; each of its values is then
/// repeated over a contiguous block of `block` output values.
fn broadcast_block(big: &[usize], small: &[usize]) -> Option<usize> {
    let small_n: usize = small.iter().product();
    let big_n: usize = big.iter().product();
    if small_n == 1 {
        return Some(big_n);
    }
    let trimmed = {
        let mut end = small.len();
        while end > 0 && small[end - 1] == 1 {
            end -= 1;
        }
        &small[..end]
    };
    if trimmed.len() > big.len() || big[..trimmed.len()] != *trimmed {
        return None;
    }
    Some(big_n / small_n)
}

fn sum_blocks(g: &[Real], block: usize) -> Vec<Real> {
    g.chunks(block).map(|c| c.iter().sum()).collect()
}

type Elem2 = fn(Real, Real, Real) -> Real;

impl Graph {
    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        eps_forward: fn(Real, Real, Real) -> Real,
        da: Elem2,
        db: Elem2,
    ) -> Result<Var> {
        let eps = self.eps();
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let (out_shape, block_a, block_b) = if sa == sb {
            (sa.clone(), 1, 1)
        } else if self.value(a).len() >= self.value(b).len() {
            match broadcast_block(&sa, &sb) {
                Some(k) => (sa.clone(), 1, k),
                None => return dim_err(format!("{name}: cannot broadcast {sb:?} onto {sa:?}")),
            }
        } else {
            match broadcast_block(&sb, &sa) {
                Some(k) => (sb.clone(), k, 1),
                None => return dim_err(format!("{name}: cannot broadcast {sa:?} onto {sb:?}")),
            }
        };
        let n: usize = out_shape.iter().product();
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<Real> = (0..n)
            .map(|i| eps_forward(va[i / block_a], vb[i / block_b], eps))
            .collect();
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.apply(&[a, b], out, move |g: &Tensor, inp: &[&Tensor], _o: &Tensor| {
            let (va, vb) = (inp[0].data(), inp[1].data());
            let gd = g.data();
            let ga: Vec<Real> = (0..gd.len())
                .map(|i| gd[i] * da(va[i / block_a], vb[i / block_b], eps))
                .collect();
            let gb: Vec<Real> = (0..gd.len())
                .map(|i| gd[i] * db(va[i / block_a], vb[i / block_b], eps))
                .collect();
            let ga = if block_a > 1 { sum_blocks(&ga, block_a) } else { ga };
            let gb = if block_b > 1 { sum_blocks(&gb, block_b) } else { gb };
            vec![
                Some(Tensor::new(inp[0].shape(), ga).expect("grad shape")),
                Some(Tensor::new(inp[1].shape(), gb).expect("grad shape")),
            ]
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y, _| x + y, |_, _, _| 1.0, |_, _, _| 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y, _| x - y, |_, _, _| 1.0, |_, _, _| -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y, _| x * y, |_, y, _| y, |x, _, _| x)
    }

    /// `a / b` with `|b|` clamped to at least the graph epsilon (sign kept).
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        fn guard(y: Real, eps: Real) -> Real {
            if y.abs() >= eps {
                y
            } else if y < 0.0 {
                -eps
            } else {
                eps
            }
        }
        self.binary(
            a,
            b,
            "div",
            |x, y, e| x / guard(y, e),
            |_, y, e| 1.0 / guard(y, e),
            |x, y, e| {
                if y.abs() >= e {
                    -x / (y * y)
                } else {
                    0.0
                }
            },
        )
    }

    fn unary(&mut self, a: Var, f: fn(Real, Real) -> Real, df: Elem2) -> Var {
        let eps = self.eps();
        let out = self.value(a).map(|x| f(x, eps));
        self.apply(&[a], out, move |g: &Tensor, inp: &[&Tensor], o: &Tensor| {
            let data = g
                .data()
                .iter()
                .zip(inp[0].data())
                .zip(o.data())
                .map(|((&g, &x), &y)| g * df(x, y, eps))
                .collect();
            vec![Some(Tensor::new(inp[0].shape(), data).expect("grad shape"))]
        })
    }

    pub fn scale(&mut self, a: Var, s: Real) -> Var {
        let out = self.value(a).scaled(s);
        self.apply(&[a], out, move |g: &Tensor, _: &[&Tensor], _: &Tensor| {
            vec![Some(g.scaled(s))]
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x, _| x.max(0.0), |x, _, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x, _| sigmoid(x), |_, y, _| y * (1.0 - y))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x, _| x * x, |x, _, _| 2.0 * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x, _| x.max(0.0).sqrt(), |_, y, e| 0.5 / y.max(e))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.apply(&[a], out, |g: &Tensor, inp: &[&Tensor], _: &Tensor| {
            vec![Some(Tensor::full(inp[0].shape(), g.item()))]
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as Real;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums over every axis after the first `keep`.
    pub fn sum_trailing(&mut self, a: Var, keep: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if keep == 0 || keep > shape.len() {
            return dim_err(format!("sum_trailing keep={keep} on shape {shape:?}"));
        }
        let block: usize = shape[keep..].iter().product();
        let out = Tensor::new(&shape[..keep], sum_blocks(self.value(a).data(), block))?;
        Ok(self.apply(&[a], out, move |g: &Tensor, inp: &[&Tensor], _: &Tensor| {
            let data = g
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat(v).take(block))
                .collect();
            vec![Some(Tensor::new(inp[0].shape(), data).expect("grad shape"))]
        }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.apply(&[a], out, |g: &Tensor, inp: &[&Tensor], _: &Tensor| {
            vec![Some(g.reshape(inp[0].shape()).expect("grad shape"))]
        }))
    }

    /// Matrix product of rank-2 operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.apply(&[a, b], out, |g: &Tensor, inp: &[&Tensor], _: &Tensor| {
            let (m, k) = inp[0].dims2().expect("rank 2");
            let n = inp[1].dims2().expect("rank 2").1;
            let mut ga = vec![0.0; m * k];
            gemm(m, n, k, g.data(), false, inp[1].data(), true, &mut ga, 0.0);
            let mut gb = vec![0.0; k * n];
            gemm(k, m, n, inp[0].data(), true, g.data(), false, &mut gb, 0.0);
            vec![
                Some(Tensor::new(inp[0].shape(), ga).expect("grad shape")),
                Some(Tensor::new(inp[1].shape(), gb).expect("grad shape")),
            ]
        }))
    }

    /// Euclidean norm along `axis`; the axis is removed from the shape.
    pub fn l2norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return dim_err(format!("l2norm axis {axis} on shape {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let s: Real = (0..len)
                    .map(|l| x[(o * len + l) * inner + i].powi(2))
                    .sum();
                out[o * inner + i] = s.sqrt();
            }
        }
        let mut out_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let eps = self.eps();
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.apply(&[a], out, move |g: &Tensor, inp: &[&Tensor], o: &Tensor| {
            let x = inp[0].data();
            let mut gx = vec![0.0; x.len()];
            for oi in 0..outer {
                for i in 0..inner {
                    let k = oi * inner + i;
                    let scale = g.data()[k] / o.data()[k].max(eps);
                    for l in 0..len {
                        let idx = (oi * len + l) * inner + i;
                        gx[idx] = scale * x[idx];
                    }
                }
            }
            vec![Some(Tensor::new(inp[0].shape(), gx).expect("grad shape"))]
        }))
    }

    /// Frobenius norm of the whole tensor, as a scalar.
    pub fn frobenius_norm(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).norm());
        let eps = self.eps();
        self.apply(&[a], out, move |g: &Tensor, inp: &[&Tensor], o: &Tensor| {
            vec![Some(inp[0].scaled(g.item() / o.item().max(eps)))]
        })
    }

    /// Sum over entries of binary cross-entropy between `sigmoid(logits)` and
    /// `targets`, evaluated in the numerically stable logit form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let l = self.value(logits);
        if l.shape() != targets.shape() {
            return dim_err(format!(
                "bce: logits {:?} vs targets {:?}",
                l.shape(),
                targets.shape()
            ));
        }
        let loss: Real = l
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum();
        let targets = targets.clone();
        Ok(self.apply(&[logits], Tensor::scalar(loss), move |g: &Tensor, inp: &[&Tensor], _: &Tensor| {
            let gz = inp[0]
                .data()
                .iter()
                .zip(targets.data())
                .map(|(&z, &y)| g.item() * (sigmoid(z) - y))
                .collect();
            vec![Some(Tensor::new(inp[0].shape(), gz).expect("grad shape"))]
        }))
    }

    /// `[k, n * h * w]` column layout (column index `(img, y, x)`) to
    /// `[n, k, h, w]` feature maps.
    pub fn columns_to_maps(&mut self, a: Var, n: usize, h: usize, w: usize) -> Result<Var> {
        let (k, cols) = self.value(a).dims2()?;
        if cols != n * h * w {
            return dim_err(format!("{cols} columns cannot form {n} maps of {h}x{w}"));
        }
        let out = Tensor::new(&[n, k, h, w], permute_cols_to_maps(self.value(a).data(), k, n, h * w))?;
        Ok(self.apply(&[a], out, move |g: &Tensor, inp: &[&Tensor], _: &Tensor| {
            let data = permute_maps_to_cols(g.data(), k, n, h * w);
            vec![Some(Tensor::new(inp[0].shape(), data).expect("grad shape"))]
        }))
    }

    /// Inverse of [`Graph::columns_to_maps`].
    pub fn maps_to_columns(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let [n, k, h, w] = shape[..] else {
            return dim_err(format!("expected [n, c, h, w], got {shape:?}"));
        };
        let out = Tensor::new(&[k, n * h * w], permute_maps_to_cols(self.value(a).data(), k, n, h * w))?;
        Ok(self.apply(&[a], out, move |g: &Tensor, inp: &[&Tensor], _: &Tensor| {
            let data = permute_cols_to_maps(g.data(), k, n, h * w);
            vec![Some(Tensor::new(inp[0].shape(), data).expect("grad shape"))]
        }))
    }
}

pub(crate) fn permute_cols_to_maps(x: &[Real], k: usize, n: usize, p: usize) -> Vec<Real> {
    let mut out = vec![0.0; x.len()];
    for c in 0..k {
        for img in 0..n {
            let src = &x[c * n * p + img * p..c * n * p + (img + 1) * p];
            out[(img * k + c) * p..(img * k + c + 1) * p].copy_from_slice(src);
        }
    }
    out
}

pub(crate) fn permute_maps_to_cols(x: &[Real], k: usize, n: usize, p: usize) -> Vec<Real> {
    let mut out = vec![0.0; x.len()];
    for c in 0..k {
        for img in 0..n {
            let src = &x[(img * k + c) * p..(img * k + c + 1) * p];
            out[c * n * p + img * p..c * n * p + (img + 1) * p].copy_from_slice(src);
        }
    }
    out
}

pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: Real) -> Real {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
