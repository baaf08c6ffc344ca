//! Fused forward/backward kernels for a bank of units applied to many input
//! columns at once.
//!
//! Inputs arrive as a `d x P` matrix `X` (one column per position and image).
//! For L2 and SQ every unit materialises `U_c = A_c Z_c + b_c` (`d x P`) and
//! reads off `s = u^T x` and `q = ||u||^2`; the output is `alpha(q) s`. Weight
//! bounding works entirely in the `r`-dimensional space:
//! `out = (z^T A_c^T x) / (||A_c||_F max(||z||, eps))` with `z = B_c x`.

use super::{alpha, RescaleKind};
use crate::tensor::linalg::gemm;
use crate::tensor::{Function, Real, Tensor};

/// Whether the dynamic weights `w(x)` take part in differentiation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    /// Full gradient, including the dependence of `w` on `x` and parameters.
    Dynamic,
    /// `w(x)` is held constant: the layer acts as the linear map `x -> W x`.
    Frozen,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BankShape {
    pub kind: RescaleKind,
    pub units: usize,
    pub dim: usize,
    pub rank: usize,
    pub shared_b: bool,
    pub eps: Real,
}

pub(crate) struct Inputs<'a> {
    pub x: &'a [Real],
    pub a: &'a [Real],
    pub b: &'a [Real],
    pub bias: Option<&'a [Real]>,
}

pub(crate) struct BankGrads {
    pub x: Vec<Real>,
    pub a: Vec<Real>,
    pub b: Vec<Real>,
    pub bias: Option<Vec<Real>>,
}

impl BankShape {
    fn a_unit<'a>(&self, a: &'a [Real], c: usize) -> &'a [Real] {
        let n = self.dim * self.rank;
        &a[c * n..(c + 1) * n]
    }

    /// `Z = B X`: `r x P` when shared, `(k r) x P` otherwise.
    fn project(&self, inp: &Inputs, p: usize) -> Vec<Real> {
        let rows = if self.shared_b { self.rank } else { self.units * self.rank };
        let mut z = vec![0.0; rows * p];
        gemm(rows, self.dim, p, inp.b, false, inp.x, false, &mut z, 0.0);
        z
    }

    fn z_unit<'a>(&self, z: &'a [Real], c: usize, p: usize) -> &'a [Real] {
        if self.shared_b {
            z
        } else {
            &z[c * self.rank * p..(c + 1) * self.rank * p]
        }
    }

    /// `U` for all units, `(k d) x P`, bias included.
    fn materialize(&self, inp: &Inputs, z: &[Real], p: usize) -> Vec<Real> {
        let (k, d, r) = (self.units, self.dim, self.rank);
        let mut u = vec![0.0; k * d * p];
        if self.shared_b {
            gemm(k * d, r, p, inp.a, false, z, false, &mut u, 0.0);
        } else {
            for c in 0..k {
                gemm(
                    d,
                    r,
                    p,
                    self.a_unit(inp.a, c),
                    false,
                    self.z_unit(z, c, p),
                    false,
                    &mut u[c * d * p..(c + 1) * d * p],
                    0.0,
                );
            }
        }
        if let Some(bias) = inp.bias {
            for (row, &bv) in u.chunks_mut(p).zip(bias) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        u
    }

    /// `(s, q)` per unit and column from the materialised `U`.
    fn reduce(&self, u: &[Real], x: &[Real], p: usize) -> (Vec<Real>, Vec<Real>) {
        let (k, d) = (self.units, self.dim);
        let mut s = vec![0.0; k * p];
        let mut q = vec![0.0; k * p];
        for c in 0..k {
            let (sc, qc) = (&mut s[c * p..(c + 1) * p], &mut q[c * p..(c + 1) * p]);
            for i in 0..d {
                let urow = &u[(c * d + i) * p..(c * d + i + 1) * p];
                let xrow = &x[i * p..(i + 1) * p];
                for t in 0..p {
                    sc[t] += urow[t] * xrow[t];
                    qc[t] += urow[t] * urow[t];
                }
            }
        }
        (s, q)
    }

    /// `V_c = A_c^T X` for every unit, `(k r) x P`.
    fn back_project(&self, inp: &Inputs, p: usize) -> Vec<Real> {
        let (k, d, r) = (self.units, self.dim, self.rank);
        let mut v = vec![0.0; k * r * p];
        for c in 0..k {
            gemm(
                r,
                d,
                p,
                self.a_unit(inp.a, c),
                true,
                inp.x,
                false,
                &mut v[c * r * p..(c + 1) * r * p],
                0.0,
            );
        }
        v
    }

    fn frobenius(&self, a: &[Real]) -> Vec<Real> {
        (0..self.units)
            .map(|c| self.a_unit(a, c).iter().map(|v| v * v).sum::<Real>().sqrt())
            .collect()
    }

    fn column_norms(&self, z: &[Real], c: usize, p: usize) -> Vec<Real> {
        let zc = self.z_unit(z, c, p);
        let mut n = vec![0.0; p];
        for j in 0..self.rank {
            for (t, nv) in n.iter_mut().enumerate() {
                *nv += zc[j * p + t].powi(2);
            }
        }
        n.iter_mut().for_each(|v| *v = v.sqrt());
        n
    }

    /// Unit outputs, `k x P`.
    pub fn forward(&self, inp: &Inputs, p: usize) -> Vec<Real> {
        let z = self.project(inp, p);
        match self.kind {
            RescaleKind::L2 | RescaleKind::Sq => {
                let u = self.materialize(inp, &z, p);
                let (s, q) = self.reduce(&u, inp.x, p);
                s.iter()
                    .zip(&q)
                    .map(|(&s, &q)| s * alpha(self.kind, q, self.eps).0)
                    .collect()
            }
            RescaleKind::Wb => {
                let v = self.back_project(inp, p);
                let fro = self.frobenius(inp.a);
                let r = self.rank;
                let mut out = vec![0.0; self.units * p];
                for c in 0..self.units {
                    let zc = self.z_unit(&z, c, p);
                    let vc = &v[c * r * p..(c + 1) * r * p];
                    let nz = self.column_norms(&z, c, p);
                    let oc = &mut out[c * p..(c + 1) * p];
                    for j in 0..r {
                        for t in 0..p {
                            oc[t] += zc[j * p + t] * vc[j * p + t];
                        }
                    }
                    for t in 0..p {
                        oc[t] /= (fro[c] * nz[t]).max(self.eps);
                    }
                }
                out
            }
        }
    }

    /// Explicit weights `w_c(x_t)`, laid out `(k d) x P`.
    pub fn weights(&self, inp: &Inputs, p: usize) -> Vec<Real> {
        let z = self.project(inp, p);
        let (k, d) = (self.units, self.dim);
        match self.kind {
            RescaleKind::L2 | RescaleKind::Sq => {
                let mut u = self.materialize(inp, &z, p);
                let (_, q) = self.reduce(&u, inp.x, p);
                for c in 0..k {
                    for i in 0..d {
                        let row = &mut u[(c * d + i) * p..(c * d + i + 1) * p];
                        for t in 0..p {
                            row[t] *= alpha(self.kind, q[c * p + t], self.eps).0;
                        }
                    }
                }
                u
            }
            RescaleKind::Wb => {
                let mut u = self.materialize(inp, &z, p);
                let fro = self.frobenius(inp.a);
                for c in 0..k {
                    let nz = self.column_norms(&z, c, p);
                    for i in 0..d {
                        let row = &mut u[(c * d + i) * p..(c * d + i + 1) * p];
                        for t in 0..p {
                            row[t] /= (fro[c] * nz[t]).max(self.eps);
                        }
                    }
                }
                u
            }
        }
    }

    pub fn backward(&self, g: &[Real], inp: &Inputs, p: usize, mode: WeightMode) -> BankGrads {
        match self.kind {
            RescaleKind::L2 | RescaleKind::Sq => self.backward_materialized(g, inp, p, mode),
            RescaleKind::Wb => self.backward_bounded(g, inp, p, mode),
        }
    }

    fn backward_materialized(&self, g: &[Real], inp: &Inputs, p: usize, mode: WeightMode) -> BankGrads {
        let (k, d, r) = (self.units, self.dim, self.rank);
        let z = self.project(inp, p);
        let mut u = self.materialize(inp, &z, p);
        let (s, q) = self.reduce(&u, inp.x, p);
        // gs = g alpha(q), gq = g s alpha'(q)
        let mut gs = vec![0.0; k * p];
        let mut gq = vec![0.0; k * p];
        for i in 0..k * p {
            let (a, da) = alpha(self.kind, q[i], self.eps);
            gs[i] = g[i] * a;
            gq[i] = g[i] * s[i] * da;
        }
        // frozen path: gX = sum_c gs_c * u_c
        let mut gx = vec![0.0; d * p];
        for c in 0..k {
            for i in 0..d {
                let urow = &u[(c * d + i) * p..(c * d + i + 1) * p];
                let gxrow = &mut gx[i * p..(i + 1) * p];
                let gsc = &gs[c * p..(c + 1) * p];
                for t in 0..p {
                    gxrow[t] += gsc[t] * urow[t];
                }
            }
        }
        if mode == WeightMode::Frozen {
            return BankGrads {
                x: gx,
                a: vec![0.0; inp.a.len()],
                b: vec![0.0; inp.b.len()],
                bias: inp.bias.map(|b| vec![0.0; b.len()]),
            };
        }
        // gU = gs x + 2 gq u, overwriting u
        for c in 0..k {
            for i in 0..d {
                let urow = &mut u[(c * d + i) * p..(c * d + i + 1) * p];
                let xrow = &inp.x[i * p..(i + 1) * p];
                for t in 0..p {
                    urow[t] = gs[c * p + t] * xrow[t] + 2.0 * gq[c * p + t] * urow[t];
                }
            }
        }
        let gu = u;
        let bias = inp.bias.map(|_| gu.chunks(p).map(|row| row.iter().sum()).collect());
        let mut ga = vec![0.0; k * d * r];
        let mut gz = vec![0.0; z.len()];
        if self.shared_b {
            gemm(k * d, p, r, &gu, false, &z, true, &mut ga, 0.0);
            gemm(r, k * d, p, inp.a, true, &gu, false, &mut gz, 0.0);
        } else {
            for c in 0..k {
                let guc = &gu[c * d * p..(c + 1) * d * p];
                let zc = self.z_unit(&z, c, p);
                gemm(d, p, r, guc, false, zc, true, &mut ga[c * d * r..(c + 1) * d * r], 0.0);
                gemm(
                    r,
                    d,
                    p,
                    self.a_unit(inp.a, c),
                    true,
                    guc,
                    false,
                    &mut gz[c * r * p..(c + 1) * r * p],
                    0.0,
                );
            }
        }
        let (gb, gx) = self.backward_projection(&gz, inp, p, gx);
        BankGrads { x: gx, a: ga, b: gb, bias }
    }

    /// Pushes `gZ` through `Z = B X`.
    fn backward_projection(&self, gz: &[Real], inp: &Inputs, p: usize, mut gx: Vec<Real>) -> (Vec<Real>, Vec<Real>) {
        let rows = gz.len() / p;
        let d = self.dim;
        let mut gb = vec![0.0; rows * d];
        gemm(rows, p, d, gz, false, inp.x, true, &mut gb, 0.0);
        gemm(d, rows, p, inp.b, true, gz, false, &mut gx, 1.0);
        (gb, gx)
    }

    fn backward_bounded(&self, g: &[Real], inp: &Inputs, p: usize, mode: WeightMode) -> BankGrads {
        let (k, d, r) = (self.units, self.dim, self.rank);
        let z = self.project(inp, p);
        let v = self.back_project(inp, p);
        let fro = self.frobenius(inp.a);
        let mut gx = vec![0.0; d * p];
        let mut ga = vec![0.0; k * d * r];
        let mut gz = vec![0.0; z.len()];
        let mut gv = vec![0.0; r * p];
        for c in 0..k {
            let zc = self.z_unit(&z, c, p);
            let vc = &v[c * r * p..(c + 1) * r * p];
            let nz = self.column_norms(&z, c, p);
            let gc = &g[c * p..(c + 1) * p];
            let mut gfro = 0.0;
            let mut gz_scale = vec![0.0; p];
            let mut gs = vec![0.0; p];
            for t in 0..p {
                let denom = (fro[c] * nz[t]).max(self.eps);
                let s: Real = (0..r).map(|j| zc[j * p + t] * vc[j * p + t]).sum();
                let out = s / denom;
                gs[t] = gc[t] / denom;
                if fro[c] * nz[t] > self.eps {
                    gfro -= gc[t] * out / fro[c];
                    gz_scale[t] = -gc[t] * out / (nz[t] * nz[t]);
                }
            }
            // gv = gs z ; gX += A_c gv
            for j in 0..r {
                for t in 0..p {
                    gv[j * p + t] = gs[t] * zc[j * p + t];
                }
            }
            let a_c = self.a_unit(inp.a, c);
            gemm(d, r, p, a_c, false, &gv, false, &mut gx, 1.0);
            if mode == WeightMode::Frozen {
                continue;
            }
            // gA_c = X gv^T + gfro A_c / ||A_c||_F
            let ga_c = &mut ga[c * d * r..(c + 1) * d * r];
            gemm(d, p, r, inp.x, false, &gv, true, ga_c, 0.0);
            if fro[c] > 0.0 {
                for (gav, av) in ga_c.iter_mut().zip(a_c) {
                    *gav += gfro * av / fro[c];
                }
            }
            // gz = gs v - g out z / ||z||^2
            let gzc = if self.shared_b {
                &mut gz[..]
            } else {
                &mut gz[c * r * p..(c + 1) * r * p]
            };
            for j in 0..r {
                for t in 0..p {
                    gzc[j * p + t] += gs[t] * vc[j * p + t] + gz_scale[t] * zc[j * p + t];
                }
            }
        }
        if mode == WeightMode::Frozen {
            return BankGrads {
                x: gx,
                a: ga,
                b: vec![0.0; inp.b.len()],
                bias: None,
            };
        }
        let (gb, gx) = self.backward_projection(&gz, inp, p, gx);
        BankGrads { x: gx, a: ga, b: gb, bias: None }
    }
}

/// Graph node for a bank applied to a `d x P` column matrix.
pub(crate) struct BankFunction {
    pub shape: BankShape,
    pub mode: WeightMode,
}

impl Function for BankFunction {
    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Tensor>> {
        let p = inputs[0].shape()[1];
        let inp = Inputs {
            x: inputs[0].data(),
            a: inputs[1].data(),
            b: inputs[2].data(),
            bias: inputs.get(3).map(|t| t.data()),
        };
        let g = self.shape.backward(grad.data(), &inp, p, self.mode);
        let frozen = self.mode == WeightMode::Frozen;
        let mut out = vec![
            Some(Tensor::new(inputs[0].shape(), g.x).expect("grad shape")),
            (!frozen).then(|| Tensor::new(inputs[1].shape(), g.a).expect("grad shape")),
            (!frozen).then(|| Tensor::new(inputs[2].shape(), g.b).expect("grad shape")),
        ];
        if let (Some(t), Some(gb)) = (inputs.get(3), g.bias) {
            out.push((!frozen).then(|| Tensor::new(t.shape(), gb).expect("grad shape")));
        } else if inputs.len() > 3 {
            out.push(None);
        }
        out
    }
}
