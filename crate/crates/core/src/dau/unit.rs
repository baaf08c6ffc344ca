use super::{rescale_l2, rescale_sq, RescaleKind};
use crate::error::{contract_err, dim_err, Result};
use crate::tensor::{Real, Tensor, NORM_EPS};
use rand::Rng;

/// One dynamic alignment unit over `d`-dimensional inputs.
///
/// Holds `A` (`d x r`), `B` (`r x d`) and an optional bias `b` (`d`).
#[derive(Clone, Debug, PartialEq)]
pub struct DauParams {
    a: Tensor,
    b: Tensor,
    bias: Option<Tensor>,
    kind: RescaleKind,
}

/// Output of the weight-bounded unit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdauOutput {
    pub output: Real,
    /// `||A||_F ||B x||`, the bound on `||A B x||` the output is normalised by.
    pub norm_bound: Real,
}

impl DauParams {
    pub fn new(a: Tensor, b: Tensor, bias: Option<Tensor>, kind: RescaleKind) -> Result<Self> {
        let (d, r) = a.dims2()?;
        if a.shape().len() != 2 || b.shape() != [r, d] {
            return dim_err(format!(
                "A {:?} and B {:?} do not form a d x r / r x d pair",
                a.shape(),
                b.shape()
            ));
        }
        if r > d {
            return contract_err(format!("rank {r} exceeds input dimension {d}"));
        }
        if let Some(bias) = &bias {
            if !kind.allows_bias() {
                return contract_err("weight-bounded units carry no bias");
            }
            if bias.shape() != [d] {
                return dim_err(format!("bias {:?} for input dimension {d}", bias.shape()));
            }
        }
        Ok(Self { a, b, bias, kind })
    }

    /// Uniform `[-1/sqrt(d), 1/sqrt(d)]` entries for `A` and `B`, zero bias
    /// (no bias for weight bounding).
    pub fn init<R: Rng + ?Sized>(d: usize, r: usize, kind: RescaleKind, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (d as Real).sqrt();
        let a = Tensor::uniform(&[d, r], bound, rng);
        let b = Tensor::uniform(&[r, d], bound, rng);
        let bias = kind.allows_bias().then(|| Tensor::zeros(&[d]));
        Self::new(a, b, bias, kind)
    }

    pub fn dim(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn kind(&self) -> RescaleKind {
        self.kind
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    fn check_input(&self, x: &[Real]) -> Result<()> {
        if x.len() != self.dim() {
            return dim_err(format!(
                "input of length {} for a unit over {} dimensions",
                x.len(),
                self.dim()
            ));
        }
        Ok(())
    }

    /// `B x`.
    pub fn project(&self, x: &[Real]) -> Vec<Real> {
        let d = self.dim();
        (0..self.rank())
            .map(|j| dot(&self.b.data()[j * d..(j + 1) * d], x))
            .collect()
    }

    /// `A B x + b`.
    pub fn pre_activation(&self, x: &[Real]) -> Vec<Real> {
        let z = self.project(x);
        let r = self.rank();
        (0..self.dim())
            .map(|i| {
                let ab = dot(&self.a.data()[i * r..(i + 1) * r], &z);
                ab + self.bias.as_ref().map_or(0.0, |b| b.data()[i])
            })
            .collect()
    }

    /// `(w(x)^T x, w(x))` for the L2 and SQ rescalers.
    pub fn forward(&self, x: &[Real]) -> Result<(Real, Vec<Real>)> {
        self.check_input(x)?;
        let u = self.pre_activation(x);
        let w = match self.kind {
            RescaleKind::L2 => rescale_l2(&u),
            RescaleKind::Sq => rescale_sq(&u),
            RescaleKind::Wb => return contract_err("use edau_forward for weight-bounded units"),
        };
        Ok((dot(&w, x), w))
    }

    /// Weight-bounded output `(B x)^T (A^T x) / (||A||_F ||B x||)`, computed in
    /// the `r`-dimensional space.
    pub fn edau_forward(&self, x: &[Real]) -> Result<EdauOutput> {
        self.check_input(x)?;
        if self.kind != RescaleKind::Wb || self.bias.is_some() {
            return contract_err("edau_forward needs a weight-bounded unit without bias");
        }
        let (d, r) = (self.dim(), self.rank());
        let z = self.project(x);
        let v: Vec<Real> = (0..r)
            .map(|j| (0..d).map(|i| self.a.data()[i * r + j] * x[i]).sum())
            .collect();
        let bound = self.a.norm() * dot(&z, &z).sqrt();
        let output = dot(&z, &v) / bound.max(NORM_EPS);
        Ok(EdauOutput {
            output,
            norm_bound: bound,
        })
    }

    /// Unit output for any rescaler.
    pub fn output(&self, x: &[Real]) -> Result<Real> {
        match self.kind {
            RescaleKind::Wb => Ok(self.edau_forward(x)?.output),
            _ => Ok(self.forward(x)?.0),
        }
    }

    /// Explicit `w(x)`; for weight bounding `A B x / (||A||_F ||B x||)`.
    pub fn weight(&self, x: &[Real]) -> Result<Vec<Real>> {
        self.check_input(x)?;
        match self.kind {
            RescaleKind::Wb => {
                let u = self.pre_activation(x);
                let z = self.project(x);
                let s = 1.0 / (self.a.norm() * dot(&z, &z).sqrt()).max(NORM_EPS);
                Ok(u.into_iter().map(|v| v * s).collect())
            }
            _ => Ok(self.forward(x)?.1),
        }
    }
}

pub(crate) fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_unit(kind: RescaleKind) -> DauParams {
        let bias = kind.allows_bias().then(|| Tensor::zeros(&[2]));
        DauParams::new(Tensor::eye(2), Tensor::eye(2), bias, kind).unwrap()
    }

    fn norm(v: &[Real]) -> Real {
        dot(v, v).sqrt()
    }

    #[test]
    fn eigenvector_attains_bound() {
        let (out, w) = identity_unit(RescaleKind::L2).forward(&[3.0, 4.0]).unwrap();
        assert!((out - 5.0).abs() < 1e-12);
        assert!((w[0] - 0.6).abs() < 1e-12 && (w[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_bias_gives_zero() {
        // A B x = x, so b = -x + x_perp makes A B x + b orthogonal to x.
        let bias = Tensor::vector(&[-3.0 - 4.0, -4.0 + 3.0]);
        let p = DauParams::new(Tensor::eye(2), Tensor::eye(2), Some(bias), RescaleKind::L2).unwrap();
        let (out, _) = p.forward(&[3.0, 4.0]).unwrap();
        assert!(out.abs() < 1e-12);
    }

    #[test]
    fn edau_identity_example() {
        let p = identity_unit(RescaleKind::Wb);
        let e = p.edau_forward(&[3.0, 4.0]).unwrap();
        assert!((e.output - 5.0 / (2.0 as Real).sqrt()).abs() < 1e-12);
        let w = p.weight(&[3.0, 4.0]).unwrap();
        let s = (2.0 as Real).sqrt() * 5.0;
        assert!((w[0] - 3.0 / s).abs() < 1e-12 && (w[1] - 4.0 / s).abs() < 1e-12);
    }

    #[test]
    fn edau_zero_projection_is_zero() {
        let b = Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap();
        let a = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let p = DauParams::new(a, b, None, RescaleKind::Wb).unwrap();
        assert_eq!(p.edau_forward(&[2.0, 2.0]).unwrap().output, 0.0);
    }

    #[test]
    fn rejects_bad_configs() {
        let bias = Some(Tensor::zeros(&[2]));
        assert!(matches!(
            DauParams::new(Tensor::eye(2), Tensor::eye(2), bias, RescaleKind::Wb),
            Err(crate::Error::Contract(_))
        ));
        let wide = Tensor::zeros(&[2, 3]);
        assert!(DauParams::new(wide, Tensor::zeros(&[3, 2]), None, RescaleKind::L2).is_err());
        let p = identity_unit(RescaleKind::Sq);
        assert!(matches!(p.forward(&[1.0]), Err(crate::Error::Dimension(_))));
        assert!(p.edau_forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn random_sweep_bounds_and_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..300 {
            let d = 2 + trial % 9;
            let r = 1 + trial % d;
            for kind in RescaleKind::ALL {
                let mut p = DauParams::init(d, r, kind, &mut rng).unwrap();
                if let Some(b) = p.bias.as_mut() {
                    *b = Tensor::randn(&[d], &mut rng);
                }
                let x = Tensor::randn(&[d], &mut rng).scaled(3.0);
                let x = x.data();
                let out = p.output(x).unwrap();
                let w = p.weight(x).unwrap();
                assert!(out.abs() <= norm(x) * (1.0 + 1e-9));
                assert!(norm(&w) <= 1.0 + 1e-9);
                assert!((dot(&w, x) - out).abs() <= 1e-9);
            }
        }
    }
}
