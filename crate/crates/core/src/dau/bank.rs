use super::op::{BankFunction, BankShape, Inputs, WeightMode};
use super::{DauParams, RescaleKind};
use crate::error::{contract_err, dim_err, Result};
use crate::tensor::{Gradients, Graph, Param, Real, Tensor, Var};
use rand::Rng;

/// Storage of the `B` projection(s) of a bank.
#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    /// One `r x d` matrix used by every unit.
    Shared(Param),
    /// A separate `r x d` matrix per unit, stored `[k, r, d]`.
    PerUnit(Param),
}

impl Projection {
    pub fn param(&self) -> &Param {
        match self {
            Projection::Shared(p) | Projection::PerUnit(p) => p,
        }
    }

    pub fn param_mut(&mut self) -> &mut Param {
        match self {
            Projection::Shared(p) | Projection::PerUnit(p) => p,
        }
    }

    pub fn is_shared(&self) -> bool {
        matches!(self, Projection::Shared(_))
    }
}

/// `k` units over a common input dimension `d`, evaluated together.
///
/// Row `c` of the bank's weight matrix `W(x)` is the dynamic weight of unit
/// `c`. `A` is stored `[k, d, r]`, the bias (if any) `[k, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DauBank {
    kind: RescaleKind,
    a: Param,
    projection: Projection,
    bias: Option<Param>,
}

/// Graph handles of a bank's parameters for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BankVars {
    pub a: Var,
    pub b: Var,
    pub bias: Option<Var>,
}

impl DauBank {
    pub fn new(kind: RescaleKind, a: Param, projection: Projection, bias: Option<Param>) -> Result<Self> {
        let [k, d, r] = a.value.shape()[..] else {
            return dim_err(format!("A must be [k, d, r], got {:?}", a.value.shape()));
        };
        if r > d {
            return contract_err(format!("rank {r} exceeds input dimension {d}"));
        }
        let want_b: Vec<usize> = match &projection {
            Projection::Shared(_) => vec![r, d],
            Projection::PerUnit(_) => vec![k, r, d],
        };
        if projection.param().value.shape() != want_b.as_slice() {
            return dim_err(format!(
                "B has shape {:?}, expected {want_b:?}",
                projection.param().value.shape()
            ));
        }
        if let Some(b) = &bias {
            if !kind.allows_bias() {
                return contract_err("weight-bounded units carry no bias");
            }
            if b.value.shape() != [k, d] {
                return dim_err(format!("bias has shape {:?}, expected [{k}, {d}]", b.value.shape()));
            }
        }
        Ok(Self {
            kind,
            a,
            projection,
            bias,
        })
    }

    /// Randomly initialised bank: `A`, `B` uniform in `[-1/sqrt(d), 1/sqrt(d)]`,
    /// zero bias for L2/SQ and none for WB.
    pub fn init<R: Rng + ?Sized>(
        units: usize,
        dim: usize,
        rank: usize,
        kind: RescaleKind,
        shared_b: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (dim as Real).sqrt();
        let a = Param::new(Tensor::uniform(&[units, dim, rank], bound, rng));
        let projection = if shared_b {
            Projection::Shared(Param::new(Tensor::uniform(&[rank, dim], bound, rng)))
        } else {
            Projection::PerUnit(Param::new(Tensor::uniform(&[units, rank, dim], bound, rng)))
        };
        let bias = kind
            .allows_bias()
            .then(|| Param::new(Tensor::zeros(&[units, dim])));
        Self::new(kind, a, projection, bias)
    }

    /// Default sharing: shared `B` for L2/SQ, separate `B` per unit for WB.
    pub fn init_default<R: Rng + ?Sized>(
        units: usize,
        dim: usize,
        rank: usize,
        kind: RescaleKind,
        rng: &mut R,
    ) -> Result<Self> {
        Self::init(units, dim, rank, kind, kind != RescaleKind::Wb, rng)
    }

    /// Builds a bank from individual units. `shared_b` requires identical `B`s.
    pub fn from_units(units: &[DauParams], shared_b: bool) -> Result<Self> {
        let Some(first) = units.first() else {
            return contract_err("a bank needs at least one unit");
        };
        let (d, r, kind) = (first.dim(), first.rank(), first.kind());
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut bias = Vec::new();
        for u in units {
            if u.dim() != d || u.rank() != r || u.kind() != kind {
                return contract_err("units of a bank must share dimension, rank and rescaler");
            }
            if u.bias().is_some() != first.bias().is_some() {
                return contract_err("either all units carry a bias or none does");
            }
            if shared_b && u.b() != first.b() {
                return contract_err("shared projection requested but units have different B");
            }
            a.extend_from_slice(u.a().data());
            b.extend_from_slice(u.b().data());
            if let Some(bv) = u.bias() {
                bias.extend_from_slice(bv.data());
            }
        }
        let k = units.len();
        let projection = if shared_b {
            Projection::Shared(Param::new(first.b().clone()))
        } else {
            Projection::PerUnit(Param::new(Tensor::new(&[k, r, d], b)?))
        };
        let bias = if first.bias().is_some() {
            Some(Param::new(Tensor::new(&[k, d], bias)?))
        } else {
            None
        };
        Self::new(kind, Param::new(Tensor::new(&[k, d, r], a)?), projection, bias)
    }

    pub fn kind(&self) -> RescaleKind {
        self.kind
    }

    pub fn units(&self) -> usize {
        self.a.value.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.a.value.shape()[1]
    }

    pub fn rank(&self) -> usize {
        self.a.value.shape()[2]
    }

    pub fn shares_b(&self) -> bool {
        self.projection.is_shared()
    }

    pub fn a(&self) -> &Param {
        &self.a
    }

    pub fn projection(&self) -> &Projection {
        &self.projection
    }

    pub fn bias(&self) -> Option<&Param> {
        self.bias.as_ref()
    }

    /// Parameters in a fixed order: `A`, `B`, then bias.
    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.a, self.projection.param()];
        v.extend(self.bias.as_ref());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.a, self.projection.param_mut()];
        v.extend(self.bias.as_mut());
        v
    }

    /// A copy of unit `c` as a standalone [`DauParams`].
    pub fn unit(&self, c: usize) -> Result<DauParams> {
        let (k, d, r) = (self.units(), self.dim(), self.rank());
        if c >= k {
            return contract_err(format!("unit {c} of a bank with {k} units"));
        }
        let a = Tensor::new(&[d, r], self.a.value.data()[c * d * r..(c + 1) * d * r].to_vec())?;
        let b = match &self.projection {
            Projection::Shared(p) => p.value.clone(),
            Projection::PerUnit(p) => {
                Tensor::new(&[r, d], p.value.data()[c * r * d..(c + 1) * r * d].to_vec())?
            }
        };
        let bias = self
            .bias
            .as_ref()
            .map(|p| Tensor::vector(&p.value.data()[c * d..(c + 1) * d]));
        DauParams::new(a, b, bias, self.kind)
    }

    pub(crate) fn shape(&self, eps: Real) -> BankShape {
        BankShape {
            kind: self.kind,
            units: self.units(),
            dim: self.dim(),
            rank: self.rank(),
            shared_b: self.shares_b(),
            eps,
        }
    }

    fn check_columns(&self, x: &Tensor) -> Result<usize> {
        let (d, p) = x.dims2()?;
        if d != self.dim() {
            return dim_err(format!(
                "input columns of length {d} for a bank over {} dimensions",
                self.dim()
            ));
        }
        Ok(p)
    }

    /// Outputs for every column of the `d x P` matrix `x`, as `k x P`.
    pub fn forward_columns(&self, x: &Tensor) -> Result<Tensor> {
        let p = self.check_columns(x)?;
        let inp = self.inputs(x);
        let out = self.shape(crate::tensor::NORM_EPS).forward(&inp, p);
        Tensor::new(&[self.units(), p], out)
    }

    /// Output for a single input vector.
    pub fn forward_vector(&self, x: &[Real]) -> Result<Vec<Real>> {
        let col = Tensor::new(&[x.len(), 1], x.to_vec())?;
        Ok(self.forward_columns(&col)?.into_data())
    }

    /// Explicit `W(x)` (`k x d`) for a single input vector.
    pub fn weight_matrix(&self, x: &[Real]) -> Result<Tensor> {
        let col = Tensor::new(&[x.len(), 1], x.to_vec())?;
        self.check_columns(&col)?;
        let w = self.shape(crate::tensor::NORM_EPS).weights(&self.inputs(&col), 1);
        Tensor::new(&[self.units(), self.dim()], w)
    }

    /// Explicit weights for every column, laid out `[k, d, P]`.
    pub fn weight_columns(&self, x: &Tensor) -> Result<Tensor> {
        let p = self.check_columns(x)?;
        let w = self.shape(crate::tensor::NORM_EPS).weights(&self.inputs(x), p);
        Tensor::new(&[self.units(), self.dim(), p], w)
    }

    fn inputs<'a>(&'a self, x: &'a Tensor) -> Inputs<'a> {
        Inputs {
            x: x.data(),
            a: self.a.value.data(),
            b: self.projection.param().value.data(),
            bias: self.bias.as_ref().map(|p| p.value.data()),
        }
    }

    /// Records the parameters on `graph`.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BankVars {
        BankVars {
            a: self.a.bind(graph, trainable),
            b: self.projection.param().bind(graph, trainable),
            bias: self.bias.as_ref().map(|p| p.bind(graph, trainable)),
        }
    }

    /// Records the bank applied to the `d x P` column matrix `x`; output `k x P`.
    pub fn record(&self, graph: &mut Graph, x: Var, vars: BankVars, mode: WeightMode) -> Result<Var> {
        let p = self.check_columns(graph.value(x))?;
        let shape = self.shape(graph.eps());
        let out = {
            let inp = Inputs {
                x: graph.value(x).data(),
                a: graph.value(vars.a).data(),
                b: graph.value(vars.b).data(),
                bias: vars.bias.map(|v| graph.value(v).data()),
            };
            shape.forward(&inp, p)
        };
        let out = Tensor::new(&[self.units(), p], out)?;
        let mut inputs = vec![x, vars.a, vars.b];
        inputs.extend(vars.bias);
        Ok(graph.apply(&inputs, out, BankFunction { shape, mode }))
    }

    /// Adds the gradients recorded for `vars` to the parameter buffers.
    pub fn accumulate(&mut self, grads: &Gradients, vars: BankVars) -> Result<()> {
        self.a.accumulate(grads, vars.a)?;
        self.projection.param_mut().accumulate(grads, vars.b)?;
        if let (Some(p), Some(v)) = (self.bias.as_mut(), vars.bias) {
            p.accumulate(grads, v)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bank_matches_individual_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in RescaleKind::ALL {
            for shared in [true, false] {
                let mut bank = DauBank::init(4, 7, 3, kind, shared, &mut rng).unwrap();
                if let Some(b) = bank.bias.as_mut() {
                    b.value = Tensor::randn(&[4, 7], &mut rng);
                }
                let x = Tensor::randn(&[7, 5], &mut rng);
                let out = bank.forward_columns(&x).unwrap();
                let w = bank.weight_columns(&x).unwrap();
                for c in 0..4 {
                    let unit = bank.unit(c).unwrap();
                    for t in 0..5 {
                        let col: Vec<Real> = (0..7).map(|i| x.at(&[i, t])).collect();
                        let want = unit.output(&col).unwrap();
                        assert!((out.at(&[c, t]) - want).abs() < 1e-10, "{kind} shared={shared}");
                        let wu = unit.weight(&col).unwrap();
                        for i in 0..7 {
                            assert!((w.at(&[c, i, t]) - wu[i]).abs() < 1e-10);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn from_units_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bank = DauBank::init(3, 5, 2, RescaleKind::Sq, false, &mut rng).unwrap();
        let units: Vec<_> = (0..3).map(|c| bank.unit(c).unwrap()).collect();
        assert_eq!(DauBank::from_units(&units, false).unwrap(), bank);
        assert!(DauBank::from_units(&units, true).is_err());
    }

    #[test]
    fn wb_bank_rejects_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = DauBank::init(2, 4, 2, RescaleKind::Wb, false, &mut rng).unwrap();
        assert!(bank.bias().is_none());
        let bias = Some(Param::new(Tensor::zeros(&[2, 4])));
        let err = DauBank::new(RescaleKind::Wb, bank.a.clone(), bank.projection.clone(), bias);
        assert!(matches!(err, Err(crate::Error::Contract(_))));
    }
}
