//! Dynamic alignment units.
//!
//! A unit computes `g(A B x + b)^T x`, a linear function of `x` whose weight
//! vector `w(x) = g(A B x + b)` depends on the input and has norm at most one.
//! Three rescalers are provided: unit-norm ([`RescaleKind::L2`]), squashing
//! ([`RescaleKind::Sq`]) and weight bounding ([`RescaleKind::Wb`]), which
//! divides by the upper bound `||A||_F ||B x||` instead of `||A B x||` and never
//! forms the `d`-dimensional weight.

mod align;
mod bank;
mod op;
pub(crate) mod unit;

pub use align::{align_fit, align_fit_with_history, singular_subspace, subspace_cosine};
pub use bank::{BankVars, DauBank, Projection};
pub use op::WeightMode;
pub use unit::{DauParams, EdauOutput};

use crate::error::{config_err, Error, Result};
use crate::tensor::{Real, NORM_EPS};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RescaleKind {
    L2,
    Sq,
    Wb,
}

impl RescaleKind {
    pub const ALL: [RescaleKind; 3] = [RescaleKind::L2, RescaleKind::Sq, RescaleKind::Wb];

    /// Whether units of this kind may carry a bias vector.
    pub fn allows_bias(self) -> bool {
        self != RescaleKind::Wb
    }
}

impl fmt::Display for RescaleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RescaleKind::L2 => "l2",
            RescaleKind::Sq => "sq",
            RescaleKind::Wb => "wb",
        })
    }
}

impl FromStr for RescaleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(RescaleKind::L2),
            "sq" => Ok(RescaleKind::Sq),
            "wb" => Ok(RescaleKind::Wb),
            other => config_err(format!("unknown rescaler '{other}' (expected l2, sq or wb)")),
        }
    }
}

fn norm(u: &[Real]) -> Real {
    u.iter().map(|v| v * v).sum::<Real>().sqrt()
}

/// `u / ||u||`; vectors shorter than the norm guard map to zero.
pub fn rescale_l2(u: &[Real]) -> Vec<Real> {
    let s = 1.0 / norm(u).max(NORM_EPS);
    u.iter().map(|v| v * s).collect()
}

/// Squashing: `u / ||u|| * ||u||^2 / (1 + ||u||^2)`, i.e. `u ||u|| / (1 + ||u||^2)`.
pub fn rescale_sq(u: &[Real]) -> Vec<Real> {
    let n = norm(u);
    let s = n / (1.0 + n * n);
    u.iter().map(|v| v * s).collect()
}

/// Scale factor `alpha(q)` with `g(u) = alpha(||u||^2) u`, and its derivative
/// in `q = ||u||^2`.
pub(crate) fn alpha(kind: RescaleKind, q: Real, eps: Real) -> (Real, Real) {
    let n = q.max(0.0).sqrt();
    match kind {
        RescaleKind::L2 => {
            if n > eps {
                (1.0 / n, -0.5 / (q * n))
            } else {
                (1.0 / eps, 0.0)
            }
        }
        RescaleKind::Sq => {
            let a = n / (1.0 + q);
            if n > eps {
                (a, (1.0 - q) / (2.0 * n * (1.0 + q) * (1.0 + q)))
            } else {
                (a, 0.0)
            }
        }
        RescaleKind::Wb => unreachable!("weight bounding does not rescale u"),
    }
}
