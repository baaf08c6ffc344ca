//! Eigenvector recovery: a single low-rank unit fitted to maximise its mean
//! output over noisy copies of a few images ends up spanning those images.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::make_noisy_templates;
use crate::dau::{align_fit_with_history, singular_subspace, subspace_cosine, DauBank, RescaleKind};
use crate::error::{contract_err, dim_err, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvDemoConfig {
    pub samples: usize,
    pub sigma: Real,
    pub rank: usize,
    pub steps: usize,
    pub lr: Real,
    pub rescale: RescaleKind,
    pub seed: u64,
}

impl Default for EvDemoConfig {
    fn default() -> Self {
        Self {
            samples: 3072,
            sigma: 0.5,
            rank: 3,
            steps: 200,
            lr: 1.0,
            rescale: RescaleKind::L2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvDemoResult {
    /// Cosine of each clean template with its projection onto the span of
    /// the top-`rank` right singular vectors of `AB`.
    pub cosines: Vec<Real>,
    pub singular_values: Vec<Real>,
    /// `d x rank`, orthonormal columns in decreasing singular value order.
    pub basis: DMatrix<Real>,
    /// Mean unit output before each step.
    pub history: Vec<Real>,
}

impl EvDemoResult {
    pub fn min_cosine(&self) -> Real {
        self.cosines.iter().copied().fold(Real::INFINITY, Real::min)
    }

    /// Basis vectors reshaped to `shape`, each signed so that its largest
    /// entry by magnitude is positive.
    pub fn basis_images(&self, shape: &[usize]) -> Result<Vec<Tensor>> {
        (0..self.basis.ncols())
            .map(|j| {
                let col: Vec<Real> = self.basis.column(j).iter().copied().collect();
                let peak = col.iter().copied().fold(0.0, |m: Real, v| if v.abs() > m.abs() { v } else { m });
                let sign = if peak < 0.0 { -1.0 } else { 1.0 };
                Tensor::new(shape, col.into_iter().map(|v| v * sign).collect())
            })
            .collect()
    }
}

/// Fits one unit without bias on `cfg.samples` noisy copies of
/// `templates` and measures how well its top singular subspace captures
/// each clean template.
pub fn run_evdemo(templates: &[Tensor], cfg: &EvDemoConfig) -> Result<EvDemoResult> {
    if templates.is_empty() {
        return contract_err("need at least one template");
    }
    let d = templates[0].len();
    if let Some(t) = templates.iter().find(|t| t.len() != d) {
        return dim_err(format!("template of {} values, expected {d}", t.len()));
    }
    let set = make_noisy_templates(templates, cfg.samples, cfg.sigma, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let init = DauBank::init(1, d, cfg.rank, cfg.rescale, true, &mut rng)?;
    let bank = DauBank::new(cfg.rescale, init.a().clone(), init.projection().clone(), None)?;
    let (fitted, history) = align_fit_with_history(&bank, &set.samples, cfg.steps, cfg.lr)?;
    let (basis, singular_values) = singular_subspace(&fitted, 0)?;
    let cosines = templates.iter().map(|t| subspace_cosine(t.data(), &basis)).collect();
    Ok(EvDemoResult {
        cosines,
        singular_values,
        basis,
        history,
    })
}
