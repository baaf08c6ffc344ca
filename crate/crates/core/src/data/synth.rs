use crate::tensor::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Noisy copies of a few clean images: `template + N(0, sigma^2)` per pixel.
///
/// Samples are not clipped, so the noise stays zero-mean.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyTemplateSet {
    pub templates: Vec<Tensor>,
    /// Flattened samples, one per row of the list.
    pub samples: Vec<Vec<Real>>,
    /// Index of the template each sample was drawn from.
    pub sources: Vec<usize>,
    pub sigma: Real,
    /// Empirical mean of the drawn noise.
    pub noise_mean: Real,
}

/// `n` samples cycling through the templates, each with independent
/// Gaussian pixel noise.
pub fn make_noisy_templates(templates: &[Tensor], n: usize, sigma: Real, seed: u64) -> NoisyTemplateSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma.max(0.0) as f64).expect("finite sigma");
    let mut samples = Vec::with_capacity(n);
    let mut sources = Vec::with_capacity(n);
    let mut noise_sum = 0.0f64;
    let mut draws = 0usize;
    for i in 0..n {
        let t = i % templates.len().max(1);
        let s = templates[t]
            .data()
            .iter()
            .map(|&v| {
                let noise = if sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                noise_sum += noise;
                draws += 1;
                v + noise as Real
            })
            .collect();
        samples.push(s);
        sources.push(t);
    }
    NoisyTemplateSet {
        templates: templates.to_vec(),
        samples,
        sources,
        sigma,
        noise_mean: (noise_sum / draws.max(1) as f64) as Real,
    }
}
