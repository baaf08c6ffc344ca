//! Input encodings placed in front of the first CoDA layer.

use super::conv::{Conv2d, ConvVars};
use crate::error::{dim_err, Result};
use crate::tensor::{Graph, Param, Real, Tensor, Var};
use rand::Rng;

/// Appends the complement of every channel: `[x_1..x_C, 1-x_1..1-x_C]`.
///
/// For RGB input this is the six-channel `[r, g, b, 1-r, 1-g, 1-b]` encoding;
/// for grayscale it yields `[v, 1-v]`. Dark and bright pixels thus get
/// comparable norms.
pub fn six_channel(images: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = match *images.shape() {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        ref s => return dim_err(format!("expected [C, H, W] or [N, C, H, W], got {s:?}")),
    };
    let plane = h * w;
    let src = images.data();
    let mut out = vec![0.0; n * 2 * c * plane];
    for img in 0..n {
        for ch in 0..c {
            let s = &src[(img * c + ch) * plane..(img * c + ch + 1) * plane];
            let base = img * 2 * c * plane;
            out[base + ch * plane..base + (ch + 1) * plane].copy_from_slice(s);
            for (o, &v) in out[base + (c + ch) * plane..base + (c + ch + 1) * plane]
                .iter_mut()
                .zip(s)
            {
                *o = 1.0 - v;
            }
        }
    }
    Tensor::new(&[n, 2 * c, h, w], out)
}

/// [`six_channel`] recorded on a graph, for `[N, C, H, W]` inputs.
pub fn record_six_channel(g: &mut Graph, x: Var) -> Result<Var> {
    let out = six_channel(g.value(x))?;
    let [n, c, h, w] = g.value(x).shape()[..] else {
        return dim_err(format!("expected [N, C, H, W], got {:?}", g.value(x).shape()));
    };
    let plane = h * w;
    Ok(g.apply(&[x], out, move |grad: &Tensor, _: &[&Tensor], _: &Tensor| {
        let gd = grad.data();
        let mut gx = vec![0.0; n * c * plane];
        for img in 0..n {
            for ch in 0..c {
                let base = img * 2 * c * plane;
                for i in 0..plane {
                    gx[(img * c + ch) * plane + i] = gd[base + ch * plane + i] - gd[base + (c + ch) * plane + i];
                }
            }
        }
        vec![Some(Tensor::new(&[n, c, h, w], gx).expect("grad shape"))]
    }))
}

/// Learnt 3x3 patch embedding followed by per-channel standardisation.
///
/// The standardisation uses running statistics in every forward pass; they
/// are updated from the observed batch statistics after each training step,
/// so the embedding is a fixed function whenever it is evaluated.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedding {
    pub conv: Conv2d,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<Real>,
    pub running_var: Vec<Real>,
    pub momentum: Real,
    pub initialized: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct EmbeddingVars {
    pub conv: ConvVars,
    pub gamma: Var,
    pub beta: Var,
}

const STD_EPS: Real = 1e-5;

impl PatchEmbedding {
    pub fn init<R: Rng + ?Sized>(in_channels: usize, channels: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::init(in_channels, channels, (3, 3), 1, 1, rng),
            gamma: Param::new(Tensor::ones(&[channels, 1])),
            beta: Param::new(Tensor::zeros(&[channels, 1])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> EmbeddingVars {
        EmbeddingVars {
            conv: self.conv.bind(g, trainable),
            gamma: self.gamma.bind(g, trainable),
            beta: self.beta.bind(g, trainable),
        }
    }

    /// Records the embedding of `[N, C, H, W]` images; returns `[N, E, H, W]`
    /// and the per-channel mean/variance of the raw convolution output.
    pub fn record(&self, g: &mut Graph, x: Var, vars: EmbeddingVars) -> Result<(Var, Vec<Real>, Vec<Real>)> {
        let n = g.value(x).shape()[0];
        let (y, oh, ow) = self.conv.record_columns(g, x, vars.conv)?;
        let (mean, var) = row_moments(g.value(y));
        let mu = g.constant(Tensor::new(&[self.channels(), 1], self.running_mean.clone())?);
        let inv_std = g.constant(Tensor::new(
            &[self.channels(), 1],
            self.running_var.iter().map(|v| 1.0 / (v + STD_EPS).sqrt()).collect(),
        )?);
        let y = g.sub(y, mu)?;
        let y = g.mul(y, inv_std)?;
        let y = g.mul(y, vars.gamma)?;
        let y = g.add(y, vars.beta)?;
        Ok((g.columns_to_maps(y, n, oh, ow)?, mean, var))
    }

    /// Initialises the running statistics from `images` if no batch has been
    /// seen yet.
    pub fn calibrate(&mut self, images: &Tensor) -> Result<()> {
        if self.initialized {
            return Ok(());
        }
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let vars = self.conv.bind(&mut g, false);
        let (y, _, _) = self.conv.record_columns(&mut g, x, vars)?;
        let (mean, var) = row_moments(g.value(y));
        self.update_statistics(&mean, &var);
        Ok(())
    }

    /// Folds batch statistics into the running estimates. The first batch
    /// replaces the initial values outright.
    pub fn update_statistics(&mut self, mean: &[Real], var: &[Real]) {
        if !self.initialized {
            self.running_mean = mean.to_vec();
            self.running_var = var.to_vec();
            self.initialized = true;
            return;
        }
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.conv.params();
        v.push(&self.gamma);
        v.push(&self.beta);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv.params_mut();
        v.push(&mut self.gamma);
        v.push(&mut self.beta);
        v
    }
}

fn row_moments(t: &Tensor) -> (Vec<Real>, Vec<Real>) {
    let (rows, cols) = t.dims2().expect("column layout");
    let mut mean = vec![0.0; rows];
    let mut var = vec![0.0; rows];
    for r in 0..rows {
        let row = &t.data()[r * cols..(r + 1) * cols];
        let m = row.iter().sum::<Real>() / cols as Real;
        mean[r] = m;
        var[r] = row.iter().map(|v| (v - m).powi(2)).sum::<Real>() / cols as Real;
    }
    (mean, var)
}

/// How raw images are turned into the input of the CoDA layers.
#[derive(Clone, Debug, PartialEq)]
pub enum InputEncoding {
    SixChannel,
    Embedding(PatchEmbedding),
}

impl InputEncoding {
    /// Channel count produced for `in_channels` raw channels.
    pub fn out_channels(&self, in_channels: usize) -> usize {
        match self {
            InputEncoding::SixChannel => 2 * in_channels,
            InputEncoding::Embedding(e) => e.channels(),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            InputEncoding::SixChannel => "six",
            InputEncoding::Embedding(_) => "embed",
        }
    }
}
