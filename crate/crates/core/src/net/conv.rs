//! Ordinary (static-weight) convolutions used by the patch embedding and the
//! piecewise-linear stem.

use crate::error::{dim_err, Result};
use crate::tensor::{Graph, Param, Real, Tensor, Var};
use rand::Rng;

/// 3x3 (or general) convolution with bias, evaluated as `W * unfold(x) + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

impl Conv2d {
    /// He-uniform initialisation, zero bias.
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel.0 * kernel.1;
        let bound = (6.0 / fan_in as Real).sqrt();
        Self {
            weight: Param::new(Tensor::uniform(&[out_channels, fan_in], bound, rng)),
            bias: Param::new(Tensor::zeros(&[out_channels, 1])),
            kernel,
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1] / (self.kernel.0 * self.kernel.1)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ConvVars {
        ConvVars {
            weight: self.weight.bind(g, trainable),
            bias: self.bias.bind(g, trainable),
        }
    }

    /// Convolution output in column layout `[out_channels, n * positions]`,
    /// plus the output spatial size.
    pub fn record_columns(&self, g: &mut Graph, x: Var, vars: ConvVars) -> Result<(Var, usize, usize)> {
        let c = g.value(x).shape()[1];
        if c != self.in_channels() {
            return dim_err(format!(
                "convolution expects {} input channels, got {c}",
                self.in_channels()
            ));
        }
        let (cols, geom) = g.unfold(x, self.kernel, self.stride, self.padding)?;
        let y = g.matmul(vars.weight, cols)?;
        let y = g.add(y, vars.bias)?;
        Ok((y, geom.out_h(), geom.out_w()))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
}
