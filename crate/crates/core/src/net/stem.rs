use super::conv::{Conv2d, ConvVars};
use crate::error::Result;
use crate::tensor::{Graph, Param, Var};
use rand::Rng;

/// `K` blocks of 3x3 convolution (padding 1) + bias + ReLU. Piecewise linear,
/// so a stem followed by CoDA layers is still dynamic linear.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseLinearStem {
    pub blocks: Vec<Conv2d>,
}

impl PiecewiseLinearStem {
    pub fn init<R: Rng + ?Sized>(in_channels: usize, channels: usize, depth: usize, rng: &mut R) -> Self {
        let blocks = (0..depth)
            .map(|i| {
                let cin = if i == 0 { in_channels } else { channels };
                Conv2d::init(cin, channels, (3, 3), 1, 1, rng)
            })
            .collect();
        Self { blocks }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn out_channels(&self, in_channels: usize) -> usize {
        self.blocks.last().map_or(in_channels, |b| b.out_channels())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<ConvVars> {
        self.blocks.iter().map(|b| b.bind(g, trainable)).collect()
    }

    /// Runs blocks `from..to` on `[N, C, H, W]` maps.
    pub fn record_range(&self, g: &mut Graph, mut x: Var, vars: &[ConvVars], from: usize, to: usize) -> Result<Var> {
        for i in from..to {
            let n = g.value(x).shape()[0];
            let (y, h, w) = self.blocks[i].record_columns(g, x, vars[i])?;
            let y = g.relu(y);
            x = g.columns_to_maps(y, n, h, w)?;
        }
        Ok(x)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }
}
