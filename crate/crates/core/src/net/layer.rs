use crate::dau::{BankVars, DauBank, RescaleKind, WeightMode};
use crate::error::{dim_err, Result};
use crate::tensor::{Graph, Param, Real, Tensor, Var};
use rand::Rng;

/// Convolution whose every filter is a dynamic alignment unit applied to the
/// patch at one output position.
#[derive(Clone, Debug, PartialEq)]
pub struct CodaConvLayer {
    pub bank: DauBank,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
}

impl CodaConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        rank: usize,
        kind: RescaleKind,
        shared_b: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let d = in_channels * kernel.0 * kernel.1;
        let bank = DauBank::init(out_channels, d, rank.min(d), kind, shared_b, rng)?;
        Self::new(bank, kernel, stride, padding)
    }

    pub fn new(bank: DauBank, kernel: (usize, usize), stride: usize, padding: usize) -> Result<Self> {
        if kernel.0 == 0 || kernel.1 == 0 || bank.dim() % (kernel.0 * kernel.1) != 0 {
            return dim_err(format!(
                "bank dimension {} is not a multiple of the {}x{} kernel",
                bank.dim(),
                kernel.0,
                kernel.1
            ));
        }
        Ok(Self {
            bank,
            kernel,
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.bank.dim() / (self.kernel.0 * self.kernel.1)
    }

    pub fn out_channels(&self) -> usize {
        self.bank.units()
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let g = crate::tensor::ConvGeometry::new(self.in_channels(), h, w, self.kernel, self.stride, self.padding)?;
        Ok((g.out_h(), g.out_w()))
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BankVars {
        self.bank.bind(g, trainable)
    }

    /// Records the layer on `[N, C, H, W]` (or `[C, H, W]`) maps; returns
    /// `[N, k, H', W']`.
    pub fn record(&self, g: &mut Graph, x: Var, vars: BankVars, mode: WeightMode) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        let (n, c) = match shape[..] {
            [c, _, _] => (1, c),
            [n, c, _, _] => (n, c),
            _ => return dim_err(format!("expected [C, H, W] or [N, C, H, W], got {shape:?}")),
        };
        if c != self.in_channels() {
            return dim_err(format!("layer expects {} channels, got {c}", self.in_channels()));
        }
        let (cols, geom) = g.unfold(x, self.kernel, self.stride, self.padding)?;
        let out = self.bank.record(g, cols, vars, mode)?;
        g.columns_to_maps(out, n, geom.out_h(), geom.out_w())
    }

    /// Untracked forward pass on `[C, H, W]` or `[N, C, H, W]`.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let vars = self.bind(&mut g, false);
        let y = self.record(&mut g, x, vars, WeightMode::Dynamic)?;
        let out = g.value(y).clone();
        if input.shape().len() == 3 {
            let s = out.shape()[1..].to_vec();
            return out.into_reshaped(&s);
        }
        Ok(out)
    }

    /// The explicit matrix `W(x)` with `vec(output) = W(x) vec(input)` for a
    /// single `[C, H, W]` input. Rows follow the `[k, H', W']` output order,
    /// columns the `[C, H, W]` input order.
    pub fn assemble_matrix(&self, input: &Tensor) -> Result<Tensor> {
        let [c, h, w] = input.shape()[..] else {
            return dim_err(format!("expected [C, H, W], got {:?}", input.shape()));
        };
        let geom = crate::tensor::ConvGeometry::new(c, h, w, self.kernel, self.stride, self.padding)?;
        let cols = crate::tensor::unfold_columns(input.data(), 1, &geom);
        let p = geom.positions();
        let cols = Tensor::new(&[geom.patch_dim(), p], cols)?;
        // [k, d, P]
        let wts = self.bank.weight_columns(&cols)?;
        let k = self.out_channels();
        let d = geom.patch_dim();
        let (kh, kw) = self.kernel;
        let mut m = vec![0.0 as Real; k * p * c * h * w];
        let in_len = c * h * w;
        for t in 0..p {
            let (oy, ox) = (t / geom.out_w(), t % geom.out_w());
            for i in 0..d {
                let ch = i / (kh * kw);
                let (ky, kx) = ((i / kw) % kh, i % kw);
                let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                    continue;
                }
                let col = ch * h * w + iy as usize * w + ix as usize;
                for unit in 0..k {
                    m[(unit * p + t) * in_len + col] += wts.data()[(unit * d + i) * p + t];
                }
            }
        }
        Tensor::new(&[k * p, in_len], m)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.bank.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.bank.params_mut()
    }
}
