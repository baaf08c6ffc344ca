//! Patch extraction (im2col) and its adjoint.

use super::{Graph, Real, Tensor, Var};
use crate::error::{config_err, dim_err, Result};

/// Spatial bookkeeping for a sliding-window operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return config_err("stride must be positive");
        }
        if kernel.0 == 0 || kernel.1 == 0 {
            return config_err("kernel extents must be positive");
        }
        if kernel.0 > height + 2 * padding || kernel.1 > width + 2 * padding {
            return dim_err(format!(
                "kernel {kernel:?} does not fit a {height}x{width} input with padding {padding}"
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel.0) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel.1) / self.stride + 1
    }

    /// Number of output positions per image.
    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Length of one flattened receptive field.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Input offset read by patch row `row` at output position `(oy, ox)`,
    /// or `None` where the receptive field hangs over the zero padding.
    #[inline]
    fn source(&self, row: usize, oy: usize, ox: usize) -> Option<usize> {
        let (kh, kw) = self.kernel;
        let c = row / (kh * kw);
        let ky = (row / kw) % kh;
        let kx = row % kw;
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((c * self.height + y as usize) * self.width + x as usize)
        }
    }
}

/// Unfolds `n` stacked images into a `patch_dim x (n * positions)` matrix.
/// Column `img * positions + oy * out_w + ox` is the patch at `(oy, ox)`.
pub fn unfold_columns(images: &[Real], n: usize, geom: &ConvGeometry) -> Vec<Real> {
    let (d, p, ow) = (geom.patch_dim(), geom.positions(), geom.out_w());
    let cols = n * p;
    let img_len = geom.image_len();
    let mut out = vec![0.0; d * cols];
    for row in 0..d {
        let dst = &mut out[row * cols..(row + 1) * cols];
        for img in 0..n {
            let src = &images[img * img_len..(img + 1) * img_len];
            for t in 0..p {
                if let Some(s) = geom.source(row, t / ow, t % ow) {
                    dst[img * p + t] = src[s];
                }
            }
        }
    }
    out
}

/// Adjoint of [`unfold_columns`]: scatters columns back onto the images,
/// summing where receptive fields overlap.
pub fn fold_columns(cols_data: &[Real], n: usize, geom: &ConvGeometry) -> Vec<Real> {
    let (d, p, ow) = (geom.patch_dim(), geom.positions(), geom.out_w());
    let cols = n * p;
    let img_len = geom.image_len();
    let mut out = vec![0.0; n * img_len];
    for row in 0..d {
        let src = &cols_data[row * cols..(row + 1) * cols];
        for img in 0..n {
            let dst = &mut out[img * img_len..(img + 1) * img_len];
            for t in 0..p {
                if let Some(s) = geom.source(row, t / ow, t % ow) {
                    dst[s] += src[img * p + t];
                }
            }
        }
    }
    out
}

/// Folds a `patch_dim x (n * positions)` matrix back to `[n, C, H, W]`.
pub fn fold(cols: &Tensor, n: usize, geom: &ConvGeometry) -> Result<Tensor> {
    let want = [geom.patch_dim(), n * geom.positions()];
    if cols.shape() != want {
        return dim_err(format!("fold expects {want:?}, got {:?}", cols.shape()));
    }
    Tensor::new(
        &[n, geom.channels, geom.height, geom.width],
        fold_columns(cols.data(), n, geom),
    )
}

fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => dim_err(format!("expected [C, H, W] or [N, C, H, W], got {shape:?}")),
    }
}

impl Graph {
    /// Patch matrix of a `[C, H, W]` or `[N, C, H, W]` input.
    pub fn unfold(
        &mut self,
        input: Var,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<(Var, ConvGeometry)> {
        let (n, c, h, w) = image_dims(self.value(input).shape())?;
        let geom = ConvGeometry::new(c, h, w, kernel, stride, padding)?;
        let data = unfold_columns(self.value(input).data(), n, &geom);
        let out = Tensor::new(&[geom.patch_dim(), n * geom.positions()], data)?;
        let var = self.apply(&[input], out, move |g: &Tensor, inp: &[&Tensor], _: &Tensor| {
            let data = fold_columns(g.data(), n, &geom);
            vec![Some(Tensor::new(inp[0].shape(), data).expect("grad shape"))]
        });
        Ok((var, geom))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn unfold_t(x: &Tensor, k: (usize, usize), s: usize, p: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let (c, _) = g.unfold(v, k, s, p)?;
        Ok(g.value(c).clone())
    }

    #[test]
    fn whole_image_patch() {
        let x = Tensor::new(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let c = unfold_t(&x, (2, 2), 1, 0).unwrap();
        assert_eq!(c.shape(), &[4, 1]);
        assert_eq!(c.data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn ones_give_ones() {
        let c = unfold_t(&Tensor::ones(&[1, 3, 3]), (2, 2), 1, 0).unwrap();
        assert_eq!(c.shape(), &[4, 4]);
        assert!(c.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn padding_reads_zero() {
        let c = unfold_t(&Tensor::ones(&[1, 2, 2]), (3, 3), 1, 1).unwrap();
        assert_eq!(c.shape(), &[9, 4]);
        // top-left output position sees 4 real pixels
        let col0: Real = (0..9).map(|r| c.data()[r * 4]).sum();
        assert_eq!(col0, 4.0);
    }

    #[test]
    fn zero_stride_is_config_error() {
        let err = unfold_t(&Tensor::ones(&[1, 3, 3]), (2, 2), 0, 0).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
    }

    #[test]
    fn fold_unfold_with_overlap_counts_is_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for (k, s, p) in [((3, 3), 1, 0), ((2, 2), 1, 1), ((3, 2), 2, 1)] {
            let x = Tensor::randn(&[2, 5, 5], &mut rng);
            let geom = ConvGeometry::new(2, 5, 5, k, s, p).unwrap();
            let cols = unfold_t(&x, k, s, p).unwrap();
            let folded = fold(&cols, 1, &geom).unwrap();
            let counts = fold(&unfold_t(&Tensor::ones(&[2, 5, 5]), k, s, p).unwrap(), 1, &geom).unwrap();
            for i in 0..x.len() {
                if counts[i] > 0.0 {
                    assert!((folded[i] / counts[i] - x[i]).abs() <= 1e-12);
                }
            }
        }
    }
}
