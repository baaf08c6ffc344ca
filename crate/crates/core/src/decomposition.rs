//! Exact linear decompositions of CoDA network outputs and the baseline
//! attributions they are compared against.
//!
//! The dynamic weights of every CoDA layer are held fixed while a one-hot
//! seed on the pooled class score is propagated back to the activation at the
//! requested depth. The resulting row, multiplied element-wise with that
//! activation, sums (after temperature scaling and the output bias) to the
//! class logit.

use crate::dau::{DauBank, WeightMode};
use crate::error::{contract_err, dim_err, Result};
use crate::net::{CodaNet, InputEncoding};
use crate::tensor::{Graph, Real, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

/// Linear decomposition of one class logit at one depth.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearDecomposition {
    pub class_index: usize,
    /// Index of the CoDA layer whose input is decomposed.
    pub depth: usize,
    /// Row of the effective linear map, shaped like the activation `[C, H, W]`.
    pub weight_row: Tensor,
    pub contributions: Tensor,
    pub bias_part: Real,
    pub temperature: Real,
    /// The logit of the ordinary forward pass.
    pub logit: Real,
}

impl LinearDecomposition {
    pub fn contribution_sum(&self) -> Real {
        self.contributions.sum()
    }

    /// `T^-1 sum(contributions) + b0`.
    pub fn reconstructed_logit(&self) -> Real {
        self.contribution_sum() / self.temperature + self.bias_part
    }

    /// Relative deviation of the reconstruction from the logit.
    pub fn relative_error(&self) -> Real {
        let r = self.reconstructed_logit();
        (r - self.logit).abs() / self.logit.abs().max(Real::MIN_POSITIVE)
    }

    pub fn spatial(&self) -> Result<SpatialContributionMap> {
        SpatialContributionMap::from_channels(&self.contributions)
    }
}

/// Signed contribution per spatial position, summed over channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialContributionMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<Real>,
}

impl SpatialContributionMap {
    pub fn new(height: usize, width: usize, values: Vec<Real>) -> Result<Self> {
        if values.len() != height * width {
            return dim_err(format!("{} values for a {height}x{width} map", values.len()));
        }
        Ok(Self { height, width, values })
    }

    /// Channel sum of a `[C, H, W]` tensor.
    pub fn from_channels(t: &Tensor) -> Result<Self> {
        let [c, h, w] = t.shape()[..] else {
            return dim_err(format!("expected [C, H, W], got {:?}", t.shape()));
        };
        let mut values = vec![0.0; h * w];
        for ch in 0..c {
            for (v, &x) in values.iter_mut().zip(&t.data()[ch * h * w..(ch + 1) * h * w]) {
                *v += x;
            }
        }
        Self::new(h, w, values)
    }

    pub fn sum(&self) -> Real {
        self.values.iter().sum()
    }

    pub fn at(&self, y: usize, x: usize) -> Real {
        self.values[y * self.width + x]
    }

    pub fn max_abs(&self) -> Real {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// 8-bit RGB pixels: white at zero, red for positive, blue for negative,
    /// scaled symmetrically by the largest magnitude.
    pub fn to_rgb(&self) -> Vec<[u8; 3]> {
        let m = self.max_abs();
        self.values
            .iter()
            .map(|&v| {
                let a = if m > 0.0 { (v / m).clamp(-1.0, 1.0) } else { 0.0 };
                let fade = (255.0 * (1.0 - a.abs())).round() as u8;
                if a >= 0.0 {
                    [255, fade, fade]
                } else {
                    [fade, fade, 255]
                }
            })
            .collect()
    }

    /// Binary PPM (P6), each position drawn as a `scale x scale` block.
    pub fn write_ppm(&self, path: impl AsRef<Path>, scale: usize) -> Result<()> {
        write_ppm(path, self.width, self.height, &self.to_rgb(), scale)
    }

    /// CSV with one `index,value` row per position (row-major).
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_values_csv(path, &self.values)
    }
}

/// Writes `index,value` rows for a flattened array.
pub fn write_values_csv(path: impl AsRef<Path>, values: &[Real]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "index,value")?;
    for (i, v) in values.iter().enumerate() {
        writeln!(f, "{i},{v:e}")?;
    }
    f.flush()?;
    Ok(())
}

/// Binary PPM from row-major RGB pixels.
pub fn write_ppm(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[[u8; 3]], scale: usize) -> Result<()> {
    if rgb.len() != width * height {
        return dim_err(format!("{} pixels for a {width}x{height} image", rgb.len()));
    }
    let s = scale.max(1);
    let mut out = format!("P6\n{} {}\n255\n", width * s, height * s).into_bytes();
    for y in 0..height * s {
        for x in 0..width * s {
            out.extend_from_slice(&rgb[(y / s) * width + x / s]);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Grayscale/RGB rendering of a `[C, H, W]` image in `[0, 1]` (first three
/// channels, or the single channel repeated).
pub fn image_to_rgb(image: &Tensor) -> Result<Vec<[u8; 3]>> {
    let [c, h, w] = image.shape()[..] else {
        return dim_err(format!("expected [C, H, W], got {:?}", image.shape()));
    };
    let px = |ch: usize, i: usize| (image.data()[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok((0..h * w)
        .map(|i| {
            if c >= 3 {
                [px(0, i), px(1, i), px(2, i)]
            } else {
                let v = px(0, i);
                [v, v, v]
            }
        })
        .collect())
}

fn check_class(net: &CodaNet, class: usize) -> Result<()> {
    if class >= net.classes() {
        return contract_err(format!("class {class} out of range for {} classes", net.classes()));
    }
    Ok(())
}

fn one_hot_seed(classes: usize, class: usize) -> Tensor {
    let mut seed = Tensor::zeros(&[1, classes]);
    seed.set(&[0, class], 1.0);
    seed
}

fn squeeze(t: &Tensor) -> Result<Tensor> {
    t.reshape(&t.shape()[1..])
}

/// Activation at the input of CoDA layer `depth` for one image, `[1, C, H, W]`.
pub fn activation_at(net: &CodaNet, image: &Tensor, depth: usize) -> Result<Tensor> {
    if depth >= net.depth() {
        return contract_err(format!("depth {depth} out of range for {} CoDA layers", net.depth()));
    }
    let x = net.check_images(image)?;
    let mut g = Graph::new();
    let xv = g.constant(x);
    let vars = net.bind(&mut g, false);
    let t = net.record(&mut g, xv, &vars)?;
    Ok(g.value(t.layer_inputs[depth]).clone())
}

/// Model input `E(x)` of one image, `[1, C, H, W]`.
pub fn model_input(net: &CodaNet, image: &Tensor) -> Result<Tensor> {
    let x = net.check_images(image)?;
    let mut g = Graph::new();
    let xv = g.constant(x);
    let vars = net.bind(&mut g, false);
    let (e, _) = net.record_encoding(&mut g, xv, &vars)?;
    Ok(g.value(e).clone())
}

fn logit_of(net: &CodaNet, image: &Tensor, class: usize) -> Result<Real> {
    Ok(net.logits(image)?.at(&[0, class]))
}

/// Effective row `[W_{t -> L}]_j` and contributions at CoDA depth `depth`.
pub fn effective_row(net: &CodaNet, image: &Tensor, class: usize, depth: usize) -> Result<LinearDecomposition> {
    check_class(net, class)?;
    let a = activation_at(net, image, depth)?;
    let mut g = Graph::new();
    let av = g.leaf(a.clone());
    let vars = net.bind(&mut g, false);
    let (_, pooled, _) = net.record_head(&mut g, av, &vars, depth, WeightMode::Frozen)?;
    let grads = g.backward_with_seed(pooled, one_hot_seed(net.classes(), class))?;
    let row = grads.get(av).cloned().unwrap_or_else(|| Tensor::zeros(a.shape()));
    let contributions = row.zip_map(&a, |w, x| w * x)?;
    Ok(LinearDecomposition {
        class_index: class,
        depth,
        weight_row: squeeze(&row)?,
        contributions: squeeze(&contributions)?,
        bias_part: crate::net::prior_bias(net.classes()),
        temperature: net.temperature(),
        logit: logit_of(net, image, class)?,
    })
}

/// Input x Gradient at the input of stem block `block` (`0..=K`), with the
/// CoDA weights held fixed. At `block == K` this is the exact decomposition
/// at depth 0; inside the stem the biases of the remaining blocks are not
/// attributed.
pub fn stem_input_x_gradient(net: &CodaNet, image: &Tensor, class: usize, block: usize) -> Result<LinearDecomposition> {
    check_class(net, class)?;
    let k = net.stem.as_ref().map_or(0, |s| s.depth());
    if block > k {
        return contract_err(format!("stem block {block} out of range for a {k}-block stem"));
    }
    let x = net.check_images(image)?;
    let a = {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let vars = net.bind(&mut g, false);
        let (e, _) = net.record_encoding(&mut g, xv, &vars)?;
        let s = net.record_stem(&mut g, e, &vars, 0, block)?;
        g.value(s).clone()
    };
    let mut g = Graph::new();
    let av = g.leaf(a.clone());
    let vars = net.bind(&mut g, false);
    let s = net.record_stem(&mut g, av, &vars, block, k)?;
    let (_, pooled, _) = net.record_head(&mut g, s, &vars, 0, WeightMode::Frozen)?;
    let grads = g.backward_with_seed(pooled, one_hot_seed(net.classes(), class))?;
    let row = grads.get(av).cloned().unwrap_or_else(|| Tensor::zeros(a.shape()));
    let contributions = row.zip_map(&a, |w, x| w * x)?;
    Ok(LinearDecomposition {
        class_index: class,
        depth: 0,
        weight_row: squeeze(&row)?,
        contributions: squeeze(&contributions)?,
        bias_part: crate::net::prior_bias(net.classes()),
        temperature: net.temperature(),
        logit: logit_of(net, image, class)?,
    })
}

/// Contributions of a single bank output: `w_j(x) * x`.
pub fn single_layer_contrib(bank: &DauBank, x: &[Real], class: usize) -> Result<Vec<Real>> {
    if class >= bank.units() {
        return contract_err(format!("unit {class} out of range for {} units", bank.units()));
    }
    let w = bank.weight_matrix(x)?;
    Ok(w.row(class).iter().zip(x).map(|(a, b)| a * b).collect())
}

/// Contributions at depth 0 mapped to the pixel grid. Only defined for the
/// complement encoding, whose channels are pixel-aligned; for learnt
/// embeddings the split across pixels is not determined by the model.
pub fn pixel_contributions(net: &CodaNet, image: &Tensor, class: usize) -> Result<SpatialContributionMap> {
    if let InputEncoding::Embedding(_) = net.encoding {
        return contract_err("pixel-space contributions are undefined for learnt embeddings; use embedding space");
    }
    if net.stem.is_some() {
        return contract_err("depth-0 contributions of a hybrid live at the stem output; use stem_input_x_gradient");
    }
    effective_row(net, image, class, 0)?.spatial()
}

/// Attribution methods compared by the evaluation harness. All operate in
/// model-input space (after encoding) and are channel-summed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttributionMethod {
    /// The model's own contributions at depth 0 (exact for pure CoDA nets;
    /// frozen-weight Input x Gradient at the encoding for hybrids).
    Inherent,
    Grad,
    InputXGradient,
    Occlusion { size: usize, stride: usize },
    /// Uniform positive noise, for calibration.
    Random { seed: u64 },
}

impl AttributionMethod {
    pub fn label(&self) -> String {
        match self {
            AttributionMethod::Inherent => "inherent".into(),
            AttributionMethod::Grad => "grad".into(),
            AttributionMethod::InputXGradient => "ixg".into(),
            AttributionMethod::Occlusion { size, .. } => format!("occ{size}"),
            AttributionMethod::Random { .. } => "random".into(),
        }
    }
}

impl std::str::FromStr for AttributionMethod {
    type Err = crate::Error;
    /// `inherent`, `grad`, `ixg`, `random`, `occK` (stride 1) or `occK:S`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        match s.as_str() {
            "inherent" | "coda" => return Ok(AttributionMethod::Inherent),
            "grad" => return Ok(AttributionMethod::Grad),
            "ixg" => return Ok(AttributionMethod::InputXGradient),
            "random" => return Ok(AttributionMethod::Random { seed: 0 }),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("occ") {
            let (k, st) = rest.split_once(':').unwrap_or((rest, "1"));
            if let (Ok(size), Ok(stride)) = (k.parse::<usize>(), st.parse::<usize>()) {
                if size >= 1 && stride >= 1 {
                    return Ok(AttributionMethod::Occlusion { size, stride });
                }
            }
        }
        crate::error::config_err(format!("unknown attribution method '{s}'"))
    }
}

/// Gradient of logit `class` w.r.t. the model input, with dynamic weights.
fn input_gradient(net: &CodaNet, e: &Tensor, class: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let ev = g.leaf(e.clone());
    let vars = net.bind(&mut g, false);
    let k = net.stem.as_ref().map_or(0, |s| s.depth());
    let s = net.record_stem(&mut g, ev, &vars, 0, k)?;
    let (_, _, logits) = net.record_head(&mut g, s, &vars, 0, WeightMode::Dynamic)?;
    let grads = g.backward_with_seed(logits, one_hot_seed(net.classes(), class))?;
    Ok(grads.get(ev).cloned().unwrap_or_else(|| Tensor::zeros(e.shape())))
}

/// Logits for a batch of model inputs `[N, C, H, W]` (encoding already applied).
pub fn logits_from_input(net: &CodaNet, e: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let ev: Var = g.constant(e.clone());
    let vars = net.bind(&mut g, false);
    let k = net.stem.as_ref().map_or(0, |s| s.depth());
    let s = net.record_stem(&mut g, ev, &vars, 0, k)?;
    let (_, _, logits) = net.record_head(&mut g, s, &vars, 0, WeightMode::Dynamic)?;
    Ok(g.value(logits).clone())
}

/// Logit drop when each `size x size` window (all channels) is zeroed,
/// averaged over the windows covering each position.
fn occlusion(net: &CodaNet, e: &Tensor, class: usize, size: usize, stride: usize) -> Result<SpatialContributionMap> {
    let [_, c, h, w] = e.shape()[..] else {
        return dim_err("model input must be [1, C, H, W]");
    };
    let base = logits_from_input(net, e)?.at(&[0, class]);
    let ys: Vec<usize> = (0..h.saturating_sub(size) + 1).step_by(stride).collect();
    let xs: Vec<usize> = (0..w.saturating_sub(size) + 1).step_by(stride).collect();
    let windows: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
    let mut sum = vec![0.0; h * w];
    let mut count = vec![0usize; h * w];
    for chunk in windows.chunks(32) {
        let mut batch = Vec::with_capacity(chunk.len() * e.len());
        for &(y0, x0) in chunk {
            let mut d = e.data().to_vec();
            for ch in 0..c {
                for y in y0..(y0 + size).min(h) {
                    for x in x0..(x0 + size).min(w) {
                        d[ch * h * w + y * w + x] = 0.0;
                    }
                }
            }
            batch.extend(d);
        }
        let logits = logits_from_input(net, &Tensor::new(&[chunk.len(), c, h, w], batch)?)?;
        for (i, &(y0, x0)) in chunk.iter().enumerate() {
            let drop = base - logits.at(&[i, class]);
            for y in y0..(y0 + size).min(h) {
                for x in x0..(x0 + size).min(w) {
                    sum[y * w + x] += drop;
                    count[y * w + x] += 1;
                }
            }
        }
    }
    let values = sum
        .iter()
        .zip(&count)
        .map(|(&s, &n)| if n > 0 { s / n as Real } else { 0.0 })
        .collect();
    SpatialContributionMap::new(h, w, values)
}

/// Attribution map for `class` on one image.
pub fn attribute(net: &CodaNet, image: &Tensor, class: usize, method: AttributionMethod) -> Result<SpatialContributionMap> {
    check_class(net, class)?;
    match method {
        AttributionMethod::Inherent => {
            if net.stem.is_some() {
                stem_input_x_gradient(net, image, class, 0)?.spatial()
            } else {
                effective_row(net, image, class, 0)?.spatial()
            }
        }
        AttributionMethod::Grad => {
            let e = model_input(net, image)?;
            SpatialContributionMap::from_channels(&squeeze(&input_gradient(net, &e, class)?)?)
        }
        AttributionMethod::InputXGradient => {
            let e = model_input(net, image)?;
            let g = input_gradient(net, &e, class)?;
            SpatialContributionMap::from_channels(&squeeze(&g.zip_map(&e, |a, b| a * b)?)?)
        }
        AttributionMethod::Occlusion { size, stride } => {
            if size == 0 || stride == 0 {
                return crate::error::config_err("occlusion size and stride must be at least 1");
            }
            occlusion(net, &model_input(net, image)?, class, size, stride)
        }
        AttributionMethod::Random { seed } => {
            let e = model_input(net, image)?;
            let (h, w) = (e.shape()[2], e.shape()[3]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class as u64).wrapping_mul(0x9E37_79B9));
            SpatialContributionMap::new(h, w, (0..h * w).map(|_| rng.gen::<Real>()).collect())
        }
    }
}
