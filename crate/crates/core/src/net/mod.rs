//! Convolutional CoDA networks: encodings, layers, optional piecewise-linear
//! stem, sum pooling and the temperature-scaled output.

mod conv;
mod encoding;
mod layer;
pub mod serialize;
mod stem;
pub mod train;

pub use conv::{Conv2d, ConvVars};
pub use encoding::{record_six_channel, six_channel, EmbeddingVars, InputEncoding, PatchEmbedding};
pub use layer::CodaConvLayer;
pub use stem::PiecewiseLinearStem;
pub use train::{train, EpochRecord, Optimizer, TrainConfig};

use crate::dau::{BankVars, RescaleKind, WeightMode};
use crate::error::{config_err, contract_err, dim_err, Result};
use crate::tensor::{Gradients, Graph, Param, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingKind {
    Six,
    Embed,
}

impl std::fmt::Display for EncodingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncodingKind::Six => "six",
            EncodingKind::Embed => "embed",
        })
    }
}

impl std::str::FromStr for EncodingKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "six" => Ok(EncodingKind::Six),
            "embed" => Ok(EncodingKind::Embed),
            _ => config_err(format!("unknown encoding '{s}' (expected six or embed)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub rank: usize,
    pub out_channels: usize,
}

/// Architecture of a [`CodaNet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub encoding: EncodingKind,
    pub embed_channels: usize,
    pub stem_depth: usize,
    pub stem_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub rescale: RescaleKind,
    /// `None` picks the rescaler's default (shared for L2/SQ, per-unit for WB).
    pub shared_b: Option<bool>,
    pub temperature: Real,
}

impl NetConfig {
    /// Three 3x3 CoDA layers, strides 2, 1, 1, rank 16, channels 32, 32, k.
    pub fn default_for(in_channels: usize, height: usize, width: usize, classes: usize, rescale: RescaleKind) -> Self {
        let layer = |stride, out| LayerSpec {
            kernel: 3,
            stride,
            padding: 0,
            rank: 16,
            out_channels: out,
        };
        Self {
            in_channels,
            height,
            width,
            classes,
            encoding: EncodingKind::Six,
            embed_channels: 32,
            stem_depth: 0,
            stem_channels: 32,
            layers: vec![layer(2, 32), layer(1, 32), layer(1, classes)],
            rescale,
            shared_b: None,
            temperature: 10.0,
        }
    }

    /// Replaces the stem and head: `stem_depth` conv+ReLU blocks followed by
    /// `coda_depth` CoDA layers (first with stride 2, last with `classes`
    /// channels).
    pub fn hybrid(mut self, stem_depth: usize, coda_depth: usize) -> Self {
        let width = self.layers.first().map_or(32, |l| l.out_channels.max(self.classes));
        let rank = self.layers.first().map_or(16, |l| l.rank);
        self.stem_depth = stem_depth;
        self.layers = (0..coda_depth)
            .map(|i| LayerSpec {
                kernel: 3,
                stride: if i == 0 { 2 } else { 1 },
                padding: 0,
                rank,
                out_channels: if i + 1 == coda_depth { self.classes } else { width },
            })
            .collect();
        self
    }

    pub fn shared_b(&self) -> bool {
        self.shared_b.unwrap_or(self.rescale != RescaleKind::Wb)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return config_err("a network needs at least two classes");
        }
        if self.layers.is_empty() {
            return config_err("a network needs at least one CoDA layer");
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return config_err(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.layers.last().map(|l| l.out_channels) != Some(self.classes) {
            return config_err("the last CoDA layer must have one channel per class");
        }
        if self.in_channels == 0 || self.height == 0 || self.width == 0 {
            return config_err("input extents must be positive");
        }
        for l in &self.layers {
            if l.kernel == 0 || l.stride == 0 || l.rank == 0 || l.out_channels == 0 {
                return config_err(format!("invalid layer {l:?}"));
            }
        }
        Ok(())
    }
}

/// Graph handles of every parameter of a [`CodaNet`].
#[derive(Clone, Debug)]
pub struct NetVars {
    pub embedding: Option<EmbeddingVars>,
    pub stem: Vec<ConvVars>,
    pub layers: Vec<BankVars>,
}

/// Values recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Inputs of the CoDA layers: `[N, C, H, W]` each.
    pub layer_inputs: Vec<Var>,
    /// Pooled class scores before temperature scaling, `[N, k]`.
    pub pooled: Var,
    pub logits: Var,
    /// Per-channel mean and variance of the embedding convolution.
    pub embedding_stats: Option<(Vec<Real>, Vec<Real>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodaNet {
    pub config: NetConfig,
    pub encoding: InputEncoding,
    pub stem: Option<PiecewiseLinearStem>,
    pub layers: Vec<CodaConvLayer>,
}

/// `sigma^-1(1 / k)`, the logit of the uniform prior.
pub fn prior_bias(classes: usize) -> Real {
    let p = 1.0 / classes as Real;
    (p / (1.0 - p)).ln()
}

impl CodaNet {
    pub fn new(mut config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        config.shared_b = Some(config.shared_b());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoding = match config.encoding {
            EncodingKind::Six => InputEncoding::SixChannel,
            EncodingKind::Embed => {
                InputEncoding::Embedding(PatchEmbedding::init(config.in_channels, config.embed_channels, &mut rng))
            }
        };
        let mut channels = encoding.out_channels(config.in_channels);
        let stem = (config.stem_depth > 0).then(|| {
            let s = PiecewiseLinearStem::init(channels, config.stem_channels, config.stem_depth, &mut rng);
            channels = config.stem_channels;
            s
        });
        let (mut h, mut w) = (config.height, config.width);
        let mut layers = Vec::with_capacity(config.layers.len());
        for spec in &config.layers {
            let layer = CodaConvLayer::init(
                channels,
                spec.out_channels,
                (spec.kernel, spec.kernel),
                spec.stride,
                spec.padding,
                spec.rank,
                config.rescale,
                config.shared_b(),
                &mut rng,
            )?;
            (h, w) = layer.output_size(h, w)?;
            channels = spec.out_channels;
            layers.push(layer);
        }
        Ok(Self {
            config,
            encoding,
            stem,
            layers,
        })
    }

    /// Pure CoDA head of `coda_depth` layers on a `stem_depth`-block stem.
    pub fn build_hybrid(stem_depth: usize, coda_depth: usize, config: NetConfig, seed: u64) -> Result<Self> {
        if coda_depth == 0 {
            return config_err("a hybrid needs at least one CoDA layer");
        }
        Self::new(config.hybrid(stem_depth, coda_depth), seed)
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn temperature(&self) -> Real {
        self.config.temperature
    }

    pub fn set_temperature(&mut self, t: Real) -> Result<()> {
        if !(t > 0.0) || !t.is_finite() {
            return config_err(format!("temperature must be positive, got {t}"));
        }
        self.config.temperature = t;
        Ok(())
    }

    pub fn output_bias(&self) -> Vec<Real> {
        vec![prior_bias(self.classes()); self.classes()]
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.config.in_channels, self.config.height, self.config.width]
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        if let InputEncoding::Embedding(e) = &self.encoding {
            v.extend(e.params());
        }
        if let Some(s) = &self.stem {
            v.extend(s.params());
        }
        for l in &self.layers {
            v.extend(l.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        if let InputEncoding::Embedding(e) = &mut self.encoding {
            v.extend(e.params_mut());
        }
        if let Some(s) = &mut self.stem {
            v.extend(s.params_mut());
        }
        for l in &mut self.layers {
            v.extend(l.params_mut());
        }
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> NetVars {
        NetVars {
            embedding: match &self.encoding {
                InputEncoding::Embedding(e) => Some(e.bind(g, trainable)),
                InputEncoding::SixChannel => None,
            },
            stem: self.stem.as_ref().map_or_else(Vec::new, |s| s.bind(g, trainable)),
            layers: self.layers.iter().map(|l| l.bind(g, trainable)).collect(),
        }
    }

    /// Adds recorded gradients into the parameter buffers.
    pub fn accumulate(&mut self, grads: &Gradients, vars: &NetVars) -> Result<()> {
        if let (InputEncoding::Embedding(e), Some(ev)) = (&mut self.encoding, vars.embedding) {
            e.conv.weight.accumulate(grads, ev.conv.weight)?;
            e.conv.bias.accumulate(grads, ev.conv.bias)?;
            e.gamma.accumulate(grads, ev.gamma)?;
            e.beta.accumulate(grads, ev.beta)?;
        }
        if let Some(s) = &mut self.stem {
            for (b, v) in s.blocks.iter_mut().zip(&vars.stem) {
                b.weight.accumulate(grads, v.weight)?;
                b.bias.accumulate(grads, v.bias)?;
            }
        }
        for (l, v) in self.layers.iter_mut().zip(&vars.layers) {
            l.bank.accumulate(grads, *v)?;
        }
        Ok(())
    }

    /// Checks a `[C, H, W]` or `[N, C, H, W]` batch and returns it as 4-d.
    /// The network is fully convolutional, so only the channel count is
    /// fixed; inputs larger than the training size (e.g. image grids) are
    /// accepted.
    pub fn check_images(&self, images: &Tensor) -> Result<Tensor> {
        let c = self.config.in_channels;
        match *images.shape() {
            [ic, h, w] if ic == c => images.reshape(&[1, c, h, w]),
            [n, ic, h, w] if ic == c => images.reshape(&[n, c, h, w]),
            ref s => dim_err(format!("network expects {c}-channel images [C, H, W] or [N, C, H, W], got {s:?}")),
        }
    }

    /// Model input `E(x)` of a batch: the encoded image (six-channel) or the
    /// standardised embedding.
    pub fn record_encoding(&self, g: &mut Graph, x: Var, vars: &NetVars) -> Result<(Var, Option<(Vec<Real>, Vec<Real>)>)> {
        match &self.encoding {
            InputEncoding::SixChannel => Ok((record_six_channel(g, x)?, None)),
            InputEncoding::Embedding(e) => {
                let ev = vars.embedding.expect("embedding vars bound");
                let (y, m, v) = e.record(g, x, ev)?;
                Ok((y, Some((m, v))))
            }
        }
    }

    /// Stem blocks `from..to` (piecewise linear).
    pub fn record_stem(&self, g: &mut Graph, x: Var, vars: &NetVars, from: usize, to: usize) -> Result<Var> {
        match &self.stem {
            Some(s) => s.record_range(g, x, &vars.stem, from, to),
            None => Ok(x),
        }
    }

    /// CoDA layers `from..` followed by pooling, temperature and `b0`.
    /// Returns the layer inputs, the pooled scores and the logits.
    pub fn record_head(
        &self,
        g: &mut Graph,
        mut x: Var,
        vars: &NetVars,
        from: usize,
        mode: WeightMode,
    ) -> Result<(Vec<Var>, Var, Var)> {
        let mut inputs = Vec::with_capacity(self.depth() - from);
        for (l, v) in self.layers.iter().zip(&vars.layers).skip(from) {
            inputs.push(x);
            x = l.record(g, x, *v, mode)?;
        }
        let n = g.value(x).shape()[0];
        let pooled = g.sum_trailing(x, 2)?;
        let scaled = g.scale(pooled, 1.0 / self.temperature());
        let b0 = g.constant(Tensor::full(&[n, self.classes()], prior_bias(self.classes())));
        let logits = g.add(scaled, b0)?;
        Ok((inputs, pooled, logits))
    }

    /// Full forward pass of a `[N, C, H, W]` batch already on the graph.
    pub fn record(&self, g: &mut Graph, x: Var, vars: &NetVars) -> Result<Trace> {
        let (e, stats) = self.record_encoding(g, x, vars)?;
        let k = self.stem.as_ref().map_or(0, |s| s.depth());
        let s = self.record_stem(g, e, vars, 0, k)?;
        let (layer_inputs, pooled, logits) = self.record_head(g, s, vars, 0, WeightMode::Dynamic)?;
        Ok(Trace {
            layer_inputs,
            pooled,
            logits,
            embedding_stats: stats,
        })
    }

    /// Initialises the embedding's running statistics from `images` if they
    /// are not yet set. No-op for the six-channel encoding.
    pub fn calibrate(&mut self, images: &[Tensor]) -> Result<()> {
        if let InputEncoding::Embedding(e) = &mut self.encoding {
            if !images.is_empty() {
                e.calibrate(&stack(images)?)?;
            }
        }
        Ok(())
    }

    /// Logits of a batch, `[N, k]`.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let x = self.check_images(images)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let vars = self.bind(&mut g, false);
        let t = self.record(&mut g, xv, &vars)?;
        Ok(g.value(t.logits).clone())
    }

    /// Logits computed in chunks of at most `chunk` images; chunks are
    /// evaluated in parallel and concatenated in order.
    pub fn logits_batched(&self, images: &[Tensor], chunk: usize) -> Result<Tensor> {
        use rayon::prelude::*;
        if images.is_empty() {
            return contract_err("no images to evaluate");
        }
        let chunk = chunk.max(1);
        let parts: Vec<Result<Tensor>> = images
            .par_chunks(chunk)
            .map(|c| self.logits(&stack(c)?))
            .collect();
        let mut data = Vec::with_capacity(images.len() * self.classes());
        for p in parts {
            data.extend(p?.into_data());
        }
        Tensor::new(&[images.len(), self.classes()], data)
    }

    /// Summed per-class binary cross-entropy, averaged over the batch.
    pub fn record_loss(&self, g: &mut Graph, logits: Var, targets: &Tensor) -> Result<Var> {
        check_one_hot(targets, self.classes())?;
        let n = targets.shape()[0];
        let s = g.bce_with_logits(logits, targets)?;
        Ok(g.scale(s, 1.0 / n as Real))
    }

    /// Loss of a batch against one-hot targets `[N, k]`.
    pub fn loss(&self, images: &Tensor, targets: &Tensor) -> Result<Real> {
        let x = self.check_images(images)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let vars = self.bind(&mut g, false);
        let t = self.record(&mut g, xv, &vars)?;
        let l = self.record_loss(&mut g, t.logits, targets)?;
        Ok(g.value(l).item())
    }
}

/// Stacks `[C, H, W]` images into `[N, C, H, W]`.
pub fn stack(images: &[Tensor]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return contract_err("cannot stack an empty list of images");
    };
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.len());
    for im in images {
        if im.shape() != &shape[..] {
            return dim_err(format!("image shape {:?} differs from {:?}", im.shape(), shape));
        }
        data.extend_from_slice(im.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(&full, data)
}

/// One-hot targets `[N, k]`.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len().max(1), classes]);
    if labels.is_empty() {
        return contract_err("no labels");
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return contract_err(format!("label {l} out of range for {classes} classes"));
        }
        t.set(&[i, l], 1.0);
    }
    Ok(t)
}

fn check_one_hot(targets: &Tensor, classes: usize) -> Result<()> {
    let (n, k) = targets.dims2()?;
    if k != classes || targets.shape().len() != 2 {
        return dim_err(format!("targets must be [N, {classes}], got {:?}", targets.shape()));
    }
    for i in 0..n {
        let row = targets.row(i);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != k - 1 {
            return contract_err(format!("target row {i} is not one-hot: {row:?}"));
        }
    }
    Ok(())
}
