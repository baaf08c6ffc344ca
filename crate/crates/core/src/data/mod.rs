//! Datasets: IDX and CIFAR-10 binary parsers, synthetic template noise,
//! confidence-ranked subsets and deterministic splits.

mod cifar;
mod idx;
mod synth;

pub use cifar::{load_cifar_binary, parse_cifar_binary, write_cifar_binary, CIFAR_RECORD};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, write_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synth::{make_noisy_templates, NoisyTemplateSet};

use crate::error::{contract_err, dim_err, Result};
use crate::net::CodaNet;
use crate::tensor::Tensor;

/// Images in `[0, 1]` with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
}

impl LabeledImageSet {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, classes: usize, split: impl Into<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return dim_err(format!("{} images but {} labels", images.len(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return contract_err(format!("label {bad} out of range for {classes} classes"));
        }
        if let Some(first) = images.first() {
            if let Some(im) = images.iter().find(|im| im.shape() != first.shape()) {
                return dim_err(format!("image shape {:?} differs from {:?}", im.shape(), first.shape()));
            }
        }
        Ok(Self {
            images,
            labels,
            classes,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `[C, H, W]` of the images.
    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(|t| t.shape())
    }

    /// Keeps only the listed classes, relabelled `0..classes.len()` in the
    /// given order.
    pub fn select_classes(&self, classes: &[usize]) -> Result<Self> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (im, &l) in self.images.iter().zip(&self.labels) {
            if let Some(pos) = classes.iter().position(|&c| c == l) {
                images.push(im.clone());
                labels.push(pos);
            }
        }
        Self::new(images, labels, classes.len(), self.split.clone())
    }

    /// At most `per_class` images of each class, in dataset order.
    pub fn take_per_class(&self, per_class: usize) -> Self {
        let mut counts = vec![0usize; self.classes];
        let mut out = self.clone();
        out.images.clear();
        out.labels.clear();
        for (im, &l) in self.images.iter().zip(&self.labels) {
            if counts[l] < per_class {
                counts[l] += 1;
                out.images.push(im.clone());
                out.labels.push(l);
            }
        }
        out
    }

    /// Partitions by a salted hash of the image index: an image goes to the
    /// second set when its hash falls below `fraction`.
    pub fn split(&self, fraction: f64, salt: u64) -> (Self, Self) {
        let mut a = self.clone();
        let mut b = self.clone();
        for s in [&mut a, &mut b] {
            s.images.clear();
            s.labels.clear();
        }
        a.split = "train".into();
        b.split = "test".into();
        for (i, (im, &l)) in self.images.iter().zip(&self.labels).enumerate() {
            let target = if unit_hash(i as u64, salt) < fraction { &mut b } else { &mut a };
            target.images.push(im.clone());
            target.labels.push(l);
        }
        (a, b)
    }

    /// Per class, the `per_class` images with the highest logit for their
    /// own class (descending; ties by index). Classes with fewer images are
    /// taken whole, with a warning.
    pub fn subset_by_confidence(&self, net: &CodaNet, per_class: usize) -> Result<Self> {
        if self.is_empty() {
            return contract_err("cannot rank an empty set");
        }
        let logits = net.logits_batched(&self.images, 64)?;
        let mut out = self.clone();
        out.images.clear();
        out.labels.clear();
        for c in 0..self.classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            if idx.len() < per_class {
                log::warn!("class {c} has only {} images (asked for {per_class})", idx.len());
            }
            idx.sort_by(|&i, &j| logits.at(&[j, c]).total_cmp(&logits.at(&[i, c])).then(i.cmp(&j)));
            for &i in idx.iter().take(per_class) {
                out.images.push(self.images[i].clone());
                out.labels.push(c);
            }
        }
        Ok(out)
    }
}

/// Uniform value in `[0, 1)` from a splitmix64 hash of `index ^ salt`.
pub fn unit_hash(index: u64, salt: u64) -> f64 {
    let mut z = (index ^ salt).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}
