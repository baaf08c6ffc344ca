//! CIFAR-10 binary batches: one label byte followed by 3072 pixel bytes
//! (1024 red, 1024 green, 1024 blue; row-major 32x32) per record.

use super::LabeledImageSet;
use crate::error::{parse_err, Result};
use crate::tensor::{Real, Tensor};
use std::path::Path;

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

pub fn parse_cifar_binary(bytes: &[u8]) -> Result<LabeledImageSet> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return parse_err(
            whole as u64,
            format!(
                "length {} is not a multiple of the {CIFAR_RECORD}-byte record ({} trailing bytes)",
                bytes.len(),
                bytes.len() - whole
            ),
        );
    }
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut labels = Vec::with_capacity(images.capacity());
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return parse_err((i * CIFAR_RECORD) as u64, format!("label byte {} exceeds 9", rec[0]));
        }
        labels.push(rec[0] as usize);
        let data = rec[1..].iter().map(|&b| b as Real / 255.0).collect();
        images.push(Tensor::new(&[3, 32, 32], data)?);
    }
    LabeledImageSet::new(images, labels, 10, "all")
}

pub fn load_cifar_binary(path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    parse_cifar_binary(&std::fs::read(path)?)
}

pub fn write_cifar_binary(set: &LabeledImageSet, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::with_capacity(set.len() * CIFAR_RECORD);
    for (im, &l) in set.images.iter().zip(&set.labels) {
        if im.shape() != [3, 32, 32] || l > 9 {
            return crate::error::dim_err(format!("record {:?} / label {l} does not fit CIFAR-10", im.shape()));
        }
        out.push(l as u8);
        out.extend(im.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    std::fs::write(path, out)?;
    Ok(())
}
