//! IDX containers: big-endian magic and dimensions, then raw unsigned bytes.

use super::LabeledImageSet;
use crate::error::{parse_err, Result};
use crate::tensor::{Real, Tensor};
use std::io::{Read, Write};
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads a file, transparently inflating gzip content.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn header(bytes: &[u8], expected_dims: &[usize]) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 {
        return parse_err(bytes.len() as u64, format!("truncated magic: {} of 4 bytes", bytes.len()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return parse_err(0, format!("bad magic {:02x?}", &bytes[..4]));
    }
    if bytes[2] != 0x08 {
        return parse_err(2, format!("unsupported element type 0x{:02x} (only unsigned bytes)", bytes[2]));
    }
    let ndim = bytes[3] as usize;
    if !expected_dims.contains(&ndim) {
        return parse_err(3, format!("expected {expected_dims:?} dimensions, found {ndim}"));
    }
    let end = 4 + 4 * ndim;
    if bytes.len() < end {
        return parse_err(
            bytes.len() as u64,
            format!("truncated header: expected {end} bytes, found {}", bytes.len()),
        );
    }
    let dims: Vec<usize> = bytes[4..end]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let body: usize = dims.iter().product();
    if bytes.len() != end + body {
        return parse_err(
            bytes.len().min(end + body) as u64,
            format!(
                "payload length mismatch: expected {} bytes in total, found {}",
                end + body,
                bytes.len()
            ),
        );
    }
    Ok((dims, end))
}

/// `[N, H, W]` or `[N, C, H, W]` image bytes scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let (dims, start) = header(bytes, &[3, 4])?;
    let (n, shape) = match dims[..] {
        [n, h, w] => (n, vec![1, h, w]),
        [n, c, h, w] => (n, vec![c, h, w]),
        _ => unreachable!("checked by header"),
    };
    let len: usize = shape.iter().product();
    let body = &bytes[start..];
    (0..n)
        .map(|i| {
            let data = body[i * len..(i + 1) * len].iter().map(|&b| b as Real / 255.0).collect();
            Tensor::new(&shape, data)
        })
        .collect()
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (_, start) = header(bytes, &[1])?;
    Ok(bytes[start..].iter().map(|&b| b as usize).collect())
}

/// Loads an image file and a label file (either may be gzipped).
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<LabeledImageSet> {
    let imgs = parse_idx_images(&read_maybe_gz(images.as_ref())?)?;
    let labs = parse_idx_labels(&read_maybe_gz(labels.as_ref())?)?;
    if imgs.len() != labs.len() {
        return parse_err(4, format!("{} images but {} labels", imgs.len(), labs.len()));
    }
    let classes = labs.iter().max().map_or(0, |&m| m + 1);
    LabeledImageSet::new(imgs, labs, classes, "all")
}

fn to_byte(v: Real) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes the set as an uncompressed IDX pair. Single-channel images are
/// stored with three dimensions, others with four.
pub fn write_idx(set: &LabeledImageSet, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let shape = set.image_shape().map_or(vec![1, 1, 1], |s| s.to_vec());
    let mut dims = vec![set.len()];
    if shape[0] == 1 {
        dims.extend(&shape[1..]);
    } else {
        dims.extend(&shape);
    }
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for d in &dims {
        out.extend_from_slice(&(*d as u32).to_be_bytes());
    }
    for im in &set.images {
        out.extend(im.data().iter().map(|&v| to_byte(v)));
    }
    std::fs::File::create(images)?.write_all(&out)?;

    let mut out = vec![0, 0, 0x08, 1];
    out.extend_from_slice(&(set.len() as u32).to_be_bytes());
    out.extend(set.labels.iter().map(|&l| l as u8));
    std::fs::File::create(labels)?.write_all(&out)?;
    Ok(())
}
