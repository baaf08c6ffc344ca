//! Binary model container. The byte layout is described in
//! `docs/model-format.md`.

use super::{CodaNet, EncodingKind, InputEncoding, LayerSpec, NetConfig};
use crate::error::{parse_err, Result};
use crate::tensor::{Param, Real, Tensor, PRECISION};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"CODANET\0";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

fn arch_text(net: &CodaNet) -> String {
    let c = &net.config;
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push('=');
        s.push_str(&v);
        s.push('\n');
    };
    kv("in_channels", c.in_channels.to_string());
    kv("height", c.height.to_string());
    kv("width", c.width.to_string());
    kv("classes", c.classes.to_string());
    kv("encoding", c.encoding.to_string());
    kv("embed_channels", c.embed_channels.to_string());
    kv("stem_depth", c.stem_depth.to_string());
    kv("stem_channels", c.stem_channels.to_string());
    kv("rescale", c.rescale.to_string());
    kv("shared_b", c.shared_b().to_string());
    kv("temperature", format!("{:?}", c.temperature));
    kv("layers", c.layers.len().to_string());
    for (i, l) in c.layers.iter().enumerate() {
        kv(
            &format!("layer.{i}"),
            format!("{},{},{},{},{}", l.kernel, l.stride, l.padding, l.rank, l.out_channels),
        );
    }
    if let InputEncoding::Embedding(e) = &net.encoding {
        kv("embedding.momentum", format!("{:?}", e.momentum));
        kv("embedding.initialized", e.initialized.to_string());
    }
    s
}

/// Parameters and statistics buffers with their stable names.
fn buffers(net: &CodaNet) -> Vec<(String, Tensor)> {
    let mut v = Vec::new();
    if let InputEncoding::Embedding(e) = &net.encoding {
        let k = e.channels();
        v.push(("embedding.conv.weight".into(), e.conv.weight.value.clone()));
        v.push(("embedding.conv.bias".into(), e.conv.bias.value.clone()));
        v.push(("embedding.gamma".into(), e.gamma.value.clone()));
        v.push(("embedding.beta".into(), e.beta.value.clone()));
        v.push(("embedding.running_mean".into(), vec_tensor(&e.running_mean, k)));
        v.push(("embedding.running_var".into(), vec_tensor(&e.running_var, k)));
    }
    if let Some(s) = &net.stem {
        for (i, b) in s.blocks.iter().enumerate() {
            v.push((format!("stem.{i}.weight"), b.weight.value.clone()));
            v.push((format!("stem.{i}.bias"), b.bias.value.clone()));
        }
    }
    for (i, l) in net.layers.iter().enumerate() {
        v.push((format!("layer.{i}.a"), l.bank.a().value.clone()));
        v.push((format!("layer.{i}.b"), l.bank.projection().param().value.clone()));
        if let Some(b) = l.bank.bias() {
            v.push((format!("layer.{i}.bias"), b.value.clone()));
        }
    }
    v
}

fn vec_tensor(v: &[Real], k: usize) -> Tensor {
    Tensor::new(&[k], v.to_vec()).expect("statistics length")
}

/// Mutable slots matching [`buffers`] by name.
fn slots(net: &mut CodaNet) -> Vec<(String, Slot<'_>)> {
    let mut v: Vec<(String, Slot<'_>)> = Vec::new();
    if let InputEncoding::Embedding(e) = &mut net.encoding {
        v.push(("embedding.conv.weight".into(), Slot::Param(&mut e.conv.weight)));
        v.push(("embedding.conv.bias".into(), Slot::Param(&mut e.conv.bias)));
        v.push(("embedding.gamma".into(), Slot::Param(&mut e.gamma)));
        v.push(("embedding.beta".into(), Slot::Param(&mut e.beta)));
        v.push(("embedding.running_mean".into(), Slot::Stats(&mut e.running_mean)));
        v.push(("embedding.running_var".into(), Slot::Stats(&mut e.running_var)));
    }
    if let Some(s) = &mut net.stem {
        for (i, b) in s.blocks.iter_mut().enumerate() {
            v.push((format!("stem.{i}.weight"), Slot::Param(&mut b.weight)));
            v.push((format!("stem.{i}.bias"), Slot::Param(&mut b.bias)));
        }
    }
    for (i, l) in net.layers.iter_mut().enumerate() {
        let mut ps = l.bank.params_mut().into_iter();
        v.push((format!("layer.{i}.a"), Slot::Param(ps.next().expect("A"))));
        v.push((format!("layer.{i}.b"), Slot::Param(ps.next().expect("B"))));
        if let Some(b) = ps.next() {
            v.push((format!("layer.{i}.bias"), Slot::Param(b)));
        }
    }
    v
}

enum Slot<'a> {
    Param(&'a mut Param),
    Stats(&'a mut Vec<Real>),
}

impl CodaNet {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let arch = arch_text(self);
        out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
        out.extend_from_slice(arch.as_bytes());
        let bufs = buffers(self);
        out.extend_from_slice(&(bufs.len() as u32).to_le_bytes());
        let dtype = if PRECISION == "f64" { DTYPE_F64 } else { DTYPE_F32 };
        for (name, t) in bufs {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(dtype);
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return parse_err(0, format!("bad magic {magic:?}"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return parse_err(8, format!("unsupported version {version} (expected {VERSION})"));
        }
        let arch_len = r.u32("architecture length")? as usize;
        let arch_at = r.pos as u64;
        let arch = std::str::from_utf8(r.take(arch_len, "architecture")?)
            .or_else(|e| parse_err(arch_at + e.valid_up_to() as u64, "architecture is not UTF-8"))?;
        let (config, momentum, initialized) = parse_arch(arch, arch_at)?;
        let mut net = CodaNet::new(config, 0).or_else(|e| parse_err(arch_at, format!("architecture rejected: {e}")))?;
        if let InputEncoding::Embedding(e) = &mut net.encoding {
            e.momentum = momentum.unwrap_or(e.momentum);
            e.initialized = initialized.unwrap_or(false);
        }
        let count = r.u32("buffer count")? as usize;
        let mut slots = slots(&mut net);
        if count != slots.len() {
            return parse_err(
                r.pos as u64 - 4,
                format!("architecture needs {} buffers, file has {count}", slots.len()),
            );
        }
        for (name, slot) in slots.iter_mut() {
            let at = r.pos as u64;
            let len = r.u16("buffer name length")? as usize;
            let got = std::str::from_utf8(r.take(len, "buffer name")?).unwrap_or("<invalid>").to_string();
            if &got != name {
                return parse_err(at, format!("expected buffer '{name}', found '{got}'"));
            }
            let rank = r.u8("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dimension")? as usize);
            }
            let dtype_at = r.pos as u64;
            let dtype = r.u8("dtype")?;
            let n: usize = dims.iter().product();
            let values: Vec<Real> = match dtype {
                DTYPE_F32 => r
                    .take(n * 4, "values")?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as Real)
                    .collect(),
                DTYPE_F64 => r
                    .take(n * 8, "values")?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as Real)
                    .collect(),
                other => return parse_err(dtype_at, format!("unknown dtype tag {other}")),
            };
            match slot {
                Slot::Param(p) => {
                    if p.value.shape() != &dims[..] {
                        return parse_err(
                            at,
                            format!("buffer '{name}' has shape {dims:?}, expected {:?}", p.value.shape()),
                        );
                    }
                    **p = Param::new(Tensor::new(&dims, values)?);
                }
                Slot::Stats(s) => {
                    if dims != [s.len()] {
                        return parse_err(at, format!("buffer '{name}' has shape {dims:?}, expected [{}]", s.len()));
                    }
                    **s = values;
                }
            }
        }
        drop(slots);
        if r.pos != bytes.len() {
            return parse_err(r.pos as u64, format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

type ArchParse = (NetConfig, Option<Real>, Option<bool>);

fn parse_arch(text: &str, base: u64) -> Result<ArchParse> {
    let mut map = std::collections::BTreeMap::new();
    let mut offset = base;
    for line in text.lines() {
        if !line.is_empty() {
            let Some((k, v)) = line.split_once('=') else {
                return parse_err(offset, format!("expected key=value, got '{line}'"));
            };
            map.insert(k.to_string(), (v.to_string(), offset));
        }
        offset += line.len() as u64 + 1;
    }
    let get = |k: &str| -> Result<(String, u64)> {
        match map.get(k) {
            Some(v) => Ok(v.clone()),
            None => parse_err(base, format!("architecture lacks '{k}'")),
        }
    };
    fn num<T: std::str::FromStr>(k: &str, (v, at): (String, u64)) -> Result<T> {
        v.parse().or_else(|_| parse_err(at, format!("bad value '{v}' for '{k}'")))
    }
    let layers: usize = num("layers", get("layers")?)?;
    let mut specs = Vec::with_capacity(layers);
    for i in 0..layers {
        let key = format!("layer.{i}");
        let (v, at) = get(&key)?;
        let parts: Vec<usize> = v
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .or_else(|_| parse_err(at, format!("bad layer spec '{v}'")))?;
        let [kernel, stride, padding, rank, out_channels] = parts[..] else {
            return parse_err(at, format!("layer spec '{v}' needs five fields"));
        };
        specs.push(LayerSpec {
            kernel,
            stride,
            padding,
            rank,
            out_channels,
        });
    }
    let (enc, at) = get("encoding")?;
    let encoding: EncodingKind = enc.parse().or_else(|_| parse_err(at, format!("bad encoding '{enc}'")))?;
    let (resc, at) = get("rescale")?;
    let rescale = resc.parse().or_else(|_| parse_err(at, format!("bad rescaler '{resc}'")))?;
    let config = NetConfig {
        in_channels: num("in_channels", get("in_channels")?)?,
        height: num("height", get("height")?)?,
        width: num("width", get("width")?)?,
        classes: num("classes", get("classes")?)?,
        encoding,
        embed_channels: num("embed_channels", get("embed_channels")?)?,
        stem_depth: num("stem_depth", get("stem_depth")?)?,
        stem_channels: num("stem_channels", get("stem_channels")?)?,
        layers: specs,
        rescale,
        shared_b: Some(num("shared_b", get("shared_b")?)?),
        temperature: num("temperature", get("temperature")?)?,
    };
    let momentum = map.get("embedding.momentum").map(|v| num("embedding.momentum", v.clone())).transpose()?;
    let initialized = map
        .get("embedding.initialized")
        .map(|v| num("embedding.initialized", v.clone()))
        .transpose()?;
    Ok((config, momentum, initialized))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let avail = self.bytes.len() - self.pos;
        if n > avail {
            return parse_err(
                self.pos as u64,
                format!("truncated {what}: expected {n} bytes, {avail} available"),
            );
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}
