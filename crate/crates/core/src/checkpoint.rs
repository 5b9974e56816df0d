//! Binary checkpoint container.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic "VNODECKP" | format version u32 | element width u8 (4 = f32, 8 = f64)
//! epoch u64 | seed u64
//! architecture: u64 length + UTF-8 TOML
//! normalization: u32 channel count (0 = absent), then f64 means, f64 stds
//! parameters: u32 count, each tensor
//! optimizer: u8 (0 absent, 1 adam, 2 sgd-momentum), u64 step, u32 count, each tensor
//! SHA-256 of everything above (32 bytes)
//!
//! tensor: u32 name length + UTF-8 name | u32 rank | u64 per extent | raw elements
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::model::{VnodeModel, VnodeModelConfig};
use crate::tensor::{Element, Tensor};
use crate::trainer::{OptimizerKind, OptimizerState};

pub const MAGIC: &[u8; 8] = b"VNODECKP";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST: usize = 32;

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Element> {
    pub model: VnodeModel<T>,
    pub optimizer: Option<(OptimizerKind, OptimizerState<T>)>,
    /// Completed training epochs.
    pub epoch: u64,
    pub seed: u64,
    pub normalization: Option<Normalization>,
}

fn put_tensor<T: Element>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode<T: Element>(ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(T::BYTES as u8);
    out.extend_from_slice(&ck.epoch.to_le_bytes());
    out.extend_from_slice(&ck.seed.to_le_bytes());
    let arch = ck.model.config.to_toml()?;
    out.extend_from_slice(&(arch.len() as u64).to_le_bytes());
    out.extend_from_slice(arch.as_bytes());
    match &ck.normalization {
        None => out.extend_from_slice(&0u32.to_le_bytes()),
        Some(n) => {
            out.extend_from_slice(&(n.mean.len() as u32).to_le_bytes());
            for v in n.mean.iter().chain(&n.std) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out.extend_from_slice(&(ck.model.params.len() as u32).to_le_bytes());
    for (info, p) in ck.model.param_infos().iter().zip(&ck.model.params) {
        put_tensor(&mut out, &info.name, p);
    }
    match &ck.optimizer {
        None => out.push(0),
        Some((kind, state)) => {
            out.push(match kind {
                OptimizerKind::Adam => 1,
                OptimizerKind::SgdMomentum => 2,
            });
            out.extend_from_slice(&state.step.to_le_bytes());
            out.extend_from_slice(&(state.slots.len() as u32).to_le_bytes());
            for (i, s) in state.slots.iter().enumerate() {
                put_tensor(&mut out, &format!("slot{i}"), s);
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt("unexpected end of data"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| corrupt("invalid UTF-8"))
    }

    fn tensor<T: Element>(&mut self, width: usize) -> Result<(String, Tensor<T>)> {
        let name_len = self.u32()? as usize;
        let name = self.string(name_len)?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| Ok(self.u64()? as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(width).ok_or_else(|| corrupt("tensor too large"))?)?;
        let data = raw
            .chunks_exact(width)
            .map(|c| match width {
                4 => T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
                _ => T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
            })
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| corrupt(format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
}

/// Parses a checkpoint. The checksum is verified before anything else is
/// read, so damaged files never load partially. Values stored at the other
/// precision are converted.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < MAGIC.len() + 4 + DIGEST || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic or too short)"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (file truncated or corrupted)"));
    }
    let mut r = Reader {
        bytes: body,
        at: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let width = r.u8()? as usize;
    if width != 4 && width != 8 {
        return Err(corrupt(format!("unknown element width {width}")));
    }
    let epoch = r.u64()?;
    let seed = r.u64()?;
    let arch_len = r.u64()? as usize;
    let config = VnodeModelConfig::from_toml(&r.string(arch_len)?)?;
    let channels = r.u32()? as usize;
    let normalization = if channels == 0 {
        None
    } else {
        let mean = (0..channels).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let std = (0..channels).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        Some(Normalization { mean, std })
    };
    let count = r.u32()? as usize;
    let infos = config.param_infos()?;
    if count != infos.len() {
        return Err(corrupt(format!(
            "{count} tensors stored, architecture needs {}",
            infos.len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for info in &infos {
        let (name, t) = r.tensor::<T>(width)?;
        if name != info.name {
            return Err(corrupt(format!("expected tensor {}, found {name}", info.name)));
        }
        params.push(t);
    }
    let model = VnodeModel::new(config, params).map_err(|e| corrupt(e.to_string()))?;
    let optimizer = match r.u8()? {
        0 => None,
        tag @ (1 | 2) => {
            let kind = if tag == 1 {
                OptimizerKind::Adam
            } else {
                OptimizerKind::SgdMomentum
            };
            let step = r.u64()?;
            let n = r.u32()? as usize;
            let slots = (0..n)
                .map(|_| Ok(r.tensor::<T>(width)?.1))
                .collect::<Result<Vec<_>>>()?;
            Some((kind, OptimizerState { step, slots }))
        }
        other => return Err(corrupt(format!("unknown optimizer tag {other}"))),
    };
    if r.at != body.len() {
        return Err(corrupt(format!("{} trailing bytes", body.len() - r.at)));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        epoch,
        seed,
        normalization,
    })
}

/// Element width recorded in a checkpoint file, without decoding it fully.
pub fn stored_width(bytes: &[u8]) -> Option<usize> {
    (bytes.len() > 12 && &bytes[..8] == MAGIC).then(|| bytes[12] as usize)
}

/// Writes via a temporary file and rename so readers never see partial files.
pub fn save<T: Element>(path: &Path, ck: &Checkpoint<T>) -> Result<()> {
    let bytes = encode(ck)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<T: Element>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
