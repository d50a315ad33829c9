//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TOSU"  u32 version  u32 count
//! count × { u16 name_len  name (UTF-8)  u8 rank  rank × u32 extent  f64 payload }
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{MomentumSgd, Params};
use crate::tensor::Tensor;
use crate::trainer::Models;

pub const MAGIC: &[u8; 4] = b"TOSU";
pub const VERSION: u32 = 1;

pub type Named = Vec<(String, Tensor)>;

pub fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let payload: usize = tensors
        .iter()
        .map(|(n, t)| 3 + n.len() + 4 * t.rank() + 8 * t.len())
        .sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| Error::format("too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::format(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank =
            u8::try_from(t.rank()).map_err(|_| Error::format(format!("rank too large: {name}")))?;
        out.push(rank);
        for &e in t.shape() {
            let e =
                u32::try_from(e).map_err(|_| Error::format(format!("extent too large: {name}")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::format(format!("checkpoint truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a whole container; any defect rejects the file as a unit.
pub fn decode(bytes: &[u8]) -> Result<Named> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::format(format!("tensor {name}: extents overflow")))?;
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let t =
            Tensor::new(&shape, data).map_err(|e| Error::format(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    if r.at != bytes.len() {
        return Err(Error::format(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.at
        )));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode(tensors)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Named> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn push_params(out: &mut Named, prefix: &str, p: &Params) {
    out.extend(p.iter().map(|(n, t)| (format!("{prefix}{n}"), t.clone())));
}

fn push_velocity(out: &mut Named, prefix: &str, names: &[String], opt: &MomentumSgd) {
    for (n, v) in names.iter().zip(opt.velocity()) {
        out.push((format!("{prefix}{n}"), v.clone()));
    }
}

fn aug_names(models: &Models) -> Vec<String> {
    let a = &models.augmenter;
    a.color
        .params
        .iter()
        .chain(a.geo.params.iter())
        .map(|(n, _)| n.to_string())
        .collect()
}

/// Every parameter of the three networks, plus optimizer velocities when given.
pub fn snapshot(models: &Models, opts: Option<(&MomentumSgd, &MomentumSgd)>) -> Named {
    let mut out = Named::new();
    push_params(&mut out, "", &models.classifier.params);
    push_params(&mut out, "aug.", &models.augmenter.color.params);
    push_params(&mut out, "aug.", &models.augmenter.geo.params);
    push_params(&mut out, "", models.extractor.params());
    if let Some((cls, aug)) = opts {
        let cls_names: Vec<String> = models
            .classifier
            .params
            .iter()
            .map(|(n, _)| n.to_string())
            .collect();
        push_velocity(&mut out, "opt.", &cls_names, cls);
        push_velocity(&mut out, "opt.aug.", &aug_names(models), aug);
    }
    out
}

fn strip(named: &[(String, Tensor)], prefix: &str) -> Named {
    named
        .iter()
        .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
        .collect()
}

/// Overwrites `models` from a snapshot. Every network must be present with
/// matching names and shapes; nothing is modified on failure.
pub fn restore(models: &mut Models, named: &[(String, Tensor)]) -> Result<()> {
    let mut next = models.clone();
    next.classifier.params.load_from(named)?;
    let aug = strip(named, "aug.");
    next.augmenter.color.params.load_from(&aug)?;
    next.augmenter.geo.params.load_from(&aug)?;
    next.extractor.load(named)?;
    *models = next;
    Ok(())
}

/// Restores optimizer velocities saved by [`snapshot`].
pub fn restore_optimizers(
    models: &Models,
    named: &[(String, Tensor)],
    cls: &mut MomentumSgd,
    aug: &mut MomentumSgd,
) -> Result<()> {
    let zeros_like = |p: &mut dyn Iterator<Item = (&str, &Tensor)>| {
        let mut out = Params::new();
        for (n, t) in p {
            out.push(n, Tensor::zeros(t.shape()));
        }
        out
    };
    let opt = strip(named, "opt.");
    let mut vc = zeros_like(&mut models.classifier.params.iter());
    vc.load_from(&opt)?;
    let a = &models.augmenter;
    let mut va = zeros_like(&mut a.color.params.iter().chain(a.geo.params.iter()));
    va.load_from(&strip(&opt, "aug."))?;
    for (dst, src) in cls.velocity_mut().iter_mut().zip(vc.tensors()) {
        *dst = src.clone();
    }
    for (dst, src) in aug.velocity_mut().iter_mut().zip(va.tensors()) {
        *dst = src.clone();
    }
    Ok(())
}
