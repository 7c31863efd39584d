//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "SDCN1"  u32 version  u32 len  config JSON
//! u32 entries
//! per entry: u32 len  name  u8 trainable  u32 rank  u64 dims[rank]  f64 values[..]
//! ```
//!
//! Entries are written in lexicographic name order, so equal models give equal bytes.

use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"SDCN1";
pub const VERSION: u32 = 1;

pub fn to_bytes(config: &ExperimentConfig, params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(config).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.requires_grad() as u8);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {} (need {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ExperimentConfig, ParamStore)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not an SDCN1 checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let config: ExperimentConfig =
        serde_json::from_slice(r.take(n)?).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let entries = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..entries {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let trainable = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Checkpoint(format!("bad flag {b} for {name}"))),
        };
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|l| l.checked_mul(8).is_some())
            .ok_or_else(|| Error::Checkpoint(format!("shape of {name} overflows")))?;
        let data = r
            .take(len * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        let res = if trainable {
            params.insert_param(&name, t)
        } else {
            params.insert_buffer(&name, t)
        };
        res.map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((config, params))
}

pub fn save(path: &Path, config: &ExperimentConfig, params: &ParamStore) -> Result<()> {
    std::fs::write(path, to_bytes(config, params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ExperimentConfig, ParamStore)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Replaces `target`'s values with `source`'s after checking that both hold the same
/// names, shapes and trainability.
pub fn restore_into(target: &mut ParamStore, source: ParamStore) -> Result<()> {
    let same = target.len() == source.len()
        && target
            .iter()
            .zip(source.iter())
            .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape() && ta.requires_grad() == tb.requires_grad());
    if !same {
        return Err(Error::Checkpoint(
            "checkpoint parameters do not match the configured architecture".into(),
        ));
    }
    *target = source;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Method;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert_param(
            "fc.weight",
            Tensor::new(&[2, 2], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]).unwrap(),
        )
        .unwrap();
        s.insert_buffer("bn.running_var", Tensor::ones(&[3])).unwrap();
        s
    }

    #[test]
    fn round_trip() {
        let cfg = ExperimentConfig::desk(Method::Sdc, Some(0.25));
        let bytes = to_bytes(&cfg, &store());
        assert_eq!(&bytes[..5], b"SDCN1");
        let (c2, s2) = from_bytes(&bytes).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(s2, store());
        assert_eq!(to_bytes(&c2, &s2), bytes);
    }

    #[test]
    fn corrupt_inputs() {
        let cfg = ExperimentConfig::desk(Method::Bbb, None);
        let bytes = to_bytes(&cfg, &store());
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        let err = from_bytes(&extra).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn restore_checks_layout() {
        let mut target = store();
        let mut other = ParamStore::new();
        other.insert_param("fc.weight", Tensor::zeros(&[4])).unwrap();
        other.insert_buffer("bn.running_var", Tensor::ones(&[3])).unwrap();
        assert!(restore_into(&mut target, other).is_err());
        assert!(restore_into(&mut target, store()).is_ok());
    }
}
