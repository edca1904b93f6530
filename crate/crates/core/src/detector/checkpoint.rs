//! Binary checkpoint format.
//!
//! ```text
//! magic     8 bytes  "WSTTADET"
//! version   u32      1
//! meta_len  u32      length of the JSON header
//! meta      bytes    {"config": DetectorConfig, "categories": [...]}
//! count     u32      number of tensors
//! tensor*   name_len u16, name (UTF-8), dtype u8 (1 = f64), rank u8,
//!           dims u32 × rank, values f64 little-endian × product(dims)
//! ```
//!
//! All integers are little-endian. Every model slot must appear exactly once.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DetectorConfig, DetectorModel, Slot};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"WSTTADET";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: DetectorConfig,
    categories: Vec<String>,
}

pub fn to_bytes(model: &DetectorModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&Meta {
        config: model.config.clone(),
        categories: model.categories.clone(),
    })
    .expect("metadata serializes");
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    let slots = model.slots();
    out.extend_from_slice(&(slots.len() as u32).to_le_bytes());
    for slot in slots {
        let name = slot.name();
        let t = model.tensor(slot);
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.push(t.rank() as u8);
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn fail(&self, reason: String) -> Error {
        Error::Parse {
            offset: self.pos,
            reason,
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<DetectorModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 8,
            reason: format!("unsupported version {version}"),
        });
    }
    let meta_len = r.u32("header length")? as usize;
    let meta_at = r.pos;
    let meta: Meta = serde_json::from_slice(r.take(meta_len, "header")?).map_err(|e| Error::Parse {
        offset: meta_at,
        reason: format!("header: {e}"),
    })?;
    let cats: Vec<&str> = meta.categories.iter().map(String::as_str).collect();
    let mut model = DetectorModel::new(meta.config, 0, &cats).map_err(|e| Error::Parse {
        offset: meta_at,
        reason: e.to_string(),
    })?;
    let by_name: BTreeMap<String, Slot> = model.slots().into_iter().map(|s| (s.name(), s)).collect();
    let count = r.u32("tensor count")? as usize;
    if count != by_name.len() {
        return Err(r.fail(format!("expected {} tensors, found {count}", by_name.len())));
    }
    let mut seen = BTreeMap::new();
    for _ in 0..count {
        let at = r.pos;
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Parse {
                offset: at,
                reason: "name is not UTF-8".into(),
            })?
            .to_string();
        let Some(&slot) = by_name.get(&name) else {
            return Err(Error::Parse {
                offset: at,
                reason: format!("unknown tensor {name:?}"),
            });
        };
        if seen.insert(name.clone(), ()).is_some() {
            return Err(Error::Parse {
                offset: at,
                reason: format!("duplicate tensor {name:?}"),
            });
        }
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F64 {
            return Err(r.fail(format!("unsupported dtype tag {dtype}")));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let expected = model.tensor(slot);
        if shape != expected.shape() {
            return Err(r.fail(format!(
                "{name}: shape {shape:?} does not match {:?}",
                expected.shape()
            )));
        }
        let n = expected.len();
        let raw = r.take(n * 8, "values")?;
        let dst = model.values_mut(slot);
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if r.pos != buf.len() {
        return Err(r.fail("trailing bytes".into()));
    }
    Ok(model)
}

pub fn save(model: &DetectorModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<DetectorModel> {
    from_bytes(&std::fs::read(path)?)
}

impl DetectorModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> DetectorModel {
        let mut m = DetectorModel::new(DetectorConfig::micro(), 11, &["a", "b", "c"]).unwrap();
        m.backbone[0].bn.running_mean[1] = 0.123456789;
        m.backbone[1].bn.momentum = 0.37;
        m
    }

    #[test]
    fn roundtrip_is_lossless() {
        let m = model();
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = to_bytes(&model());
        for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            match from_bytes(&bytes[..cut]) {
                Err(Error::Parse { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Parse { offset: 0, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(from_bytes(&long).is_err());
    }
}
