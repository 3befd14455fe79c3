//! Binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "DTALKCKP"
//! version    u32
//! metadata   u32 byte length + UTF-8 "key=value\n" lines, keys sorted
//! params     u32 count, then per record in name order:
//!              u32 name length, name bytes, u32 rows, u32 cols, rows·cols f32
//! adam       u8 present flag; when 1:
//!              u64 step, f64 lr, f64 beta1, f64 beta2, f64 eps,
//!              u32 count, then per record in name order:
//!              u32 name length, name bytes, u32 rows, u32 cols,
//!              rows·cols f32 first moment, rows·cols f32 second moment
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

use super::adam::{AdamConfig, AdamState, Moments};
use super::params::{Param, ParameterSet};

pub const MAGIC: &[u8; 8] = b"DTALKCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub params: ParameterSet,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(params: ParameterSet) -> Self {
        Self {
            metadata: BTreeMap::new(),
            params,
            adam: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = write_kv(&self.metadata);
        put_u32(&mut out, meta.len());
        out.extend_from_slice(meta.as_bytes());

        put_u32(&mut out, self.params.len());
        for (name, p) in self.params.iter() {
            put_header(&mut out, name, p);
            put_f32s(&mut out, p.data());
        }

        match &self.adam {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&a.step.to_le_bytes());
                for v in [a.config.lr, a.config.beta1, a.config.beta2, a.config.eps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                put_u32(&mut out, a.moments().len());
                for (name, m) in a.moments() {
                    put_header(&mut out, name, &m.m);
                    put_f32s(&mut out, m.m.data());
                    put_f32s(&mut out, m.v.data());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let metadata = parse_kv(meta_text)?;

        let mut params = ParameterSet::new();
        for _ in 0..r.u32()? {
            let (name, rows, cols) = r.header()?;
            let data = r.f32s(rows * cols)?;
            params.insert(name, Param::from_f32(rows, cols, data)?)?;
        }

        let adam = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let mut f = [0.0; 4];
                for v in &mut f {
                    *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                }
                let config = AdamConfig {
                    lr: f[0],
                    beta1: f[1],
                    beta2: f[2],
                    eps: f[3],
                };
                let mut moments = BTreeMap::new();
                for _ in 0..r.u32()? {
                    let (name, rows, cols) = r.header()?;
                    let m = Param::from_f32(rows, cols, r.f32s(rows * cols)?)?;
                    let v = Param::from_f32(rows, cols, r.f32s(rows * cols)?)?;
                    moments.insert(name, Moments { m, v });
                }
                Some(AdamState::from_parts(config, step, moments))
            }
            other => {
                return Err(Error::Checkpoint(format!("invalid optimizer flag {other}")));
            }
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after optimizer state",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            metadata,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// `key=value` lines in key order.
pub fn write_kv(map: &BTreeMap<String, String>) -> String {
    map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: "<key-value block>".into(),
            line: i + 1,
            message: format!("expected key=value, got `{line}`"),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_header(out: &mut Vec<u8>, name: &str, p: &Param) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, p.rows());
    put_u32(out, p.cols());
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::Checkpoint(format!("truncated file at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn header(&mut self) -> Result<(String, usize, usize)> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        Ok((name, rows, cols))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}
