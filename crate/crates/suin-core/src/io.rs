//! On-disk artifact formats: the binary tensor bundle and plain-text manifests.
//!
//! Bundle layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  b"TNSR"
//! version u8       1
//! count   u32      number of tensors
//! per tensor:
//!   name_len u16, name bytes (UTF-8)
//!   dtype    u8   0 = f64, 1 = u64
//!   ndim     u8
//!   dims     ndim × u32
//!   data     product(dims) × 8 bytes
//! ```
//!
//! Manifests are `key=value` lines sorted by key, one per line, no escaping;
//! keys and values must not contain `=` or newlines.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

/// Ordered collection of named tensors; write/read preserves order exactly,
/// so identical bundles are byte-identical on disk.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct TensorBundle {
    pub tensors: Vec<NamedTensor>,
}

impl TensorBundle {
    pub fn new() -> Self {
        TensorBundle::default()
    }

    pub fn push_f64(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(NamedTensor {
            name: name.to_string(),
            shape,
            data: TensorData::F64(data),
        });
    }

    pub fn push_u64(&mut self, name: &str, shape: Vec<usize>, data: Vec<u64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(NamedTensor {
            name: name.to_string(),
            shape,
            data: TensorData::U64(data),
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn f64(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.get(name) {
            Some(NamedTensor {
                shape,
                data: TensorData::F64(v),
                ..
            }) => Ok((shape, v)),
            Some(_) => Err(Error::Format(format!("tensor `{name}` is not f64"))),
            None => Err(Error::Format(format!("bundle has no tensor `{name}`"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<(&[usize], &[u64])> {
        match self.get(name) {
            Some(NamedTensor {
                shape,
                data: TensorData::U64(v),
                ..
            }) => Ok((shape, v)),
            Some(_) => Err(Error::Format(format!("tensor `{name}` is not u64"))),
            None => Err(Error::Format(format!("bundle has no tensor `{name}`"))),
        }
    }

    /// Scalar convenience accessor for metadata entries stored as [1] tensors.
    pub fn scalar_u64(&self, name: &str) -> Result<u64> {
        let (_, v) = self.u64(name)?;
        if v.len() != 1 {
            return Err(Error::Format(format!("tensor `{name}` is not a scalar")));
        }
        Ok(v[0])
    }

    pub fn scalar_f64(&self, name: &str) -> Result<f64> {
        let (_, v) = self.f64(name)?;
        if v.len() != 1 {
            return Err(Error::Format(format!("tensor `{name}` is not a scalar")));
        }
        Ok(v[0])
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            if name.len() > u16::MAX as usize {
                return Err(Error::Format(format!("tensor name too long: {}", t.name)));
            }
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(match t.data {
                TensorData::F64(_) => 0,
                TensorData::U64(_) => 1,
            });
            if t.shape.len() > u8::MAX as usize {
                return Err(Error::Format(format!("tensor `{}` has too many dims", t.name)));
            }
            buf.push(t.shape.len() as u8);
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &t.data {
                TensorData::F64(v) => {
                    for x in v {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorData::U64(v) => {
                    for x in v {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor {
            bytes: &bytes,
            pos: 0,
            path,
        };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "{}: bad magic {:?}, not a tensor bundle",
                path.display(),
                &magic[..4.min(magic.len())]
            )));
        }
        let version = cur.u8()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported bundle version {version}",
                path.display()
            )));
        }
        let count = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cur.u16()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Format(format!("{}: tensor name not UTF-8", path.display())))?;
            let dtype = cur.u8()?;
            let ndim = cur.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * 8)?;
            let data = match dtype {
                0 => TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => TensorData::U64(
                    raw.chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                other => {
                    return Err(Error::Format(format!(
                        "{}: unknown dtype {other} for tensor `{name}`",
                        path.display()
                    )))
                }
            };
            tensors.push(NamedTensor { name, shape, data });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes after last tensor",
                path.display(),
                bytes.len() - cur.pos
            )));
        }
        Ok(TensorBundle { tensors })
    }

    /// Serialize a parameter set, preserving order and requires_grad flags.
    pub fn from_params(params: &ParamSet) -> Self {
        let mut bundle = TensorBundle::new();
        let mut frozen = Vec::new();
        for (name, t) in params.iter() {
            bundle.push_f64(name, t.shape.clone(), t.data.clone());
            frozen.push(u64::from(!t.requires_grad));
        }
        let n = frozen.len();
        bundle.push_u64("meta.frozen_mask", vec![n], frozen);
        bundle
    }

    pub fn to_params(&self) -> Result<ParamSet> {
        let (_, mask) = self.u64("meta.frozen_mask")?;
        let entries: Vec<&NamedTensor> = self
            .tensors
            .iter()
            .filter(|t| !t.name.starts_with("meta."))
            .collect();
        if entries.len() != mask.len() {
            return Err(Error::Format(format!(
                "frozen mask length {} does not match {} parameters",
                mask.len(),
                entries.len()
            )));
        }
        let mut params = ParamSet::new();
        for (t, &frozen) in entries.iter().zip(mask) {
            let TensorData::F64(data) = &t.data else {
                return Err(Error::Format(format!("parameter `{}` is not f64", t.name)));
            };
            let mut tensor = Tensor::new(data.clone(), t.shape.clone())?;
            tensor.requires_grad = frozen == 0;
            params.insert(&t.name, tensor);
        }
        Ok(params)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: truncated bundle (wanted {n} bytes at offset {})",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

// ── manifests ────────────────────────────────────────────────────────

pub fn write_manifest(path: &Path, entries: &BTreeMap<String, String>) -> Result<()> {
    let mut out = String::new();
    for (k, v) in entries {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::Format(format!("manifest entry `{k}` contains a reserved character")));
        }
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Format(format!(
                "{}:{}: manifest line without `=`",
                path.display(),
                i + 1
            )));
        };
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

/// Verify that `dir` holds a manifest written by `stage`; `hint` names the
/// command that produces it.
pub fn require_stage(dir: &Path, stage: &str, hint: &str) -> Result<BTreeMap<String, String>> {
    let path = dir.join("manifest.txt");
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path,
            hint: hint.to_string(),
        });
    }
    let manifest = read_manifest(&path)?;
    match manifest.get("stage").map(String::as_str) {
        Some(s) if s == stage => Ok(manifest),
        Some(other) => Err(Error::Format(format!(
            "{}: expected stage `{stage}`, found `{other}`",
            path.display()
        ))),
        None => Err(Error::Format(format!(
            "{}: manifest has no `stage` entry",
            path.display()
        ))),
    }
}
