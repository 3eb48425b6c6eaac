//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! "FSPD" | u32 version | u32 header_len | header JSON
//! u32 n_tensors, then per tensor:
//!   u16 name_len | name | u8 rank | u32 dims[rank] | f32 data[prod(dims)]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::draft::DraftStack;
use super::target::TargetModel;
use super::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::tensor::{Param, Tensor};

const MAGIC: &[u8; 4] = b"FSPD";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    config: ModelConfig,
    #[serde(default)]
    variant: Option<Variant>,
}

/// Writes the header and named tensors.
pub fn write_tensors<W: Write>(
    mut w: W,
    header: &serde_json::Value,
    tensors: &[(&str, &Tensor<f32>)],
) -> Result<()> {
    let fmt = |e: std::io::Error| Error::Format(format!("write failed: {e}"));
    let json = serde_json::to_vec(header)?;
    w.write_all(MAGIC).map_err(fmt)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(fmt)?;
    w.write_all(&(json.len() as u32).to_le_bytes()).map_err(fmt)?;
    w.write_all(&json).map_err(fmt)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(fmt)?;
    for (name, t) in tensors {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
            return Err(Error::Format(format!("tensor {name} cannot be encoded")));
        }
        w.write_all(&(nb.len() as u16).to_le_bytes()).map_err(fmt)?;
        w.write_all(nb).map_err(fmt)?;
        w.write_all(&[t.rank() as u8]).map_err(fmt)?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes()).map_err(fmt)?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(fmt)?;
    }
    w.flush().map_err(fmt)
}

struct Reader<R> {
    r: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.r
            .read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("truncated checkpoint while reading {what}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Reads a checkpoint into its header and an ordered name -> tensor map.
/// Duplicate names, bad magic, unknown versions and truncation are errors.
pub fn read_tensors<R: Read>(r: R) -> Result<(serde_json::Value, BTreeMap<String, Tensor<f32>>)> {
    let mut rd = Reader { r };
    if rd.bytes(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a checkpoint".into()));
    }
    let version = rd.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let hlen = rd.u32("header length")? as usize;
    let header: serde_json::Value = serde_json::from_slice(&rd.bytes(hlen, "header")?)?;
    let count = rd.u32("tensor count")?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let nl = rd.bytes(2, "name length")?;
        let nl = u16::from_le_bytes([nl[0], nl[1]]) as usize;
        let name = String::from_utf8(rd.bytes(nl, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = rd.bytes(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(rd.u32("dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = rd.bytes(n * 4, &format!("data of {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data)?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    let mut rest = [0u8; 1];
    if rd.r.read(&mut rest).unwrap_or(0) != 0 {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok((header, out))
}

fn save(path: &Path, header: &Header, params: Vec<&Param<f32>>) -> Result<()> {
    let header = serde_json::to_value(header)?;
    let tensors: Vec<(&str, &Tensor<f32>)> =
        params.iter().map(|p| (p.name(), p.value.as_ref())).collect();
    let mut buf = Vec::new();
    write_tensors(&mut buf, &header, &tensors)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn load(path: &Path, kind: &str) -> Result<(Header, BTreeMap<String, Tensor<f32>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, tensors) = read_tensors(bytes.as_slice())?;
    let header: Header = serde_json::from_value(header)
        .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
    if header.kind != kind {
        return Err(Error::Format(format!(
            "expected a {kind} checkpoint, found {}",
            header.kind
        )));
    }
    header.config.validate()?;
    Ok((header, tensors))
}

fn fill(params: Vec<&mut Param<f32>>, mut tensors: BTreeMap<String, Tensor<f32>>) -> Result<()> {
    for p in params {
        let t = tensors
            .remove(p.name())
            .ok_or_else(|| Error::Format(format!("missing tensor {}", p.name())))?;
        if t.shape() != p.shape() {
            return Err(Error::Format(format!(
                "shape mismatch for {}: file {:?}, model {:?}",
                p.name(),
                t.shape(),
                p.shape()
            )));
        }
        p.data_mut().copy_from_slice(t.data());
    }
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Format(format!("unknown tensor {name}")));
    }
    Ok(())
}

pub fn save_target(model: &TargetModel<f32>, path: &Path) -> Result<()> {
    let header = Header {
        kind: "target".into(),
        config: model.config.clone(),
        variant: None,
    };
    save(path, &header, model.params())
}

pub fn load_target(path: &Path) -> Result<TargetModel<f32>> {
    let (header, tensors) = load(path, "target")?;
    let mut model = TargetModel::new(header.config, 0)?;
    fill(model.params_mut(), tensors)?;
    Ok(model)
}

pub fn save_draft(stack: &DraftStack<f32>, path: &Path) -> Result<()> {
    let header = Header {
        kind: "draft".into(),
        config: stack.config.clone(),
        variant: Some(stack.variant),
    };
    save(path, &header, stack.params())
}

pub fn load_draft(path: &Path) -> Result<DraftStack<f32>> {
    let (header, tensors) = load(path, "draft")?;
    let variant = header
        .variant
        .ok_or_else(|| Error::Format("draft checkpoint without variant".into()))?;
    let mut stack = DraftStack::new(header.config, variant, 0)?;
    fill(stack.params_mut(), tensors)?;
    Ok(stack)
}
