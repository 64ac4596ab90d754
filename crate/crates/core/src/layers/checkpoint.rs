//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MMGM"  u32 version
//! u8 topology (0 dense, 1 star)  u8 gated  u8 bias
//! u32 len, concat-order tag (utf-8)
//! u32 n, n × (u8 node kind, u32 width)      first-layer input widths
//! u32 n, n × u32                            graph layer widths
//! u32 n, n × u32                            head layer widths
//! u32 n, n × parameter:
//!     u32 len, name (utf-8)  u8 trainable  u32 rows  u32 cols  rows·cols × f64
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::graph::{NodeKind, Topology, CONCAT_ORDER_TAG};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMGM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&to_bytes(model))?;
    file.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

/// Loads a checkpoint and refuses it unless it was built for `topology`.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, topology: Topology) -> Result<Model> {
    let model = load_checkpoint(path)?;
    if model.topology() != topology {
        return Err(Error::Config(format!(
            "checkpoint was trained for {} graphs, not {}",
            model.topology(),
            topology
        )));
    }
    Ok(model)
}

pub(crate) fn to_bytes(model: &Model) -> Vec<u8> {
    let spec = model.spec();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    out.push(match spec.topology {
        Topology::Dense => 0,
        Topology::Star => 1,
    });
    out.push(u8::from(spec.gated));
    out.push(u8::from(spec.bias));
    put_str(&mut out, CONCAT_ORDER_TAG);
    put_u32(&mut out, spec.input_dims.len() as u32);
    for &(k, d) in &spec.input_dims {
        out.push(k.index() as u8);
        put_u32(&mut out, d as u32);
    }
    for dims in [&spec.graph_dims, &spec.head_dims] {
        put_u32(&mut out, dims.len() as u32);
        for &d in dims {
            put_u32(&mut out, d as u32);
        }
    }
    let params = model.parameters();
    put_u32(&mut out, params.len() as u32);
    for p in params {
        put_str(&mut out, &p.name);
        out.push(u8::from(p.trainable));
        put_u32(&mut out, p.value.rows() as u32);
        put_u32(&mut out, p.value.cols() as u32);
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let topology = match r.u8()? {
        0 => Topology::Dense,
        1 => Topology::Star,
        t => return Err(Error::Format(format!("unknown topology code {t}"))),
    };
    let gated = r.flag()?;
    let bias = r.flag()?;
    let tag = r.string()?;
    if tag != CONCAT_ORDER_TAG {
        return Err(Error::Format(format!("checkpoint uses feature order `{tag}`, expected `{CONCAT_ORDER_TAG}`")));
    }
    let mut input_dims = Vec::new();
    for _ in 0..r.u32()? {
        let kind = NodeKind::from_index(r.u8()? as usize).ok_or_else(|| Error::Format("unknown node kind".into()))?;
        input_dims.push((kind, r.u32()? as usize));
    }
    let read_dims = |r: &mut Reader| -> Result<Vec<usize>> { (0..r.u32()?).map(|_| r.u32().map(|d| d as usize)).collect() };
    let graph_dims = read_dims(&mut r)?;
    let head_dims = read_dims(&mut r)?;
    let spec = ModelSpec {
        topology,
        gated,
        bias,
        input_dims,
        graph_dims,
        head_dims,
    };
    let mut model = Model::build(spec, &mut |rows, cols| Matrix::zeros(rows, cols))?;
    let count = r.u32()? as usize;
    let mut params = model.parameters_mut();
    if count != params.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} parameters, architecture declares {}",
            params.len()
        )));
    }
    for p in params.iter_mut() {
        let name = r.string()?;
        let trainable = r.flag()?;
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        if name != p.name || (rows, cols) != p.value.shape() {
            return Err(Error::Format(format!(
                "parameter `{name}` {rows}×{cols} does not match expected `{}` {:?}",
                p.name,
                p.value.shape()
            )));
        }
        let raw = r.take(rows * cols * 8)?;
        for (dst, chunk) in p.value.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        p.trainable = trainable;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after parameters", bytes.len() - r.pos)));
    }
    Ok(model)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format("checkpoint truncated".into()));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Format(format!("invalid flag byte {v}"))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Format("invalid utf-8 in checkpoint".into()))
    }
}
