//! Checkpoint files.
//!
//! ```text
//! "TDCN0001"  u32 version  u8 model-kind  u32 tensor-count
//! per tensor: u16 name-length, UTF-8 name, u8 rank, rank x u32 dims, f32 data
//! ```
//!
//! All integers and floats are little-endian. The model configuration is
//! stored as tensors named `meta.*` ahead of the parameters.

use std::fs;
use std::path::Path;

use crate::error::Error;
use crate::model::{Model, ModelConfig, ModelKind};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TDCN0001";
pub const VERSION: u32 = 1;

fn meta_tensors(cfg: &ModelConfig) -> Vec<(String, Tensor)> {
    let ints = |v: &[usize]| Tensor::new(vec![v.len()], v.iter().map(|&x| x as f32).collect()).expect("sized");
    vec![
        ("meta.tasks".into(), ints(&[cfg.tasks])),
        ("meta.input_hw".into(), ints(&[cfg.height, cfg.width])),
        ("meta.stage_channels".into(), ints(&cfg.stage_channels)),
        ("meta.fc_hidden".into(), ints(&[cfg.fc_hidden])),
        ("meta.td_channels".into(), ints(&cfg.td_channels)),
    ]
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let meta = meta_tensors(&model.cfg);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(model.cfg.kind.code());
    out.extend_from_slice(&((meta.len() + model.params.len()) as u32).to_le_bytes());
    let entries = meta.iter().map(|(n, t)| (n.as_str(), t)).chain(model.params.iter());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
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
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], Error> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Truncated(format!("{what} at byte {} needs {n} bytes, file has {}", self.pos, self.bytes.len()))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8, Error> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, Error> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, Error> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Kind code and named tensors of a checkpoint, in file order.
pub fn parse(bytes: &[u8]) -> Result<(u8, Vec<(String, Tensor)>), Error> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            actual: String::from_utf8_lossy(magic).escape_debug().to_string(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            expected: VERSION,
            actual: version,
        });
    }
    let kind = r.u8("model kind")?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format(format!("{name}: size overflow")))?, &name)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((name, Tensor::new(shape, data).expect("sized")));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((kind, tensors))
}

fn meta_ints(tensors: &[(String, Tensor)], name: &str) -> Result<Vec<usize>, Error> {
    let (_, t) = tensors
        .iter()
        .find(|(n, _)| n == name)
        .ok_or_else(|| Error::Format(format!("missing {name}")))?;
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!("{name}: {v} is not a count")))
            }
        })
        .collect()
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model, Error> {
    let (code, tensors) = parse(bytes)?;
    let kind = ModelKind::from_code(code).ok_or_else(|| Error::Format(format!("unknown model kind code {code}")))?;
    let one = |name: &str| -> Result<usize, Error> {
        match meta_ints(&tensors, name)?.as_slice() {
            [v] => Ok(*v),
            other => Err(Error::Format(format!("{name}: expected one value, got {other:?}"))),
        }
    };
    let hw = meta_ints(&tensors, "meta.input_hw")?;
    if hw.len() != 2 {
        return Err(Error::Format(format!("meta.input_hw: expected 2 values, got {hw:?}")));
    }
    let mut cfg = ModelConfig::new(kind, one("meta.tasks")?, hw[0], hw[1]);
    cfg.stage_channels = meta_ints(&tensors, "meta.stage_channels")?;
    cfg.fc_hidden = one("meta.fc_hidden")?;
    cfg.td_channels = meta_ints(&tensors, "meta.td_channels")?;
    let mut model = Model::build(&cfg, 0).map_err(|e| Error::Format(format!("inconsistent configuration: {e}")))?;

    let params: Vec<&(String, Tensor)> = tensors.iter().filter(|(n, _)| !n.starts_with("meta.")).collect();
    if params.len() != model.params.len() {
        return Err(Error::Format(format!(
            "{kind} model has {} parameters, checkpoint has {}",
            model.params.len(),
            params.len()
        )));
    }
    for (name, t) in params {
        let id = model
            .params
            .find(name)
            .ok_or_else(|| Error::Format(format!("unexpected tensor '{name}' for a {kind} model")))?;
        let slot = model.params.get_mut(id);
        if slot.shape() != t.shape() {
            return Err(Error::Format(format!(
                "tensor '{name}' has shape {:?}, {kind} model expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.clone();
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), Error> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model, Error> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

