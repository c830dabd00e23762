//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SRFNCKPT", u32 version
//! u64 config length, config JSON bytes
//! u64 parameter count, then per parameter:
//!     u32 name length, name bytes, u8 group, u32 ndim (4), 4 x u64 dims, f64 data
//! u8 has_optimizer; if 1:
//!     u64 adam step, u64 global step, u64 epoch, then first and second
//!     moments for every parameter in order (f64 data)
//! ```
//!
//! Values are stored as f64 so a resumed run continues bit-for-bit.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SRFNCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub adam_step: u64,
    pub step: u64,
    pub epoch: u64,
    pub first_moments: Vec<Tensor>,
    pub second_moments: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Run configuration as JSON.
    pub config: String,
    pub params: Vec<(String, ParamGroup, Tensor)>,
    pub optimizer: Option<OptimizerState>,
}

fn group_code(g: ParamGroup) -> u8 {
    match g {
        ParamGroup::Fusion => 0,
        ParamGroup::Refinement => 1,
    }
}

fn group_from(code: u8) -> Result<ParamGroup> {
    match code {
        0 => Ok(ParamGroup::Fusion),
        1 => Ok(ParamGroup::Refinement),
        _ => Err(Error::Data(format!("unknown parameter group {code}"))),
    }
}

fn put_tensor_data<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Reader<R> {
    r: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.r
            .read_exact(&mut buf)
            .map_err(|_| Error::Data("checkpoint is truncated".into()))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn len(&mut self, limit: u64, what: &str) -> Result<usize> {
        let n = self.u64()?;
        if n > limit {
            return Err(Error::Data(format!("implausible {what} {n} in checkpoint")));
        }
        Ok(n as usize)
    }

    fn tensor_data(&mut self, shape: [usize; 4]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.bytes(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(shape, data))
    }
}

impl Checkpoint {
    pub fn from_store(config: String, store: &ParamStore, optimizer: Option<OptimizerState>) -> Self {
        Self {
            config,
            params: store
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.group, e.value.clone()))
                .collect(),
            optimizer,
        }
    }

    /// Copy values into `store`, matching by name and shape.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, the model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, _, value) in &self.params {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Data(format!("checkpoint parameter {name} is not in the model")))?;
            let expected = store.get(id).shape();
            if expected != value.shape() {
                return Err(Error::Data(format!(
                    "parameter {name} has shape {:?} in the checkpoint but {expected:?} in the model",
                    value.shape()
                )));
            }
            store.set(id, value.clone());
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.config.len() as u64).to_le_bytes())?;
        w.write_all(self.config.as_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for (name, group, t) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[group_code(*group)])?;
            w.write_all(&4u32.to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            put_tensor_data(&mut w, t)?;
        }
        match &self.optimizer {
            None => w.write_all(&[0])?,
            Some(o) => {
                w.write_all(&[1])?;
                for v in [o.adam_step, o.step, o.epoch] {
                    w.write_all(&v.to_le_bytes())?;
                }
                for t in o.first_moments.iter().chain(&o.second_moments) {
                    put_tensor_data(&mut w, t)?;
                }
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = Reader { r };
        if r.bytes(8)? != MAGIC {
            return Err(Error::Data("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let n = r.len(1 << 24, "config length")?;
        let config = String::from_utf8(r.bytes(n)?).map_err(|_| Error::Data("config is not UTF-8".into()))?;
        let count = r.len(1 << 20, "parameter count")?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.bytes(len)?).map_err(|_| Error::Data("parameter name is not UTF-8".into()))?;
            let group = group_from(r.u8()?)?;
            let ndim = r.u32()?;
            if ndim != 4 {
                return Err(Error::Data(format!("parameter {name} has {ndim} dims, expected 4")));
            }
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = r.len(1 << 32, "dimension")?;
            }
            params.push((name, group, r.tensor_data(shape)?));
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let adam_step = r.u64()?;
                let step = r.u64()?;
                let epoch = r.u64()?;
                let mut first = Vec::with_capacity(count);
                let mut second = Vec::with_capacity(count);
                for (_, _, t) in &params {
                    first.push(r.tensor_data(t.shape())?);
                }
                for (_, _, t) in &params {
                    second.push(r.tensor_data(t.shape())?);
                }
                Some(OptimizerState {
                    adam_step,
                    step,
                    epoch,
                    first_moments: first,
                    second_moments: second,
                })
            }
            f => return Err(Error::Data(format!("bad optimizer flag {f}"))),
        };
        Ok(Self {
            config,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write(&mut w).map_err(|e| e.in_file(path))?;
        w.flush().map_err(|e| Error::io_at(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
        Self::read(std::io::BufReader::new(file)).map_err(|e| e.in_file(path))
    }
}
