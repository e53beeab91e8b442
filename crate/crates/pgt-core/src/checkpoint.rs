//! Checkpoint format: parameters, and optionally optimizer state so an
//! interrupted run resumes bit-for-bit.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "PGTC" | version u32 | dtype u8 | model digest [32]
//! param count u32
//!   per param: name len u16, name bytes, rank u8, dims u32.., elements
//! trailer u8: 0 = none, 1 = resume state
//!   resume: epochs u64, one velocity tensor per param (rank, dims, elements)
//! ```
//!
//! A checkpoint only loads into a model whose spec digest matches the one it
//! was written with; element type is stored, not converted.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{PgtError, Result};
use crate::model::{Model, ModelSpec};
use crate::tensor::{Dtype, Scalar, Tensor};
use crate::train::Sgd;

const MAGIC: &[u8; 4] = b"PGTC";
const VERSION: u32 = 1;
const MAX_RANK: u8 = 8;
const MAX_NAME: u16 = 4096;

/// Optimizer state carried alongside the parameters.
#[derive(Debug)]
pub struct ResumeState<S: Scalar> {
    pub velocities: Vec<Tensor<S>>,
    pub epochs_completed: usize,
}

fn dtype_tag(d: Dtype) -> u8 {
    match d {
        Dtype::F32 => 0,
        Dtype::F64 => 1,
    }
}

fn tag_dtype(t: u8) -> Result<Dtype> {
    match t {
        0 => Ok(Dtype::F32),
        1 => Ok(Dtype::F64),
        other => Err(PgtError::checkpoint(format!("unknown dtype tag {other}"))),
    }
}

fn write_tensor<S: Scalar, W: Write>(w: &mut W, t: &Tensor<S>) -> Result<()> {
    let rank = t.shape().len();
    if rank > MAX_RANK as usize {
        return Err(PgtError::checkpoint(format!("tensor rank {rank} too large")));
    }
    w.write_all(&[rank as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    match S::DTYPE {
        Dtype::F32 => {
            for &v in t.data() {
                w.write_all(&(v.to_f64_val() as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_f64_val().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_tensor<S: Scalar, R: Read>(r: &mut R) -> Result<Tensor<S>> {
    let rank = read_u8(r)?;
    if rank > MAX_RANK {
        return Err(PgtError::checkpoint(format!("tensor rank {rank} too large")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    if numel > (1 << 30) {
        return Err(PgtError::checkpoint(format!("tensor of {numel} elements rejected")));
    }
    let mut data = Vec::with_capacity(numel);
    match S::DTYPE {
        Dtype::F32 => {
            let mut buf = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(S::from_f64(f32::from_le_bytes(buf) as f64));
            }
        }
        Dtype::F64 => {
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(S::from_f64(f64::from_le_bytes(buf)));
            }
        }
    }
    Tensor::from_vec(shape, data)
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Write parameters, and resume state when an optimizer is given.
pub fn save<S: Scalar>(
    path: &Path,
    model: &Model<S>,
    resume: Option<(&Sgd<S>, usize)>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[dtype_tag(S::DTYPE)])?;
    w.write_all(&model.spec.digest())?;
    w.write_all(&(model.store.len() as u32).to_le_bytes())?;
    for entry in model.store.entries() {
        let name = entry.name.as_bytes();
        if name.len() > MAX_NAME as usize {
            return Err(PgtError::checkpoint(format!("parameter name `{}` too long", entry.name)));
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        write_tensor(&mut w, &entry.value)?;
    }
    match resume {
        None => w.write_all(&[0u8])?,
        Some((opt, epochs)) => {
            w.write_all(&[1u8])?;
            w.write_all(&(epochs as u64).to_le_bytes())?;
            if opt.velocities().len() != model.store.len() {
                return Err(PgtError::checkpoint(format!(
                    "optimizer tracks {} tensors, model has {}",
                    opt.velocities().len(),
                    model.store.len()
                )));
            }
            for v in opt.velocities() {
                write_tensor(&mut w, v)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Element type stored in a checkpoint, without reading the parameters.
pub fn peek_dtype(path: &Path) -> Result<Dtype> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(PgtError::checkpoint("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(PgtError::checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    tag_dtype(read_u8(&mut r)?)
}

/// Load a checkpoint into a model of the given spec. The stored digest and
/// dtype must match exactly.
pub fn load<S: Scalar>(
    path: &Path,
    spec: &ModelSpec,
) -> Result<(Model<S>, Option<ResumeState<S>>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(PgtError::checkpoint("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(PgtError::checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let dtype = tag_dtype(read_u8(&mut r)?)?;
    if dtype != S::DTYPE {
        return Err(PgtError::checkpoint(format!(
            "checkpoint holds {dtype} parameters, requested {}",
            S::DTYPE
        )));
    }
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest)?;
    if digest != spec.digest() {
        return Err(PgtError::checkpoint(
            "model digest mismatch: checkpoint was written for a different model",
        ));
    }
    let count = read_u32(&mut r)? as usize;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)?;
        if name_len > MAX_NAME {
            return Err(PgtError::checkpoint("parameter name too long"));
        }
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| PgtError::checkpoint("parameter name is not UTF-8"))?;
        let value = read_tensor::<S, _>(&mut r)?;
        values.push((name, value));
    }
    let model = Model::from_values(spec.clone(), values)?;
    let resume = match read_u8(&mut r)? {
        0 => None,
        1 => {
            let epochs_completed = read_u64(&mut r)? as usize;
            let mut velocities = Vec::with_capacity(count);
            for _ in 0..count {
                velocities.push(read_tensor::<S, _>(&mut r)?);
            }
            Some(ResumeState { velocities, epochs_completed })
        }
        other => {
            return Err(PgtError::checkpoint(format!("unknown trailer tag {other}")));
        }
    };
    Ok((model, resume))
}
