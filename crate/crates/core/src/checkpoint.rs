//! Checkpoint format: a little-endian binary stream of named tensors.
//!
//! ```text
//! magic  b"CPASEG\x00\x01"          8 bytes
//! digest sha256(config canonical)  32 bytes
//! count  u64                        record count
//! record name_len u32, name utf-8, dims 4 x u64, values numel x f32
//! ```
//!
//! Values are stored as f32 regardless of the model's scalar type.

use crate::error::PipelineError;
use crate::layers::{Module, Slot};
use crate::tensor::{Scalar, Shape, Tensor};
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"CPASEG\x00\x01";

pub fn config_digest(canonical: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(canonical.as_bytes());
    h.finalize().into()
}

fn chk(msg: impl Into<String>) -> PipelineError {
    PipelineError::Checkpoint(msg.into())
}

/// Serialize every slot the module exposes, in visit order.
pub fn save<T: Scalar>(
    path: &Path,
    model: &mut dyn Module<T>,
    canonical_config: &str,
) -> Result<(), PipelineError> {
    let mut records: Vec<(String, Shape, Vec<f32>)> = Vec::new();
    model.for_each(&mut |name, slot| {
        let t: &Tensor<T> = match slot {
            Slot::Trainable(p) => &p.value,
            Slot::Buffer(b) => b,
        };
        let values = t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
        records.push((name.to_string(), t.shape(), values));
    });
    let file = File::create(path).map_err(|e| PipelineError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| PipelineError::io(path.display().to_string(), e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&config_digest(canonical_config)).map_err(io_err)?;
    w.write_all(&(records.len() as u64).to_le_bytes()).map_err(io_err)?;
    for (name, shape, values) in &records {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        for d in [shape.b, shape.c, shape.h, shape.w] {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        for v in values {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], PipelineError> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| chk("truncated checkpoint"))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32, PipelineError> {
        Ok(u32::from_le_bytes(self.bytes::<4>()?))
    }

    fn u64(&mut self) -> Result<u64, PipelineError> {
        Ok(u64::from_le_bytes(self.bytes::<8>()?))
    }
}

/// Load a checkpoint into a module whose slots must match the stored records
/// one-to-one, in order, with identical names and shapes. The stored config
/// digest must match `canonical_config`.
pub fn load<T: Scalar>(
    path: &Path,
    model: &mut dyn Module<T>,
    canonical_config: &str,
) -> Result<(), PipelineError> {
    let file = File::open(path).map_err(|e| PipelineError::io(path.display().to_string(), e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
    };
    if &r.bytes::<8>()? != MAGIC {
        return Err(chk("bad magic: not a checkpoint or unsupported version"));
    }
    if r.bytes::<32>()? != config_digest(canonical_config) {
        return Err(chk("config digest mismatch: checkpoint was written by a differently configured model"));
    }
    let count = r.u64()? as usize;
    let mut records: Vec<(String, Shape, Vec<f32>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        if name_len > 4096 {
            return Err(chk(format!("implausible name length {name_len}")));
        }
        let mut name_buf = vec![0u8; name_len];
        r.inner
            .read_exact(&mut name_buf)
            .map_err(|_| chk("truncated checkpoint"))?;
        let name = String::from_utf8(name_buf).map_err(|_| chk("record name is not utf-8"))?;
        let dims: Vec<usize> = (0..4).map(|_| r.u64().map(|v| v as usize)).collect::<Result<_, _>>()?;
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let mut values = vec![0f32; shape.numel()];
        for v in &mut values {
            *v = f32::from_le_bytes(r.bytes::<4>()?);
        }
        records.push((name, shape, values));
    }
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing).map_err(|_| chk("read failed"))? != 0 {
        return Err(chk("trailing bytes after final record"));
    }

    let mut idx = 0;
    let mut failure: Option<PipelineError> = None;
    model.for_each(&mut |name, slot| {
        if failure.is_some() {
            return;
        }
        let Some((rec_name, rec_shape, rec_values)) = records.get(idx) else {
            failure = Some(chk(format!("checkpoint ended before slot '{name}'")));
            return;
        };
        let t: &mut Tensor<T> = match slot {
            Slot::Trainable(p) => &mut p.value,
            Slot::Buffer(b) => b,
        };
        if rec_name != name {
            failure = Some(chk(format!("record {idx} is '{rec_name}', model expects '{name}'")));
        } else if *rec_shape != t.shape() {
            failure = Some(chk(format!("'{name}': stored {rec_shape} vs model {}", t.shape())));
        } else {
            for (dst, src) in t.data_mut().iter_mut().zip(rec_values) {
                *dst = T::from_f32(*src).unwrap_or_else(T::zero);
            }
        }
        idx += 1;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if idx != records.len() {
        return Err(chk(format!("checkpoint has {} records, model consumed {idx}", records.len())));
    }
    Ok(())
}
