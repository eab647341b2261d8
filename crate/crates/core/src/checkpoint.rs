//! Named-tensor checkpoint container.
//!
//! Layout (little-endian): magic `SKDC`, version u16, then one record per
//! tensor — name length u16 + UTF-8 name, rank u8, one u32 extent per axis,
//! payload of f64 values — and a trailing 64-bit FNV-1a checksum of all
//! preceding bytes. Batch-norm running statistics travel under their reserved
//! `.running_mean` / `.running_var` names.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::ParamMap;
use crate::rng::fnv1a64;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SKDC";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Serialize named tensors in the order supplied. Callers pass sorted maps so
/// files are byte-deterministic.
pub fn write_checkpoint<'a>(
    path: &Path,
    tensors: impl Iterator<Item = (&'a String, &'a Tensor)>,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, tensor) in tensors {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::config(format!("tensor name too long: {name}")));
        }
        if tensor.rank() > u8::MAX as usize {
            return Err(Error::config(format!("tensor rank too high: {name}")));
        }
        buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(bytes);
        buf.push(tensor.rank() as u8);
        for &e in tensor.shape() {
            if e > u32::MAX as usize {
                return Err(Error::config(format!("extent too large in {name}")));
            }
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a64(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Read back every named tensor; fails without partial output on any
/// corruption (checksum first, then structure).
pub fn read_checkpoint(path: &Path) -> Result<ParamMap> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 6 + 8 {
        return Err(Error::corrupt(format!(
            "{}: file too short",
            path.display()
        )));
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if fnv1a64(body) != stored {
        return Err(Error::corrupt(format!(
            "{}: checksum mismatch",
            path.display()
        )));
    }
    if &body[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::corrupt(format!("{}: bad magic", path.display())));
    }
    let version = u16::from_le_bytes(body[4..6].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::corrupt(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let mut map = ParamMap::new();
    let mut pos = 6usize;
    let too_short = || Error::corrupt(format!("{}: truncated record", path.display()));
    while pos < body.len() {
        if pos + 2 > body.len() {
            return Err(too_short());
        }
        let name_len = u16::from_le_bytes(body[pos..pos + 2].try_into().unwrap()) as usize;
        pos += 2;
        if pos + name_len + 1 > body.len() {
            return Err(too_short());
        }
        let name = std::str::from_utf8(&body[pos..pos + name_len])
            .map_err(|_| Error::corrupt(format!("{}: non-UTF8 tensor name", path.display())))?
            .to_string();
        pos += name_len;
        let rank = body[pos] as usize;
        pos += 1;
        if pos + rank * 4 > body.len() {
            return Err(too_short());
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(body[pos..pos + 4].try_into().unwrap()) as usize);
            pos += 4;
        }
        let count: usize = shape.iter().product();
        if pos + count * 8 > body.len() {
            return Err(too_short());
        }
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f64::from_le_bytes(body[pos..pos + 8].try_into().unwrap()));
            pos += 8;
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::corrupt(format!("{}: tensor {name}: {e}", path.display())))?;
        if map.insert(name.clone(), tensor).is_some() {
            return Err(Error::corrupt(format!(
                "{}: duplicate tensor {name}",
                path.display()
            )));
        }
    }
    Ok(map)
}
