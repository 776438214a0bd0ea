//! Binary tensor container.
//!
//! Block layout: magic `MBT1`, u32 little-endian rank, rank x u64
//! little-endian dims, then row-major 32-bit little-endian floats.
//! A named-tensor file is a sequence of (u32 name length, UTF-8 name,
//! tensor block), sorted by name. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MBT_MAGIC: &[u8; 4] = b"MBT1";

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor<f32>) -> Result<()> {
    w.write_all(MBT_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &dim in t.shape() {
        w.write_all(&(dim as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "tensor magic")?;
    if &magic != MBT_MAGIC {
        return Err(Error::data(format!(
            "bad tensor magic {:?}, expected {:?}",
            magic, MBT_MAGIC
        )));
    }
    let rank = read_u32(r, "tensor rank")? as usize;
    if rank > 8 {
        return Err(Error::data(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut buf = [0u8; 8];
        read_exact(r, &mut buf, "tensor dim")?;
        shape.push(u64::from_le_bytes(buf) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 4];
    for _ in 0..numel {
        read_exact(r, &mut buf, "tensor payload")?;
        data.push(f32::from_le_bytes(buf));
    }
    Tensor::new(shape, data)
}

/// Writes `(name, tensor)` entries sorted by name.
pub fn write_named_tensors<W: Write>(w: &mut W, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
    for (name, tensor) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, tensor)?;
    }
    Ok(())
}

pub fn read_named_tensors<R: Read>(r: &mut R) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut out = BTreeMap::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read(&mut len_buf[..1])? {
            0 => break, // clean end of stream
            _ => read_exact(r, &mut len_buf[1..], "name length")?,
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        if name_len > 4096 {
            return Err(Error::data(format!("implausible tensor name length {name_len}")));
        }
        let mut name_buf = vec![0u8; name_len];
        read_exact(r, &mut name_buf, "tensor name")?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::data("tensor name is not UTF-8".to_string()))?;
        let tensor = read_tensor(r)?;
        if out.insert(name.clone(), tensor).is_some() {
            return Err(Error::data(format!("duplicate tensor name '{name}'")));
        }
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::data(format!("truncated file while reading {what}")))
}
