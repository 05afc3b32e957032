//! Tensor serialization.
//!
//! Binary layout (all little-endian): `rank: u64`, then `rank` dimension
//! sizes as `u64`, then `product(dims)` values as IEEE-754 `f64`.
//! The CSV dump writes a header `i0,…,i{rank-1},value` followed by one row
//! per element in row-major order.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

/// Hard cap on rank when decoding, to reject garbage headers early.
const MAX_RANK: u64 = 16;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&(t.rank() as u64).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let rank = read_u64(r)?;
    if rank > MAX_RANK {
        return Err(Error::invalid("read_tensor", format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape, data)
}

pub fn encoded_len(t: &Tensor) -> usize {
    8 * (1 + t.rank() + t.numel())
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(t));
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<Tensor> {
    read_tensor(&mut bytes)
}

pub fn write_csv<W: Write>(w: W, t: &Tensor) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (0..t.rank()).map(|i| format!("i{i}")).collect();
    header.push("value".into());
    wr.write_record(&header)?;
    let mut index = vec![0usize; t.rank()];
    for &v in t.data() {
        let mut row: Vec<String> = index.iter().map(|i| i.to_string()).collect();
        row.push(v.to_string());
        wr.write_record(&row)?;
        for axis in (0..index.len()).rev() {
            index[axis] += 1;
            if index[axis] < t.shape()[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    wr.flush()?;
    Ok(())
}
