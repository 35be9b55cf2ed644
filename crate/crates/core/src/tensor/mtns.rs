//! MTNS tensor file format.
//!
//! Little-endian throughout: magic `MTNS`, u8 dtype code (0=F32, 1=F64,
//! 2=I64, 3=BOOL), u8 rank, rank x u64 dims, then the raw row-major
//! payload. Bit-exact round trips.

use super::Tensor;
use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::runtime::Runtime;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"MTNS";

pub fn write_tensor(t: &Tensor, w: &mut impl Write) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::ShapeMismatch(format!(
            "rank {} exceeds the format's u8 rank field",
            t.rank()
        )));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[t.dtype().code(), t.rank() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match t.dtype() {
        DType::F32 => {
            for v in t.to_vec_f32()? {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        DType::F64 => {
            for v in t.to_vec_f64()? {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        DType::I64 => {
            for v in t.to_vec_i64()? {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        DType::Bool => {
            for v in t.to_vec_bool()? {
                w.write_all(&[v as u8])?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor(rt: &Runtime, r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::BadTensorFile("bad magic".into()));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    let dtype = DType::from_code(head[0])
        .ok_or_else(|| Error::BadTensorFile(format!("unknown dtype code {}", head[0])))?;
    let rank = head[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut dim = [0u8; 8];
        r.read_exact(&mut dim)?;
        shape.push(u64::from_le_bytes(dim) as usize);
    }
    let n = super::numel(&shape);
    match dtype {
        DType::F32 => {
            let mut data = vec![0f32; n];
            for v in data.iter_mut() {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                *v = f32::from_le_bytes(b);
            }
            Tensor::from_f32(rt, &data, &shape)
        }
        DType::F64 => {
            let mut data = vec![0f64; n];
            for v in data.iter_mut() {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
            Tensor::from_f64(rt, &data, &shape)
        }
        DType::I64 => {
            let mut data = vec![0i64; n];
            for v in data.iter_mut() {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                *v = i64::from_le_bytes(b);
            }
            Tensor::from_i64(rt, &data, &shape)
        }
        DType::Bool => {
            let mut bytes = vec![0u8; n];
            r.read_exact(&mut bytes)?;
            let data: Vec<bool> = bytes.into_iter().map(|b| b != 0).collect();
            Tensor::from_bool(rt, &data, &shape)
        }
    }
}

pub fn save(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(t, &mut file)
}

pub fn load(rt: &Runtime, path: impl AsRef<Path>) -> Result<Tensor> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(rt, &mut file)
}
