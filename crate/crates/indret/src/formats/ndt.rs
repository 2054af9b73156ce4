//! Binary tensor dump: magic `NDT1`, u8 rank, little-endian u32 extents,
//! then the row-major payload as little-endian f64.

use std::io::{Read, Write};

use indret_core::Tensor;

use crate::error::{AppError, Result};

pub const MAGIC: &[u8; 4] = b"NDT1";

pub fn write_tensor(w: &mut dyn Write, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    let rank = u8::try_from(t.rank())
        .map_err(|_| AppError::Persistence("tensor rank exceeds 255".into()))?;
    w.write_all(&[rank])?;
    for &e in t.shape() {
        let e = u32::try_from(e)
            .map_err(|_| AppError::Persistence("tensor extent exceeds u32".into()))?;
        w.write_all(&e.to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut dyn Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(AppError::Persistence("bad tensor magic".into()));
    }
    let mut rank = [0u8; 1];
    read_exact(r, &mut rank)?;
    let rank = rank[0] as usize;
    if rank == 0 {
        return Err(AppError::Persistence("zero-rank tensor".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut len: usize = 1;
    for _ in 0..rank {
        let mut buf = [0u8; 4];
        read_exact(r, &mut buf)?;
        let e = u32::from_le_bytes(buf) as usize;
        if e == 0 {
            return Err(AppError::Persistence("zero tensor extent".into()));
        }
        len = len
            .checked_mul(e)
            .ok_or_else(|| AppError::Persistence("tensor size overflow".into()))?;
        shape.push(e);
    }
    if len > (1 << 31) {
        return Err(AppError::Persistence("tensor payload too large".into()));
    }
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        let mut buf = [0u8; 8];
        read_exact(r, &mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::new(shape, data).map_err(|e| AppError::Persistence(e.to_string()))
}

fn read_exact(r: &mut dyn Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| AppError::Persistence("truncated tensor file".into()))
}

pub fn save(path: &std::path::Path, t: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t)
}

pub fn load(path: &std::path::Path) -> Result<Tensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(&mut f)
}
