//! Little-endian binary formats: tensors (`N3DT`) and token grids (`N3TG`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::codec::TokenGrid;
use crate::error::{Error, Result};
use crate::tensor::{Dims3, Tensor4};

pub const TENSOR_MAGIC: &[u8; 4] = b"N3DT";
pub const TOKENS_MAGIC: &[u8; 4] = b"N3TG";

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn expect_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format("file too short for magic bytes".into()))?;
    if &b != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&b),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

/// `h, w, s, d` followed by the data, without magic.
pub(crate) fn write_tensor_payload(w: &mut impl Write, t: &Tensor4) -> Result<()> {
    let dims = t.dims();
    for v in [dims.h, dims.w, dims.s, t.width()] {
        w.write_all(&to_u32(v, "tensor dim")?.to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_tensor_payload(r: &mut impl Read) -> Result<Tensor4> {
    let h = read_u32(r)? as usize;
    let w = read_u32(r)? as usize;
    let s = read_u32(r)? as usize;
    let d = read_u32(r)? as usize;
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(s))
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("tensor dims {h}x{w}x{s}x{d} overflow")))?;
    let mut data = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        data.push(read_f64(r)?);
    }
    Tensor4::from_vec(Dims3::new(h, w, s), d, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor4) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    write_tensor_payload(w, t)
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor4> {
    expect_magic(r, TENSOR_MAGIC)?;
    read_tensor_payload(r)
}

pub fn write_tokens(w: &mut impl Write, g: &TokenGrid) -> Result<()> {
    w.write_all(TOKENS_MAGIC)?;
    let dims = g.dims();
    for v in [dims.h, dims.w, dims.s, g.vocab()] {
        w.write_all(&to_u32(v, "token grid header")?.to_le_bytes())?;
    }
    for id in g.ids() {
        w.write_all(&id.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tokens(r: &mut impl Read) -> Result<TokenGrid> {
    expect_magic(r, TOKENS_MAGIC)?;
    let h = read_u32(r)? as usize;
    let w = read_u32(r)? as usize;
    let s = read_u32(r)? as usize;
    let vocab = read_u32(r)? as usize;
    let n = h * w * s;
    let ids = (0..n).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
    TokenGrid::new(Dims3::new(h, w, s), vocab, ids).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor4) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor4> {
    read_tensor(&mut BufReader::new(File::open(path)?))
}

pub fn save_tokens(path: impl AsRef<Path>, g: &TokenGrid) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tokens(&mut w, g)?;
    w.flush()?;
    Ok(())
}

pub fn load_tokens(path: impl AsRef<Path>) -> Result<TokenGrid> {
    read_tokens(&mut BufReader::new(File::open(path)?))
}
