use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::params::Model;
use crate::error::{Error, Result};
use crate::io::{expect_magic, read_tensor_payload, read_u16, read_u32, write_tensor_payload};
use crate::tensor::{Dims3, Tensor4};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"N3CK";

/// `N3CK`, the config words, then every parameter in layout order as
/// `(u16 name length, name, N3DT payload with dims 1 x 1 x rows x cols)`.
pub fn write_checkpoint(w: &mut impl Write, model: &Model) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for word in model.config().to_words() {
        w.write_all(&word.to_le_bytes())?;
    }
    for (name, m) in model.named() {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name {name:?} too long")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let t = Tensor4::from_matrix(Dims3::new(1, 1, m.rows()), m.clone())?;
        write_tensor_payload(w, &t)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Model> {
    expect_magic(r, CHECKPOINT_MAGIC)?;
    let words = (0..ModelConfig::WORDS).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
    let config = ModelConfig::from_words(&words)?;
    let layout = super::params::ParamLayout::new(&config);
    let mut values = Vec::with_capacity(layout.names.len());
    for (expected, &(rows, cols)) in layout.names.iter().zip(&layout.shapes) {
        let len = read_u16(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        if name != expected.as_bytes() {
            return Err(Error::Format(format!(
                "expected tensor {expected:?}, found {:?}",
                String::from_utf8_lossy(&name)
            )));
        }
        let t = read_tensor_payload(r)?;
        let dims = t.dims();
        if (dims.h, dims.w, dims.s, t.width()) != (1, 1, rows, cols) {
            return Err(Error::Format(format!("tensor {expected} has dims {dims}x{}, expected 1x1x{rows}x{cols}", t.width())));
        }
        values.push(t.into_matrix());
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Model::from_parts(config, values)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
