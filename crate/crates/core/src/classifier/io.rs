use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Model;
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 5] = b"ASTM1";

/// `ASTM1`, u32 layer-width count, u32 widths, u64 init seed, f32 parameters.
pub fn write_model<W: Write>(model: &Model, w: &mut W) -> std::io::Result<()> {
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&(model.widths().len() as u32).to_le_bytes())?;
    for &width in model.widths() {
        w.write_all(&(width as u32).to_le_bytes())?;
    }
    w.write_all(&model.init_seed().to_le_bytes())?;
    for &p in model.params() {
        w.write_all(&(p as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_model<R: Read>(r: &mut R) -> Result<Model> {
    let mut pos = 0usize;
    let mut take = |r: &mut R, buf: &mut [u8]| -> Result<()> {
        r.read_exact(buf).map_err(|_| Error::parse(format!("byte {pos}"), "truncated model"))?;
        pos += buf.len();
        Ok(())
    };
    let mut magic = [0u8; 5];
    take(r, &mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::parse("byte 0", "not an ASTM1 model"));
    }
    let mut b4 = [0u8; 4];
    take(r, &mut b4)?;
    let count = u32::from_le_bytes(b4) as usize;
    if !(2..=64).contains(&count) {
        return Err(Error::parse("byte 5", format!("implausible layer count {count}")));
    }
    let mut widths = Vec::with_capacity(count);
    for _ in 0..count {
        take(r, &mut b4)?;
        widths.push(u32::from_le_bytes(b4) as usize);
    }
    let mut b8 = [0u8; 8];
    take(r, &mut b8)?;
    let init_seed = u64::from_le_bytes(b8);
    let n: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        take(r, &mut b4)?;
        params.push(f32::from_le_bytes(b4) as f64);
    }
    Model::from_parts(widths, params, init_seed)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_model(model, &mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(&mut BufReader::new(file))
}
