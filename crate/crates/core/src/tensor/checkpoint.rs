//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VHCK" | version: u32
//! repeated until EOF:
//!   name_len: u32 | name: utf-8 bytes | rank: u32 | dims: rank × u32 | values: f32 × Π dims
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::{ParamStore, Result, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VHCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(store: &ParamStore<f32>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, p) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = p.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in p.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> TensorError {
    if e.kind() == ErrorKind::UnexpectedEof {
        TensorError::Format("truncated checkpoint".into())
    } else {
        e.into()
    }
}

/// Load every record. Parameters come back trainable; callers set flags.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let mut store = ParamStore::new();
    loop {
        let mut first = [0u8; 4];
        match r.read(&mut first[..1])? {
            0 => break,
            _ => r.read_exact(&mut first[1..]).map_err(truncated)?,
        }
        let name_len = u32::from_le_bytes(first) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| TensorError::Format("name is not utf-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}
