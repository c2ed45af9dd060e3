//! Flat binary tensor files: the 8-byte magic `RAVTNSR1`, a little-endian
//! `u32` rank, one little-endian `u32` per extent, then the row-major
//! little-endian `f64` payload.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RAVTNSR1";

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::TensorFormat(format!("extent {e} exceeds u32")))?;
        w.write_all(&e.to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::TensorFormat("missing magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::TensorFormat(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)
        .map_err(|_| Error::TensorFormat("missing rank".into()))?;
    let rank = u32::from_le_bytes(word) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut word)
            .map_err(|_| Error::TensorFormat("truncated shape".into()))?;
        shape.push(u32::from_le_bytes(word) as usize);
    }
    let len: usize = shape.iter().product();
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::TensorFormat(format!("payload shorter than {len} values")))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape, data)
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor> {
    let file = std::fs::File::open(path)?;
    read_tensor(std::io::BufReader::new(file))
}
