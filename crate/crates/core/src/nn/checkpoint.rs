//! Binary checkpoint: magic `CTXT1`, a little-endian `u64` byte length, a
//! UTF-8 JSON manifest of that length, then the raw little-endian arrays.
//! Manifest offsets are relative to the start of the array section.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"CTXT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<ManifestEntry>,
}

pub fn write_checkpoint<W: Write>(out: &mut W, params: &ParamStore, dtype: DType) -> Result<()> {
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for p in params.iter() {
        entries.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype,
            offset,
        });
        offset += (p.value.len() * dtype.width()) as u64;
    }
    let manifest = serde_json::to_vec(&Manifest { tensors: entries })?;
    out.write_all(MAGIC)?;
    out.write_all(&(manifest.len() as u64).to_le_bytes())?;
    out.write_all(&manifest)?;
    let mut buf = Vec::with_capacity(offset as usize);
    for p in params.iter() {
        for &x in p.value.data() {
            match dtype {
                DType::F64 => buf.extend_from_slice(&x.to_le_bytes()),
                DType::F32 => buf.extend_from_slice(&(x as f32).to_le_bytes()),
            }
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads every tensor of a checkpoint into a fresh store, in manifest order.
pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<ParamStore> {
    let mut magic = [0u8; 5];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut manifest = vec![0u8; len];
    input.read_exact(&mut manifest)?;
    let manifest: Manifest = serde_json::from_slice(&manifest)?;
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let w = e.dtype.width();
        let start = e.offset as usize;
        let end = start + n * w;
        if end > data.len() {
            return Err(Error::Checkpoint(format!("tensor `{}` runs past end of file", e.name)));
        }
        let values = data[start..end]
            .chunks_exact(w)
            .map(|b| match e.dtype {
                DType::F64 => f64::from_le_bytes(b.try_into().unwrap()),
                DType::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
            })
            .collect();
        store.add(&e.name, Tensor::new(e.shape.clone(), values)?);
    }
    Ok(store)
}

pub fn save(path: &Path, params: &ParamStore) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, params, DType::F64)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.add_normal("a.w", &[3, 4], 1.0, &mut rng);
        s.add("b", Tensor::new(vec![2], vec![f64::MIN_POSITIVE, -0.0]).unwrap());
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &s, DType::F64).unwrap();
        assert_eq!(&bytes[..5], MAGIC);
        let back = read_checkpoint(&mut bytes.as_slice()).unwrap();
        for (x, y) in s.iter().zip(back.iter()) {
            assert_eq!(x.name, y.name);
            let xb: Vec<u64> = x.value.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        let mut again = Vec::new();
        write_checkpoint(&mut again, &back, DType::F64).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn f32_checkpoint_rounds() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![1], vec![0.1]).unwrap());
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &s, DType::F32).unwrap();
        let back = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.value(back.id("w").unwrap()).item(), 0.1f32 as f64);
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(read_checkpoint(&mut &b"NOPE1\0\0\0\0\0\0\0\0"[..]).is_err());
    }
}
