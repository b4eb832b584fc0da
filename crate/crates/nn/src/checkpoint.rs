//! Versioned binary checkpoint container.
//!
//! Layout (little endian):
//! `ADKDCKPT` | u32 version | u32 len + model config JSON | 64-byte hex config hash |
//! u32 tensor count | per tensor: u32 len + name, u32 rank, u64 dims.., f64 values..

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{NnError, Result};
use crate::model::{ModelConfig, TinyTransformerLM};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"ADKDCKPT";
pub const FORMAT_VERSION: u32 = 1;

pub fn save(model: &TinyTransformerLM, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    write_u32(&mut w, config.len())?;
    w.write_all(&config)?;
    w.write_all(model.config().hash().as_bytes())?;
    let params = model.params();
    write_u32(&mut w, params.len())?;
    for (name, t) in params.iter() {
        write_u32(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        write_u32(&mut w, t.shape().len())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TinyTransformerLM> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint("bad magic header".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(NnError::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = read_u32(&mut r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let config: ModelConfig = serde_json::from_slice(&json)
        .map_err(|e| NnError::Checkpoint(format!("config: {e}")))?;
    let mut hash = [0u8; 64];
    r.read_exact(&mut hash)?;
    if hash != config.hash().as_bytes() {
        return Err(NnError::Checkpoint("config hash mismatch".into()));
    }
    let count = read_u32(&mut r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let n = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| NnError::Checkpoint("tensor name".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        store.insert(name, Tensor::new(shape, data)?);
    }
    let mut model = TinyTransformerLM::new(config, 0)?;
    model.load_params(&store)?;
    Ok(model)
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| NnError::Checkpoint("length overflow".into()))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 9,
            context_length: 6,
            layers: 1,
            heads: 2,
            width: 4,
            mlp_ratio: 2,
            tied_head: false,
            init_std: 0.1,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = TinyTransformerLM::new(cfg(), 5).unwrap();
        save(&m, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(m.params(), back.params());
        assert_eq!(m.config(), back.config());
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"NOTACKPTxxxxxxxx").unwrap();
        assert!(matches!(load(&path), Err(NnError::Checkpoint(_))));
    }

    #[test]
    fn detects_tampered_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&TinyTransformerLM::new(cfg(), 5).unwrap(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // flip a digit inside the JSON ("vocab_size":9 -> 8)
        let pos = bytes.windows(2).position(|w| w == b":9").unwrap();
        bytes[pos + 1] = b'8';
        std::fs::write(&path, bytes).unwrap();
        assert!(load(&path).is_err());
    }
}
