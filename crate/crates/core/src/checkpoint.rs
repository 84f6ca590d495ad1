//! Binary checkpoints: the model configuration plus every named parameter.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"SFTM"  u32 version
//! u64 config length, config JSON bytes
//! u64 parameter count
//! per parameter: u64 name length, name bytes, u64 rank, rank × u64 dims, f64 values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SFTM";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<()> {
    let io = |e| Error::Checkpoint(format!("write failed: {e}"));
    let config = serde_json::to_vec(&model.config)?;
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(config.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&config).map_err(io)?;
    w.write_all(&(model.params.len() as u64).to_le_bytes()).map_err(io)?;
    for p in model.params.iter() {
        w.write_all(&(p.name.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(p.name.as_bytes()).map_err(io)?;
        w.write_all(&(p.value.shape().len() as u64).to_le_bytes()).map_err(io)?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        let mut buf = Vec::with_capacity(p.value.len() * 8);
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated while reading {what}: {e}")))?;
        Ok(buf)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.bytes(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    /// A length field, bounded so corrupt headers cannot trigger huge allocations.
    fn len(&mut self, what: &str, limit: u64) -> Result<usize> {
        let n = self.u64(what)?;
        if n > limit {
            return Err(Error::Checkpoint(format!("{what} of {n} exceeds limit {limit}")));
        }
        Ok(n as usize)
    }
}

/// Reads a checkpoint, rebuilding the model from its stored configuration.
pub fn read_checkpoint<R: Read>(r: R) -> Result<Model> {
    let mut r = Reader { inner: r };
    if r.bytes(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.bytes(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = r.len("config length", 1 << 24)?;
    let config: ModelConfig = serde_json::from_slice(&r.bytes(len, "config")?)?;
    let mut model = Model::new(config, 0)?;

    let count = r.len("parameter count", 1 << 20)?;
    if count != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "{count} parameters stored, configuration defines {}",
            model.params.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name_len = r.len("name length", 4096)?;
        let name = String::from_utf8(r.bytes(name_len, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = r.len("rank", 8)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.len("dimension", 1 << 32)?);
        }
        let id = model
            .params
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let expected = model.params.value(id).shape().to_vec();
        if shape != expected {
            return Err(Error::Checkpoint(format!("{name}: stored shape {shape:?}, expected {expected:?}")));
        }
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let raw = r.bytes(n * 8, &name)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        model.params.get_mut(id).value = Tensor::new(shape, data)?;
    }
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing).map_err(|e| Error::Checkpoint(e.to_string()))? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last parameter".into()));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(model, std::io::BufWriter::new(file))
}

pub fn load(path: &Path) -> Result<Model> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, ModalityConfig};
    use crate::sparse_fusion::PoolKind;

    fn model() -> Model {
        let config = ModelConfig {
            modalities: vec![
                ModalityConfig { name: "x".into(), input_dim: 2, tokens: 4 },
                ModalityConfig { name: "y".into(), input_dim: 3, tokens: 3 },
            ],
            dim: 4,
            heads: 2,
            unimodal_layers: 1,
            cross_layers: 1,
            keep: vec![2, 1],
            pool: PoolKind::Max,
            num_classes: 2,
            dropout: 0.0,
            mlp_ratio: 1,
            architecture: Architecture::Sft,
        };
        Model::new(config, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.config, m.config);
        for (a, b) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = model();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(read_checkpoint(bad_magic.as_slice()).is_err());

        let mut bad_version = buf.clone();
        bad_version[4] = 9;
        assert!(read_checkpoint(bad_version.as_slice()).is_err());

        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(read_checkpoint(trailing.as_slice()).is_err());
    }
}
