//! Binary checkpoint container.
//!
//! Layout (little endian): magic `SSMX`, `u32` version, `u32` header length,
//! UTF-8 TOML header (model config, step count, final loss), `u32` tensor
//! count, then per tensor: `u32` name length, name, `u32` rank, `u64` dims,
//! row-major `f64` data.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ToyModel, ToyModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSMX";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    steps_trained: usize,
    final_loss: f64,
    model: ToyModelConfig,
}

pub fn to_bytes(model: &ToyModel) -> Result<Vec<u8>> {
    let header = Header {
        steps_trained: model.steps_trained,
        final_loss: model.final_loss,
        model: model.config.clone(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::Config(format!("serializing checkpoint header: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let specs = model.tensor_specs();
    out.extend_from_slice(&(specs.len() as u32).to_le_bytes());
    for (spec, data) in specs.iter().zip(model.tensors()) {
        out.extend_from_slice(&(spec.name.len() as u32).to_le_bytes());
        out.extend_from_slice(spec.name.as_bytes());
        out.extend_from_slice(&(spec.shape.len() as u32).to_le_bytes());
        for d in &spec.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<ToyModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("missing SSMX magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = r.u32("header length")? as usize;
    let text = std::str::from_utf8(r.take(hlen, "header")?)
        .map_err(|_| Error::CorruptCheckpoint("header is not UTF-8".into()))?;
    let header: Header = toml::from_str(text).map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
    let mut model = ToyModel::build(&header.model)?;
    model.steps_trained = header.steps_trained;
    model.final_loss = header.final_loss;

    let specs = model.tensor_specs();
    let count = r.u32("tensor count")? as usize;
    if count != specs.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{count} tensors stored, configuration implies {}",
            specs.len()
        )));
    }
    let mut loaded = Vec::with_capacity(count);
    for spec in &specs {
        let nlen = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "tensor name")?)
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?;
        if name != spec.name {
            return Err(Error::CorruptCheckpoint(format!("expected tensor {}, found {name}", spec.name)));
        }
        let rank = r.u32("tensor rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("tensor dim").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != spec.shape {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor {name} has shape {shape:?}, expected {:?}",
                spec.shape
            )));
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(n * 8, name)?;
        loaded.push(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect::<Vec<f64>>(),
        );
    }
    if r.pos != buf.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    for (dst, src) in model.tensors_mut().into_iter().zip(loaded) {
        dst.copy_from_slice(&src);
    }
    for (l, b) in model.blocks.iter().enumerate() {
        b.ssm
            .validate()
            .map_err(|e| Error::CorruptCheckpoint(format!("layer {l}: {e}")))?;
    }
    Ok(model)
}

/// Writes the checkpoint atomically (temporary file then rename).
pub fn save(model: &ToyModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ToyModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VariantKind;

    fn model() -> ToyModel {
        let mut m = ToyModel::build(&ToyModelConfig {
            vocab_size: 9,
            d_model: 8,
            d_state: 3,
            layers: 2,
            variant: VariantKind::Mamba2,
            heads: 4,
            train_length: 32,
            seed: 11,
            ..Default::default()
        })
        .unwrap();
        m.steps_trained = 42;
        m.final_loss = 1.25;
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ssmx");
        save(&m, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, m);
        let toks = [1, 4, 2, 8, 0, 3];
        assert_eq!(m.forward(&toks, None).unwrap().logits, back.forward(&toks, None).unwrap().logits);
        assert_eq!(&std::fs::read(&path).unwrap()[..4], b"SSMX");
    }

    #[test]
    fn untrained_nan_loss_survives() {
        let mut m = model();
        m.final_loss = f64::NAN;
        let back = from_bytes(&to_bytes(&m).unwrap()).unwrap();
        assert!(back.final_loss.is_nan());
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = to_bytes(&model()).unwrap();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            match from_bytes(&bytes[..cut]) {
                Err(Error::CorruptCheckpoint(_)) => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = to_bytes(&model()).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        match from_bytes(&bytes) {
            Err(Error::VersionMismatch { found: 7, expected: 1 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load(Path::new("/nonexistent/m.ssmx")), Err(Error::Io { .. })));
    }
}
