//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "SQACKPT\0"
//! version u32
//! config  u32 byte length, then canonical config text (UTF-8)
//! count   u32 number of parameter records
//! record  u32 name length, name bytes, u32 rank, rank x u32 dims,
//!         prod(dims) x f32 values
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{Model, ModelConfig, ModelError};
use crate::autodiff::Tensor;
use crate::layers::ParamStore;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"SQACKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: not a checkpoint (bad magic bytes)")]
    BadMagic { path: PathBuf },
    #[error("{path}: checkpoint format version {found}, this build reads version {expected}")]
    UnsupportedVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: corrupt checkpoint: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("checkpoint holds {found}, expected {expected}")]
    ConfigMismatch { expected: String, found: String },
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    let text = model.config().to_text();
    put_u32(&mut buf, text.len() as u32);
    buf.extend_from_slice(text.as_bytes());
    put_u32(&mut buf, model.params().len() as u32);
    for (name, value) in model.params().iter() {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, value.rank() as u32);
        for &d in value.shape() {
            put_u32(&mut buf, d as u32);
        }
        for &v in value.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a checkpoint. With `expected`, the stored config must equal it.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    expected: Option<&ModelConfig>,
) -> Result<Model, CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let corrupt = |reason: String| CheckpointError::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 8 || bytes[..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let mut r = Reader {
        bytes: &bytes,
        pos: 8,
    };
    let version = r.u32().map_err(corrupt)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let text = r.string().map_err(corrupt)?;
    let cfg = ModelConfig::from_text(&text).map_err(|e| corrupt(format!("config block: {e}")))?;
    if let Some(want) = expected {
        if *want != cfg {
            return Err(CheckpointError::ConfigMismatch {
                expected: describe(want),
                found: describe(&cfg),
            });
        }
    }
    let count = r.u32().map_err(corrupt)?;
    let mut params = ParamStore::new();
    for i in 0..count {
        let name = r
            .string()
            .map_err(|e| corrupt(format!("record {i}: {e}")))?;
        let tensor = r
            .tensor()
            .map_err(|e| corrupt(format!("record `{name}`: {e}")))?;
        if params.find(&name).is_some() {
            return Err(corrupt(format!("parameter `{name}` stored twice")));
        }
        params.add(name, tensor);
    }
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Model::from_params(cfg, params).map_err(|e| match e {
        ModelError::Config(m) => corrupt(m),
        other => corrupt(other.to_string()),
    })
}

fn describe(cfg: &ModelConfig) -> String {
    format!(
        "{} [{}]",
        cfg.variant_name(),
        cfg.to_text().trim_end().replace('\n', "; ")
    )
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("unexpected end of file at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String, String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| "text is not UTF-8".to_string())
    }

    fn tensor(&mut self) -> Result<Tensor, String> {
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(format!("implausible rank {rank}"));
        }
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("invalid shape {shape:?}"))?;
        let raw = self.take(n.checked_mul(4).ok_or("shape overflows")?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Tensor::new(shape, data).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::Task;
    use crate::model::tests::random_spec;
    use crate::model::ModelInput;

    fn small(gqt: bool) -> ModelConfig {
        let mut cfg = ModelConfig::new(Task::Mos, gqt, true);
        cfg.channels = vec![2, 2, 4, 4];
        cfg.n_heads = 2;
        cfg.blstm_hidden = 4;
        cfg.fc_hidden = 3;
        cfg
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::new(small(true), 7);
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path, Some(model.config())).unwrap();
        let input = ModelInput::single(random_spec(9, 3));
        let a = model.predict(&input).unwrap();
        let b = loaded.predict(&input).unwrap();
        assert!((a.utterance_score - b.utterance_score).abs() < 1e-6);
        for (x, y) in a.frame_scores.iter().zip(&b.frame_scores) {
            assert!((x - y).abs() < 1e-6);
        }
        // values already at single precision survive exactly
        let again = dir.path().join("again.ckpt");
        save_checkpoint(&loaded, &again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
        let reloaded = load_checkpoint(&again, None).unwrap();
        assert_eq!(reloaded.predict(&input).unwrap(), b);
    }

    #[test]
    fn bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        fs::write(&path, b"RIFF....WAVEfmt ").unwrap();
        assert!(matches!(
            load_checkpoint(&path, None),
            Err(CheckpointError::BadMagic { .. })
        ));
        let mut bytes = CHECKPOINT_MAGIC.to_vec();
        bytes.extend_from_slice(&7u32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path, None),
            Err(CheckpointError::UnsupportedVersion { found: 7, .. })
        ));
    }

    #[test]
    fn truncation_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&Model::new(small(false), 1), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [13, bytes.len() / 2, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            assert!(
                matches!(
                    load_checkpoint(&path, None),
                    Err(CheckpointError::Corrupt { .. })
                ),
                "cut at {cut}"
            );
        }
        let mut longer = bytes.clone();
        longer.push(0);
        fs::write(&path, longer).unwrap();
        assert!(matches!(
            load_checkpoint(&path, None),
            Err(CheckpointError::Corrupt { .. })
        ));
    }

    #[test]
    fn config_mismatch_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&Model::new(small(false), 1), &path).unwrap();
        let err = load_checkpoint(&path, Some(&small(true))).unwrap_err();
        assert!(matches!(err, CheckpointError::ConfigMismatch { .. }));
        assert!(err.to_string().contains("MOSNet+GQT+EL"), "{err}");
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_checkpoint("/nonexistent/x.ckpt", None).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.ckpt"));
    }
}
