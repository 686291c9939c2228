//! Binary checkpoints and the on-disk cache of trained models.
//!
//! Layout: 8-byte magic, `u32` LE format version, `u64` LE manifest length,
//! the JSON manifest, then every parameter as an `f64` LE in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use mtsad_core::ccg::{CcgConfig, CcgModel, LinearAr, ModelParams, ParamBlock};
use mtsad_core::Matrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 8] = b"MTSADCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("payload holds {got} values, manifest wants {want}")]
    Payload { got: usize, want: usize },
    #[error(transparent)]
    Core(#[from] mtsad_core::Error),
}

/// A fitted detector that can be scored and persisted.
#[derive(Debug, Clone, PartialEq)]
pub enum Trained {
    Ccg(CcgModel),
    LinearAr(LinearAr),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Manifest {
    Ccg {
        config: CcgConfig,
        window: usize,
        channels: usize,
        /// Blocks with empty `data`; values live in the payload.
        blocks: Vec<ParamBlock>,
        prior: Matrix,
    },
    LinearAr {
        order: usize,
        channels: usize,
    },
}

impl Trained {
    pub fn param_count(&self) -> usize {
        match self {
            Trained::Ccg(m) => m.param_count(),
            Trained::LinearAr(m) => m.param_count(),
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Trained::Ccg(m) => m.params.channels,
            Trained::LinearAr(m) => m.channels(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let (manifest, payload) = match self {
            Trained::Ccg(m) => {
                let p = &m.params;
                let blocks = p.blocks.iter().map(|b| ParamBlock { data: Vec::new(), ..b.clone() }).collect();
                let manifest = Manifest::Ccg {
                    config: m.config.clone(),
                    window: p.window,
                    channels: p.channels,
                    blocks,
                    prior: p.prior.clone(),
                };
                (manifest, p.flat_view())
            }
            Trained::LinearAr(m) => {
                (Manifest::LinearAr { order: m.order, channels: m.channels() }, m.coefs.as_slice().to_vec())
            }
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serialises");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 20 {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json = bytes.get(20..20 + n).ok_or(CheckpointError::Truncated)?;
        let manifest: Manifest = serde_json::from_slice(json)?;
        let raw = &bytes[20 + n..];
        if raw.len() % 8 != 0 {
            return Err(CheckpointError::Truncated);
        }
        let payload: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        match manifest {
            Manifest::Ccg { config, window, channels, blocks, prior } => {
                let want: usize = blocks.iter().map(|b| b.shape.iter().product::<usize>()).sum();
                if payload.len() != want {
                    return Err(CheckpointError::Payload { got: payload.len(), want });
                }
                let mut at = 0;
                let blocks = blocks
                    .into_iter()
                    .map(|b| {
                        let len = b.shape.iter().product::<usize>();
                        at += len;
                        ParamBlock { data: payload[at - len..at].to_vec(), ..b }
                    })
                    .collect();
                let params = ModelParams { window, channels, blocks, prior };
                Ok(Trained::Ccg(CcgModel { config, params }))
            }
            Manifest::LinearAr { order, channels } => {
                if payload.len() != order * channels {
                    return Err(CheckpointError::Payload { got: payload.len(), want: order * channels });
                }
                Ok(Trained::LinearAr(LinearAr { order, coefs: Matrix::from_vec(channels, order, payload)? }))
            }
        }
    }
}

/// Write via a temporary sibling and rename, so readers never see a
/// partial file.
pub fn save(path: &Path, model: &Trained) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, model.encode())?;
    fs::rename(tmp, path)
}

pub fn load(path: &Path) -> anyhow::Result<Trained> {
    let bytes = fs::read(path)?;
    Ok(Trained::decode(&bytes)?)
}

/// Lowercase hex SHA-256 of the JSON form of `key`.
pub fn digest<T: Serialize>(key: &T) -> String {
    let json = serde_json::to_vec(key).expect("key serialises");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// Trained models keyed by everything that determines them.
#[derive(Debug, Clone)]
pub struct CheckpointCache {
    pub dir: PathBuf,
}

impl CheckpointCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn model_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.ckpt"))
    }

    pub fn trace_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.trace.csv"))
    }

    /// `None` when absent or unreadable; a corrupt entry is retrained.
    pub fn get(&self, key: &str) -> Option<Trained> {
        let path = self.model_path(key);
        if !path.is_file() {
            return None;
        }
        match load(&path) {
            Ok(m) => Some(m),
            Err(e) => {
                log::warn!("ignoring checkpoint {}: {e}", path.display());
                None
            }
        }
    }

    pub fn put(&self, key: &str, model: &Trained) -> std::io::Result<()> {
        save(&self.model_path(key), model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ccg_round_trip_is_exact() {
        let cfg = CcgConfig { use_patch_view: true, use_temp_view: true, d_model: 8, ..CcgConfig::default() };
        let m = Trained::Ccg(CcgModel::new(cfg, 16, 3, 5).unwrap());
        let bytes = m.encode();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(Trained::decode(&bytes).unwrap(), m);
        assert!(matches!(Trained::decode(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated)));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Trained::decode(&bad), Err(CheckpointError::BadMagic)));
        let short = bytes[..bytes.len() - 8].to_vec();
        assert!(matches!(Trained::decode(&short), Err(CheckpointError::Payload { .. })));
    }

    #[test]
    fn linear_ar_round_trip_and_cache() {
        let m =
            Trained::LinearAr(LinearAr { order: 2, coefs: Matrix::from_fn(3, 2, |i, j| i as f64 - 0.25 * j as f64) });
        assert_eq!(Trained::decode(&m.encode()).unwrap(), m);
        let dir = tempfile::tempdir().unwrap();
        let cache = CheckpointCache::new(dir.path());
        let key = digest(&("linear_ar", 2, 0u64));
        assert_eq!(key.len(), 64);
        assert!(cache.get(&key).is_none());
        cache.put(&key, &m).unwrap();
        assert_eq!(cache.get(&key), Some(m));
        fs::write(cache.model_path(&key), b"junk").unwrap();
        assert!(cache.get(&key).is_none());
    }
}
