//! Binary checkpoints: magic bytes, a length-prefixed JSON manifest, then
//! every parameter as little-endian `f64` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LatticeLm, LatticeSpec, ModelConfig};
use crate::train::TrainConfig;
use crate::vocab::{ChunkVocab, Preprocessor};

pub const MAGIC: &[u8; 8] = b"LATLMCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in `f64` elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub model: ModelConfig,
    pub preprocessor: Preprocessor,
    pub training: Option<TrainConfig>,
    pub vocab: ChunkVocab,
    pub arrays: Vec<ArrayEntry>,
}

/// A model together with everything needed to score raw text again.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: LatticeLm,
    pub preprocessor: Preprocessor,
    pub training: Option<TrainConfig>,
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::with_capacity(self.model.params.len());
        let mut offset = 0;
        for (_, p) in self.model.params.iter() {
            arrays.push(ArrayEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            });
            offset += p.value.len();
        }
        let manifest = Manifest {
            version: FORMAT_VERSION,
            model: self.model.config.clone(),
            preprocessor: self.preprocessor,
            training: self.training.clone(),
            vocab: self.model.vocab.clone(),
            arrays,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| malformed(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.model.params.iter() {
            for x in p.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(malformed("missing magic header"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16usize.saturating_add(len))
            .ok_or_else(|| malformed("truncated manifest"))?;
        let value: serde_json::Value = serde_json::from_slice(json).map_err(|e| malformed(e.to_string()))?;
        let version = value.get("version").and_then(|v| v.as_u64());
        if version != Some(FORMAT_VERSION as u64) {
            return Err(malformed(format!(
                "unsupported format version {version:?} (expected {FORMAT_VERSION})"
            )));
        }
        let mut manifest: Manifest = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        manifest.vocab.reindex()?;
        let payload = &bytes[16 + len..];
        if payload.len() % 8 != 0 {
            return Err(malformed(format!("payload of {} bytes is not a whole number of floats", payload.len())));
        }
        let floats: Vec<f64> = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();

        let mut model = LatticeLm::new(manifest.model, manifest.vocab, 0)?;
        if manifest.arrays.len() != model.params.len() {
            return Err(malformed(format!(
                "{} arrays listed, model has {}",
                manifest.arrays.len(),
                model.params.len()
            )));
        }
        let expected: usize = model.params.total_size();
        if floats.len() != expected {
            return Err(malformed(format!(
                "payload holds {} floats, expected {expected}",
                floats.len()
            )));
        }
        let ids: Vec<_> = model.params.ids().collect();
        for (id, entry) in ids.into_iter().zip(&manifest.arrays) {
            let name = model.params.name(id).to_string();
            let t = model.params.get_mut(id);
            if entry.name != name || entry.shape != t.shape() {
                return Err(malformed(format!(
                    "array {:?} {:?} does not match model array {name:?} {:?}",
                    entry.name,
                    entry.shape,
                    t.shape()
                )));
            }
            let n = t.len();
            let src = floats
                .get(entry.offset..entry.offset + n)
                .ok_or_else(|| malformed(format!("array {name:?} runs past the payload")))?;
            t.data_mut().copy_from_slice(src);
        }
        Ok(Checkpoint {
            model,
            preprocessor: manifest.preprocessor,
            training: manifest.training,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rejects lattice options that contradict the stored model.
    pub fn check_lattice(&self, lattice_size: Option<usize>, senses: Option<usize>) -> Result<()> {
        let stored = self.model.config.lattice;
        let clash = match stored {
            LatticeSpec::Chunk { max_len } => {
                lattice_size.is_some_and(|l| l != max_len) || senses.is_some_and(|e| e > 1)
            }
            LatticeSpec::Sense { senses: e } => {
                lattice_size.is_some_and(|l| l > 1) || senses.is_some_and(|s| s != e)
            }
        };
        if clash {
            return Err(Error::Config(format!(
                "checkpoint was trained with {}; requested {}",
                describe(stored),
                match (lattice_size, senses) {
                    (Some(l), Some(e)) => format!("L={l}, E={e}"),
                    (Some(l), None) => format!("L={l}"),
                    (None, Some(e)) => format!("E={e}"),
                    (None, None) => "defaults".into(),
                }
            )));
        }
        Ok(())
    }
}

pub fn describe(lattice: LatticeSpec) -> String {
    match lattice {
        LatticeSpec::Chunk { max_len } => format!("a dense lattice of size L={max_len}"),
        LatticeSpec::Sense { senses } => format!("a multilattice with E={senses}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{Mode, TokenVocab};

    fn checkpoint(lattice: LatticeSpec) -> Checkpoint {
        let tokens = TokenVocab::from_surfaces(&["a", "b", "c"]).unwrap();
        let vocab = match lattice {
            LatticeSpec::Chunk { max_len } => ChunkVocab::from_parts(tokens, vec![vec![3, 4]], max_len).unwrap(),
            LatticeSpec::Sense { .. } => ChunkVocab::from_parts(tokens, vec![], 1).unwrap(),
        };
        let config = ModelConfig {
            lattice,
            embed_dim: 4,
            hidden_dim: 3,
            layers: 2,
            sub_hidden_dim: 2,
            context_free_head: false,
        };
        Checkpoint {
            model: LatticeLm::new(config, vocab, 3).unwrap(),
            preprocessor: Preprocessor::new(Mode::Word, 50),
            training: Some(TrainConfig {
                clip: f64::INFINITY,
                ..TrainConfig::default()
            }),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = checkpoint(LatticeSpec::Chunk { max_len: 2 });
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.model.params, ck.model.params);
        assert_eq!(back.model.vocab, ck.model.vocab);
        assert_eq!(back.training, ck.training);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = checkpoint(LatticeSpec::Sense { senses: 2 }).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0; 8]);
        assert!(Checkpoint::from_bytes(&longer).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad_magic).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..20]).is_err());

        let key = b"\"version\":1";
        let pos = bytes.windows(key.len()).position(|w| w == key).unwrap();
        let mut wrong_version = bytes.clone();
        wrong_version[pos + 10] = b'7';
        let err = Checkpoint::from_bytes(&wrong_version).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn lattice_flags_must_agree() {
        let sense = checkpoint(LatticeSpec::Sense { senses: 2 });
        assert!(sense.check_lattice(Some(2), None).is_err());
        assert!(sense.check_lattice(None, Some(3)).is_err());
        assert!(sense.check_lattice(None, Some(2)).is_ok());
        assert!(sense.check_lattice(Some(1), None).is_ok());
        let chunk = checkpoint(LatticeSpec::Chunk { max_len: 2 });
        assert!(chunk.check_lattice(Some(2), Some(1)).is_ok());
        assert!(chunk.check_lattice(Some(3), None).is_err());
        assert!(chunk.check_lattice(None, Some(2)).is_err());
    }
}
