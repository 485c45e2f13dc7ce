//! Versioned binary checkpoints.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "SCFCKPT\0"
//! 8       4     format version, u32 little-endian
//! 12      8     header length H in bytes, u64 little-endian
//! 20      H     UTF-8 JSON header
//! 20+H    ...   payload: f64 little-endian values
//! ```
//!
//! The header lists every tensor with its group (`param` or `extra`), name,
//! shape and byte offset into the payload, and carries the payload length
//! and its SHA-256 digest. Tensors are stored contiguously in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::forecaster::{check_params, Forecaster, ModelConfig, ParamStore};

pub const MAGIC: [u8; 8] = *b"SCFCKPT\0";
pub const VERSION: u32 = 1;
const PREFIX_LEN: usize = 20;

/// How model inputs are normalized; recorded so a reader can reproduce it.
pub const NORMALIZATION: &str = "per-window per-channel z-score, std = sqrt(var + 1e-5)";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Group {
    Param,
    Extra,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    group: Group,
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    normalization: String,
    tensors: Vec<Entry>,
    state: serde_json::Value,
    payload_bytes: u64,
    payload_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: ParamStore,
    /// Auxiliary tensors such as optimizer moments.
    pub extra: ParamStore,
    /// Opaque resumable state (trainer counters, metrics so far).
    pub state: serde_json::Value,
}

fn corrupt(msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("corrupt checkpoint: {msg}"))
}

impl Checkpoint {
    pub fn from_model(model: &Forecaster, step: u64) -> Self {
        Self {
            config: model.config().clone(),
            step,
            params: model.params().clone(),
            extra: ParamStore::new(),
            state: serde_json::Value::Null,
        }
    }

    pub fn model(&self) -> Result<Forecaster> {
        Forecaster::from_params(self.config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::with_capacity(8 * (self.params.num_scalars() + self.extra.num_scalars()));
        let mut tensors = Vec::with_capacity(self.params.len() + self.extra.len());
        for (group, store) in [(Group::Param, &self.params), (Group::Extra, &self.extra)] {
            for (name, t) in store.iter() {
                tensors.push(Entry {
                    group,
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset: payload.len() as u64,
                });
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            normalization: NORMALIZATION.to_string(),
            tensors,
            state: self.state.clone(),
            payload_bytes: payload.len() as u64,
            payload_sha256: format!("{:x}", Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses and fully validates a checkpoint; nothing is returned unless
    /// every check passes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREFIX_LEN {
            return Err(corrupt(format!(
                "file is {} bytes, shorter than the prefix",
                bytes.len()
            )));
        }
        if bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, this build reads version {VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|h| h.checked_add(PREFIX_LEN))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt("header extends past end of file"))?;
        let header: Header =
            serde_json::from_slice(&bytes[PREFIX_LEN..header_end]).map_err(|e| corrupt(format!("header: {e}")))?;
        let payload = &bytes[header_end..];
        if payload.len() as u64 != header.payload_bytes {
            return Err(corrupt(format!(
                "payload is {} bytes, header declares {}",
                payload.len(),
                header.payload_bytes
            )));
        }
        if format!("{:x}", Sha256::digest(payload)) != header.payload_sha256 {
            return Err(corrupt("payload checksum mismatch"));
        }
        let mut params = ParamStore::new();
        let mut extra = ParamStore::new();
        let mut expected_offset = 0u64;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected_offset || e.offset + 8 * n as u64 > header.payload_bytes {
                return Err(corrupt(format!("tensor {} has an inconsistent offset", e.name)));
            }
            let start = e.offset as usize;
            let data = payload[start..start + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let store = match e.group {
                Group::Param => &mut params,
                Group::Extra => &mut extra,
            };
            store
                .insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)
                .map_err(corrupt)?;
            expected_offset += 8 * n as u64;
        }
        if expected_offset != header.payload_bytes {
            return Err(corrupt("payload holds bytes no tensor claims"));
        }
        header.config.validate()?;
        check_params(&header.config, &params)?;
        Ok(Self {
            config: header.config,
            step: header.step,
            params,
            extra,
            state: header.state,
        })
    }

    /// Writes to a sibling temporary file, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Rejects the checkpoint unless its config equals `expected`, naming
    /// every differing key.
    pub fn expect_config(&self, expected: &ModelConfig) -> Result<()> {
        let diff = config_diff(expected, &self.config)?;
        if diff.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "checkpoint config differs from the requested config: {}",
                diff.join("; ")
            )))
        }
    }
}

/// `key: expected -> found` for every field that differs.
pub fn config_diff(expected: &ModelConfig, found: &ModelConfig) -> Result<Vec<String>> {
    let a = serde_json::to_value(expected)?;
    let b = serde_json::to_value(found)?;
    let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else {
        return Err(Error::Contract("config does not serialize to an object".into()));
    };
    let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    Ok(keys
        .into_iter()
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| {
            let show = |v: Option<&serde_json::Value>| v.map_or("<absent>".to_string(), |v| v.to_string());
            format!("{k}: {} -> {}", show(a.get(k)), show(b.get(k)))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config() -> ModelConfig {
        ModelConfig {
            input_len: 32,
            horizon: 8,
            channels: 2,
            d_model: 8,
            d_attn: 8,
            j_max: 3,
            strides: vec![1, 2],
            mrta_layers: 1,
            seed: 5,
            ..ModelConfig::default()
        }
    }

    fn sample() -> Checkpoint {
        let model = Forecaster::new(config()).unwrap();
        let mut ck = Checkpoint::from_model(&model, 17);
        ck.extra = model.params().zeros_like();
        ck.extra.get_mut("head.bias").unwrap().data_mut()[0] = f64::MIN_POSITIVE / 3.0;
        ck.state = serde_json::json!({"epoch": 2});
        ck
    }

    #[test]
    fn roundtrip_preserves_forward_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::new(vec![32, 2], (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let a = ck.model().unwrap().predict(&x).unwrap();
        let b = back.model().unwrap().predict(&x).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(!dir.path().join("m.ckpt.tmp").exists());
    }

    #[test]
    fn truncated_and_damaged_files() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 5, PREFIX_LEN, PREFIX_LEN + 10, bytes.len() - 8, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Checkpoint(msg)) => assert!(msg.contains("corrupt"), "{msg}"),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&(VERSION + 1).to_le_bytes());
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("version"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mismatched_config_names_keys() {
        let ck = sample();
        let other = ModelConfig {
            d_model: 16,
            use_safe: false,
            ..config()
        };
        match ck.expect_config(&other) {
            Err(Error::Checkpoint(msg)) => {
                assert!(msg.contains("d_model") && msg.contains("use_safe"), "{msg}");
                assert!(!msg.contains("horizon"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        assert!(ck.expect_config(&config()).is_ok());
    }

    #[test]
    fn parameter_set_must_match_config() {
        let mut ck = sample();
        ck.config.use_safe = false;
        match Checkpoint::from_bytes(&ck.to_bytes().unwrap()) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("safe.w_alpha"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }
}
