//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "TRIPCKPT"
//! version    u32       currently 1
//! header_len u64
//! header     JSON      stage, seed, architecture specs and fingerprints,
//!                      and an index of {name, shape, offset, len}
//! payload    f32 * N   arrays back to back, in index order
//! digest     32 bytes  SHA-256 of everything above
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ExtractorSpec, HeadSpec, ModelWeights, StageTag};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TRIPCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    stage: StageTag,
    seed: u64,
    extractor_spec: ExtractorSpec,
    extractor_fingerprint: String,
    head_spec: Option<HeadSpec>,
    head_fingerprint: Option<String>,
    arrays: Vec<IndexEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

pub fn encode(weights: &ModelWeights) -> Vec<u8> {
    let mut arrays = Vec::with_capacity(weights.arrays.len());
    let mut offset = 0;
    for (name, (shape, values)) in &weights.arrays {
        arrays.push(IndexEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            len: values.len(),
        });
        offset += values.len();
    }
    let header = Header {
        stage: weights.stage,
        seed: weights.seed,
        extractor_spec: weights.extractor_spec.clone(),
        extractor_fingerprint: weights.extractor_spec.fingerprint(),
        head_spec: weights.head_spec.clone(),
        head_fingerprint: weights.head_spec.as_ref().map(HeadSpec::fingerprint),
        arrays,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + 4 + 8 + header.len() + offset * 4 + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, values) in weights.arrays.values() {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ModelWeights> {
    let corrupt = |reason: &str| Error::Integrity {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing magic header"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("digest mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(&body[20..header_end]).map_err(|e| corrupt(&e.to_string()))?;
    if header.extractor_fingerprint != header.extractor_spec.fingerprint() {
        return Err(corrupt("extractor fingerprint does not match its spec"));
    }
    let payload = &body[header_end..];
    let mut arrays = BTreeMap::new();
    for entry in header.arrays {
        let start = entry.offset * 4;
        let end = start + entry.len * 4;
        if end > payload.len() || entry.shape.iter().product::<usize>() != entry.len {
            return Err(corrupt(&format!("array {} out of bounds", entry.name)));
        }
        let values = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        arrays.insert(entry.name, (entry.shape, values));
    }
    Ok(ModelWeights {
        stage: header.stage,
        seed: header.seed,
        extractor_spec: header.extractor_spec,
        head_spec: header.head_spec,
        arrays,
    })
}

pub fn save_weights(weights: &ModelWeights, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension("ckpt.partial");
    std::fs::write(&tmp, encode(weights)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint without any architecture check.
pub fn read_weights(path: &Path) -> Result<ModelWeights> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Reads a checkpoint and checks that its extractor matches `config`.
pub fn load_weights(path: &Path, config: &ExperimentConfig) -> Result<ModelWeights> {
    let w = read_weights(path)?;
    let want = ExtractorSpec::from_config(config);
    if w.extractor_spec != want {
        return Err(Error::Incompatible(format!(
            "{} was written for extractor {} ({:?}), config expects {} ({:?})",
            path.display(),
            w.extractor_spec.fingerprint(),
            w.extractor_spec,
            want.fingerprint(),
            want
        )));
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_model, HeadKind, Module};
    use crate::config::default_config;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config() -> ExperimentConfig {
        let mut c = default_config();
        c.input_shape = [17, 17, 17];
        c.base_channels = 2;
        c.latent_dim = 8;
        c.head_hidden_dim = 4;
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = config();
        let (e, h) = init_model(&c, HeadKind::Cls, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let w = ModelWeights::capture(StageTag::PsiFinal, 4, &e, Some(&h));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_weights(&w, &p).unwrap();
        let back = load_weights(&p, &c).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.extractor(&e.spec).unwrap().checksum(), e.checksum());
    }

    #[test]
    fn flipped_byte_is_an_integrity_error() {
        let c = config();
        let (e, _) = init_model(&c, HeadKind::Ssl, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut bytes = encode(&ModelWeights::capture(StageTag::ThetaPrime, 0, &e, None));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode(&bytes, Path::new("x")), Err(Error::Integrity { .. })));
        assert!(matches!(decode(b"not a checkpoint at all, clearly", Path::new("x")), Err(Error::Integrity { .. })));
    }

    #[test]
    fn latent_dim_mismatch_is_incompatible() {
        let mut c = config();
        c.latent_dim = 16;
        let (e, _) = init_model(&c, HeadKind::Ssl, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_weights(&ModelWeights::capture(StageTag::ThetaPrime, 0, &e, None), &p).unwrap();
        c.latent_dim = 8;
        assert!(matches!(load_weights(&p, &c), Err(Error::Incompatible(_))));
    }
}
