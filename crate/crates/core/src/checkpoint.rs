//! Checkpoint file: `DSMC`, u32 LE version, u64 LE manifest length, JSON
//! manifest, then the tensors as contiguous little-endian f32.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;
use crate::training::SgdState;

pub const MAGIC: [u8; 4] = *b"DSMC";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;
const MOMENTUM_PREFIX: &str = "momentum.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Learnable,
    Buffer,
    Momentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub kind: TensorKind,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
    pub step: u64,
    pub epoch: usize,
    pub config: serde_json::Value,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub state: SgdState,
    /// Configuration the checkpoint was produced with.
    pub config: serde_json::Value,
}

pub fn encode_checkpoint(params: &ParamStore<f32>, state: &SgdState, config: &serde_json::Value) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    let mut push = |name: String, t: &Tensor<f32>, kind: TensorKind| {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            kind,
            byte_offset: offset,
            byte_len: payload.len() as u64 - offset,
        });
    };
    for (name, t, kind) in params.iter() {
        let kind = match kind {
            ParamKind::Learnable => TensorKind::Learnable,
            ParamKind::Buffer => TensorKind::Buffer,
        };
        push(name.to_string(), t, kind);
    }
    for (name, t, _) in state.velocity.iter() {
        push(format!("{MOMENTUM_PREFIX}{name}"), t, TensorKind::Momentum);
    }
    let manifest = Manifest {
        tensors: entries,
        step: state.step,
        epoch: state.epoch,
        config: config.clone(),
        crc32: crc32fast::hash(&payload),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn manifest_err(name: &str, detail: String) -> Error {
    Error::Manifest {
        name: name.to_string(),
        detail,
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated(format!("{} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::BadVersion {
            found: version,
            expected: VERSION,
        });
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rest = &bytes[HEADER_LEN..];
    if manifest_len > rest.len() as u64 {
        return Err(Error::Truncated(format!(
            "manifest of {manifest_len} bytes, {} available",
            rest.len()
        )));
    }
    let (json, payload) = rest.split_at(manifest_len as usize);
    let manifest: Manifest = serde_json::from_slice(json)?;

    let needed = manifest.tensors.iter().map(|e| e.byte_len).sum::<u64>();
    if (payload.len() as u64) < needed {
        return Err(Error::Truncated(format!(
            "payload has {} bytes, manifest lists {needed}",
            payload.len()
        )));
    }
    let mut expected_offset = 0u64;
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(manifest_err(&e.name, format!("unsupported dtype `{}`", e.dtype)));
        }
        let elems = e.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        if elems.and_then(|n| n.checked_mul(4)) != Some(e.byte_len) {
            return Err(manifest_err(
                &e.name,
                format!("shape {:?} needs {} bytes, entry has {}", e.shape, elems.unwrap_or(u64::MAX).saturating_mul(4), e.byte_len),
            ));
        }
        if e.byte_offset != expected_offset {
            return Err(manifest_err(
                &e.name,
                format!("byte offset {} where {expected_offset} expected", e.byte_offset),
            ));
        }
        expected_offset += e.byte_len;
    }
    if expected_offset != payload.len() as u64 {
        return Err(manifest_err(
            "<payload>",
            format!("{} trailing bytes after the last tensor", payload.len() as u64 - expected_offset),
        ));
    }
    let actual = crc32fast::hash(payload);
    if actual != manifest.crc32 {
        return Err(Error::Checksum {
            expected: manifest.crc32,
            actual,
        });
    }

    let mut params = ParamStore::new();
    let mut velocity = ParamStore::new();
    for e in &manifest.tensors {
        let raw = &payload[e.byte_offset as usize..(e.byte_offset + e.byte_len) as usize];
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)?;
        match e.kind {
            TensorKind::Learnable => params.insert(&e.name, t, ParamKind::Learnable)?,
            TensorKind::Buffer => params.insert(&e.name, t, ParamKind::Buffer)?,
            TensorKind::Momentum => {
                let name = e
                    .name
                    .strip_prefix(MOMENTUM_PREFIX)
                    .ok_or_else(|| manifest_err(&e.name, format!("momentum entry lacks `{MOMENTUM_PREFIX}` prefix")))?;
                velocity.insert(name, t, ParamKind::Learnable)?
            }
        }
    }
    for (name, v, _) in velocity.iter() {
        let p = params
            .get(name)
            .map_err(|_| manifest_err(name, "momentum for an unknown parameter".into()))?;
        if p.shape() != v.shape() {
            return Err(manifest_err(name, format!("momentum shape {:?} vs parameter {:?}", v.shape(), p.shape())));
        }
    }
    Ok(Checkpoint {
        params,
        state: SgdState {
            velocity,
            step: manifest.step,
            epoch: manifest.epoch,
        },
        config: manifest.config,
    })
}

pub fn save_checkpoint(path: &Path, params: &ParamStore<f32>, state: &SgdState, config: &serde_json::Value) -> Result<()> {
    let bytes = encode_checkpoint(params, state, config)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn fixture() -> (ParamStore<f32>, SgdState) {
        let mut p = ParamStore::new();
        p.insert("conv.kernel", Tensor::from_fn(vec![2, 3], |i| i as f32 * 0.25 - 0.3), ParamKind::Learnable)
            .unwrap();
        p.insert("bn.running_var", Tensor::new(vec![2], vec![1.5, f32::MIN_POSITIVE]).unwrap(), ParamKind::Buffer)
            .unwrap();
        let mut s = SgdState::new(&p).unwrap();
        s.velocity.get_mut("conv.kernel").unwrap().data_mut()[4] = -1e-30;
        s.step = 7;
        s.epoch = 2;
        (p, s)
    }

    #[test]
    fn round_trip_is_exact() {
        let (p, s) = fixture();
        let cfg = json!({"lr": 0.1, "name": "x"});
        let bytes = encode_checkpoint(&p, &s, &cfg).unwrap();
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.params, p);
        assert_eq!(ck.state, s);
        assert_eq!(ck.config, cfg);
        assert_eq!(encode_checkpoint(&ck.params, &ck.state, &ck.config).unwrap(), bytes);
        assert_eq!(&bytes[..4], b"DSMC");
    }

    fn manifest_of(bytes: &[u8]) -> (Manifest, usize) {
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        (serde_json::from_slice(&bytes[16..16 + len]).unwrap(), len)
    }

    fn with_manifest(bytes: &[u8], m: &Manifest) -> Vec<u8> {
        let (_, len) = manifest_of(bytes);
        let json = serde_json::to_vec(m).unwrap();
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[16 + len..]);
        out
    }

    #[test]
    fn corruption_gives_distinct_errors() {
        let (p, s) = fixture();
        let bytes = encode_checkpoint(&p, &s, &json!({})).unwrap();

        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 0x01;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::Checksum { .. })));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_checkpoint(&magic), Err(Error::BadMagic { .. })));

        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(decode_checkpoint(&version), Err(Error::BadVersion { found: 9, .. })));

        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
        assert!(matches!(decode_checkpoint(&bytes[..10]), Err(Error::Truncated(_))));

        let (mut m, _) = manifest_of(&bytes);
        m.tensors[0].shape = vec![2, 4];
        match decode_checkpoint(&with_manifest(&bytes, &m)) {
            Err(Error::Manifest { name, .. }) => assert_eq!(name, "conv.kernel"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
