//! Parameter archive: a text header followed by raw little-endian `f32` data.
//!
//! ```text
//! GASR-CKPT 1
//! meta <key> <json string>
//! entry <name> <d0>x<d1>.. <frozen 0|1>
//! end
//! <values of every entry, in header order>
//! ```
//!
//! Keys and names must not contain whitespace. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::params::{hex, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &str = "GASR-CKPT 1";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub frozen: bool,
    pub value: Tensor<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<CheckpointEntry>,
}

fn no_whitespace(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(TensorError::Format(format!("{kind} `{s}` must be non-empty without whitespace")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore<f32>) -> Self {
        let entries = store
            .iter()
            .map(|(_, p)| CheckpointEntry {
                name: p.name().to_string(),
                frozen: p.frozen(),
                value: p.value().clone(),
            })
            .collect();
        Checkpoint {
            meta: BTreeMap::new(),
            entries,
        }
    }

    /// Rebuild a store. Entry order defines parameter ids.
    pub fn to_store(&self) -> Result<ParamStore<f32>> {
        let mut store = ParamStore::new();
        for e in &self.entries {
            let id = store.add(e.name.clone(), e.value.clone())?;
            store.set_frozen(id, e.frozen);
        }
        Ok(store)
    }

    /// Copy values into an existing store by name; every store parameter
    /// must be present with the same shape.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let by_name: BTreeMap<&str, &CheckpointEntry> =
            self.entries.iter().map(|e| (e.name.as_str(), e)).collect();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name().to_string();
            let e = by_name
                .get(name.as_str())
                .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            store.set_value(id, e.value.clone())?;
            store.set_frozen(id, e.frozen);
        }
        Ok(())
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn entry(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::from(MAGIC);
        header.push('\n');
        for (k, v) in &self.meta {
            no_whitespace("meta key", k)?;
            header.push_str(&format!("meta {k} {}\n", serde_json::Value::String(v.clone())));
        }
        for e in &self.entries {
            no_whitespace("entry name", &e.name)?;
            let dims = e
                .value
                .shape()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            header.push_str(&format!("entry {} {dims} {}\n", e.name, u8::from(e.frozen)));
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        for e in &self.entries {
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| TensorError::Format("truncated header".into()))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|e| TensorError::Format(e.to_string()))
        };
        if next_line()? != MAGIC {
            return Err(TensorError::Format("bad magic line".into()));
        }
        let mut meta = BTreeMap::new();
        let mut specs = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let mut parts = line.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("meta"), Some(k), Some(v)) => {
                    let v: String = serde_json::from_str(v).map_err(|e| TensorError::Format(e.to_string()))?;
                    meta.insert(k.to_string(), v);
                }
                (Some("entry"), Some(name), Some(rest)) => {
                    let (dims, frozen) = rest
                        .split_once(' ')
                        .ok_or_else(|| TensorError::Format(format!("bad entry line `{line}`")))?;
                    let shape = dims
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| TensorError::Format(format!("bad shape `{dims}`: {e}")))?;
                    let frozen = match frozen {
                        "0" => false,
                        "1" => true,
                        other => return Err(TensorError::Format(format!("bad frozen flag `{other}`"))),
                    };
                    specs.push((name.to_string(), shape, frozen));
                }
                _ => return Err(TensorError::Format(format!("unrecognized header line `{line}`"))),
            }
        }
        let mut data = &bytes[pos..];
        let mut entries = Vec::with_capacity(specs.len());
        for (name, shape, frozen) in specs {
            let n: usize = shape.iter().product();
            if data.len() < n * 4 {
                return Err(TensorError::Format(format!("truncated data for `{name}`")));
            }
            let values = data[..n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            data = &data[n * 4..];
            entries.push(CheckpointEntry {
                name,
                frozen,
                value: Tensor::new(shape, values)?,
            });
        }
        if !data.is_empty() {
            return Err(TensorError::Format(format!("{} trailing bytes", data.len())));
        }
        Ok(Checkpoint { meta, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the serialized archive.
    pub fn digest(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_bytes()?)))
    }
}

/// SHA-256 hex digest of arbitrary text (used for config hashes).
pub fn text_digest(text: &str) -> String {
    hex(&Sha256::digest(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.add("enc.w", Tensor::matrix(2, 2, vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap()).unwrap();
        let b = store.add("enc.b", Tensor::row(vec![0.25; 3]).unwrap()).unwrap();
        store.set_frozen(b, true);
        Checkpoint::from_store(&store)
            .with_meta("config", "{\"lambda\": 0.3}")
            .with_meta("config-hash", text_digest("x"))
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta["config"], "{\"lambda\": 0.3}");
        let store = back.to_store().unwrap();
        assert!(store.is_frozen(store.id("enc.b").unwrap()));
        assert_eq!(store.value(store.id("enc.w").unwrap()).data()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn rejects_truncation_and_garbage() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(Checkpoint::from_bytes(b"nope\n").is_err());
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(bits in proptest::collection::vec(any::<u32>(), 1..40), frozen: bool) {
            // Any bit pattern, NaN payloads included, must survive.
            let values: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            let ck = Checkpoint {
                meta: BTreeMap::from([("note".to_string(), "a \"quoted\"\nline".to_string())]),
                entries: vec![CheckpointEntry {
                    name: "p".into(),
                    frozen,
                    value: Tensor::row(values).unwrap(),
                }],
            };
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            let got: Vec<u32> = back.entries[0].value.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, bits);
            prop_assert_eq!(back.meta, ck.meta);
            prop_assert_eq!(back.entries[0].frozen, frozen);
        }
    }
}
