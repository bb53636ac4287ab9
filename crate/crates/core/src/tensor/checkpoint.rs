//! Versioned parameter container.
//!
//! Layout on disk:
//!
//! ```text
//! magic "P2PCKPT\0" | version u32 LE | header length u64 LE | header JSON | data
//! ```
//!
//! The header lists every entry (path, kind, dtype, shape, byte offset) plus
//! free-form metadata and the SHA-256 of the data section. Values are raw
//! little-endian floats.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamConfig, AdamState, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"P2PCKPT\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum EntryKind {
    Param,
    Buffer,
    State,
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    kind: EntryKind,
    dtype: DType,
    shape: Vec<usize>,
    raw: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    path: String,
    kind: EntryKind,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    entries: Vec<HeaderEntry>,
    metadata: serde_json::Value,
    checksum: String,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    entries: BTreeMap<String, Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self {
            metadata: serde_json::Value::Object(Default::default()),
            entries: BTreeMap::new(),
        }
    }

    fn put<T: Real>(&mut self, path: &str, kind: EntryKind, t: &Tensor<T>) {
        let mut raw = Vec::with_capacity(t.numel() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut raw);
        }
        self.entries.insert(
            path.to_string(),
            Entry {
                kind,
                dtype: T::DTYPE,
                shape: t.shape().to_vec(),
                raw,
            },
        );
    }

    pub fn put_tensor<T: Real>(&mut self, path: &str, t: &Tensor<T>) {
        self.put(path, EntryKind::State, t);
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Read an entry, converting to `T` if it was stored at another precision.
    pub fn get<T: Real>(&self, path: &str) -> Result<Tensor<T>> {
        let e = self.entries.get(path).ok_or_else(|| Error::MissingKey {
            key: path.to_string(),
            source_name: "checkpoint".into(),
        })?;
        let data: Vec<T> = match e.dtype {
            DType::F32 => e
                .raw
                .chunks_exact(4)
                .map(|b| T::from_f64_lossy(f32::read_le(b) as f64))
                .collect(),
            DType::F64 => e.raw.chunks_exact(8).map(|b| T::from_f64_lossy(f64::read_le(b))).collect(),
        };
        Tensor::new(e.shape.clone(), data)
    }

    /// Store every parameter and buffer of `store` under its own path.
    pub fn put_store<T: Real>(&mut self, store: &ParamStore<T>) {
        for (k, v) in store.params() {
            self.put(k, EntryKind::Param, v);
        }
        for (k, v) in store.buffers() {
            self.put(k, EntryKind::Buffer, v);
        }
    }

    /// Parameters and buffers whose path starts with `prefix`.
    pub fn load_store<T: Real>(&self, prefix: &str) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for (k, e) in self.entries.range(prefix.to_string()..) {
            if !k.starts_with(prefix) {
                break;
            }
            match e.kind {
                EntryKind::Param => store.insert(k.clone(), self.get(k)?),
                EntryKind::Buffer => store.insert_buffer(k.clone(), self.get(k)?),
                EntryKind::State => {}
            }
        }
        Ok(store)
    }

    pub fn put_adam<T: Real>(&mut self, group: &str, state: &AdamState<T>) {
        for path in state.paths() {
            let (m, v) = state.moments(path).expect("listed path");
            self.put(&format!("adam/{group}/m/{path}"), EntryKind::State, m);
            self.put(&format!("adam/{group}/v/{path}"), EntryKind::State, v);
        }
        let meta = serde_json::json!({
            "step_count": state.step_count,
            "config": state.config,
        });
        if let serde_json::Value::Object(map) = &mut self.metadata {
            map.insert(format!("adam/{group}"), meta);
        }
    }

    pub fn load_adam<T: Real>(&self, group: &str) -> Result<AdamState<T>> {
        let meta = self.metadata.get(format!("adam/{group}")).ok_or_else(|| Error::MissingKey {
            key: format!("adam/{group}"),
            source_name: "checkpoint metadata".into(),
        })?;
        let config: AdamConfig = serde_json::from_value(meta["config"].clone())?;
        let mut state = AdamState::new(config);
        state.step_count = meta["step_count"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint(format!("adam/{group}: step_count missing")))?;
        let m_prefix = format!("adam/{group}/m/");
        let paths: Vec<String> = self
            .entries
            .keys()
            .filter_map(|k| k.strip_prefix(&m_prefix).map(str::to_string))
            .collect();
        for path in paths {
            let m = self.get(&format!("adam/{group}/m/{path}"))?;
            let v = self.get(&format!("adam/{group}/v/{path}"))?;
            state.set_moments(path, m, v);
        }
        Ok(state)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut entries = Vec::with_capacity(self.entries.len());
        for (path, e) in &self.entries {
            entries.push(HeaderEntry {
                path: path.clone(),
                kind: e.kind,
                dtype: e.dtype,
                shape: e.shape.clone(),
                offset: data.len(),
                nbytes: e.raw.len(),
            });
            data.extend_from_slice(&e.raw);
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            entries,
            metadata: self.metadata.clone(),
            checksum: hex::encode(Sha256::digest(&data)),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |offset: usize, reason: &str| Error::Parse {
            source_name: "checkpoint".into(),
            offset,
            reason: reason.into(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad(0, "not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = 20usize
            .checked_add(hlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad(12, "header length exceeds file"))?;
        let header: Header = serde_json::from_slice(&bytes[20..body])?;
        let data = &bytes[body..];
        if hex::encode(Sha256::digest(data)) != header.checksum {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut entries = BTreeMap::new();
        for h in header.entries {
            let expected = h.shape.iter().product::<usize>() * h.dtype.size();
            if h.nbytes != expected || h.offset + h.nbytes > data.len() {
                return Err(bad(body + h.offset, &format!("entry `{}` has inconsistent size", h.path)));
            }
            entries.insert(
                h.path,
                Entry {
                    kind: h.kind,
                    dtype: h.dtype,
                    shape: h.shape,
                    raw: data[h.offset..h.offset + h.nbytes].to_vec(),
                },
            );
        }
        Ok(Self {
            metadata: header.metadata,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_round_trip_is_bitwise() {
        let mut s = ParamStore::<f32>::new();
        s.insert("generator/a", Tensor::new(vec![2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3e-7]).unwrap());
        s.insert_buffer("generator/bn/running_var", Tensor::full(vec![3], 1.0));
        s.insert("discriminator/b", Tensor::scalar(2.0));
        let mut ck = Checkpoint::new();
        ck.put_store(&s);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert!(back.load_store::<f32>("").unwrap().bitwise_eq(&s));
        let g = back.load_store::<f32>("generator/").unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.buffer("generator/bn/running_var").is_ok());
    }

    #[test]
    fn corrupted_data_is_rejected() {
        let mut ck = Checkpoint::new();
        ck.put_tensor("x", &Tensor::<f64>::full(vec![4], 0.25));
        let mut bytes = ck.to_bytes().unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
    }

    #[test]
    fn adam_state_round_trip() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::full(vec![3], 1.0));
        let mut st = AdamState::new(AdamConfig::default());
        let g = BTreeMap::from([("w".to_string(), Tensor::from_f64(vec![3], &[0.1, -0.2, 0.3]).unwrap())]);
        super::super::adam_step(&mut p, &g, &mut st).unwrap();
        let mut ck = Checkpoint::new();
        ck.put_adam("g", &st);
        let back: AdamState<f64> = Checkpoint::from_bytes(&ck.to_bytes().unwrap())
            .unwrap()
            .load_adam("g")
            .unwrap();
        assert_eq!(back, st);
    }
}
