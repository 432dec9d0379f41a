//! Binary container for checkpoints and adapters.
//!
//! ```text
//! magic     8 bytes   "PRSNART\0"
//! version   u16 LE    1
//! meta_len  u32 LE    byte length of the metadata block
//! metadata  UTF-8     "key=value\n" lines; one "tensor=<name>:<d0>x<d1>..." line
//!                     per payload, in payload order
//! payloads  f32 LE    row-major, concatenated
//! trailer   32 bytes  SHA-256 of everything before it
//! ```
//!
//! Values are stored as 32-bit floats. Models and adapters are snapped to
//! f32 after training so a save/load round trip is bit-exact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraPair};
use crate::model::{ModelConfig, ParamSet, Seq2SeqModel};
use crate::prompt::UserId;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PRSNART\0";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 8 + 2 + 4;
const TRAILER_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    /// Metadata other than tensor lines, in file order.
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str, path: &Path) -> Result<&str> {
        self.get(key).ok_or_else(|| corrupt(path, format!("metadata lacks {key}")))
    }

    /// Metadata keys under `prefix.` with the prefix removed.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, String> {
        self.meta
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(prefix)
                    .and_then(|r| r.strip_prefix('.'))
                    .map(|r| (r.to_string(), v.clone()))
            })
            .collect()
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corruption {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn encode(meta: &[(String, String)], tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut text = String::new();
    for (k, v) in meta {
        if k.contains(['=', '\n']) || v.contains('\n') || k == "tensor" {
            return Err(Error::Validation(format!("metadata entry {k:?} cannot be stored")));
        }
        text.push_str(&format!("{k}={v}\n"));
    }
    for (name, t) in tensors {
        if name.contains([':', '\n']) {
            return Err(Error::Validation(format!("tensor name {name:?} cannot be stored")));
        }
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        text.push_str(&format!("tensor={name}:{}\n", dims.join("x")));
    }
    let meta_len = u32::try_from(text.len()).map_err(|_| Error::Validation("metadata too large".into()))?;
    let payload: usize = tensors.iter().map(|(_, t)| t.len() * 4).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + text.len() + payload + TRAILER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&meta_len.to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (_, t) in tensors {
        for &x in t.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Parses and verifies a container; `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Container> {
    if bytes.len() < HEADER_LEN + TRAILER_LEN {
        return Err(corrupt(path, "file is truncated"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - TRAILER_LEN);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(corrupt(path, "checksum mismatch"));
    }
    if &body[..8] != MAGIC {
        return Err(corrupt(path, "bad magic bytes"));
    }
    let version = u16::from_le_bytes([body[8], body[9]]);
    if version != VERSION {
        return Err(corrupt(path, format!("unsupported format version {version}")));
    }
    let meta_len = u32::from_le_bytes(body[10..14].try_into().expect("4 bytes")) as usize;
    let meta_end = HEADER_LEN
        .checked_add(meta_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt(path, "metadata overruns file"))?;
    let text = std::str::from_utf8(&body[HEADER_LEN..meta_end]).map_err(|_| corrupt(path, "metadata is not UTF-8"))?;

    let mut meta = Vec::new();
    let mut layout = Vec::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| corrupt(path, format!("bad metadata line {line:?}")))?;
        if k == "tensor" {
            let (name, dims) = v
                .rsplit_once(':')
                .ok_or_else(|| corrupt(path, format!("bad tensor line {line:?}")))?;
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| corrupt(path, format!("bad tensor dims {dims:?}")))?;
            layout.push((name.to_string(), shape));
        } else {
            meta.push((k.to_string(), v.to_string()));
        }
    }

    let mut offset = meta_end;
    let mut tensors = Vec::with_capacity(layout.len());
    for (name, shape) in layout {
        let n: usize = shape.iter().product();
        let end = offset + n * 4;
        if end > body.len() {
            return Err(corrupt(path, format!("payload of {name} overruns file")));
        }
        let data = body[offset..end]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
        offset = end;
    }
    if offset != body.len() {
        return Err(corrupt(path, "trailing bytes after payloads"));
    }
    Ok(Container { meta, tensors })
}

pub fn read_file(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Writes through a temporary sibling so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn config_meta(config: &ModelConfig) -> impl Iterator<Item = (String, String)> {
    config.to_kv().into_iter().map(|(k, v)| (format!("config.{k}"), v))
}

/// Serializes a whole model; `extra` metadata is stored after the kind and config.
pub fn encode_model(model: &Seq2SeqModel, extra: &[(String, String)]) -> Result<Vec<u8>> {
    let mut meta = vec![
        ("kind".to_string(), "model".to_string()),
        ("config_hash".to_string(), model.config().hash()),
    ];
    meta.extend(config_meta(model.config()));
    meta.extend(extra.iter().cloned());
    let tensors: Vec<(String, &Tensor)> = model.params().iter().map(|(k, t)| (k.clone(), t)).collect();
    encode(&meta, &tensors)
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<(Seq2SeqModel, Container)> {
    let mut c = decode(bytes, path)?;
    if c.get("kind") != Some("model") {
        return Err(corrupt(path, "not a model checkpoint"));
    }
    let config = ModelConfig::from_kv(&c.section("config")).map_err(|e| corrupt(path, e.to_string()))?;
    if c.get("config_hash") != Some(config.hash().as_str()) {
        return Err(corrupt(path, "config hash does not match stored config"));
    }
    let params: ParamSet = std::mem::take(&mut c.tensors).into_iter().collect();
    let model = Seq2SeqModel::from_params(config, params).map_err(|e| corrupt(path, e.to_string()))?;
    Ok((model, c))
}

/// Serializes an adapter together with the hash of the base config it fits.
pub fn encode_adapter(adapter: &LoraAdapter, config_hash: &str) -> Result<Vec<u8>> {
    let meta = vec![
        ("kind".to_string(), "adapter".to_string()),
        ("user_id".to_string(), adapter.owner().to_string()),
        ("method".to_string(), "lora".to_string()),
        ("rank".to_string(), adapter.rank().to_string()),
        ("config_hash".to_string(), config_hash.to_string()),
        ("targets".to_string(), adapter.target_paths().join(",")),
    ];
    let tensors: Vec<(String, &Tensor)> = adapter
        .entries()
        .iter()
        .flat_map(|(k, p)| [(format!("{k}#a"), &p.a), (format!("{k}#b"), &p.b)])
        .collect();
    encode(&meta, &tensors)
}

pub fn decode_adapter(bytes: &[u8], path: &Path) -> Result<(LoraAdapter, String)> {
    let c = decode(bytes, path)?;
    if c.get("kind") != Some("adapter") {
        return Err(corrupt(path, "not an adapter"));
    }
    let owner = UserId::new(c.require("user_id", path)?).map_err(|e| corrupt(path, e.to_string()))?;
    let rank: usize = c
        .require("rank", path)?
        .parse()
        .map_err(|_| corrupt(path, "rank is not an integer"))?;
    let hash = c.require("config_hash", path)?.to_string();
    let mut halves: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
    for (name, t) in c.tensors {
        let (target, side) = name
            .rsplit_once('#')
            .ok_or_else(|| corrupt(path, format!("bad adapter tensor {name}")))?;
        let slot = halves.entry(target.to_string()).or_default();
        match side {
            "a" => slot.0 = Some(t),
            "b" => slot.1 = Some(t),
            _ => return Err(corrupt(path, format!("bad adapter tensor {name}"))),
        }
    }
    let mut entries = BTreeMap::new();
    for (target, pair) in halves {
        let (Some(a), Some(b)) = pair else {
            return Err(corrupt(path, format!("{target} lacks one of A, B")));
        };
        entries.insert(target, LoraPair { a, b });
    }
    let targets: Vec<&str> = c.meta.iter().find(|(k, _)| k == "targets").map_or(vec![], |(_, v)| {
        v.split(',').filter(|s| !s.is_empty()).collect()
    });
    if targets.len() != entries.len() || targets.iter().any(|t| !entries.contains_key(*t)) {
        return Err(corrupt(path, "target list does not match payloads"));
    }
    let adapter = LoraAdapter::from_entries(owner, rank, entries).map_err(|e| corrupt(path, e.to_string()))?;
    Ok((adapter, hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::attach;
    use crate::rng::Seed;

    fn model() -> Seq2SeqModel {
        let mut m = Seq2SeqModel::new(
            ModelConfig {
                n_layers: 1,
                d_model: 8,
                n_heads: 2,
                d_ff: 16,
                vocab_size: 20,
                max_seq_len: 16,
                dropout: 0.0,
            },
            Seed(3),
        )
        .unwrap();
        m.snap_to_f32();
        m
    }

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = encode(&[("k".into(), "v".into())], &[("w".into(), &t)]).unwrap();
        let meta = b"k=v\ntensor=w:1x2\n";
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(&bytes[8..10], &[1, 0]);
        assert_eq!(&bytes[10..14], &(meta.len() as u32).to_le_bytes());
        assert_eq!(&bytes[14..14 + meta.len()], meta);
        let p = 14 + meta.len();
        assert_eq!(&bytes[p..p + 4], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[p + 4..p + 8], &(-2.5f32).to_le_bytes());
        assert_eq!(&bytes[p + 8..], Sha256::digest(&bytes[..p + 8]).as_slice());
        assert_eq!(bytes.len(), p + 8 + 32);
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let m = model();
        let bytes = encode_model(&m, &[("stage".into(), "pretrained".into())]).unwrap();
        let (back, c) = decode_model(&bytes, Path::new("m")).unwrap();
        assert_eq!(back, m);
        assert_eq!(c.get("stage"), Some("pretrained"));
        assert_eq!(encode_model(&back, &[("stage".into(), "pretrained".into())]).unwrap(), bytes);
    }

    #[test]
    fn adapter_round_trip_is_bit_exact() {
        let m = model();
        let mut a = attach(&m, &m.attention_paths(), 2, UserId::new("Ab12").unwrap(), &mut Seed(1).rng()).unwrap();
        a.snap_to_f32();
        let bytes = encode_adapter(&a, &m.config().hash()).unwrap();
        let (back, hash) = decode_adapter(&bytes, Path::new("a")).unwrap();
        assert_eq!(back, a);
        assert_eq!(hash, m.config().hash());
    }

    #[test]
    fn every_single_byte_flip_is_detected() {
        let t = Tensor::new(vec![2], vec![0.5, 4.0]).unwrap();
        let bytes = encode(&[("a".into(), "b".into())], &[("x".into(), &t)]).unwrap();
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x01;
            assert!(matches!(decode(&bad, Path::new("f")), Err(Error::Corruption { .. })), "byte {i}");
        }
        assert!(decode(&bytes[..20], Path::new("f")).is_err());
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let m = model();
        let bytes = encode_model(&m, &[]).unwrap();
        assert!(decode_adapter(&bytes, Path::new("x")).is_err());
    }
}
