//! Per-user artifact store and the serving path built on it.
//!
//! Layout under the registry root:
//!
//! ```text
//! manifest.jsonl           one RegistryEntry per line; the last line for a
//!                          (user, method) pair wins
//! artifacts/<id>-lora.bin  adapter files
//! artifacts/<id>-full.bin  full per-user checkpoints
//! artifacts/one-id.bin     the shared id-prefixed model
//! ```

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::RwLock;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::format::{decode_adapter, decode_model, encode_adapter, encode_model, write_atomic};
use crate::lora::LoraAdapter;
use crate::model::Seq2SeqModel;
use crate::prompt::{build_prompt, prepend_user_id, PromptVariant, TokenId, UserId, UserProfile, Vocab};
use crate::training::{BaseCheckpoint, Method, Stage};

const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub user_id: UserId,
    pub method: Method,
    /// Relative to the registry root.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
    /// Seconds since the Unix epoch, or `SOURCE_DATE_EPOCH` when set.
    pub created_at: u64,
}

pub struct Registry {
    root: PathBuf,
    entries: RwLock<BTreeMap<(UserId, Method), RegistryEntry>>,
}

fn now() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse().ok()) {
        return t;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Registry {
    /// Opens (creating if needed) the registry at `root` and compacts its
    /// manifest if it holds superseded lines.
    pub fn open(root: &Path) -> Result<Self> {
        let artifacts = root.join("artifacts");
        std::fs::create_dir_all(&artifacts).map_err(|e| Error::io(&artifacts, e))?;
        let manifest = root.join(MANIFEST);
        let mut entries = BTreeMap::new();
        let mut lines = 0;
        if manifest.exists() {
            let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let e: RegistryEntry = serde_json::from_str(line).map_err(|err| Error::Corruption {
                    path: manifest.clone(),
                    reason: format!("line {}: {err}", i + 1),
                })?;
                entries.insert((e.user_id, e.method), e);
                lines += 1;
            }
        }
        let reg = Registry {
            root: root.to_path_buf(),
            entries: RwLock::new(entries),
        };
        if lines > reg.len() {
            reg.compact()?;
        }
        Ok(reg)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("registry lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rewrites the manifest with one line per live entry.
    pub fn compact(&self) -> Result<()> {
        let entries = self.entries.write().expect("registry lock");
        let text: String = entries
            .values()
            .map(|e| serde_json::to_string(e).expect("serializable") + "\n")
            .collect();
        write_atomic(&self.root.join(MANIFEST), text.as_bytes())
    }

    /// All live entries, sorted by user id then method.
    pub fn list_users(&self) -> Vec<RegistryEntry> {
        self.entries.read().expect("registry lock").values().cloned().collect()
    }

    pub fn entry(&self, user: UserId, method: Method) -> Option<RegistryEntry> {
        self.entries.read().expect("registry lock").get(&(user, method)).cloned()
    }

    /// Methods with an artifact for `user`, in preference order.
    pub fn methods_for(&self, user: UserId) -> Vec<Method> {
        [Method::Lora, Method::Full, Method::OneId]
            .into_iter()
            .filter(|m| self.entry(user, *m).is_some())
            .collect()
    }

    fn store(&self, users: &[UserId], method: Method, rel: &str, bytes: &[u8]) -> Result<Vec<RegistryEntry>> {
        let mut entries = self.entries.write().expect("registry lock");
        let path = self.root.join(rel);
        write_atomic(&path, bytes)?;
        let hash = sha256_hex(bytes);
        let created_at = now();
        let manifest = self.root.join(MANIFEST);
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&manifest)
            .map_err(|e| Error::io(&manifest, e))?;
        let mut out = Vec::with_capacity(users.len());
        for &user_id in users {
            let e = RegistryEntry {
                user_id,
                method,
                path: rel.to_string(),
                bytes: bytes.len() as u64,
                sha256: hash.clone(),
                created_at,
            };
            writeln!(f, "{}", serde_json::to_string(&e).expect("serializable")).map_err(|err| Error::io(&manifest, err))?;
            entries.insert((user_id, method), e.clone());
            out.push(e);
        }
        Ok(out)
    }

    pub fn save_adapter(&self, adapter: &LoraAdapter, config_hash: &str) -> Result<RegistryEntry> {
        let bytes = encode_adapter(adapter, config_hash)?;
        let rel = format!("artifacts/{}-lora.bin", adapter.owner());
        Ok(self.store(&[adapter.owner()], Method::Lora, &rel, &bytes)?.remove(0))
    }

    pub fn save_full(&self, user: UserId, model: &Seq2SeqModel) -> Result<RegistryEntry> {
        let bytes = encode_model(model, &[("user_id".into(), user.to_string()), ("method".into(), "full".into())])?;
        let rel = format!("artifacts/{user}-full.bin");
        Ok(self.store(&[user], Method::Full, &rel, &bytes)?.remove(0))
    }

    /// Installs the shared id-prefixed model for `users`.
    pub fn install_one_id(&self, model: &Seq2SeqModel, users: &[UserId]) -> Result<Vec<RegistryEntry>> {
        if users.is_empty() {
            return Err(Error::Usage("one-id model installed for no users".into()));
        }
        let bytes = encode_model(model, &[("method".into(), "one-id".into())])?;
        self.store(users, Method::OneId, "artifacts/one-id.bin", &bytes)
    }

    /// Reads an artifact under the registry read lock, so a concurrent
    /// overwrite is seen either wholly before or wholly after.
    fn read_verified(&self, user: UserId, method: Method) -> Result<(Vec<u8>, PathBuf)> {
        let entries = self.entries.read().expect("registry lock");
        let e = match method {
            Method::OneId => entries.values().find(|e| e.method == Method::OneId),
            _ => entries.get(&(user, method)),
        }
        .ok_or_else(|| match method {
            Method::OneId => Error::NotFound("no one-id model installed".into()),
            _ => Error::NotFound(format!("no {method} artifact for user {user}")),
        })?;
        let path = self.root.join(&e.path);
        let bytes = std::fs::read(&path).map_err(|err| Error::io(&path, err))?;
        if sha256_hex(&bytes) != e.sha256 {
            return Err(Error::Corruption {
                path,
                reason: "content hash differs from registry entry".into(),
            });
        }
        Ok((bytes, path))
    }

    /// Loads and hash-verifies `user`'s adapter. Returns it with the config
    /// hash of the base it was trained on.
    pub fn load_adapter(&self, user: UserId) -> Result<(LoraAdapter, String)> {
        let (bytes, path) = self.read_verified(user, Method::Lora)?;
        let (adapter, hash) = decode_adapter(&bytes, &path)?;
        if adapter.owner() != user {
            return Err(Error::Corruption {
                path,
                reason: format!("adapter belongs to {}", adapter.owner()),
            });
        }
        Ok((adapter, hash))
    }

    pub fn load_full(&self, user: UserId) -> Result<Seq2SeqModel> {
        let (bytes, path) = self.read_verified(user, Method::Full)?;
        Ok(decode_model(&bytes, &path)?.0)
    }

    /// Loads the shared one-id model; any registered user's entry vouches
    /// for its hash.
    pub fn load_one_id(&self) -> Result<Seq2SeqModel> {
        let anyone = UserId::new("0000").expect("valid id");
        let (bytes, path) = self.read_verified(anyone, Method::OneId)?;
        Ok(decode_model(&bytes, &path)?.0)
    }
}

/// Writes a base checkpoint with its stage and prompt variant.
pub fn save_base(path: &Path, ckpt: &BaseCheckpoint) -> Result<()> {
    let bytes = encode_model(
        &ckpt.model,
        &[
            ("method".into(), "base".into()),
            ("stage".into(), ckpt.stage.to_string()),
            ("variant".into(), ckpt.variant.to_string()),
        ],
    )?;
    write_atomic(path, &bytes)
}

pub fn load_base(path: &Path) -> Result<BaseCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (model, c) = decode_model(&bytes, path)?;
    let bad = |reason: String| Error::Corruption {
        path: path.to_path_buf(),
        reason,
    };
    let stage: Stage = c.require("stage", path)?.parse().map_err(|e: Error| bad(e.to_string()))?;
    let variant: PromptVariant = c.require("variant", path)?.parse().map_err(|e: Error| bad(e.to_string()))?;
    Ok(BaseCheckpoint { model, stage, variant })
}

/// What a response is conditioned on.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInputs {
    #[serde(default)]
    pub speaker_profile: UserProfile,
    #[serde(default)]
    pub partner_profile: UserProfile,
    pub context: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub text: String,
    pub tokens: Vec<TokenId>,
    pub method: Method,
    /// From artifact load to the end of decoding.
    pub latency: Duration,
}

/// Serves many users from one shared frozen base.
pub struct Server {
    pub registry: Registry,
    pub base: BaseCheckpoint,
    pub vocab: Vocab,
    pub max_new_tokens: usize,
}

impl Server {
    pub fn new(registry: Registry, base: BaseCheckpoint, vocab: Vocab) -> Self {
        Server {
            registry,
            base,
            vocab,
            max_new_tokens: 32,
        }
    }

    /// Loads the user's artifact from disk and decodes greedily. With no
    /// explicit method the first of lora, full, one-id the user has is used.
    /// An explicit one-id request for an unregistered id still generates,
    /// conditioned on an id the model never saw.
    pub fn generate_for_user(&self, user: UserId, method: Option<Method>, inputs: &PromptInputs) -> Result<Generation> {
        let method = match method {
            Some(m) => m,
            None => *self
                .registry
                .methods_for(user)
                .first()
                .ok_or_else(|| Error::NotFound(format!("no artifact for user {user}")))?,
        };
        let prompt = build_prompt(
            &self.vocab,
            self.base.variant,
            &inputs.speaker_profile,
            &inputs.partner_profile,
            &inputs.context,
        )?;
        let start = Instant::now();
        let tokens = match method {
            Method::Lora => {
                let (adapter, hash) = self.registry.load_adapter(user)?;
                if hash != self.base.model.config().hash() {
                    return Err(Error::Validation(format!(
                        "adapter of {user} was trained for base config {hash}"
                    )));
                }
                self.base.model.greedy_decode(Some(&adapter), &prompt.ids, self.max_new_tokens)?
            }
            Method::Full => {
                let model = self.registry.load_full(user)?;
                model.greedy_decode(None, &prompt.ids, self.max_new_tokens)?
            }
            Method::OneId => {
                let model = self.registry.load_one_id()?;
                let prompt = prepend_user_id(&self.vocab, &prompt, user)?;
                model.greedy_decode(None, &prompt.ids, self.max_new_tokens)?
            }
        };
        let latency = start.elapsed();
        Ok(Generation {
            text: self.vocab.decode_response(&tokens)?,
            tokens,
            method,
            latency,
        })
    }

    /// Handles one protocol line and returns the response line.
    pub fn handle_line(&self, line: &str) -> String {
        let reply = match serde_json::from_str::<ServeRequest>(line) {
            Ok(req) => match self.generate_for_user(req.user_id, req.method, &req.inputs) {
                Ok(g) => ServeResponse::Ok {
                    user_id: req.user_id,
                    method: g.method,
                    text: g.text,
                    latency_ms: g.latency.as_secs_f64() * 1e3,
                },
                Err(e) => ServeResponse::Error { error: e.to_string() },
            },
            Err(e) => ServeResponse::Error {
                error: format!("bad request: {e}"),
            },
        };
        serde_json::to_string(&reply).expect("serializable")
    }
}

/// `{"user_id": "a1B9", "context": ["hi"], "speaker_profile": {...}}`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServeRequest {
    pub user_id: UserId,
    #[serde(default)]
    pub method: Option<Method>,
    #[serde(flatten)]
    pub inputs: PromptInputs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ServeResponse {
    Ok {
        user_id: UserId,
        method: Method,
        text: String,
        latency_ms: f64,
    },
    Error {
        error: String,
    },
}
