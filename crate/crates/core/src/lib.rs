//! Profile-conditioned seq2seq dialogue with per-user low-rank adapters.

pub mod autograd;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod format;
pub mod gradcheck;
pub mod lora;
pub mod model;
pub mod optim;
pub mod profile_inference;
pub mod prompt;
pub mod registry;
pub mod rng;
pub mod tensor;
pub mod training;

pub use autograd::{Tape, Var};
pub use corpus::{Corpus, DialogueSample, Split};
pub use error::{Error, Result};
pub use lora::{AdaptedModel, LoraAdapter};
pub use model::{Example, ModelConfig, Seq2SeqModel};
pub use registry::{Registry, RegistryEntry, Server};
pub use prompt::{PromptVariant, UserId, UserProfile, Vocab};
pub use rng::Seed;
pub use tensor::Tensor;
pub use training::{BaseCheckpoint, Method, Stage, TrainConfig};
