//! Prompt construction: profile prompts, user-id prefixes and tokenization.
//!
//! Surface grammar:
//!
//! ```text
//! plain : turn ("[TURN]" turn)*
//! psp   : "[USER]" values "[SEP]" plain
//! ppp   : "[USER1]" values "[USER2]" values "[SEP]" plain
//! values: (value ("," value)*)?
//! ```
//!
//! A One-ID prompt prefixes any of these with the bare four-character id.

mod profile;
mod tokenizer;
mod user_id;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use profile::{Attribute, UserProfile, UNKNOWN};
pub use tokenizer::{Mode, Special, TokenId, TokenKind, Vocab, GLUE};
pub use user_id::{gen_user_id, IdRegistry, UserId, ID_CAPACITY};

use crate::error::{Error, Result};

/// Which profile information the prompt carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptVariant {
    Plain,
    Psp,
    Ppp,
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptVariant::Plain => "plain",
            PromptVariant::Psp => "psp",
            PromptVariant::Ppp => "ppp",
        })
    }
}

impl FromStr for PromptVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "plain" => Ok(PromptVariant::Plain),
            "psp" => Ok(PromptVariant::Psp),
            "ppp" => Ok(PromptVariant::Ppp),
            _ => Err(Error::Config(format!("unknown prompt variant {s:?}"))),
        }
    }
}

/// A tokenized prompt together with its surface string.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PromptEncoding {
    pub ids: Vec<TokenId>,
    pub surface: String,
    /// Number of leading tokens spelling a user-id prefix.
    pub id_prefix_len: usize,
}

impl PromptEncoding {
    fn from_surface(vocab: &Vocab, surface: String) -> Result<Self> {
        let ids = vocab.tokenize(&surface)?;
        Ok(PromptEncoding {
            ids,
            surface,
            id_prefix_len: 0,
        })
    }

    /// Positions and kinds of the reserved tokens in `ids`.
    pub fn special_positions(&self, vocab: &Vocab) -> Vec<(usize, Special)> {
        self.ids
            .iter()
            .enumerate()
            .filter_map(|(i, &t)| match vocab.kind(t) {
                Some(TokenKind::Special(s)) => Some((i, s)),
                _ => None,
            })
            .collect()
    }
}

fn context_surface(context: &[String]) -> Result<String> {
    if context.is_empty() {
        return Err(Error::Usage("dialogue context must have at least one turn".into()));
    }
    if let Some(t) = context.iter().find(|t| t.contains('[') || t.contains(']')) {
        return Err(Error::Validation(format!("turn {t:?} contains reserved brackets")));
    }
    Ok(context.join(Special::Turn.literal()))
}

fn values_surface(p: &UserProfile) -> String {
    p.values().collect::<Vec<_>>().join(",")
}

pub fn build_plain(vocab: &Vocab, context: &[String]) -> Result<PromptEncoding> {
    PromptEncoding::from_surface(vocab, context_surface(context)?)
}

/// `[USER]v1,v2,..[SEP]x0[TURN]x1..`
pub fn build_psp(vocab: &Vocab, profile: &UserProfile, context: &[String]) -> Result<PromptEncoding> {
    let surface = format!(
        "{}{}{}{}",
        Special::User.literal(),
        values_surface(profile),
        Special::Sep.literal(),
        context_surface(context)?
    );
    PromptEncoding::from_surface(vocab, surface)
}

/// `[USER1]speaker values[USER2]partner values[SEP]context`
pub fn build_ppp(
    vocab: &Vocab,
    speaker: &UserProfile,
    partner: &UserProfile,
    context: &[String],
) -> Result<PromptEncoding> {
    let surface = format!(
        "{}{}{}{}{}{}",
        Special::User1.literal(),
        values_surface(speaker),
        Special::User2.literal(),
        values_surface(partner),
        Special::Sep.literal(),
        context_surface(context)?
    );
    PromptEncoding::from_surface(vocab, surface)
}

pub fn build_prompt(
    vocab: &Vocab,
    variant: PromptVariant,
    speaker: &UserProfile,
    partner: &UserProfile,
    context: &[String],
) -> Result<PromptEncoding> {
    match variant {
        PromptVariant::Plain => build_plain(vocab, context),
        PromptVariant::Psp => build_psp(vocab, speaker, context),
        PromptVariant::Ppp => build_ppp(vocab, speaker, partner, context),
    }
}

/// Places the user id, spelled character by character, before every other
/// token with no separator.
pub fn prepend_user_id(vocab: &Vocab, enc: &PromptEncoding, id: UserId) -> Result<PromptEncoding> {
    if enc.id_prefix_len > 0 {
        return Err(Error::Usage("prompt already carries a user id".into()));
    }
    let mut ids = vocab.tokenize_chars(id.as_str())?;
    let id_prefix_len = ids.len();
    ids.extend_from_slice(&enc.ids);
    Ok(PromptEncoding {
        ids,
        surface: format!("{id}{}", enc.surface),
        id_prefix_len,
    })
}

pub fn strip_user_id(enc: &PromptEncoding) -> PromptEncoding {
    // one ASCII character per id token
    PromptEncoding {
        ids: enc.ids[enc.id_prefix_len..].to_vec(),
        surface: enc.surface[enc.id_prefix_len..].to_string(),
        id_prefix_len: 0,
    }
}
