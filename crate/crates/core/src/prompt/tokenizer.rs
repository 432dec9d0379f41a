//! Word-level tokenizer over a closed vocabulary with per-character fallback.
//!
//! Text is cut into special-token literals, glue punctuation, runs of spaces
//! and plain segments. A segment found in the word list becomes one token;
//! anything else is spelled out with character tokens. A single space between
//! two word tokens is implied and not encoded, every other space is an
//! explicit token, so decoding is exactly the inverse of encoding.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Reserved tokens, in id order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Pad,
    Unk,
    Bos,
    Eos,
    Sep,
    User,
    User1,
    User2,
    Turn,
}

impl Special {
    pub const ALL: [Special; 9] = [
        Special::Pad,
        Special::Unk,
        Special::Bos,
        Special::Eos,
        Special::Sep,
        Special::User,
        Special::User1,
        Special::User2,
        Special::Turn,
    ];

    pub fn literal(self) -> &'static str {
        match self {
            Special::Pad => "[PAD]",
            Special::Unk => "[UNK]",
            Special::Bos => "[BOS]",
            Special::Eos => "[EOS]",
            Special::Sep => "[SEP]",
            Special::User => "[USER]",
            Special::User1 => "[USER1]",
            Special::User2 => "[USER2]",
            Special::Turn => "[TURN]",
        }
    }

    pub fn id(self) -> TokenId {
        Special::ALL.iter().position(|s| *s == self).unwrap() as TokenId
    }
}

pub const GLUE: [char; 4] = [',', '.', '?', '!'];
const EXTRA_CHARS: [char; 4] = [' ', '-', '/', '\''];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Special(Special),
    Glue,
    Char,
    Word,
}

/// What to do with characters outside the alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Strict,
    Lenient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    kinds: Vec<TokenKind>,
    words: HashMap<String, TokenId>,
    chars: HashMap<char, TokenId>,
    glue: HashMap<char, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary over the default alphabet plus `words`.
    /// Duplicate words are ignored; order of first appearance fixes ids.
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut chars: Vec<char> = ('a'..='z').chain('A'..='Z').chain('0'..='9').collect();
        chars.extend(EXTRA_CHARS);
        Self::build(chars, words.into_iter().map(str::to_string).collect())
    }

    fn build(chars: Vec<char>, words: Vec<String>) -> Result<Self> {
        let mut v = Vocab {
            tokens: Vec::new(),
            kinds: Vec::new(),
            words: HashMap::new(),
            chars: HashMap::new(),
            glue: HashMap::new(),
        };
        for s in Special::ALL {
            v.push(s.literal().to_string(), TokenKind::Special(s));
        }
        for g in GLUE {
            let id = v.push(g.to_string(), TokenKind::Glue);
            v.glue.insert(g, id);
        }
        for c in chars {
            if c == '[' || c == ']' || c == '#' || c == '\\' || c == '\n' || GLUE.contains(&c) {
                return Err(Error::Validation(format!("character {c:?} cannot be in the alphabet")));
            }
            if v.chars.contains_key(&c) {
                return Err(Error::Validation(format!("duplicate character {c:?}")));
            }
            let id = v.push(c.to_string(), TokenKind::Char);
            v.chars.insert(c, id);
        }
        for w in words {
            if v.words.contains_key(&w) {
                continue;
            }
            if w.is_empty() || w.chars().any(|c| c == ' ' || !v.chars.contains_key(&c)) {
                return Err(Error::Validation(format!("word {w:?} is not spellable in the alphabet")));
            }
            let id = v.push(w.clone(), TokenKind::Word);
            v.words.insert(w, id);
        }
        Ok(v)
    }

    fn push(&mut self, surface: String, kind: TokenKind) -> TokenId {
        self.tokens.push(surface);
        self.kinds.push(kind);
        (self.tokens.len() - 1) as TokenId
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn kind(&self, id: TokenId) -> Option<TokenKind> {
        self.kinds.get(id as usize).copied()
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn word_id(&self, w: &str) -> Option<TokenId> {
        self.words.get(w).copied()
    }

    pub fn char_id(&self, c: char) -> Option<TokenId> {
        self.chars.get(&c).copied()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        matches!(self.kind(id), Some(TokenKind::Special(_)))
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        self.tokenize_mode(text, Mode::Strict)
    }

    pub fn tokenize_mode(&self, text: &str, mode: Mode) -> Result<Vec<TokenId>> {
        enum Piece<'t> {
            Tok(TokenId),
            Spaces(usize),
            Segment(&'t str),
        }
        let mut pieces = Vec::new();
        let mut rest = text;
        while let Some(c) = rest.chars().next() {
            if c == '[' {
                match Special::ALL.iter().find(|s| rest.starts_with(s.literal())) {
                    Some(s) => {
                        pieces.push(Piece::Tok(s.id()));
                        rest = &rest[s.literal().len()..];
                        continue;
                    }
                    None => {
                        // a stray bracket is an ordinary out-of-alphabet char
                        pieces.push(Piece::Segment(&rest[..1]));
                        rest = &rest[1..];
                        continue;
                    }
                }
            }
            if let Some(&id) = self.glue.get(&c) {
                pieces.push(Piece::Tok(id));
                rest = &rest[c.len_utf8()..];
                continue;
            }
            if c == ' ' {
                let n = rest.len() - rest.trim_start_matches(' ').len();
                pieces.push(Piece::Spaces(n));
                rest = &rest[n..];
                continue;
            }
            let end = rest
                .char_indices()
                .find(|&(_, c)| c == ' ' || c == '[' || self.glue.contains_key(&c))
                .map_or(rest.len(), |(i, _)| i);
            pieces.push(Piece::Segment(&rest[..end]));
            rest = &rest[end..];
        }

        let is_word = |p: Option<&Piece>| matches!(p, Some(Piece::Segment(s)) if self.words.contains_key(*s));
        let mut out = Vec::with_capacity(pieces.len());
        let space = self.chars[&' '];
        for (i, p) in pieces.iter().enumerate() {
            match *p {
                Piece::Tok(id) => out.push(id),
                Piece::Spaces(n) => {
                    let implied = n == 1 && i > 0 && is_word(pieces.get(i - 1)) && is_word(pieces.get(i + 1));
                    if !implied {
                        out.extend(std::iter::repeat_n(space, n));
                    }
                }
                Piece::Segment(s) => {
                    if let Some(&id) = self.words.get(s) {
                        out.push(id);
                        continue;
                    }
                    for c in s.chars() {
                        match self.chars.get(&c) {
                            Some(&id) => out.push(id),
                            None if mode == Mode::Lenient => out.push(Special::Unk.id()),
                            None => {
                                return Err(Error::Encoding(format!(
                                    "character {c:?} outside the alphabet"
                                )))
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Spells `text` with character tokens only, bypassing the word list.
    pub fn tokenize_chars(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .map(|c| {
                self.chars
                    .get(&c)
                    .copied()
                    .ok_or_else(|| Error::Encoding(format!("character {c:?} outside the alphabet")))
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        let mut prev_word = false;
        for &id in ids {
            let kind = self
                .kind(id)
                .ok_or_else(|| Error::Index(format!("token id {id} outside vocabulary {}", self.len())))?;
            let is_word = kind == TokenKind::Word;
            if is_word && prev_word {
                out.push(' ');
            }
            out.push_str(&self.tokens[id as usize]);
            prev_word = is_word;
        }
        Ok(out)
    }

    /// Detokenizes generated output, dropping padding and sequence markers.
    pub fn decode_response(&self, ids: &[TokenId]) -> Result<String> {
        let skip = [Special::Pad.id(), Special::Bos.id(), Special::Eos.id()];
        let kept: Vec<TokenId> = ids.iter().copied().filter(|t| !skip.contains(t)).collect();
        self.detokenize(&kept)
    }

    /// Serializes the vocabulary in its line-oriented file format.
    pub fn to_file_string(&self) -> String {
        let mut s = String::from("#vocab v1\n#reserved\n");
        let mut section = "reserved";
        for (tok, kind) in self.tokens.iter().zip(&self.kinds) {
            let want = match kind {
                TokenKind::Special(_) => "reserved",
                TokenKind::Glue => "glue",
                TokenKind::Char => "chars",
                TokenKind::Word => "words",
            };
            if want != section {
                let _ = writeln!(s, "#{want}");
                section = want;
            }
            if tok == " " {
                s.push_str("\\s\n");
            } else {
                s.push_str(tok);
                s.push('\n');
            }
        }
        if section != "words" {
            s.push_str("#words\n");
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut lines = text.split_terminator('\n');
        if lines.next() != Some("#vocab v1") {
            return Err(Error::Parse("vocabulary file must start with \"#vocab v1\"".into()));
        }
        let mut section = "";
        let mut reserved = Vec::new();
        let mut glue = Vec::new();
        let mut chars = Vec::new();
        let mut words = Vec::new();
        for line in lines {
            if let Some(name) = line.strip_prefix('#') {
                section = match name {
                    "reserved" | "glue" | "chars" | "words" => name,
                    other => return Err(Error::Parse(format!("unknown section #{other}"))),
                };
                continue;
            }
            match section {
                "reserved" => reserved.push(line.to_string()),
                "glue" => glue.push(line.to_string()),
                "chars" => {
                    let c = if line == "\\s" {
                        ' '
                    } else {
                        let mut it = line.chars();
                        match (it.next(), it.next()) {
                            (Some(c), None) => c,
                            _ => return Err(Error::Parse(format!("bad char line {line:?}"))),
                        }
                    };
                    chars.push(c);
                }
                "words" => words.push(line.to_string()),
                _ => return Err(Error::Parse("token before any section header".into())),
            }
        }
        let want_reserved: Vec<String> = Special::ALL.iter().map(|s| s.literal().to_string()).collect();
        if reserved != want_reserved {
            return Err(Error::Parse("reserved block does not match the expected tokens".into()));
        }
        let want_glue: Vec<String> = GLUE.iter().map(|c| c.to_string()).collect();
        if glue != want_glue {
            return Err(Error::Parse("glue block does not match the expected tokens".into()));
        }
        Self::build(chars, words)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&text)
    }
}
