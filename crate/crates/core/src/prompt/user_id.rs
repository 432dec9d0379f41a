use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

const ALPHABET: &[u8; 62] = b"0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz";

/// Number of distinct four-character ids.
pub const ID_CAPACITY: usize = 62 * 62 * 62 * 62;

/// Four-character alphanumeric user identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct UserId([u8; 4]);

impl UserId {
    pub fn new(s: &str) -> Result<Self> {
        let b = s.as_bytes();
        if b.len() != 4 || !b.iter().all(u8::is_ascii_alphanumeric) {
            return Err(Error::Validation(format!("user id {s:?} is not 4 alphanumeric characters")));
        }
        Ok(UserId([b[0], b[1], b[2], b[3]]))
    }

    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.0).expect("ascii")
    }

    fn ordinal(self) -> usize {
        self.0.iter().fold(0, |acc, &c| {
            acc * 62 + ALPHABET.iter().position(|&a| a == c).expect("validated")
        })
    }

    fn from_ordinal(mut n: usize) -> Self {
        let mut out = [0u8; 4];
        for slot in out.iter_mut().rev() {
            *slot = ALPHABET[n % 62];
            n /= 62;
        }
        UserId(out)
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UserId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        UserId::new(s)
    }
}

impl TryFrom<String> for UserId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        UserId::new(&s)
    }
}

impl From<UserId> for String {
    fn from(id: UserId) -> String {
        id.as_str().to_string()
    }
}

/// Set of issued ids, stored as a bitmap over the whole id space.
#[derive(Debug, Clone)]
pub struct IdRegistry {
    bits: Vec<u64>,
    count: usize,
}

impl Default for IdRegistry {
    fn default() -> Self {
        IdRegistry {
            bits: vec![0; ID_CAPACITY.div_ceil(64)],
            count: 0,
        }
    }
}

impl IdRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn contains(&self, id: UserId) -> bool {
        let n = id.ordinal();
        self.bits[n / 64] & (1 << (n % 64)) != 0
    }

    /// Records `id`; returns false if it was already present.
    pub fn insert(&mut self, id: UserId) -> bool {
        let n = id.ordinal();
        let mask = 1 << (n % 64);
        if self.bits[n / 64] & mask != 0 {
            return false;
        }
        self.bits[n / 64] |= mask;
        self.count += 1;
        true
    }

    /// Draws a fresh id not yet in the registry and records it.
    pub fn generate(&mut self, rng: &mut Rng) -> Result<UserId> {
        if self.count >= ID_CAPACITY {
            return Err(Error::Capacity(format!("all {ID_CAPACITY} user ids are taken")));
        }
        for _ in 0..64 {
            let id = UserId::from_ordinal(rng.random_range(0..ID_CAPACITY));
            if self.insert(id) {
                return Ok(id);
            }
        }
        // Dense registry: scan forward from a random start for a free slot.
        let start = rng.random_range(0..ID_CAPACITY);
        let n = (0..ID_CAPACITY)
            .map(|k| (start + k) % ID_CAPACITY)
            .find(|&n| self.bits[n / 64] & (1 << (n % 64)) == 0)
            .expect("count below capacity");
        let id = UserId::from_ordinal(n);
        self.insert(id);
        Ok(id)
    }
}

/// Draws a fresh id collision-checked against `registry`.
pub fn gen_user_id(rng: &mut Rng, registry: &mut IdRegistry) -> Result<UserId> {
    registry.generate(rng)
}
