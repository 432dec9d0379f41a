//! Profile inference from a post history: fixed-size chunks, one ballot per
//! chunk from a pluggable classifier, then a per-attribute majority vote.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom as _;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::prompt::{Attribute, UserId, UserProfile};
use crate::rng::Rng;

pub const CHUNK_SIZE: usize = 150;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Post {
    /// ISO-8601 timestamp, kept as written.
    pub timestamp: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PostHistory {
    pub user_id: UserId,
    pub posts: Vec<Post>,
}

impl PostHistory {
    /// Parses `<timestamp> <text>` lines; blank lines are skipped and posts
    /// must be in chronological order.
    pub fn parse(user_id: UserId, text: &str) -> Result<Self> {
        let mut posts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (ts, body) = line.split_once(' ').unwrap_or((line, ""));
            if !looks_like_iso8601(ts) {
                return Err(Error::Parse(format!("line {}: bad timestamp {ts:?}", i + 1)));
            }
            posts.push(Post {
                timestamp: ts.to_string(),
                text: body.to_string(),
            });
        }
        let history = PostHistory { user_id, posts };
        history.check_order()?;
        Ok(history)
    }

    pub fn load(user_id: UserId, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(user_id, &text)
    }

    pub fn to_text(&self) -> String {
        self.posts
            .iter()
            .map(|p| format!("{} {}\n", p.timestamp, p.text))
            .collect()
    }

    fn check_order(&self) -> Result<()> {
        // Timestamps share one layout, so string order is time order.
        match self.posts.windows(2).position(|w| w[0].timestamp > w[1].timestamp) {
            Some(i) => Err(Error::Validation(format!("post {} is older than post {}", i + 2, i + 1))),
            None => Ok(()),
        }
    }
}

fn looks_like_iso8601(ts: &str) -> bool {
    let b = ts.as_bytes();
    b.len() >= 10
        && b[..4].iter().all(u8::is_ascii_digit)
        && b[4] == b'-'
        && b[5..7].iter().all(u8::is_ascii_digit)
        && b[7] == b'-'
        && b[8..10].iter().all(u8::is_ascii_digit)
        && (b.len() == 10 || b[10] == b'T')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Chunk<'a> {
    pub posts: &'a [Post],
    /// Shorter than the requested size; still gets a full ballot.
    pub partial: bool,
}

pub fn chunk(history: &PostHistory, size: usize) -> Result<Vec<Chunk<'_>>> {
    if size == 0 {
        return Err(Error::Usage("chunk size must be at least 1".into()));
    }
    if history.posts.is_empty() {
        return Err(Error::Usage(format!("user {} has no posts", history.user_id)));
    }
    Ok(history
        .posts
        .chunks(size)
        .map(|posts| Chunk {
            posts,
            partial: posts.len() < size,
        })
        .collect())
}

/// Per attribute, the most common known label; ties give unknown.
pub fn majority_vote(ballots: &[UserProfile]) -> UserProfile {
    let mut out = UserProfile::new();
    for attr in Attribute::ALL {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for b in ballots {
            if let Some(v) = b.iter().find(|(a, _)| *a == attr).map(|(_, v)| v) {
                *counts.entry(v).or_default() += 1;
            }
        }
        let Some(&top) = counts.values().max() else { continue };
        let mut winners = counts.iter().filter(|(_, &c)| c == top);
        if let (Some((label, _)), None) = (winners.next(), winners.next()) {
            out.set(attr, label).expect("ballot labels are valid");
        }
    }
    out
}

pub trait ChunkClassifier {
    /// Labels one chunk; attributes it cannot decide are left unset.
    fn classify(&self, posts: &[Post]) -> Result<UserProfile>;
}

impl<F: Fn(&[Post]) -> Result<UserProfile>> ChunkClassifier for F {
    fn classify(&self, posts: &[Post]) -> Result<UserProfile> {
        self(posts)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub profile: UserProfile,
    pub chunks: usize,
    pub partial_last: bool,
    /// One line per dropped ballot.
    pub warnings: Vec<String>,
}

pub fn infer_profile(history: &PostHistory, classifier: &dyn ChunkClassifier, size: usize) -> Result<Inference> {
    let chunks = chunk(history, size)?;
    let mut ballots = Vec::with_capacity(chunks.len());
    let mut warnings = Vec::new();
    for (i, c) in chunks.iter().enumerate() {
        match classifier.classify(c.posts) {
            Ok(b) => ballots.push(b),
            Err(e) => {
                let msg = format!("user {}: chunk {i} dropped: {e}", history.user_id);
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    Ok(Inference {
        profile: majority_vote(&ballots),
        chunks: chunks.len(),
        partial_last: chunks.last().is_some_and(|c| c.partial),
        warnings,
    })
}

/// Marker words per label for the reference classifier and post generator.
pub const KEYWORDS: [(Attribute, &str, &str); 25] = [
    (Attribute::Gender, "female", "woman"),
    (Attribute::Gender, "male", "man"),
    (Attribute::Age, "10-years", "teen"),
    (Attribute::Age, "20-years", "twenties"),
    (Attribute::Age, "30-years", "thirties"),
    (Attribute::Age, "40-years", "forties"),
    (Attribute::Age, "50-years", "fifties"),
    (Attribute::Age, "60-years", "sixties"),
    (Attribute::Marriage, "married", "spouse"),
    (Attribute::Occupation, "office-worker", "office"),
    (Attribute::Occupation, "college-student", "lecture"),
    (Attribute::Occupation, "part-time-worker", "shift"),
    (Attribute::Occupation, "unemployed", "jobless"),
    (Attribute::Occupation, "homemaker", "chores"),
    (Attribute::Occupation, "business-owner", "company"),
    (Attribute::Occupation, "high-school-student", "homeroom"),
    (Attribute::Occupation, "association-member", "association"),
    (Attribute::Occupation, "civil-servant", "ministry"),
    (Attribute::Location, "kanto", "tokyo"),
    (Attribute::Location, "kinki", "osaka"),
    (Attribute::Location, "tokai", "nagoya"),
    (Attribute::Location, "kyushu-okinawa", "fukuoka"),
    (Attribute::Location, "tohoku-hokkaido", "sapporo"),
    (Attribute::Location, "chugoku-shikoku", "hiroshima"),
    (Attribute::Location, "hokuriku", "kanazawa"),
];

/// Counts marker words per label; an attribute gets the label with the most
/// hits if it has at least `min_hits` and no tie.
#[derive(Debug, Clone, Copy)]
pub struct KeywordClassifier {
    pub min_hits: usize,
}

impl Default for KeywordClassifier {
    fn default() -> Self {
        KeywordClassifier { min_hits: 3 }
    }
}

impl ChunkClassifier for KeywordClassifier {
    fn classify(&self, posts: &[Post]) -> Result<UserProfile> {
        let mut hits: BTreeMap<(Attribute, &str), usize> = BTreeMap::new();
        for post in posts {
            for word in post.text.split(|c: char| !c.is_ascii_alphanumeric() && c != '-') {
                let word = word.to_ascii_lowercase();
                if let Some((a, label, _)) = KEYWORDS.iter().find(|(_, _, k)| *k == word) {
                    *hits.entry((*a, *label)).or_default() += 1;
                }
            }
        }
        let ballots: Vec<UserProfile> = Attribute::ALL
            .iter()
            .filter_map(|&attr| {
                let mut best: Vec<(&str, usize)> = hits
                    .iter()
                    .filter(|((a, _), &n)| *a == attr && n >= self.min_hits)
                    .map(|((_, l), &n)| (*l, n))
                    .collect();
                best.sort_by_key(|x| std::cmp::Reverse(x.1));
                match best.as_slice() {
                    [(l, _)] => Some((attr, *l)),
                    [(l, n), (_, m), ..] if n > m => Some((attr, *l)),
                    _ => None,
                }
            })
            .map(|(a, l)| UserProfile::new().with(a, l).expect("keyword labels are valid"))
            .collect();
        let mut out = UserProfile::new();
        for b in ballots {
            for (a, v) in b.iter() {
                out.set(a, v)?;
            }
        }
        Ok(out)
    }
}

const FILLER_POSTS: [&str; 12] = [
    "nice weather today",
    "just had lunch",
    "watching a movie tonight",
    "so tired",
    "coffee time",
    "traffic was bad",
    "new song is great",
    "rainy again",
    "cannot sleep",
    "weekend soon",
    "long day",
    "made curry",
];

/// Synthetic history for `profile`: a fraction `signal` of posts carries a
/// marker of one of its known attributes, a fraction `noise` a random marker.
pub fn synth_posts(
    user_id: UserId,
    profile: &UserProfile,
    n_posts: usize,
    signal: f64,
    noise: f64,
    rng: &mut Rng,
) -> PostHistory {
    let own: Vec<&str> = KEYWORDS
        .iter()
        .filter(|(a, l, _)| profile.get(*a) == *l)
        .map(|(_, _, k)| *k)
        .collect();
    let mut posts = Vec::with_capacity(n_posts);
    for i in 0..n_posts {
        let mut text = FILLER_POSTS.choose(rng).expect("non-empty").to_string();
        let u: f64 = rng.random();
        if u < signal && !own.is_empty() {
            text = format!("{text} {}", own.choose(rng).expect("non-empty"));
        } else if u < signal + noise {
            text = format!("{text} {}", KEYWORDS.choose(rng).expect("non-empty").2);
        }
        let (day, minute) = (i / 1440, i % 1440);
        posts.push(Post {
            timestamp: format!(
                "2023-{:02}-{:02}T{:02}:{:02}:00Z",
                1 + day / 28 % 12,
                1 + day % 28,
                minute / 60,
                minute % 60
            ),
            text,
        });
    }
    PostHistory { user_id, posts }
}
