//! Dialogue corpora: records, file I/O, splits and a synthetic generator.
//!
//! The generator gives every user a categorical profile plus hidden personal
//! traits (a hobby and a verbal tic). Replies to small-talk depend on the
//! speaker's profile; replies to personal questions depend only on the
//! hidden traits, so they can be learned from that user's own dialogues but
//! not from the profile.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;

use rand::seq::IndexedRandom as _;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Example;
use crate::prompt::{
    build_prompt, prepend_user_id, Attribute, IdRegistry, PromptVariant, UserId, UserProfile, Vocab,
};
use crate::rng::Seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// One context/response exchange spoken by `user_id` to `partner_id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueSample {
    pub user_id: UserId,
    pub partner_id: UserId,
    pub speaker_profile: UserProfile,
    pub partner_profile: UserProfile,
    pub context: Vec<String>,
    pub response: String,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub samples: Vec<DialogueSample>,
}

impl Corpus {
    pub fn new(samples: Vec<DialogueSample>) -> Self {
        Corpus { samples }
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn users(&self) -> BTreeSet<UserId> {
        self.samples.iter().map(|s| s.user_id).collect()
    }

    pub fn split(&self, split: Split) -> Vec<&DialogueSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn for_user(&self, id: UserId) -> Corpus {
        self.filter(|s| s.user_id == id)
    }

    pub fn for_users(&self, ids: &BTreeSet<UserId>) -> Corpus {
        self.filter(|s| ids.contains(&s.user_id))
    }

    pub fn filter(&self, keep: impl Fn(&DialogueSample) -> bool) -> Corpus {
        Corpus::new(self.samples.iter().filter(|s| keep(s)).cloned().collect())
    }

    /// Checks the corpus invariants: each (user, partner, context, response)
    /// lives in one split only and a user keeps one profile.
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<(UserId, UserId, &[String], &str), Split> = BTreeMap::new();
        let mut profiles: BTreeMap<UserId, &UserProfile> = BTreeMap::new();
        for s in &self.samples {
            if let Some(prev) = seen.insert((s.user_id, s.partner_id, &s.context, &s.response), s.split) {
                if prev != s.split {
                    return Err(Error::Validation(format!(
                        "sample of user {} appears in both {prev:?} and {:?}",
                        s.user_id, s.split
                    )));
                }
            }
            if let Some(p) = profiles.insert(s.user_id, &s.speaker_profile) {
                if p != &s.speaker_profile {
                    return Err(Error::Validation(format!("user {} has two profiles", s.user_id)));
                }
            }
        }
        Ok(())
    }

    /// One JSON record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let samples = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse(format!("corpus line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus::new(samples))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }

    /// SHA-256 of the serialized corpus.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }
}

/// Encodes a sample's prompt and response for training or scoring.
pub fn encode_sample(
    vocab: &Vocab,
    variant: PromptVariant,
    sample: &DialogueSample,
    with_user_id: bool,
) -> Result<Example> {
    let mut prompt = build_prompt(
        vocab,
        variant,
        &sample.speaker_profile,
        &sample.partner_profile,
        &sample.context,
    )?;
    if with_user_id {
        prompt = prepend_user_id(vocab, &prompt, sample.user_id)?;
    }
    Ok(Example {
        src: prompt.ids,
        tgt: vocab.tokenize(&sample.response)?,
    })
}

pub fn encode_all(
    vocab: &Vocab,
    variant: PromptVariant,
    samples: &[&DialogueSample],
    with_user_id: bool,
) -> Result<Vec<Example>> {
    samples
        .iter()
        .map(|s| encode_sample(vocab, variant, s, with_user_id))
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic generator

/// Corpus register; pre-training data and experiment data differ in how
/// replies are punctuated and phrased.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Sns,
    Chat,
}

const OPENERS: [(&str, &str); 6] = [
    ("10-years", "yo"),
    ("20-years", "hey"),
    ("30-years", "well"),
    ("40-years", "hmm"),
    ("50-years", "indeed"),
    ("60-years", "ah"),
];

const CLOSERS: [(&str, &str); 2] = [("female", "you know"), ("male", "for sure")];

const OCCUPATION_TOPICS: [(&str, &str); 9] = [
    ("office-worker", "meetings"),
    ("college-student", "classes"),
    ("part-time-worker", "shifts"),
    ("unemployed", "job hunting"),
    ("homemaker", "housework"),
    ("business-owner", "clients"),
    ("high-school-student", "exams"),
    ("association-member", "events"),
    ("civil-servant", "paperwork"),
];

pub const HOBBIES: [&str; 16] = [
    "fishing", "cooking", "hiking", "gaming", "reading", "painting", "running", "karaoke",
    "camping", "baking", "cycling", "dancing", "gardening", "swimming", "shopping", "drawing",
];

pub const TICS: [&str; 16] = [
    "honestly", "basically", "literally", "seriously", "actually", "totally", "anyway",
    "frankly", "obviously", "really", "truly", "surely", "naturally", "clearly", "simply",
    "definitely",
];

/// Personal questions, answered from hidden traits.
pub const PERSONAL_QUESTIONS: [&str; 20] = [
    "what is your hobby?",
    "what do you do on weekends?",
    "how do you relax?",
    "what do you like?",
    "what makes you happy?",
    "what do you do after work?",
    "what do you do on holidays?",
    "what is fun for you?",
    "how do you spend your free time?",
    "what do you enjoy?",
    "what would you do today?",
    "what is your favorite thing?",
    "what do you do at night?",
    "what do you do in summer?",
    "what do you do in winter?",
    "any plans for sunday?",
    "what do you want to do?",
    "what are you into?",
    "what do you do for fun?",
    "tell me about yourself?",
];

/// Shipped stand-in question set for diversity probing. None of these occur
/// in generated corpora, so every model answers them zero-shot.
pub const PROBE_QUESTIONS: [&str; 20] = [
    "do you have a pet?",
    "what did you eat today?",
    "what is your dream?",
    "are you a morning person?",
    "what music do you like?",
    "do you like sports?",
    "what is your favorite food?",
    "where do you want to travel?",
    "what makes you angry?",
    "do you like movies?",
    "what is your best memory?",
    "who is your hero?",
    "what are you afraid of?",
    "do you cook?",
    "what do you collect?",
    "how do you stay healthy?",
    "do you read books?",
    "what is your motto?",
    "do you like cats?",
    "what do you do when sad?",
];

const SMALL_TALK: [&str; 6] = [
    "how are you?",
    "what do you do?",
    "where are you from?",
    "how was your day?",
    "are you busy?",
    "nice to meet you",
];

const GREETINGS: [&str; 3] = ["hi", "hello there", "good evening"];

const FILLER: [&str; 8] = ["so", "i", "and", "my", "is", "the", "love", "live"];

const EXTRA_WORDS: [&str; 24] = [
    "in", "with", "have", "lots", "of", "been", "busy", "doing", "good", "family", "fine",
    "thanks", "from", "work", "am", "you", "know", "for", "sure", "job", "hunting", "it", "too",
    "lately",
];

/// Hidden traits of a synthetic user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthUser {
    pub id: UserId,
    pub profile: UserProfile,
    pub hobby: String,
    pub tic: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_users: usize,
    pub turns_per_user: usize,
    pub partners_per_user: usize,
    pub domain: Domain,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(n_users: usize, turns_per_user: usize, seed: u64) -> Self {
        SynthConfig {
            n_users,
            turns_per_user,
            partners_per_user: 10,
            domain: Domain::Chat,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub users: Vec<SynthUser>,
    pub corpus: Corpus,
}

/// Every word the generator can emit, plus all profile labels.
pub fn desk_vocab() -> Vocab {
    let mut words: Vec<String> = Attribute::ALL
        .iter()
        .flat_map(|a| a.labels().iter().map(|s| s.to_string()))
        .collect();
    let phrases = OPENERS
        .iter()
        .map(|(_, w)| *w)
        .chain(CLOSERS.iter().map(|(_, w)| *w))
        .chain(OCCUPATION_TOPICS.iter().map(|(_, w)| *w))
        .chain(HOBBIES)
        .chain(TICS)
        .chain(PERSONAL_QUESTIONS)
        .chain(PROBE_QUESTIONS)
        .chain(SMALL_TALK)
        .chain(GREETINGS)
        .chain(FILLER)
        .chain(EXTRA_WORDS);
    for p in phrases {
        for w in p.split(|c: char| c == ' ' || crate::prompt::GLUE.contains(&c)) {
            if !w.is_empty() {
                words.push(w.to_string());
            }
        }
    }
    Vocab::new(words.iter().map(String::as_str)).expect("generator words are spellable")
}

fn lookup<'a>(table: &[(&str, &'a str)], key: &str) -> Option<&'a str> {
    table.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
}

pub fn random_profile(rng: &mut crate::rng::Rng) -> UserProfile {
    let mut p = UserProfile::new();
    for a in [Attribute::Gender, Attribute::Age, Attribute::Occupation, Attribute::Location] {
        let label = a.labels().choose(rng).expect("non-empty");
        p.set(a, label).expect("valid label");
    }
    if rng.random_bool(0.3) {
        p.set(Attribute::Marriage, "married").expect("valid label");
    }
    p
}

impl SynthUser {
    /// The reply this user gives to `question` (last context turn).
    pub fn respond(&self, question: &str, domain: Domain) -> String {
        let end = match domain {
            Domain::Chat => ".",
            Domain::Sns => "!",
        };
        if PERSONAL_QUESTIONS.contains(&question) {
            return match domain {
                Domain::Chat => format!("{} i love {}{end}", self.tic, self.hobby),
                Domain::Sns => format!("i love {} {}{end}", self.hobby, self.tic),
            };
        }
        let opener = lookup(&OPENERS, self.profile.get(Attribute::Age)).unwrap_or("so");
        let closer = lookup(&CLOSERS, self.profile.get(Attribute::Gender)).unwrap_or("too");
        let topic = lookup(&OCCUPATION_TOPICS, self.profile.get(Attribute::Occupation)).unwrap_or("work");
        let body = match question {
            "how are you?" if self.profile.get(Attribute::Marriage) == "married" => {
                "i am fine and my family is good".to_string()
            }
            "how are you?" => "i am fine thanks".to_string(),
            "what do you do?" => format!("i have lots of {topic}"),
            "where are you from?" => format!("i live in {}", self.profile.get(Attribute::Location)),
            "how was your day?" => format!("it was busy with {topic}"),
            "are you busy?" => format!("i have been doing {topic} lately"),
            _ => "nice to meet you too".to_string(),
        };
        format!("{opener} {body} {closer}{end}")
    }
}

/// Generates a deterministic corpus; 30% of each user's partners are held
/// out (10% dev, 20% test).
pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.n_users < 2 {
        return Err(Error::Usage("a synthetic corpus needs at least two users".into()));
    }
    if cfg.turns_per_user == 0 || cfg.partners_per_user == 0 {
        return Err(Error::Usage("turns_per_user and partners_per_user must be positive".into()));
    }
    let seed = Seed(cfg.seed);
    let mut ids = IdRegistry::new();
    let mut id_rng = seed.fork("user-ids").rng();
    let mut users = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let mut rng = seed.fork("users").fork_index(u as u64).rng();
        let id = ids.generate(&mut id_rng)?;
        let profile = random_profile(&mut rng);
        let hobby = HOBBIES.choose(&mut rng).expect("non-empty").to_string();
        let tic = TICS.choose(&mut rng).expect("non-empty").to_string();
        users.push(SynthUser {
            id,
            profile,
            hobby,
            tic,
        });
    }

    let mut samples = Vec::new();
    for (u, user) in users.iter().enumerate() {
        let mut rng = seed.fork("dialogues").fork_index(u as u64).rng();
        // Partners are outside the user set so that a partner, and every
        // exchange with them, falls in exactly one split.
        let mut partners = Vec::with_capacity(cfg.partners_per_user);
        for _ in 0..cfg.partners_per_user {
            partners.push((ids.generate(&mut id_rng)?, random_profile(&mut rng)));
        }
        for turn in 0..cfg.turns_per_user {
            let slot = turn % cfg.partners_per_user;
            let (partner_id, partner_profile) = &partners[slot];
            let split = split_for_slot(slot, cfg.partners_per_user);
            let question = if rng.random_bool(0.5) {
                *PERSONAL_QUESTIONS.choose(&mut rng).expect("non-empty")
            } else {
                *SMALL_TALK.choose(&mut rng).expect("non-empty")
            };
            let mut context = Vec::new();
            if rng.random_bool(0.3) {
                context.push(GREETINGS.choose(&mut rng).expect("non-empty").to_string());
            }
            context.push(question.to_string());
            samples.push(DialogueSample {
                user_id: user.id,
                partner_id: *partner_id,
                speaker_profile: user.profile.clone(),
                partner_profile: partner_profile.clone(),
                context,
                response: user.respond(question, cfg.domain),
                split,
            });
        }
    }
    Ok(SynthCorpus {
        users,
        corpus: Corpus::new(samples),
    })
}

/// Partner slots `0..70%` train, the next 10% dev, the rest test.
fn split_for_slot(slot: usize, n: usize) -> Split {
    let train = (n * 7).div_ceil(10);
    let dev = n / 10;
    if slot < train {
        Split::Train
    } else if slot < train + dev.max(1) {
        Split::Dev
    } else {
        Split::Test
    }
}

/// Splits users into two disjoint halves: (domain adaptation, fine-tuning).
pub fn halve_users(users: &BTreeSet<UserId>) -> (BTreeSet<UserId>, BTreeSet<UserId>) {
    let ordered: Vec<UserId> = users.iter().copied().collect();
    let half = ordered.len() / 2;
    (
        ordered[..half].iter().copied().collect(),
        ordered[half..].iter().copied().collect(),
    )
}
