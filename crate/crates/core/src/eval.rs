//! Response-quality and diversity metrics, and report assembly.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::DialogueSample;
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::model::Seq2SeqModel;
use crate::prompt::{build_prompt, prepend_user_id, Mode, PromptVariant, UserId, UserProfile, Vocab, GLUE};

pub const SIM_THRESHOLD: f64 = 0.9;

/// Whitespace tokens with sentence punctuation split off.
pub fn words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for w in text.split_whitespace() {
        let mut rest = w;
        let mut tail = Vec::new();
        while let Some(c) = rest.chars().last().filter(|c| GLUE.contains(c)) {
            let cut = rest.len() - c.len_utf8();
            tail.push(&rest[cut..]);
            rest = &rest[..cut];
        }
        if !rest.is_empty() {
            out.push(rest);
        }
        out.extend(tail.into_iter().rev());
    }
    out
}

/// Trimmed, whitespace-collapsed, lower-cased.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure (beta = 1); zero when either side is empty or nothing matches.
pub fn rouge_l<T: PartialEq>(hyp: &[T], reference: &[T]) -> f64 {
    let l = lcs_len(hyp, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / hyp.len() as f64;
    let r = l as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

pub fn rouge_l_text(hyp: &str, reference: &str) -> f64 {
    rouge_l(&words(hyp), &words(reference))
}

/// Unique n-grams over all n-grams, each utterance contributing its own.
pub fn distinct_n<S: AsRef<str>>(utterances: &[S], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Usage("distinct_n needs n >= 1".into()));
    }
    let mut total = 0usize;
    let mut unique = HashSet::new();
    for u in utterances {
        let w = words(u.as_ref());
        for g in w.windows(n) {
            total += 1;
            unique.insert(g.to_vec());
        }
    }
    Ok(if total == 0 { 0.0 } else { unique.len() as f64 / total as f64 })
}

/// Distinct whole utterances (after normalization) over utterances.
pub fn dist_s<S: AsRef<str>>(utterances: &[S]) -> Result<f64> {
    if utterances.is_empty() {
        return Err(Error::Usage("dist_s of an empty set".into()));
    }
    let unique: HashSet<String> = utterances.iter().map(|u| normalize(u.as_ref())).collect();
    Ok(unique.len() as f64 / utterances.len() as f64)
}

/// Fraction of similarities at or above `threshold`.
pub fn acc_at_sim(sims: &[f64], threshold: f64) -> Result<f64> {
    if sims.is_empty() {
        return Err(Error::Usage("acc_at_sim of no pairs".into()));
    }
    Ok(sims.iter().filter(|&&s| s >= threshold).count() as f64 / sims.len() as f64)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Sentence embeddings from a frozen encoder: mean of the final encoder
/// states, scaled to unit length.
#[derive(Debug, Clone)]
pub struct Embedder {
    model: Seq2SeqModel,
    vocab: Vocab,
}

impl Embedder {
    pub fn new(model: Seq2SeqModel, vocab: Vocab) -> Self {
        Embedder { model, vocab }
    }

    pub fn dim(&self) -> usize {
        self.model.config().d_model
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(Error::Usage("cannot embed an empty utterance".into()));
        }
        let mut ids = self.vocab.tokenize_mode(text, Mode::Lenient)?;
        ids.truncate(self.model.config().max_seq_len);
        let states = self.model.encode(&ids)?;
        let (rows, d) = states.dims2()?;
        let mut v = vec![0.0; d];
        for r in 0..rows {
            for (acc, x) in v.iter_mut().zip(&states.data()[r * d..(r + 1) * d]) {
                *acc += x / rows as f64;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm.is_nan() || norm <= 0.0 {
            return Err(Error::Numeric(format!("embedding of {text:?} has zero norm")));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }

    /// Cosine similarity; an empty side scores 0.
    pub fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        if a.trim().is_empty() || b.trim().is_empty() {
            return Ok(0.0);
        }
        Ok(cosine(&self.embed(a)?, &self.embed(b)?))
    }
}

/// Inputs to one response.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub user_id: UserId,
    pub speaker_profile: &'a UserProfile,
    pub partner_profile: &'a UserProfile,
    pub context: &'a [String],
}

impl<'a> From<&'a DialogueSample> for Query<'a> {
    fn from(s: &'a DialogueSample) -> Self {
        Query {
            user_id: s.user_id,
            speaker_profile: &s.speaker_profile,
            partner_profile: &s.partner_profile,
            context: &s.context,
        }
    }
}

pub trait DialogueModel: Sync {
    fn respond(&self, q: &Query) -> Result<String>;

    /// Summed NLL of `response` and the number of scored tokens.
    fn score(&self, q: &Query, response: &str) -> Result<(f64, usize)>;
}

/// A seq2seq model (optionally behind a user adapter) with its prompt format.
pub struct ModelDialogue<'a> {
    pub model: &'a Seq2SeqModel,
    pub adapter: Option<&'a LoraAdapter>,
    pub vocab: &'a Vocab,
    pub variant: PromptVariant,
    /// Prefix prompts with the user id (the one-id regime).
    pub with_user_id: bool,
    pub max_new_tokens: usize,
}

impl ModelDialogue<'_> {
    fn prompt(&self, q: &Query) -> Result<Vec<u32>> {
        let p = build_prompt(self.vocab, self.variant, q.speaker_profile, q.partner_profile, q.context)?;
        Ok(if self.with_user_id {
            prepend_user_id(self.vocab, &p, q.user_id)?.ids
        } else {
            p.ids
        })
    }
}

impl DialogueModel for ModelDialogue<'_> {
    fn respond(&self, q: &Query) -> Result<String> {
        let ids = self.model.greedy_decode(self.adapter, &self.prompt(q)?, self.max_new_tokens)?;
        self.vocab.decode_response(&ids)
    }

    fn score(&self, q: &Query, response: &str) -> Result<(f64, usize)> {
        let tgt = self.vocab.tokenize(response)?;
        let nlls = self.model.token_nlls(self.adapter, &self.prompt(q)?, &tgt)?;
        Ok((nlls.iter().sum(), nlls.len()))
    }
}

/// One scored generation, persisted so reports can be recomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub user_id: UserId,
    pub context: Vec<String>,
    pub reference: String,
    pub generated: String,
    pub similarity: f64,
    pub rouge_l: f64,
    pub nll_sum: f64,
    pub nll_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tag: String,
    pub mean_similarity: f64,
    pub acc_at_sim: f64,
    pub rouge_l: f64,
    pub perplexity: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
    pub dist_s: f64,
    pub samples: usize,
}

impl EvalReport {
    /// Aggregates persisted generations.
    pub fn from_records(tag: &str, records: &[GenerationRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Usage("evaluation over an empty split".into()));
        }
        let n = records.len() as f64;
        let sims: Vec<f64> = records.iter().map(|r| r.similarity).collect();
        let generated: Vec<&str> = records.iter().map(|r| r.generated.as_str()).collect();
        let nll: f64 = records.iter().map(|r| r.nll_sum).sum();
        let tokens: usize = records.iter().map(|r| r.nll_tokens).sum();
        Ok(EvalReport {
            tag: tag.to_string(),
            mean_similarity: sims.iter().sum::<f64>() / n,
            acc_at_sim: acc_at_sim(&sims, SIM_THRESHOLD)?,
            rouge_l: records.iter().map(|r| r.rouge_l).sum::<f64>() / n,
            perplexity: if tokens == 0 { f64::NAN } else { (nll / tokens as f64).exp() },
            distinct_1: distinct_n(&generated, 1)?,
            distinct_2: distinct_n(&generated, 2)?,
            dist_s: dist_s(&generated)?,
            samples: records.len(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }
}

pub fn render_table(reports: &[EvalReport]) -> String {
    let mut out = format!(
        "{:<16} {:>8} {:>8} {:>8} {:>9} {:>8} {:>8} {:>8} {:>6}\n",
        "model", "sim", "acc@0.9", "rouge-l", "ppl", "dist-1", "dist-2", "dist-s", "n"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<16} {:>8.4} {:>8.4} {:>8.4} {:>9.3} {:>8.4} {:>8.4} {:>8.4} {:>6}",
            r.tag, r.mean_similarity, r.acc_at_sim, r.rouge_l, r.perplexity, r.distinct_1, r.distinct_2, r.dist_s, r.samples
        );
    }
    out
}

/// Greedy-decodes every sample's context and scores it against the reference.
pub fn generate_records(
    model: &dyn DialogueModel,
    samples: &[&DialogueSample],
    embedder: &Embedder,
) -> Result<Vec<GenerationRecord>> {
    samples
        .iter()
        .map(|s| {
            let q = Query::from(*s);
            let generated = model.respond(&q)?;
            let (nll_sum, nll_tokens) = model.score(&q, &s.response)?;
            Ok(GenerationRecord {
                user_id: s.user_id,
                context: s.context.clone(),
                reference: s.response.clone(),
                similarity: embedder.similarity(&generated, &s.response)?,
                rouge_l: rouge_l_text(&generated, &s.response),
                generated,
                nll_sum,
                nll_tokens,
            })
        })
        .collect()
}

pub fn evaluate_model(
    tag: &str,
    model: &dyn DialogueModel,
    samples: &[&DialogueSample],
    embedder: &Embedder,
) -> Result<(EvalReport, Vec<GenerationRecord>)> {
    let records = generate_records(model, samples, embedder)?;
    Ok((EvalReport::from_records(tag, &records)?, records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub question: String,
    pub distinct_1: f64,
    pub distinct_2: f64,
    pub dist_s: f64,
    pub answers: Vec<(UserId, String)>,
}

/// Asks every user model each question and measures the spread of answers.
pub fn diversity_probe(
    users: &[(UserId, UserProfile, &dyn DialogueModel)],
    questions: &[String],
) -> Result<Vec<ProbeResult>> {
    if users.is_empty() {
        return Err(Error::Usage("diversity probe needs at least one user model".into()));
    }
    let nobody = UserProfile::new();
    questions
        .iter()
        .map(|question| {
            let context = std::slice::from_ref(question);
            let answers = users
                .iter()
                .map(|(id, profile, m)| {
                    let q = Query {
                        user_id: *id,
                        speaker_profile: profile,
                        partner_profile: &nobody,
                        context,
                    };
                    Ok((*id, m.respond(&q)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let texts: Vec<&str> = answers.iter().map(|(_, a)| a.as_str()).collect();
            Ok(ProbeResult {
                question: question.clone(),
                distinct_1: distinct_n(&texts, 1)?,
                distinct_2: distinct_n(&texts, 2)?,
                dist_s: dist_s(&texts)?,
                answers,
            })
        })
        .collect()
}
