//! Pre-norm transformer encoder–decoder.
//!
//! Every weight lives in a [`ParamSet`] under a dotted path. Linear layers
//! are `P` (an `out x in` matrix) plus `P.bias`; the attention projections of
//! encoder layer `i` are `enc.i.attn.{q,k,v,o}`, the decoder's are
//! `dec.i.self.*` and `dec.i.cross.*`.

mod config;

use std::collections::{BTreeMap, HashMap};

use rand::Rng as _;

pub use config::ModelConfig;

use crate::autograd::{AttentionSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::prompt::{Special, TokenId};
use crate::rng::{Rng, Seed};
use crate::tensor::Tensor;

/// Named parameters in a stable (sorted) order.
pub type ParamSet = BTreeMap<String, Tensor>;

/// One training or scoring example: encoder input and target response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<TokenId>,
    pub tgt: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqModel {
    config: ModelConfig,
    params: ParamSet,
}

/// Parameter and adapter leaves placed on a tape for one forward pass.
pub struct Bound {
    base: HashMap<String, Var>,
    lora: HashMap<String, (Var, Var)>,
}

impl Bound {
    /// Binds base weights, as trainable leaves when `trainable`.
    pub fn new(tape: &mut Tape, params: &ParamSet, trainable: bool) -> Self {
        let base = params
            .iter()
            .map(|(k, t)| {
                let v = if trainable { tape.param(t) } else { tape.constant(t) };
                (k.clone(), v)
            })
            .collect();
        Bound {
            base,
            lora: HashMap::new(),
        }
    }

    /// Binds explicit vars, in `params` order.
    pub fn from_vars(params: &ParamSet, vars: &[Var]) -> Self {
        Bound {
            base: params.keys().cloned().zip(vars.iter().copied()).collect(),
            lora: HashMap::new(),
        }
    }

    pub fn with_adapter(mut self, tape: &mut Tape, adapter: &LoraAdapter, trainable: bool) -> Self {
        for (path, pair) in adapter.entries() {
            let (a, b) = if trainable {
                (tape.param(&pair.a), tape.param(&pair.b))
            } else {
                (tape.constant(&pair.a), tape.constant(&pair.b))
            };
            self.lora.insert(path.clone(), (a, b));
        }
        self
    }

    pub fn var(&self, path: &str) -> Result<Var> {
        self.base
            .get(path)
            .copied()
            .ok_or_else(|| Error::Config(format!("no parameter named {path}")))
    }

    pub fn base_vars(&self) -> &HashMap<String, Var> {
        &self.base
    }

    pub fn lora_vars(&self) -> &HashMap<String, (Var, Var)> {
        &self.lora
    }
}

/// Per-forward options.
#[derive(Default)]
pub struct ForwardOpts<'r> {
    /// Dropout randomness; `None` disables dropout.
    pub dropout_rng: Option<&'r mut Rng>,
}

impl Seq2SeqModel {
    pub fn new(config: ModelConfig, seed: Seed) -> Result<Self> {
        config.validate()?;
        let mut rng = seed.fork("model-init").rng();
        let params = layout(&config)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Normal(std) => Tensor::randn(&shape, std, &mut rng),
                    Init::Zeros => Tensor::zeros(&shape),
                    Init::Ones => {
                        let mut t = Tensor::zeros(&shape);
                        t.data_mut().fill(1.0);
                        t
                    }
                };
                (name, t)
            })
            .collect();
        Ok(Seq2SeqModel { config, params })
    }

    /// Rebuilds a model from stored parameters, checking the full name/shape set.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &expected {
            match params.get(name) {
                Some(p) if p.shape() == shape.as_slice() => {}
                Some(p) => {
                    return Err(Error::Validation(format!(
                        "{name}: shape {:?}, expected {shape:?}",
                        p.shape()
                    )))
                }
                None => return Err(Error::Validation(format!("missing parameter {name}"))),
            }
        }
        Ok(Seq2SeqModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Paths of all linear-layer weight matrices.
    pub fn weight_paths(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(k, t)| t.shape().len() == 2 && k.as_str() != "embed")
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Query/key/value/output projections of every attention block.
    pub fn attention_paths(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.config.n_layers {
            for p in ["q", "k", "v", "o"] {
                out.push(format!("enc.{i}.attn.{p}"));
            }
        }
        for i in 0..self.config.n_layers {
            for block in ["self", "cross"] {
                for p in ["q", "k", "v", "o"] {
                    out.push(format!("dec.{i}.{block}.{p}"));
                }
            }
        }
        out
    }

    pub fn snap_to_f32(&mut self) {
        for t in self.params.values_mut() {
            t.snap_to_f32();
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_seq_len {
            return Err(Error::Length {
                len,
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    fn positions(&self, batch: usize, len: usize) -> Tensor {
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(batch * len * d);
        for _ in 0..batch {
            for pos in 0..len {
                for i in 0..d {
                    let k = (i / 2) as f64 * 2.0 / d as f64;
                    let angle = pos as f64 / 10_000f64.powf(k);
                    data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
                }
            }
        }
        Tensor::new(vec![batch * len, d], data).expect("consistent")
    }

    fn linear(&self, tape: &mut Tape, w: &Bound, path: &str, x: Var) -> Result<Var> {
        let weight = w.var(path)?;
        let bias = w.var(&format!("{path}.bias"))?;
        let y = tape.matmul_nt(x, weight)?;
        let mut y = tape.add_row(y, bias)?;
        if let Some(&(a, b)) = w.lora.get(path) {
            let down = tape.matmul_nt(x, a)?;
            let delta = tape.matmul_nt(down, b)?;
            y = tape.add(y, delta)?;
        }
        Ok(y)
    }

    fn norm(&self, tape: &mut Tape, w: &Bound, path: &str, x: Var) -> Result<Var> {
        let gain = w.var(&format!("{path}.gain"))?;
        let bias = w.var(&format!("{path}.bias"))?;
        tape.layer_norm(x, gain, bias)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, opts: &mut ForwardOpts) -> Result<Var> {
        let p = self.config.dropout;
        match opts.dropout_rng.as_deref_mut() {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let mask = (0..tape.value(x).len())
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                    .collect();
                tape.mask_mul(x, mask)
            }
            _ => Ok(x),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_block(
        &self,
        tape: &mut Tape,
        w: &Bound,
        prefix: &str,
        queries: Var,
        keys: Var,
        spec: AttentionSpec,
    ) -> Result<Var> {
        let q = self.linear(tape, w, &format!("{prefix}.q"), queries)?;
        let k = self.linear(tape, w, &format!("{prefix}.k"), keys)?;
        let v = self.linear(tape, w, &format!("{prefix}.v"), keys)?;
        let a = tape.attention(q, k, v, spec)?;
        self.linear(tape, w, &format!("{prefix}.o"), a)
    }

    fn ffn(&self, tape: &mut Tape, w: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(tape, w, &format!("{prefix}.up"), x)?;
        let h = tape.gelu(h);
        self.linear(tape, w, &format!("{prefix}.down"), h)
    }

    fn embed_padded(&self, tape: &mut Tape, w: &Bound, seqs: &[Vec<TokenId>]) -> Result<(Var, usize, Vec<bool>)> {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if len == 0 {
            return Err(Error::Usage("empty token sequence".into()));
        }
        for s in seqs {
            self.check_len(s.len())?;
        }
        let pad = Special::Pad.id();
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut valid = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            for i in 0..len {
                let t = s.get(i).copied().unwrap_or(pad);
                ids.push(t as usize);
                valid.push(i < s.len() && t != pad);
            }
        }
        let e = tape.embedding(w.var("embed")?, &ids)?;
        let pe = tape.constant(&self.positions(seqs.len(), len));
        Ok((tape.add(e, pe)?, len, valid))
    }

    /// Encoder states, `batch * src_len` rows, plus the source key mask.
    pub fn encode_graph(
        &self,
        tape: &mut Tape,
        w: &Bound,
        src: &[Vec<TokenId>],
        opts: &mut ForwardOpts,
    ) -> Result<(Var, usize, Vec<bool>)> {
        let (mut x, len, valid) = self.embed_padded(tape, w, src)?;
        let spec = AttentionSpec {
            batch: src.len(),
            q_len: len,
            k_len: len,
            heads: self.config.n_heads,
            causal: false,
            key_valid: valid.clone(),
        };
        for i in 0..self.config.n_layers {
            let h = self.norm(tape, w, &format!("enc.{i}.ln1"), x)?;
            let a = self.attention_block(tape, w, &format!("enc.{i}.attn"), h, h, spec.clone())?;
            let a = self.dropout(tape, a, opts)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, w, &format!("enc.{i}.ln2"), x)?;
            let f = self.ffn(tape, w, &format!("enc.{i}.ffn"), h)?;
            let f = self.dropout(tape, f, opts)?;
            x = tape.add(x, f)?;
        }
        Ok((self.norm(tape, w, "enc.ln", x)?, len, valid))
    }

    /// Logits for every decoder position, `batch * tgt_len` rows of `vocab`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_graph(
        &self,
        tape: &mut Tape,
        w: &Bound,
        enc: Var,
        src_len: usize,
        src_valid: &[bool],
        tgt: &[Vec<TokenId>],
        opts: &mut ForwardOpts,
    ) -> Result<Var> {
        let (mut y, len, valid) = self.embed_padded(tape, w, tgt)?;
        let self_spec = AttentionSpec {
            batch: tgt.len(),
            q_len: len,
            k_len: len,
            heads: self.config.n_heads,
            causal: true,
            key_valid: valid,
        };
        let cross_spec = AttentionSpec {
            batch: tgt.len(),
            q_len: len,
            k_len: src_len,
            heads: self.config.n_heads,
            causal: false,
            key_valid: src_valid.to_vec(),
        };
        for i in 0..self.config.n_layers {
            let h = self.norm(tape, w, &format!("dec.{i}.ln1"), y)?;
            let a = self.attention_block(tape, w, &format!("dec.{i}.self"), h, h, self_spec.clone())?;
            let a = self.dropout(tape, a, opts)?;
            y = tape.add(y, a)?;
            let h = self.norm(tape, w, &format!("dec.{i}.ln2"), y)?;
            let c = self.attention_block(tape, w, &format!("dec.{i}.cross"), h, enc, cross_spec.clone())?;
            let c = self.dropout(tape, c, opts)?;
            y = tape.add(y, c)?;
            let h = self.norm(tape, w, &format!("dec.{i}.ln3"), y)?;
            let f = self.ffn(tape, w, &format!("dec.{i}.ffn"), h)?;
            let f = self.dropout(tape, f, opts)?;
            y = tape.add(y, f)?;
        }
        let y = self.norm(tape, w, "dec.ln", y)?;
        self.linear(tape, w, "out", y)
    }

    /// Mean next-token loss over a batch with teacher forcing: the decoder
    /// reads `[BOS] tgt` and is scored on `tgt [EOS]`.
    pub fn loss_graph(
        &self,
        tape: &mut Tape,
        w: &Bound,
        batch: &[Example],
        opts: &mut ForwardOpts,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let src: Vec<Vec<TokenId>> = batch.iter().map(|e| e.src.clone()).collect();
        let dec_in: Vec<Vec<TokenId>> = batch.iter().map(|e| decoder_input(&e.tgt)).collect();
        let len = dec_in.iter().map(Vec::len).max().unwrap_or(0);
        let mut targets = Vec::with_capacity(batch.len() * len);
        for e in batch {
            for i in 0..len {
                targets.push(match i.cmp(&e.tgt.len()) {
                    std::cmp::Ordering::Less => Some(e.tgt[i] as usize),
                    std::cmp::Ordering::Equal => Some(Special::Eos.id() as usize),
                    std::cmp::Ordering::Greater => None,
                });
            }
        }
        let (enc, src_len, src_valid) = self.encode_graph(tape, w, &src, opts)?;
        let logits = self.decode_graph(tape, w, enc, src_len, &src_valid, &dec_in, opts)?;
        tape.cross_entropy(logits, &targets)
    }

    /// Logits shaped `[batch, tgt_len, vocab]` for explicit decoder inputs.
    pub fn forward(
        &self,
        adapter: Option<&LoraAdapter>,
        src: &[Vec<TokenId>],
        tgt: &[Vec<TokenId>],
    ) -> Result<Tensor> {
        if src.len() != tgt.len() {
            return Err(Error::Shape("source and target batch sizes differ".into()));
        }
        let mut tape = Tape::new();
        let w = self.bind_frozen(&mut tape, adapter);
        let mut opts = ForwardOpts::default();
        let (enc, src_len, valid) = self.encode_graph(&mut tape, &w, src, &mut opts)?;
        let logits = self.decode_graph(&mut tape, &w, enc, src_len, &valid, tgt, &mut opts)?;
        let len = tgt.iter().map(Vec::len).max().unwrap_or(0);
        tape.value(logits)
            .reshape(vec![tgt.len(), len, self.config.vocab_size])
    }

    fn bind_frozen(&self, tape: &mut Tape, adapter: Option<&LoraAdapter>) -> Bound {
        let w = Bound::new(tape, &self.params, false);
        match adapter {
            Some(a) => w.with_adapter(tape, a, false),
            None => w,
        }
    }

    /// Negative log-likelihood of each of `tgt [EOS]` given `src`.
    pub fn token_nlls(&self, adapter: Option<&LoraAdapter>, src: &[TokenId], tgt: &[TokenId]) -> Result<Vec<f64>> {
        let dec_in = decoder_input(tgt);
        let logits = self.forward(adapter, &[src.to_vec()], &[dec_in])?;
        let v = self.config.vocab_size;
        let labels = tgt.iter().copied().chain([Special::Eos.id()]);
        Ok(labels
            .enumerate()
            .map(|(i, t)| {
                let row = &logits.data()[i * v..(i + 1) * v];
                crate::autograd::log_sum_exp(row) - row[t as usize]
            })
            .collect())
    }

    /// Mean per-token NLL; perplexity is its exponential.
    pub fn sequence_nll(&self, adapter: Option<&LoraAdapter>, src: &[TokenId], tgt: &[TokenId]) -> Result<f64> {
        if tgt.is_empty() {
            return Err(Error::Usage("sequence_nll of an empty target".into()));
        }
        let nlls = self.token_nlls(adapter, src, tgt)?;
        Ok(nlls.iter().sum::<f64>() / nlls.len() as f64)
    }

    /// Argmax decoding from `[BOS]`; stops after emitting `[EOS]` (which is
    /// included in the output) or `max_new_tokens` tokens.
    pub fn greedy_decode(
        &self,
        adapter: Option<&LoraAdapter>,
        src: &[TokenId],
        max_new_tokens: usize,
    ) -> Result<Vec<TokenId>> {
        if max_new_tokens == 0 {
            return Err(Error::Usage("max_new_tokens must be at least 1".into()));
        }
        let budget = max_new_tokens.min(self.config.max_seq_len.saturating_sub(1).max(1));
        let mut tape = Tape::new();
        let w = self.bind_frozen(&mut tape, adapter);
        let mut opts = ForwardOpts::default();
        let (enc, src_len, valid) = self.encode_graph(&mut tape, &w, &[src.to_vec()], &mut opts)?;
        let enc_states = tape.value(enc).clone();
        let mut out = Vec::new();
        let mut dec_in = vec![Special::Bos.id()];
        let eos = Special::Eos.id();
        let v = self.config.vocab_size;
        while out.len() < budget {
            let mut step = Tape::new();
            let w = self.bind_frozen(&mut step, adapter);
            let enc = step.constant(&enc_states);
            let logits = self.decode_graph(&mut step, &w, enc, src_len, &valid, &[dec_in.clone()], &mut opts)?;
            let last = dec_in.len() - 1;
            let row = &step.value(logits).data()[last * v..(last + 1) * v];
            let next = argmax(row) as TokenId;
            out.push(next);
            if next == eos {
                break;
            }
            dec_in.push(next);
        }
        Ok(out)
    }

    /// Encoder states for a single sequence, `len x d_model`.
    pub fn encode(&self, src: &[TokenId]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let w = self.bind_frozen(&mut tape, None);
        let (enc, _, _) = self.encode_graph(&mut tape, &w, &[src.to_vec()], &mut ForwardOpts::default())?;
        Ok(tape.value(enc).clone())
    }
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Every parameter in initialization order. Linear weights are drawn from
/// `N(0, 1/d_in)`, embeddings from `N(0, 1)` and the output projection from
/// `N(0, 0.02^2)`.
fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
    let mut out = Vec::new();
    let linear = |out: &mut Vec<_>, path: String, d_out: usize, d_in: usize| {
        out.push((path.clone(), vec![d_out, d_in], Init::Normal(1.0 / (d_in as f64).sqrt())));
        out.push((format!("{path}.bias"), vec![d_out], Init::Zeros));
    };
    let norm = |out: &mut Vec<_>, path: String| {
        out.push((format!("{path}.gain"), vec![d], Init::Ones));
        out.push((format!("{path}.bias"), vec![d], Init::Zeros));
    };
    out.push(("embed".to_string(), vec![v, d], Init::Normal(1.0)));
    for i in 0..config.n_layers {
        for p in ["q", "k", "v", "o"] {
            linear(&mut out, format!("enc.{i}.attn.{p}"), d, d);
        }
        linear(&mut out, format!("enc.{i}.ffn.up"), f, d);
        linear(&mut out, format!("enc.{i}.ffn.down"), d, f);
        norm(&mut out, format!("enc.{i}.ln1"));
        norm(&mut out, format!("enc.{i}.ln2"));
    }
    for i in 0..config.n_layers {
        for block in ["self", "cross"] {
            for p in ["q", "k", "v", "o"] {
                linear(&mut out, format!("dec.{i}.{block}.{p}"), d, d);
            }
        }
        linear(&mut out, format!("dec.{i}.ffn.up"), f, d);
        linear(&mut out, format!("dec.{i}.ffn.down"), d, f);
        for n in ["ln1", "ln2", "ln3"] {
            norm(&mut out, format!("dec.{i}.{n}"));
        }
    }
    norm(&mut out, "enc.ln".into());
    norm(&mut out, "dec.ln".into());
    out.push(("out".to_string(), vec![v, d], Init::Normal(0.02)));
    out.push(("out.bias".to_string(), vec![v], Init::Zeros));
    out
}

pub fn decoder_input(tgt: &[TokenId]) -> Vec<TokenId> {
    let mut v = Vec::with_capacity(tgt.len() + 1);
    v.push(Special::Bos.id());
    v.extend_from_slice(tgt);
    v
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}
