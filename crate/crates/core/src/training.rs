//! Training stages: pre-training, domain adaptation and per-user fine-tuning
//! (one shared id-prefixed model, per-user LoRA, or per-user full copies).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::corpus::{encode_all, Corpus, Split};
use crate::error::{Error, Result};
use crate::lora::{attach, LoraAdapter, DEFAULT_RANK};
use crate::model::{Bound, Example, ForwardOpts, ModelConfig, Seq2SeqModel};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::prompt::{PromptVariant, UserId, Vocab};
use crate::rng::Seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 16,
            max_epochs: 50,
            patience: 1,
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        AdamConfig::with_lr(self.lr).validate()?;
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Stage a base checkpoint has completed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Pretrained,
    DomainAdapted,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrained => "pretrained",
            Stage::DomainAdapted => "domain-adapted",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained" => Ok(Stage::Pretrained),
            "domain-adapted" => Ok(Stage::DomainAdapted),
            _ => Err(Error::Parse(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    OneId,
    Lora,
    Full,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::OneId, Method::Lora, Method::Full];

    pub fn name(self) -> &'static str {
        match self {
            Method::OneId => "one-id",
            Method::Lora => "lora",
            Method::Full => "full",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown fine-tuning method {s:?}")))
    }
}

/// A shared base model and what it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseCheckpoint {
    pub model: Seq2SeqModel,
    pub stage: Stage,
    pub variant: PromptVariant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EarlyStop {
    pub stop: bool,
    /// 1-based epoch with the lowest loss so far (first on ties).
    pub best_epoch: usize,
}

/// Stops once `patience` epochs have passed without a strict improvement.
pub fn early_stop(dev_losses: &[f64], patience: usize) -> EarlyStop {
    assert!(!dev_losses.is_empty(), "early_stop needs at least one epoch");
    let mut best = 0;
    for (i, &l) in dev_losses.iter().enumerate() {
        if l < dev_losses[best] {
            best = i;
        }
    }
    EarlyStop {
        stop: dev_losses.len() - 1 - best >= patience,
        best_epoch: best + 1,
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitReport {
    pub train_losses: Vec<f64>,
    pub dev_losses: Vec<f64>,
    pub best_epoch: usize,
    pub steps: usize,
}

/// What an optimizer run updates.
pub enum Trainable<'a> {
    Full(&'a mut Seq2SeqModel),
    Lora {
        base: &'a Seq2SeqModel,
        adapter: &'a mut LoraAdapter,
    },
}

enum Snapshot {
    Full(Box<Seq2SeqModel>),
    Lora(Box<LoraAdapter>),
}

impl Trainable<'_> {
    fn model(&self) -> &Seq2SeqModel {
        match self {
            Trainable::Full(m) => m,
            Trainable::Lora { base, .. } => base,
        }
    }

    fn adapter(&self) -> Option<&LoraAdapter> {
        match self {
            Trainable::Full(_) => None,
            Trainable::Lora { adapter, .. } => Some(adapter),
        }
    }

    fn snapshot(&self) -> Snapshot {
        match self {
            Trainable::Full(m) => Snapshot::Full(Box::new((**m).clone())),
            Trainable::Lora { adapter, .. } => Snapshot::Lora(Box::new((**adapter).clone())),
        }
    }

    fn restore(&mut self, s: Snapshot) {
        match (self, s) {
            (Trainable::Full(m), Snapshot::Full(s)) => **m = *s,
            (Trainable::Lora { adapter, .. }, Snapshot::Lora(s)) => **adapter = *s,
            _ => unreachable!("snapshot kind matches trainable kind"),
        }
    }

    /// Every trainable tensor under a stable name.
    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            Trainable::Full(m) => m.params_mut().iter_mut().map(|(k, t)| (k.clone(), t)).collect(),
            Trainable::Lora { adapter, .. } => adapter
                .entries_mut()
                .iter_mut()
                .flat_map(|(k, p)| [(format!("{k}#a"), &mut p.a), (format!("{k}#b"), &mut p.b)])
                .collect(),
        }
    }

    /// Builds the loss graph and returns it with the var of each trainable tensor.
    fn loss(&self, tape: &mut Tape, batch: &[Example]) -> Result<(Var, BTreeMap<String, Var>)> {
        let model = self.model();
        let mut vars = BTreeMap::new();
        let bound = match self {
            Trainable::Full(m) => {
                let b = Bound::new(tape, m.params(), true);
                for (k, &v) in b.base_vars() {
                    vars.insert(k.clone(), v);
                }
                b
            }
            Trainable::Lora { base, adapter } => {
                let b = Bound::new(tape, base.params(), false).with_adapter(tape, adapter, true);
                for (k, &(a, bv)) in b.lora_vars() {
                    vars.insert(format!("{k}#a"), a);
                    vars.insert(format!("{k}#b"), bv);
                }
                b
            }
        };
        let loss = model.loss_graph(tape, &bound, batch, &mut ForwardOpts::default())?;
        Ok((loss, vars))
    }
}

/// Token-weighted mean NLL of `examples` (each scored on `tgt [EOS]`).
pub fn mean_nll(model: &Seq2SeqModel, adapter: Option<&LoraAdapter>, examples: &[Example], batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Usage("mean_nll of an empty example set".into()));
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for batch in examples.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let w = Bound::new(&mut tape, model.params(), false);
        let w = match adapter {
            Some(a) => w.with_adapter(&mut tape, a, false),
            None => w,
        };
        let loss = model.loss_graph(&mut tape, &w, batch, &mut ForwardOpts::default())?;
        let n: usize = batch.iter().map(|e| e.tgt.len() + 1).sum();
        total += tape.value(loss).data()[0] * n as f64;
        tokens += n;
    }
    Ok(total / tokens as f64)
}

/// Adam with early stopping on `dev` (or on `train` when `dev` is empty).
/// The best epoch's weights are restored before returning.
pub fn fit(mut target: Trainable, train: &[Example], dev: &[Example], cfg: &TrainConfig) -> Result<FitReport> {
    cfg.validate()?;
    let mut report = FitReport::default();
    if train.is_empty() {
        return Ok(report);
    }
    let seed = Seed(cfg.seed);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut states: BTreeMap<String, AdamState> = BTreeMap::new();
    for (name, t) in target.tensors_mut() {
        states.insert(name, AdamState::new(t, adam.clone())?);
    }
    let mut best: Option<Snapshot> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    'epochs: for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut seed.fork("shuffle").fork_index(epoch as u64).rng());
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                break;
            }
            let batch: Vec<Example> = idx.iter().map(|&i| train[i].clone()).collect();
            let mut tape = Tape::new();
            let (loss, vars) = target.loss(&mut tape, &batch)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss {value} at epoch {}, step {}",
                    epoch + 1,
                    report.steps + 1
                )));
            }
            let n: usize = batch.iter().map(|e| e.tgt.len() + 1).sum();
            epoch_loss += value * n as f64;
            epoch_tokens += n;
            let mut grads = tape.backward(loss)?;
            for (name, t) in target.tensors_mut() {
                let g = vars.get(&name).and_then(|&v| grads.take(v));
                t.grad = Some(g.unwrap_or_else(|| vec![0.0; t.len()]));
                adam_step(t, states.get_mut(&name).expect("state per tensor"))?;
                t.grad = None;
            }
            report.steps += 1;
        }
        if epoch_tokens == 0 {
            break;
        }
        report.train_losses.push(epoch_loss / epoch_tokens as f64);
        let dev_loss = if dev.is_empty() {
            mean_nll(target.model(), target.adapter(), train, cfg.batch_size)?
        } else {
            mean_nll(target.model(), target.adapter(), dev, cfg.batch_size)?
        };
        if !dev_loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite dev loss at epoch {}", epoch + 1)));
        }
        report.dev_losses.push(dev_loss);
        let es = early_stop(&report.dev_losses, cfg.patience);
        if es.best_epoch == report.dev_losses.len() {
            best = Some(target.snapshot());
        }
        report.best_epoch = es.best_epoch;
        log::debug!("epoch {} train {:.4} dev {dev_loss:.4}", epoch + 1, report.train_losses[epoch]);
        if es.stop {
            break 'epochs;
        }
    }
    if let Some(s) = best {
        target.restore(s);
    }
    Ok(report)
}

fn split_examples(corpus: &Corpus, vocab: &Vocab, variant: PromptVariant, with_id: bool) -> Result<(Vec<Example>, Vec<Example>)> {
    let train = encode_all(vocab, variant, &corpus.split(Split::Train), with_id)?;
    let dev = encode_all(vocab, variant, &corpus.split(Split::Dev), with_id)?;
    Ok((train, dev))
}

/// Trains a fresh model on every user's training split.
pub fn pretrain(
    corpus: &Corpus,
    vocab: &Vocab,
    variant: PromptVariant,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(BaseCheckpoint, FitReport)> {
    if model_cfg.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocab_size {} differs from vocabulary size {}",
            model_cfg.vocab_size,
            vocab.len()
        )));
    }
    let (train, dev) = split_examples(corpus, vocab, variant, false)?;
    if train.is_empty() {
        return Err(Error::Usage("pre-training corpus has no training samples".into()));
    }
    let mut model = Seq2SeqModel::new(model_cfg.clone(), Seed(cfg.seed).fork("init"))?;
    let report = fit(Trainable::Full(&mut model), &train, &dev, cfg)?;
    model.snap_to_f32();
    Ok((
        BaseCheckpoint {
            model,
            stage: Stage::Pretrained,
            variant,
        },
        report,
    ))
}

/// Continues training the whole base on a disjoint set of users.
pub fn domain_adapt(
    base: &BaseCheckpoint,
    corpus: &Corpus,
    finetune_users: &BTreeSet<UserId>,
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<(BaseCheckpoint, FitReport)> {
    let overlap: Vec<String> = corpus
        .users()
        .intersection(finetune_users)
        .map(|u| u.to_string())
        .collect();
    if !overlap.is_empty() {
        return Err(Error::Validation(format!(
            "domain-adaptation users overlap fine-tuning users: {}",
            overlap.join(", ")
        )));
    }
    let mut model = base.model.clone();
    let (train, dev) = split_examples(corpus, vocab, base.variant, false)?;
    let report = fit(Trainable::Full(&mut model), &train, &dev, cfg)?;
    model.snap_to_f32();
    Ok((
        BaseCheckpoint {
            model,
            stage: Stage::DomainAdapted,
            variant: base.variant,
        },
        report,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOpts {
    pub rank: usize,
    /// Adapted weight paths; `None` means every attention projection.
    pub targets: Option<Vec<String>>,
    /// Accept a base that skipped domain adaptation.
    pub allow_unadapted: bool,
}

impl Default for FinetuneOpts {
    fn default() -> Self {
        FinetuneOpts {
            rank: DEFAULT_RANK,
            targets: None,
            allow_unadapted: false,
        }
    }
}

/// One user's fine-tuning result.
#[derive(Debug, Clone, PartialEq)]
pub enum UserArtifact {
    Lora(LoraAdapter),
    Full(Seq2SeqModel),
}

fn check_stage(base: &BaseCheckpoint, opts: &FinetuneOpts) -> Result<()> {
    if base.stage != Stage::DomainAdapted && !opts.allow_unadapted {
        return Err(Error::Prerequisite(format!(
            "base checkpoint is {}; run domain adaptation first or allow an unadapted base",
            base.stage
        )));
    }
    Ok(())
}

/// Fine-tunes a per-user artifact (LoRA adapter or full copy) on the
/// samples of `user` in `corpus`.
pub fn finetune_user(
    base: &BaseCheckpoint,
    corpus: &Corpus,
    user: UserId,
    vocab: &Vocab,
    method: Method,
    opts: &FinetuneOpts,
    cfg: &TrainConfig,
) -> Result<(UserArtifact, FitReport)> {
    check_stage(base, opts)?;
    let mine = corpus.for_user(user);
    let (train, dev) = split_examples(&mine, vocab, base.variant, false)?;
    if train.is_empty() {
        return Err(Error::Usage(format!("user {user} has no training samples")));
    }
    let seed = Seed(cfg.seed).fork(user.as_str());
    let cfg = TrainConfig {
        seed: seed.fork("fit").0,
        ..cfg.clone()
    };
    match method {
        Method::Lora => {
            let targets = opts.targets.clone().unwrap_or_else(|| base.model.attention_paths());
            let mut adapter = attach(&base.model, &targets, opts.rank, user, &mut seed.fork("lora-init").rng())?;
            let report = fit(
                Trainable::Lora {
                    base: &base.model,
                    adapter: &mut adapter,
                },
                &train,
                &dev,
                &cfg,
            )?;
            adapter.snap_to_f32();
            Ok((UserArtifact::Lora(adapter), report))
        }
        Method::Full => {
            let mut model = base.model.clone();
            let report = fit(Trainable::Full(&mut model), &train, &dev, &cfg)?;
            model.snap_to_f32();
            Ok((UserArtifact::Full(model), report))
        }
        Method::OneId => Err(Error::Usage(
            "one-id trains a single shared model; use finetune_one_id".into(),
        )),
    }
}

/// Fine-tunes one shared model on all users' samples with each prompt
/// prefixed by the speaker's id.
pub fn finetune_one_id(
    base: &BaseCheckpoint,
    corpus: &Corpus,
    vocab: &Vocab,
    opts: &FinetuneOpts,
    cfg: &TrainConfig,
) -> Result<(Seq2SeqModel, FitReport)> {
    check_stage(base, opts)?;
    let (train, dev) = split_examples(corpus, vocab, base.variant, true)?;
    if train.is_empty() {
        return Err(Error::Usage("one-id corpus has no training samples".into()));
    }
    let mut model = base.model.clone();
    let report = fit(Trainable::Full(&mut model), &train, &dev, cfg)?;
    model.snap_to_f32();
    Ok((model, report))
}
