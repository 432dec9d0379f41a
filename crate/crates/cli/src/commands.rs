use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Display;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{Context, Result};
use persona_core::corpus::{self, Domain, SynthConfig, PROBE_QUESTIONS};
use persona_core::eval::{self, DialogueModel, Embedder, EvalReport, ModelDialogue};
use persona_core::profile_inference::{infer_profile as infer, KeywordClassifier, PostHistory};
use persona_core::prompt::Attribute;
use persona_core::registry::{self, PromptInputs};
use persona_core::training::{self, FinetuneOpts, UserArtifact};
use persona_core::{
    BaseCheckpoint, Corpus, DialogueSample, Error, LoraAdapter, Method, ModelConfig, Registry, RegistryEntry,
    Seq2SeqModel, Server, Split, Stage, TrainConfig, UserId, UserProfile, Vocab,
};
use serde_json::json;

use crate::manifest::Manifest;
use crate::{
    AdaptArgs, ChatArgs, EvaluateArgs, FinetuneArgs, InferArgs, ModelArgs, PretrainArgs, ProbeArgs, ServeArgs,
    SynthArgs, TrainArgs,
};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Usage(msg.into()).into()
}

fn parse<T: FromStr>(s: &str, what: &str) -> Result<T>
where
    T::Err: Display,
{
    s.parse().map_err(|e| usage(format!("bad {what} {s:?}: {e}")))
}

/// Fails with a missing-prerequisite error naming the command that makes `path`.
fn require(path: &Path, what: &str, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Prerequisite(format!(
            "{what} {} not found; run `persona {producer}` first",
            path.display()
        ))
        .into())
    }
}

/// `path` with `suffix` appended to its file name.
fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Dev => "dev",
        Split::Test => "test",
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        _ => Err(usage(format!("unknown split {s:?}; expected train, dev or test"))),
    }
}

fn parse_users(list: &str) -> Result<BTreeSet<UserId>> {
    let users = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse::<UserId>(s, "user id"))
        .collect::<Result<BTreeSet<_>>>()?;
    if users.is_empty() {
        return Err(usage("empty user list"));
    }
    Ok(users)
}

fn parse_profile(spec: &str) -> Result<UserProfile> {
    let mut p = UserProfile::new();
    for pair in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| usage(format!("profile entry {pair:?} is not attr=label")))?;
        let attr: Attribute = parse(k.trim(), "profile attribute")?;
        if !attr.is_label(v.trim()) {
            return Err(usage(format!("{:?} is not a {attr} label; expected one of {}", v.trim(), attr.labels().join(", "))));
        }
        p.set(attr, v.trim())?;
    }
    Ok(p)
}

fn join_users(users: &BTreeSet<UserId>) -> String {
    users.iter().map(UserId::to_string).collect::<Vec<_>>().join(",")
}

/// Explicit list, else the users reserved when the base was adapted, else every corpus user.
fn resolve_users(list: Option<&str>, base: &Path, corpus: &Corpus) -> Result<BTreeSet<UserId>> {
    let users = match list {
        Some(l) => parse_users(l)?,
        None => {
            let reserved = with_suffix(base, ".users");
            if reserved.exists() {
                let text = std::fs::read_to_string(&reserved)?;
                parse_users(&text.lines().collect::<Vec<_>>().join(","))?
            } else {
                corpus.users()
            }
        }
    };
    let known = corpus.users();
    if let Some(u) = users.iter().find(|u| !known.contains(u)) {
        return Err(usage(format!("user {u} has no samples in the corpus")));
    }
    Ok(users)
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        lr: a.lr.unwrap_or(d.lr),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        max_epochs: a.max_epochs.unwrap_or(d.max_epochs),
        patience: a.patience.unwrap_or(d.patience),
        seed: a.seed,
        max_steps: a.max_steps,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn record_train(m: &mut Manifest, cfg: &TrainConfig) {
    m.set("seed", cfg.seed)
        .set("train.lr", cfg.lr)
        .set("train.batch_size", cfg.batch_size)
        .set("train.max_epochs", cfg.max_epochs)
        .set("train.patience", cfg.patience)
        .set("train.max_steps", cfg.max_steps.map_or("none".to_string(), |s| s.to_string()));
}

fn record_fit(m: &mut Manifest, r: &training::FitReport) {
    m.set("fit.epochs", r.train_losses.len())
        .set("fit.best_epoch", r.best_epoch)
        .set("fit.steps", r.steps);
    if let Some(best) = r.dev_losses.get(r.best_epoch.saturating_sub(1)) {
        m.set("fit.best_dev_loss", format!("{best:.6}"));
    }
}

fn model_config(a: &ModelArgs, vocab_size: usize) -> Result<ModelConfig> {
    let mut cfg = match a.preset.as_str() {
        "desk" => ModelConfig::desk(vocab_size),
        "small" => ModelConfig::small(vocab_size),
        other => return Err(usage(format!("unknown model preset {other:?}; expected desk or small"))),
    };
    if let Some(v) = a.layers {
        cfg.n_layers = v;
    }
    if let Some(v) = a.d_model {
        cfg.d_model = v;
    }
    if let Some(v) = a.heads {
        cfg.n_heads = v;
    }
    if let Some(v) = a.d_ff {
        cfg.d_ff = v;
    }
    if let Some(v) = a.max_seq_len {
        cfg.max_seq_len = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Inputs {
    vocab: Vocab,
    corpus: Corpus,
}

fn load_inputs(vocab: &Path, corpus: &Path) -> Result<Inputs> {
    require(vocab, "vocabulary", "synth-corpus")?;
    require(corpus, "corpus", "synth-corpus")?;
    Ok(Inputs {
        vocab: Vocab::load(vocab)?,
        corpus: Corpus::load(corpus)?,
    })
}

fn load_base(path: &Path, producer: &str) -> Result<BaseCheckpoint> {
    require(path, "checkpoint", producer)?;
    Ok(registry::load_base(path)?)
}

pub fn synth_corpus(a: SynthArgs) -> Result<()> {
    let domain = match a.domain.as_str() {
        "chat" => Domain::Chat,
        "sns" => Domain::Sns,
        other => return Err(usage(format!("unknown domain {other:?}; expected chat or sns"))),
    };
    let cfg = SynthConfig {
        n_users: a.users,
        turns_per_user: a.turns,
        partners_per_user: a.partners,
        domain,
        seed: a.seed,
    };
    let synth = corpus::synth_corpus(&cfg)?;
    let users_dir = a.out.join("users");
    std::fs::create_dir_all(&users_dir).with_context(|| format!("creating {}", users_dir.display()))?;

    let corpus_path = a.out.join("corpus.jsonl");
    synth.corpus.save(&corpus_path)?;
    for u in &synth.users {
        synth.corpus.for_user(u.id).save(&users_dir.join(format!("{}.jsonl", u.id)))?;
    }
    let profiles: String = synth
        .users
        .iter()
        .map(|u| json!({"user_id": u.id, "profile": u.profile, "hobby": u.hobby, "tic": u.tic}).to_string() + "\n")
        .collect();
    let profiles_path = a.out.join("profiles.jsonl");
    std::fs::write(&profiles_path, profiles)?;
    let vocab_path = a.out.join("vocab.txt");
    corpus::desk_vocab().save(&vocab_path)?;

    let mut counts = BTreeMap::new();
    let mut assignment = BTreeMap::new();
    for s in &synth.corpus.samples {
        *counts.entry(split_name(s.split)).or_insert(0usize) += 1;
        assignment.insert(format!("{}/{}", s.user_id, s.partner_id), split_name(s.split));
    }
    let mut splits = String::new();
    for (k, v) in &counts {
        splits.push_str(&format!("count.{k}={v}\n"));
    }
    for (k, v) in &assignment {
        splits.push_str(&format!("{k}={v}\n"));
    }
    let splits_path = a.out.join("splits.txt");
    std::fs::write(&splits_path, splits)?;

    let mut m = Manifest::new("synth-corpus");
    m.set("seed", a.seed)
        .set("users", a.users)
        .set("turns", a.turns)
        .set("partners", a.partners)
        .set("domain", &a.domain)
        .set("corpus.hash", synth.corpus.hash());
    m.output("corpus", &corpus_path)?;
    m.output("vocab", &vocab_path)?;
    m.output("profiles", &profiles_path)?;
    m.output("splits", &splits_path)?;
    m.write(&a.out.join("manifest.txt"))?;
    println!(
        "{} samples for {} users in {} (train {}, dev {}, test {})",
        synth.corpus.len(),
        synth.users.len(),
        a.out.display(),
        counts.get("train").unwrap_or(&0),
        counts.get("dev").unwrap_or(&0),
        counts.get("test").unwrap_or(&0)
    );
    Ok(())
}


pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let inp = load_inputs(&a.vocab, &a.corpus)?;
    let variant = parse(&a.variant, "prompt variant")?;
    let mc = model_config(&a.model, inp.vocab.len())?;
    let tc = train_config(&a.train)?;
    let (ckpt, report) = training::pretrain(&inp.corpus, &inp.vocab, variant, &mc, &tc)?;
    registry::save_base(&a.out, &ckpt)?;

    let mut m = Manifest::new("pretrain");
    m.input("corpus", &a.corpus)?.input("vocab", &a.vocab)?;
    m.set("variant", variant);
    for (k, v) in mc.to_kv() {
        m.set(&format!("model.{k}"), v);
    }
    record_train(&mut m, &tc);
    record_fit(&mut m, &report);
    m.output("checkpoint", &a.out)?;
    m.write(&with_suffix(&a.out, ".manifest"))?;
    println!(
        "pre-trained {} parameters for {} epochs ({} steps) -> {}",
        ckpt.model.param_count(),
        report.train_losses.len(),
        report.steps,
        a.out.display()
    );
    Ok(())
}

pub fn adapt(a: AdaptArgs) -> Result<()> {
    let base = load_base(&a.base, "pretrain")?;
    let inp = load_inputs(&a.vocab, &a.corpus)?;
    if base.stage == Stage::DomainAdapted {
        log::warn!("{} is already domain-adapted; adapting again", a.base.display());
    }
    let reserve = match &a.reserve {
        Some(l) => parse_users(l)?,
        None => corpus::halve_users(&inp.corpus.users()).1,
    };
    let adapt_corpus = inp.corpus.filter(|s| !reserve.contains(&s.user_id));
    let tc = train_config(&a.train)?;
    let (ckpt, report) = training::domain_adapt(&base, &adapt_corpus, &reserve, &inp.vocab, &tc)?;
    registry::save_base(&a.out, &ckpt)?;
    let users_path = with_suffix(&a.out, ".users");
    let listing: String = reserve.iter().map(|u| format!("{u}\n")).collect();
    std::fs::write(&users_path, listing)?;

    let mut m = Manifest::new("adapt");
    m.input("base", &a.base)?.input("corpus", &a.corpus)?.input("vocab", &a.vocab)?;
    m.set("adapt_users", join_users(&adapt_corpus.users()))
        .set("reserved_users", join_users(&reserve));
    record_train(&mut m, &tc);
    record_fit(&mut m, &report);
    m.output("checkpoint", &a.out)?.output("reserved", &users_path)?;
    m.write(&with_suffix(&a.out, ".manifest"))?;
    println!(
        "domain-adapted on {} users ({} samples), {} reserved for fine-tuning -> {}",
        adapt_corpus.users().len(),
        adapt_corpus.len(),
        reserve.len(),
        a.out.display()
    );
    Ok(())
}

/// Runs `job` over `items` on `workers` threads, returning results in item order.
fn parallel<T: Sync, R: Send>(items: &[T], workers: usize, job: impl Fn(&T) -> Result<R> + Sync) -> Vec<Result<R>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = job(item);
                slots.lock().expect("no worker panicked holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every item was processed"))
        .collect()
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let base = load_base(&a.base, "adapt")?;
    let inp = load_inputs(&a.vocab, &a.corpus)?;
    let method: Method = parse(&a.method, "method")?;
    if base.stage != Stage::DomainAdapted && !a.allow_unadapted {
        return Err(Error::Prerequisite(format!(
            "{} is a {} checkpoint; run `persona adapt` first or pass --allow-unadapted",
            a.base.display(),
            base.stage
        ))
        .into());
    }
    if a.workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    let users = resolve_users(a.users.as_deref(), &a.base, &inp.corpus)?;
    let tc = train_config(&a.train)?;
    let opts = FinetuneOpts {
        rank: a.rank,
        targets: None,
        allow_unadapted: a.allow_unadapted,
    };
    let reg = Registry::open(&a.registry)?;
    let config_hash = base.model.config().hash();

    let entries: Vec<RegistryEntry> = match method {
        Method::OneId => {
            let shared = inp.corpus.for_users(&users);
            let (model, report) = training::finetune_one_id(&base, &shared, &inp.vocab, &opts, &tc)?;
            log::info!("one-id model trained for {} epochs", report.train_losses.len());
            reg.install_one_id(&model, &users.iter().copied().collect::<Vec<_>>())?
        }
        Method::Lora | Method::Full => {
            let list: Vec<UserId> = users.iter().copied().collect();
            let results = parallel(&list, a.workers, |&u| {
                let (art, report) = training::finetune_user(&base, &inp.corpus, u, &inp.vocab, method, &opts, &tc)?;
                log::info!("{u}: {} epochs, {} steps", report.train_losses.len(), report.steps);
                Ok(match art {
                    UserArtifact::Lora(adapter) => reg.save_adapter(&adapter, &config_hash)?,
                    UserArtifact::Full(model) => reg.save_full(u, &model)?,
                })
            });
            results.into_iter().collect::<Result<Vec<_>>>()?
        }
    };

    let mut m = Manifest::new("finetune");
    m.input("base", &a.base)?.input("corpus", &a.corpus)?.input("vocab", &a.vocab)?;
    m.set("method", method).set("rank", a.rank).set("users", join_users(&users));
    record_train(&mut m, &tc);
    for e in &entries {
        m.set(&format!("output.{}.{}", e.user_id, e.method), &e.path)
            .set(&format!("output.{}.{}.sha256", e.user_id, e.method), &e.sha256);
    }
    m.write(&a.registry.join(format!("finetune-{method}.manifest")))?;
    let bytes: u64 = entries.iter().map(|e| e.bytes).sum();
    println!(
        "{} {method} artifacts for {} users ({bytes} bytes) in {}",
        entries.len(),
        users.len(),
        a.registry.display()
    );
    Ok(())
}

enum Loaded {
    Base,
    Lora(Vec<LoraAdapter>),
    Full(Vec<Seq2SeqModel>),
    OneId(Seq2SeqModel),
}

/// Loads the artifacts `method` needs for `users`, in user order.
fn load_artifacts(method: &str, registry: Option<&Path>, base: &BaseCheckpoint, users: &[UserId]) -> Result<Loaded> {
    if method == "base" {
        return Ok(Loaded::Base);
    }
    let method: Method = parse(method, "method")?;
    let root = registry.ok_or_else(|| usage(format!("--registry is required for method {method}")))?;
    require(root, "registry", "finetune")?;
    let reg = Registry::open(root)?;
    let missing = |u: &UserId| {
        Error::Prerequisite(format!(
            "user {u} has no {method} artifact in {}; run `persona finetune --method {method}` first",
            root.display()
        ))
    };
    Ok(match method {
        Method::Lora => Loaded::Lora(
            users
                .iter()
                .map(|u| {
                    reg.entry(*u, method).ok_or_else(|| missing(u))?;
                    let (adapter, hash) = reg.load_adapter(*u)?;
                    if hash != base.model.config().hash() {
                        return Err(usage(format!("adapter of {u} was trained for a different base config")));
                    }
                    Ok(adapter)
                })
                .collect::<Result<_>>()?,
        ),
        Method::Full => Loaded::Full(
            users
                .iter()
                .map(|u| {
                    reg.entry(*u, method).ok_or_else(|| missing(u))?;
                    Ok(reg.load_full(*u)?)
                })
                .collect::<Result<_>>()?,
        ),
        Method::OneId => {
            if let Some(u) = users.iter().find(|u| reg.entry(**u, method).is_none()) {
                return Err(missing(u).into());
            }
            Loaded::OneId(reg.load_one_id()?)
        }
    })
}

/// One dialogue model per user, in user order.
fn dialogue_models<'a>(
    loaded: &'a Loaded,
    base: &'a BaseCheckpoint,
    vocab: &'a Vocab,
    n_users: usize,
    max_new_tokens: usize,
) -> Vec<ModelDialogue<'a>> {
    let make = |model, adapter, with_user_id| ModelDialogue {
        model,
        adapter,
        vocab,
        variant: base.variant,
        with_user_id,
        max_new_tokens,
    };
    match loaded {
        Loaded::Base => (0..n_users).map(|_| make(&base.model, None, false)).collect(),
        Loaded::Lora(adapters) => adapters.iter().map(|a| make(&base.model, Some(a), false)).collect(),
        Loaded::Full(models) => models.iter().map(|m| make(m, None, false)).collect(),
        Loaded::OneId(m) => (0..n_users).map(|_| make(m, None, true)).collect(),
    }
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let base = load_base(&a.base, "adapt")?;
    let inp = load_inputs(&a.vocab, &a.corpus)?;
    let split = parse_split(&a.split)?;
    if a.max_new_tokens == 0 {
        return Err(usage("--max-new-tokens must be at least 1"));
    }
    let users: Vec<UserId> = resolve_users(a.users.as_deref(), &a.base, &inp.corpus)?.into_iter().collect();
    let loaded = load_artifacts(&a.method, a.registry.as_deref(), &base, &users)?;
    let models = dialogue_models(&loaded, &base, &inp.vocab, users.len(), a.max_new_tokens);
    let embedder = Embedder::new(base.model.clone(), inp.vocab.clone());

    let mut records = Vec::new();
    for (u, model) in users.iter().zip(&models) {
        let samples: Vec<&DialogueSample> = inp
            .corpus
            .samples
            .iter()
            .filter(|s| s.user_id == *u && s.split == split)
            .collect();
        if samples.is_empty() {
            log::warn!("user {u} has no {} samples", split_name(split));
            continue;
        }
        records.extend(eval::generate_records(model, &samples, &embedder)?);
    }
    if records.is_empty() {
        return Err(usage(format!("no {} samples for the selected users", split_name(split))));
    }
    let report = EvalReport::from_records(&a.method, &records)?;
    std::fs::write(&a.out, report.to_json() + "\n")?;
    let records_path = with_suffix(&a.out, ".records.jsonl");
    let lines: String = records
        .iter()
        .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
        .collect::<Result<_, _>>()?;
    std::fs::write(&records_path, lines)?;

    let mut m = Manifest::new("evaluate");
    m.input("base", &a.base)?.input("corpus", &a.corpus)?.input("vocab", &a.vocab)?;
    if let Some(r) = &a.registry {
        m.set("registry", r.display());
    }
    m.set("method", &a.method)
        .set("split", split_name(split))
        .set("users", users.iter().map(UserId::to_string).collect::<Vec<_>>().join(","))
        .set("max_new_tokens", a.max_new_tokens);
    m.output("report", &a.out)?.output("records", &records_path)?;
    m.write(&with_suffix(&a.out, ".manifest"))?;
    print!("{}", eval::render_table(&[report]));
    Ok(())
}

pub fn serve(a: ServeArgs) -> Result<()> {
    let base = load_base(&a.base, "adapt")?;
    require(&a.vocab, "vocabulary", "synth-corpus")?;
    require(&a.registry, "registry", "finetune")?;
    let mut server = Server::new(Registry::open(&a.registry)?, base, Vocab::load(&a.vocab)?);
    server.max_new_tokens = a.max_new_tokens;

    let mut m = Manifest::new("serve");
    m.input("base", &a.base)?.input("vocab", &a.vocab)?;
    m.set("registry", a.registry.display()).set("max_new_tokens", a.max_new_tokens);
    m.write(&a.registry.join("serve.manifest"))?;

    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(out, "{}", server.handle_line(&line))?;
        out.flush()?;
    }
    Ok(())
}

/// Context turns kept when prompting during a chat.
const CHAT_WINDOW: usize = 2;

pub fn chat(a: ChatArgs) -> Result<()> {
    let base = load_base(&a.base, "adapt")?;
    require(&a.vocab, "vocabulary", "synth-corpus")?;
    require(&a.registry, "registry", "finetune")?;
    let user: UserId = parse(&a.user, "user id")?;
    let method: Option<Method> = a.method.as_deref().map(|m| parse(m, "method")).transpose()?;
    let speaker_profile = parse_profile(&a.profile)?;
    let partner_profile = parse_profile(&a.partner_profile)?;
    let mut server = Server::new(Registry::open(&a.registry)?, base, Vocab::load(&a.vocab)?);
    server.max_new_tokens = a.max_new_tokens;

    let mut m = Manifest::new("chat");
    m.input("base", &a.base)?.input("vocab", &a.vocab)?;
    m.set("registry", a.registry.display())
        .set("user", user)
        .set("method", method.map_or("auto".to_string(), |m| m.to_string()))
        .set("profile", &a.profile)
        .set("partner_profile", &a.partner_profile)
        .set("max_new_tokens", a.max_new_tokens);
    let mut transcript = match &a.transcript {
        Some(p) => {
            m.set("transcript", p.display());
            Some(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)
        }
        None => None,
    };
    let manifest_path = match &a.transcript {
        Some(p) => with_suffix(p, ".manifest"),
        None => a.registry.join("chat.manifest"),
    };
    m.write(&manifest_path)?;

    let mut history: Vec<String> = Vec::new();
    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line?;
        let turn = line.trim();
        if turn.is_empty() {
            continue;
        }
        history.push(turn.to_string());
        let context = history[history.len().saturating_sub(CHAT_WINDOW)..].to_vec();
        let inputs = PromptInputs {
            speaker_profile: speaker_profile.clone(),
            partner_profile: partner_profile.clone(),
            context,
        };
        let reply = server.generate_for_user(user, method, &inputs)?;
        writeln!(out, "{}", reply.text)?;
        out.flush()?;
        if let Some(t) = transcript.as_mut() {
            let record = json!({
                "user_id": user,
                "method": reply.method,
                "speaker_profile": inputs.speaker_profile,
                "partner_profile": inputs.partner_profile,
                "context": inputs.context,
                "response": reply.text,
            });
            writeln!(t, "{record}")?;
        }
        history.push(reply.text);
    }
    Ok(())
}

pub fn infer_profile(a: InferArgs) -> Result<()> {
    if !a.posts.exists() {
        return Err(usage(format!("post history {} not found", a.posts.display())));
    }
    let user: UserId = parse(&a.user, "user id")?;
    let history = PostHistory::load(user, &a.posts)?;
    let result = infer(&history, &KeywordClassifier { min_hits: a.min_hits }, a.chunk_size)?;
    let record = json!({
        "user_id": user,
        "profile": result.profile,
        "chunks": result.chunks,
        "partial_last": result.partial_last,
        "warnings": result.warnings,
    });
    std::fs::write(&a.out, format!("{record}\n"))?;

    let mut m = Manifest::new("infer-profile");
    m.input("posts", &a.posts)?;
    m.set("user", user)
        .set("chunk_size", a.chunk_size)
        .set("min_hits", a.min_hits)
        .set("classifier", "keyword");
    m.output("profile", &a.out)?;
    m.write(&with_suffix(&a.out, ".manifest"))?;
    println!("{record}");
    Ok(())
}

pub fn diversity_probe(a: ProbeArgs) -> Result<()> {
    let base = load_base(&a.base, "adapt")?;
    let inp = load_inputs(&a.vocab, &a.corpus)?;
    let method: Method = parse(&a.method, "method")?;
    require(&a.registry, "registry", "finetune")?;
    let questions: Vec<String> = match &a.questions {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("reading {}: {e}", p.display())))?;
            text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
        }
        None => PROBE_QUESTIONS.iter().map(|q| q.to_string()).collect(),
    };
    if questions.is_empty() {
        return Err(usage("the question set is empty"));
    }
    let users: Vec<UserId> = match &a.users {
        Some(l) => parse_users(l)?.into_iter().collect(),
        None => Registry::open(&a.registry)?
            .list_users()
            .into_iter()
            .filter(|e| e.method == method)
            .map(|e| e.user_id)
            .collect(),
    };
    if users.is_empty() {
        return Err(Error::Prerequisite(format!(
            "no {method} artifacts in {}; run `persona finetune --method {method}` first",
            a.registry.display()
        ))
        .into());
    }
    let profiles: Vec<UserProfile> = users
        .iter()
        .map(|u| {
            inp.corpus
                .samples
                .iter()
                .find(|s| s.user_id == *u)
                .map(|s| s.speaker_profile.clone())
                .ok_or_else(|| usage(format!("user {u} has no samples in the corpus")))
        })
        .collect::<Result<_>>()?;
    let loaded = load_artifacts(&a.method, Some(&a.registry), &base, &users)?;
    let models = dialogue_models(&loaded, &base, &inp.vocab, users.len(), a.max_new_tokens);
    let triples: Vec<(UserId, UserProfile, &dyn DialogueModel)> = users
        .iter()
        .zip(profiles)
        .zip(&models)
        .map(|((u, p), m)| (*u, p, m as &dyn DialogueModel))
        .collect();
    let results = eval::diversity_probe(&triples, &questions)?;

    let lines: String = results
        .iter()
        .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
        .collect::<Result<_, _>>()?;
    std::fs::write(&a.out, lines)?;
    let mean = |f: fn(&eval::ProbeResult) -> f64| results.iter().map(f).sum::<f64>() / results.len() as f64;

    let mut m = Manifest::new("diversity-probe");
    m.input("base", &a.base)?.input("corpus", &a.corpus)?.input("vocab", &a.vocab)?;
    if let Some(q) = &a.questions {
        m.input("questions", q)?;
    }
    m.set("registry", a.registry.display())
        .set("method", method)
        .set("users", users.iter().map(UserId::to_string).collect::<Vec<_>>().join(","))
        .set("questions", questions.len())
        .set("max_new_tokens", a.max_new_tokens)
        .set("mean.distinct_1", format!("{:.6}", mean(|r| r.distinct_1)))
        .set("mean.distinct_2", format!("{:.6}", mean(|r| r.distinct_2)))
        .set("mean.dist_s", format!("{:.6}", mean(|r| r.dist_s)));
    m.output("results", &a.out)?;
    m.write(&with_suffix(&a.out, ".manifest"))?;

    println!("{:>8} {:>8} {:>8}  question", "dist-1", "dist-2", "dist-s");
    for r in &results {
        println!("{:>8.3} {:>8.3} {:>8.3}  {}", r.distinct_1, r.distinct_2, r.dist_s, r.question);
    }
    println!(
        "{:>8.3} {:>8.3} {:>8.3}  mean over {} users",
        mean(|r| r.distinct_1),
        mean(|r| r.distinct_2),
        mean(|r| r.dist_s),
        users.len()
    );
    Ok(())
}
