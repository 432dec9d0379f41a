use std::collections::HashSet;

use persona_core::corpus::{desk_vocab, synth_corpus, SynthConfig};
use persona_core::eval::{evaluate_model, normalize, words, DialogueModel, EvalReport, Embedder, GenerationRecord, Query};
use persona_core::lora::{self, LoraAdapter};
use persona_core::registry::PromptInputs;
use persona_core::{
    BaseCheckpoint, DialogueSample, Method, ModelConfig, PromptVariant, Registry, Result, Seed, Seq2SeqModel, Server, Split,
    Stage, Tensor, UserId, Vocab,
};

fn base(vocab: &Vocab) -> Seq2SeqModel {
    let mut cfg = ModelConfig::small(vocab.len());
    cfg.n_layers = 2;
    Seq2SeqModel::new(cfg, Seed(21)).unwrap()
}

/// An adapter with a nonzero `B`, so it actually changes the model.
fn adapter(model: &Seq2SeqModel, owner: UserId, seed: u64) -> LoraAdapter {
    let mut rng = Seed(seed).rng();
    let mut a = lora::attach(model, &model.attention_paths(), 4, owner, &mut rng).unwrap();
    for pair in a.entries_mut().values_mut() {
        pair.b = Tensor::randn(pair.b.shape(), 0.3, &mut rng);
    }
    a.snap_to_f32();
    a
}

fn prompts(vocab: &Vocab) -> Vec<Vec<u32>> {
    ["what is your hobby?", "do you cook?", "hello there", "where do you live?"]
        .iter()
        .map(|t| vocab.tokenize(t).unwrap())
        .collect()
}

#[test]
fn swapping_adapters_restores_each_output() {
    let vocab = desk_vocab();
    let model = base(&vocab);
    let (ua, ub) = (UserId::new("aaaa").unwrap(), UserId::new("bbbb").unwrap());
    let (a, b) = (adapter(&model, ua, 1), adapter(&model, ub, 2));
    let decode = |ad: Option<&LoraAdapter>| -> Vec<Vec<u32>> {
        prompts(&vocab).iter().map(|p| model.greedy_decode(ad, p, 12).unwrap()).collect()
    };
    let logits = |ad: Option<&LoraAdapter>| model.forward(ad, &prompts(&vocab)[..1], &[vec![1, 5, 9]]).unwrap();

    let plain = (decode(None), logits(None));
    let with_a = (decode(Some(&a)), logits(Some(&a)));
    let with_b = (decode(Some(&b)), logits(Some(&b)));
    assert_ne!(plain.1, with_a.1);
    assert_ne!(with_a.1, with_b.1);
    for _ in 0..3 {
        assert_eq!((decode(Some(&b)), logits(Some(&b))), with_b);
        assert_eq!((decode(None), logits(None)), plain);
        assert_eq!((decode(Some(&a)), logits(Some(&a))), with_a);
    }
}

fn server(dir: &std::path::Path, users: &[UserId]) -> Server {
    let vocab = desk_vocab();
    let mut model = base(&vocab);
    model.snap_to_f32();
    let registry = Registry::open(dir).unwrap();
    for (i, &u) in users.iter().enumerate() {
        registry.save_adapter(&adapter(&model, u, 100 + i as u64), &model.config().hash()).unwrap();
    }
    let ckpt = BaseCheckpoint {
        model,
        stage: Stage::DomainAdapted,
        variant: PromptVariant::Psp,
    };
    let mut s = Server::new(registry, ckpt, vocab);
    s.max_new_tokens = 10;
    s
}

#[test]
fn concurrent_serving_matches_serial() {
    let dir = tempfile::tempdir().unwrap();
    let users: Vec<UserId> = ["u001", "u002", "u003", "u004"].iter().map(|s| UserId::new(s).unwrap()).collect();
    let server = server(dir.path(), &users);
    let requests: Vec<(UserId, PromptInputs)> = (0..16)
        .map(|i| {
            let context = vec![["do you cook?", "hello there", "what is your dream?"][i % 3].to_string()];
            (users[i % users.len()], PromptInputs { context, ..Default::default() })
        })
        .collect();
    let serial: Vec<Vec<u32>> = requests
        .iter()
        .map(|(u, inp)| server.generate_for_user(*u, Some(Method::Lora), inp).unwrap().tokens)
        .collect();
    let distinct: HashSet<&Vec<u32>> = serial.iter().collect();
    assert!(distinct.len() > 1, "adapters should not all agree");

    let parallel: Vec<Vec<u32>> = std::thread::scope(|scope| {
        let handles: Vec<_> = requests
            .iter()
            .map(|(u, inp)| {
                let server = &server;
                scope.spawn(move || server.generate_for_user(*u, Some(Method::Lora), inp).unwrap().tokens)
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(parallel, serial);
}

#[test]
fn unknown_user_is_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let server = server(dir.path(), &[UserId::new("u001").unwrap()]);
    let inputs = PromptInputs { context: vec!["hello".into()], ..Default::default() };
    let err = server.generate_for_user(UserId::new("zzzz").unwrap(), None, &inputs).unwrap_err();
    assert!(matches!(err, persona_core::Error::NotFound(_)), "{err}");
}

/// Replies with the last context turn and is certain of it.
struct Echo;

impl DialogueModel for Echo {
    fn respond(&self, q: &Query) -> Result<String> {
        Ok(q.context.last().cloned().unwrap_or_default())
    }

    fn score(&self, q: &Query, response: &str) -> Result<(f64, usize)> {
        let n = words(response).len();
        let hit = q.context.last().is_some_and(|t| t == response);
        Ok((if hit { 0.0 } else { n as f64 }, n))
    }
}

fn echo_samples() -> Vec<DialogueSample> {
    let p = persona_core::UserProfile::new();
    ["do you cook?", "i like tennis.", "do you cook?", "hello there"]
        .iter()
        .map(|t| DialogueSample {
            user_id: UserId::new("echo").unwrap(),
            partner_id: UserId::new("ptnr").unwrap(),
            speaker_profile: p.clone(),
            partner_profile: p.clone(),
            context: vec![t.to_string()],
            response: t.to_string(),
            split: Split::Test,
        })
        .collect()
}

fn embedder() -> Embedder {
    let vocab = desk_vocab();
    Embedder::new(base(&vocab), vocab)
}

#[test]
fn echo_model_scores_perfectly_on_echo_data() {
    let samples = echo_samples();
    let refs: Vec<&DialogueSample> = samples.iter().collect();
    let (report, records) = evaluate_model("echo", &Echo, &refs, &embedder()).unwrap();
    assert_eq!(records.len(), 4);
    assert!((report.mean_similarity - 1.0).abs() < 1e-12);
    assert_eq!(report.acc_at_sim, 1.0);
    assert_eq!(report.rouge_l, 1.0);
    assert_eq!(report.perplexity, 1.0);
    // Three distinct sentences among four answers.
    assert_eq!(report.dist_s, 0.75);
    // Punctuation is its own word: 10 distinct unigrams of 14.
    assert!((report.distinct_1 - 10.0 / 14.0).abs() < 1e-12, "{}", report.distinct_1);
}

/// Aggregates records without the library's helpers.
fn oracle(records: &[GenerationRecord]) -> (f64, f64, f64, f64, f64) {
    let n = records.len() as f64;
    let sim = records.iter().map(|r| r.similarity).sum::<f64>() / n;
    let acc = records.iter().filter(|r| r.similarity >= 0.9).count() as f64 / n;
    let rouge = records.iter().map(|r| r.rouge_l).sum::<f64>() / n;
    let ppl = (records.iter().map(|r| r.nll_sum).sum::<f64>() / records.iter().map(|r| r.nll_tokens).sum::<usize>() as f64).exp();
    let sentences: HashSet<String> = records.iter().map(|r| normalize(&r.generated)).collect();
    (sim, acc, rouge, ppl, sentences.len() as f64 / n)
}

#[test]
fn reports_recompute_from_the_record_log() {
    let vocab = desk_vocab();
    let model = base(&vocab);
    let data = synth_corpus(&SynthConfig::new(3, 20, 4)).unwrap();
    let test = data.corpus.split(Split::Test);
    let dialogue = persona_core::eval::ModelDialogue {
        model: &model,
        adapter: None,
        vocab: &vocab,
        variant: PromptVariant::Psp,
        with_user_id: false,
        max_new_tokens: 8,
    };
    let (report, records) = evaluate_model("base", &dialogue, &test, &embedder()).unwrap();

    let log: String = records.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    let reread: Vec<GenerationRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(reread, records);
    assert_eq!(EvalReport::from_records("base", &reread).unwrap(), report);

    let (sim, acc, rouge, ppl, ds) = oracle(&reread);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1.0);
    assert!(close(report.mean_similarity, sim));
    assert!(close(report.acc_at_sim, acc));
    assert!(close(report.rouge_l, rouge));
    assert!(close(report.perplexity, ppl));
    assert!(close(report.dist_s, ds));
    assert_eq!(report.samples, test.len());
}
