use persona_core::corpus::{desk_vocab, encode_all, synth_corpus, SynthConfig};
use persona_core::training::{fit, mean_nll, pretrain, Trainable};
use persona_core::{Example, ModelConfig, PromptVariant, Seed, Seq2SeqModel, Split, TrainConfig, Vocab};
use rand::Rng;

const WORDS: [&str; 8] = ["red", "blue", "green", "gold", "gray", "pink", "teal", "navy"];

fn copy_examples(vocab: &Vocab, n: usize, seed: u64) -> Vec<Example> {
    let mut rng = Seed(seed).rng();
    (0..n)
        .map(|_| {
            let len = rng.random_range(2..=4);
            let ids: Vec<u32> = (0..len).map(|_| vocab.word_id(WORDS[rng.random_range(0..WORDS.len())]).unwrap()).collect();
            Example { src: ids.clone(), tgt: ids }
        })
        .collect()
}

#[test]
fn copy_task_is_learned_in_200_steps() {
    let vocab = Vocab::new(WORDS).unwrap();
    let mut model = Seq2SeqModel::new(ModelConfig::small(vocab.len()), Seed(11)).unwrap();
    let train = copy_examples(&vocab, 2000, 1);
    let dev = copy_examples(&vocab, 32, 2);
    let cfg = TrainConfig {
        lr: 1e-2,
        batch_size: 16,
        max_epochs: 10,
        patience: 10,
        seed: 3,
        max_steps: Some(200),
    };
    let report = fit(Trainable::Full(&mut model), &train, &dev, &cfg).unwrap();
    assert_eq!(report.steps, 200);

    let test = copy_examples(&vocab, 100, 4);
    let (mut right, mut total) = (0, 0);
    for ex in &test {
        let out = model.greedy_decode(None, &ex.src, ex.tgt.len() + 1).unwrap();
        right += ex.tgt.iter().zip(&out).filter(|(a, b)| a == b).count();
        total += ex.tgt.len();
    }
    let acc = right as f64 / total as f64;
    assert!(acc >= 0.95, "copy accuracy {acc:.3}");
}

#[test]
fn training_lowers_held_out_perplexity() {
    let vocab = desk_vocab();
    let data = synth_corpus(&SynthConfig::new(6, 40, 8)).unwrap();
    let test_samples = data.corpus.split(Split::Test);
    let test = encode_all(&vocab, PromptVariant::Psp, &test_samples, false).unwrap();
    let config = ModelConfig::small(vocab.len());
    let untrained = Seq2SeqModel::new(config.clone(), Seed(0)).unwrap();
    let cfg = TrainConfig {
        lr: 3e-3,
        max_epochs: 3,
        patience: 3,
        ..TrainConfig::default()
    };
    let (ckpt, _) = pretrain(&data.corpus, &vocab, PromptVariant::Psp, &config, &cfg).unwrap();
    let before = mean_nll(&untrained, None, &test, 16).unwrap().exp();
    let after = mean_nll(&ckpt.model, None, &test, 16).unwrap().exp();
    assert!(after < before, "perplexity {before:.2} -> {after:.2}");
    // An untrained model is close to uniform over the vocabulary.
    assert!((before.ln() - (vocab.len() as f64).ln()).abs() < 1.0, "untrained perplexity {before:.2}");
}
