//! Shared fixtures for the benchmarks.

use persona_core::corpus::desk_vocab;
use persona_core::lora::{self, LoraAdapter};
use persona_core::{ModelConfig, Seed, Seq2SeqModel, Tensor, UserId, Vocab};

pub fn desk_model() -> (Vocab, Seq2SeqModel) {
    let vocab = desk_vocab();
    let model = Seq2SeqModel::new(ModelConfig::desk(vocab.len()), Seed(1)).expect("desk config is valid");
    (vocab, model)
}

/// A rank-`rank` adapter over every attention projection with a nonzero `B`.
pub fn adapter(model: &Seq2SeqModel, owner: &str, rank: usize, seed: u64) -> LoraAdapter {
    let mut rng = Seed(seed).rng();
    let owner = UserId::new(owner).expect("valid id");
    let mut a = lora::attach(model, &model.attention_paths(), rank, owner, &mut rng).expect("rank fits");
    for pair in a.entries_mut().values_mut() {
        pair.b = Tensor::randn(pair.b.shape(), 0.1, &mut rng);
    }
    a
}
