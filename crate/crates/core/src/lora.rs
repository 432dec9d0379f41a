//! Low-rank adapters: `h = (W + B A) x` with `W` frozen.
//!
//! For a weight `W` of shape `d_out x d_in` an adapter entry holds
//! `A: r x d_in` and `B: d_out x r`. `B` starts at zero, so a fresh adapter
//! leaves every output unchanged; there is no extra scaling factor.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::Seq2SeqModel;
use crate::prompt::{TokenId, UserId};
use crate::rng::Rng;
use crate::tensor::{matmul, Tensor};

/// Default adapter rank.
pub const DEFAULT_RANK: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    owner: UserId,
    rank: usize,
    entries: BTreeMap<String, LoraPair>,
}

impl LoraAdapter {
    /// An adapter with no entries.
    pub fn empty(owner: UserId, rank: usize) -> Self {
        LoraAdapter {
            owner,
            rank,
            entries: BTreeMap::new(),
        }
    }

    /// Assembles an adapter from stored matrices, checking shapes against rank.
    pub fn from_entries(owner: UserId, rank: usize, entries: BTreeMap<String, LoraPair>) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Validation("adapter rank must be positive".into()));
        }
        for (path, pair) in &entries {
            let (ar, d_in) = pair.a.dims2()?;
            let (d_out, bc) = pair.b.dims2()?;
            if ar != rank || bc != rank || rank > d_in.min(d_out) {
                return Err(Error::Validation(format!(
                    "{path}: A {ar}x{d_in}, B {d_out}x{bc} inconsistent with rank {rank}"
                )));
            }
        }
        Ok(LoraAdapter { owner, rank, entries })
    }

    pub fn owner(&self) -> UserId {
        self.owner
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn entries(&self) -> &BTreeMap<String, LoraPair> {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut BTreeMap<String, LoraPair> {
        &mut self.entries
    }

    pub fn target_paths(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn snap_to_f32(&mut self) {
        for p in self.entries.values_mut() {
            p.a.snap_to_f32();
            p.b.snap_to_f32();
        }
    }
}

/// Creates a zero-effect adapter over `targets`: `A ~ N(0, 1/r)`, `B = 0`.
pub fn attach(
    model: &Seq2SeqModel,
    targets: &[String],
    rank: usize,
    owner: UserId,
    rng: &mut Rng,
) -> Result<LoraAdapter> {
    if rank == 0 {
        return Err(Error::Validation("adapter rank must be positive".into()));
    }
    let mut entries = BTreeMap::new();
    for path in targets {
        let w = model
            .params()
            .get(path)
            .ok_or_else(|| Error::Config(format!("no weight named {path}")))?;
        let [d_out, d_in] = *w.shape() else {
            return Err(Error::Config(format!("{path} is not a matrix")));
        };
        if rank > d_in.min(d_out) {
            return Err(Error::Validation(format!(
                "rank {rank} exceeds min({d_in}, {d_out}) for {path}"
            )));
        }
        let a = Tensor::randn(&[rank, d_in], (1.0 / rank as f64).sqrt(), rng);
        let b = Tensor::zeros(&[d_out, rank]);
        entries.insert(path.clone(), LoraPair { a, b });
    }
    Ok(LoraAdapter { owner, rank, entries })
}

/// Bakes `W + B A` into a copy of the base model.
pub fn merge(model: &Seq2SeqModel, adapter: &LoraAdapter) -> Result<Seq2SeqModel> {
    let mut merged = model.clone();
    for (path, pair) in adapter.entries() {
        let w = merged
            .params_mut()
            .get_mut(path)
            .ok_or_else(|| Error::Validation(format!("adapter targets missing weight {path}")))?;
        let delta = matmul(&pair.b, &pair.a)?;
        if delta.shape() != w.shape() {
            return Err(Error::Validation(format!(
                "{path}: BA is {:?} but W is {:?}",
                delta.shape(),
                w.shape()
            )));
        }
        for (x, d) in w.data_mut().iter_mut().zip(delta.data()) {
            *x += d;
        }
    }
    Ok(merged)
}

pub fn count_trainable(adapter: &LoraAdapter) -> usize {
    adapter
        .entries()
        .values()
        .map(|p| p.a.len() + p.b.len())
        .sum()
}

/// Trainable parameters for adapting matrices of the given `(d_out, d_in)`
/// shapes at rank `r`, without materializing them.
pub fn trainable_for_shapes(shapes: &[(usize, usize)], rank: usize) -> usize {
    shapes.iter().map(|(o, i)| (o + i) * rank).sum()
}

/// A frozen base model seen through one user's adapter.
#[derive(Debug, Clone, Copy)]
pub struct AdaptedModel<'a> {
    pub base: &'a Seq2SeqModel,
    pub adapter: &'a LoraAdapter,
}

impl AdaptedModel<'_> {
    pub fn forward(&self, src: &[Vec<TokenId>], tgt: &[Vec<TokenId>]) -> Result<Tensor> {
        self.base.forward(Some(self.adapter), src, tgt)
    }

    pub fn greedy_decode(&self, src: &[TokenId], max_new_tokens: usize) -> Result<Vec<TokenId>> {
        self.base.greedy_decode(Some(self.adapter), src, max_new_tokens)
    }

    pub fn sequence_nll(&self, src: &[TokenId], tgt: &[TokenId]) -> Result<f64> {
        self.base.sequence_nll(Some(self.adapter), src, tgt)
    }
}
