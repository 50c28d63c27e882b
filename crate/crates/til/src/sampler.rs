//! Triplet sampling for pairwise training.
//!
//! An epoch visits every observed (user, positive) training pair exactly
//! once in shuffled order and pairs each with a sampled negative.
//! Negatives are drawn by rejection (uniform, or proportional to item
//! training frequency for the popularity-weighted variant) and fall back
//! to an exact draw over the user's complement after 100 rejections, so
//! heavy users cannot stall sampling.

use rand::seq::SliceRandom;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::InteractionStore;

/// One training example: user u prefers item `pos` over item `neg`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub user: u32,
    pub pos: u32,
    pub neg: u32,
}

/// Negative sampling distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Uniform over items the user has not interacted with in training.
    #[default]
    Uniform,
    /// Proportional to item training frequency (popular items make
    /// harder, more informative negatives).
    Popularity,
}

const MAX_REJECTIONS: usize = 100;

/// Reusable sampling state for one store.
pub struct TripletSampler<'a> {
    store: &'a InteractionStore,
    kind: SamplerKind,
    pairs: Vec<(u32, u32)>,
    /// Inclusive prefix sums of item training counts, popularity only.
    pop_cum: Vec<u64>,
    pop_total: u64,
}

impl<'a> TripletSampler<'a> {
    pub fn new(store: &'a InteractionStore, kind: SamplerKind) -> Self {
        let mut pairs = Vec::with_capacity(store.n_train_pairs());
        for u in 0..store.n_users() {
            for &i in store.train_pos(u as u32) {
                pairs.push((u as u32, i));
            }
        }
        let (pop_cum, pop_total) = match kind {
            SamplerKind::Uniform => (Vec::new(), 0),
            SamplerKind::Popularity => {
                let counts = store.item_train_counts();
                let mut cum = Vec::with_capacity(counts.len());
                let mut total = 0u64;
                for c in counts {
                    total += c as u64;
                    cum.push(total);
                }
                (cum, total)
            }
        };
        TripletSampler { store, kind, pairs, pop_cum, pop_total }
    }

    pub fn kind(&self) -> SamplerKind {
        self.kind
    }

    fn draw_candidate(&self, rng: &mut ChaCha8Rng) -> u32 {
        match self.kind {
            SamplerKind::Popularity if self.pop_total > 0 => {
                let r = rng.random_range(0..self.pop_total);
                // First index whose cumulative count exceeds r.
                self.pop_cum.partition_point(|&c| c <= r) as u32
            }
            _ => rng.random_range(0..self.store.n_items() as u32),
        }
    }

    /// Draws an item the user has not interacted with in training, or
    /// `None` when no such item exists.
    pub fn sample_negative(&self, user: u32, rng: &mut ChaCha8Rng) -> Option<u32> {
        for _ in 0..MAX_REJECTIONS {
            let cand = self.draw_candidate(rng);
            if !self.store.contains_train(user, cand) {
                return Some(cand);
            }
        }
        // Exact fallback over the complement.
        let complement: Vec<u32> = (0..self.store.n_items() as u32)
            .filter(|&i| !self.store.contains_train(user, i))
            .collect();
        if complement.is_empty() {
            log::warn!("user {user} has no candidate negatives; skipping");
            return None;
        }
        match self.kind {
            SamplerKind::Popularity if self.pop_total > 0 => {
                let counts = self.store.item_train_counts();
                let total: u64 = complement.iter().map(|&i| counts[i as usize] as u64).sum();
                if total == 0 {
                    return Some(complement[rng.random_range(0..complement.len())]);
                }
                let mut r = rng.random_range(0..total);
                for &i in &complement {
                    let c = counts[i as usize] as u64;
                    if r < c {
                        return Some(i);
                    }
                    r -= c;
                }
                Some(*complement.last().unwrap())
            }
            _ => Some(complement[rng.random_range(0..complement.len())]),
        }
    }

    /// Every training pair once, shuffled, each with a fresh negative.
    pub fn sample_epoch(&self, rng: &mut ChaCha8Rng) -> Vec<Triplet> {
        let mut order = self.pairs.clone();
        order.shuffle(rng);
        let mut out = Vec::with_capacity(order.len());
        for (user, pos) in order {
            if let Some(neg) = self.sample_negative(user, rng) {
                out.push(Triplet { user, pos, neg });
            }
        }
        out
    }

    /// `n` triplets whose (user, pos) pairs are drawn uniformly with
    /// replacement. Used for the outer-objective batches.
    pub fn sample_batch(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Triplet> {
        let mut out = Vec::with_capacity(n);
        if self.pairs.is_empty() {
            return out;
        }
        while out.len() < n {
            let (user, pos) = self.pairs[rng.random_range(0..self.pairs.len())];
            if let Some(neg) = self.sample_negative(user, rng) {
                out.push(Triplet { user, pos, neg });
            }
        }
        out
    }
}

/// One-shot convenience wrapper over [`TripletSampler::sample_epoch`].
pub fn sample_epoch(store: &InteractionStore, kind: SamplerKind, rng: &mut ChaCha8Rng) -> Vec<Triplet> {
    TripletSampler::new(store, kind).sample_epoch(rng)
}
