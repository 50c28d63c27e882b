//! Ranking metrics and the two reporting views (weight case study,
//! noise robustness).
//!
//! Evaluation is full-sort: every item the user has not interacted with
//! in training is a candidate, scores are sorted descending, and ties
//! break toward the lower item index so results do not depend on sort
//! internals. Metrics are macro-averaged over users whose split is
//! nonempty.

use serde::{Deserialize, Serialize};

use crate::backbone::EmbeddingTable;
use crate::data::InteractionStore;
use crate::error::{Result, TilError};
use crate::rng::{stream, stream_rng};
use crate::sampler::Triplet;
use crate::trainer::TilModel;
use crate::weightgen::weight_forward;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalOptions {
    /// When evaluating the test split, additionally drop validation
    /// positives from the candidate set.
    pub exclude_val_when_testing: bool,
}

/// Macro-averaged metrics at each requested cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub users_evaluated: usize,
}

impl MetricsReport {
    fn at(&self, k: usize, values: &[f64]) -> f64 {
        self.ks
            .iter()
            .position(|&kk| kk == k)
            .map_or(f64::NAN, |i| values[i])
    }

    pub fn recall_at(&self, k: usize) -> f64 {
        self.at(k, &self.recall)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.at(k, &self.ndcg)
    }
}

/// Top-k items for one user over all items except `excluded` (sorted
/// ascending). Ties break toward the lower item index.
pub fn topk_excluding(theta: &EmbeddingTable, user: u32, k: usize, excluded: &[u32]) -> Vec<u32> {
    debug_assert!(excluded.windows(2).all(|w| w[0] < w[1]));
    let mut scored: Vec<(f64, u32)> = (0..theta.n_items() as u32)
        .filter(|i| excluded.binary_search(i).is_err())
        .map(|i| (theta.score(user, i), i))
        .collect();
    scored.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Hits in the first k over the size of the relevant set.
pub fn recall_at_k(ranked: &[u32], relevant: &[u32], k: usize) -> f64 {
    if relevant.is_empty() {
        return f64::NAN;
    }
    let hits = ranked
        .iter()
        .take(k)
        .filter(|i| relevant.binary_search(i).is_ok())
        .count();
    hits as f64 / relevant.len() as f64
}

/// Binary-relevance NDCG: DCG sums 1/log2(rank+1) over hits (1-based
/// ranks), normalized by the ideal DCG over min(k, |relevant|) slots.
pub fn ndcg_at_k(ranked: &[u32], relevant: &[u32], k: usize) -> f64 {
    if relevant.is_empty() {
        return f64::NAN;
    }
    let mut dcg = 0.0;
    for (pos, i) in ranked.iter().take(k).enumerate() {
        if relevant.binary_search(i).is_ok() {
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let ideal_slots = k.min(relevant.len());
    let idcg: f64 = (0..ideal_slots).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    dcg / idcg
}

fn exclusions(store: &InteractionStore, u: u32, split: EvalSplit, opts: &EvalOptions) -> Vec<u32> {
    let mut ex: Vec<u32> = store.train_pos(u).to_vec();
    if split == EvalSplit::Test && opts.exclude_val_when_testing {
        ex.extend_from_slice(store.val_pos(u));
        ex.sort_unstable();
        ex.dedup();
    }
    ex
}

/// Macro-averaged Recall@k and NDCG@k over users with a nonempty
/// held-out split.
pub fn evaluate(
    theta: &EmbeddingTable,
    store: &InteractionStore,
    split: EvalSplit,
    ks: &[usize],
    opts: &EvalOptions,
) -> MetricsReport {
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let mut recall_sums = vec![0.0; ks.len()];
    let mut ndcg_sums = vec![0.0; ks.len()];
    let mut users = 0usize;
    for u in 0..store.n_users() as u32 {
        let relevant = match split {
            EvalSplit::Validation => store.val_pos(u),
            EvalSplit::Test => store.test_pos(u),
        };
        if relevant.is_empty() {
            continue;
        }
        users += 1;
        let ranked = topk_excluding(theta, u, max_k, &exclusions(store, u, split, opts));
        for (idx, &k) in ks.iter().enumerate() {
            recall_sums[idx] += recall_at_k(&ranked, relevant, k);
            ndcg_sums[idx] += ndcg_at_k(&ranked, relevant, k);
        }
    }
    let denom = users.max(1) as f64;
    MetricsReport {
        ks: ks.to_vec(),
        recall: recall_sums.iter().map(|s| s / denom).collect(),
        ndcg: ndcg_sums.iter().map(|s| s / denom).collect(),
        users_evaluated: users,
    }
}

/// Mean generated weight per (positive grade, negative grade) cell,
/// over triplets whose positive is a training positive rated `a` and
/// whose negative is an item the user rated `b` without it becoming a
/// positive anywhere.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseStudyReport {
    /// Triplets contributing to each cell; grade g maps to index g-1.
    pub counts: [[usize; 5]; 5],
    /// Raw mean weight per cell (NaN for empty cells).
    pub mean_weight: [[f64; 5]; 5],
    /// Means scaled so the largest cell reads 100.
    pub normalized: [[f64; 5]; 5],
}

impl CaseStudyReport {
    pub fn cell(&self, pos_grade: usize, neg_grade: usize) -> f64 {
        self.mean_weight[pos_grade - 1][neg_grade - 1]
    }
}

fn grade_of(r: f64) -> Option<usize> {
    let g = r.round();
    if (1.0..=5.0).contains(&g) {
        Some(g as usize)
    } else {
        None
    }
}

/// Builds the weight grid. `max_per_cell` bounds the number of sampled
/// triplets per cell; sampling is deterministic in `seed`.
pub fn case_study(
    model: &TilModel,
    store: &InteractionStore,
    max_per_cell: usize,
    seed: u64,
) -> Result<CaseStudyReport> {
    if model.weight_net.is_none() {
        return Err(TilError::Config(
            "case study requires a model with a weight generator".into(),
        ));
    }
    if !store.has_ratings() {
        return Err(TilError::Config(
            "case study requires a dataset with explicit ratings".into(),
        ));
    }
    let ratings = store.rating_lookup();
    // Per-user rated items that never became positives: candidates for
    // the graded-negative side.
    let mut rated_pos: Vec<Vec<(u32, usize)>> = vec![Vec::new(); store.n_users()];
    let mut rated_neg: Vec<Vec<(u32, usize)>> = vec![Vec::new(); store.n_users()];
    for (&(u, i), &r) in &ratings {
        let Some(g) = grade_of(r) else { continue };
        let positive = store.contains_train(u, i)
            || store.val_pos(u).binary_search(&i).is_ok()
            || store.test_pos(u).binary_search(&i).is_ok();
        if store.contains_train(u, i) {
            rated_pos[u as usize].push((i, g));
        } else if !positive {
            rated_neg[u as usize].push((i, g));
        }
    }

    let mut cells: Vec<Vec<Triplet>> = vec![Vec::new(); 25];
    for u in 0..store.n_users() {
        for &(i, a) in &rated_pos[u] {
            for &(j, b) in &rated_neg[u] {
                cells[(a - 1) * 5 + (b - 1)].push(Triplet {
                    user: u as u32,
                    pos: i,
                    neg: j,
                });
            }
        }
    }

    let mut rng = stream_rng(seed, &[stream::CASE_STUDY]);
    let net = model.weight_net.as_ref().unwrap();
    let mut counts = [[0usize; 5]; 5];
    let mut mean_weight = [[f64::NAN; 5]; 5];
    let mut max_mean = f64::NAN;
    for (cell_idx, triplets) in cells.iter().enumerate() {
        if triplets.is_empty() {
            continue;
        }
        let picked: Vec<Triplet> = if triplets.len() <= max_per_cell {
            triplets.clone()
        } else {
            rand::seq::index::sample(&mut rng, triplets.len(), max_per_cell)
                .into_iter()
                .map(|idx| triplets[idx])
                .collect()
        };
        let states = model.states(store, &picked)?;
        let total: f64 = states
            .iter()
            .map(|s| weight_forward(net, s.s.view()).weight)
            .sum();
        let mean = total / picked.len() as f64;
        let (a, b) = (cell_idx / 5, cell_idx % 5);
        counts[a][b] = picked.len();
        mean_weight[a][b] = mean;
        if max_mean.is_nan() || mean > max_mean {
            max_mean = mean;
        }
    }

    let mut normalized = [[f64::NAN; 5]; 5];
    if max_mean.is_finite() && max_mean > 0.0 {
        for a in 0..5 {
            for b in 0..5 {
                normalized[a][b] = mean_weight[a][b] / max_mean * 100.0;
            }
        }
    }
    Ok(CaseStudyReport { counts, mean_weight, normalized })
}

/// One strategy's clean-vs-noisy comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub strategy: String,
    pub clean_recall: f64,
    pub noisy_recall: f64,
    pub absolute_drop: f64,
    /// Fraction of the clean recall lost under noise.
    pub relative_drop: f64,
}

impl RobustnessRow {
    pub fn new(strategy: impl Into<String>, clean: f64, noisy: f64) -> Self {
        RobustnessRow {
            strategy: strategy.into(),
            clean_recall: clean,
            noisy_recall: noisy,
            absolute_drop: clean - noisy,
            relative_drop: if clean > 0.0 { (clean - noisy) / clean } else { f64::NAN },
        }
    }
}
