//! Interaction data: parsing, sparsity filtering, per-user splitting,
//! label-noise injection, and synthetic oracle worlds.
//!
//! A built [`InteractionStore`] is immutable; noise injection returns a
//! modified copy. All randomness (splits, noise, synthesis) flows through
//! tagged streams derived from a seed, so every store is reproducible
//! from its recorded metadata.

use ndarray::Array2;
use rand::seq::index;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use crate::error::{Result, TilError};
use crate::rng::{stream, stream_rng};

/// One line of an interaction log, ids still in their external form.
#[derive(Debug, Clone, PartialEq)]
pub struct RawInteraction {
    pub user: String,
    pub item: String,
    /// Explicit rating in [1, 5] when the log has one.
    pub rating: Option<f64>,
    pub timestamp: Option<i64>,
}

/// Per-user train/validation/test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let sum = self.train + self.val + self.test;
        if self.train <= 0.0 || self.val < 0.0 || self.test < 0.0 || (sum - 1.0).abs() > 1e-9 {
            return Err(TilError::Config(format!(
                "split ratios need train > 0, val/test >= 0, sum 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Which kind of label corruption to inject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Clean,
    /// Add unobserved items to each user's training positives.
    NoisyPos,
    /// Flip training positives to unobserved (they become fair game for
    /// negative sampling).
    NoisyNeg,
    /// Both of the above, counts taken from the original positive count.
    NoisyPosNeg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub mode: NoiseMode,
    /// Per-user corruption count is round(fraction * |train positives|).
    pub fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if self.mode != NoiseMode::Clean && !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(TilError::Config(format!(
                "noise fraction must lie in (0, 1]; got {}",
                self.fraction
            )));
        }
        Ok(())
    }
}

/// Provenance carried by a store so experiments can be replayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StoreMeta {
    pub source: String,
    pub seed: u64,
    pub ratios: Option<SplitRatios>,
    pub noise: Option<NoiseSpec>,
}

/// Split interaction data with dense internal indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionStore {
    n_users: usize,
    n_items: usize,
    /// Sorted item indices per user; disjoint across the three splits.
    train: Vec<Vec<u32>>,
    val: Vec<Vec<u32>>,
    test: Vec<Vec<u32>>,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    /// (user, item, rating) entries kept for the case study; items here
    /// need not be positives.
    ratings: Vec<(u32, u32, f64)>,
    /// Per-user positives flipped to unobserved by noisy_neg injection.
    removed_noise: Vec<Vec<u32>>,
    pub meta: StoreMeta,
}

fn split_counts(n: usize, ratios: SplitRatios) -> (usize, usize, usize) {
    // Users too small to populate all requested splits train on
    // everything and are skipped by evaluation.
    if n < 3 && ratios.val > 0.0 && ratios.test > 0.0 {
        return (n, 0, 0);
    }
    let quota = |r: f64| if r > 0.0 { ((n as f64 * r).round() as usize).max(1) } else { 0 };
    let mut n_val = quota(ratios.val);
    let mut n_test = quota(ratios.test);
    while n_val + n_test >= n {
        if n_val >= n_test && n_val > 0 {
            n_val -= 1;
        } else if n_test > 0 {
            n_test -= 1;
        } else {
            break;
        }
    }
    (n - n_val - n_test, n_val, n_test)
}

impl InteractionStore {
    /// Assembles a store from dense per-user positive lists, splitting
    /// each user's positives with their own seeded stream.
    fn from_parts(
        user_ids: Vec<String>,
        item_ids: Vec<String>,
        positives: Vec<Vec<u32>>,
        ratios: SplitRatios,
        seed: u64,
        source: &str,
    ) -> Result<Self> {
        ratios.validate()?;
        let n_users = user_ids.len();
        let n_items = item_ids.len();
        if n_users == 0 || positives.iter().all(|p| p.is_empty()) {
            return Err(TilError::EmptyDataset("no positive interactions".into()));
        }
        let mut train = vec![Vec::new(); n_users];
        let mut val = vec![Vec::new(); n_users];
        let mut test = vec![Vec::new(); n_users];
        for (u, items) in positives.into_iter().enumerate() {
            if items.is_empty() {
                continue;
            }
            let mut order = items;
            order.shuffle(&mut stream_rng(seed, &[stream::SPLIT, u as u64]));
            let (n_tr, n_va, _) = split_counts(order.len(), ratios);
            let rest = order.split_off(n_tr);
            train[u] = order;
            let (va, te) = {
                let mut rest = rest;
                let te = rest.split_off(n_va.min(rest.len()));
                (rest, te)
            };
            val[u] = va;
            test[u] = te;
            train[u].sort_unstable();
            val[u].sort_unstable();
            test[u].sort_unstable();
        }
        Ok(InteractionStore {
            n_users,
            n_items,
            train,
            val,
            test,
            user_ids,
            item_ids,
            ratings: Vec::new(),
            removed_noise: vec![Vec::new(); n_users],
            meta: StoreMeta {
                source: source.to_string(),
                seed,
                ratios: Some(ratios),
                noise: None,
            },
        })
    }

    /// Indexes external ids in first-appearance order, de-duplicates
    /// (user, item) pairs, and splits each user's positives.
    pub fn build(records: &[RawInteraction], ratios: SplitRatios, seed: u64) -> Result<Self> {
        if records.is_empty() {
            return Err(TilError::EmptyDataset("no interactions to build from".into()));
        }
        let mut user_ids: Vec<String> = Vec::new();
        let mut item_ids: Vec<String> = Vec::new();
        let mut user_index: HashMap<&str, u32> = HashMap::new();
        let mut item_index: HashMap<&str, u32> = HashMap::new();
        let mut positives: Vec<Vec<u32>> = Vec::new();
        let mut seen: HashSet<(u32, u32)> = HashSet::new();
        for r in records {
            let u = *user_index.entry(r.user.as_str()).or_insert_with(|| {
                user_ids.push(r.user.clone());
                positives.push(Vec::new());
                (user_ids.len() - 1) as u32
            });
            let i = *item_index.entry(r.item.as_str()).or_insert_with(|| {
                item_ids.push(r.item.clone());
                (item_ids.len() - 1) as u32
            });
            if seen.insert((u, i)) {
                positives[u as usize].push(i);
            }
        }
        Self::from_parts(user_ids, item_ids, positives, ratios, seed, "records")
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn train_pos(&self, u: u32) -> &[u32] {
        &self.train[u as usize]
    }

    pub fn val_pos(&self, u: u32) -> &[u32] {
        &self.val[u as usize]
    }

    pub fn test_pos(&self, u: u32) -> &[u32] {
        &self.test[u as usize]
    }

    /// Positives removed by noisy_neg injection; empty otherwise.
    pub fn removed_noise(&self, u: u32) -> &[u32] {
        &self.removed_noise[u as usize]
    }

    pub fn contains_train(&self, u: u32, i: u32) -> bool {
        self.train[u as usize].binary_search(&i).is_ok()
    }

    pub fn n_train_pairs(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }

    pub fn user_token(&self, u: u32) -> &str {
        &self.user_ids[u as usize]
    }

    pub fn item_token(&self, i: u32) -> &str {
        &self.item_ids[i as usize]
    }

    /// Number of training interactions per item.
    pub fn item_train_counts(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.n_items];
        for items in &self.train {
            for &i in items {
                counts[i as usize] += 1;
            }
        }
        counts
    }

    /// Attaches explicit ratings (for the case study) to already-known
    /// user/item ids; unknown ids are skipped, later entries win.
    pub fn attach_ratings(&mut self, records: &[RawInteraction]) {
        let user_index: HashMap<&str, u32> = self
            .user_ids
            .iter()
            .enumerate()
            .map(|(k, v)| (v.as_str(), k as u32))
            .collect();
        let item_index: HashMap<&str, u32> = self
            .item_ids
            .iter()
            .enumerate()
            .map(|(k, v)| (v.as_str(), k as u32))
            .collect();
        let mut map: HashMap<(u32, u32), f64> = self.ratings.iter().map(|&(u, i, r)| ((u, i), r)).collect();
        for r in records {
            if let (Some(&u), Some(&i), Some(rating)) = (
                user_index.get(r.user.as_str()),
                item_index.get(r.item.as_str()),
                r.rating,
            ) {
                map.insert((u, i), rating);
            }
        }
        let mut entries: Vec<(u32, u32, f64)> = map.into_iter().map(|((u, i), r)| (u, i, r)).collect();
        entries.sort_by_key(|&(u, i, _)| (u, i));
        self.ratings = entries;
    }

    pub fn rating_lookup(&self) -> HashMap<(u32, u32), f64> {
        self.ratings.iter().map(|&(u, i, r)| ((u, i), r)).collect()
    }

    pub fn has_ratings(&self) -> bool {
        !self.ratings.is_empty()
    }

    /// Returns a copy with label noise injected into the train split;
    /// validation and test are untouched.
    pub fn inject_noise(&self, spec: &NoiseSpec) -> Result<InteractionStore> {
        spec.validate()?;
        let mut out = self.clone();
        out.meta.noise = Some(*spec);
        if spec.mode == NoiseMode::Clean {
            return Ok(out);
        }
        let mut rng = stream_rng(spec.seed, &[stream::NOISE]);
        for u in 0..self.n_users {
            let original = &self.train[u];
            if original.is_empty() {
                continue;
            }
            let c = (spec.fraction * original.len() as f64).round() as usize;
            let mut removed: Vec<u32> = Vec::new();
            if matches!(spec.mode, NoiseMode::NoisyNeg | NoiseMode::NoisyPosNeg) {
                // Keep at least one positive so the user's interest
                // vector stays defined.
                let r = c.min(original.len() - 1);
                let picks = index::sample(&mut rng, original.len(), r);
                removed = picks.iter().map(|k| original[k]).collect();
                removed.sort_unstable();
            }
            let mut added: Vec<u32> = Vec::new();
            if matches!(spec.mode, NoiseMode::NoisyPos | NoiseMode::NoisyPosNeg) {
                // Unobserved means absent from the user's full original
                // positive set, so a removed item cannot be re-added.
                let mut observed: HashSet<u32> = original.iter().copied().collect();
                observed.extend(self.val[u].iter().copied());
                observed.extend(self.test[u].iter().copied());
                let pool: Vec<u32> =
                    (0..self.n_items as u32).filter(|i| !observed.contains(i)).collect();
                let a = c.min(pool.len());
                let picks = index::sample(&mut rng, pool.len(), a);
                added = picks.iter().map(|k| pool[k]).collect();
            }
            let removed_set: HashSet<u32> = removed.iter().copied().collect();
            let mut new_train: Vec<u32> = original
                .iter()
                .copied()
                .filter(|i| !removed_set.contains(i))
                .collect();
            new_train.extend(added);
            new_train.sort_unstable();
            out.train[u] = new_train;
            out.removed_noise[u] = removed;
        }
        Ok(out)
    }

    pub fn stats(&self) -> StoreStats {
        let train: usize = self.train.iter().map(Vec::len).sum();
        let val: usize = self.val.iter().map(Vec::len).sum();
        let test: usize = self.test.iter().map(Vec::len).sum();
        StoreStats {
            n_users: self.n_users,
            n_items: self.n_items,
            train_pairs: train,
            val_pairs: val,
            test_pairs: test,
            density: (train + val + test) as f64 / (self.n_users * self.n_items).max(1) as f64,
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        let snap = StoreSnapshot { version: STORE_SNAPSHOT_VERSION, store: self.clone() };
        serde_json::to_writer(&mut w, &snap)
            .map_err(|e| TilError::Snapshot(format!("serialize store: {e}")))?;
        w.flush()?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let snap: StoreSnapshot = serde_json::from_str(&text)
            .map_err(|e| TilError::Snapshot(format!("parse store snapshot: {e}")))?;
        if snap.version != STORE_SNAPSHOT_VERSION {
            return Err(TilError::Snapshot(format!(
                "unsupported store snapshot version {}",
                snap.version
            )));
        }
        Ok(snap.store)
    }
}

const STORE_SNAPSHOT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StoreSnapshot {
    version: u32,
    store: InteractionStore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoreStats {
    pub n_users: usize,
    pub n_items: usize,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub test_pairs: usize,
    pub density: f64,
}

/// Splits a raw line into fields on tab (preferred) or comma.
fn split_line(line: &str) -> Vec<&str> {
    let sep = if line.contains('\t') { '\t' } else { ',' };
    line.split(sep).map(str::trim).collect()
}

fn looks_like_header(fields: &[&str]) -> bool {
    const WORDS: [&str; 8] =
        ["user", "userid", "user_id", "item", "itemid", "item_id", "movieid", "rating"];
    fields
        .iter()
        .any(|f| WORDS.contains(&f.to_ascii_lowercase().as_str()))
}

/// Parses a delimited interaction log:
/// `user<TAB|,>item[<sep>rating[<sep>timestamp]]`, header auto-detected.
/// All records are returned, including low-rated ones; see
/// [`load_interactions`] for the binarized view.
pub fn parse_interactions(path: &Path) -> Result<Vec<RawInteraction>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_line(line);
        if idx == 0 && looks_like_header(&fields) {
            continue;
        }
        if fields.len() < 2 || fields.len() > 4 {
            return Err(TilError::Parse {
                line: line_no,
                msg: format!("expected 2-4 fields, found {}", fields.len()),
            });
        }
        let rating = match fields.get(2) {
            None => None,
            Some(s) => {
                let r: f64 = s.parse().map_err(|_| TilError::Parse {
                    line: line_no,
                    msg: format!("rating field `{s}` is not a number"),
                })?;
                if !(1.0..=5.0).contains(&r) {
                    return Err(TilError::Parse {
                        line: line_no,
                        msg: format!("rating {r} outside [1, 5]"),
                    });
                }
                Some(r)
            }
        };
        let timestamp = match fields.get(3) {
            None => None,
            Some(s) => Some(s.parse().map_err(|_| TilError::Parse {
                line: line_no,
                msg: format!("timestamp field `{s}` is not an integer"),
            })?),
        };
        out.push(RawInteraction {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            rating,
            timestamp,
        });
    }
    Ok(out)
}

/// Keeps records that count as positives: rating >= threshold, or no
/// rating at all (already-implicit logs pass through).
pub fn binarize(records: &[RawInteraction], rating_threshold: f64) -> Vec<RawInteraction> {
    records
        .iter()
        .filter(|r| r.rating.is_none_or(|v| v >= rating_threshold))
        .cloned()
        .collect()
}

/// Parses a log and keeps the positive records.
pub fn load_interactions(path: &Path, rating_threshold: f64) -> Result<Vec<RawInteraction>> {
    let all = parse_interactions(path)?;
    let pos = binarize(&all, rating_threshold);
    if pos.is_empty() {
        return Err(TilError::EmptyDataset(format!(
            "no positive interactions in {} at threshold {rating_threshold}",
            path.display()
        )));
    }
    Ok(pos)
}

/// Iteratively removes users and items with fewer than `min_count`
/// interactions until neither side changes (the k-core fixed point).
pub fn filter_sparse(mut records: Vec<RawInteraction>, min_count: usize) -> Result<Vec<RawInteraction>> {
    if min_count == 0 {
        return Ok(records);
    }
    loop {
        let keep: Vec<bool> = {
            let mut user_counts: HashMap<&str, usize> = HashMap::new();
            let mut item_counts: HashMap<&str, usize> = HashMap::new();
            for r in &records {
                *user_counts.entry(r.user.as_str()).or_default() += 1;
                *item_counts.entry(r.item.as_str()).or_default() += 1;
            }
            records
                .iter()
                .map(|r| {
                    user_counts[r.user.as_str()] >= min_count
                        && item_counts[r.item.as_str()] >= min_count
                })
                .collect()
        };
        let before = records.len();
        let mut flags = keep.iter();
        records.retain(|_| *flags.next().unwrap());
        if records.is_empty() {
            return Err(TilError::EmptyDataset(format!(
                "min_count {min_count} filtered out every interaction"
            )));
        }
        if records.len() == before {
            return Ok(records);
        }
    }
}

/// Recipe for a synthetic world with group-structured preferences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_users: usize,
    pub n_items: usize,
    /// Latent preference groups; the clean affinity matrix has rank at
    /// most this.
    pub n_groups: usize,
    pub pos_per_user: usize,
    /// Fraction of each user's train positives replaced with items the
    /// user does not actually like (false positives). Validation and
    /// test stay clean so metrics measure true-preference recovery.
    pub noise_rate: f64,
    /// Reserve this many item ids (the highest ones) as junk: liked by
    /// nobody, and the exclusive source of false positives when
    /// `noise_rate` is on. Zero draws false positives uniformly from
    /// the user's disliked items instead. Concentrated noise imitates
    /// clickbait: junk absorbs pulls from users in every group and
    /// floats into everyone's top ranks unless those pulls are
    /// discounted.
    pub junk_items: usize,
    /// Draw false positives from the user's adjacent preference group
    /// instead of uniformly. Every user of a group then mislikes the
    /// same foreign group, which a factor model cannot shrug off as
    /// per-pair noise: it warps the whole group's geometry and keeps
    /// irrelevant items competitive at the top of the ranking.
    pub noise_adjacent: bool,
    /// Plant 5-level graded preferences (enables the case study).
    pub rated: bool,
    pub ratios: SplitRatios,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_users: 500,
            n_items: 1000,
            n_groups: 5,
            pos_per_user: 30,
            noise_rate: 0.0,
            junk_items: 0,
            noise_adjacent: false,
            rated: false,
            ratios: SplitRatios::default(),
            seed: 7,
        }
    }
}

/// Affinity strictly above this marks a true preference.
pub const SYNTH_AFFINITY_THRESHOLD: f64 = 0.5;

/// Generates a world of block-structured preferences and returns it with
/// the clean user-item affinity matrix for oracle checks.
///
/// User u belongs to group u mod G, item i to group i mod G. Ungraded
/// worlds: affinity 1 inside the group, 0 outside; positives are drawn
/// inside the group. Graded worlds additionally plant a preference
/// cascade over group offsets (own group -> rating 5, next -> 4 which is
/// still positive, then 3/2/1 which are rated but not consumed), giving
/// the case study its (rating_i, rating_j) cells. With noise_rate > 0, a
/// fraction of each user's train positives is replaced by below-threshold
/// items after splitting.
pub fn synthesize(spec: &SynthSpec) -> Result<(InteractionStore, Array2<f64>)> {
    if spec.n_users == 0 || spec.n_items == 0 || spec.n_groups == 0 || spec.pos_per_user == 0 {
        return Err(TilError::Config("synthetic world needs positive counts".into()));
    }
    if spec.n_groups > spec.n_items {
        return Err(TilError::Config("more groups than items".into()));
    }
    if !(0.0..=0.9).contains(&spec.noise_rate) {
        return Err(TilError::Config(format!(
            "noise_rate must lie in [0, 0.9]; got {}",
            spec.noise_rate
        )));
    }
    if spec.rated && spec.n_groups < 4 {
        return Err(TilError::Config(
            "graded worlds need at least 4 groups for the preference cascade".into(),
        ));
    }
    if spec.junk_items >= spec.n_items {
        return Err(TilError::Config(format!(
            "junk_items {} must leave at least one likable item of {}",
            spec.junk_items, spec.n_items
        )));
    }
    if spec.noise_adjacent && (spec.rated || spec.junk_items > 0) {
        return Err(TilError::Config(
            "noise_adjacent excludes rated worlds and junk_items".into(),
        ));
    }
    if spec.noise_adjacent && spec.n_groups < 2 {
        return Err(TilError::Config(
            "noise_adjacent needs at least two groups".into(),
        ));
    }
    let g = spec.n_groups;
    let likable = spec.n_items - spec.junk_items;
    if g > likable {
        return Err(TilError::Config("more groups than likable items".into()));
    }
    let mut group_items: Vec<Vec<u32>> = vec![Vec::new(); g];
    for i in 0..likable {
        group_items[i % g].push(i as u32);
    }
    let min_group = group_items.iter().map(Vec::len).min().unwrap();

    // Affinity by group offset: 0 -> own group, 1 -> next group, ...
    let offset_affinity = |offset: usize| -> f64 {
        if spec.rated {
            match offset {
                0 => 1.0,
                1 => 0.75,
                2 => 0.5,
                _ => 0.0,
            }
        } else if offset == 0 {
            1.0
        } else {
            0.0
        }
    };
    let mut affinity = Array2::zeros((spec.n_users, spec.n_items));
    for u in 0..spec.n_users {
        for i in 0..likable {
            let offset = (i % g + g - u % g) % g;
            affinity[[u, i]] = offset_affinity(offset);
        }
    }

    let mut rng = stream_rng(spec.seed, &[stream::SYNTH]);
    let mut positives: Vec<Vec<u32>> = Vec::with_capacity(spec.n_users);
    let mut ratings: Vec<(u32, u32, f64)> = Vec::new();
    // Graded worlds split the positive budget between top-grade (own
    // group, rating 5) and borderline (next group, rating 4) items, and
    // additionally grade some non-consumed items 3/2/1 down the cascade.
    let n4 = if spec.rated { spec.pos_per_user / 3 } else { 0 };
    let n5 = spec.pos_per_user - n4;
    let n3 = if spec.rated { (spec.pos_per_user / 3).max(1) } else { 0 };
    let n_low = if spec.rated { (spec.pos_per_user / 3).max(2) } else { 0 };
    if spec.rated && (n5 > min_group || n4 > min_group || n3 > min_group || n_low > min_group) {
        return Err(TilError::Config("graded world: per-grade counts exceed group size".into()));
    }
    if !spec.rated && spec.pos_per_user > min_group {
        return Err(TilError::Config(format!(
            "pos_per_user {} exceeds smallest group size {min_group}",
            spec.pos_per_user
        )));
    }
    for u in 0..spec.n_users {
        let ug = u % g;
        let mut pos = Vec::with_capacity(spec.pos_per_user);
        let own = &group_items[ug];
        for k in index::sample(&mut rng, own.len(), n5.min(own.len())) {
            pos.push(own[k]);
        }
        if spec.rated {
            for &i in &pos {
                ratings.push((u as u32, i, 5.0));
            }
            let next = &group_items[(ug + 1) % g];
            let start = pos.len();
            for k in index::sample(&mut rng, next.len(), n4.min(next.len())) {
                pos.push(next[k]);
            }
            for &i in &pos[start..] {
                ratings.push((u as u32, i, 4.0));
            }
            let third = &group_items[(ug + 2) % g];
            for k in index::sample(&mut rng, third.len(), n3.min(third.len())) {
                ratings.push((u as u32, third[k], 3.0));
            }
            let far = &group_items[(ug + 3) % g];
            for (c, k) in index::sample(&mut rng, far.len(), n_low.min(far.len())).iter().enumerate() {
                let grade = if c % 2 == 0 { 1.0 } else { 2.0 };
                ratings.push((u as u32, far[k], grade));
            }
        }
        positives.push(pos);
    }

    let user_ids = (0..spec.n_users).map(|u| format!("u{u}")).collect();
    let item_ids = (0..spec.n_items).map(|i| format!("i{i}")).collect();
    let mut store = InteractionStore::from_parts(
        user_ids,
        item_ids,
        positives,
        spec.ratios,
        spec.seed,
        "synthetic",
    )?;

    if spec.noise_rate > 0.0 {
        for u in 0..spec.n_users {
            let train = &store.train[u];
            let c = (spec.noise_rate * train.len() as f64).round() as usize;
            if c == 0 {
                continue;
            }
            let mut all_pos: HashSet<u32> = train.iter().copied().collect();
            all_pos.extend(store.val[u].iter().copied());
            all_pos.extend(store.test[u].iter().copied());
            let pool: Vec<u32> = if spec.noise_adjacent {
                group_items[(u % g + 1) % g]
                    .iter()
                    .copied()
                    .filter(|i| !all_pos.contains(i))
                    .collect()
            } else {
                let noise_source = if spec.junk_items > 0 {
                    likable as u32..spec.n_items as u32
                } else {
                    0..spec.n_items as u32
                };
                noise_source
                    .filter(|&i| {
                        affinity[[u, i as usize]] <= SYNTH_AFFINITY_THRESHOLD
                            && !all_pos.contains(&i)
                    })
                    .collect()
            };
            let c = c.min(pool.len()).min(train.len());
            let slots = index::sample(&mut rng, store.train[u].len(), c);
            let fakes = index::sample(&mut rng, pool.len(), c);
            let mut new_train = store.train[u].clone();
            for (slot, fake) in slots.iter().zip(fakes.iter()) {
                new_train[slot] = pool[fake];
            }
            new_train.sort_unstable();
            new_train.dedup();
            store.train[u] = new_train;
        }
    }

    ratings.sort_by_key(|&(u, i, _)| (u, i));
    store.ratings = ratings;
    Ok((store, affinity))
}
