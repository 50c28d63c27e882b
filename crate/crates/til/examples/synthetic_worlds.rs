//! Tour of the synthetic interaction generator.
//!
//! Every other example (and the whole test suite) runs on worlds built
//! here, so this is the place to see what the knobs do:
//!
//! - users and items live in `n_groups` taste groups; a user consumes
//!   mostly own-group items, so group structure is recoverable from the
//!   interactions alone
//! - `noise_rate` swaps a fraction of each user's positives for items
//!   the user does not actually like (false positives, known to us
//!   because the generator keeps the ground-truth affinity matrix)
//! - `rated = true` additionally attaches 1..5 ratings in a graded
//!   cascade, which the case-study report consumes
//! - `inject_noise` corrupts an already-built store after the split, so
//!   only the training portion is polluted and validation stays clean
//!
//! Run with `cargo run --release -p til --example synthetic_worlds`.

use til::data::{synthesize, NoiseMode, NoiseSpec, SplitRatios, SynthSpec, SYNTH_AFFINITY_THRESHOLD};

fn main() -> til::Result<()> {
    // A small clean world. Defaults: 500 users, 1000 items, 5 groups.
    let spec = SynthSpec {
        n_users: 200,
        n_items: 400,
        n_groups: 8,
        pos_per_user: 20,
        seed: 42,
        ..SynthSpec::default()
    };
    let (store, affinity) = synthesize(&spec)?;
    let stats = store.stats();
    println!(
        "clean world: {} users x {} items, {} train / {} val / {} test pairs, density {:.4}",
        stats.n_users, stats.n_items, stats.train_pairs, stats.val_pairs, stats.test_pairs,
        stats.density
    );

    // Without noise every consumed item is genuinely liked.
    let false_pos = count_false_positives(&store, &affinity);
    println!("false positives in train split: {false_pos}");

    // Same world, 25% of positives swapped for disliked items.
    let noisy_spec = SynthSpec { noise_rate: 0.25, ..spec };
    let (noisy, affinity) = synthesize(&noisy_spec)?;
    let false_pos = count_false_positives(&noisy, &affinity);
    let frac = false_pos as f64 / noisy.n_train_pairs() as f64;
    println!("with noise_rate 0.25: {false_pos} false train positives ({:.1}% of train)", 100.0 * frac);

    // Post-hoc corruption of a clean store. The flip mode replaces a
    // fraction of train positives with unobserved items; val and test
    // are untouched, which is what makes early stopping on validation
    // meaningful under noise.
    let flipped = store.inject_noise(&NoiseSpec {
        mode: NoiseMode::NoisyPosNeg,
        fraction: 0.5,
        seed: 7,
    })?;
    let before: usize = (0..store.n_users() as u32).map(|u| store.train_pos(u).len()).sum();
    let after: usize = (0..flipped.n_users() as u32).map(|u| flipped.train_pos(u).len()).sum();
    let moved: usize = (0..flipped.n_users() as u32).map(|u| flipped.removed_noise(u).len()).sum();
    println!("flip corruption: {before} train pairs before, {after} after, {moved} replaced");
    assert_eq!(store.val_pos(0), flipped.val_pos(0));

    // Rated variant: five grades per user, high grades on own-group
    // items, low grades far away. Grade 3 and below are "rated but not
    // consumed", so they never enter the positive sets.
    let rated_spec = SynthSpec { rated: true, ..spec };
    let (rated, _) = synthesize(&rated_spec)?;
    let lookup = rated.rating_lookup();
    let mut per_grade = [0usize; 5];
    for &r in lookup.values() {
        per_grade[r as usize - 1] += 1;
    }
    println!("rated world grade counts (1..5): {per_grade:?}");

    // Stores round-trip through JSON, so a grid of runs can share one
    // frozen dataset file.
    let path = std::env::temp_dir().join("til_example_world.json");
    store.save_json(&path)?;
    let reloaded = til::InteractionStore::load_json(&path)?;
    assert_eq!(reloaded.n_train_pairs(), store.n_train_pairs());
    println!("round-tripped store through {}", path.display());

    // SplitRatios controls the per-user holdout; (1, 0, 0) keeps
    // everything in train for trajectory experiments.
    let train_only = SynthSpec {
        ratios: SplitRatios { train: 1.0, val: 0.0, test: 0.0 },
        ..spec
    };
    let (all_train, _) = synthesize(&train_only)?;
    assert_eq!(all_train.stats().val_pairs, 0);
    println!("ratios (1,0,0): no holdout, {} train pairs", all_train.n_train_pairs());
    Ok(())
}

// A train positive is false when the generator's affinity for the pair
// sits at or below the threshold that separates like from dislike.
fn count_false_positives(store: &til::InteractionStore, affinity: &ndarray::Array2<f64>) -> usize {
    let mut n = 0;
    for u in 0..store.n_users() as u32 {
        for &i in store.train_pos(u) {
            if affinity[[u as usize, i as usize]] <= SYNTH_AFFINITY_THRESHOLD {
                n += 1;
            }
        }
    }
    n
}
