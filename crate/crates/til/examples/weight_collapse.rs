//! Why the weight network needs the bilevel split: train it the naive
//! way and watch every weight collapse to zero.
//!
//! If the generator's parameters descend the same weighted loss as the
//! embeddings (single-level joint training), the cheapest way to lower
//! `mean(w * L)` is `w -> 0`. Nothing anchors the weights to triplet
//! quality. The bilevel objective removes that shortcut: generator
//! parameters are scored by the unweighted ranking loss of a fresh
//! batch after a virtual optimizer step, so shrinking all weights
//! stops helping and only relative, per-triplet discrimination pays.
//!
//! The run below trains both variants from the same seed on the same
//! world and prints the batch-mean weight trajectory side by side.
//!
//! Run with `cargo run --release -p til --example weight_collapse`.

use til::data::{synthesize, SplitRatios, SynthSpec};
use til::{train, Strategy, TrainConfig};

fn main() -> til::Result<()> {
    let (store, _) = synthesize(&SynthSpec {
        n_users: 120,
        n_items: 240,
        n_groups: 4,
        pos_per_user: 20,
        noise_rate: 0.1,
        ratios: SplitRatios { train: 1.0, val: 0.0, test: 0.0 },
        seed: 55,
        ..SynthSpec::default()
    })?;

    let bilevel = TrainConfig {
        strategy: Strategy::TilUi,
        dim: 16,
        batch: 256,
        lr_outer: 5e-3,
        max_epochs: 100,
        patience: 1000,
        seed: 3,
        ..TrainConfig::default()
    };
    let joint = TrainConfig { single_level: true, ..bilevel.clone() };

    let bi = train(&store, &bilevel)?;
    let jo = train(&store, &joint)?;

    println!("  epoch   bilevel w   single-level w");
    for (b, j) in bi.history.iter().zip(&jo.history).step_by(10) {
        println!("  {:5}   {:9.4}   {:.4}", b.epoch, b.mean_weight, j.mean_weight);
    }
    let bi_final = bi.history.last().unwrap().mean_weight;
    let jo_final = jo.history.last().unwrap().mean_weight;
    println!("\nfinal mean weight: bilevel {bi_final:.4}, single-level {jo_final:.4}");
    assert!(jo_final < 0.05, "joint training should have collapsed");
    assert!(bi_final > 0.2, "bilevel training should not collapse");
    Ok(())
}
