//! Read the learned weights against a hidden 1..5 rating scale.
//!
//! The rated synthetic world grades every user-item pair it touches:
//! grade 5 items are loved and consumed, grade 4 liked and consumed,
//! grade 3 and below rated but never consumed. Training only ever sees
//! the binary consumed/unconsumed signal; the grades stay hidden.
//!
//! After training, triplets are bucketed by (grade of positive, grade
//! of negative) and the mean learned weight of each bucket is printed
//! as a 5x5 grid. The informative corners:
//!
//! - (pos 5, neg 1): cleanest possible evidence, should sit at the top
//! - (pos 4, neg 3): positive barely liked, negative nearly liked, the
//!   least trustworthy comparison, should sit lower
//!
//! That ordering emerging from binary data alone is the point: the
//! weight network recovers a latent preference intensity it was never
//! shown.
//!
//! Run with `cargo run --release -p til --example grade_case_study`.

use til::data::{synthesize, SplitRatios, SynthSpec};
use til::eval::case_study;
use til::{train, Strategy, TrainConfig};

fn main() -> til::Result<()> {
    let (store, _) = synthesize(&SynthSpec {
        n_groups: 25,
        noise_rate: 0.35,
        rated: true,
        ratios: SplitRatios { train: 0.9, val: 0.0, test: 0.1 },
        seed: 104,
        ..SynthSpec::default()
    })?;

    let cfg = TrainConfig {
        strategy: Strategy::TilUi,
        dim: 8,
        lr_inner: 5e-3,
        lr_outer: 1e-2,
        batch: 4096,
        // Scoring the generator on batches three times the inner size
        // keeps its gradient noise floor low enough that it stays
        // discriminative instead of saturating at 1.
        outer_batch: Some(12288),
        max_epochs: 700,
        patience: 10_000,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = train(&store, &cfg)?;

    let report = case_study(&out.model, &store, 200, 7)?;
    println!("mean learned weight by (positive grade, negative grade), scaled to 100:\n");
    println!("              neg 1     neg 2     neg 3");
    for pos in (4..=5).rev() {
        print!("  pos {pos}   ");
        for neg in 1..=3 {
            let v = report.normalized[pos - 1][neg - 1];
            if v.is_nan() {
                print!("       --  ");
            } else {
                print!("  {v:8.4}");
            }
        }
        println!();
    }

    let extreme = report.cell(5, 1);
    let borderline = report.cell(4, 3);
    println!("\n(5,1) raw mean {extreme:.6}  vs  (4,3) raw mean {borderline:.6}");
    assert!(
        extreme > borderline,
        "clean extreme pairs should outweigh borderline pairs"
    );
    Ok(())
}
