//! Check every analytic gradient in the crate against central finite
//! differences, then prove the checker itself can catch a bug.
//!
//! Five blocks are verified on random instances:
//!
//! | block         | what is differentiated                             |
//! |---------------|----------------------------------------------------|
//! | ranking_loss  | pairwise sigmoid loss wrt both embedding tables    |
//! | weighted_loss | the same loss scaled by generated weights          |
//! | weight_net    | generator MLP wrt its own parameters               |
//! | cluster_kl    | KL self-training wrt items and centers             |
//! | outer_bilevel | held-out loss through the virtual inner step, wrt  |
//! |               | generator parameters                               |
//!
//! The bilevel block composes a full optimizer step inside the
//! derivative, so its tolerance is one decade looser than the rest.
//!
//! Run with `cargo run --release -p til --example verify_gradients`.

use til::gradcheck::{run, GradBlock, GradcheckOptions};

fn main() {
    let report = run(&GradcheckOptions { instances: 40, ..GradcheckOptions::default() });
    println!("{}", report.render_table());
    assert!(report.passed);

    // Corrupt one block's analytic gradient on purpose. A checker
    // that cannot fail proves nothing.
    let mut opts = GradcheckOptions { instances: 10, ..GradcheckOptions::default() };
    opts.corrupt = Some(GradBlock::WeightNet);
    let sabotaged = run(&opts);
    let block = sabotaged
        .blocks
        .iter()
        .find(|b| b.block == GradBlock::WeightNet)
        .unwrap();
    println!(
        "with a sabotaged weight_net gradient: passed = {}, max rel err = {:.2e}",
        block.passed, block.max_rel_err
    );
    assert!(!block.passed, "checker failed to flag a corrupted gradient");
}
