//! Train the unweighted pairwise-ranking baseline and read the results.
//!
//! This is the reference point every weighted strategy is compared
//! against: matrix factorization under the classic sigmoid pairwise
//! loss, uniform triplet sampling, early stopping on validation
//! recall. No weight network, no clustering.
//!
//! Run with `cargo run --release -p til --example train_baseline`.

use til::data::{synthesize, SynthSpec};
use til::eval::{evaluate, EvalOptions, EvalSplit};
use til::{train, Strategy, TrainConfig};

fn main() -> til::Result<()> {
    let (store, _) = synthesize(&SynthSpec {
        n_users: 300,
        n_items: 600,
        n_groups: 6,
        pos_per_user: 25,
        seed: 11,
        ..SynthSpec::default()
    })?;

    let cfg = TrainConfig {
        strategy: Strategy::BaselineBpr,
        dim: 16,
        lr_inner: 5e-3,
        batch: 1024,
        max_epochs: 300,
        patience: 30,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = train(&store, &cfg)?;

    println!("stopped: {:?} at epoch {} (best epoch {})", out.stop, out.final_epoch, out.best_epoch);
    println!("\n  epoch   inner_loss   val_recall@{}", cfg.eval_k);
    for rec in out.history.iter().step_by(out.history.len().div_ceil(10).max(1)) {
        println!("  {:5}   {:10.5}   {:.4}", rec.epoch, rec.inner_loss, rec.val_recall);
    }

    // The returned model is the best-validation snapshot, not the last
    // epoch, so test metrics are an honest holdout read.
    let report = evaluate(
        &out.model.theta,
        &store,
        EvalSplit::Test,
        &[5, 10, 20],
        &EvalOptions::default(),
    )?;
    println!();
    for (i, &k) in report.ks.iter().enumerate() {
        println!("test recall@{k:<2} = {:.4}   ndcg@{k:<2} = {:.4}", report.recall[i], report.ndcg[i]);
    }
    Ok(())
}
