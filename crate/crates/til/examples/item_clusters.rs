//! The clustering layer on its own: k-means seeding, Student's-t soft
//! assignments, the self-sharpening target, and KL descent.
//!
//! ```text
//! items (n x d) --kmeans--> centers (K x d)
//!                     |
//!        soft_assign  |  Q_ik ~ (1 + |x_i - phi_k|^2 / tau)^-(tau+1)/2
//!                     v
//!              target(Q) = T,  T_ik ~ Q_ik^2 / column_mass_k
//!                     |
//!            kl_loss(T, Q) minimized in items and centers
//! ```
//!
//! Squaring in the target boosts confident assignments and the column
//! normalization stops large clusters from swallowing everything, so
//! gradient descent on KL(T || Q) sharpens the partition without any
//! labels.
//!
//! Run with `cargo run --release -p til --example item_clusters`.

use ndarray::Array2;
use rand::RngExt;
use til::clustering::{cluster_grads, kl_loss, kmeans, refresh_membership, soft_assign, target};
use til::rng::stream_rng;

fn main() {
    // Three well-separated blobs in 2-d, 150 points each.
    let mut rng = stream_rng(29, &[1]);
    let blob_centers = [[0.0, 0.0], [6.0, 0.0], [3.0, 5.0]];
    let n = 450;
    let mut points = Array2::zeros((n, 2));
    for i in 0..n {
        let c = blob_centers[i % 3];
        points[[i, 0]] = c[0] + rng.random_range(-1.0..1.0);
        points[[i, 1]] = c[1] + rng.random_range(-1.0..1.0);
    }

    let centers = kmeans(&points, 3, &mut rng);
    println!("k-means centers:");
    for row in centers.rows() {
        println!("  ({:+.2}, {:+.2})", row[0], row[1]);
    }

    // Soft assignments are a proper distribution per point.
    let tau = 1.0;
    let soft = soft_assign(&points, &centers, tau);
    let worst_row_gap = soft
        .rows()
        .into_iter()
        .map(|r| (r.sum() - 1.0).abs())
        .fold(0.0, f64::max);
    println!("max |row sum - 1| over Q: {worst_row_gap:.2e}");

    let tgt = target(&soft);
    println!("initial KL(T || Q): {:.6}", kl_loss(&tgt, &soft));

    // Descend the KL in both points and centers against a frozen
    // target. Monotone decrease here is the invariant the trainer
    // leans on between target refreshes.
    let mut pts = points.clone();
    let mut ctr = centers.clone();
    let lr = 5e-3;
    let mut last = f64::INFINITY;
    for step in 0..120 {
        let soft = soft_assign(&pts, &ctr, tau);
        let loss = kl_loss(&tgt, &soft);
        assert!(loss <= last + 1e-10, "KL rose at step {step}");
        last = loss;
        let grads = cluster_grads(&pts, &ctr, &tgt, tau);
        pts -= &(lr * &grads.items);
        ctr -= &(lr * &grads.centers);
        if step % 30 == 0 {
            println!("  step {step:3}  KL {loss:.6}");
        }
    }
    println!("  final     KL {last:.6}");

    // Hard memberships recover the three blobs exactly; the points
    // were laid down round-robin so the pattern has period 3.
    let membership = refresh_membership(&soft_assign(&pts, &ctr, tau));
    let consistent = (0..n).filter(|&i| membership[i] == membership[i % 3]).count();
    println!("points matching their blob's cluster: {consistent}/{n}");
}
