//! Central finite-difference verification of every analytic gradient in
//! the crate, over batches of random small instances.
//!
//! Five blocks are covered: the pairwise ranking gradient, the weighted
//! batch gradient (weights held constant), the weight generator, the
//! clustering KL, and the bilevel outer gradient through the virtual
//! step. Each block reports its worst relative error; the outer block
//! gets a looser tolerance because the composite map stacks several
//! nonlinearities.

use std::time::Instant;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::backbone::{bpr_grad, bpr_loss, EmbeddingTable};
use crate::clustering::{cluster_grads, kl_loss, soft_assign, target};
use crate::interest::{state_ui_with, InterestState};
use crate::rng::stream_rng;
use crate::sampler::Triplet;
use crate::trainer::{
    add_l2_touched, bpr_batch_gradients, composite_outer_objective, outer_gradient,
};
use crate::weightgen::{weight_backward, weight_forward, weight_of, WeightGrad, WeightNetParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradBlock {
    RankingLoss,
    WeightedLoss,
    WeightNet,
    ClusterKl,
    OuterBilevel,
}

impl GradBlock {
    pub const ALL: [GradBlock; 5] = [
        GradBlock::RankingLoss,
        GradBlock::WeightedLoss,
        GradBlock::WeightNet,
        GradBlock::ClusterKl,
        GradBlock::OuterBilevel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradBlock::RankingLoss => "ranking_loss",
            GradBlock::WeightedLoss => "weighted_loss",
            GradBlock::WeightNet => "weight_net",
            GradBlock::ClusterKl => "cluster_kl",
            GradBlock::OuterBilevel => "outer_bilevel",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            GradBlock::OuterBilevel => 1e-3,
            _ => 1e-4,
        }
    }
}

impl std::fmt::Display for GradBlock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Random instances per block.
    pub instances: usize,
    /// Central-difference step.
    pub fd_step: f64,
    pub seed: u64,
    /// Test hook: perturb the analytic gradient of this block so the
    /// harness must flag it. Proves the checker can fail.
    pub corrupt: Option<GradBlock>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { instances: 100, fd_step: 1e-6, seed: 17, corrupt: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockResult {
    pub block: GradBlock,
    pub max_rel_err: f64,
    pub checks: usize,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockResult>,
    pub passed: bool,
    pub elapsed_secs: f64,
}

impl GradcheckReport {
    pub fn render_table(&self) -> String {
        let mut out = String::from("block           max_rel_err   tolerance  status\n");
        for b in &self.blocks {
            out.push_str(&format!(
                "{:<15} {:>11.3e} {:>11.0e}  {}\n",
                b.block.name(),
                b.max_rel_err,
                b.tolerance,
                if b.passed { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Relative error with an absolute floor so near-zero pairs compare at
/// the floor's scale instead of blowing up.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

struct Tracker {
    max_rel: f64,
    checks: usize,
    corrupt: bool,
}

impl Tracker {
    fn new(corrupt: bool) -> Self {
        Tracker { max_rel: 0.0, checks: 0, corrupt }
    }

    fn record(&mut self, mut analytic: f64, numeric: f64) {
        if self.corrupt && self.checks == 0 {
            analytic = analytic * 1.1 + 0.5;
        }
        let e = rel_err(analytic, numeric);
        if e > self.max_rel {
            self.max_rel = e;
        }
        self.checks += 1;
    }
}

fn random_theta(rng: &mut rand_chacha::ChaCha8Rng) -> EmbeddingTable {
    use rand::RngExt;
    let users = rng.random_range(2..4usize);
    let items = rng.random_range(4..7usize);
    let d = rng.random_range(2..4usize);
    EmbeddingTable::xavier(users, items, d, rng)
}

fn random_triplet(theta: &EmbeddingTable, rng: &mut rand_chacha::ChaCha8Rng) -> Triplet {
    use rand::RngExt;
    let user = rng.random_range(0..theta.n_users() as u32);
    let pos = rng.random_range(0..theta.n_items() as u32);
    let mut neg = rng.random_range(0..theta.n_items() as u32);
    while neg == pos {
        neg = rng.random_range(0..theta.n_items() as u32);
    }
    Triplet { user, pos, neg }
}

fn check_ranking_loss(opts: &GradcheckOptions, tracker: &mut Tracker) {
    use rand::RngExt;
    let h = opts.fd_step;
    for inst in 0..opts.instances {
        let mut rng = stream_rng(opts.seed, &[101, inst as u64]);
        let theta = random_theta(&mut rng);
        let t = random_triplet(&theta, &mut rng);
        let l2 = if rng.random::<bool>() { 1e-3 } else { 0.0 };
        let grads = bpr_grad(&theta, t, l2);
        let objective = |th: &EmbeddingTable| {
            let mut v = bpr_loss(th, t)
                + l2 * th.p.row(t.user as usize).iter().map(|x| x * x).sum::<f64>();
            for row in [t.pos, t.neg] {
                v += l2 * th.q.row(row as usize).iter().map(|x| x * x).sum::<f64>();
            }
            v
        };
        let d = theta.dim();
        for k in 0..d {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus.p[[t.user as usize, k]] += h;
            minus.p[[t.user as usize, k]] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            tracker.record(grads.users[&t.user][k], fd);
            for item in [t.pos, t.neg] {
                let mut plus = theta.clone();
                let mut minus = theta.clone();
                plus.q[[item as usize, k]] += h;
                minus.q[[item as usize, k]] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                tracker.record(grads.items[&item][k], fd);
            }
        }
    }
}

fn check_weighted_loss(opts: &GradcheckOptions, tracker: &mut Tracker) {
    use rand::RngExt;
    let h = opts.fd_step;
    for inst in 0..opts.instances {
        let mut rng = stream_rng(opts.seed, &[102, inst as u64]);
        let theta = random_theta(&mut rng);
        let batch: Vec<Triplet> = (0..3).map(|_| random_triplet(&theta, &mut rng)).collect();
        let weights: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
        let l2 = 1e-3;
        let (mut gp, mut gq) = bpr_batch_gradients(&theta, &batch, &weights);
        add_l2_touched(&theta, &batch, l2, &mut gp, &mut gq);
        let mut touched_u: Vec<usize> = batch.iter().map(|t| t.user as usize).collect();
        touched_u.sort_unstable();
        touched_u.dedup();
        let mut touched_i: Vec<usize> = batch
            .iter()
            .flat_map(|t| [t.pos as usize, t.neg as usize])
            .collect();
        touched_i.sort_unstable();
        touched_i.dedup();
        let objective = |th: &EmbeddingTable| {
            let mut v = batch
                .iter()
                .zip(weights.iter())
                .map(|(&t, &w)| w * bpr_loss(th, t))
                .sum::<f64>()
                / batch.len() as f64;
            for &u in &touched_u {
                v += l2 * th.p.row(u).iter().map(|x| x * x).sum::<f64>();
            }
            for &i in &touched_i {
                v += l2 * th.q.row(i).iter().map(|x| x * x).sum::<f64>();
            }
            v
        };
        for &u in &touched_u {
            for k in 0..theta.dim() {
                let mut plus = theta.clone();
                let mut minus = theta.clone();
                plus.p[[u, k]] += h;
                minus.p[[u, k]] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                tracker.record(gp[[u, k]], fd);
            }
        }
        for &i in &touched_i {
            for k in 0..theta.dim() {
                let mut plus = theta.clone();
                let mut minus = theta.clone();
                plus.q[[i, k]] += h;
                minus.q[[i, k]] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                tracker.record(gq[[i, k]], fd);
            }
        }
    }
}

fn check_weight_net(opts: &GradcheckOptions, tracker: &mut Tracker) {
    use rand::RngExt;
    let h = opts.fd_step;
    for inst in 0..opts.instances {
        let mut rng = stream_rng(opts.seed, &[103, inst as u64]);
        let d = rng.random_range(2..5usize);
        let net = WeightNetParams::xavier(d, &mut rng);
        let s = Array1::from_shape_fn(2 * d, |_| rng.random_range(-1.0..1.0));
        let cache = weight_forward(&net, s.view());
        let mut grad = WeightGrad::zeros(d);
        let ds = weight_backward(&net, s.view(), &cache, 1.0, &mut grad);

        for r in 0..d {
            for c in 0..2 * d {
                let mut plus = net.clone();
                let mut minus = net.clone();
                plus.w1[[r, c]] += h;
                minus.w1[[r, c]] -= h;
                let fd = (weight_of(&plus, s.view()) - weight_of(&minus, s.view())) / (2.0 * h);
                tracker.record(grad.w1[[r, c]], fd);
            }
            let mut plus = net.clone();
            let mut minus = net.clone();
            plus.b1[r] += h;
            minus.b1[r] -= h;
            let fd = (weight_of(&plus, s.view()) - weight_of(&minus, s.view())) / (2.0 * h);
            tracker.record(grad.b1[r], fd);
            let mut plus = net.clone();
            let mut minus = net.clone();
            plus.w2[r] += h;
            minus.w2[r] -= h;
            let fd = (weight_of(&plus, s.view()) - weight_of(&minus, s.view())) / (2.0 * h);
            tracker.record(grad.w2[r], fd);
        }
        let mut plus = net.clone();
        let mut minus = net.clone();
        plus.b2 += h;
        minus.b2 -= h;
        let fd = (weight_of(&plus, s.view()) - weight_of(&minus, s.view())) / (2.0 * h);
        tracker.record(grad.b2, fd);
        for idx in 0..2 * d {
            let mut sp = s.clone();
            let mut sm = s.clone();
            sp[idx] += h;
            sm[idx] -= h;
            let fd = (weight_of(&net, sp.view()) - weight_of(&net, sm.view())) / (2.0 * h);
            tracker.record(ds[idx], fd);
        }
    }
}

fn check_cluster_kl(opts: &GradcheckOptions, tracker: &mut Tracker) {
    use rand::RngExt;
    let h = opts.fd_step;
    for inst in 0..opts.instances {
        let mut rng = stream_rng(opts.seed, &[104, inst as u64]);
        let n = rng.random_range(4..7usize);
        let k = rng.random_range(2..4usize);
        let d = rng.random_range(2..4usize);
        let tau = [0.5, 1.0, 2.0][rng.random_range(0..3usize)];
        let items = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        let centers = Array2::from_shape_fn((k, d), |_| rng.random_range(-1.0..1.0));
        let frozen_t = target(&soft_assign(&items, &centers, tau));
        let grads = cluster_grads(&items, &centers, &frozen_t, tau);
        let objective = |it: &Array2<f64>, ce: &Array2<f64>| {
            kl_loss(&frozen_t, &soft_assign(it, ce, tau))
        };
        for i in 0..n {
            for x in 0..d {
                let mut plus = items.clone();
                let mut minus = items.clone();
                plus[[i, x]] += h;
                minus[[i, x]] -= h;
                let fd = (objective(&plus, &centers) - objective(&minus, &centers)) / (2.0 * h);
                tracker.record(grads.items[[i, x]], fd);
            }
        }
        for c in 0..k {
            for x in 0..d {
                let mut plus = centers.clone();
                let mut minus = centers.clone();
                plus[[c, x]] += h;
                minus[[c, x]] -= h;
                let fd = (objective(&items, &plus) - objective(&items, &minus)) / (2.0 * h);
                tracker.record(grads.centers[[c, x]], fd);
            }
        }
    }
}

fn check_outer_bilevel(opts: &GradcheckOptions, tracker: &mut Tracker) {
    use rand::RngExt;
    let h = 1e-5;
    for inst in 0..opts.instances {
        let mut rng = stream_rng(opts.seed, &[105, inst as u64]);
        let theta = {
            let d = 2;
            EmbeddingTable::xavier(2, 3, d, &mut rng)
        };
        let d = theta.dim();
        let net = WeightNetParams::xavier(d, &mut rng);
        let inner: Vec<Triplet> = (0..2).map(|_| random_triplet(&theta, &mut rng)).collect();
        let outer: Vec<Triplet> = (0..2).map(|_| random_triplet(&theta, &mut rng)).collect();
        let eta = Array2::from_shape_fn((theta.n_users(), d), |_| rng.random_range(-0.5..0.5));
        let states: Vec<InterestState> = inner
            .iter()
            .map(|&t| state_ui_with(&theta, eta.row(t.user as usize), t))
            .collect();
        let caches: Vec<_> = states.iter().map(|s| weight_forward(&net, s.s.view())).collect();
        let lr = rng.random_range(0.01..0.1);
        let l2 = if rng.random::<bool>() { 1e-3 } else { 0.0 };
        let (grad, _) =
            outer_gradient(&theta, &net, &states, &caches, &inner, &outer, lr, l2, None);
        let f = |n: &WeightNetParams| {
            composite_outer_objective(&theta, n, &states, &inner, &outer, lr, l2, None)
        };
        for r in 0..d {
            for c in 0..2 * d {
                let mut plus = net.clone();
                let mut minus = net.clone();
                plus.w1[[r, c]] += h;
                minus.w1[[r, c]] -= h;
                tracker.record(grad.w1[[r, c]], (f(&plus) - f(&minus)) / (2.0 * h));
            }
            let mut plus = net.clone();
            let mut minus = net.clone();
            plus.b1[r] += h;
            minus.b1[r] -= h;
            tracker.record(grad.b1[r], (f(&plus) - f(&minus)) / (2.0 * h));
            let mut plus = net.clone();
            let mut minus = net.clone();
            plus.w2[r] += h;
            minus.w2[r] -= h;
            tracker.record(grad.w2[r], (f(&plus) - f(&minus)) / (2.0 * h));
        }
        let mut plus = net.clone();
        let mut minus = net.clone();
        plus.b2 += h;
        minus.b2 -= h;
        tracker.record(grad.b2, (f(&plus) - f(&minus)) / (2.0 * h));
    }
}

/// Runs all five blocks and reports per-block worst-case errors.
pub fn run(opts: &GradcheckOptions) -> GradcheckReport {
    let start = Instant::now();
    let mut blocks = Vec::new();
    for block in GradBlock::ALL {
        let mut tracker = Tracker::new(opts.corrupt == Some(block));
        match block {
            GradBlock::RankingLoss => check_ranking_loss(opts, &mut tracker),
            GradBlock::WeightedLoss => check_weighted_loss(opts, &mut tracker),
            GradBlock::WeightNet => check_weight_net(opts, &mut tracker),
            GradBlock::ClusterKl => check_cluster_kl(opts, &mut tracker),
            GradBlock::OuterBilevel => check_outer_bilevel(opts, &mut tracker),
        }
        let tolerance = block.tolerance();
        blocks.push(BlockResult {
            block,
            max_rel_err: tracker.max_rel,
            checks: tracker.checks,
            tolerance,
            passed: tracker.max_rel < tolerance,
        });
    }
    let passed = blocks.iter().all(|b| b.passed);
    GradcheckReport { blocks, passed, elapsed_secs: start.elapsed().as_secs_f64() }
}
