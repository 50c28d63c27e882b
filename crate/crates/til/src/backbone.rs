//! Matrix factorization backbone: embedding tables, the pairwise ranking
//! loss, and its analytic gradients.
//!
//! The loss for a triplet (u, i, j) is -log sigmoid(m) with margin
//! m = p_u.q_i - p_u.q_j, computed through a two-branch softplus so large
//! margins of either sign neither overflow nor lose the tail. The
//! branches share their log1p term, which makes the identity
//! loss(m) - loss(-m) == -m hold exactly in floating point.

use ndarray::{Array1, Array2, ArrayView1};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

use crate::sampler::Triplet;

/// User and item embedding matrices, one row per id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub p: Array2<f64>,
    pub q: Array2<f64>,
}

impl EmbeddingTable {
    /// Xavier-uniform initialization; each matrix draws from
    /// [-sqrt(6/(rows+cols)), sqrt(6/(rows+cols))], P first, row-major.
    pub fn xavier(n_users: usize, n_items: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        EmbeddingTable {
            p: xavier_uniform(n_users, dim, rng),
            q: xavier_uniform(n_items, dim, rng),
        }
    }

    pub fn zeros(n_users: usize, n_items: usize, dim: usize) -> Self {
        EmbeddingTable {
            p: Array2::zeros((n_users, dim)),
            q: Array2::zeros((n_items, dim)),
        }
    }

    pub fn n_users(&self) -> usize {
        self.p.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.q.nrows()
    }

    pub fn dim(&self) -> usize {
        self.p.ncols()
    }

    /// Predicted affinity p_u.q_i.
    pub fn score(&self, user: u32, item: u32) -> f64 {
        self.p.row(user as usize).dot(&self.q.row(item as usize))
    }

    /// score(u, pos) - score(u, neg).
    pub fn margin(&self, t: Triplet) -> f64 {
        let p_u = self.p.row(t.user as usize);
        p_u.dot(&self.q.row(t.pos as usize)) - p_u.dot(&self.q.row(t.neg as usize))
    }

    pub fn all_finite(&self) -> bool {
        self.p.iter().all(|v| v.is_finite()) && self.q.iter().all(|v| v.is_finite())
    }
}

/// rows x cols matrix drawn uniformly from [-l, l], l = sqrt(6/(rows+cols)).
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let mut a = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            a[[r, c]] = rng.random_range(-limit..limit);
        }
    }
    a
}

/// log(1 + exp(x)) without overflow for large |x|.
pub fn softplus(x: f64) -> f64 {
    if x >= 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function, exact at both saturated ends.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// -log sigmoid(margin), i.e. softplus(-margin).
pub fn bpr_loss_from_margin(margin: f64) -> f64 {
    softplus(-margin)
}

/// d/dmargin of the loss: -sigmoid(-margin).
pub fn bpr_slope_from_margin(margin: f64) -> f64 {
    -sigmoid(-margin)
}

/// Ranking loss of a single triplet.
pub fn bpr_loss(theta: &EmbeddingTable, t: Triplet) -> f64 {
    bpr_loss_from_margin(theta.margin(t))
}

/// Sparse per-row gradient buffers keyed by user and item ids.
#[derive(Debug, Clone, Default)]
pub struct GradAccumulator {
    pub users: HashMap<u32, Array1<f64>>,
    pub items: HashMap<u32, Array1<f64>>,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_user(&mut self, u: u32, scale: f64, v: ArrayView1<f64>) {
        let row = self
            .users
            .entry(u)
            .or_insert_with(|| Array1::zeros(v.len()));
        for (dst, &src) in row.iter_mut().zip(v.iter()) {
            *dst += scale * src;
        }
    }

    pub fn add_item(&mut self, i: u32, scale: f64, v: ArrayView1<f64>) {
        let row = self
            .items
            .entry(i)
            .or_insert_with(|| Array1::zeros(v.len()));
        for (dst, &src) in row.iter_mut().zip(v.iter()) {
            *dst += scale * src;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.users
            .values()
            .chain(self.items.values())
            .flat_map(|v| v.iter())
            .fold(0.0f64, |m, &x| m.max(x.abs()))
    }
}

/// Analytic gradient of bpr_loss(t) + l2 * sum of squared touched rows.
///
/// With g = -sigmoid(-margin): the user row gets g*(q_i - q_j), the
/// positive row g*p_u, the negative row -g*p_u, then every touched row r
/// additionally gets 2*l2*r. Touched rows are a set, so a degenerate
/// triplet with pos == neg regularizes that row once.
pub fn bpr_grad(theta: &EmbeddingTable, t: Triplet, l2: f64) -> GradAccumulator {
    let g = bpr_slope_from_margin(theta.margin(t));
    let p_u = theta.p.row(t.user as usize);
    let q_i = theta.q.row(t.pos as usize);
    let q_j = theta.q.row(t.neg as usize);
    let mut acc = GradAccumulator::new();
    let diff = &q_i.to_owned() - &q_j;
    acc.add_user(t.user, g, diff.view());
    acc.add_item(t.pos, g, p_u);
    acc.add_item(t.neg, -g, p_u);
    if l2 != 0.0 {
        let users: Vec<u32> = acc.users.keys().copied().collect();
        for u in users {
            acc.add_user(u, 2.0 * l2, theta.p.row(u as usize));
        }
        let items: Vec<u32> = acc.items.keys().copied().collect();
        for i in items {
            acc.add_item(i, 2.0 * l2, theta.q.row(i as usize));
        }
    }
    acc
}

/// Adds scale * (gradient of the plain ranking loss at t) into dense
/// buffers. Same arithmetic as [`bpr_grad`] minus the regularizer; the
/// batch trainer applies L2 once per touched row instead.
pub fn accumulate_bpr_grad(
    theta: &EmbeddingTable,
    t: Triplet,
    scale: f64,
    grad_p: &mut Array2<f64>,
    grad_q: &mut Array2<f64>,
) {
    let g = scale * bpr_slope_from_margin(theta.margin(t));
    let u = t.user as usize;
    let i = t.pos as usize;
    let j = t.neg as usize;
    let dim = theta.dim();
    // Slice per row; same elementwise arithmetic as the indexed form.
    let pu = theta.p.row(u);
    let pu = pu.to_slice().unwrap();
    let qi = theta.q.row(i);
    let qi = qi.to_slice().unwrap();
    let qj = theta.q.row(j);
    let qj = qj.to_slice().unwrap();
    {
        let mut gp = grad_p.row_mut(u);
        let gp = gp.as_slice_mut().unwrap();
        for k in 0..dim {
            gp[k] += g * (qi[k] - qj[k]);
        }
    }
    {
        let mut gqi = grad_q.row_mut(i);
        let gqi = gqi.as_slice_mut().unwrap();
        for k in 0..dim {
            gqi[k] += g * pu[k];
        }
    }
    {
        let mut gqj = grad_q.row_mut(j);
        let gqj = gqj.as_slice_mut().unwrap();
        for k in 0..dim {
            gqj[k] -= g * pu[k];
        }
    }
}
