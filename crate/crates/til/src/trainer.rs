//! The alternating bilevel training loop.
//!
//! Each optimization step works on one shuffled batch of triplets:
//!
//! 1. Proximity states and triplet weights are computed under the
//!    current generator parameters (lambda).
//! 2. Outer step (weighted strategies only): a virtual plain-SGD step on
//!    the weighted inner objective produces theta~; the unweighted
//!    ranking loss of a freshly sampled batch is differentiated at
//!    theta~ and chained back through the virtual step into lambda,
//!    which takes one Adam step. The lambda-dependence of theta~ lives
//!    entirely in the per-triplet weight factors, so the chain rule
//!    contracts the outer gradient against each triplet's ranking
//!    gradient; this is exact for the one-step proxy.
//! 3. Inner step: weights are re-evaluated under the updated lambda and
//!    the embeddings (plus cluster centers, when learned) take one dense
//!    Adam step on the weighted loss, L2 on touched rows, and the scaled
//!    clustering KL when active.
//!
//! The multi-interest schedule first runs warmup epochs with
//! uni-interest states, then initializes centers with k-means and
//! switches to multi-interest states with the KL term, refreshing hard
//! memberships and the self-training target every `refresh_every` steps.

use ndarray::{Array2, Ix1, Ix2, Zip};
use serde::{Deserialize, Serialize};

use crate::backbone::{
    accumulate_bpr_grad, bpr_loss, bpr_slope_from_margin, EmbeddingTable,
};
use crate::clustering::{cluster_grads_with_soft, kl_loss, kmeans, soft_assign, ClusterState};
use crate::data::InteractionStore;
use crate::error::{Result, TilError};
use crate::eval::{evaluate, EvalOptions, EvalSplit};
use crate::interest::{interest_table, states_for_batch, InterestState};
use crate::rng::{stream, stream_rng};
use crate::sampler::{SamplerKind, Triplet, TripletSampler};
use crate::weightgen::{weight_forward, ForwardCache, WeightGrad, WeightNetParams};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Epsilon for the generator's Adam. Gradients through a saturated
/// sigmoid scale with w(1 - w), which can sink to 1e-5 and below; the
/// epsilon must sit under that scale times a typical raw gradient or
/// the generator stops adapting exactly when retuning matters most.
pub const GEN_ADAM_EPS: f64 = 1e-12;

/// Training strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Plain unweighted pairwise ranking.
    #[default]
    BaselineBpr,
    /// Weighted, uni-interest states.
    TilUi,
    /// Weighted, multi-interest states with learned cluster centers.
    TilMi,
    /// Like TilMi but centers come from k-means at every refresh
    /// instead of being learned.
    TilMik,
}

impl Strategy {
    pub fn weighted(self) -> bool {
        self != Strategy::BaselineBpr
    }

    pub fn multi_interest(self) -> bool {
        matches!(self, Strategy::TilMi | Strategy::TilMik)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::BaselineBpr => "baseline_bpr",
            Strategy::TilUi => "til_ui",
            Strategy::TilMi => "til_mi",
            Strategy::TilMik => "til_mik",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = TilError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline_bpr" => Ok(Strategy::BaselineBpr),
            "til_ui" => Ok(Strategy::TilUi),
            "til_mi" => Ok(Strategy::TilMi),
            "til_mik" => Ok(Strategy::TilMik),
            other => Err(TilError::Config(format!(
                "unknown strategy `{other}` (expected baseline_bpr, til_ui, til_mi, til_mik)"
            ))),
        }
    }
}

/// How the generator gradient is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OuterMode {
    /// Analytic chain rule through the virtual step.
    #[default]
    SecondOrder,
    /// Per-block random directional finite differences on the composite
    /// objective; diagnostic fallback, noisy but unbiased.
    FirstOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dim: usize,
    pub lr_inner: f64,
    pub lr_outer: f64,
    pub l2: f64,
    /// Scale on the cluster-center terms inside multi-interest states.
    pub alpha_scale: f64,
    /// Scale on the clustering KL inside the inner objective.
    pub gamma: f64,
    /// Student's-t degrees of freedom for soft assignment.
    pub tau: f64,
    pub n_clusters: usize,
    pub batch: usize,
    /// Outer-objective batch size; `None` matches `batch`. The outer
    /// gradient of one triplet dots its inner gradient against the
    /// per-row mean outer gradient, so a larger outer batch denoises
    /// that signal at no cost to the inner schedule.
    pub outer_batch: Option<usize>,
    pub max_epochs: usize,
    /// Epochs run with uni-interest states before clustering activates
    /// (multi-interest strategies only).
    pub pretrain_epochs: usize,
    /// Steps between membership/target refreshes once clustering is on.
    pub refresh_every: usize,
    /// Early-stopping patience, in epochs without validation improvement.
    pub patience: usize,
    pub strategy: Strategy,
    pub outer_mode: OuterMode,
    pub sampler: SamplerKind,
    pub seed: u64,
    /// Outer step taken once per this many inner steps.
    pub inner_steps_per_outer: usize,
    /// Regression mode: optimize the weighted loss jointly over
    /// embeddings and generator with a single optimizer (this collapses
    /// the weights; kept for the motivating experiment).
    pub single_level: bool,
    /// Never update the generator.
    pub freeze_generator: bool,
    /// Initialize the generator to emit weight exactly 1.0.
    pub saturate_generator: bool,
    /// Let inner gradients flow through the proximity states into the
    /// embeddings instead of treating weights as constants. The outer
    /// chain rule still treats states as constants.
    pub backprop_states: bool,
    /// Cutoff for the early-stopping validation metric.
    pub eval_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 64,
            lr_inner: 1e-3,
            lr_outer: 1e-3,
            l2: 1e-5,
            alpha_scale: 1.0,
            gamma: 1e-2,
            tau: 1.0,
            n_clusters: 60,
            batch: 5000,
            outer_batch: None,
            max_epochs: 3000,
            pretrain_epochs: 500,
            refresh_every: 10,
            patience: 100,
            strategy: Strategy::BaselineBpr,
            outer_mode: OuterMode::SecondOrder,
            sampler: SamplerKind::Uniform,
            seed: 7,
            inner_steps_per_outer: 1,
            single_level: false,
            freeze_generator: false,
            saturate_generator: false,
            backprop_states: false,
            eval_k: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_inner", self.lr_inner),
            ("lr_outer", self.lr_outer),
            ("tau", self.tau),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TilError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("l2", self.l2),
            ("alpha_scale", self.alpha_scale),
            ("gamma", self.gamma),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TilError::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        let counts = [
            ("dim", self.dim),
            ("n_clusters", self.n_clusters),
            ("batch", self.batch),
            ("max_epochs", self.max_epochs),
            ("refresh_every", self.refresh_every),
            ("patience", self.patience),
            ("inner_steps_per_outer", self.inner_steps_per_outer),
            ("eval_k", self.eval_k),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(TilError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.outer_batch == Some(0) {
            return Err(TilError::Config("outer_batch must be at least 1".into()));
        }
        if self.single_level && !self.strategy.weighted() {
            return Err(TilError::Config(
                "single_level requires a weighted strategy".into(),
            ));
        }
        Ok(())
    }
}

/// Adam with standard bias correction over one dense parameter block.
#[derive(Debug, Clone)]
pub struct AdamState<D: ndarray::Dimension> {
    m: ndarray::Array<f64, D>,
    v: ndarray::Array<f64, D>,
    pub step: u64,
}

impl<D: ndarray::Dimension> AdamState<D> {
    pub fn like(param: &ndarray::Array<f64, D>) -> Self {
        AdamState {
            m: ndarray::Array::zeros(param.raw_dim()),
            v: ndarray::Array::zeros(param.raw_dim()),
            step: 0,
        }
    }

    pub fn update(&mut self, param: &mut ndarray::Array<f64, D>, grad: &ndarray::Array<f64, D>, lr: f64) {
        self.update_with_eps(param, grad, lr, ADAM_EPS);
    }

    pub fn update_with_eps(
        &mut self,
        param: &mut ndarray::Array<f64, D>,
        grad: &ndarray::Array<f64, D>,
        lr: f64,
        eps: f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        Zip::from(param)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
    }
}

/// Adam over a single scalar parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamScalar {
    m: f64,
    v: f64,
    pub step: u64,
}

impl AdamScalar {
    pub fn update(&mut self, param: &mut f64, g: f64, lr: f64) {
        self.update_with_eps(param, g, lr, ADAM_EPS);
    }

    pub fn update_with_eps(&mut self, param: &mut f64, g: f64, lr: f64, eps: f64) {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        self.m = BETA1 * self.m + (1.0 - BETA1) * g;
        self.v = BETA2 * self.v + (1.0 - BETA2) * g * g;
        *param -= lr * (self.m / bc1) / ((self.v / bc2).sqrt() + eps);
    }
}

/// Adam states for the four generator blocks.
#[derive(Debug, Clone)]
struct NetAdam {
    w1: AdamState<Ix2>,
    b1: AdamState<Ix1>,
    w2: AdamState<Ix1>,
    b2: AdamScalar,
}

impl NetAdam {
    fn new(p: &WeightNetParams) -> Self {
        NetAdam {
            w1: AdamState::like(&p.w1),
            b1: AdamState::like(&p.b1),
            w2: AdamState::like(&p.w2),
            b2: AdamScalar::default(),
        }
    }

    fn update(&mut self, p: &mut WeightNetParams, g: &WeightGrad, lr: f64) {
        self.w1.update_with_eps(&mut p.w1, &g.w1, lr, GEN_ADAM_EPS);
        self.b1.update_with_eps(&mut p.b1, &g.b1, lr, GEN_ADAM_EPS);
        self.w2.update_with_eps(&mut p.w2, &g.w2, lr, GEN_ADAM_EPS);
        self.b2.update_with_eps(&mut p.b2, g.b2, lr, GEN_ADAM_EPS);
    }
}

/// A trained (or training) model: embeddings, optional generator,
/// optional cluster state.
#[derive(Debug, Clone, PartialEq)]
pub struct TilModel {
    pub theta: EmbeddingTable,
    pub weight_net: Option<WeightNetParams>,
    pub cluster: Option<ClusterState>,
    pub strategy: Strategy,
    pub alpha_scale: f64,
}

impl TilModel {
    /// Generator input states for a batch under this model's strategy
    /// (multi-interest iff cluster state is present).
    pub fn states(
        &self,
        store: &InteractionStore,
        batch: &[Triplet],
    ) -> Result<Vec<InterestState>> {
        let eta = interest_table(&self.theta, store);
        states_for_batch(&self.theta, &eta, self.cluster.as_ref(), self.alpha_scale, batch)
    }

    /// The learned importance weight of one triplet, or 1.0 for the
    /// unweighted baseline.
    pub fn triplet_weight(&self, store: &InteractionStore, t: Triplet) -> Result<f64> {
        match &self.weight_net {
            None => Ok(1.0),
            Some(net) => {
                let states = self.states(store, std::slice::from_ref(&t))?;
                Ok(weight_forward(net, states[0].s.view()).weight)
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.theta.all_finite()
            && self.weight_net.as_ref().is_none_or(|n| n.all_finite())
            && self
                .cluster
                .as_ref()
                .is_none_or(|c| c.centers.iter().all(|v| v.is_finite()))
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean weighted ranking loss over the epoch's batches.
    pub inner_loss: f64,
    /// Mean unweighted outer loss at the virtual point (NaN when no
    /// outer step runs).
    pub outer_loss: f64,
    /// Clustering KL (NaN before clustering activates).
    pub kl_loss: f64,
    /// Mean generated weight over the epoch's triplets (NaN for the
    /// baseline).
    pub mean_weight: f64,
    pub val_recall: f64,
    pub val_ndcg: f64,
}

/// Renders history rows as CSV with the standard column layout.
pub fn history_to_csv(records: &[EpochRecord], eval_k: usize) -> String {
    let mut out = format!(
        "epoch,inner_loss,outer_loss,kl_loss,mean_weight,val_recall@{eval_k},val_ndcg@{eval_k}\n"
    );
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.inner_loss, r.outer_loss, r.kl_loss, r.mean_weight, r.val_recall, r.val_ndcg
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Ran through max_epochs.
    Completed,
    /// Validation metric stalled for `patience` epochs.
    EarlyStopped,
    /// A loss or parameter went non-finite; best snapshot returned.
    Diverged,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation snapshot (final snapshot when no validation
    /// users exist).
    pub model: TilModel,
    pub history: Vec<EpochRecord>,
    pub stop: StopReason,
    pub best_epoch: usize,
    pub final_epoch: usize,
}

/// Observer events for checkpointing and trajectory tests.
pub enum TrainEvent<'a> {
    /// After each optimization step, with the updated model.
    Step { step: u64, epoch: usize, model: &'a TilModel },
    /// After each epoch's evaluation.
    EpochEnd { epoch: usize, model: &'a TilModel, record: &'a EpochRecord },
}

/// Mean of w_t * L_t over a batch; weights come from the generator
/// applied to the provided states.
pub fn weighted_loss(
    theta: &EmbeddingTable,
    net: &WeightNetParams,
    states: &[InterestState],
    batch: &[Triplet],
) -> f64 {
    assert_eq!(states.len(), batch.len());
    let mut total = 0.0;
    for (s, &t) in states.iter().zip(batch.iter()) {
        total += weight_forward(net, s.s.view()).weight * bpr_loss(theta, t);
    }
    total / batch.len().max(1) as f64
}

/// Dense gradients of (1/B) sum_t scale_t * L_t over the batch.
pub fn bpr_batch_gradients(
    theta: &EmbeddingTable,
    batch: &[Triplet],
    weights: &[f64],
) -> (Array2<f64>, Array2<f64>) {
    assert_eq!(weights.len(), batch.len());
    let mut gp = Array2::zeros(theta.p.raw_dim());
    let mut gq = Array2::zeros(theta.q.raw_dim());
    let inv = 1.0 / batch.len().max(1) as f64;
    for (&t, &w) in batch.iter().zip(weights.iter()) {
        accumulate_bpr_grad(theta, t, w * inv, &mut gp, &mut gq);
    }
    (gp, gq)
}

/// Adds 2*l2*row for every row touched by the batch (a set, not per
/// occurrence).
pub fn add_l2_touched(
    theta: &EmbeddingTable,
    batch: &[Triplet],
    l2: f64,
    gp: &mut Array2<f64>,
    gq: &mut Array2<f64>,
) {
    if l2 == 0.0 {
        return;
    }
    let mut users: Vec<usize> = batch.iter().map(|t| t.user as usize).collect();
    users.sort_unstable();
    users.dedup();
    let mut items: Vec<usize> = batch
        .iter()
        .flat_map(|t| [t.pos as usize, t.neg as usize])
        .collect();
    items.sort_unstable();
    items.dedup();
    for u in users {
        let mut row = gp.row_mut(u);
        row.scaled_add(2.0 * l2, &theta.p.row(u));
    }
    for i in items {
        let mut row = gq.row_mut(i);
        row.scaled_add(2.0 * l2, &theta.q.row(i));
    }
}

/// theta~ = theta - lr * grad: the plain-SGD proxy for one inner step.
pub fn virtual_step(
    theta: &EmbeddingTable,
    grad_p: &Array2<f64>,
    grad_q: &Array2<f64>,
    lr: f64,
) -> EmbeddingTable {
    let mut out = theta.clone();
    out.p.scaled_add(-lr, grad_p);
    out.q.scaled_add(-lr, grad_q);
    out
}

/// Unweighted mean ranking loss over `outer_batch` evaluated after a
/// virtual step driven by weights `net(states)` on `inner_batch`. This
/// is the scalar the outer gradient differentiates; keeping it as one
/// function lets tests compare the analytic chain rule against central
/// finite differences of exactly this map.
#[allow(clippy::too_many_arguments)]
pub fn composite_outer_objective(
    theta: &EmbeddingTable,
    net: &WeightNetParams,
    states: &[InterestState],
    inner_batch: &[Triplet],
    outer_batch: &[Triplet],
    lr_inner: f64,
    l2: f64,
    extra_grad_q: Option<&Array2<f64>>,
) -> f64 {
    let weights: Vec<f64> = states
        .iter()
        .map(|s| weight_forward(net, s.s.view()).weight)
        .collect();
    let (mut gp, mut gq) = bpr_batch_gradients(theta, inner_batch, &weights);
    add_l2_touched(theta, inner_batch, l2, &mut gp, &mut gq);
    if let Some(extra) = extra_grad_q {
        gq += extra;
    }
    let vtheta = virtual_step(theta, &gp, &gq, lr_inner);
    outer_batch.iter().map(|&t| bpr_loss(&vtheta, t)).sum::<f64>() / outer_batch.len().max(1) as f64
}

/// Analytic gradient of [`composite_outer_objective`] with respect to
/// the generator parameters, plus the objective value.
///
/// The only lambda-dependence is through the weights w_t, so
/// d theta~ / d w_t = -(lr/B) grad L_t, and the chain rule contracts
/// the outer gradient G at theta~ against each triplet's ranking
/// gradient at theta:
///   a_t = -(lr/B) g_t [ (q_i - q_j).G_p[u] + p_u.(G_q[i] - G_q[j]) ]
/// then grad_lambda = sum_t a_t dw_t/dlambda.
#[allow(clippy::too_many_arguments)]
pub fn outer_gradient(
    theta: &EmbeddingTable,
    net: &WeightNetParams,
    states: &[InterestState],
    caches: &[ForwardCache],
    inner_batch: &[Triplet],
    outer_batch: &[Triplet],
    lr_inner: f64,
    l2: f64,
    extra_grad_q: Option<&Array2<f64>>,
) -> (WeightGrad, f64) {
    let weights: Vec<f64> = caches.iter().map(|c| c.weight).collect();
    let (mut gp, mut gq) = bpr_batch_gradients(theta, inner_batch, &weights);
    add_l2_touched(theta, inner_batch, l2, &mut gp, &mut gq);
    if let Some(extra) = extra_grad_q {
        gq += extra;
    }
    let vtheta = virtual_step(theta, &gp, &gq, lr_inner);

    let bo = outer_batch.len().max(1) as f64;
    let mut big_gp = Array2::zeros(theta.p.raw_dim());
    let mut big_gq = Array2::zeros(theta.q.raw_dim());
    let mut outer_loss = 0.0;
    for &t in outer_batch {
        outer_loss += bpr_loss(&vtheta, t);
        accumulate_bpr_grad(&vtheta, t, 1.0 / bo, &mut big_gp, &mut big_gq);
    }
    outer_loss /= bo;

    let bi = inner_batch.len().max(1) as f64;
    let mut grad = WeightGrad::zeros(net.dim());
    for (idx, &t) in inner_batch.iter().enumerate() {
        let g_t = bpr_slope_from_margin(theta.margin(t));
        let (u, i, j) = (t.user as usize, t.pos as usize, t.neg as usize);
        let (qi, qj, pu) = (theta.q.row(i), theta.q.row(j), theta.p.row(u));
        let dot = qi.dot(&big_gp.row(u)) - qj.dot(&big_gp.row(u))
            + pu.dot(&big_gq.row(i)) - pu.dot(&big_gq.row(j));
        let a_t = -(lr_inner / bi) * g_t * dot;
        if a_t != 0.0 {
            crate::weightgen::weight_backward(net, states[idx].s.view(), &caches[idx], a_t, &mut grad);
        }
    }
    (grad, outer_loss)
}

/// Rademacher directional finite-difference estimate of the outer
/// gradient, block by block. Noisy but unbiased; diagnostic use.
#[allow(clippy::too_many_arguments)]
pub fn first_order_outer_gradient(
    theta: &EmbeddingTable,
    net: &WeightNetParams,
    states: &[InterestState],
    inner_batch: &[Triplet],
    outer_batch: &[Triplet],
    lr_inner: f64,
    l2: f64,
    extra_grad_q: Option<&Array2<f64>>,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (WeightGrad, f64) {
    use rand::RngExt;
    let eps = 1e-4;
    let objective = |n: &WeightNetParams| {
        composite_outer_objective(
            theta, n, states, inner_batch, outer_batch, lr_inner, l2, extra_grad_q,
        )
    };
    let base = objective(net);
    let mut grad = WeightGrad::zeros(net.dim());
    let mut rademacher = || if rng.random::<bool>() { 1.0 } else { -1.0 };

    let dir_w1 = net.w1.map(|_| rademacher());
    let mut plus = net.clone();
    let mut minus = net.clone();
    plus.w1.scaled_add(eps, &dir_w1);
    minus.w1.scaled_add(-eps, &dir_w1);
    let slope = (objective(&plus) - objective(&minus)) / (2.0 * eps);
    grad.w1 = dir_w1.mapv(|d| slope * d);

    let dir_b1 = net.b1.map(|_| rademacher());
    let mut plus = net.clone();
    let mut minus = net.clone();
    plus.b1.scaled_add(eps, &dir_b1);
    minus.b1.scaled_add(-eps, &dir_b1);
    let slope = (objective(&plus) - objective(&minus)) / (2.0 * eps);
    grad.b1 = dir_b1.mapv(|d| slope * d);

    let dir_w2 = net.w2.map(|_| rademacher());
    let mut plus = net.clone();
    let mut minus = net.clone();
    plus.w2.scaled_add(eps, &dir_w2);
    minus.w2.scaled_add(-eps, &dir_w2);
    let slope = (objective(&plus) - objective(&minus)) / (2.0 * eps);
    grad.w2 = dir_w2.mapv(|d| slope * d);

    let mut plus = net.clone();
    let mut minus = net.clone();
    plus.b2 += eps;
    minus.b2 -= eps;
    grad.b2 = (objective(&plus) - objective(&minus)) / (2.0 * eps);

    (grad, base)
}

struct Trainer<'a> {
    store: &'a InteractionStore,
    cfg: &'a TrainConfig,
    model: TilModel,
    adam_p: AdamState<Ix2>,
    adam_q: AdamState<Ix2>,
    adam_phi: Option<AdamState<Ix2>>,
    adam_net: Option<NetAdam>,
    step: u64,
}

struct BatchOutcome {
    weighted_loss: f64,
    outer_loss: f64,
    kl: f64,
    mean_weight: f64,
}

impl<'a> Trainer<'a> {
    fn new(store: &'a InteractionStore, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let theta = EmbeddingTable::xavier(
            store.n_users(),
            store.n_items(),
            cfg.dim,
            &mut stream_rng(cfg.seed, &[stream::INIT_EMBEDDINGS]),
        );
        let weight_net = if cfg.strategy.weighted() {
            Some(if cfg.saturate_generator {
                WeightNetParams::saturated_one(cfg.dim)
            } else {
                WeightNetParams::xavier(cfg.dim, &mut stream_rng(cfg.seed, &[stream::INIT_WEIGHT_NET]))
            })
        } else {
            None
        };
        let adam_p = AdamState::like(&theta.p);
        let adam_q = AdamState::like(&theta.q);
        let adam_net = weight_net.as_ref().map(NetAdam::new);
        Ok(Trainer {
            store,
            cfg,
            model: TilModel {
                theta,
                weight_net,
                cluster: None,
                strategy: cfg.strategy,
                alpha_scale: cfg.alpha_scale,
            },
            adam_p,
            adam_q,
            adam_phi: None,
            adam_net,
            step: 0,
        })
    }

    fn clustering_active(&self, epoch: usize) -> bool {
        self.cfg.strategy.multi_interest() && epoch > self.cfg.pretrain_epochs
    }

    fn ensure_clusters(&mut self) -> Result<()> {
        if self.model.cluster.is_some() {
            return Ok(());
        }
        let k = self.cfg.n_clusters.min(self.store.n_items());
        let state = ClusterState::init_kmeans(
            &self.model.theta.q,
            k,
            self.cfg.tau,
            &mut stream_rng(self.cfg.seed, &[stream::KMEANS, 0]),
        )?;
        if self.cfg.strategy == Strategy::TilMi {
            self.adam_phi = Some(AdamState::like(&state.centers));
        }
        self.model.cluster = Some(state);
        Ok(())
    }

    fn refresh_clusters(&mut self) -> Result<()> {
        if self.cfg.strategy == Strategy::TilMik {
            // Centers are re-estimated, never learned.
            let cluster = self.model.cluster.as_mut().expect("cluster initialized");
            let k = cluster.k();
            let (centers, _) = kmeans(
                &self.model.theta.q,
                k,
                &mut stream_rng(self.cfg.seed, &[stream::KMEANS, self.step]),
            )?;
            cluster.centers = centers;
        }
        let cluster = self.model.cluster.as_mut().expect("cluster initialized");
        cluster.refresh(&self.model.theta.q);
        Ok(())
    }

    /// Extra gradient through the states when `backprop_states` is on:
    /// adds (1/B) sum_t upstream_t * dw_t/dtheta, where states expand as
    /// s_pos = q_i (p_u + eta_u) + alpha mu_i (p_u + eta_u) and eta_u
    /// fans out over the user's training positives.
    #[allow(clippy::too_many_arguments)]
    fn add_state_gradients(
        &self,
        batch: &[Triplet],
        states: &[InterestState],
        caches: &[ForwardCache],
        eta: &Array2<f64>,
        upstream: &[f64],
        gp: &mut Array2<f64>,
        gq: &mut Array2<f64>,
        gphi: Option<&mut Array2<f64>>,
    ) {
        let net = self.model.weight_net.as_ref().expect("weighted strategy");
        let theta = &self.model.theta;
        let d = theta.dim();
        let alpha = self.cfg.alpha_scale;
        let cluster = self.model.cluster.as_ref();
        let mut scratch = WeightGrad::zeros(net.dim());
        let mut gphi = gphi;
        for (idx, &t) in batch.iter().enumerate() {
            if upstream[idx] == 0.0 {
                continue;
            }
            let ds = crate::weightgen::weight_backward(
                net,
                states[idx].s.view(),
                &caches[idx],
                upstream[idx],
                &mut scratch,
            );
            let (u, i, j) = (t.user as usize, t.pos as usize, t.neg as usize);
            let (mu_i, mu_j) = match cluster {
                Some(cs) => (
                    Some(cs.centers.row(cs.membership[i])),
                    Some(cs.centers.row(cs.membership[j])),
                ),
                None => (None, None),
            };
            let positives = self.store.train_pos(t.user);
            let fan = 1.0 / positives.len() as f64;
            for k in 0..d {
                let pe = theta.p[[u, k]] + eta[[u, k]];
                let qi_mu = theta.q[[i, k]] + alpha * mu_i.map_or(0.0, |m| m[k]);
                let qj_mu = theta.q[[j, k]] + alpha * mu_j.map_or(0.0, |m| m[k]);
                let dpos = ds[k];
                let dneg = ds[d + k];
                gq[[i, k]] += dpos * pe;
                gq[[j, k]] += dneg * pe;
                let through_user = dpos * qi_mu + dneg * qj_mu;
                gp[[u, k]] += through_user;
                for &v in positives {
                    gq[[v as usize, k]] += through_user * fan;
                }
                if let (Some(gphi), Some(cs)) = (gphi.as_deref_mut(), cluster) {
                    gphi[[cs.membership[i], k]] += alpha * dpos * pe;
                    gphi[[cs.membership[j], k]] += alpha * dneg * pe;
                }
            }
        }
    }

    /// Runs one batch: optional outer step, then the inner step.
    fn run_batch(&mut self, epoch: usize, batch_idx: usize, batch: &[Triplet]) -> Result<BatchOutcome> {
        let cfg = self.cfg;
        let mi_active = self.clustering_active(epoch) && self.model.cluster.is_some();
        let eta = interest_table(&self.model.theta, self.store);
        let cluster_for_states = if mi_active { self.model.cluster.as_ref() } else { None };

        // Clustering terms are lambda-independent; compute once.
        let mut kl = f64::NAN;
        let mut kl_item_grads: Option<Array2<f64>> = None;
        let mut kl_center_grads: Option<Array2<f64>> = None;
        if mi_active && cfg.gamma > 0.0 {
            let cluster = self.model.cluster.as_ref().unwrap();
            let soft = soft_assign(&self.model.theta.q, &cluster.centers, cfg.tau);
            kl = kl_loss(&cluster.target, &soft);
            if !kl.is_finite() {
                return Err(TilError::NonFinite("clustering KL".into()));
            }
            let grads = cluster_grads_with_soft(
                &self.model.theta.q,
                &cluster.centers,
                &cluster.target,
                &soft,
                cfg.tau,
            );
            kl_item_grads = Some(grads.items.mapv(|x| x * cfg.gamma));
            kl_center_grads = Some(grads.centers.mapv(|x| x * cfg.gamma));
        }

        let weighted = cfg.strategy.weighted();
        let mut states: Vec<InterestState> = Vec::new();
        let mut caches: Vec<ForwardCache> = Vec::new();
        if weighted {
            states = states_for_batch(
                &self.model.theta,
                &eta,
                cluster_for_states,
                cfg.alpha_scale,
                batch,
            )?;
            let net = self.model.weight_net.as_ref().unwrap();
            caches = states.iter().map(|s| weight_forward(net, s.s.view())).collect();
        }

        let mut outer_loss = f64::NAN;
        let take_outer = weighted
            && !cfg.freeze_generator
            && !cfg.single_level
            && (self.step - 1) % cfg.inner_steps_per_outer as u64 == 0;
        if take_outer {
            let mut rng = stream_rng(
                cfg.seed,
                &[stream::SAMPLE_OUTER, epoch as u64, batch_idx as u64],
            );
            let sampler = TripletSampler::new(self.store, cfg.sampler);
            let n_outer = cfg.outer_batch.unwrap_or(batch.len());
            let outer_batch = sampler.sample_batch(n_outer, &mut rng);
            let net = self.model.weight_net.as_ref().unwrap();
            let (grad, loss) = match cfg.outer_mode {
                OuterMode::SecondOrder => outer_gradient(
                    &self.model.theta,
                    net,
                    &states,
                    &caches,
                    batch,
                    &outer_batch,
                    cfg.lr_inner,
                    cfg.l2,
                    kl_item_grads.as_ref(),
                ),
                OuterMode::FirstOrder => first_order_outer_gradient(
                    &self.model.theta,
                    net,
                    &states,
                    batch,
                    &outer_batch,
                    cfg.lr_inner,
                    cfg.l2,
                    kl_item_grads.as_ref(),
                    &mut rng,
                ),
            };
            if !grad.all_finite() {
                return Err(TilError::NonFinite("outer gradient".into()));
            }
            outer_loss = loss;
            let net = self.model.weight_net.as_mut().unwrap();
            self.adam_net.as_mut().unwrap().update(net, &grad, cfg.lr_outer);
            // Weights must reflect the updated generator for the inner
            // step that follows.
            let net = self.model.weight_net.as_ref().unwrap();
            caches = states.iter().map(|s| weight_forward(net, s.s.view())).collect();
        }

        // Per-triplet weights for the inner objective.
        let weights: Vec<f64> = if weighted {
            caches.iter().map(|c| c.weight).collect()
        } else {
            vec![1.0; batch.len()]
        };

        // Joint single-optimizer regression mode: the generator descends
        // the same weighted loss it scales (computed before the
        // embedding update, applied together with it).
        let mut single_level_grad: Option<WeightGrad> = None;
        if weighted && cfg.single_level && !cfg.freeze_generator {
            let net = self.model.weight_net.as_ref().unwrap();
            let inv = 1.0 / batch.len() as f64;
            let mut grad = WeightGrad::zeros(net.dim());
            for (idx, &t) in batch.iter().enumerate() {
                let upstream = bpr_loss(&self.model.theta, t) * inv;
                crate::weightgen::weight_backward(
                    net,
                    states[idx].s.view(),
                    &caches[idx],
                    upstream,
                    &mut grad,
                );
            }
            single_level_grad = Some(grad);
        }

        // Inner gradients.
        let (mut gp, mut gq) = bpr_batch_gradients(&self.model.theta, batch, &weights);
        add_l2_touched(&self.model.theta, batch, cfg.l2, &mut gp, &mut gq);
        let mut gphi = kl_center_grads;
        if let Some(extra) = kl_item_grads.as_ref() {
            gq += extra;
        }
        if cfg.backprop_states && weighted {
            let inv = 1.0 / batch.len() as f64;
            let upstream: Vec<f64> = batch
                .iter()
                .map(|&t| bpr_loss(&self.model.theta, t) * inv)
                .collect();
            let learn_phi = cfg.strategy == Strategy::TilMi && mi_active;
            let states_ref = &states;
            let caches_ref = &caches;
            // Borrow dance: take the option apart for the mutable pass.
            let mut phi_buf = if learn_phi {
                Some(gphi.take().unwrap_or_else(|| {
                    Array2::zeros(self.model.cluster.as_ref().unwrap().centers.raw_dim())
                }))
            } else {
                None
            };
            self.add_state_gradients(
                batch,
                states_ref,
                caches_ref,
                &eta,
                &upstream,
                &mut gp,
                &mut gq,
                phi_buf.as_mut(),
            );
            if let Some(buf) = phi_buf {
                gphi = Some(buf);
            }
        }

        let mut batch_loss = 0.0;
        for (&t, &w) in batch.iter().zip(weights.iter()) {
            batch_loss += w * bpr_loss(&self.model.theta, t);
        }
        batch_loss /= batch.len() as f64;
        if !batch_loss.is_finite() {
            return Err(TilError::NonFinite("weighted training loss".into()));
        }

        // Apply updates: embeddings, centers, and (single-level mode)
        // the generator, all from gradients at the same point.
        self.adam_p.update(&mut self.model.theta.p, &gp, cfg.lr_inner);
        self.adam_q.update(&mut self.model.theta.q, &gq, cfg.lr_inner);
        if cfg.strategy == Strategy::TilMi && mi_active {
            if let (Some(adam), Some(grads)) = (self.adam_phi.as_mut(), gphi.as_ref()) {
                let cluster = self.model.cluster.as_mut().unwrap();
                adam.update(&mut cluster.centers, grads, cfg.lr_inner);
            }
        }
        if let Some(grad) = single_level_grad {
            let net = self.model.weight_net.as_mut().unwrap();
            self.adam_net.as_mut().unwrap().update(net, &grad, cfg.lr_outer);
        }

        let mean_weight = if weighted {
            weights.iter().sum::<f64>() / weights.len() as f64
        } else {
            f64::NAN
        };
        Ok(BatchOutcome { weighted_loss: batch_loss, outer_loss, kl, mean_weight })
    }

    fn evaluate_val(&self) -> (f64, f64, usize) {
        let report = evaluate(
            &self.model.theta,
            self.store,
            EvalSplit::Validation,
            &[self.cfg.eval_k],
            &EvalOptions::default(),
        );
        (
            report.recall_at(self.cfg.eval_k),
            report.ndcg_at(self.cfg.eval_k),
            report.users_evaluated,
        )
    }
}

/// Trains a model, reporting progress through `observer`.
pub fn train_with_observer<F>(
    store: &InteractionStore,
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&TrainEvent),
{
    let mut tr = Trainer::new(store, cfg)?;
    let sampler = TripletSampler::new(store, cfg.sampler);
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(f64, usize, TilModel)> = None;
    let mut epochs_since_best = 0usize;
    let mut stop = StopReason::Completed;
    let mut final_epoch = 0usize;

    'epochs: for epoch in 1..=cfg.max_epochs {
        if tr.clustering_active(epoch) {
            tr.ensure_clusters()?;
        }
        let mut rng = stream_rng(cfg.seed, &[stream::SAMPLE_INNER, epoch as u64]);
        let triplets = sampler.sample_epoch(&mut rng);
        if triplets.is_empty() {
            return Err(TilError::EmptyDataset("no usable triplets in epoch".into()));
        }
        let mut sums = BatchOutcome {
            weighted_loss: 0.0,
            outer_loss: 0.0,
            kl: 0.0,
            mean_weight: 0.0,
        };
        let mut n_batches = 0.0f64;
        let mut n_outer = 0.0f64;
        let mut n_kl = 0.0f64;
        let mut n_weights = 0.0f64;
        for (batch_idx, batch) in triplets.chunks(cfg.batch).enumerate() {
            tr.step += 1;
            if tr.clustering_active(epoch)
                && tr.model.cluster.is_some()
                && tr.step % cfg.refresh_every as u64 == 0
            {
                tr.refresh_clusters()?;
            }
            let out = match tr.run_batch(epoch, batch_idx, batch) {
                Ok(out) => out,
                Err(TilError::NonFinite(what)) => {
                    log::warn!("divergence at epoch {epoch}: non-finite {what}");
                    stop = StopReason::Diverged;
                    final_epoch = epoch;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            sums.weighted_loss += out.weighted_loss;
            n_batches += 1.0;
            if out.outer_loss.is_finite() {
                sums.outer_loss += out.outer_loss;
                n_outer += 1.0;
            }
            if out.kl.is_finite() {
                sums.kl += out.kl;
                n_kl += 1.0;
            }
            if out.mean_weight.is_finite() {
                sums.mean_weight += out.mean_weight;
                n_weights += 1.0;
            }
            observer(&TrainEvent::Step { step: tr.step, epoch, model: &tr.model });
        }
        if !tr.model.all_finite() {
            log::warn!("divergence at epoch {epoch}: non-finite parameters");
            stop = StopReason::Diverged;
            final_epoch = epoch;
            break 'epochs;
        }

        let (val_recall, val_ndcg, val_users) = tr.evaluate_val();
        let record = EpochRecord {
            epoch,
            inner_loss: sums.weighted_loss / n_batches.max(1.0),
            outer_loss: if n_outer > 0.0 { sums.outer_loss / n_outer } else { f64::NAN },
            kl_loss: if n_kl > 0.0 { sums.kl / n_kl } else { f64::NAN },
            mean_weight: if n_weights > 0.0 { sums.mean_weight / n_weights } else { f64::NAN },
            val_recall,
            val_ndcg,
        };
        observer(&TrainEvent::EpochEnd { epoch, model: &tr.model, record: &record });
        history.push(record);
        final_epoch = epoch;

        if val_users > 0 {
            let improved = best.as_ref().is_none_or(|(b, _, _)| val_recall > *b);
            if improved {
                best = Some((val_recall, epoch, tr.model.clone()));
                epochs_since_best = 0;
            } else {
                epochs_since_best += 1;
                if epochs_since_best >= cfg.patience {
                    stop = StopReason::EarlyStopped;
                    break;
                }
            }
        }
    }

    let (best_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (final_epoch, tr.model),
    };
    Ok(TrainOutcome { model, history, stop, best_epoch, final_epoch })
}

/// Trains a model with no observer.
pub fn train(store: &InteractionStore, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(store, cfg, |_| {})
}
