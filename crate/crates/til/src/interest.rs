//! Proximity states fed to the weight generator.
//!
//! The state for a triplet (u, i, j) concatenates a positive-side and a
//! negative-side d-vector. Each side interacts the item embedding with
//! both the user embedding and the user's principal interest eta_u (the
//! mean embedding of their training positives). The multi-interest
//! variant additionally mixes in the item's cluster center, scaled by
//! alpha, so the generator can see how typical an item is for the
//! interest cluster it belongs to.

use ndarray::{Array1, Array2, ArrayView1};

use crate::backbone::EmbeddingTable;
use crate::clustering::ClusterState;
use crate::data::InteractionStore;
use crate::error::{Result, TilError};
use crate::sampler::Triplet;

/// Which state construction produced a vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterestKind {
    Uni,
    Multi,
}

/// The 2d-dimensional generator input for one triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct InterestState {
    pub s: Array1<f64>,
    pub kind: InterestKind,
}

/// eta_u: arithmetic mean of the embeddings of u's training positives.
pub fn user_interest(theta: &EmbeddingTable, store: &InteractionStore, u: u32) -> Result<Array1<f64>> {
    let items = store.train_pos(u);
    if items.is_empty() {
        return Err(TilError::Config(format!(
            "user {u} has no training positives; interest undefined"
        )));
    }
    let mut eta = Array1::zeros(theta.dim());
    for &i in items {
        eta += &theta.q.row(i as usize);
    }
    eta /= items.len() as f64;
    Ok(eta)
}

/// Interest vectors for every user, zero rows for users without
/// training positives (such users are never sampled).
pub fn interest_table(theta: &EmbeddingTable, store: &InteractionStore) -> Array2<f64> {
    let mut table = Array2::zeros((store.n_users(), theta.dim()));
    for u in 0..store.n_users() {
        let items = store.train_pos(u as u32);
        if items.is_empty() {
            continue;
        }
        let mut row = table.row_mut(u);
        for &i in items {
            row += &theta.q.row(i as usize);
        }
        row /= items.len() as f64;
    }
    table
}

fn side_ui(out: &mut [f64], q: ArrayView1<f64>, p: ArrayView1<f64>, eta: ArrayView1<f64>) {
    for k in 0..out.len() {
        out[k] = q[k] * p[k] + q[k] * eta[k];
    }
}

fn side_mi(
    out: &mut [f64],
    q: ArrayView1<f64>,
    mu: ArrayView1<f64>,
    p: ArrayView1<f64>,
    eta: ArrayView1<f64>,
    alpha: f64,
) {
    // Written so alpha = 0 contributes an exact 0.0 per coordinate,
    // collapsing bitwise onto the uni-interest side.
    for k in 0..out.len() {
        out[k] = q[k] * p[k] + q[k] * eta[k] + alpha * (mu[k] * p[k] + mu[k] * eta[k]);
    }
}

/// Uni-interest state with a caller-supplied eta_u.
pub fn state_ui_with(theta: &EmbeddingTable, eta_u: ArrayView1<f64>, t: Triplet) -> InterestState {
    let d = theta.dim();
    let p_u = theta.p.row(t.user as usize);
    let mut s = Array1::zeros(2 * d);
    {
        let buf = s.as_slice_mut().unwrap();
        side_ui(&mut buf[..d], theta.q.row(t.pos as usize), p_u, eta_u);
        side_ui(&mut buf[d..], theta.q.row(t.neg as usize), p_u, eta_u);
    }
    InterestState { s, kind: InterestKind::Uni }
}

/// Uni-interest state, computing eta_u from the store.
pub fn state_ui(theta: &EmbeddingTable, store: &InteractionStore, t: Triplet) -> Result<InterestState> {
    let eta = user_interest(theta, store, t.user)?;
    Ok(state_ui_with(theta, eta.view(), t))
}

/// Multi-interest state with caller-supplied eta_u, cluster centers and
/// memberships.
pub fn state_mi_with(
    theta: &EmbeddingTable,
    eta_u: ArrayView1<f64>,
    centers: &Array2<f64>,
    membership: &[usize],
    alpha_scale: f64,
    t: Triplet,
) -> Result<InterestState> {
    let d = theta.dim();
    let (i, j) = (t.pos as usize, t.neg as usize);
    if i >= membership.len() || j >= membership.len() {
        return Err(TilError::Config(format!(
            "cluster membership missing for item {} or {}; refresh assignments first",
            t.pos, t.neg
        )));
    }
    let p_u = theta.p.row(t.user as usize);
    let mut s = Array1::zeros(2 * d);
    {
        let buf = s.as_slice_mut().unwrap();
        side_mi(
            &mut buf[..d],
            theta.q.row(i),
            centers.row(membership[i]),
            p_u,
            eta_u,
            alpha_scale,
        );
        side_mi(
            &mut buf[d..],
            theta.q.row(j),
            centers.row(membership[j]),
            p_u,
            eta_u,
            alpha_scale,
        );
    }
    Ok(InterestState { s, kind: InterestKind::Multi })
}

/// Multi-interest state computed from a store and cluster state.
pub fn state_mi(
    theta: &EmbeddingTable,
    cluster: &ClusterState,
    store: &InteractionStore,
    t: Triplet,
    alpha_scale: f64,
) -> Result<InterestState> {
    let eta = user_interest(theta, store, t.user)?;
    state_mi_with(theta, eta.view(), &cluster.centers, &cluster.membership, alpha_scale, t)
}

/// States for a whole batch against a precomputed interest table;
/// multi-interest when a cluster state is given, uni-interest otherwise.
pub fn states_for_batch(
    theta: &EmbeddingTable,
    eta: &Array2<f64>,
    cluster: Option<&ClusterState>,
    alpha_scale: f64,
    batch: &[Triplet],
) -> Result<Vec<InterestState>> {
    batch
        .iter()
        .map(|&t| {
            let eta_u = eta.row(t.user as usize);
            match cluster {
                None => Ok(state_ui_with(theta, eta_u, t)),
                Some(cs) => {
                    state_mi_with(theta, eta_u, &cs.centers, &cs.membership, alpha_scale, t)
                }
            }
        })
        .collect()
}
