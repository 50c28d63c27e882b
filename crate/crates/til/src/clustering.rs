//! End-to-end item clustering: learnable centers, Student's-t soft
//! assignment, sharpened self-training targets, the KL coherence loss,
//! and k-means for initialization (and for the ablation that re-runs it
//! instead of learning centers).
//!
//! With kernel u_ik = (1 + ||q_i - phi_k||^2 / tau)^(-(tau+1)/2):
//!   Q_ik = u_ik / sum_j u_ij
//!   T_ik = (Q_ik^2 / f_k) / sum_j (Q_ij^2 / f_j),  f_k = sum_i Q_ik
//!   L = KL(T || Q), T frozen during differentiation.
//! Writing v_ik = ((tau+1)/tau) (q_i - phi_k) / (1 + ||q_i - phi_k||^2/tau),
//! the gradients are dL/dq_i = sum_k (T_ik - Q_ik) v_ik and
//! dL/dphi_k = -sum_i (T_ik - Q_ik) v_ik.

use ndarray::{Array1, Array2, ArrayView1};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TilError};

/// Learnable cluster state over the item embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    /// K x d center embeddings (phi).
    pub centers: Array2<f64>,
    /// n_items x K soft assignments (Q).
    pub soft: Array2<f64>,
    /// n_items x K self-training target (T), refreshed with Q.
    pub target: Array2<f64>,
    /// Hard membership c_i = argmax_k Q_ik at the last refresh.
    pub membership: Vec<usize>,
    /// Student's-t degrees of freedom tau.
    pub temperature: f64,
}

impl ClusterState {
    /// Seeds centers with k-means over the item embeddings, then
    /// computes assignments and targets.
    pub fn init_kmeans(
        items: &Array2<f64>,
        k: usize,
        tau: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if tau <= 0.0 {
            return Err(TilError::Config(format!("temperature must be positive, got {tau}")));
        }
        let (centers, _) = kmeans(items, k, rng)?;
        let mut state = ClusterState {
            centers,
            soft: Array2::zeros((0, 0)),
            target: Array2::zeros((0, 0)),
            membership: Vec::new(),
            temperature: tau,
        };
        state.refresh(items);
        Ok(state)
    }

    /// Recomputes Q, T and memberships against current embeddings.
    pub fn refresh(&mut self, items: &Array2<f64>) {
        self.soft = soft_assign(items, &self.centers, self.temperature);
        self.target = target(&self.soft);
        self.membership = refresh_membership(&self.soft);
    }

    pub fn k(&self) -> usize {
        self.centers.nrows()
    }
}

fn dist2(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Lloyd's algorithm with k-means++ seeding. Runs at most 100 iterations
/// or until the relative inertia change drops below 1e-6; empty clusters
/// are reseeded to the point farthest from its assigned center.
pub fn kmeans(
    points: &Array2<f64>,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let n = points.nrows();
    let d = points.ncols();
    if k == 0 {
        return Err(TilError::Config("kmeans needs at least one cluster".into()));
    }
    if n < k {
        return Err(TilError::Config(format!("kmeans needs n >= K, got n={n}, K={k}")));
    }

    // k-means++ seeding.
    let mut centers = Array2::zeros((k, d));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&points.row(first));
    let mut min_d2: Vec<f64> = (0..n).map(|i| dist2(points.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            let r = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                acc += w;
                if r < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All remaining mass at distance zero (duplicate points);
            // take the first index not yet used as a center.
            (0..n)
                .find(|&i| (0..c).all(|cc| dist2(points.row(i), centers.row(cc)) > 0.0))
                .unwrap_or(c % n)
        };
        centers.row_mut(c).assign(&points.row(pick));
        for i in 0..n {
            let nd = dist2(points.row(i), centers.row(c));
            if nd < min_d2[i] {
                min_d2[i] = nd;
            }
        }
    }

    let mut assign = vec![0usize; n];
    let mut prev_inertia = f64::INFINITY;
    for _ in 0..100 {
        // Assignment step, ties toward the lowest center index.
        let mut inertia = 0.0;
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = dist2(points.row(i), centers.row(0));
            for c in 1..k {
                let dd = dist2(points.row(i), centers.row(c));
                if dd < best_d {
                    best_d = dd;
                    best = c;
                }
            }
            assign[i] = best;
            inertia += best_d;
        }

        // Reseed empty clusters to the globally farthest point.
        let mut counts = vec![0usize; k];
        for &a in &assign {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far = 0usize;
            let mut far_d = -1.0;
            for i in 0..n {
                // Only steal from clusters that can spare a point.
                if counts[assign[i]] <= 1 {
                    continue;
                }
                let dd = dist2(points.row(i), centers.row(assign[i]));
                if dd > far_d {
                    far_d = dd;
                    far = i;
                }
            }
            counts[assign[far]] -= 1;
            assign[far] = c;
            counts[c] = 1;
            centers.row_mut(c).assign(&points.row(far));
        }

        // Update step.
        let mut sums = Array2::<f64>::zeros((k, d));
        for i in 0..n {
            let mut row = sums.row_mut(assign[i]);
            row += &points.row(i);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mut row = centers.row_mut(c);
                row.assign(&sums.row(c));
                row /= counts[c] as f64;
            }
        }

        if prev_inertia.is_finite() {
            let rel = (prev_inertia - inertia).abs() / prev_inertia.max(1e-12);
            if rel < 1e-6 {
                break;
            }
        }
        prev_inertia = inertia;
    }

    // Final assignment against the converged centers.
    for i in 0..n {
        let mut best = 0usize;
        let mut best_d = dist2(points.row(i), centers.row(0));
        for c in 1..k {
            let dd = dist2(points.row(i), centers.row(c));
            if dd < best_d {
                best_d = dd;
                best = c;
            }
        }
        assign[i] = best;
    }
    Ok((centers, assign))
}

/// Student's-t soft assignment of every item row to every center.
pub fn soft_assign(items: &Array2<f64>, centers: &Array2<f64>, tau: f64) -> Array2<f64> {
    let n = items.nrows();
    let k = centers.nrows();
    let exponent = -(tau + 1.0) / 2.0;
    let mut q = Array2::zeros((n, k));
    for i in 0..n {
        let mut sum = 0.0;
        for c in 0..k {
            let u = (1.0 + dist2(items.row(i), centers.row(c)) / tau).powf(exponent);
            q[[i, c]] = u;
            sum += u;
        }
        if sum > 0.0 {
            for c in 0..k {
                q[[i, c]] /= sum;
            }
        } else {
            // Kernel underflowed everywhere (the run has diverged);
            // keep the row stochastic so the fault surfaces via the
            // loss checks rather than NaN propagation.
            log::warn!("soft assignment row {i} underflowed; using uniform");
            for c in 0..k {
                q[[i, c]] = 1.0 / k as f64;
            }
        }
    }
    q
}

/// Sharpened, frequency-normalized target distribution.
pub fn target(soft: &Array2<f64>) -> Array2<f64> {
    let (n, k) = soft.dim();
    let mut freq = Array1::<f64>::zeros(k);
    for i in 0..n {
        for c in 0..k {
            freq[c] += soft[[i, c]];
        }
    }
    let mut t = Array2::zeros((n, k));
    for i in 0..n {
        let mut sum = 0.0;
        for c in 0..k {
            let v = if freq[c] > 0.0 { soft[[i, c]] * soft[[i, c]] / freq[c] } else { 0.0 };
            t[[i, c]] = v;
            sum += v;
        }
        if sum > 0.0 {
            for c in 0..k {
                t[[i, c]] /= sum;
            }
        }
    }
    t
}

/// KL(T || Q) with the convention 0 log(0/q) = 0. Returns infinity if
/// mass in T sits where Q is zero; the trainer treats that as a fault.
pub fn kl_loss(target: &Array2<f64>, soft: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (&t, &q) in target.iter().zip(soft.iter()) {
        if t > 0.0 {
            if q > 0.0 {
                total += t * (t / q).ln();
            } else {
                return f64::INFINITY;
            }
        }
    }
    total
}

/// Gradients of [`kl_loss`] with the target frozen.
#[derive(Debug, Clone)]
pub struct ClusterGrads {
    pub items: Array2<f64>,
    pub centers: Array2<f64>,
}

/// Analytic gradients of KL(T || Q(items, centers)) w.r.t. item rows and
/// centers, with T held constant.
pub fn cluster_grads(
    items: &Array2<f64>,
    centers: &Array2<f64>,
    target: &Array2<f64>,
    tau: f64,
) -> ClusterGrads {
    let soft = soft_assign(items, centers, tau);
    cluster_grads_with_soft(items, centers, target, &soft, tau)
}

/// [`cluster_grads`] with the soft assignment already in hand (callers
/// that also need the KL value avoid assigning twice).
pub fn cluster_grads_with_soft(
    items: &Array2<f64>,
    centers: &Array2<f64>,
    target: &Array2<f64>,
    soft: &Array2<f64>,
    tau: f64,
) -> ClusterGrads {
    let n = items.nrows();
    let k = centers.nrows();
    let d = items.ncols();
    let mut gi = Array2::zeros((n, d));
    let mut gc = Array2::zeros((k, d));
    let coef = (tau + 1.0) / tau;
    for i in 0..n {
        for c in 0..k {
            let gap = target[[i, c]] - soft[[i, c]];
            if gap == 0.0 {
                continue;
            }
            let denom = 1.0 + dist2(items.row(i), centers.row(c)) / tau;
            let scale = gap * coef / denom;
            for x in 0..d {
                let diff = items[[i, x]] - centers[[c, x]];
                gi[[i, x]] += scale * diff;
                gc[[c, x]] -= scale * diff;
            }
        }
    }
    ClusterGrads { items: gi, centers: gc }
}

/// Hard memberships: per-row argmax, ties toward the lowest index.
pub fn refresh_membership(soft: &Array2<f64>) -> Vec<usize> {
    let (n, k) = soft.dim();
    let mut out = vec![0usize; n];
    for i in 0..n {
        let mut best = 0usize;
        for c in 1..k {
            if soft[[i, c]] > soft[[i, best]] {
                best = c;
            }
        }
        out[i] = best;
    }
    out
}
