//! The triplet weight generator: a two-layer perceptron mapping a
//! proximity state of length 2d to a confidence weight in (0, 1).
//!
//! w = sigmoid(w2 . relu(W1 s + b1) + b2)
//!
//! The relu subgradient at exactly zero is taken as zero. Initializing
//! with zero weights and b2 = 40 saturates the sigmoid to exactly 1.0 in
//! double precision, which makes a frozen generator reproduce unweighted
//! training bit for bit; see the reduction test in the trainer.

use ndarray::{Array1, Array2, ArrayView1};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{sigmoid, xavier_uniform};

/// Parameters of the generator; hidden width equals the embedding
/// dimension d, input width is 2d.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightNetParams {
    /// d x 2d input layer.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// Output layer, length d.
    pub w2: Array1<f64>,
    pub b2: f64,
}

impl WeightNetParams {
    pub fn dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    /// Xavier-uniform layers, zero biases.
    pub fn xavier(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let w1 = xavier_uniform(dim, 2 * dim, rng);
        let w2 = xavier_uniform(1, dim, rng).row(0).to_owned();
        WeightNetParams { w1, b1: Array1::zeros(dim), w2, b2: 0.0 }
    }

    pub fn zeros(dim: usize) -> Self {
        WeightNetParams {
            w1: Array2::zeros((dim, 2 * dim)),
            b1: Array1::zeros(dim),
            w2: Array1::zeros(dim),
            b2: 0.0,
        }
    }

    /// All-zero layers with b2 = 40: emits weight exactly 1.0 for every
    /// state and has exactly zero gradient, so training under it matches
    /// the unweighted baseline bitwise.
    pub fn saturated_one(dim: usize) -> Self {
        let mut p = Self::zeros(dim);
        p.b2 = 40.0;
        p
    }

    pub fn all_finite(&self) -> bool {
        self.w1.iter().all(|v| v.is_finite())
            && self.b1.iter().all(|v| v.is_finite())
            && self.w2.iter().all(|v| v.is_finite())
            && self.b2.is_finite()
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Pre-activation W1 s + b1.
    pub pre: Array1<f64>,
    /// relu(pre).
    pub hidden: Array1<f64>,
    pub logit: f64,
    pub weight: f64,
}

/// Evaluates the generator on one state.
pub fn weight_forward(params: &WeightNetParams, s: ArrayView1<f64>) -> ForwardCache {
    let mut pre = params.w1.dot(&s);
    pre += &params.b1;
    let hidden = pre.mapv(|x| if x > 0.0 { x } else { 0.0 });
    let logit = params.w2.dot(&hidden) + params.b2;
    let weight = sigmoid(logit);
    ForwardCache { pre, hidden, logit, weight }
}

/// Weight only, when no backward pass will follow.
pub fn weight_of(params: &WeightNetParams, s: ArrayView1<f64>) -> f64 {
    weight_forward(params, s).weight
}

/// Parameter-shaped gradient buffers for the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGrad {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

impl WeightGrad {
    pub fn zeros(dim: usize) -> Self {
        WeightGrad {
            w1: Array2::zeros((dim, 2 * dim)),
            b1: Array1::zeros(dim),
            w2: Array1::zeros(dim),
            b2: 0.0,
        }
    }

    pub fn scale(&mut self, f: f64) {
        self.w1.mapv_inplace(|x| x * f);
        self.b1.mapv_inplace(|x| x * f);
        self.w2.mapv_inplace(|x| x * f);
        self.b2 *= f;
    }

    pub fn max_abs(&self) -> f64 {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(std::iter::once(&self.b2))
            .fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.w1.iter().all(|v| v.is_finite())
            && self.b1.iter().all(|v| v.is_finite())
            && self.w2.iter().all(|v| v.is_finite())
            && self.b2.is_finite()
    }
}

/// Accumulates `upstream * dw/dparams` into `grad` and returns
/// `upstream * dw/ds` for the given forward pass.
pub fn weight_backward(
    params: &WeightNetParams,
    s: ArrayView1<f64>,
    cache: &ForwardCache,
    upstream: f64,
    grad: &mut WeightGrad,
) -> Array1<f64> {
    // dw/dlogit = w (1 - w); exactly zero once the sigmoid saturates.
    let dlogit = upstream * cache.weight * (1.0 - cache.weight);
    grad.b2 += dlogit;
    let dim = params.dim();
    let mut dpre = Array1::zeros(dim);
    for h in 0..dim {
        grad.w2[h] += dlogit * cache.hidden[h];
        // relu gate, closed at exactly zero.
        if cache.pre[h] > 0.0 {
            dpre[h] = dlogit * params.w2[h];
        }
    }
    let mut ds = Array1::zeros(s.len());
    let owned_s;
    // Hot path; a strided state view is copied once so the rank-1
    // update below runs on plain slices.
    let ssl: &[f64] = match s.as_slice() {
        Some(sl) => sl,
        None => {
            owned_s = s.to_owned();
            owned_s.as_slice().unwrap()
        }
    };
    for h in 0..dim {
        let d = dpre[h];
        if d == 0.0 {
            continue;
        }
        grad.b1[h] += d;
        let mut grow = grad.w1.row_mut(h);
        let gsl = grow.as_slice_mut().unwrap();
        let prow = params.w1.row(h);
        let psl = prow.to_slice().unwrap();
        let dsl = ds.as_slice_mut().unwrap();
        for c in 0..ssl.len() {
            gsl[c] += d * ssl[c];
            dsl[c] += d * psl[c];
        }
    }
    ds
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use proptest::prelude::*;

    fn random_state(dim: usize, seed: u64) -> Array1<f64> {
        let mut rng = stream_rng(seed, &[80]);
        use rand::RngExt;
        Array1::from_iter((0..2 * dim).map(|_| rng.random_range(-1.5..1.5)))
    }

    #[test]
    fn forward_reference_values() {
        // Zero parameters: logit 0, weight exactly one half.
        let p = WeightNetParams::zeros(3);
        let s = random_state(3, 1);
        let out = weight_forward(&p, s.view());
        assert_eq!(out.weight, 0.5);
        // Saturated init: weight exactly 1.0 for any state.
        let sat = WeightNetParams::saturated_one(3);
        for seed in 0..20 {
            let s = random_state(3, seed);
            let out = weight_forward(&sat, s.view());
            assert_eq!(out.weight, 1.0);
        }
    }

    #[test]
    fn hand_computed_tiny_net() {
        // d = 1: w1 = [[1, -2]], b1 = 0.5, w2 = [2], b2 = -1,
        // s = (1, 0.25) -> pre = 1 - 0.5 + 0.5 = 1, hidden = 1,
        // logit = 2 - 1 = 1, w = sigmoid(1).
        let p = WeightNetParams {
            w1: ndarray::arr2(&[[1.0, -2.0]]),
            b1: ndarray::arr1(&[0.5]),
            w2: ndarray::arr1(&[2.0]),
            b2: -1.0,
        };
        let s = ndarray::arr1(&[1.0, 0.25]);
        let out = weight_forward(&p, s.view());
        assert!((out.logit - 1.0).abs() < 1e-15);
        assert!((out.weight - sigmoid(1.0)).abs() < 1e-15);
    }

    #[test]
    fn saturated_generator_has_zero_gradient() {
        let p = WeightNetParams::saturated_one(4);
        let s = random_state(4, 3);
        let cache = weight_forward(&p, s.view());
        let mut grad = WeightGrad::zeros(4);
        let ds = weight_backward(&p, s.view(), &cache, 1.0, &mut grad);
        assert_eq!(grad.max_abs(), 0.0);
        assert!(ds.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let dim = 4;
        let h = 1e-6;
        for inst in 0..30 {
            let mut rng = stream_rng(inst, &[81]);
            let p = WeightNetParams::xavier(dim, &mut rng);
            let s = random_state(dim, 1000 + inst);
            let cache = weight_forward(&p, s.view());
            let mut grad = WeightGrad::zeros(dim);
            let ds = weight_backward(&p, s.view(), &cache, 1.0, &mut grad);
            let check = |analytic: f64, fd: f64| {
                let denom = analytic.abs().max(fd.abs()).max(1e-7);
                assert!(
                    (analytic - fd).abs() / denom < 1e-4,
                    "analytic {analytic} vs fd {fd}"
                );
            };
            for r in 0..dim {
                for c in 0..2 * dim {
                    let mut plus = p.clone();
                    let mut minus = p.clone();
                    plus.w1[[r, c]] += h;
                    minus.w1[[r, c]] -= h;
                    let fd = (weight_of(&plus, s.view()) - weight_of(&minus, s.view())) / (2.0 * h);
                    check(grad.w1[[r, c]], fd);
                }
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus.b1[r] += h;
                minus.b1[r] -= h;
                check(grad.b1[r], (weight_of(&plus, s.view()) - weight_of(&minus, s.view())) / (2.0 * h));
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus.w2[r] += h;
                minus.w2[r] -= h;
                check(grad.w2[r], (weight_of(&plus, s.view()) - weight_of(&minus, s.view())) / (2.0 * h));
            }
            let mut plus = p.clone();
            let mut minus = p.clone();
            plus.b2 += h;
            minus.b2 -= h;
            check(grad.b2, (weight_of(&plus, s.view()) - weight_of(&minus, s.view())) / (2.0 * h));
            for c in 0..2 * dim {
                let mut sp = s.clone();
                let mut sm = s.clone();
                sp[c] += h;
                sm[c] -= h;
                check(ds[c], (weight_of(&p, sp.view()) - weight_of(&p, sm.view())) / (2.0 * h));
            }
        }
    }

    #[test]
    fn upstream_scales_linearly() {
        let dim = 3;
        let mut rng = stream_rng(9, &[82]);
        let p = WeightNetParams::xavier(dim, &mut rng);
        let s = random_state(dim, 5);
        let cache = weight_forward(&p, s.view());
        let mut g1 = WeightGrad::zeros(dim);
        weight_backward(&p, s.view(), &cache, 1.0, &mut g1);
        let mut g3 = WeightGrad::zeros(dim);
        weight_backward(&p, s.view(), &cache, 3.0, &mut g3);
        let mut scaled = g1.clone();
        scaled.scale(3.0);
        assert!((scaled.b2 - g3.b2).abs() < 1e-12);
        for (a, b) in scaled.w1.iter().zip(g3.w1.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn weights_stay_in_the_open_unit_interval(seed in 0u64..1000) {
            let dim = 5;
            let mut rng = stream_rng(seed, &[83]);
            let p = WeightNetParams::xavier(dim, &mut rng);
            let s = random_state(dim, seed ^ 0xabcd);
            let w = weight_of(&p, s.view());
            prop_assert!(w > 0.0);
            prop_assert!(w < 1.0);
        }
    }
}
