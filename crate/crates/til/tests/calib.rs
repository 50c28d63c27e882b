// Scratch calibration harness. Not part of the deliverable suite.
use std::time::Instant;

use ndarray::Array2;
use til::data::{synthesize, NoiseMode, NoiseSpec, SynthSpec};
use til::eval::{evaluate, EvalOptions, EvalSplit};
use til::sampler::Triplet;
use til::trainer::{train, Strategy, TrainConfig, TrainOutcome};
use til::InteractionStore;

fn world(seed: u64, noise_rate: f64, rated: bool) -> (InteractionStore, Array2<f64>) {
    let spec = SynthSpec {
        n_groups: 25,
        noise_rate,
        rated,
        seed,
        ..SynthSpec::default()
    };
    synthesize(&spec).unwrap()
}

fn world2(seed: u64, noise_rate: f64, groups: usize, pos: usize) -> (InteractionStore, Array2<f64>) {
    let spec = SynthSpec {
        n_groups: groups,
        pos_per_user: pos,
        noise_rate,
        rated: false,
        seed,
        ..SynthSpec::default()
    };
    synthesize(&spec).unwrap()
}

fn weight_split(
    out: &TrainOutcome,
    store: &InteractionStore,
    affinity: &Array2<f64>,
) -> (f64, f64) {
    let (mut wt, mut nt, mut wf, mut nf) = (0.0, 0usize, 0.0, 0usize);
    for u in 0..store.n_users() as u32 {
        for &i in store.train_pos(u) {
            let neg = (0..store.n_items() as u32)
                .find(|j| affinity[[u as usize, *j as usize]] == 0.0 && !store.train_pos(u).contains(j))
                .unwrap();
            let w = out
                .model
                .triplet_weight(store, Triplet { user: u, pos: i, neg })
                .unwrap();
            if affinity[[u as usize, i as usize]] > 0.0 {
                wt += w;
                nt += 1;
            } else {
                wf += w;
                nf += 1;
            }
        }
    }
    (wt / nt.max(1) as f64, wf / nf.max(1) as f64)
}

fn run(
    store: &InteractionStore,
    cfg: &TrainConfig,
    label: &str,
    affinity: Option<&Array2<f64>>,
) -> f64 {
    let t0 = Instant::now();
    let out = train(store, cfg).unwrap();
    let report = evaluate(
        &out.model.theta,
        store,
        EvalSplit::Test,
        &[20],
        &EvalOptions::default(),
    );
    let r = report.recall_at(20);
    let mw = out
        .history
        .last()
        .map(|h| h.mean_weight)
        .unwrap_or(f64::NAN);
    let disc = match (affinity, cfg.strategy.weighted()) {
        (Some(a), true) => {
            let (t, f) = weight_split(&out, store, a);
            format!(" w_true={t:.3} w_false={f:.3}")
        }
        _ => String::new(),
    };
    eprintln!(
        "{label:<22} seed={} recall@20={:.4} best_ep={} final_ep={} mw={:.3}{disc} t={:.1}s",
        cfg.seed,
        r,
        out.best_epoch,
        out.final_epoch,
        mw,
        t0.elapsed().as_secs_f64()
    );
    r
}

fn cfg_base(seed: u64) -> TrainConfig {
    TrainConfig {
        dim: 32,
        lr_inner: 5e-3,
        lr_outer: 5e-3,
        max_epochs: 100,
        patience: 20,
        pretrain_epochs: 20,
        batch: 2048,
        n_clusters: 25,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
#[ignore]
fn time_one_run() {
    for s in [2u64] {
        let spec = SynthSpec {
            n_groups: 25,
            noise_rate: 0.2,
            ratios: til::SplitRatios { train: 0.9, val: 0.0, test: 0.1 },
            seed: 100 + s,
            ..SynthSpec::default()
        };
        let (store, aff) = synthesize(&spec).unwrap();
        let mut c = cfg_base(s);
        c.dim = 8;
        c.lr_inner = 5e-3;
        c.lr_outer = 1e-3;
        c.max_epochs = 600;
        c.patience = 10_000;
        c.batch = 512;
        c.gamma = 1e-3;
        c.pretrain_epochs = 60;
        for k in [60usize] {
            c.n_clusters = k;
            c.strategy = Strategy::TilMi;
            run(&store, &c, &format!("mi  k{k} s{s}"), Some(&aff));
            c.strategy = Strategy::TilMik;
            run(&store, &c, &format!("mik k{k} s{s}"), Some(&aff));
        }
    }
}
#[test]
#[ignore]
fn crit6_case() {
    let spec = SynthSpec {
        n_groups: 25,
        noise_rate: 0.35,
        rated: true,
        ratios: til::SplitRatios { train: 0.9, val: 0.0, test: 0.1 },
        seed: 104,
        ..SynthSpec::default()
    };
    let _ = &spec;
    for ws in [104u64, 105, 106] {
        let spec = SynthSpec { seed: ws, ..spec.clone() };
        let (store, aff) = synthesize(&spec).unwrap();
        let (batch, lro, eps) = (4096usize, 1e-2, 700usize);
        {
        let mut c = cfg_base(1);
        c.dim = 8;
        c.lr_inner = 5e-3;
        c.lr_outer = lro;
        c.max_epochs = eps;
        c.patience = 10_000;
        c.batch = batch;
        c.outer_batch = Some(12288);
        c.strategy = Strategy::TilUi;
        let out = train(&store, &c).unwrap();
        let _ = &aff;
        let cs = til::eval::case_study(&out.model, &store, 200, 7).unwrap();
        eprintln!(
            "b{batch} lro{lro}: cell(5,1)={:.7} cell(4,3)={:.7} diff={:+.3e} counts {} {}",
            cs.cell(5, 1),
            cs.cell(4, 3),
            cs.cell(5, 1) - cs.cell(4, 3),
            cs.counts[4][0],
            cs.counts[3][2]
        );
        for a in (1..=5).rev() {
            let row: Vec<String> = (1..=5).map(|b| format!("{:.4}", cs.mean_weight[a - 1][b - 1])).collect();
            eprintln!("  pos {a}: {}", row.join(" "));
        }
        }
    }
}
#[test]
#[ignore]
fn crit4_sweep() {
    for s in 1u64..=3 {
        let spec = SynthSpec {
            n_groups: 25,
            noise_rate: 0.2,
            ratios: til::SplitRatios { train: 0.9, val: 0.0, test: 0.1 },
            seed: 100 + s,
            ..SynthSpec::default()
        };
        let (store, aff) = synthesize(&spec).unwrap();
        let mut c = cfg_base(s);
        c.dim = 8;
        c.lr_inner = 5e-3;
        c.lr_outer = 1e-3;
        c.max_epochs = 600;
        c.patience = 10_000;
        c.batch = 512;
        c.n_clusters = 25;
        c.gamma = 1e-3;
        c.pretrain_epochs = 60;
        run(&store, &c, &format!("base s{s}"), None);
        c.strategy = Strategy::TilUi;
        run(&store, &c, &format!("ui   s{s}"), Some(&aff));
        c.strategy = Strategy::TilMi;
        run(&store, &c, &format!("mi   s{s}"), Some(&aff));
        c.strategy = Strategy::TilMik;
        run(&store, &c, &format!("mik  s{s}"), Some(&aff));
    }
}
#[test]
#[ignore]
fn crit5_sweep() {
    for s in 1u64..=3 {
        let spec = SynthSpec {
            n_groups: 25,
            noise_rate: 0.0,
            ratios: til::SplitRatios { train: 0.9, val: 0.0, test: 0.1 },
            seed: 100 + s,
            ..SynthSpec::default()
        };
        let (clean, aff) = synthesize(&spec).unwrap();
        let noisy = clean
            .inject_noise(&til::data::NoiseSpec {
                mode: til::data::NoiseMode::NoisyPosNeg,
                fraction: 0.5,
                seed: 900 + s,
            })
            .unwrap();
        let mut c = cfg_base(s);
        c.dim = 8;
        c.lr_inner = 5e-3;
        c.lr_outer = 1e-2;
        c.max_epochs = 600;
        c.patience = 10_000;
        c.batch = 4096;
        c.n_clusters = 60;
        c.gamma = 1e-3;
        c.pretrain_epochs = 300;
        for strat in [Strategy::BaselineBpr, Strategy::TilUi, Strategy::TilMi] {
            c.strategy = strat;
            run(&clean, &c, &format!("{:?} clean s{s}", strat), Some(&aff));
            run(&noisy, &c, &format!("{:?} noisy s{s}", strat), Some(&aff));
        }
    }
}
#[test]
#[ignore]
fn crit3_collapse() {
    let spec = SynthSpec {
        n_users: 120,
        n_items: 240,
        n_groups: 4,
        pos_per_user: 20,
        noise_rate: 0.1,
        rated: false,
        ratios: til::SplitRatios {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        },
        seed: 55,
        ..SynthSpec::default()
    };
    let store = synthesize(&spec).unwrap().0;
    for lr_outer in [2e-3, 5e-3, 1e-2] {
        let mut c = TrainConfig {
            dim: 16,
            max_epochs: 100,
            patience: 1000,
            batch: 256,
            lr_outer,
            strategy: Strategy::TilUi,
            single_level: true,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = train(&store, &c).unwrap();
        let mw: Vec<f64> = out.history.iter().map(|h| h.mean_weight).collect();
        eprintln!(
            "single lr_outer={lr_outer}: mw ep25={:.4} ep50={:.4} ep100={:.4}",
            mw[24], mw[49], mw[99]
        );
        c.single_level = false;
        let out = train(&store, &c).unwrap();
        let mw: Vec<f64> = out.history.iter().map(|h| h.mean_weight).collect();
        eprintln!(
            "bilevel lr_outer={lr_outer}: mw ep25={:.4} ep50={:.4} ep100={:.4} min={:.4}",
            mw[24],
            mw[49],
            mw[99],
            mw.iter().cloned().fold(f64::INFINITY, f64::min)
        );
    }
}

#[test]
#[ignore]
fn profile_epochs() {
    let (store, _) = world(101, 0.2, false);
    for (batch, epochs) in [(2048usize, 5usize), (8192, 5), (512, 3)] {
        let mut c = cfg_base(1);
        c.batch = batch;
        c.max_epochs = epochs;
        c.patience = 10_000;
        c.strategy = Strategy::TilUi;
        let t0 = Instant::now();
        let _ = train(&store, &c).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        let steps = (12000f64 / batch as f64).ceil() * epochs as f64;
        eprintln!(
            "batch={batch} epochs={epochs}: {dt:.2}s  {:.1}ms/epoch  {:.1}ms/step",
            dt * 1000.0 / epochs as f64,
            dt * 1000.0 / steps
        );
    }
}

#[test]
#[ignore]
fn profile_parts() {
    use til::backbone::EmbeddingTable;
    use til::interest::{interest_table, states_for_batch};
    use til::rng::stream_rng;
    use til::sampler::TripletSampler;
    use til::trainer::{bpr_batch_gradients, outer_gradient};
    use til::weightgen::{weight_forward, WeightNetParams};

    let (store, _) = world(101, 0.2, false);
    let d = 32;
    let mut rng = stream_rng(1, &[99]);
    let theta = EmbeddingTable::xavier(store.n_users(), store.n_items(), d, &mut rng);
    let net = WeightNetParams::xavier(d, &mut rng);
    let sampler = TripletSampler::new(&store, Default::default());
    let batch = sampler.sample_batch(2048, &mut rng);
    let outer = sampler.sample_batch(2048, &mut rng);

    let t0 = Instant::now();
    let eta = interest_table(&theta, &store);
    eprintln!("interest_table        {:.2}ms", t0.elapsed().as_secs_f64() * 1e3);

    let t0 = Instant::now();
    let states = states_for_batch(&theta, &eta, None, 1.0, &batch).unwrap();
    eprintln!("states_for_batch      {:.2}ms", t0.elapsed().as_secs_f64() * 1e3);

    let t0 = Instant::now();
    let caches: Vec<_> = states.iter().map(|s| weight_forward(&net, s.s.view())).collect();
    eprintln!("weight_forward x2048  {:.2}ms", t0.elapsed().as_secs_f64() * 1e3);

    let t0 = Instant::now();
    let w: Vec<f64> = caches.iter().map(|c| c.weight).collect();
    let (gp, gq) = bpr_batch_gradients(&theta, &batch, &w);
    eprintln!("bpr_batch_gradients   {:.2}ms", t0.elapsed().as_secs_f64() * 1e3);
    drop((gp, gq));

    let t0 = Instant::now();
    let (grad, _) = outer_gradient(&theta, &net, &states, &caches, &batch, &outer, 5e-3, 1e-5, None);
    eprintln!("outer_gradient        {:.2}ms", t0.elapsed().as_secs_f64() * 1e3);
    drop(grad);
}

#[test]
#[ignore]
fn no_val_damage() {
    for s in 1u64..=3 {
        let spec = SynthSpec {
            n_groups: 25,
            noise_rate: 0.0,
            ratios: til::SplitRatios { train: 0.8, val: 0.1, test: 0.1 },
            seed: 100 + s,
            ..SynthSpec::default()
        };
        let (clean, _) = synthesize(&spec).unwrap();
        let noisy = clean
            .inject_noise(&til::data::NoiseSpec {
                mode: til::data::NoiseMode::NoisyPosNeg,
                fraction: 0.5,
                seed: 900 + s,
            })
            .unwrap();
        let mut c = cfg_base(s);
        c.dim = 8;
        c.lr_inner = 5e-3;
        c.lr_outer = 1e-2;
        c.max_epochs = 600;
        c.batch = 4096;
        c.patience = 50;
        c.n_clusters = 60;
        c.gamma = 1e-3;
        c.pretrain_epochs = 60;
        c.strategy = Strategy::TilMi;
        run(&clean, &c, &format!("mi clean s{s}"), None);
        run(&noisy, &c, &format!("mi noisy s{s}"), None);
    }
}
