//! Experiment orchestration: TOML specs in, run directories out.
//!
//! A run directory holds the resolved spec, the dataset snapshot, one
//! subdirectory per seed (history CSV, test metrics, model snapshot,
//! optional epoch checkpoints), and a summary with per-metric mean and
//! standard deviation across seeds. Comparisons and robustness tables
//! are built from those summaries, never by re-deriving metrics, so
//! every number in a report traces back to a file on disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_interactions, parse_interactions, synthesize, InteractionStore, NoiseSpec, SplitRatios,
    SynthSpec,
};
use crate::error::{Result, TilError};
use crate::eval::{self, case_study, evaluate, CaseStudyReport, EvalOptions, EvalSplit, RobustnessRow};
use crate::snapshot::{load_model, save_model};
use crate::trainer::{
    history_to_csv, train_with_observer, StopReason, Strategy, TrainConfig, TrainEvent,
};

pub const FORMAT_VERSION: u32 = 1;

/// Where the interactions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SynthSpec),
    File(FileDataset),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FileDataset {
    pub path: PathBuf,
    /// Ratings at or above this are positives; unrated rows always are.
    pub rating_threshold: f64,
    /// Iterative minimum interaction count for users and items
    /// (0 disables filtering).
    pub min_count: usize,
    pub ratios: SplitRatios,
    pub seed: u64,
}

impl Default for FileDataset {
    fn default() -> Self {
        FileDataset {
            path: PathBuf::new(),
            rating_threshold: 4.0,
            min_count: 0,
            ratios: SplitRatios::default(),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentOptions {
    pub out_dir: PathBuf,
    pub ks: Vec<usize>,
    /// Seeds run: train.seed, train.seed+1, ...
    pub repetitions: usize,
    /// Save a model checkpoint every N epochs (0 disables).
    pub checkpoint_every: usize,
    pub exclude_val_when_testing: bool,
    pub case_study_max_per_cell: usize,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions {
            out_dir: PathBuf::from("runs/til"),
            ks: vec![10, 20],
            repetitions: 1,
            checkpoint_every: 0,
            exclude_val_when_testing: false,
            case_study_max_per_cell: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    #[serde(default)]
    pub experiment: ExperimentOptions,
}

pub fn load_spec(path: &Path) -> Result<ExperimentSpec> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| TilError::Config(format!("bad experiment spec: {e}")))
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Stable hash of the dataset-defining parts of a spec (source plus
/// noise). Runs compared against each other must agree on it.
pub fn dataset_fingerprint(spec: &ExperimentSpec) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        dataset: &'a DatasetSpec,
        noise: &'a Option<NoiseSpec>,
    }
    let blob = serde_json::to_string(&Key { dataset: &spec.dataset, noise: &spec.noise })
        .expect("dataset spec serializes");
    format!("{:016x}", fnv1a64(blob.as_bytes()))
}

/// Builds the interaction store a spec describes, noise included.
/// Returns the synthetic affinity matrix when one exists.
pub fn build_dataset(spec: &ExperimentSpec) -> Result<(InteractionStore, Option<Array2<f64>>)> {
    let (store, affinity) = match &spec.dataset {
        DatasetSpec::Synthetic(synth) => {
            let (store, affinity) = synthesize(synth)?;
            (store, Some(affinity))
        }
        DatasetSpec::File(file) => {
            let records = load_interactions(&file.path, file.rating_threshold)?;
            let records = crate::data::filter_sparse(records, file.min_count)?;
            let mut store = InteractionStore::build(&records, file.ratios, file.seed)?;
            // Keep the full rating table (including sub-threshold rows)
            // for the case study.
            store.attach_ratings(&parse_interactions(&file.path)?);
            (store, None)
        }
    };
    let store = match &spec.noise {
        Some(noise) => store.inject_noise(noise)?,
        None => store,
    };
    Ok((store, affinity))
}

/// Output directory precedence: explicit override, then the
/// `TIL_OUT_DIR` environment variable, then the spec.
pub fn resolve_out_dir(spec: &ExperimentSpec, cli: Option<&Path>) -> PathBuf {
    if let Some(p) = cli {
        return p.to_path_buf();
    }
    if let Ok(v) = std::env::var("TIL_OUT_DIR") {
        if !v.is_empty() {
            return PathBuf::from(v);
        }
    }
    spec.experiment.out_dir.clone()
}

/// Test metrics and provenance for one seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub format_version: u32,
    pub dataset_fingerprint: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub stop: StopReason,
    pub best_epoch: usize,
    pub final_epoch: usize,
    pub test_recall: BTreeMap<String, f64>,
    pub test_ndcg: BTreeMap<String, f64>,
    pub test_users: usize,
}

/// Cross-seed aggregate written to `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub format_version: u32,
    pub dataset_fingerprint: String,
    pub strategy: Strategy,
    pub seeds: Vec<u64>,
    pub ks: Vec<usize>,
    pub mean_recall: BTreeMap<String, f64>,
    pub std_recall: BTreeMap<String, f64>,
    pub mean_ndcg: BTreeMap<String, f64>,
    pub std_ndcg: BTreeMap<String, f64>,
    pub runs: Vec<RunMetrics>,
}

impl TrainSummary {
    pub fn mean_recall_at(&self, k: usize) -> f64 {
        self.mean_recall.get(&k.to_string()).copied().unwrap_or(f64::NAN)
    }

    pub fn mean_ndcg_at(&self, k: usize) -> f64 {
        self.mean_ndcg.get(&k.to_string()).copied().unwrap_or(f64::NAN)
    }

    pub fn render_table(&self) -> String {
        let mut out = format!(
            "strategy {} over seeds {:?}\nk      recall(mean/std)      ndcg(mean/std)\n",
            self.strategy.name(),
            self.seeds
        );
        for k in &self.ks {
            let key = k.to_string();
            out.push_str(&format!(
                "{:<6} {:>9.5} / {:<9.5} {:>9.5} / {:<9.5}\n",
                k,
                self.mean_recall[&key],
                self.std_recall[&key],
                self.mean_ndcg[&key],
                self.std_ndcg[&key],
            ));
        }
        out
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| TilError::Config(format!("serialization failed: {e}")))?;
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| TilError::Config(format!("{}: {e}", path.display())))
}

/// Trains `repetitions` seeds, writes the run directory, and returns
/// the summary.
pub fn run_train(spec: &ExperimentSpec, out_override: Option<&Path>) -> Result<TrainSummary> {
    let out_dir = resolve_out_dir(spec, out_override);
    fs::create_dir_all(&out_dir)?;
    let fingerprint = dataset_fingerprint(spec);
    let (store, _) = build_dataset(spec)?;
    store.save_json(&out_dir.join("dataset.json"))?;
    let spec_text = toml::to_string_pretty(spec)
        .map_err(|e| TilError::Config(format!("spec serialization failed: {e}")))?;
    fs::write(out_dir.join("experiment.toml"), spec_text)?;

    let ks = &spec.experiment.ks;
    let eval_opts = EvalOptions {
        exclude_val_when_testing: spec.experiment.exclude_val_when_testing,
    };
    let mut runs = Vec::new();
    let mut seeds = Vec::new();
    for rep in 0..spec.experiment.repetitions {
        let seed = spec.train.seed + rep as u64;
        seeds.push(seed);
        let cfg = TrainConfig { seed, ..spec.train };
        let seed_dir = out_dir.join(format!("seed{seed}"));
        fs::create_dir_all(&seed_dir)?;
        let ckpt_dir = seed_dir.join("checkpoints");
        let every = spec.experiment.checkpoint_every;
        if every > 0 {
            fs::create_dir_all(&ckpt_dir)?;
        }
        let mut ckpt_err: Option<TilError> = None;
        let outcome = train_with_observer(&store, &cfg, |event| {
            if let TrainEvent::EpochEnd { epoch, model, .. } = event {
                if every > 0 && epoch % every == 0 && ckpt_err.is_none() {
                    let path = ckpt_dir.join(format!("epoch{epoch}.tilm"));
                    if let Err(e) = save_model(&path, model) {
                        ckpt_err = Some(e);
                    }
                }
            }
        })?;
        if let Some(e) = ckpt_err {
            return Err(e);
        }
        fs::write(
            seed_dir.join("history.csv"),
            history_to_csv(&outcome.history, cfg.eval_k),
        )?;
        save_model(seed_dir.join("model.tilm"), &outcome.model)?;

        let report = evaluate(&outcome.model.theta, &store, EvalSplit::Test, ks, &eval_opts);
        let mut test_recall = BTreeMap::new();
        let mut test_ndcg = BTreeMap::new();
        for &k in ks {
            test_recall.insert(k.to_string(), report.recall_at(k));
            test_ndcg.insert(k.to_string(), report.ndcg_at(k));
        }
        let metrics = RunMetrics {
            format_version: FORMAT_VERSION,
            dataset_fingerprint: fingerprint.clone(),
            strategy: cfg.strategy,
            seed,
            stop: outcome.stop,
            best_epoch: outcome.best_epoch,
            final_epoch: outcome.final_epoch,
            test_recall,
            test_ndcg,
            test_users: report.users_evaluated,
        };
        write_json(&seed_dir.join("metrics.json"), &metrics)?;
        runs.push(metrics);
    }

    let mut mean_recall = BTreeMap::new();
    let mut std_recall = BTreeMap::new();
    let mut mean_ndcg = BTreeMap::new();
    let mut std_ndcg = BTreeMap::new();
    for &k in ks {
        let key = k.to_string();
        let rec: Vec<f64> = runs.iter().map(|r| r.test_recall[&key]).collect();
        let ndcg: Vec<f64> = runs.iter().map(|r| r.test_ndcg[&key]).collect();
        let (m, s) = mean_std(&rec);
        mean_recall.insert(key.clone(), m);
        std_recall.insert(key.clone(), s);
        let (m, s) = mean_std(&ndcg);
        mean_ndcg.insert(key.clone(), m);
        std_ndcg.insert(key, s);
    }
    let summary = TrainSummary {
        format_version: FORMAT_VERSION,
        dataset_fingerprint: fingerprint,
        strategy: spec.train.strategy,
        seeds,
        ks: ks.clone(),
        mean_recall,
        std_recall,
        mean_ndcg,
        std_ndcg,
        runs,
    };
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub dir: PathBuf,
    pub strategy: Strategy,
    pub mean_recall: f64,
    pub std_recall: f64,
    pub mean_ndcg: f64,
    pub std_ndcg: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub at_k: usize,
    pub rows: Vec<CompareRow>,
}

impl CompareReport {
    pub fn render_table(&self) -> String {
        let mut out = format!(
            "{:<14} {:>12} {:>10} {:>12} {:>10}\n",
            "strategy",
            format!("recall@{}", self.at_k),
            "std",
            format!("ndcg@{}", self.at_k),
            "std"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<14} {:>12.5} {:>10.5} {:>12.5} {:>10.5}\n",
                r.strategy.name(),
                r.mean_recall,
                r.std_recall,
                r.mean_ndcg,
                r.std_ndcg
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "strategy,mean_recall@{k},std_recall@{k},mean_ndcg@{k},std_ndcg@{k}\n",
            k = self.at_k
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.strategy.name(),
                r.mean_recall,
                r.std_recall,
                r.mean_ndcg,
                r.std_ndcg
            ));
        }
        out
    }

    fn row(&self, strategy: &str) -> Result<&CompareRow> {
        self.rows
            .iter()
            .find(|r| r.strategy.name() == strategy)
            .ok_or_else(|| {
                TilError::Config(format!("no compared run uses strategy `{strategy}`"))
            })
    }

    /// Fails with an assertion error unless `better` beats `worse` on
    /// mean recall at the comparison cutoff.
    pub fn assert_improvement(&self, better: &str, worse: &str) -> Result<()> {
        let a = self.row(better)?;
        let b = self.row(worse)?;
        if a.mean_recall > b.mean_recall {
            Ok(())
        } else {
            Err(TilError::Assertion(format!(
                "expected {better} (recall@{} = {:.5}) to beat {worse} ({:.5})",
                self.at_k, a.mean_recall, b.mean_recall
            )))
        }
    }
}

/// Loads summaries from run directories and lines them up. All runs
/// must share the dataset fingerprint, seed list, and cutoff list.
pub fn run_compare(dirs: &[PathBuf], at_k: usize) -> Result<CompareReport> {
    if dirs.is_empty() {
        return Err(TilError::Config("nothing to compare: no run directories".into()));
    }
    let mut rows = Vec::new();
    let mut reference: Option<(String, Vec<u64>)> = None;
    for dir in dirs {
        let summary: TrainSummary = read_json(&dir.join("summary.json"))?;
        match &reference {
            None => reference = Some((summary.dataset_fingerprint.clone(), summary.seeds.clone())),
            Some((fp, seeds)) => {
                if *fp != summary.dataset_fingerprint {
                    return Err(TilError::Config(format!(
                        "{} was trained on a different dataset (fingerprint {} vs {})",
                        dir.display(),
                        summary.dataset_fingerprint,
                        fp
                    )));
                }
                if *seeds != summary.seeds {
                    return Err(TilError::Config(format!(
                        "{} used seeds {:?}, expected {:?}",
                        dir.display(),
                        summary.seeds,
                        seeds
                    )));
                }
            }
        }
        if !summary.ks.contains(&at_k) {
            return Err(TilError::Config(format!(
                "{} has no metrics at k={at_k} (available: {:?})",
                dir.display(),
                summary.ks
            )));
        }
        let key = at_k.to_string();
        rows.push(CompareRow {
            dir: dir.clone(),
            strategy: summary.strategy,
            mean_recall: summary.mean_recall[&key],
            std_recall: summary.std_recall[&key],
            mean_ndcg: summary.mean_ndcg[&key],
            std_ndcg: summary.std_ndcg[&key],
        });
    }
    Ok(CompareReport { at_k, rows })
}

/// Loads a model snapshot and renders its weight case study against
/// the spec's dataset.
pub fn run_case_study(
    model_path: &Path,
    spec: &ExperimentSpec,
    out: Option<&Path>,
) -> Result<CaseStudyReport> {
    let model = load_model(model_path)?;
    let (store, _) = build_dataset(spec)?;
    let report = case_study(
        &model,
        &store,
        spec.experiment.case_study_max_per_cell,
        spec.train.seed,
    )?;
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    Ok(report)
}

pub fn render_case_study(report: &CaseStudyReport) -> String {
    let mut out = String::from(
        "mean generated weight by (positive grade row, negative grade column),\n\
         scaled so the largest cell reads 100; dash marks an unsupported cell\n\n        ",
    );
    for b in 1..=5 {
        out.push_str(&format!("{b:>8}"));
    }
    out.push('\n');
    for a in (1..=5).rev() {
        out.push_str(&format!("  {a}  »  "));
        for b in 1..=5 {
            let v = report.normalized[a - 1][b - 1];
            if v.is_nan() {
                out.push_str(&format!("{:>8}", "-"));
            } else {
                out.push_str(&format!("{v:>8.1}"));
            }
        }
        out.push('\n');
    }
    out
}

/// Clean-vs-noisy sweeps for each strategy. Writes one run directory
/// per (condition, strategy) pair plus `robustness.json` at the root.
pub fn run_robustness(
    spec: &ExperimentSpec,
    strategies: &[Strategy],
    noise: &NoiseSpec,
    out_override: Option<&Path>,
) -> Result<Vec<RobustnessRow>> {
    let root = resolve_out_dir(spec, out_override);
    fs::create_dir_all(&root)?;
    let at_k = spec.train.eval_k;
    let mut rows = Vec::new();
    for &strategy in strategies {
        let mut clean = spec.clone();
        clean.noise = None;
        clean.train.strategy = strategy;
        clean.experiment.out_dir = root.join(format!("clean_{}", strategy.name()));
        if !clean.experiment.ks.contains(&at_k) {
            clean.experiment.ks.push(at_k);
        }
        let clean_summary = run_train(&clean, None)?;

        let mut noisy = clean.clone();
        noisy.noise = Some(*noise);
        noisy.experiment.out_dir = root.join(format!("noisy_{}", strategy.name()));
        let noisy_summary = run_train(&noisy, None)?;

        rows.push(RobustnessRow::new(
            strategy.name(),
            clean_summary.mean_recall_at(at_k),
            noisy_summary.mean_recall_at(at_k),
        ));
    }
    write_json(&root.join("robustness.json"), &rows)?;
    Ok(rows)
}

pub fn render_robustness(rows: &[RobustnessRow], at_k: usize) -> String {
    let mut out = format!(
        "{:<14} {:>12} {:>12} {:>12} {:>10}\n",
        "strategy",
        format!("clean R@{at_k}"),
        format!("noisy R@{at_k}"),
        "abs drop",
        "rel drop"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<14} {:>12.5} {:>12.5} {:>12.5} {:>9.1}%\n",
            r.strategy,
            r.clean_recall,
            r.noisy_recall,
            r.absolute_drop,
            r.relative_drop * 100.0
        ));
    }
    out
}

/// Convenience for examples and tests: evaluate a model file against a
/// spec's dataset at the spec's cutoffs.
pub fn evaluate_snapshot(model_path: &Path, spec: &ExperimentSpec) -> Result<eval::MetricsReport> {
    let model = load_model(model_path)?;
    let (store, _) = build_dataset(spec)?;
    let opts = EvalOptions {
        exclude_val_when_testing: spec.experiment.exclude_val_when_testing,
    };
    Ok(evaluate(&model.theta, &store, EvalSplit::Test, &spec.experiment.ks, &opts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NoiseMode;

    fn tiny_spec(out: &Path, strategy: Strategy) -> ExperimentSpec {
        ExperimentSpec {
            dataset: DatasetSpec::Synthetic(SynthSpec {
                n_users: 15,
                n_items: 30,
                n_groups: 3,
                pos_per_user: 10,
                seed: 3,
                ..SynthSpec::default()
            }),
            train: TrainConfig {
                dim: 4,
                batch: 64,
                max_epochs: 2,
                pretrain_epochs: 1,
                n_clusters: 3,
                patience: 100,
                strategy,
                seed: 11,
                ..TrainConfig::default()
            },
            noise: None,
            experiment: ExperimentOptions {
                out_dir: out.to_path_buf(),
                ks: vec![5, 20],
                repetitions: 2,
                ..ExperimentOptions::default()
            },
        }
    }

    #[test]
    fn spec_roundtrips_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(&dir.path().join("x"), Strategy::TilUi);
        let text = toml::to_string_pretty(&spec).unwrap();
        let back: ExperimentSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn spec_defaults_fill_missing_sections() {
        let text = r#"
            [dataset.synthetic]
            n_users = 10
            n_items = 20
            n_groups = 2
            pos_per_user = 5

            [train]
            strategy = "til_ui"
            dim = 8
        "#;
        let spec: ExperimentSpec = toml::from_str(text).unwrap();
        assert_eq!(spec.train.strategy, Strategy::TilUi);
        assert_eq!(spec.train.dim, 8);
        assert_eq!(spec.train.lr_inner, 1e-3);
        assert!(spec.noise.is_none());
        assert_eq!(spec.experiment.repetitions, 1);
    }

    #[test]
    fn fingerprint_tracks_dataset_not_training() {
        let dir = tempfile::tempdir().unwrap();
        let a = tiny_spec(&dir.path().join("a"), Strategy::BaselineBpr);
        let mut b = tiny_spec(&dir.path().join("b"), Strategy::TilUi);
        b.train.lr_inner = 0.5;
        assert_eq!(dataset_fingerprint(&a), dataset_fingerprint(&b));
        let mut c = a.clone();
        c.noise = Some(NoiseSpec { mode: NoiseMode::NoisyPos, fraction: 0.3, seed: 1 });
        assert_ne!(dataset_fingerprint(&a), dataset_fingerprint(&c));
        if let DatasetSpec::Synthetic(s) = &mut c.dataset {
            s.n_users = 99;
        }
        let d = c.clone();
        assert_ne!(dataset_fingerprint(&c.clone()), dataset_fingerprint(&a));
        assert_eq!(dataset_fingerprint(&c), dataset_fingerprint(&d));
    }

    #[test]
    fn train_writes_run_directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let mut spec = tiny_spec(&out, Strategy::BaselineBpr);
        spec.experiment.checkpoint_every = 1;
        let summary = run_train(&spec, None).unwrap();
        assert_eq!(summary.seeds, vec![11, 12]);
        assert_eq!(summary.runs.len(), 2);
        assert!(out.join("experiment.toml").is_file());
        assert!(out.join("dataset.json").is_file());
        assert!(out.join("summary.json").is_file());
        for seed in [11, 12] {
            let sd = out.join(format!("seed{seed}"));
            assert!(sd.join("history.csv").is_file());
            assert!(sd.join("metrics.json").is_file());
            assert!(sd.join("model.tilm").is_file());
            assert!(sd.join("checkpoints/epoch1.tilm").is_file());
            assert!(sd.join("checkpoints/epoch2.tilm").is_file());
            let history = fs::read_to_string(sd.join("history.csv")).unwrap();
            assert!(history.starts_with("epoch,inner_loss,outer_loss,kl_loss,mean_weight,"));
            assert_eq!(history.lines().count(), 3);
        }
        // The saved model evaluates identically to the summary metrics.
        let report =
            evaluate_snapshot(&out.join("seed11/model.tilm"), &spec).unwrap();
        let from_file: RunMetrics = read_json(&out.join("seed11/metrics.json")).unwrap();
        assert_eq!(report.recall_at(20), from_file.test_recall["20"]);
    }

    #[test]
    fn compare_validates_and_ranks_runs() {
        let dir = tempfile::tempdir().unwrap();
        let base_out = dir.path().join("base");
        let til_out = dir.path().join("til");
        run_train(&tiny_spec(&base_out, Strategy::BaselineBpr), None).unwrap();
        run_train(&tiny_spec(&til_out, Strategy::TilUi), None).unwrap();
        let report = run_compare(&[base_out.clone(), til_out.clone()], 20).unwrap();
        assert_eq!(report.rows.len(), 2);
        let table = report.render_table();
        assert!(table.contains("baseline_bpr"));
        assert!(table.contains("til_ui"));
        let csv = report.to_csv();
        assert!(csv.starts_with("strategy,mean_recall@20"));

        // Each direction succeeds exactly when its mean is strictly larger.
        let mean = |s: Strategy| {
            report.rows.iter().find(|r| r.strategy == s).unwrap().mean_recall
        };
        let til_beats = report.assert_improvement("til_ui", "baseline_bpr");
        let base_beats = report.assert_improvement("baseline_bpr", "til_ui");
        assert_eq!(til_beats.is_ok(), mean(Strategy::TilUi) > mean(Strategy::BaselineBpr));
        assert_eq!(base_beats.is_ok(), mean(Strategy::BaselineBpr) > mean(Strategy::TilUi));
        assert!(!(til_beats.is_ok() && base_beats.is_ok()));
        let err = report.assert_improvement("til_mik", "baseline_bpr").unwrap_err();
        assert!(matches!(err, TilError::Config(_)));

        // Mismatched dataset: rejected.
        let other_out = dir.path().join("other");
        let mut other = tiny_spec(&other_out, Strategy::BaselineBpr);
        if let DatasetSpec::Synthetic(s) = &mut other.dataset {
            s.seed = 99;
        }
        run_train(&other, None).unwrap();
        let err = run_compare(&[base_out.clone(), other_out], 20).unwrap_err();
        assert!(matches!(err, TilError::Config(_)));

        // Missing cutoff: rejected.
        assert!(run_compare(&[base_out], 7).is_err());
    }

    #[test]
    fn out_dir_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(&dir.path().join("from_spec"), Strategy::BaselineBpr);
        assert_eq!(resolve_out_dir(&spec, None), dir.path().join("from_spec"));
        let cli = dir.path().join("from_cli");
        assert_eq!(resolve_out_dir(&spec, Some(&cli)), cli);
        std::env::set_var("TIL_OUT_DIR", dir.path().join("from_env"));
        assert_eq!(resolve_out_dir(&spec, None), dir.path().join("from_env"));
        assert_eq!(resolve_out_dir(&spec, Some(&cli)), cli);
        std::env::remove_var("TIL_OUT_DIR");
    }

    #[test]
    fn robustness_produces_rows_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("robust");
        let mut spec = tiny_spec(&out, Strategy::BaselineBpr);
        spec.experiment.repetitions = 1;
        let noise = NoiseSpec { mode: NoiseMode::NoisyPosNeg, fraction: 0.5, seed: 5 };
        let rows = run_robustness(
            &spec,
            &[Strategy::BaselineBpr, Strategy::TilUi],
            &noise,
            None,
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert!(out.join("robustness.json").is_file());
        assert!(out.join("clean_baseline_bpr/summary.json").is_file());
        assert!(out.join("noisy_til_ui/summary.json").is_file());
        let table = render_robustness(&rows, 20);
        assert!(table.contains("baseline_bpr"));
    }

    #[test]
    fn case_study_runs_from_saved_model() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("rated");
        let mut spec = tiny_spec(&out, Strategy::TilUi);
        spec.dataset = DatasetSpec::Synthetic(SynthSpec {
            n_users: 24,
            n_items: 48,
            n_groups: 4,
            pos_per_user: 9,
            rated: true,
            seed: 3,
            ..SynthSpec::default()
        });
        spec.experiment.repetitions = 1;
        run_train(&spec, None).unwrap();
        let json_out = dir.path().join("case.json");
        let report = run_case_study(
            &out.join("seed11/model.tilm"),
            &spec,
            Some(&json_out),
        )
        .unwrap();
        assert!(json_out.is_file());
        assert!(report.counts[4][0] > 0);
        let rendered = render_case_study(&report);
        assert!(rendered.contains("100") || rendered.contains("-"));
    }
}
