//! End-to-end orchestration: the training phases, held-out evaluation,
//! hyperparameter sweeps, run directories, and plot-data export.
//!
//! A run directory contains `config.echo`, `manifest.json` (written before
//! training, finalized on exit), `dataset.csv`, `lineage.json`,
//! `checkpoints/`, `metrics.json`, and `trajectories.csv`. Identical
//! `(config, seed)` pairs produce byte-identical metrics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{train_classifier, Classifier};
use crate::config::{BaseKind, ExperimentConfig};
use crate::data::{gen_synthetic, TimeSeriesDataset};
use crate::embed::{train_metric, EmbeddingModel, GeodesicModel, MetricTrainHistory};
use crate::error::{Error, Result};
use crate::finsler::ConformalMetric;
use crate::flow::{
    integrate, lineage_consistency, simulate_with_classes, train_flow, TrajectoryTable, VectorField,
};
use crate::lineage::LineageTree;
use crate::nn::{load_tensors, save_tensors, TensorBundle};
use crate::rng::{component_rng, component_seed};
use crate::transport::{evaluate_marginals, ot_coupling, Coupling};
use crate::Scalar;

/// Stable, versioned metrics record (the contents of `metrics.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub schema_version: u32,
    /// W1 per held-out timepoint, keyed by the physical tag.
    pub per_t: BTreeMap<String, f64>,
    pub mean_w1: f64,
    /// Fraction of sampled trajectories whose argmax class sequence stays in
    /// the classes reachable from the dominant source class.
    pub lineage_consistency: f64,
    pub classifier_val_accuracy: f64,
    pub final_embedding_loss: f64,
    pub final_energy_loss: f64,
    pub final_flow_loss: f64,
}

/// Everything a finished run hands back to callers.
pub struct PipelineRun {
    pub metrics: RunMetrics,
    pub models: TrainedModels,
    pub metric_history: MetricTrainHistory,
    pub flow_history: Vec<f64>,
    pub trajectories: TrajectoryTable,
}

/// The four trained networks plus the frozen geometry inputs.
pub struct TrainedModels {
    pub classifier: Classifier<Scalar>,
    pub embedding: EmbeddingModel<Scalar>,
    pub geodesic: GeodesicModel<Scalar>,
    pub flow: VectorField<Scalar>,
    pub base: ConformalMetric<Scalar>,
}

/// Run provenance record, written before training and finalized on exit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub status: String,
    pub master_seed: u64,
    pub component_seeds: BTreeMap<String, u64>,
    pub input_hashes: BTreeMap<String, String>,
    pub timings_sec: BTreeMap<String, f64>,
    pub outputs: Vec<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash the dataset and lineage as canonical serializations.
fn input_hashes(data: &TimeSeriesDataset<Scalar>, tree: &LineageTree) -> Result<BTreeMap<String, String>> {
    let dir = std::env::temp_dir().join(format!("ftrj-hash-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let ds_path = dir.join("dataset.csv");
    data.save(&ds_path)?;
    let ds_bytes = std::fs::read(&ds_path)?;
    let tree_path = dir.join("lineage.json");
    tree.save(&tree_path)?;
    let tree_bytes = std::fs::read(&tree_path)?;
    let _ = std::fs::remove_dir_all(&dir);
    let mut hashes = BTreeMap::new();
    hashes.insert("dataset".into(), sha256_hex(&ds_bytes));
    hashes.insert("lineage".into(), sha256_hex(&tree_bytes));
    Ok(hashes)
}

fn component_seeds_for(master: u64) -> BTreeMap<String, u64> {
    let mut seeds = BTreeMap::new();
    for tag in [
        "classifier",
        "rbf-kmeans",
        "metric-init",
        "metric-batches",
        "flow-init",
        "flow-batches",
        "eval-subsample",
        "eval-trajectories",
        "synthetic-data",
    ] {
        seeds.insert(tag.to_string(), component_seed(master, tag));
    }
    seeds
}

/// Write `config.echo`, the inputs, and an initial manifest into the run
/// directory. Used by both dry runs and real runs.
pub fn write_run_setup(
    cfg: &ExperimentConfig,
    data: &TimeSeriesDataset<Scalar>,
    tree: &LineageTree,
    out_dir: &Path,
    command: &str,
) -> Result<RunManifest> {
    std::fs::create_dir_all(out_dir.join("checkpoints"))?;
    std::fs::write(out_dir.join("config.echo"), cfg.echo())?;
    data.save(&out_dir.join("dataset.csv"))?;
    tree.save(&out_dir.join("lineage.json"))?;
    let manifest = RunManifest {
        command: command.to_string(),
        status: "running".into(),
        master_seed: cfg.seed,
        component_seeds: component_seeds_for(cfg.seed),
        input_hashes: input_hashes(data, tree)?,
        timings_sec: BTreeMap::new(),
        outputs: Vec::new(),
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Build the coupling-under-learned-distance closure used for flow training.
fn embedding_coupler<'a>(
    embedding: &'a EmbeddingModel<Scalar>,
) -> impl Fn(&Array2<Scalar>, &Array2<Scalar>) -> Result<Coupling<Scalar>> + 'a {
    move |x0, x1| {
        let cost = crate::transport::CostMatrix::new(embedding.pairwise_distance(x0, x1)?)?;
        ot_coupling(&cost)
    }
}

/// Affine map from physical timepoint tags to normalized `[0, 1]` flow time,
/// anchored at the first and last train timepoints.
pub fn normalize_time(t: f64, t_lo: f64, t_hi: f64) -> f64 {
    (t - t_lo) / (t_hi - t_lo)
}

/// Run the full pipeline: classifier → metric (embedding + geodesic) → flow →
/// held-out evaluation. Writes the run directory when `out_dir` is given.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    data: &TimeSeriesDataset<Scalar>,
    tree: &LineageTree,
    out_dir: Option<&Path>,
) -> Result<PipelineRun> {
    data.validate_against(tree)?;
    let mut manifest = match out_dir {
        Some(dir) => Some(write_run_setup(cfg, data, tree, dir, "pipeline")?),
        None => None,
    };
    let mut timings: BTreeMap<String, f64> = BTreeMap::new();
    let seed = cfg.seed;

    // Phase: classifier.
    let t0 = Instant::now();
    let (classifier, clf_report) =
        train_classifier(data, tree, &cfg.classifier_options(), seed).map_err(phase("classifier"))?;
    timings.insert("classifier".into(), t0.elapsed().as_secs_f64());

    // Phase: conformal base.
    let train_times = data.train_timepoints();
    if train_times.len() < 2 {
        return Err(Error::Data("pipeline needs at least two train timepoints".into()));
    }
    let t_lo = train_times[0];
    let t_hi = *train_times.last().unwrap();
    let base = match cfg.finsler_base {
        BaseKind::Euclidean => ConformalMetric::Euclidean,
        BaseKind::RbfDensity => {
            let mut rows = data.indices_at(t_lo);
            rows.extend(data.indices_at(t_hi));
            let pts = data.select_points(&rows);
            ConformalMetric::fit_rbf(
                &pts,
                cfg.finsler_rbf_clusters,
                cfg.finsler_rbf_bandwidth,
                cfg.finsler_rbf_smoothing,
                seed,
            )
            .map_err(phase("metric"))?
        }
    };

    // Phase: embedding + geodesic.
    let t0 = Instant::now();
    let (embedding, geodesic, metric_history) =
        train_metric(data, &classifier, tree, &base, &cfg.metric_options(), seed)
            .map_err(phase("metric"))?;
    timings.insert("metric".into(), t0.elapsed().as_secs_f64());

    // Phase: flow matching.
    let t0 = Instant::now();
    let source = data.marginal_at(t_lo);
    let target = data.marginal_at(t_hi);
    let (flow, flow_history) = train_flow(
        &geodesic,
        embedding_coupler(&embedding),
        &source,
        &target,
        &cfg.flow_options(),
        seed,
    )
    .map_err(phase("flow"))?;
    timings.insert("flow".into(), t0.elapsed().as_secs_f64());

    // Phase: evaluation.
    let t0 = Instant::now();
    let eval = evaluate_trained(cfg, data, tree, &classifier, &flow).map_err(phase("evaluation"))?;
    let (report, trajectories, consistency) = (eval.report, eval.trajectories, eval.consistency);
    timings.insert("evaluation".into(), t0.elapsed().as_secs_f64());

    let mut per_t = BTreeMap::new();
    for (t, w1) in &report.per_t {
        per_t.insert(format!("{t}"), *w1);
    }
    let metrics = RunMetrics {
        schema_version: 1,
        per_t,
        mean_w1: report.mean,
        lineage_consistency: consistency,
        classifier_val_accuracy: clf_report.val_accuracy,
        final_embedding_loss: metric_history.embedding.last().copied().unwrap_or(f64::NAN),
        final_energy_loss: metric_history.energy.last().copied().unwrap_or(f64::NAN),
        final_flow_loss: flow_history.last().copied().unwrap_or(f64::NAN),
    };

    if let (Some(dir), Some(man)) = (out_dir, manifest.as_mut()) {
        std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
        std::fs::write(dir.join("trajectories.csv"), trajectories.to_csv())?;
        let mut bundle = TensorBundle::default();
        classifier.write_bundle("classifier", &mut bundle);
        save_tensors(&dir.join("checkpoints/classifier.ftrj"), &bundle)?;
        let mut bundle = TensorBundle::default();
        embedding.write_bundle("embedding", &mut bundle);
        geodesic.write_bundle("geodesic", &mut bundle);
        save_tensors(&dir.join("checkpoints/metric.ftrj"), &bundle)?;
        let mut bundle = TensorBundle::default();
        flow.write_bundle("flow", &mut bundle);
        save_tensors(&dir.join("checkpoints/flow.ftrj"), &bundle)?;
        man.status = "complete".into();
        man.timings_sec = timings;
        man.outputs = vec![
            "metrics.json".into(),
            "trajectories.csv".into(),
            "checkpoints/classifier.ftrj".into(),
            "checkpoints/metric.ftrj".into(),
            "checkpoints/flow.ftrj".into(),
        ];
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(man)?)?;
    }

    Ok(PipelineRun {
        metrics,
        models: TrainedModels {
            classifier,
            embedding,
            geodesic,
            flow,
            base,
        },
        metric_history,
        flow_history,
        trajectories,
    })
}

fn phase(name: &'static str) -> impl Fn(Error) -> Error {
    move |e| Error::Training(format!("phase {name}: {e}"))
}

/// Held-out evaluation products.
pub struct EvalOutcome {
    pub report: crate::transport::MarginalReport,
    pub trajectories: TrajectoryTable,
    pub consistency: f64,
}

/// Simulate held-out marginals and score them; also sample trajectories for
/// the lineage-consistency metric.
pub fn evaluate_trained(
    cfg: &ExperimentConfig,
    data: &TimeSeriesDataset<Scalar>,
    tree: &LineageTree,
    classifier: &Classifier<Scalar>,
    flow: &VectorField<Scalar>,
) -> Result<EvalOutcome> {
    let train_times = data.train_timepoints();
    if train_times.len() < 2 {
        return Err(Error::Evaluation("evaluation needs two train timepoints".into()));
    }
    let t_lo = train_times[0];
    let t_hi = *train_times.last().unwrap();
    let heldout = data.heldout_timepoints();
    if heldout.is_empty() {
        return Err(Error::Evaluation("no held-out timepoints".into()));
    }
    let source = data.marginal_at(t_lo);

    // Generated marginal per held-out time: integrate forward segment-wise.
    let mut sims: Vec<(f64, Array2<Scalar>)> = Vec::new();
    let mut state = source.clone();
    let mut current = 0.0f64;
    let mut sorted = heldout.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for &t in &sorted {
        let tn = normalize_time(t, t_lo, t_hi);
        if tn < current {
            return Err(Error::Evaluation("held-out timepoints must be ascending".into()));
        }
        if tn > current {
            let steps = ((cfg.flow_rk4_steps as f64 * (tn - current)).ceil() as usize).max(1);
            state = integrate(flow, &state, current, tn, steps)?;
            current = tn;
        }
        sims.push((t, state.clone()));
    }

    // Optionally equalize marginal sizes so W1 takes the exact-assignment
    // path; the estimator itself falls back to a debiased entropic value for
    // unequal masses.
    let mut truths: Vec<(f64, Array2<Scalar>)> =
        sorted.iter().map(|&t| (t, data.marginal_at(t))).collect();
    if cfg.eval_match_sizes {
        let mut rng = component_rng(cfg.seed, "eval-subsample");
        for ((_, sim), (_, truth)) in sims.iter_mut().zip(truths.iter_mut()) {
            let n = sim.nrows().min(truth.nrows());
            for side in [sim, truth] {
                if side.nrows() > n {
                    let mut idx: Vec<usize> = (0..side.nrows()).collect();
                    idx.shuffle(&mut rng);
                    idx.truncate(n);
                    idx.sort_unstable();
                    *side = side.select(Axis(0), &idx);
                }
            }
        }
    }
    let report = evaluate_marginals(&sims, &truths)?;

    // Trajectory sample for the consistency metric and river-plot export.
    let mut rng = component_rng(cfg.seed, "eval-trajectories");
    let mut idx: Vec<usize> = (0..source.nrows()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(cfg.eval_trajectories.min(source.nrows()));
    idx.sort_unstable();
    let starts = source.select(Axis(0), &idx);
    let grid: Vec<f64> = (0..cfg.eval_grid_points)
        .map(|i| i as f64 / (cfg.eval_grid_points - 1) as f64)
        .collect();
    let table = simulate_with_classes(flow, classifier, &starts, &grid, cfg.flow_rk4_steps)?;

    // Allowed classes: those reachable from the dominant class of the source
    // marginal under the prior.
    let src_idx = data.indices_at(t_lo);
    let mut counts = vec![0usize; tree.num_classes()];
    for &i in &src_idx {
        counts[data.labels()[i]] += 1;
    }
    let dominant = counts
        .iter()
        .enumerate()
        .max_by_key(|(_, &c)| c)
        .map(|(c, _)| c)
        .unwrap_or(0);
    let allowed = tree.reachable_from(dominant);
    let consistency = lineage_consistency(&table, &allowed);
    Ok(EvalOutcome {
        report,
        trajectories: table,
        consistency,
    })
}

/// One sweep-grid evaluation row.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub smoothing: f64,
    pub validation_w1: f64,
}

/// Sweep outcome: the grid table plus the winner's multi-seed test scores.
#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub winner_lambda: f64,
    pub winner_smoothing: f64,
    pub test_mean_w1: f64,
    pub test_std_w1: f64,
    pub per_seed_w1: Vec<f64>,
}

/// Default sweep grid: λ × classifier smoothing.
pub fn default_grid() -> Vec<(f64, f64)> {
    let mut grid = Vec::new();
    for &lambda in &[0.2, 0.5, 1.0] {
        for &smoothing in &[0.03, 0.05] {
            grid.push((lambda, smoothing));
        }
    }
    grid
}

/// Grid search following the validation protocol: score each cell by W1
/// against the first held-out timepoint only (one validation seed), then
/// re-evaluate the winner on all held-out timepoints over `test_seeds`
/// independent seeds and report mean and standard deviation.
pub fn run_sweep(
    base: &ExperimentConfig,
    data: &TimeSeriesDataset<Scalar>,
    tree: &LineageTree,
    grid: &[(f64, f64)],
    test_seeds: usize,
) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &(lambda, smoothing) in grid {
        let mut cfg = base.clone();
        cfg.finsler_lambda = lambda;
        cfg.classifier_smoothing = smoothing;
        cfg.validate()?;
        let run = run_pipeline(&cfg, data, tree, None)?;
        let first_t = run
            .metrics
            .per_t
            .iter()
            .map(|(k, v)| (k.parse::<f64>().unwrap_or(f64::INFINITY), *v))
            .fold((f64::INFINITY, f64::NAN), |acc, (t, w)| if t < acc.0 { (t, w) } else { acc });
        rows.push(SweepRow {
            lambda,
            smoothing,
            validation_w1: first_t.1,
        });
    }
    let winner = rows
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.validation_w1.partial_cmp(&b.validation_w1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let (winner_lambda, winner_smoothing) = (rows[winner].lambda, rows[winner].smoothing);

    let mut per_seed = Vec::with_capacity(test_seeds);
    for k in 0..test_seeds.max(1) {
        let mut cfg = base.clone();
        cfg.finsler_lambda = winner_lambda;
        cfg.classifier_smoothing = winner_smoothing;
        cfg.seed = base.seed.wrapping_add(k as u64);
        let run = run_pipeline(&cfg, data, tree, None)?;
        per_seed.push(run.metrics.mean_w1);
    }
    let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    let std = if per_seed.len() > 1 {
        (per_seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (per_seed.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(SweepReport {
        rows,
        winner_lambda,
        winner_smoothing,
        test_mean_w1: mean,
        test_std_w1: std,
        per_seed_w1: per_seed,
    })
}

/// Regenerate `trajectories.csv` and `marginals.csv` from a completed run
/// directory. Deterministic: re-export produces identical bytes.
pub fn export_plots(run_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let cfg = ExperimentConfig::parse(&std::fs::read_to_string(run_dir.join("config.echo"))?)?;
    let data = TimeSeriesDataset::<Scalar>::load(&run_dir.join("dataset.csv"))?;
    let clf_bundle = load_tensors(&run_dir.join("checkpoints/classifier.ftrj"))
        .map_err(|_| Error::Data("missing classifier checkpoint".into()))?;
    let classifier = Classifier::<Scalar>::read_bundle("classifier", &clf_bundle)?;
    let flow_bundle = load_tensors(&run_dir.join("checkpoints/flow.ftrj"))
        .map_err(|_| Error::Data("missing flow checkpoint".into()))?;
    let flow = VectorField::<Scalar>::read_bundle("flow", &flow_bundle)?;

    let train_times = data.train_timepoints();
    let t_lo = train_times[0];
    let t_hi = *train_times.last().unwrap();
    let source = data.marginal_at(t_lo);

    let mut rng = component_rng(cfg.seed, "eval-trajectories");
    let mut idx: Vec<usize> = (0..source.nrows()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(cfg.eval_trajectories.min(source.nrows()));
    idx.sort_unstable();
    let starts = source.select(Axis(0), &idx);
    let grid: Vec<f64> = (0..cfg.eval_grid_points)
        .map(|i| i as f64 / (cfg.eval_grid_points - 1) as f64)
        .collect();
    let table = simulate_with_classes(&flow, &classifier, &starts, &grid, cfg.flow_rk4_steps)?;
    let traj_path = run_dir.join("trajectories.csv");
    std::fs::write(&traj_path, table.to_csv())?;

    // Scatter overlay: observed points at every timepoint plus simulated
    // marginals at the held-out ones.
    let mut out = String::new();
    use std::fmt::Write as _;
    let xs: Vec<String> = (1..=data.dim()).map(|d| format!("x_{d}")).collect();
    let _ = writeln!(out, "t,kind,label,{}", xs.join(","));
    for i in 0..data.len() {
        let _ = write!(out, "{:.16e},observed,{}", data.times()[i], data.labels()[i]);
        for d in 0..data.dim() {
            let _ = write!(out, ",{:.16e}", data.points()[[i, d]]);
        }
        out.push('\n');
    }
    let mut state = source.clone();
    let mut current = 0.0;
    let mut heldout = data.heldout_timepoints();
    heldout.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for &t in &heldout {
        let tn = normalize_time(t, t_lo, t_hi);
        if tn > current {
            let steps = ((cfg.flow_rk4_steps as f64 * (tn - current)).ceil() as usize).max(1);
            state = integrate(&flow, &state, current, tn, steps)?;
            current = tn;
        }
        for row in state.rows() {
            let _ = write!(out, "{t:.16e},simulated,-1");
            for v in row.iter() {
                let _ = write!(out, ",{v:.16e}");
            }
            out.push('\n');
        }
    }
    let marg_path = run_dir.join("marginals.csv");
    std::fs::write(&marg_path, out)?;
    Ok((traj_path, marg_path))
}

/// Resolve the experiment inputs: load a dataset/lineage pair from disk or
/// generate the synthetic benchmark.
pub fn resolve_inputs(
    cfg: &ExperimentConfig,
    dataset_path: Option<&Path>,
    lineage_path: Option<&Path>,
    heldout_override: Option<&[f64]>,
) -> Result<(TimeSeriesDataset<Scalar>, LineageTree)> {
    let (mut data, tree) = match (dataset_path, lineage_path) {
        (Some(dp), Some(lp)) => {
            let data = TimeSeriesDataset::load(dp)?;
            let tree = LineageTree::load(lp)?;
            (data, tree)
        }
        (Some(_), None) | (None, Some(_)) => {
            return Err(Error::Config(
                "--dataset and --lineage must be given together".into(),
            ))
        }
        (None, None) => gen_synthetic(&cfg.synthetic(), cfg.seed)?,
    };
    if let Some(heldout) = heldout_override {
        data.set_heldout(heldout)?;
    }
    data.validate_against(&tree)?;
    Ok((data, tree))
}
