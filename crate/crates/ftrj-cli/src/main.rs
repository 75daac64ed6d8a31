//! Command-line driver: data generation, the three training phases, pipeline
//! composition, held-out evaluation, hyperparameter sweeps, and plot export.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data/input error,
//! 4 training error, 5 evaluation error, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ftrj::classifier::{train_classifier, Classifier};
use ftrj::config::{BaseKind, ExperimentConfig};
use ftrj::embed::{train_metric, EmbeddingModel, GeodesicModel};
use ftrj::ConformalMetric;
use ftrj::flow::{train_flow, VectorField};
use ftrj::nn::{load_tensors, save_tensors, TensorBundle};
use ftrj::pipeline::{
    default_grid, evaluate_trained, export_plots, resolve_inputs, run_pipeline, run_sweep,
    write_run_setup, RunMetrics,
};
use ftrj::transport::ot_coupling;
use ftrj::{Error, Result};

#[derive(Parser)]
#[command(name = "ftrj", version, about = "Lineage-guided Finsler trajectory learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment configuration file (flat dotted keys); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset CSV (requires --lineage); omitted means the synthetic benchmark.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Lineage JSON (requires --dataset).
    #[arg(long)]
    lineage: Option<PathBuf>,
    /// Override finsler.lambda.
    #[arg(long)]
    lambda: Option<f64>,
    /// Comma-separated physical timepoints to hold out.
    #[arg(long, value_delimiter = ',')]
    heldout: Option<Vec<f64>>,
    /// Apply the transitive closure to the lineage prior before training.
    #[arg(long)]
    transitive_closure: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark dataset and its lineage prior.
    GenSynthetic(CommonArgs),
    /// Train only the cell-type classifier into the run directory.
    TrainClassifier(CommonArgs),
    /// Train the distance embedding and geodesic correction (needs a trained classifier).
    TrainMetric(CommonArgs),
    /// Train the flow-matching field (needs trained classifier and metric).
    TrainFlow(CommonArgs),
    /// Run all phases and evaluate held-out timepoints.
    Pipeline {
        #[command(flatten)]
        common: CommonArgs,
        /// Validate the configuration and write the manifest without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Evaluate existing checkpoints against the held-out marginals.
    Evaluate(CommonArgs),
    /// Grid-search lambda and classifier smoothing per the validation protocol.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Grid for lambda (comma separated).
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.2, 0.5, 1.0])]
        lambdas: Vec<f64>,
        /// Grid for classifier smoothing (comma separated).
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.03, 0.05])]
        smoothings: Vec<f64>,
        /// Seeds for the winner's test evaluation.
        #[arg(long, default_value_t = 10)]
        test_seeds: usize,
    },
    /// Re-emit trajectories.csv and marginals.csv from a completed run.
    ExportPlots {
        /// Completed run directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(code) = check_thread_cap() {
        return code;
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_class(&err))
        }
    }
}

/// FTRJ_THREADS caps internal data parallelism. The numeric kernels run
/// single-threaded for bitwise determinism, so any positive cap is honored;
/// the variable is still validated as part of the interface.
fn check_thread_cap() -> std::result::Result<(), ExitCode> {
    if let Ok(raw) = std::env::var("FTRJ_THREADS") {
        match raw.parse::<usize>() {
            Ok(n) if n >= 1 => {}
            _ => {
                eprintln!("error: FTRJ_THREADS must be a positive integer, got '{raw}'");
                return Err(ExitCode::from(2));
            }
        }
    }
    Ok(())
}

fn exit_class(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_)
        | Error::InvalidLineage(_)
        | Error::DimensionMismatch(_)
        | Error::NonFinite(_)
        | Error::Io(_)
        | Error::Json(_) => 3,
        Error::Training(_) | Error::Transport(_) | Error::UnsupportedDerivative(_) => 4,
        Error::Evaluation(_) => 5,
    }
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(lambda) = common.lambda {
        cfg.finsler_lambda = lambda;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn load_inputs(
    cfg: &ExperimentConfig,
    common: &CommonArgs,
) -> Result<(ftrj::TimeSeriesDataset, ftrj::lineage::LineageTree)> {
    let (data, mut tree) = resolve_inputs(
        cfg,
        common.dataset.as_deref(),
        common.lineage.as_deref(),
        common.heldout.as_deref(),
    )?;
    if common.transitive_closure {
        tree = tree.transitive_closure();
    }
    Ok((data, tree))
}

fn base_metric(cfg: &ExperimentConfig, data: &ftrj::TimeSeriesDataset) -> Result<ConformalMetric> {
    match cfg.finsler_base {
        BaseKind::Euclidean => Ok(ConformalMetric::Euclidean),
        BaseKind::RbfDensity => {
            let train_times = data.train_timepoints();
            let mut rows = data.indices_at(train_times[0]);
            rows.extend(data.indices_at(*train_times.last().unwrap()));
            let pts = data.select_points(&rows);
            ConformalMetric::fit_rbf(
                &pts,
                cfg.finsler_rbf_clusters,
                cfg.finsler_rbf_bandwidth,
                cfg.finsler_rbf_smoothing,
                cfg.seed,
            )
        }
    }
}

fn checkpoint_path(out: &Path, name: &str) -> PathBuf {
    out.join("checkpoints").join(name)
}

fn print_metrics(metrics: &RunMetrics) {
    println!("mean W1 over held-out timepoints: {:.6}", metrics.mean_w1);
    for (t, w1) in &metrics.per_t {
        println!("  t = {t}: W1 = {w1:.6}");
    }
    println!("lineage consistency: {:.3}", metrics.lineage_consistency);
    println!("classifier validation accuracy: {:.3}", metrics.classifier_val_accuracy);
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic(common) => {
            let cfg = load_config(&common)?;
            let (data, tree) = load_inputs(&cfg, &common)?;
            std::fs::create_dir_all(&common.out)?;
            data.save(&common.out.join("dataset.csv"))?;
            tree.save(&common.out.join("lineage.json"))?;
            println!(
                "wrote {} points across {} timepoints to {}",
                data.len(),
                data.timepoints().len(),
                common.out.display()
            );
            Ok(())
        }
        Command::TrainClassifier(common) => {
            let cfg = load_config(&common)?;
            let (data, tree) = load_inputs(&cfg, &common)?;
            write_run_setup(&cfg, &data, &tree, &common.out, "train-classifier")?;
            let (classifier, report) =
                train_classifier(&data, &tree, &cfg.classifier_options(), cfg.seed)?;
            for warning in &report.warnings {
                eprintln!("warning: {warning}");
            }
            let mut bundle = TensorBundle::default();
            classifier.write_bundle("classifier", &mut bundle);
            save_tensors(&checkpoint_path(&common.out, "classifier.ftrj"), &bundle)?;
            println!(
                "classifier trained: validation accuracy {:.3} over {} epochs",
                report.val_accuracy, report.epochs_run
            );
            Ok(())
        }
        Command::TrainMetric(common) => {
            let cfg = load_config(&common)?;
            let (data, tree) = load_inputs(&cfg, &common)?;
            let bundle = load_tensors(&checkpoint_path(&common.out, "classifier.ftrj")).map_err(|_| {
                Error::Data(
                    "train-metric needs checkpoints/classifier.ftrj (run train-classifier first)".into(),
                )
            })?;
            let classifier = Classifier::read_bundle("classifier", &bundle)?;
            let base = base_metric(&cfg, &data)?;
            let (embedding, geodesic, history) =
                train_metric(&data, &classifier, &tree, &base, &cfg.metric_options(), cfg.seed)?;
            let mut bundle = TensorBundle::default();
            embedding.write_bundle("embedding", &mut bundle);
            geodesic.write_bundle("geodesic", &mut bundle);
            save_tensors(&checkpoint_path(&common.out, "metric.ftrj"), &bundle)?;
            println!(
                "metric trained: final embedding loss {:.6}, final energy loss {:.6}",
                history.embedding.last().unwrap_or(&f64::NAN),
                history.energy.last().unwrap_or(&f64::NAN)
            );
            Ok(())
        }
        Command::TrainFlow(common) => {
            let cfg = load_config(&common)?;
            let (data, _tree) = load_inputs(&cfg, &common)?;
            let bundle = load_tensors(&checkpoint_path(&common.out, "metric.ftrj")).map_err(|_| {
                Error::Data("train-flow needs checkpoints/metric.ftrj (run train-metric first)".into())
            })?;
            let embedding = EmbeddingModel::read_bundle("embedding", &bundle)?;
            let geodesic = GeodesicModel::read_bundle("geodesic", &bundle)?;
            let train_times = data.train_timepoints();
            let source = data.marginal_at(train_times[0]);
            let target = data.marginal_at(*train_times.last().unwrap());
            let coupler = |x0: &ftrj::Matrix, x1: &ftrj::Matrix| {
                let cost = ftrj::transport::CostMatrix::new(embedding.pairwise_distance(x0, x1)?)?;
                ot_coupling(&cost)
            };
            let (flow, history) =
                train_flow(&geodesic, coupler, &source, &target, &cfg.flow_options(), cfg.seed)?;
            let mut bundle = TensorBundle::default();
            flow.write_bundle("flow", &mut bundle);
            save_tensors(&checkpoint_path(&common.out, "flow.ftrj"), &bundle)?;
            println!("flow trained: final loss {:.6}", history.last().unwrap_or(&f64::NAN));
            Ok(())
        }
        Command::Pipeline { common, dry_run } => {
            let cfg = load_config(&common)?;
            let (data, tree) = load_inputs(&cfg, &common)?;
            if dry_run {
                write_run_setup(&cfg, &data, &tree, &common.out, "pipeline --dry-run")?;
                println!("dry run: configuration valid, manifest written, nothing trained");
                return Ok(());
            }
            let run = run_pipeline(&cfg, &data, &tree, Some(&common.out))?;
            print_metrics(&run.metrics);
            Ok(())
        }
        Command::Evaluate(common) => {
            let cfg = load_config(&common)?;
            let (data, tree) = load_inputs(&cfg, &common)?;
            let bundle = load_tensors(&checkpoint_path(&common.out, "classifier.ftrj"))
                .map_err(|_| Error::Data("evaluate needs checkpoints/classifier.ftrj".into()))?;
            let classifier = Classifier::read_bundle("classifier", &bundle)?;
            let bundle = load_tensors(&checkpoint_path(&common.out, "flow.ftrj"))
                .map_err(|_| Error::Data("evaluate needs checkpoints/flow.ftrj".into()))?;
            let flow = VectorField::read_bundle("flow", &bundle)?;
            let outcome = evaluate_trained(&cfg, &data, &tree, &classifier, &flow)?;
            let mut per_t = std::collections::BTreeMap::new();
            for (t, w1) in &outcome.report.per_t {
                per_t.insert(format!("{t}"), *w1);
            }
            let metrics = RunMetrics {
                schema_version: 1,
                per_t,
                mean_w1: outcome.report.mean,
                lineage_consistency: outcome.consistency,
                classifier_val_accuracy: f64::NAN,
                final_embedding_loss: f64::NAN,
                final_energy_loss: f64::NAN,
                final_flow_loss: f64::NAN,
            };
            std::fs::write(
                common.out.join("metrics.json"),
                serde_json::to_string_pretty(&metrics)?,
            )?;
            print_metrics(&metrics);
            Ok(())
        }
        Command::Sweep {
            common,
            lambdas,
            smoothings,
            test_seeds,
        } => {
            let cfg = load_config(&common)?;
            let (data, tree) = load_inputs(&cfg, &common)?;
            let grid: Vec<(f64, f64)> = if lambdas.is_empty() || smoothings.is_empty() {
                default_grid()
            } else {
                lambdas
                    .iter()
                    .flat_map(|&l| smoothings.iter().map(move |&s| (l, s)))
                    .collect()
            };
            std::fs::create_dir_all(&common.out)?;
            let report = run_sweep(&cfg, &data, &tree, &grid, test_seeds)?;
            std::fs::write(
                common.out.join("sweep.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            println!("lambda  smoothing  validation_w1");
            for row in &report.rows {
                println!("{:<7} {:<10} {:.6}", row.lambda, row.smoothing, row.validation_w1);
            }
            println!(
                "winner: lambda = {}, smoothing = {}; test W1 = {:.4} ± {:.4} over {} seeds",
                report.winner_lambda,
                report.winner_smoothing,
                report.test_mean_w1,
                report.test_std_w1,
                report.per_seed_w1.len()
            );
            Ok(())
        }
        Command::ExportPlots { out } => {
            let (traj, marg) = export_plots(&out)?;
            println!("wrote {} and {}", traj.display(), marg.display());
            Ok(())
        }
    }
}
