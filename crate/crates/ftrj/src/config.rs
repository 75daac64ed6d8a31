//! Experiment configuration: a flat, dotted-key UTF-8 document.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys are rejected
//! and every value is validated at load. The effective configuration (all
//! defaults applied) is echoed into the run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::classifier::{ClassifierOptions, TrainingData};
use crate::data::SyntheticConfig;
use crate::embed::MetricTrainOptions;
use crate::error::{Error, Result};
use crate::flow::FlowTrainOptions;
use crate::nn::Activation;

/// Conformal base selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseKind {
    Euclidean,
    RbfDensity,
}

/// Fully validated experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,

    pub synthetic_dim: usize,
    pub synthetic_cluster_std: f64,
    pub synthetic_endpoint_count: usize,
    pub synthetic_intermediate_count: usize,
    pub synthetic_arm_height: f64,

    pub classifier_smoothing: f64,
    pub classifier_batch: usize,
    pub classifier_epochs: usize,
    pub classifier_lr: f64,
    pub classifier_weight_decay: f64,
    pub classifier_patience: usize,
    pub classifier_train_times: TrainingData,

    pub finsler_lambda: f64,
    pub finsler_base: BaseKind,
    pub finsler_rbf_clusters: usize,
    pub finsler_rbf_bandwidth: f64,
    pub finsler_rbf_smoothing: f64,

    pub embed_latent_dim: usize,
    pub geodesic_stop_gradient_jacobian: bool,

    pub train_iters: usize,
    pub train_batch: usize,
    pub train_lr: f64,
    pub train_weight_decay: f64,

    pub flow_iters: usize,
    pub flow_batch: usize,
    pub flow_lr: f64,
    pub flow_weight_decay: f64,
    pub flow_rk4_steps: usize,

    pub eval_trajectories: usize,
    pub eval_grid_points: usize,
    pub eval_match_sizes: bool,

    pub nn_hidden_width: usize,
    pub nn_hidden_layers: usize,
    pub nn_batch_norm: bool,
    pub nn_activation: Activation,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            synthetic_dim: 2,
            synthetic_cluster_std: 0.1,
            synthetic_endpoint_count: 500,
            synthetic_intermediate_count: 25,
            synthetic_arm_height: 0.9,
            classifier_smoothing: 0.03,
            classifier_batch: 512,
            classifier_epochs: 200,
            classifier_lr: 1e-3,
            classifier_weight_decay: 0.01,
            classifier_patience: 20,
            classifier_train_times: TrainingData::AllTimepoints,
            finsler_lambda: 0.5,
            finsler_base: BaseKind::Euclidean,
            finsler_rbf_clusters: 100,
            finsler_rbf_bandwidth: 1.0,
            finsler_rbf_smoothing: 0.05,
            embed_latent_dim: 32,
            geodesic_stop_gradient_jacobian: false,
            train_iters: 300,
            train_batch: 2048,
            train_lr: 1e-3,
            train_weight_decay: 0.01,
            flow_iters: 600,
            flow_batch: 2048,
            flow_lr: 1e-3,
            flow_weight_decay: 0.01,
            flow_rk4_steps: 100,
            eval_trajectories: 50,
            eval_grid_points: 21,
            eval_match_sizes: true,
            nn_hidden_width: 256,
            nn_hidden_layers: 3,
            nn_batch_norm: true,
            nn_activation: Activation::SiLU,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply a single dotted-key override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fec(key, value, self)
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, v: f64) -> Result<()> {
            if v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be > 0, got {v}")))
            }
        }
        if self.finsler_lambda < 0.0 {
            return Err(Error::Config(format!(
                "finsler.lambda must be ≥ 0, got {}",
                self.finsler_lambda
            )));
        }
        if !(0.0..0.5).contains(&self.classifier_smoothing) {
            return Err(Error::Config(format!(
                "classifier.smoothing must lie in [0, 0.5), got {}",
                self.classifier_smoothing
            )));
        }
        positive("synthetic.cluster_std", self.synthetic_cluster_std)?;
        positive("classifier.lr", self.classifier_lr)?;
        positive("train.lr", self.train_lr)?;
        positive("flow.lr", self.flow_lr)?;
        positive("finsler.rbf.bandwidth", self.finsler_rbf_bandwidth)?;
        positive("finsler.rbf.smoothing", self.finsler_rbf_smoothing)?;
        for (name, v) in [
            ("synthetic.dim", self.synthetic_dim),
            ("synthetic.endpoint_count", self.synthetic_endpoint_count),
            ("synthetic.intermediate_count", self.synthetic_intermediate_count),
            ("classifier.batch", self.classifier_batch),
            ("train.iters", self.train_iters),
            ("train.batch", self.train_batch),
            ("flow.iters", self.flow_iters),
            ("flow.batch", self.flow_batch),
            ("flow.rk4_steps", self.flow_rk4_steps),
            ("embed.latent_dim", self.embed_latent_dim),
            ("eval.trajectories", self.eval_trajectories),
            ("finsler.rbf.clusters", self.finsler_rbf_clusters),
            ("nn.hidden_width", self.nn_hidden_width),
            ("nn.hidden_layers", self.nn_hidden_layers),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be ≥ 1")));
            }
        }
        if self.eval_grid_points < 2 {
            return Err(Error::Config("eval.grid_points must be ≥ 2".into()));
        }
        Ok(())
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        vec![self.nn_hidden_width; self.nn_hidden_layers]
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            dim: self.synthetic_dim,
            cluster_std: self.synthetic_cluster_std,
            endpoint_count: self.synthetic_endpoint_count,
            intermediate_count: self.synthetic_intermediate_count,
            arm_height: self.synthetic_arm_height,
        }
    }

    pub fn classifier_options(&self) -> ClassifierOptions {
        ClassifierOptions {
            label_smoothing: self.classifier_smoothing,
            batch_size: self.classifier_batch,
            max_epochs: self.classifier_epochs,
            learning_rate: self.classifier_lr,
            weight_decay: self.classifier_weight_decay,
            patience: self.classifier_patience,
            training_data: self.classifier_train_times,
            hidden: self.hidden_dims(),
            batch_norm: self.nn_batch_norm,
            activation: self.nn_activation,
        }
    }

    pub fn metric_options(&self) -> MetricTrainOptions {
        MetricTrainOptions {
            iters: self.train_iters,
            batch_size: self.train_batch,
            learning_rate: self.train_lr,
            weight_decay: self.train_weight_decay,
            lambda: self.finsler_lambda,
            latent_dim: self.embed_latent_dim,
            stop_gradient_jacobian: self.geodesic_stop_gradient_jacobian,
            hidden: self.hidden_dims(),
            batch_norm: self.nn_batch_norm,
            activation: self.nn_activation,
        }
    }

    pub fn flow_options(&self) -> FlowTrainOptions {
        FlowTrainOptions {
            iters: self.flow_iters,
            batch_size: self.flow_batch,
            learning_rate: self.flow_lr,
            weight_decay: self.flow_weight_decay,
            hidden: self.hidden_dims(),
            batch_norm: self.nn_batch_norm,
            activation: self.nn_activation,
        }
    }

    /// Canonical echo of the effective configuration, sorted by key.
    pub fn echo(&self) -> String {
        let mut entries: BTreeMap<&str, String> = BTreeMap::new();
        entries.insert("seed", self.seed.to_string());
        entries.insert("synthetic.dim", self.synthetic_dim.to_string());
        entries.insert("synthetic.cluster_std", self.synthetic_cluster_std.to_string());
        entries.insert("synthetic.endpoint_count", self.synthetic_endpoint_count.to_string());
        entries.insert(
            "synthetic.intermediate_count",
            self.synthetic_intermediate_count.to_string(),
        );
        entries.insert("synthetic.arm_height", self.synthetic_arm_height.to_string());
        entries.insert("classifier.smoothing", self.classifier_smoothing.to_string());
        entries.insert("classifier.batch", self.classifier_batch.to_string());
        entries.insert("classifier.epochs", self.classifier_epochs.to_string());
        entries.insert("classifier.lr", self.classifier_lr.to_string());
        entries.insert("classifier.weight_decay", self.classifier_weight_decay.to_string());
        entries.insert("classifier.patience", self.classifier_patience.to_string());
        entries.insert(
            "classifier.train_times",
            match self.classifier_train_times {
                TrainingData::AllTimepoints => "all".into(),
                TrainingData::TrainTimepointsOnly => "endpoints".into(),
            },
        );
        entries.insert("finsler.lambda", self.finsler_lambda.to_string());
        entries.insert(
            "finsler.base",
            match self.finsler_base {
                BaseKind::Euclidean => "euclidean".into(),
                BaseKind::RbfDensity => "rbf-density".into(),
            },
        );
        entries.insert("finsler.rbf.clusters", self.finsler_rbf_clusters.to_string());
        entries.insert("finsler.rbf.bandwidth", self.finsler_rbf_bandwidth.to_string());
        entries.insert("finsler.rbf.smoothing", self.finsler_rbf_smoothing.to_string());
        entries.insert("embed.latent_dim", self.embed_latent_dim.to_string());
        entries.insert(
            "geodesic.stop_gradient_jacobian",
            self.geodesic_stop_gradient_jacobian.to_string(),
        );
        entries.insert("train.iters", self.train_iters.to_string());
        entries.insert("train.batch", self.train_batch.to_string());
        entries.insert("train.lr", self.train_lr.to_string());
        entries.insert("train.weight_decay", self.train_weight_decay.to_string());
        entries.insert("flow.iters", self.flow_iters.to_string());
        entries.insert("flow.batch", self.flow_batch.to_string());
        entries.insert("flow.lr", self.flow_lr.to_string());
        entries.insert("flow.weight_decay", self.flow_weight_decay.to_string());
        entries.insert("flow.rk4_steps", self.flow_rk4_steps.to_string());
        entries.insert("eval.trajectories", self.eval_trajectories.to_string());
        entries.insert("eval.grid_points", self.eval_grid_points.to_string());
        entries.insert("eval.match_sizes", self.eval_match_sizes.to_string());
        entries.insert("nn.hidden_width", self.nn_hidden_width.to_string());
        entries.insert("nn.hidden_layers", self.nn_hidden_layers.to_string());
        entries.insert("nn.batch_norm", self.nn_batch_norm.to_string());
        entries.insert(
            "nn.activation",
            match self.nn_activation {
                Activation::SiLU => "silu".into(),
                Activation::ReLU => "relu".into(),
                Activation::Square => "square".into(),
            },
        );
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

fn parse_as<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse::<V>()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn fec(key: &str, value: &str, cfg: &mut ExperimentConfig) -> Result<()> {
    match key {
        "seed" => cfg.seed = parse_as(key, value)?,
        "synthetic.dim" => cfg.synthetic_dim = parse_as(key, value)?,
        "synthetic.cluster_std" => cfg.synthetic_cluster_std = parse_as(key, value)?,
        "synthetic.endpoint_count" => cfg.synthetic_endpoint_count = parse_as(key, value)?,
        "synthetic.intermediate_count" => cfg.synthetic_intermediate_count = parse_as(key, value)?,
        "synthetic.arm_height" => cfg.synthetic_arm_height = parse_as(key, value)?,
        "classifier.smoothing" => cfg.classifier_smoothing = parse_as(key, value)?,
        "classifier.batch" => cfg.classifier_batch = parse_as(key, value)?,
        "classifier.epochs" => cfg.classifier_epochs = parse_as(key, value)?,
        "classifier.lr" => cfg.classifier_lr = parse_as(key, value)?,
        "classifier.weight_decay" => cfg.classifier_weight_decay = parse_as(key, value)?,
        "classifier.patience" => cfg.classifier_patience = parse_as(key, value)?,
        "classifier.train_times" => {
            cfg.classifier_train_times = match value {
                "all" => TrainingData::AllTimepoints,
                "endpoints" => TrainingData::TrainTimepointsOnly,
                other => {
                    return Err(Error::Config(format!(
                        "classifier.train_times: expected 'all' or 'endpoints', got '{other}'"
                    )))
                }
            }
        }
        "finsler.lambda" => cfg.finsler_lambda = parse_as(key, value)?,
        "finsler.base" => {
            cfg.finsler_base = match value {
                "euclidean" => BaseKind::Euclidean,
                "rbf-density" => BaseKind::RbfDensity,
                other => {
                    return Err(Error::Config(format!(
                        "finsler.base: expected 'euclidean' or 'rbf-density', got '{other}'"
                    )))
                }
            }
        }
        "finsler.rbf.clusters" => cfg.finsler_rbf_clusters = parse_as(key, value)?,
        "finsler.rbf.bandwidth" => cfg.finsler_rbf_bandwidth = parse_as(key, value)?,
        "finsler.rbf.smoothing" => cfg.finsler_rbf_smoothing = parse_as(key, value)?,
        "embed.latent_dim" => cfg.embed_latent_dim = parse_as(key, value)?,
        "geodesic.stop_gradient_jacobian" => {
            cfg.geodesic_stop_gradient_jacobian = parse_as(key, value)?
        }
        "train.iters" => cfg.train_iters = parse_as(key, value)?,
        "train.batch" => cfg.train_batch = parse_as(key, value)?,
        "train.lr" => cfg.train_lr = parse_as(key, value)?,
        "train.weight_decay" => cfg.train_weight_decay = parse_as(key, value)?,
        "flow.iters" => cfg.flow_iters = parse_as(key, value)?,
        "flow.batch" => cfg.flow_batch = parse_as(key, value)?,
        "flow.lr" => cfg.flow_lr = parse_as(key, value)?,
        "flow.weight_decay" => cfg.flow_weight_decay = parse_as(key, value)?,
        "flow.rk4_steps" => cfg.flow_rk4_steps = parse_as(key, value)?,
        "eval.trajectories" => cfg.eval_trajectories = parse_as(key, value)?,
        "eval.grid_points" => cfg.eval_grid_points = parse_as(key, value)?,
        "eval.match_sizes" => cfg.eval_match_sizes = parse_as(key, value)?,
        "nn.hidden_width" => cfg.nn_hidden_width = parse_as(key, value)?,
        "nn.hidden_layers" => cfg.nn_hidden_layers = parse_as(key, value)?,
        "nn.batch_norm" => cfg.nn_batch_norm = parse_as(key, value)?,
        "nn.activation" => {
            cfg.nn_activation = match value {
                "silu" => Activation::SiLU,
                "relu" => Activation::ReLU,
                other => {
                    return Err(Error::Config(format!(
                        "nn.activation: expected 'silu' or 'relu', got '{other}'"
                    )))
                }
            }
        }
        other => return Err(Error::Config(format!("unknown config key '{other}'"))),
    }
    Ok(())
}
