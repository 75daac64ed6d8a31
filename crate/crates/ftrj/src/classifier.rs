//! Cell-type classifier whose Jacobian drives the lineage penalty.
//!
//! The classifier maps ambient points to the probability simplex over the
//! lineage classes through an MLP with a softmax head, trained with
//! cross-entropy under label smoothing. Smoothing keeps the outputs away from
//! the simplex vertices so the Jacobian carries signal everywhere, which the
//! penalty construction relies on.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use crate::data::TimeSeriesDataset;
use crate::error::{Error, Result};
use crate::lineage::LineageTree;
use crate::nn::{Activation, AdamW, ForwardCache, MlpNetwork, Mode, TensorBundle};
use crate::rng::component_rng;
use crate::scalar::Real;

/// Learned map from ambient space to the class-probability simplex.
#[derive(Debug, Clone)]
pub struct Classifier<T> {
    net: MlpNetwork<T>,
    label_smoothing: T,
}

/// Which samples the classifier may train on.
///
/// `AllTimepoints` treats class labels at held-out times as prior knowledge
/// (positions at those times are still never used as regression targets
/// anywhere else); `TrainTimepointsOnly` restricts to the train marginals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingData {
    AllTimepoints,
    TrainTimepointsOnly,
}

/// Training options; defaults follow the experiment setup.
#[derive(Debug, Clone)]
pub struct ClassifierOptions {
    pub label_smoothing: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Early-stopping patience in epochs over a 10% validation split.
    pub patience: usize,
    pub training_data: TrainingData,
    pub hidden: Vec<usize>,
    pub batch_norm: bool,
    pub activation: Activation,
}

impl Default for ClassifierOptions {
    fn default() -> Self {
        ClassifierOptions {
            label_smoothing: 0.03,
            batch_size: 512,
            max_epochs: 200,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            patience: 20,
            training_data: TrainingData::AllTimepoints,
            hidden: vec![256, 256, 256],
            batch_norm: true,
            activation: Activation::SiLU,
        }
    }
}

/// Outcome summary of a classifier fit.
#[derive(Debug, Clone)]
pub struct ClassifierReport {
    pub val_accuracy: f64,
    pub epochs_run: usize,
    pub final_train_loss: f64,
    pub warnings: Vec<String>,
}

/// Row-wise numerically stable softmax.
pub fn softmax<T: Real>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Row-wise softmax Jacobian action: `S(p)·w = p⊙w − p·(pᵀw)`.
pub fn softmax_jacobian_apply<T: Real>(probs: &Array2<T>, w: &Array2<T>) -> Array2<T> {
    let dots = (probs * w).sum_axis(Axis(1));
    let mut out = probs * w;
    for (mut row, (&d, p_row)) in out.rows_mut().into_iter().zip(dots.iter().zip(probs.rows())) {
        for (o, &p) in row.iter_mut().zip(p_row.iter()) {
            *o = *o - p * d;
        }
    }
    out
}

impl<T: Real> Classifier<T> {
    pub fn new(net: MlpNetwork<T>, label_smoothing: T) -> Self {
        Classifier { net, label_smoothing }
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.net.output_dim()
    }

    pub fn label_smoothing(&self) -> T {
        self.label_smoothing
    }

    pub fn net(&self) -> &MlpNetwork<T> {
        &self.net
    }

    /// Class probabilities, one simplex row per sample.
    pub fn predict_proba(&self, x: &Array2<T>) -> Result<Array2<T>> {
        Ok(softmax(&self.net.forward(x)?))
    }

    /// Probabilities plus the logits-network cache for derivative reuse.
    pub fn proba_cached(&self, x: &Array2<T>) -> Result<(Array2<T>, ForwardCache<T>)> {
        let (logits, cache) = self.net.forward_cached(x)?;
        Ok((softmax(&logits), cache))
    }

    /// `Jf(x)ᵀ·w` through the softmax head, one row per sample.
    pub fn vjp(&self, x: &Array2<T>, w: &Array2<T>) -> Result<Array2<T>> {
        let (probs, cache) = self.proba_cached(x)?;
        self.vjp_with(&cache, &probs, w)
    }

    /// VJP reusing a cached forward pass.
    pub fn vjp_with(&self, cache: &ForwardCache<T>, probs: &Array2<T>, w: &Array2<T>) -> Result<Array2<T>> {
        let cot = softmax_jacobian_apply(probs, w);
        self.net.vjp_cached(cache, &cot)
    }

    /// `Jf(x)·v` through the softmax head (probability-space tangent).
    pub fn jvp(&self, x: &Array2<T>, v: &Array2<T>) -> Result<Array2<T>> {
        let cache = self.net.forward_jvp(x, v)?;
        let probs = softmax(&cache.output);
        Ok(softmax_jacobian_apply(&probs, &cache.tangent_output))
    }

    /// Logits-space queries used by the metric gradients.
    pub fn logits_jvp_cached(
        &self,
        x: &Array2<T>,
        v: &Array2<T>,
    ) -> Result<crate::nn::JvpCache<T>> {
        self.net.forward_jvp(x, v)
    }

    pub fn logits_vjp_cached(&self, cache: &ForwardCache<T>, cot: &Array2<T>) -> Result<Array2<T>> {
        self.net.vjp_cached(cache, cot)
    }

    /// `∂/∂x [Jz(x)ᵀw]·u` on the logits network.
    pub fn logits_second_order(
        &self,
        x: &Array2<T>,
        w: &Array2<T>,
        u: &Array2<T>,
    ) -> Result<(Array2<T>, Array2<T>)> {
        self.net.second_order(x, w, u)
    }

    pub fn write_bundle(&self, prefix: &str, bundle: &mut TensorBundle) {
        self.net.write_bundle(&format!("{prefix}.net"), bundle);
        bundle.push(
            format!("{prefix}.label_smoothing"),
            vec![1],
            vec![self.label_smoothing.to_f64_lossy()],
        );
    }

    pub fn read_bundle(prefix: &str, bundle: &TensorBundle) -> Result<Self> {
        let net = MlpNetwork::read_bundle(&format!("{prefix}.net"), bundle)?;
        let (_, s) = bundle
            .get(&format!("{prefix}.label_smoothing"))
            .ok_or_else(|| Error::Data("missing label_smoothing".into()))?;
        Ok(Classifier::new(net, T::of(s[0])))
    }
}

/// Smoothed one-hot targets: `(1−s)·onehot + s/|C|`.
fn smoothed_targets<T: Real>(labels: &[usize], num_classes: usize, smoothing: T) -> Array2<T> {
    let uniform = smoothing / T::of(num_classes as f64);
    let mut q = Array2::from_elem((labels.len(), num_classes), uniform);
    for (i, &l) in labels.iter().enumerate() {
        q[[i, l]] = q[[i, l]] + (T::one() - smoothing);
    }
    q
}

/// Mean cross-entropy against smoothed targets, plus the logits gradient.
fn ce_loss_and_grad<T: Real>(logits: &Array2<T>, targets: &Array2<T>) -> (T, Array2<T>) {
    let b = T::of(logits.nrows() as f64);
    let probs = softmax(logits);
    let mut loss = T::zero();
    for (p_row, q_row) in probs.rows().into_iter().zip(targets.rows()) {
        for (&p, &q) in p_row.iter().zip(q_row.iter()) {
            if q > T::zero() {
                loss -= q * p.max(T::of(1e-300)).ln();
            }
        }
    }
    let grad = (&probs - targets) / b;
    (loss / b, grad)
}

/// Fit a classifier on the labeled dataset.
///
/// Deterministic given `(seed, data)`: batching, the validation split, and
/// initialization all derive from the seed. Training stops early when the
/// validation loss has not improved for `patience` epochs and the
/// best-validation parameters are restored.
pub fn train_classifier<T: Real>(
    data: &TimeSeriesDataset<T>,
    tree: &LineageTree,
    opts: &ClassifierOptions,
    seed: u64,
) -> Result<(Classifier<T>, ClassifierReport)> {
    data.validate_against(tree)?;
    let num_classes = tree.num_classes();
    let mut warnings = Vec::new();

    let keep: Vec<usize> = match opts.training_data {
        TrainingData::AllTimepoints => (0..data.len()).collect(),
        TrainingData::TrainTimepointsOnly => {
            let train_times = data.train_timepoints();
            (0..data.len())
                .filter(|&i| train_times.contains(&data.times()[i]))
                .collect()
        }
    };
    for c in 0..num_classes {
        if !keep.iter().any(|&i| data.labels()[i] == c) {
            warnings.push(format!(
                "class {} ('{}') absent from classifier training data",
                c,
                tree.class_names()[c]
            ));
        }
    }

    let mut rng = component_rng(seed, "classifier");
    let mut dims = vec![data.dim()];
    dims.extend_from_slice(&opts.hidden);
    dims.push(num_classes);
    let mut net = MlpNetwork::<T>::new(&dims, opts.activation, opts.batch_norm, &mut rng)?;
    let mut opt = AdamW::new(T::of(opts.learning_rate), T::of(opts.weight_decay));
    let smoothing = T::of(opts.label_smoothing);

    // 10% validation split (seeded), at least one sample when possible.
    let mut order = keep.clone();
    order.shuffle(&mut rng);
    let val_len = (order.len() / 10).min(order.len().saturating_sub(1));
    let (val_idx, train_idx) = order.split_at(val_len);
    let train_idx = train_idx.to_vec();
    let val_idx = val_idx.to_vec();

    let val_x = data.select_points(&val_idx);
    let val_y: Vec<usize> = val_idx.iter().map(|&i| data.labels()[i]).collect();
    let val_q = smoothed_targets(&val_y, num_classes, smoothing);

    let mut best_val = T::infinity();
    let mut best_net = net.clone();
    let mut since_best = 0usize;
    let mut epochs_run = 0usize;
    let mut last_train_loss = T::zero();

    let mut epoch_order = train_idx.clone();
    for epoch in 0..opts.max_epochs {
        epochs_run = epoch + 1;
        epoch_order.shuffle(&mut rng);
        net.set_mode(Mode::Training);
        let mut epoch_loss = T::zero();
        let mut batches = 0usize;
        for chunk in epoch_order.chunks(opts.batch_size.max(1)) {
            let x = data.select_points(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
            let q = smoothed_targets(&y, num_classes, smoothing);
            let (logits, cache) = net.forward_train_cached(&x)?;
            let (loss, grad) = ce_loss_and_grad(&logits, &q);
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite classifier loss at epoch {epoch}"
                )));
            }
            epoch_loss += loss;
            batches += 1;
            let (grads, _) = net.backward(&cache, &grad)?;
            let grad_slices = grads.slices();
            let mut params = net.param_slices_mut();
            opt.step(&mut params, &grad_slices)?;
        }
        last_train_loss = epoch_loss / T::of(batches.max(1) as f64);
        net.set_mode(Mode::Inference);

        if !val_idx.is_empty() {
            let logits = net.forward(&val_x)?;
            let (val_loss, _) = ce_loss_and_grad(&logits, &val_q);
            if val_loss < best_val {
                best_val = val_loss;
                best_net = net.clone();
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= opts.patience {
                    break;
                }
            }
        }
    }
    if !val_idx.is_empty() {
        net = best_net;
    }
    net.set_mode(Mode::Inference);

    let classifier = Classifier::new(net, smoothing);
    let val_accuracy = if val_idx.is_empty() {
        f64::NAN
    } else {
        let probs = classifier.predict_proba(&val_x)?;
        let correct = probs
            .rows()
            .into_iter()
            .zip(&val_y)
            .filter(|(row, &y)| argmax(row.as_slice().unwrap()) == y)
            .count();
        correct as f64 / val_y.len() as f64
    };
    Ok((
        classifier,
        ClassifierReport {
            val_accuracy,
            epochs_run,
            final_train_loss: last_train_loss.to_f64_lossy(),
            warnings,
        },
    ))
}

/// Index of the row maximum (first on ties).
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
