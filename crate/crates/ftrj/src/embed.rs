//! Distance embedding, geodesic interpolant, and the joint metric-training
//! loop.
//!
//! The embedding approximates the asymmetric path distance as
//! `d̂(x, y) = ‖φ(x) − φ(y)‖ + relu(⟨ψ(x) − ψ(y), β⟩)` with learnable maps
//! `φ, ψ` (here `sym`/`asym`) and gate vector `β`; its first-order limit
//! `F̂(x, v) = ‖Jφ(x)·v‖ + relu(⟨−Jψ(x)·v, β⟩)` is fitted to the combined
//! metric through an absolute-deviation loss over tangent samples. Geodesics
//! are parameterized as `x_t = (1−t)x₀ + t·x₁ + t(1−t)·η(x₀, x₁, t)`, whose
//! correction network is trained by minimizing the squared metric along the
//! path under optimal-transport couplings taken in the learned distance.
//!
//! Per iteration the tangent distribution is the pushforward of
//! `(coupling × U[0,1])` through the interpolant; the same samples and metric
//! values feed both losses, and the embedding loss treats them as constants
//! (gradients reach the correction network only through the energy term).

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::classifier::Classifier;
use crate::data::TimeSeriesDataset;
use crate::error::{Error, Result};
use crate::finsler::{ConformalMetric, FinslerMetric};
use crate::lineage::{IllegalDirectionMatrix, LineageTree};
use crate::nn::{Activation, AdamW, JvpCache, MlpNetwork, TensorBundle, TimeEmbedding};
use crate::rng::component_rng;
use crate::scalar::Real;

/// Learnable asymmetric-distance embedding.
#[derive(Debug, Clone)]
pub struct EmbeddingModel<T> {
    /// Map feeding the symmetric norm term.
    pub(crate) sym: MlpNetwork<T>,
    /// Map feeding the gated asymmetric term.
    pub(crate) asym: MlpNetwork<T>,
    /// Gate vector; initialized away from zero so its relu passes gradient.
    asym_weights: Array1<T>,
}

/// Learnable geodesic correction on top of the straight-line interpolant.
#[derive(Debug, Clone)]
pub struct GeodesicModel<T> {
    pub(crate) net: MlpNetwork<T>,
    time_embed: TimeEmbedding<T>,
    dim: usize,
}

/// A batch of tangent-bundle samples `(x, v, t)`.
#[derive(Debug, Clone)]
pub struct TangentBatch<T> {
    pub x: Array2<T>,
    pub v: Array2<T>,
    pub t: Array1<T>,
}

impl<T: Real> EmbeddingModel<T> {
    pub fn new<R: Rng>(
        dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        activation: Activation,
        batch_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![dim];
        dims.extend_from_slice(hidden);
        dims.push(latent_dim);
        let sym = MlpNetwork::new(&dims, activation, batch_norm, rng)?;
        let asym = MlpNetwork::new(&dims, activation, batch_norm, rng)?;
        let asym_weights = Array1::from_shape_fn(latent_dim, |_| T::of(rng.gen_range(-0.1..0.1)));
        Ok(EmbeddingModel {
            sym,
            asym,
            asym_weights,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.sym.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.sym.output_dim()
    }

    pub fn asym_weights(&self) -> &Array1<T> {
        &self.asym_weights
    }

    pub fn set_asym_weights(&mut self, w: Array1<T>) {
        self.asym_weights = w;
    }

    /// Learned distance approximation, one value per row pair.
    pub fn distance_batch(&self, x: &Array2<T>, y: &Array2<T>) -> Result<Array1<T>> {
        if x.raw_dim() != y.raw_dim() {
            return Err(Error::DimensionMismatch("paired batches must share shape".into()));
        }
        let sx = self.sym.forward(x)?;
        let sy = self.sym.forward(y)?;
        let ax = self.asym.forward(x)?;
        let ay = self.asym.forward(y)?;
        let mut out = Array1::zeros(x.nrows());
        for i in 0..x.nrows() {
            out[i] = row_distance(
                sx.row(i).as_slice().unwrap(),
                sy.row(i).as_slice().unwrap(),
                ax.row(i).as_slice().unwrap(),
                ay.row(i).as_slice().unwrap(),
                self.asym_weights.as_slice().unwrap(),
            );
        }
        Ok(out)
    }

    /// Single-pair distance.
    pub fn distance(&self, x: ndarray::ArrayView1<T>, y: ndarray::ArrayView1<T>) -> Result<T> {
        let xb = x.insert_axis(Axis(0)).to_owned();
        let yb = y.insert_axis(Axis(0)).to_owned();
        Ok(self.distance_batch(&xb, &yb)?[0])
    }

    /// All-pairs distance matrix between two batches (rows = sources).
    pub fn pairwise_distance(&self, batch0: &Array2<T>, batch1: &Array2<T>) -> Result<Array2<T>> {
        let s0 = self.sym.forward(batch0)?;
        let s1 = self.sym.forward(batch1)?;
        let a0 = self.asym.forward(batch0)?.dot(&self.asym_weights);
        let a1 = self.asym.forward(batch1)?.dot(&self.asym_weights);
        let mut out = Array2::zeros((batch0.nrows(), batch1.nrows()));
        for i in 0..batch0.nrows() {
            let si = s0.row(i);
            for j in 0..batch1.nrows() {
                let mut d2 = T::zero();
                for (&a, &b) in si.iter().zip(s1.row(j).iter()) {
                    d2 += (a - b) * (a - b);
                }
                out[[i, j]] = d2.sqrt() + (a0[i] - a1[j]).max(T::zero());
            }
        }
        Ok(out)
    }

    /// First-order local cost `F̂(x, v)`, the `t → 0` limit of
    /// `d̂(x, x + t·v)/t`.
    pub fn tangent_norm(&self, x: &Array2<T>, v: &Array2<T>) -> Result<Array1<T>> {
        let sym_tangent = self.sym.jvp(x, v)?;
        let asym_tangent = self.asym.jvp(x, v)?;
        let mut out = Array1::zeros(x.nrows());
        for i in 0..x.nrows() {
            let norm = sym_tangent.row(i).iter().map(|&a| a * a).sum::<T>().sqrt();
            let gate = -asym_tangent.row(i).dot(&self.asym_weights);
            out[i] = norm + gate.max(T::zero());
        }
        Ok(out)
    }

    pub fn write_bundle(&self, prefix: &str, bundle: &mut TensorBundle) {
        self.sym.write_bundle(&format!("{prefix}.sym"), bundle);
        self.asym.write_bundle(&format!("{prefix}.asym"), bundle);
        bundle.push(
            format!("{prefix}.asym_weights"),
            vec![self.asym_weights.len()],
            self.asym_weights.iter().map(|v| v.to_f64_lossy()).collect(),
        );
    }

    pub fn read_bundle(prefix: &str, bundle: &TensorBundle) -> Result<Self> {
        let sym = MlpNetwork::read_bundle(&format!("{prefix}.sym"), bundle)?;
        let asym = MlpNetwork::read_bundle(&format!("{prefix}.asym"), bundle)?;
        let (_, w) = bundle
            .get(&format!("{prefix}.asym_weights"))
            .ok_or_else(|| Error::Data("missing asym_weights".into()))?;
        Ok(EmbeddingModel {
            sym,
            asym,
            asym_weights: Array1::from_vec(w.iter().map(|&v| T::of(v)).collect()),
        })
    }
}

fn row_distance<T: Real>(sx: &[T], sy: &[T], ax: &[T], ay: &[T], beta: &[T]) -> T {
    let mut d2 = T::zero();
    for (&a, &b) in sx.iter().zip(sy.iter()) {
        d2 += (a - b) * (a - b);
    }
    let mut gate = T::zero();
    for ((&a, &b), &w) in ax.iter().zip(ay.iter()).zip(beta.iter()) {
        gate += (a - b) * w;
    }
    d2.sqrt() + gate.max(T::zero())
}

impl<T: Real> GeodesicModel<T> {
    pub fn new<R: Rng>(
        dim: usize,
        hidden: &[usize],
        activation: Activation,
        batch_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let time_embed = TimeEmbedding::default();
        let mut dims = vec![2 * dim + time_embed.dim()];
        dims.extend_from_slice(hidden);
        dims.push(dim);
        let net = MlpNetwork::new(&dims, activation, batch_norm, rng)?;
        Ok(GeodesicModel {
            net,
            time_embed,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Mean absolute magnitude of the learned correction over a batch.
    pub fn correction_magnitude(&self, x0: &Array2<T>, x1: &Array2<T>, ts: &Array1<T>) -> Result<T> {
        let (input, _) = self.assemble_input(x0, x1, ts)?;
        let corr = self.net.forward(&input)?;
        let b = T::of(corr.nrows() as f64);
        Ok(corr
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&e| e * e).sum::<T>().sqrt())
            .sum::<T>()
            / b)
    }

    fn assemble_input(&self, x0: &Array2<T>, x1: &Array2<T>, ts: &Array1<T>) -> Result<(Array2<T>, Array2<T>)> {
        let b = x0.nrows();
        if x1.nrows() != b || ts.len() != b {
            return Err(Error::DimensionMismatch("interpolant batch sizes differ".into()));
        }
        let emb = self.time_embed.embed_batch(ts);
        let demb = self.time_embed.embed_deriv_batch(ts);
        let width = 2 * self.dim + self.time_embed.dim();
        let mut input = Array2::zeros((b, width));
        let mut tangent = Array2::zeros((b, width));
        for i in 0..b {
            for d in 0..self.dim {
                input[[i, d]] = x0[[i, d]];
                input[[i, self.dim + d]] = x1[[i, d]];
            }
            for k in 0..self.time_embed.dim() {
                input[[i, 2 * self.dim + k]] = emb[[i, k]];
                tangent[[i, 2 * self.dim + k]] = demb[[i, k]];
            }
        }
        Ok((input, tangent))
    }

    /// Interpolant position and velocity at `t` per pair.
    ///
    /// `x_t = (1−t)x₀ + t·x₁ + t(1−t)·η`; the velocity carries the exact
    /// forward-mode time derivative of the correction through the embedding,
    /// so no finite differences enter downstream losses. Boundary values are
    /// exact: `t = 0` returns `x₀` and `t = 1` returns `x₁` bitwise.
    pub fn interpolate(&self, x0: &Array2<T>, x1: &Array2<T>, ts: &Array1<T>) -> Result<(Array2<T>, Array2<T>)> {
        let (x, v, _) = self.interpolate_cached(x0, x1, ts)?;
        Ok((x, v))
    }

    /// [`Self::interpolate`] plus the forward-mode cache for backprop.
    pub fn interpolate_cached(
        &self,
        x0: &Array2<T>,
        x1: &Array2<T>,
        ts: &Array1<T>,
    ) -> Result<(Array2<T>, Array2<T>, JvpCache<T>)> {
        let (input, tangent) = self.assemble_input(x0, x1, ts)?;
        let cache = self.net.forward_jvp(&input, &tangent)?;
        let corr = &cache.output;
        let corr_dt = &cache.tangent_output;
        let b = x0.nrows();
        let mut x = Array2::zeros((b, self.dim));
        let mut v = Array2::zeros((b, self.dim));
        for i in 0..b {
            let t = ts[i];
            let bump = t * (T::one() - t);
            for d in 0..self.dim {
                x[[i, d]] = (T::one() - t) * x0[[i, d]] + t * x1[[i, d]] + bump * corr[[i, d]];
                v[[i, d]] = (x1[[i, d]] - x0[[i, d]])
                    + (T::one() - T::of(2.0) * t) * corr[[i, d]]
                    + bump * corr_dt[[i, d]];
            }
        }
        Ok((x, v, cache))
    }

    pub fn net(&self) -> &MlpNetwork<T> {
        &self.net
    }

    pub fn write_bundle(&self, prefix: &str, bundle: &mut TensorBundle) {
        self.net.write_bundle(&format!("{prefix}.net"), bundle);
        bundle.push(format!("{prefix}.dim"), vec![1], vec![self.dim as f64]);
    }

    pub fn read_bundle(prefix: &str, bundle: &TensorBundle) -> Result<Self> {
        let net = MlpNetwork::read_bundle(&format!("{prefix}.net"), bundle)?;
        let (_, d) = bundle
            .get(&format!("{prefix}.dim"))
            .ok_or_else(|| Error::Data("missing geodesic dim".into()))?;
        Ok(GeodesicModel {
            net,
            time_embed: TimeEmbedding::default(),
            dim: d[0] as usize,
        })
    }
}

/// Mean absolute deviation between the embedding's local cost and the metric
/// over a tangent batch.
pub fn embedding_loss<T: Real>(
    model: &EmbeddingModel<T>,
    metric: &FinslerMetric<'_, T>,
    batch: &TangentBatch<T>,
) -> Result<T> {
    if batch.x.nrows() == 0 {
        return Err(Error::Evaluation("embedding loss needs a nonempty batch".into()));
    }
    let targets = metric.norm(&batch.x, &batch.v)?;
    embedding_loss_with_targets(model, batch, &targets)
}

/// [`embedding_loss`] against precomputed metric values.
pub fn embedding_loss_with_targets<T: Real>(
    model: &EmbeddingModel<T>,
    batch: &TangentBatch<T>,
    targets: &Array1<T>,
) -> Result<T> {
    if targets.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric targets are non-finite".into()));
    }
    let fitted = model.tangent_norm(&batch.x, &batch.v)?;
    let b = T::of(targets.len() as f64);
    Ok(fitted
        .iter()
        .zip(targets.iter())
        .map(|(&f, &t)| (f - t).abs())
        .sum::<T>()
        / b)
}

/// Mean squared metric along interpolants of coupled pairs.
pub fn geodesic_energy_loss<T: Real>(
    geo: &GeodesicModel<T>,
    metric: &FinslerMetric<'_, T>,
    x0: &Array2<T>,
    x1: &Array2<T>,
    ts: &Array1<T>,
) -> Result<T> {
    let (x, v) = geo.interpolate(x0, x1, ts)?;
    let values = metric.norm(&x, &v)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric values are non-finite".into()));
    }
    let b = T::of(values.len() as f64);
    Ok(values.iter().map(|&f| f * f).sum::<T>() / b)
}

/// Options for the joint embedding/geodesic fit.
#[derive(Debug, Clone)]
pub struct MetricTrainOptions {
    pub iters: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub latent_dim: usize,
    /// Treat the classifier Jacobian and conformal scale as locally constant
    /// in the energy gradient (cheaper, default exact).
    pub stop_gradient_jacobian: bool,
    pub hidden: Vec<usize>,
    pub batch_norm: bool,
    pub activation: Activation,
}

impl Default for MetricTrainOptions {
    fn default() -> Self {
        MetricTrainOptions {
            iters: 400,
            batch_size: 2048,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            lambda: 0.5,
            latent_dim: 32,
            stop_gradient_jacobian: false,
            hidden: vec![256, 256, 256],
            batch_norm: true,
            activation: Activation::SiLU,
        }
    }
}

/// Loss history of a metric fit.
#[derive(Debug, Clone, Default)]
pub struct MetricTrainHistory {
    pub embedding: Vec<f64>,
    pub energy: Vec<f64>,
}

impl MetricTrainHistory {
    pub fn total(&self) -> Vec<f64> {
        self.embedding
            .iter()
            .zip(&self.energy)
            .map(|(a, b)| a + b)
            .collect()
    }
}

/// Jointly fit the distance embedding and geodesic correction (second
/// training phase: the classifier is frozen).
///
/// Each iteration samples equal minibatches from the two designated training
/// timepoints (the earliest and latest train tags), couples them by exact
/// assignment under the current learned distance, pushes the coupling through
/// the interpolant at per-pair uniform times, and takes one joint AdamW step
/// on the embedding loss plus the energy loss.
pub fn train_metric<T: Real>(
    data: &TimeSeriesDataset<T>,
    classifier: &Classifier<T>,
    tree: &LineageTree,
    base: &ConformalMetric<T>,
    opts: &MetricTrainOptions,
    seed: u64,
) -> Result<(EmbeddingModel<T>, GeodesicModel<T>, MetricTrainHistory)> {
    data.validate_against(tree)?;
    let train_times = data.train_timepoints();
    if train_times.len() < 2 {
        return Err(Error::Training("metric training needs two train timepoints".into()));
    }
    let t_first = train_times[0];
    let t_last = *train_times.last().unwrap();
    let idx0 = data.indices_at(t_first);
    let idx1 = data.indices_at(t_last);

    let illegal = IllegalDirectionMatrix::from_tree(tree);
    let metric = FinslerMetric::new(classifier, &illegal, base, T::of(opts.lambda))?;

    let mut init_rng = component_rng(seed, "metric-init");
    let dim = data.dim();
    let mut embedding = EmbeddingModel::new(
        dim,
        opts.latent_dim,
        &opts.hidden,
        opts.activation,
        opts.batch_norm,
        &mut init_rng,
    )?;
    let mut geodesic = GeodesicModel::new(dim, &opts.hidden, opts.activation, opts.batch_norm, &mut init_rng)?;

    let mut opt = AdamW::new(T::of(opts.learning_rate), T::of(opts.weight_decay));
    let mut batch_rng = component_rng(seed, "metric-batches");
    let mut history = MetricTrainHistory::default();

    let b = opts.batch_size.min(idx0.len()).min(idx1.len()).max(1);
    for iter in 0..opts.iters {
        // Draw the minibatches and times first: the stream of random draws
        // must not depend on metric values so runs with reduced priors stay
        // bitwise comparable.
        let mut pick0 = idx0.clone();
        let mut pick1 = idx1.clone();
        pick0.shuffle(&mut batch_rng);
        pick1.shuffle(&mut batch_rng);
        let x0 = data.select_points(&pick0[..b]);
        let x1 = data.select_points(&pick1[..b]);
        let ts = Array1::from_shape_fn(b, |_| T::of(batch_rng.gen_range(0.0..1.0)));

        // Coupling under the current learned distance.
        let cost = crate::transport::CostMatrix::new(embedding.pairwise_distance(&x0, &x1)?)?;
        let coupling = crate::transport::ot_coupling(&cost)?;
        let mut x1_matched = Array2::zeros(x1.raw_dim());
        for &(i, j, _) in &coupling.pairs {
            x1_matched.row_mut(i).assign(&x1.row(j));
        }

        // Tangent samples from the interpolant.
        let (xt, vt, geo_cache) = geodesic.interpolate_cached(&x0, &x1_matched, &ts)?;
        let eval = metric.norm_with_grads(&xt, &vt, opts.stop_gradient_jacobian)?;
        if eval.value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training(format!("non-finite metric value at iteration {iter}")));
        }

        // Energy loss and its cotangents through position and velocity.
        let bt = T::of(b as f64);
        let energy_loss = eval.value.iter().map(|&f| f * f).sum::<T>() / bt;
        let mut cot_out = Array2::zeros((b, dim));
        let mut cot_tan = Array2::zeros((b, dim));
        for i in 0..b {
            let w = T::of(2.0) * eval.value[i] / bt;
            let t = ts[i];
            let bump = t * (T::one() - t);
            let lin = T::one() - T::of(2.0) * t;
            for d in 0..dim {
                let gx = w * eval.grad_x[[i, d]];
                let gv = w * eval.grad_v[[i, d]];
                cot_out[[i, d]] = bump * gx + lin * gv;
                cot_tan[[i, d]] = bump * gv;
            }
        }
        let (geo_grads, _, _) = geodesic.net.backward_through_jvp(&geo_cache, &cot_out, &cot_tan)?;

        // Embedding loss on the same tangent samples (treated as constants).
        let sym_cache = embedding.sym.forward_jvp(&xt, &vt)?;
        let asym_cache = embedding.asym.forward_jvp(&xt, &vt)?;
        let mut emb_loss = T::zero();
        let mut cot_sym = Array2::zeros((b, embedding.latent_dim()));
        let mut cot_asym = Array2::zeros((b, embedding.latent_dim()));
        let mut grad_beta = Array1::zeros(embedding.latent_dim());
        for i in 0..b {
            let st = sym_cache.tangent_output.row(i);
            let at = asym_cache.tangent_output.row(i);
            let norm = st.iter().map(|&a| a * a).sum::<T>().sqrt();
            let gate_arg = -at.dot(&embedding.asym_weights);
            let fitted = norm + gate_arg.max(T::zero());
            let r = fitted - eval.value[i];
            emb_loss += r.abs();
            let sign = if r > T::zero() {
                T::one()
            } else if r < T::zero() {
                -T::one()
            } else {
                T::zero()
            } / bt;
            if norm > T::zero() {
                for d in 0..embedding.latent_dim() {
                    cot_sym[[i, d]] = sign * st[d] / norm;
                }
            }
            if gate_arg > T::zero() {
                for d in 0..embedding.latent_dim() {
                    cot_asym[[i, d]] = -sign * embedding.asym_weights[d];
                    grad_beta[d] -= sign * at[d];
                }
            }
        }
        emb_loss /= bt;
        let zero_out = Array2::zeros((b, embedding.latent_dim()));
        let (sym_grads, _, _) = embedding.sym.backward_through_jvp(&sym_cache, &zero_out, &cot_sym)?;
        let (asym_grads, _, _) = embedding.asym.backward_through_jvp(&asym_cache, &zero_out, &cot_asym)?;

        if !(emb_loss + energy_loss).is_finite() {
            return Err(Error::Training(format!("non-finite loss at iteration {iter}")));
        }
        history.embedding.push(emb_loss.to_f64_lossy());
        history.energy.push(energy_loss.to_f64_lossy());

        // One joint step over embedding, gate vector, and correction net.
        let mut grad_slices = sym_grads.slices();
        grad_slices.extend(asym_grads.slices());
        grad_slices.push(grad_beta.as_slice().expect("standard layout"));
        grad_slices.extend(geo_grads.slices());
        let mut params = embedding.sym.param_slices_mut();
        params.extend(embedding.asym.param_slices_mut());
        params.push(embedding.asym_weights.as_slice_mut().expect("standard layout"));
        params.extend(geodesic.net.param_slices_mut());
        opt.step(&mut params, &grad_slices)?;
    }
    Ok((embedding, geodesic, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Classifier;
    use crate::lineage::LineageTree;
    use crate::rng::component_rng;
    use ndarray::array;

    fn small_embedding(dim: usize, latent: usize, seed: u64) -> EmbeddingModel<f64> {
        let mut rng = component_rng(seed, "emb");
        EmbeddingModel::new(dim, latent, &[16, 16], Activation::SiLU, true, &mut rng).unwrap()
    }

    fn small_geodesic(dim: usize, seed: u64) -> GeodesicModel<f64> {
        let mut rng = component_rng(seed, "geo");
        GeodesicModel::new(dim, &[16, 16], Activation::SiLU, true, &mut rng).unwrap()
    }

    fn rand_batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        use rand::Rng;
        let mut rng = component_rng(seed, "emb-batch");
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    fn logistic_classifier(k: f64) -> Classifier<f64> {
        let mut rng = component_rng(0, "logistic");
        let mut net = MlpNetwork::new(&[1, 2], Activation::SiLU, false, &mut rng).unwrap();
        net.layers[0].weight = array![[0.0, k]];
        net.layers[0].bias = Array1::zeros(2);
        Classifier::new(net, 0.0)
    }

    #[test]
    fn distance_is_zero_on_the_diagonal() {
        let model = small_embedding(3, 8, 1);
        let x = rand_batch(6, 3, 2);
        let d = model.distance_batch(&x, &x).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gate_vector_makes_the_distance_symmetric() {
        let mut model = small_embedding(3, 8, 3);
        model.set_asym_weights(Array1::zeros(8));
        let x = rand_batch(5, 3, 4);
        let y = rand_batch(5, 3, 5);
        let fwd = model.distance_batch(&x, &y).unwrap();
        let back = model.distance_batch(&y, &x).unwrap();
        for i in 0..5 {
            assert!((fwd[i] - back[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_backward_sum_matches_relu_identity() {
        // relu(a) + relu(−a) = |a| turns the asymmetric terms into an
        // absolute value when summed over both orientations.
        let model = small_embedding(3, 8, 6);
        let x = rand_batch(8, 3, 7);
        let y = rand_batch(8, 3, 8);
        let fwd = model.distance_batch(&x, &y).unwrap();
        let back = model.distance_batch(&y, &x).unwrap();
        let sx = model.sym.forward(&x).unwrap();
        let sy = model.sym.forward(&y).unwrap();
        let ax = model.asym.forward(&x).unwrap();
        let ay = model.asym.forward(&y).unwrap();
        for i in 0..8 {
            let dsym = (&sx.row(i) - &sy.row(i)).mapv(|v| v * v).sum().sqrt();
            let gate = (&ax.row(i) - &ay.row(i)).dot(&model.asym_weights);
            let expect = 2.0 * dsym + gate.abs();
            assert!((fwd[i] + back[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn tangent_norm_is_positively_homogeneous_and_zero_at_zero() {
        let model = small_embedding(4, 8, 9);
        let x = rand_batch(6, 4, 10);
        let v = rand_batch(6, 4, 11);
        let zero = Array2::zeros((6, 4));
        assert!(model.tangent_norm(&x, &zero).unwrap().iter().all(|&f| f == 0.0));
        let f1 = model.tangent_norm(&x, &v).unwrap();
        let f3 = model.tangent_norm(&x, &(&v * 3.0)).unwrap();
        for i in 0..6 {
            let denom = f3[i].abs().max(1e-300);
            assert!((f3[i] - 3.0 * f1[i]).abs() / denom <= 1e-12);
        }
    }

    #[test]
    fn tangent_norm_is_the_short_distance_limit() {
        let model = small_embedding(3, 8, 12);
        let x = rand_batch(4, 3, 13);
        let v = rand_batch(4, 3, 14);
        let local = model.tangent_norm(&x, &v).unwrap();
        let mut prev_err = f64::INFINITY;
        for &step in &[1e-2, 1e-3, 1e-4] {
            let y = &x + &(&v * step);
            let d = model.distance_batch(&x, &y).unwrap();
            let err = (0..4)
                .map(|i| (d[i] / step - local[i]).abs())
                .fold(0.0f64, f64::max);
            assert!(err < prev_err, "error should shrink with the step");
            prev_err = err;
        }
        assert!(prev_err < 1e-2, "limit mismatch {prev_err}");
    }

    #[test]
    fn interpolant_boundaries_are_bitwise_exact() {
        let geo = small_geodesic(3, 15);
        let x0 = rand_batch(5, 3, 16);
        let x1 = rand_batch(5, 3, 17);
        let (at0, _) = geo.interpolate(&x0, &x1, &Array1::zeros(5)).unwrap();
        assert_eq!(at0, x0);
        let (at1, _) = geo.interpolate(&x0, &x1, &Array1::from_elem(5, 1.0)).unwrap();
        assert_eq!(at1, x1);
    }

    #[test]
    fn zero_correction_gives_straight_lines() {
        let mut geo = small_geodesic(2, 18);
        for layer in &mut geo.net.layers {
            layer.weight.fill(0.0);
            layer.bias.fill(0.0);
        }
        let x0 = rand_batch(4, 2, 19);
        let x1 = rand_batch(4, 2, 20);
        let ts = Array1::from_vec(vec![0.25, 0.5, 0.75, 0.9]);
        let (x, v) = geo.interpolate(&x0, &x1, &ts).unwrap();
        for i in 0..4 {
            for d in 0..2 {
                let expect = (1.0 - ts[i]) * x0[[i, d]] + ts[i] * x1[[i, d]];
                assert!((x[[i, d]] - expect).abs() < 1e-15);
                assert!((v[[i, d]] - (x1[[i, d]] - x0[[i, d]])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn interpolant_velocity_matches_time_finite_differences() {
        let geo = small_geodesic(3, 21);
        let x0 = rand_batch(4, 3, 22);
        let x1 = rand_batch(4, 3, 23);
        // The top of the frequency ladder puts ω³ ≈ 2.5e9 into the FD
        // truncation term, so the step must be small enough that h²ω³ stays
        // below the tolerance. The velocity itself is exact forward-mode.
        let h = 1e-7;
        for &t in &[0.2, 0.5, 0.8] {
            let ts = Array1::from_elem(4, t);
            let (_, v) = geo.interpolate(&x0, &x1, &ts).unwrap();
            let (xp, _) = geo.interpolate(&x0, &x1, &Array1::from_elem(4, t + h)).unwrap();
            let (xm, _) = geo.interpolate(&x0, &x1, &Array1::from_elem(4, t - h)).unwrap();
            let fd = (&xp - &xm) / (2.0 * h);
            for (a, b) in v.iter().zip(fd.iter()) {
                let mag = a.abs().max(1.0);
                assert!((a - b).abs() / mag < 1e-6, "{a} vs {b} at t={t}");
            }
        }
    }

    #[test]
    fn embedding_loss_is_zero_for_a_perfect_fit() {
        // φ the identity and ψ ≡ 0 reproduce the flat metric exactly.
        let mut rng = component_rng(24, "perfect");
        let mut model = EmbeddingModel::<f64>::new(2, 2, &[], Activation::SiLU, false, &mut rng).unwrap();
        model.sym.layers[0].weight = Array2::eye(2);
        model.sym.layers[0].bias = Array1::zeros(2);
        model.asym.layers[0].weight = Array2::zeros((2, 2));
        model.asym.layers[0].bias = Array1::zeros(2);
        model.set_asym_weights(Array1::zeros(2));

        let clf = logistic_classifier(1.0);
        // Classifier input dim is 1 but the metric only consumes it through
        // the penalty, which λ = 0 switches off entirely; use a 2-input one.
        let mut rng2 = component_rng(25, "clf2");
        let net = MlpNetwork::new(&[2, 2], Activation::SiLU, false, &mut rng2).unwrap();
        let clf2 = Classifier::new(net, 0.0);
        drop(clf);
        let tree = LineageTree::full(vec!["a".into(), "b".into()]).unwrap();
        let m = IllegalDirectionMatrix::from_tree(&tree);
        let base = ConformalMetric::Euclidean;
        let metric = FinslerMetric::new(&clf2, &m, &base, 0.0).unwrap();

        let batch = TangentBatch {
            x: rand_batch(10, 2, 26),
            v: rand_batch(10, 2, 27),
            t: Array1::zeros(10),
        };
        let loss = embedding_loss(&model, &metric, &batch).unwrap();
        assert!(loss <= 1e-14, "perfect fit should have zero loss, got {loss}");
    }

    #[test]
    fn embedding_loss_single_sample_arithmetic() {
        // fitted = |0.4 · 5| = 2 against target 5 gives loss 3.
        let mut rng = component_rng(28, "arith");
        let mut model = EmbeddingModel::<f64>::new(1, 1, &[], Activation::SiLU, false, &mut rng).unwrap();
        model.sym.layers[0].weight = array![[0.4]];
        model.sym.layers[0].bias = Array1::zeros(1);
        model.asym.layers[0].weight = Array2::zeros((1, 1));
        model.asym.layers[0].bias = Array1::zeros(1);
        model.set_asym_weights(Array1::zeros(1));
        let batch = TangentBatch {
            x: array![[0.0]],
            v: array![[5.0]],
            t: Array1::zeros(1),
        };
        let targets = Array1::from_vec(vec![5.0]);
        let loss = embedding_loss_with_targets(&model, &batch, &targets).unwrap();
        assert!((loss - 3.0).abs() < 1e-15);
    }

    #[test]
    fn embedding_loss_matches_per_sample_recomputation() {
        let model = small_embedding(3, 8, 29);
        let clf = {
            let mut rng = component_rng(30, "clf3");
            let net = MlpNetwork::new(&[3, 8, 2], Activation::SiLU, false, &mut rng).unwrap();
            Classifier::new(net, 0.0)
        };
        let tree = LineageTree::from_edges(vec!["a".into(), "b".into()], &[(0, 1)]).unwrap();
        let m = IllegalDirectionMatrix::from_tree(&tree);
        let base = ConformalMetric::Euclidean;
        let metric = FinslerMetric::new(&clf, &m, &base, 0.7).unwrap();
        let batch = TangentBatch {
            x: rand_batch(12, 3, 31),
            v: rand_batch(12, 3, 32),
            t: Array1::zeros(12),
        };
        let loss = embedding_loss(&model, &metric, &batch).unwrap();
        let mut acc = 0.0;
        for i in 0..12 {
            let x = batch.x.row(i).insert_axis(Axis(0)).to_owned();
            let v = batch.v.row(i).insert_axis(Axis(0)).to_owned();
            let fitted = model.tangent_norm(&x, &v).unwrap()[0];
            let target = metric.norm(&x, &v).unwrap()[0];
            acc += (fitted - target).abs();
        }
        acc /= 12.0;
        assert!((loss - acc).abs() < 1e-12, "{loss} vs {acc}");
    }

    #[test]
    fn straight_line_energy_is_mean_squared_displacement() {
        let mut geo = small_geodesic(2, 33);
        for layer in &mut geo.net.layers {
            layer.weight.fill(0.0);
            layer.bias.fill(0.0);
        }
        let clf = {
            let mut rng = component_rng(34, "clf4");
            let net = MlpNetwork::new(&[2, 2], Activation::SiLU, false, &mut rng).unwrap();
            Classifier::new(net, 0.0)
        };
        let tree = LineageTree::from_edges(vec!["a".into(), "b".into()], &[(0, 1)]).unwrap();
        let m = IllegalDirectionMatrix::from_tree(&tree);
        let base = ConformalMetric::Euclidean;
        let metric = FinslerMetric::new(&clf, &m, &base, 0.0).unwrap();
        let x0 = rand_batch(6, 2, 35);
        let x1 = rand_batch(6, 2, 36);
        let ts = Array1::from_vec(vec![0.1, 0.3, 0.5, 0.6, 0.8, 0.9]);
        let loss = geodesic_energy_loss(&geo, &metric, &x0, &x1, &ts).unwrap();
        let expect = (0..6)
            .map(|i| (&x1.row(i) - &x0.row(i)).mapv(|v| v * v).sum())
            .sum::<f64>()
            / 6.0;
        assert!((loss - expect).abs() < 1e-12);

        // Fully admissible prior must match the unpenalized loss exactly even
        // at positive lambda.
        let full = LineageTree::full(vec!["a".into(), "b".into()]).unwrap();
        let m_full = IllegalDirectionMatrix::from_tree(&full);
        let metric_full = FinslerMetric::new(&clf, &m_full, &base, 0.8).unwrap();
        let loss_full = geodesic_energy_loss(&geo, &metric_full, &x0, &x1, &ts).unwrap();
        assert_eq!(loss, loss_full);
    }

    #[test]
    fn energy_gradient_matches_finite_differences_on_a_parameter() {
        let geo = small_geodesic(2, 37);
        let clf = {
            let mut rng = component_rng(38, "clf5");
            let net = MlpNetwork::new(&[2, 8, 3], Activation::SiLU, false, &mut rng).unwrap();
            Classifier::new(net, 0.0)
        };
        let tree =
            LineageTree::from_edges(vec!["a".into(), "b".into(), "c".into()], &[(0, 1), (1, 2)]).unwrap();
        let m = IllegalDirectionMatrix::from_tree(&tree);
        let base = ConformalMetric::Euclidean;
        let metric = FinslerMetric::new(&clf, &m, &base, 0.6).unwrap();
        let x0 = rand_batch(4, 2, 39);
        let x1 = rand_batch(4, 2, 40);
        let ts = Array1::from_vec(vec![0.2, 0.4, 0.6, 0.8]);

        // Analytic gradient through the full pipeline.
        let (xt, vt, cache) = geo.interpolate_cached(&x0, &x1, &ts).unwrap();
        let eval = metric.norm_with_grads(&xt, &vt, false).unwrap();
        let b = 4.0;
        let mut cot_out = Array2::zeros((4, 2));
        let mut cot_tan = Array2::zeros((4, 2));
        for i in 0..4 {
            let w = 2.0 * eval.value[i] / b;
            let t = ts[i];
            let bump = t * (1.0 - t);
            let lin = 1.0 - 2.0 * t;
            for d in 0..2 {
                cot_out[[i, d]] = bump * w * eval.grad_x[[i, d]] + lin * w * eval.grad_v[[i, d]];
                cot_tan[[i, d]] = bump * w * eval.grad_v[[i, d]];
            }
        }
        let (grads, _, _) = geo.net.backward_through_jvp(&cache, &cot_out, &cot_tan).unwrap();

        let h = 1e-6;
        for (layer, r, c) in [(0usize, 1usize, 3usize), (1usize, 5usize, 0usize)] {
            let mut plus = geo.clone();
            plus.net.layers[layer].weight[[r, c]] += h;
            let mut minus = geo.clone();
            minus.net.layers[layer].weight[[r, c]] -= h;
            let lp = geodesic_energy_loss(&plus, &metric, &x0, &x1, &ts).unwrap();
            let lm = geodesic_energy_loss(&minus, &metric, &x0, &x1, &ts).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let g = grads.weights[layer][[r, c]];
            let mag = fd.abs().max(1e-3);
            assert!((g - fd).abs() / mag < 1e-3, "layer {layer} ({r},{c}): {g} vs {fd}");
        }
    }

    fn two_point_dataset() -> (TimeSeriesDataset<f64>, LineageTree) {
        let points = array![[0.0], [1.0]];
        let ds = TimeSeriesDataset::new(points, vec![0, 1], vec![0.0, 1.0]).unwrap();
        let tree = LineageTree::from_edges(vec!["a".into(), "b".into()], &[(0, 1)]).unwrap();
        (ds, tree)
    }

    #[test]
    fn flat_metric_training_recovers_the_straight_segment() {
        let (ds, tree) = two_point_dataset();
        let mut rng = component_rng(41, "clf-flat");
        let net = MlpNetwork::new(&[1, 2], Activation::SiLU, false, &mut rng).unwrap();
        let clf = Classifier::new(net, 0.0);
        let base = ConformalMetric::Euclidean;
        let opts = MetricTrainOptions {
            iters: 600,
            batch_size: 2,
            lambda: 0.0,
            latent_dim: 4,
            hidden: vec![32, 32],
            ..MetricTrainOptions::default()
        };
        let (_, geo, history) = train_metric(&ds, &clf, &tree, &base, &opts, 0).unwrap();
        let (mid, _) = geo
            .interpolate(&array![[0.0]], &array![[1.0]], &Array1::from_elem(1, 0.5))
            .unwrap();
        assert!(
            (mid[[0, 0]] - 0.5).abs() <= 0.05,
            "midpoint {} should sit on the segment",
            mid[[0, 0]]
        );
        // The correction shrinks toward zero on a flat geometry.
        let mag = geo
            .correction_magnitude(&array![[0.0]], &array![[1.0]], &Array1::from_elem(1, 0.5))
            .unwrap();
        assert!(mag <= 0.1, "flat geometry wants no correction, got {mag}");
        assert_eq!(history.energy.len(), 600);
    }
}
