//! Dense multilayer perceptron with hand-rolled derivative queries.
//!
//! Layout conventions: batches are row-major `(batch, features)`, layer
//! weights are `(fan_in, fan_out)`, so a layer computes `z = h·W + b`. Hidden
//! layers apply optional batch normalization followed by the activation; the
//! output layer is linear.
//!
//! Batch normalization has two modes. In training mode it normalizes with
//! batch statistics (and `forward_train_cached` updates the running
//! estimates); in inference mode it is a frozen per-feature affine map, which
//! makes every per-sample derivative query well-defined. JVP/VJP and
//! second-order queries therefore require inference mode.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::activation::Activation;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Batch-normalization execution mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub(crate) struct BatchNorm<T> {
    pub scale: Array1<T>,
    pub shift: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
}

impl<T: Real> BatchNorm<T> {
    fn identity(dim: usize) -> Self {
        BatchNorm {
            scale: Array1::from_elem(dim, T::one()),
            shift: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::from_elem(dim, T::one()),
        }
    }

    /// Frozen-statistics inverse standard deviation.
    fn running_inv_std(&self) -> Array1<T> {
        self.running_var.mapv(|v| (v + T::of(BN_EPS)).sqrt().recip())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Layer<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub norm: Option<BatchNorm<T>>,
}

/// Dense feed-forward network.
#[derive(Debug, Clone)]
pub struct MlpNetwork<T> {
    pub(crate) layers: Vec<Layer<T>>,
    dims: Vec<usize>,
    activation: Activation,
    batch_norm: bool,
    mode: Mode,
}

/// Per-layer parameter gradients, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
    pub scales: Vec<Option<Array1<T>>>,
    pub shifts: Vec<Option<Array1<T>>>,
}

impl<T: Real> Gradients<T> {
    fn zeros_like(net: &MlpNetwork<T>) -> Self {
        Gradients {
            weights: net.layers.iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect(),
            biases: net.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
            scales: net
                .layers
                .iter()
                .map(|l| l.norm.as_ref().map(|n| Array1::zeros(n.scale.raw_dim())))
                .collect(),
            shifts: net
                .layers
                .iter()
                .map(|l| l.norm.as_ref().map(|n| Array1::zeros(n.shift.raw_dim())))
                .collect(),
        }
    }

    /// Flat slices in the same canonical order as [`MlpNetwork::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for l in 0..self.weights.len() {
            out.push(self.weights[l].as_slice().expect("standard layout"));
            out.push(self.biases[l].as_slice().expect("standard layout"));
            if let Some(s) = &self.scales[l] {
                out.push(s.as_slice().expect("standard layout"));
            }
            if let Some(s) = &self.shifts[l] {
                out.push(s.as_slice().expect("standard layout"));
            }
        }
        out
    }
}

/// Activations recorded by a forward pass, consumed by [`MlpNetwork::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Input to each layer (`inputs[0]` is the batch itself).
    inputs: Vec<Array2<T>>,
    /// Pre-normalization linear outputs of hidden layers.
    lin: Vec<Array2<T>>,
    /// Post-normalization activation inputs of hidden layers.
    act_in: Vec<Array2<T>>,
    /// `(batch_mean, batch_inv_std)` per hidden layer when batch statistics were used.
    bn_batch: Vec<Option<(Array1<T>, Array1<T>)>>,
    pub output: Array2<T>,
}

/// Primal and tangent activations of a forward-mode pass.
#[derive(Debug, Clone)]
pub struct JvpCache<T> {
    inputs: Vec<Array2<T>>,
    tangent_inputs: Vec<Array2<T>>,
    lin: Vec<Array2<T>>,
    lin_tangent: Vec<Array2<T>>,
    act_in: Vec<Array2<T>>,
    act_in_tangent: Vec<Array2<T>>,
    pub output: Array2<T>,
    pub tangent_output: Array2<T>,
}

fn require_finite<T: Real>(name: &str, a: &Array2<T>) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{name} contains NaN or infinity")))
    }
}

impl<T: Real> MlpNetwork<T> {
    /// Build a network with the given layer widths.
    ///
    /// Weights use fan-in-scaled uniform initialization (`±sqrt(6/fan_in)`),
    /// biases start at zero, normalization layers at identity. Draws are made
    /// in `f64` and converted, so a given seed produces the same network at
    /// every scalar width.
    pub fn new<R: Rng>(dims: &[usize], activation: Activation, batch_norm: bool, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::DimensionMismatch("need at least input and output dims".into()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::DimensionMismatch("zero-width layer".into()));
        }
        let n_layers = dims.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let weight = Array2::from_shape_fn((fan_in, fan_out), |_| T::of(rng.gen_range(-bound..bound)));
            let is_hidden = l + 1 < n_layers;
            layers.push(Layer {
                weight,
                bias: Array1::zeros(fan_out),
                norm: (batch_norm && is_hidden).then(|| BatchNorm::identity(fan_out)),
            });
        }
        Ok(MlpNetwork {
            layers,
            dims: dims.to_vec(),
            activation,
            batch_norm,
            mode: Mode::Inference,
        })
    }

    /// Default architecture: three hidden layers of width 256.
    pub fn with_default_hidden<R: Rng>(
        input: usize,
        output: usize,
        activation: Activation,
        batch_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(&[input, 256, 256, 256, output], activation, batch_norm, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn has_batch_norm(&self) -> bool {
        self.batch_norm
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn check_input(&self, x: &Array2<T>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "batch has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        require_finite("input batch", x)
    }

    fn derivative_mode_ok(&self) -> Result<()> {
        if self.mode == Mode::Training && self.batch_norm {
            return Err(Error::UnsupportedDerivative(
                "per-sample Jacobian is ill-defined under training-mode batch norm".into(),
            ));
        }
        Ok(())
    }

    /// Forward evaluation honoring the current mode.
    ///
    /// Training-mode batch norm normalizes with batch statistics but does not
    /// touch the running estimates; use [`Self::forward_train_cached`] for a
    /// training step. Inference-mode forward is a pure function.
    pub fn forward(&self, x: &Array2<T>) -> Result<Array2<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    /// Forward evaluation that records activations for [`Self::backward`].
    pub fn forward_cached(&self, x: &Array2<T>) -> Result<(Array2<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let n_hidden = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut lin = Vec::with_capacity(n_hidden);
        let mut act_in = Vec::with_capacity(n_hidden);
        let mut bn_batch = Vec::with_capacity(n_hidden);
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            inputs.push(h.clone());
            let z = h.dot(&layer.weight) + &layer.bias;
            if l == self.layers.len() - 1 {
                h = z;
                break;
            }
            let (y, stats) = match &layer.norm {
                Some(bn) if self.mode == Mode::Training => {
                    let (mean, inv_std) = batch_stats(&z);
                    let zhat = (&z - &mean) * &inv_std;
                    let y = &zhat * &bn.scale + &bn.shift;
                    (y, Some((mean, inv_std)))
                }
                Some(bn) => {
                    let inv_std = bn.running_inv_std();
                    let zhat = (&z - &bn.running_mean) * &inv_std;
                    let y = &zhat * &bn.scale + &bn.shift;
                    (y, None)
                }
                None => (z.clone(), None),
            };
            lin.push(z);
            act_in.push(y.clone());
            bn_batch.push(stats);
            h = y.mapv(|v| self.activation.eval(v));
        }
        let cache = ForwardCache {
            inputs,
            lin,
            act_in,
            bn_batch,
            output: h.clone(),
        };
        Ok((h, cache))
    }

    /// Training-step forward: batch-statistics normalization plus an
    /// exponential-moving-average update of the running estimates.
    pub fn forward_train_cached(&mut self, x: &Array2<T>) -> Result<(Array2<T>, ForwardCache<T>)> {
        if self.mode != Mode::Training {
            return Err(Error::Training("forward_train_cached requires training mode".into()));
        }
        let (out, cache) = self.forward_cached(x)?;
        let rows = x.nrows();
        let momentum = T::of(BN_MOMENTUM);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            if let (Some(bn), Some(Some((mean, inv_std)))) = (&mut layer.norm, cache.bn_batch.get(l)) {
                let var = inv_std.mapv(|s| (T::one() / (s * s)) - T::of(BN_EPS));
                // Unbiased variance for the running estimate, as is conventional.
                let var = if rows > 1 {
                    var.mapv(|v| v * T::of(rows as f64) / T::of((rows - 1) as f64))
                } else {
                    var
                };
                bn.running_mean = &bn.running_mean * (T::one() - momentum) + &(mean * momentum);
                bn.running_var = &bn.running_var * (T::one() - momentum) + &(var * momentum);
            }
        }
        Ok((out, cache))
    }

    /// Reverse-mode pass: parameter gradients plus the input cotangent.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_out: &Array2<T>) -> Result<(Gradients<T>, Array2<T>)> {
        if grad_out.raw_dim() != cache.output.raw_dim() {
            return Err(Error::DimensionMismatch("grad_out shape mismatch".into()));
        }
        let nl = self.layers.len();
        let mut grads = Gradients::zeros_like(self);
        let cot_z_top = grad_out.clone();
        grads.weights[nl - 1] = cache.inputs[nl - 1].t().dot(&cot_z_top);
        grads.biases[nl - 1] = cot_z_top.sum_axis(Axis(0));
        let mut cot_h = cot_z_top.dot(&self.layers[nl - 1].weight.t());
        for l in (0..nl - 1).rev() {
            let y = &cache.act_in[l];
            let d1 = y.mapv(|v| self.activation.deriv(v));
            let cot_y = &cot_h * &d1;
            let cot_z = match (&self.layers[l].norm, &cache.bn_batch[l]) {
                (Some(bn), Some((mean, inv_std))) => {
                    let zhat = (&cache.lin[l] - mean) * inv_std;
                    grads.scales[l] = Some((&cot_y * &zhat).sum_axis(Axis(0)));
                    grads.shifts[l] = Some(cot_y.sum_axis(Axis(0)));
                    let cot_zhat = &cot_y * &bn.scale;
                    let b = T::of(cot_y.nrows() as f64);
                    let sum_c = cot_zhat.sum_axis(Axis(0));
                    let sum_cz = (&cot_zhat * &zhat).sum_axis(Axis(0));
                    ((&cot_zhat * b - &sum_c) - &(&zhat * &sum_cz)) * inv_std / b
                }
                (Some(bn), None) => {
                    let inv_std = bn.running_inv_std();
                    let zhat = (&cache.lin[l] - &bn.running_mean) * &inv_std;
                    grads.scales[l] = Some((&cot_y * &zhat).sum_axis(Axis(0)));
                    grads.shifts[l] = Some(cot_y.sum_axis(Axis(0)));
                    &cot_y * &(&bn.scale * &inv_std)
                }
                (None, _) => cot_y,
            };
            grads.weights[l] = cache.inputs[l].t().dot(&cot_z);
            grads.biases[l] = cot_z.sum_axis(Axis(0));
            cot_h = cot_z.dot(&self.layers[l].weight.t());
        }
        Ok((grads, cot_h))
    }

    /// Effective per-feature affine `(scale, used)` of hidden layer `l` in
    /// inference mode; identity when the layer has no normalization.
    fn inference_scale(&self, l: usize) -> Array1<T> {
        match &self.layers[l].norm {
            Some(bn) => &bn.scale * &bn.running_inv_std(),
            None => Array1::from_elem(self.layers[l].bias.len(), T::one()),
        }
    }

    /// Forward-mode pass: primal and directional derivative together.
    ///
    /// Requires inference mode when the network carries batch normalization.
    pub fn forward_jvp(&self, x: &Array2<T>, v: &Array2<T>) -> Result<JvpCache<T>> {
        self.derivative_mode_ok()?;
        self.check_input(x)?;
        require_finite("tangent batch", v)?;
        if v.raw_dim() != x.raw_dim() {
            return Err(Error::DimensionMismatch("tangent shape must match input".into()));
        }
        let nl = self.layers.len();
        let n_hidden = nl - 1;
        let mut inputs = Vec::with_capacity(nl);
        let mut tangent_inputs = Vec::with_capacity(nl);
        let mut lin = Vec::with_capacity(n_hidden);
        let mut lin_tangent = Vec::with_capacity(n_hidden);
        let mut act_in = Vec::with_capacity(n_hidden);
        let mut act_in_tangent = Vec::with_capacity(n_hidden);
        let mut h = x.clone();
        let mut dh = v.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            inputs.push(h.clone());
            tangent_inputs.push(dh.clone());
            let z = h.dot(&layer.weight) + &layer.bias;
            let dz = dh.dot(&layer.weight);
            if l == nl - 1 {
                h = z;
                dh = dz;
                break;
            }
            let (y, dy) = match &layer.norm {
                Some(bn) => {
                    let inv_std = bn.running_inv_std();
                    let s = &bn.scale * &inv_std;
                    let y = (&z - &bn.running_mean) * &s + &bn.shift;
                    let dy = &dz * &s;
                    (y, dy)
                }
                None => (z.clone(), dz.clone()),
            };
            let d1 = y.mapv(|t| self.activation.deriv(t));
            lin.push(z);
            lin_tangent.push(dz);
            act_in.push(y.clone());
            act_in_tangent.push(dy.clone());
            h = y.mapv(|t| self.activation.eval(t));
            dh = &d1 * &dy;
        }
        Ok(JvpCache {
            inputs,
            tangent_inputs,
            lin,
            lin_tangent,
            act_in,
            act_in_tangent,
            output: h,
            tangent_output: dh,
        })
    }

    /// Directional derivative `J(x)·v`, row per sample.
    pub fn jvp(&self, x: &Array2<T>, v: &Array2<T>) -> Result<Array2<T>> {
        Ok(self.forward_jvp(x, v)?.tangent_output)
    }

    /// Adjoint derivative `J(x)ᵀ·w`, row per sample.
    pub fn vjp(&self, x: &Array2<T>, w: &Array2<T>) -> Result<Array2<T>> {
        self.derivative_mode_ok()?;
        let (_, cache) = self.forward_cached(x)?;
        self.vjp_cached(&cache, w)
    }

    /// Adjoint derivative reusing an inference-mode forward cache.
    pub fn vjp_cached(&self, cache: &ForwardCache<T>, w: &Array2<T>) -> Result<Array2<T>> {
        self.derivative_mode_ok()?;
        require_finite("cotangent batch", w)?;
        if w.raw_dim() != cache.output.raw_dim() {
            return Err(Error::DimensionMismatch("cotangent shape must match output".into()));
        }
        let nl = self.layers.len();
        let mut cot_h = w.dot(&self.layers[nl - 1].weight.t());
        for l in (0..nl - 1).rev() {
            let d1 = cache.act_in[l].mapv(|v| self.activation.deriv(v));
            let cot_y = &cot_h * &d1;
            let cot_z = &cot_y * &self.inference_scale(l);
            cot_h = cot_z.dot(&self.layers[l].weight.t());
        }
        Ok(cot_h)
    }

    /// Reverse-mode differentiation through a forward-mode pass.
    ///
    /// Given cotangents of the primal output and of the tangent output,
    /// returns parameter gradients plus cotangents of `x` and `v`. With a zero
    /// tangent cotangent this reduces to [`Self::backward`] in inference mode.
    pub fn backward_through_jvp(
        &self,
        cache: &JvpCache<T>,
        cot_out: &Array2<T>,
        cot_tangent: &Array2<T>,
    ) -> Result<(Gradients<T>, Array2<T>, Array2<T>)> {
        self.derivative_mode_ok()?;
        if cot_out.raw_dim() != cache.output.raw_dim() || cot_tangent.raw_dim() != cache.tangent_output.raw_dim() {
            return Err(Error::DimensionMismatch("cotangent shapes must match outputs".into()));
        }
        let nl = self.layers.len();
        let mut grads = Gradients::zeros_like(self);
        let cot_z_top = cot_out.clone();
        let cot_dz_top = cot_tangent.clone();
        grads.weights[nl - 1] =
            cache.inputs[nl - 1].t().dot(&cot_z_top) + cache.tangent_inputs[nl - 1].t().dot(&cot_dz_top);
        grads.biases[nl - 1] = cot_z_top.sum_axis(Axis(0));
        let mut cot_h = cot_z_top.dot(&self.layers[nl - 1].weight.t());
        let mut cot_dh = cot_dz_top.dot(&self.layers[nl - 1].weight.t());
        for l in (0..nl - 1).rev() {
            let y = &cache.act_in[l];
            let dy = &cache.act_in_tangent[l];
            let d1 = y.mapv(|v| self.activation.deriv(v));
            let d2 = y.mapv(|v| self.activation.second_deriv(v));
            // h = act(y), dh = act'(y)⊙dy
            let cot_y = &(&cot_h * &d1) + &(&cot_dh * &(&d2 * dy));
            let cot_dy = &cot_dh * &d1;
            // y = (z − μ)·s + shift, dy = dz·s
            let (cot_z, cot_dz) = match &self.layers[l].norm {
                Some(bn) => {
                    let inv_std = bn.running_inv_std();
                    let s = &bn.scale * &inv_std;
                    let zhat = (&cache.lin[l] - &bn.running_mean) * &inv_std;
                    let dz_scaled = &cache.lin_tangent[l] * &inv_std;
                    grads.scales[l] =
                        Some((&cot_y * &zhat).sum_axis(Axis(0)) + (&cot_dy * &dz_scaled).sum_axis(Axis(0)));
                    grads.shifts[l] = Some(cot_y.sum_axis(Axis(0)));
                    (&cot_y * &s, &cot_dy * &s)
                }
                None => (cot_y, cot_dy),
            };
            grads.weights[l] =
                cache.inputs[l].t().dot(&cot_z) + cache.tangent_inputs[l].t().dot(&cot_dz);
            grads.biases[l] = cot_z.sum_axis(Axis(0));
            cot_h = cot_z.dot(&self.layers[l].weight.t());
            cot_dh = cot_dz.dot(&self.layers[l].weight.t());
        }
        Ok((grads, cot_h, cot_dh))
    }

    /// Nested query `(J(x)ᵀw, ∂/∂x [J(x)ᵀw]·u)` via forward-over-reverse.
    ///
    /// Rejects piecewise-linear activations, whose second derivative vanishes
    /// almost everywhere and would silently zero the result.
    pub fn second_order(
        &self,
        x: &Array2<T>,
        w: &Array2<T>,
        u: &Array2<T>,
    ) -> Result<(Array2<T>, Array2<T>)> {
        let cache = self.forward_jvp(x, u)?;
        self.second_order_with(&cache, w)
    }

    /// [`Self::second_order`] reusing a forward-mode cache whose tangent was
    /// taken in the differentiation direction `u`.
    pub fn second_order_with(&self, cache: &JvpCache<T>, w: &Array2<T>) -> Result<(Array2<T>, Array2<T>)> {
        if !self.activation.is_smooth() {
            return Err(Error::UnsupportedDerivative(format!(
                "second-order query needs a smooth activation, got {:?}",
                self.activation
            )));
        }
        self.derivative_mode_ok()?;
        require_finite("cotangent batch", w)?;
        if w.raw_dim() != cache.output.raw_dim() {
            return Err(Error::DimensionMismatch("cotangent shape must match output".into()));
        }
        let nl = self.layers.len();
        // Reverse sweep and its tangent, top-down.
        let mut cot_h = w.dot(&self.layers[nl - 1].weight.t());
        let mut cot_h_dot = Array2::zeros(cot_h.raw_dim());
        for l in (0..nl - 1).rev() {
            let y = &cache.act_in[l];
            let ty = &cache.act_in_tangent[l];
            let d1 = y.mapv(|v| self.activation.deriv(v));
            let d2 = y.mapv(|v| self.activation.second_deriv(v));
            let s = self.inference_scale(l);
            let cot_y = &cot_h * &d1;
            let cot_y_dot = &(&cot_h_dot * &d1) + &(&cot_h * &(&d2 * ty));
            let cot_z = &cot_y * &s;
            let cot_z_dot = &cot_y_dot * &s;
            cot_h = cot_z.dot(&self.layers[l].weight.t());
            cot_h_dot = cot_z_dot.dot(&self.layers[l].weight.t());
        }
        Ok((cot_h, cot_h_dot))
    }

    /// Adjoint derivative reusing a forward-mode cache's primal activations.
    pub fn vjp_via_jvp_cache(&self, cache: &JvpCache<T>, w: &Array2<T>) -> Result<Array2<T>> {
        self.derivative_mode_ok()?;
        require_finite("cotangent batch", w)?;
        if w.raw_dim() != cache.output.raw_dim() {
            return Err(Error::DimensionMismatch("cotangent shape must match output".into()));
        }
        let nl = self.layers.len();
        let mut cot_h = w.dot(&self.layers[nl - 1].weight.t());
        for l in (0..nl - 1).rev() {
            let d1 = cache.act_in[l].mapv(|v| self.activation.deriv(v));
            let cot_y = &cot_h * &d1;
            let cot_z = &cot_y * &self.inference_scale(l);
            cot_h = cot_z.dot(&self.layers[l].weight.t());
        }
        Ok(cot_h)
    }

    /// Mutable flat views of every parameter, in canonical order
    /// (per layer: weight, bias, then normalization scale and shift).
    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
            if let Some(bn) = &mut layer.norm {
                out.push(bn.scale.as_slice_mut().expect("standard layout"));
                out.push(bn.shift.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.weight.len()
                    + l.bias.len()
                    + l.norm.as_ref().map_or(0, |n| n.scale.len() + n.shift.len())
            })
            .sum()
    }
}

fn batch_stats<T: Real>(z: &Array2<T>) -> (Array1<T>, Array1<T>) {
    let b = T::of(z.nrows() as f64);
    let mean = z.sum_axis(Axis(0)) / b;
    let centered = z - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / b;
    let inv_std = var.mapv(|v| (v + T::of(BN_EPS)).sqrt().recip());
    (mean, inv_std)
}
