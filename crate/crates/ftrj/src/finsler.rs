//! The lineage-informed asymmetric local cost.
//!
//! The raw penalty charges motion whose induced probability flow enters
//! classes that the lineage prior forbids:
//!
//! ```text
//! penalty(x, v) = Σ_c f_c(x) · relu(⟨ Jf(x)·v, M e_c ⟩),   M = 𝟙 − Aᵀ
//! ```
//!
//! and the combined cost scales a conformal Riemannian base by it:
//!
//! ```text
//! F(x, v) = G(x)·‖v‖·(1 + λ·penalty(x, v/‖v‖)) = G(x)·(‖v‖ + λ·penalty(x, v))
//! ```
//!
//! using positive 1-homogeneity of the penalty; the expanded form is what the
//! code evaluates, and `F(x, 0) = 0` by construction. The penalty is evaluated
//! through a single probability-space JVP per batch — by the adjoint identity
//! this matches the per-class VJP formulation entry for entry, at a |C|-th of
//! the cost. Only conformal bases are accepted: the axiom guarantees for the
//! combined cost hold for exactly that family.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;

use crate::classifier::{softmax, softmax_jacobian_apply, Classifier};
use crate::error::{Error, Result};
use crate::lineage::IllegalDirectionMatrix;
use crate::rng::component_rng;
use crate::scalar::Real;

/// Conformal Riemannian base `‖v‖_g = G(x)·‖v‖₂`.
///
/// `Euclidean` fixes `G ≡ 1`. `RbfDensity` scales inversely with a kernel
/// density estimate over fitted centers:
/// `G(x) = (Σ_k exp(−‖x−c_k‖²/κ²) + ε)^{−1/2}`,
/// so paths through dense regions are cheap.
#[derive(Debug, Clone)]
pub enum ConformalMetric<T> {
    Euclidean,
    RbfDensity {
        centers: Array2<T>,
        bandwidth: T,
        smoothing: T,
    },
}

impl<T: Real> ConformalMetric<T> {
    /// Fit the density variant: k-means centers over the data (seeded Lloyd).
    pub fn fit_rbf(data: &Array2<T>, clusters: usize, bandwidth: f64, smoothing: f64, seed: u64) -> Result<Self> {
        if clusters == 0 || data.nrows() == 0 {
            return Err(Error::Config("rbf base needs data and at least one cluster".into()));
        }
        if bandwidth <= 0.0 || smoothing <= 0.0 {
            return Err(Error::Config("rbf bandwidth and smoothing must be positive".into()));
        }
        let k = clusters.min(data.nrows());
        let mut rng = component_rng(seed, "rbf-kmeans");
        let mut idx: Vec<usize> = (0..data.nrows()).collect();
        idx.shuffle(&mut rng);
        let mut centers = data.select(Axis(0), &idx[..k]);
        let mut assign = vec![0usize; data.nrows()];
        for _ in 0..25 {
            for (i, row) in data.rows().into_iter().enumerate() {
                let mut best = 0;
                let mut best_d = T::infinity();
                for (c, cr) in centers.rows().into_iter().enumerate() {
                    let d = row
                        .iter()
                        .zip(cr.iter())
                        .map(|(&a, &b)| (a - b) * (a - b))
                        .sum::<T>();
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                assign[i] = best;
            }
            let mut sums = Array2::<T>::zeros(centers.raw_dim());
            let mut counts = vec![0usize; k];
            for (i, row) in data.rows().into_iter().enumerate() {
                counts[assign[i]] += 1;
                let mut target = sums.row_mut(assign[i]);
                for (t, &v) in target.iter_mut().zip(row.iter()) {
                    *t += v;
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    let inv = T::of(counts[c] as f64).recip();
                    let mut row = sums.row_mut(c);
                    row.mapv_inplace(|v| v * inv);
                    centers.row_mut(c).assign(&row);
                }
            }
        }
        Ok(ConformalMetric::RbfDensity {
            centers,
            bandwidth: T::of(bandwidth),
            smoothing: T::of(smoothing),
        })
    }

    /// `G(x)` per row.
    pub fn scale(&self, x: &Array2<T>) -> Array1<T> {
        match self {
            ConformalMetric::Euclidean => Array1::from_elem(x.nrows(), T::one()),
            ConformalMetric::RbfDensity {
                centers,
                bandwidth,
                smoothing,
            } => {
                let inv_bw2 = (*bandwidth * *bandwidth).recip();
                Array1::from_shape_fn(x.nrows(), |i| {
                    let row = x.row(i);
                    let density: T = centers
                        .rows()
                        .into_iter()
                        .map(|c| {
                            let d2 = row
                                .iter()
                                .zip(c.iter())
                                .map(|(&a, &b)| (a - b) * (a - b))
                                .sum::<T>();
                            (-d2 * inv_bw2).exp()
                        })
                        .sum();
                    (density + *smoothing).sqrt().recip()
                })
            }
        }
    }

    /// `(G(x), ∇G(x))` per row; the gradient is analytic.
    pub fn scale_with_grad(&self, x: &Array2<T>) -> (Array1<T>, Array2<T>) {
        match self {
            ConformalMetric::Euclidean => (
                Array1::from_elem(x.nrows(), T::one()),
                Array2::zeros(x.raw_dim()),
            ),
            ConformalMetric::RbfDensity {
                centers,
                bandwidth,
                smoothing,
            } => {
                let inv_bw2 = (*bandwidth * *bandwidth).recip();
                let mut scale = Array1::zeros(x.nrows());
                let mut grad = Array2::zeros(x.raw_dim());
                for (i, row) in x.rows().into_iter().enumerate() {
                    let mut density = T::zero();
                    let mut dsum = vec![T::zero(); x.ncols()];
                    for c in centers.rows() {
                        let d2 = row
                            .iter()
                            .zip(c.iter())
                            .map(|(&a, &b)| (a - b) * (a - b))
                            .sum::<T>();
                        let k = (-d2 * inv_bw2).exp();
                        density += k;
                        for (d, (&a, &b)) in row.iter().zip(c.iter()).enumerate() {
                            dsum[d] += k * T::of(-2.0) * inv_bw2 * (a - b);
                        }
                    }
                    let s = density + *smoothing;
                    let g = s.sqrt().recip();
                    scale[i] = g;
                    let coeff = T::of(-0.5) * g / s;
                    for d in 0..x.ncols() {
                        grad[[i, d]] = coeff * dsum[d];
                    }
                }
                (scale, grad)
            }
        }
    }
}

/// The combined lineage-informed metric.
#[derive(Debug)]
pub struct FinslerMetric<'a, T> {
    classifier: &'a Classifier<T>,
    illegal: &'a IllegalDirectionMatrix,
    base: &'a ConformalMetric<T>,
    lambda: T,
    /// Illegal-direction operator as scalars, cached for matrix products.
    m_scalar: Array2<T>,
}

/// Value plus velocity/position gradients of the combined cost over a batch.
#[derive(Debug, Clone)]
pub struct MetricEval<T> {
    pub value: Array1<T>,
    pub grad_v: Array2<T>,
    pub grad_x: Array2<T>,
}

impl<'a, T: Real> FinslerMetric<'a, T> {
    pub fn new(
        classifier: &'a Classifier<T>,
        illegal: &'a IllegalDirectionMatrix,
        base: &'a ConformalMetric<T>,
        lambda: T,
    ) -> Result<Self> {
        if lambda < T::zero() {
            return Err(Error::Config("lambda must be nonnegative".into()));
        }
        if classifier.num_classes() != illegal.dim() {
            return Err(Error::DimensionMismatch(format!(
                "classifier has {} classes, illegal-direction operator has {}",
                classifier.num_classes(),
                illegal.dim()
            )));
        }
        let m_scalar = illegal.matrix().mapv(|v| T::of(v as f64));
        Ok(FinslerMetric {
            classifier,
            illegal,
            base,
            lambda,
            m_scalar,
        })
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn with_lambda(&self, lambda: T) -> Result<FinslerMetric<'a, T>> {
        FinslerMetric::new(self.classifier, self.illegal, self.base, lambda)
    }

    pub fn base(&self) -> &ConformalMetric<T> {
        self.base
    }

    pub fn classifier(&self) -> &Classifier<T> {
        self.classifier
    }

    /// Raw penalty per row: nonnegative and positively 1-homogeneous in `v`.
    pub fn penalty(&self, x: &Array2<T>, v: &Array2<T>) -> Result<Array1<T>> {
        let jcache = self.classifier.logits_jvp_cached(x, v)?;
        let probs = softmax(&jcache.output);
        let p_dot = softmax_jacobian_apply(&probs, &jcache.tangent_output);
        // alpha[i][c] = ⟨ṗ_i, M e_c⟩
        let alpha = p_dot.dot(&self.m_scalar);
        let mut out = Array1::zeros(x.nrows());
        for (i, (p_row, a_row)) in probs.rows().into_iter().zip(alpha.rows()).enumerate() {
            let mut acc = T::zero();
            for (&p, &a) in p_row.iter().zip(a_row.iter()) {
                if a > T::zero() {
                    acc += p * a;
                }
            }
            out[i] = acc;
        }
        Ok(out)
    }

    /// Combined cost per row: `G(x)·(‖v‖ + λ·penalty(x, v))`.
    pub fn norm(&self, x: &Array2<T>, v: &Array2<T>) -> Result<Array1<T>> {
        let scale = self.base.scale(x);
        let penalty = self.penalty(x, v)?;
        let mut out = Array1::zeros(x.nrows());
        for i in 0..x.nrows() {
            let nv = v.row(i).iter().map(|&a| a * a).sum::<T>().sqrt();
            out[i] = scale[i] * (nv + self.lambda * penalty[i]);
        }
        Ok(out)
    }

    /// Single-sample convenience wrapper around [`Self::norm`].
    pub fn norm_one(&self, x: ArrayView1<T>, v: ArrayView1<T>) -> Result<T> {
        let xb = x.insert_axis(Axis(0)).to_owned();
        let vb = v.insert_axis(Axis(0)).to_owned();
        Ok(self.norm(&xb, &vb)?[0])
    }

    /// Cost with exact gradients in `x` and `v`.
    ///
    /// `freeze_jacobian` treats the classifier Jacobian and the conformal
    /// scale as locally constant: the position gradient keeps only the
    /// classifier-probability term, dropping the nested second-order piece
    /// and the scale gradient.
    pub fn norm_with_grads(&self, x: &Array2<T>, v: &Array2<T>, freeze_jacobian: bool) -> Result<MetricEval<T>> {
        let rows = x.nrows();
        let (scale, scale_grad) = if freeze_jacobian {
            (self.base.scale(x), Array2::zeros(x.raw_dim()))
        } else {
            self.base.scale_with_grad(x)
        };

        let jcache = self.classifier.logits_jvp_cached(x, v)?;
        let probs = softmax(&jcache.output);
        let z_dot = &jcache.tangent_output;
        let p_dot = softmax_jacobian_apply(&probs, z_dot);
        let alpha = p_dot.dot(&self.m_scalar);

        let mut penalty = Array1::zeros(rows);
        let mut relu_alpha = Array2::zeros(alpha.raw_dim());
        let mut kappa = Array2::zeros(alpha.raw_dim());
        for i in 0..rows {
            let mut acc = T::zero();
            for c in 0..alpha.ncols() {
                if alpha[[i, c]] > T::zero() {
                    relu_alpha[[i, c]] = alpha[[i, c]];
                    kappa[[i, c]] = probs[[i, c]];
                    acc += probs[[i, c]] * alpha[[i, c]];
                }
            }
            penalty[i] = acc;
        }
        // w̃ = M·(p ⊙ gate), batched as rows · Mᵀ.
        let w_tilde = kappa.dot(&self.m_scalar.t());

        let net = self.classifier.net();
        // Velocity gradient of the penalty plus (optionally) the nested
        // second-order piece of the position gradient, sharing one cache.
        let s_w_tilde = softmax_jacobian_apply(&probs, &w_tilde);
        let (pen_grad_v, second_order_dir) = if freeze_jacobian {
            (net.vjp_via_jvp_cache(&jcache, &s_w_tilde)?, Array2::zeros(x.raw_dim()))
        } else {
            net.second_order_with(&jcache, &s_w_tilde)?
        };

        // Position gradient pieces that flow through the probabilities.
        let cot = if freeze_jacobian {
            relu_alpha.clone()
        } else {
            let p_dot_w = (&probs * z_dot).sum_axis(Axis(1));
            let p_dot_wt = (&probs * &w_tilde).sum_axis(Axis(1));
            let mut bracket = &w_tilde * z_dot;
            for (i, mut row) in bracket.rows_mut().into_iter().enumerate() {
                for (c, b) in row.iter_mut().enumerate() {
                    *b = *b + relu_alpha[[i, c]] - p_dot_w[i] * w_tilde[[i, c]] - p_dot_wt[i] * z_dot[[i, c]];
                }
            }
            bracket
        };
        let pen_grad_x_prob = net.vjp_via_jvp_cache(&jcache, &softmax_jacobian_apply(&probs, &cot))?;

        let mut value = Array1::zeros(rows);
        let mut grad_v = Array2::zeros(v.raw_dim());
        let mut grad_x = Array2::zeros(x.raw_dim());
        for i in 0..rows {
            let nv = v.row(i).iter().map(|&a| a * a).sum::<T>().sqrt();
            value[i] = scale[i] * (nv + self.lambda * penalty[i]);
            let inv_nv = if nv > T::zero() { nv.recip() } else { T::zero() };
            for d in 0..v.ncols() {
                grad_v[[i, d]] = scale[i] * (v[[i, d]] * inv_nv + self.lambda * pen_grad_v[[i, d]]);
                grad_x[[i, d]] = scale_grad[[i, d]] * (nv + self.lambda * penalty[i])
                    + scale[i] * self.lambda * (pen_grad_x_prob[[i, d]] + second_order_dir[[i, d]]);
            }
        }
        Ok(MetricEval { value, grad_v, grad_x })
    }
}

/// Tolerances for the axiom checker.
#[derive(Debug, Clone, Copy)]
pub struct AxiomTolerances {
    /// Relative tolerance on positive homogeneity.
    pub homogeneity: f64,
    /// Absolute tolerance on subadditivity violation.
    pub subadditivity: f64,
    /// The empirical lower-bound constant must exceed this.
    pub min_lower_bound: f64,
}

impl Default for AxiomTolerances {
    fn default() -> Self {
        AxiomTolerances {
            homogeneity: 1e-12,
            subadditivity: 1e-8,
            min_lower_bound: 1e-6,
        }
    }
}

/// Result of sampling the asymmetric-norm axioms.
#[derive(Debug, Clone)]
pub struct AxiomReport {
    pub samples: usize,
    /// Max relative violation of `F(x, αv) = α·F(x, v)` over α ∈ {0.5, 2, 10}.
    pub homogeneity_violation: f64,
    /// Max of `F(x, u+v) − F(x, u) − F(x, v)` (positive part).
    pub subadditivity_violation: f64,
    /// Min observed `F(x, v)/‖v‖`: the empirical nondegeneracy constant.
    pub lower_bound: f64,
    pub homogeneity_ok: bool,
    pub subadditivity_ok: bool,
    pub nondegenerate: bool,
}

impl AxiomReport {
    pub fn all_ok(&self) -> bool {
        self.homogeneity_ok && self.subadditivity_ok && self.nondegenerate
    }
}

/// Sample the asymmetric-norm axioms for an arbitrary local cost.
///
/// Iterates `samples` triples: a point, a direction, and a second direction
/// (for subadditivity), cycling through the provided rows.
pub fn check_finsler_axioms<T, F>(
    cost: F,
    points: &Array2<T>,
    directions: &Array2<T>,
    tol: AxiomTolerances,
    samples: usize,
) -> Result<AxiomReport>
where
    T: Real,
    F: Fn(ArrayView1<T>, ArrayView1<T>) -> T,
{
    if points.nrows() == 0 || directions.nrows() == 0 {
        return Err(Error::Evaluation("axiom check needs nonempty sample sets".into()));
    }
    let alphas = [0.5, 2.0, 10.0];
    let mut homog = 0.0f64;
    let mut subadd = 0.0f64;
    let mut lower = f64::INFINITY;
    for k in 0..samples {
        let x = points.row(k % points.nrows());
        let v = directions.row(k % directions.nrows());
        let u = directions.row((k + 1) % directions.nrows());
        let fv = cost(x, v).to_f64_lossy();
        let fu = cost(x, u).to_f64_lossy();
        for &a in &alphas {
            let scaled = v.mapv(|e| e * T::of(a));
            let fs = cost(x, scaled.view()).to_f64_lossy();
            let expect = a * fv;
            let denom = expect.abs().max(1e-300);
            homog = homog.max((fs - expect).abs() / denom);
        }
        let sum = (&v + &u).to_owned();
        let fsum = cost(x, sum.view()).to_f64_lossy();
        subadd = subadd.max(fsum - fu - fv);
        let nv = v.iter().map(|&e| (e * e).to_f64_lossy()).sum::<f64>().sqrt();
        if nv > 0.0 {
            lower = lower.min(fv / nv);
        }
    }
    Ok(AxiomReport {
        samples,
        homogeneity_violation: homog,
        subadditivity_violation: subadd.max(0.0),
        lower_bound: lower,
        homogeneity_ok: homog <= tol.homogeneity,
        subadditivity_ok: subadd <= tol.subadditivity,
        nondegenerate: lower > tol.min_lower_bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lineage::LineageTree;
    use crate::nn::{Activation, MlpNetwork};
    use crate::rng::component_rng;
    use ndarray::array;
    use rand::Rng;

    /// Exact logistic classifier on ℝ¹: logits (0, k·x) give
    /// probabilities (1−σ(kx), σ(kx)).
    fn logistic_classifier(k: f64) -> Classifier<f64> {
        let mut rng = component_rng(0, "logistic");
        let mut net = MlpNetwork::new(&[1, 2], Activation::SiLU, false, &mut rng).unwrap();
        net.layers[0].weight = array![[0.0, k]];
        net.layers[0].bias = ndarray::Array1::zeros(2);
        Classifier::new(net, 0.0)
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| i.to_string()).collect()
    }

    fn rand_batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = component_rng(seed, "finsler-batch");
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn penalty_vanishes_for_zero_velocity() {
        let clf = logistic_classifier(2.0);
        let tree = LineageTree::from_edges(names(2), &[]).unwrap();
        let m = IllegalDirectionMatrix::from_tree(&tree);
        let base = ConformalMetric::Euclidean;
        let metric = FinslerMetric::new(&clf, &m, &base, 1.0).unwrap();
        let x = array![[0.3], [-0.9]];
        let v = Array2::zeros((2, 1));
        let p = metric.penalty(&x, &v).unwrap();
        assert_eq!(p, ndarray::Array1::<f64>::zeros(2));
    }

    #[test]
    fn full_adjacency_kills_the_penalty_everywhere() {
        let clf = logistic_classifier(3.0);
        let tree = LineageTree::full(names(2)).unwrap();
        let m = IllegalDirectionMatrix::from_tree(&tree);
        let base = ConformalMetric::Euclidean;
        let metric = FinslerMetric::new(&clf, &m, &base, 2.5).unwrap();
        let x = rand_batch(40, 1, 1);
        let v = rand_batch(40, 1, 2);
        let p = metric.penalty(&x, &v).unwrap();
        assert!(p.iter().all(|&e| e == 0.0));
        // And the combined cost reduces to the conformal norm, exactly.
        let f = metric.norm(&x, &v).unwrap();
        for i in 0..40 {
            assert_eq!(f[i], v[[i, 0]].abs());
        }
    }

    /// With identity adjacency on two classes, every cross-class flow is
    /// illegal and the penalty has the closed form
    /// `f₀·relu(ṗ₁) + f₁·relu(ṗ₀)` with `ṗ₁ = −ṗ₀ = σ'(kx)·k·v`.
    #[test]
    fn one_dimensional_logistic_identity_adjacency_matches_closed_form() {
        let k = 1.7;
        let clf = logistic_classifier(k);
        let tree = LineageTree::from_edges(names(2), &[]).unwrap();
        let m = IllegalDirectionMatrix::from_tree(&tree);
        let base = ConformalMetric::Euclidean;
        let metric = FinslerMetric::new(&clf, &m, &base, 1.0).unwrap();
        for &(x, v) in &[(0.4, 1.0), (0.4, -1.0), (-1.2, 0.7), (0.0, -2.0)] {
            let s = sigmoid(k * x);
            let pdot1 = s * (1.0 - s) * k * v;
            let expect = (1.0 - s) * pdot1.max(0.0) + s * (-pdot1).max(0.0);
            let got = metric.penalty(&array![[x]], &array![[v]]).unwrap()[0];
            let denom = expect.abs().max(1e-12);
            assert!((got - expect).abs() / denom < 1e-8, "x={x} v={v}: {got} vs {expect}");
            // Combined cost at λ = 1 is ‖v‖ plus the penalty.
            let f = metric.norm(&array![[x]], &array![[v]]).unwrap()[0];
            assert!((f - (v.abs() + expect)).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_zero_reduces_to_scaled_euclidean() {
        let clf = logistic_classifier(2.0);
        let tree = LineageTree::from_edges(names(2), &[]).unwrap();
        let m = IllegalDirectionMatrix::from_tree(&tree);
        let base = ConformalMetric::Euclidean;
        let metric = FinslerMetric::new(&clf, &m, &base, 0.0).unwrap();
        let x = rand_batch(20, 1, 3);
        let v = rand_batch(20, 1, 4);
        let f = metric.norm(&x, &v).unwrap();
        for i in 0..20 {
            assert_eq!(f[i], v[[i, 0]].abs());
        }
    }

    #[test]
    fn cost_is_positively_homogeneous() {
        let clf = logistic_classifier(1.3);
        let tree = LineageTree::from_edges(names(2), &[(0, 1)]).unwrap();
        let m = IllegalDirectionMatrix::from_tree(&tree);
        let base = ConformalMetric::Euclidean;
        let metric = FinslerMetric::new(&clf, &m, &base, 0.8).unwrap();
        let x = rand_batch(30, 1, 5);
        let v = rand_batch(30, 1, 6);
        let f1 = metric.norm(&x, &v).unwrap();
        let f2 = metric.norm(&x, &(&v * 2.0)).unwrap();
        for i in 0..30 {
            let denom = f2[i].abs().max(1e-300);
            assert!((f2[i] - 2.0 * f1[i]).abs() / denom <= 1e-12);
        }
    }

    #[test]
    fn penalty_is_asymmetric_for_directed_priors() {
        let clf = logistic_classifier(2.0);
        let tree = LineageTree::from_edges(names(2), &[(0, 1)]).unwrap();
        let m = IllegalDirectionMatrix::from_tree(&tree);
        let base = ConformalMetric::Euclidean;
        let metric = FinslerMetric::new(&clf, &m, &base, 1.0).unwrap();
        let x = array![[0.0]];
        let fwd = metric.penalty(&x, &array![[1.0]]).unwrap()[0];
        let back = metric.penalty(&x, &array![[-1.0]]).unwrap()[0];
        assert!((fwd - back).abs() > 1e-3, "penalty must depend on direction: {fwd} vs {back}");
    }

    #[test]
    fn lambda_is_pointwise_monotone() {
        let clf = logistic_classifier(2.0);
        let tree = LineageTree::from_edges(names(2), &[]).unwrap();
        let m = IllegalDirectionMatrix::from_tree(&tree);
        let base = ConformalMetric::Euclidean;
        let lo = FinslerMetric::new(&clf, &m, &base, 0.2).unwrap();
        let hi = lo.with_lambda(0.5).unwrap();
        let x = rand_batch(100, 1, 7);
        let v = rand_batch(100, 1, 8);
        let f_lo = lo.norm(&x, &v).unwrap();
        let f_hi = hi.norm(&x, &v).unwrap();
        for i in 0..100 {
            assert!(f_lo[i] <= f_hi[i] + 1e-15);
        }
    }

    #[test]
    fn lineage_consistent_path_has_zero_penalty_and_reverse_does_not() {
        // Two classes with an edge 0 → 1; the path walks from the class-0
        // region to the class-1 region. Its velocity drains probability from
        // class 0 only, which the prior allows; the reversed path feeds
        // class 0, which it forbids.
        let clf = logistic_classifier(2.0);
        let tree = LineageTree::from_edges(names(2), &[(0, 1)]).unwrap();
        let m = IllegalDirectionMatrix::from_tree(&tree);
        let base = ConformalMetric::Euclidean;
        let metric = FinslerMetric::new(&clf, &m, &base, 1.0).unwrap();
        let mut max_fwd = 0.0f64;
        let mut max_back = 0.0f64;
        for step in 0..=50 {
            let t = step as f64 / 50.0;
            let x = array![[-2.0 + 4.0 * t]];
            let fwd = metric.penalty(&x, &array![[4.0]]).unwrap()[0];
            let back = metric.penalty(&x, &array![[-4.0]]).unwrap()[0];
            max_fwd = max_fwd.max(fwd);
            max_back = max_back.max(back);
        }
        assert!(max_fwd <= 1e-9, "consistent path picked up penalty {max_fwd}");
        assert!(max_back > 1e-3, "reversed path must be penalized, got {max_back}");
    }

    #[test]
    fn conformal_scale_examples() {
        let base = ConformalMetric::<f64>::Euclidean;
        let x = rand_batch(5, 3, 9);
        assert!(base.scale(&x).iter().all(|&g| g == 1.0));

        let rbf = ConformalMetric::RbfDensity {
            centers: array![[0.0, 0.0]],
            bandwidth: 1.0,
            smoothing: 0.05,
        };
        let at_center = rbf.scale(&array![[0.0, 0.0]])[0];
        assert!((at_center - 1.05f64.powf(-0.5)).abs() < 1e-15);
        let far = rbf.scale(&array![[50.0, 0.0]])[0];
        assert!((far - 0.05f64.powf(-0.5)).abs() < 1e-9, "far field approaches ε^(-1/2)");
        let mid = rbf.scale(&array![[1.0, 0.0]])[0];
        assert!(at_center < mid && mid < far, "scale grows away from density");
    }

    #[test]
    fn rbf_scale_gradient_matches_finite_differences() {
        let rbf = ConformalMetric::RbfDensity {
            centers: array![[0.3, -0.2], [-0.7, 0.9]],
            bandwidth: 1.2,
            smoothing: 0.1,
        };
        let x = rand_batch(6, 2, 10);
        let (_, grad) = rbf.scale_with_grad(&x);
        let h = 1e-6;
        for i in 0..6 {
            for d in 0..2 {
                let mut xp = x.clone();
                xp[[i, d]] += h;
                let mut xm = x.clone();
                xm[[i, d]] -= h;
                let fd = (rbf.scale(&xp)[i] - rbf.scale(&xm)[i]) / (2.0 * h);
                assert!((grad[[i, d]] - fd).abs() < 1e-8, "({i},{d}): {} vs {fd}", grad[[i, d]]);
            }
        }
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let mut rng = component_rng(11, "blobs");
        let mut data = Vec::new();
        for i in 0..100 {
            let c = if i % 2 == 0 { -3.0 } else { 3.0 };
            data.push(c + 0.1 * rng.gen_range(-1.0..1.0f64));
            data.push(0.1 * rng.gen_range(-1.0..1.0f64));
        }
        let data = Array2::from_shape_vec((100, 2), data).unwrap();
        let fit = ConformalMetric::fit_rbf(&data, 2, 1.0, 0.05, 0).unwrap();
        let ConformalMetric::RbfDensity { centers, .. } = fit else {
            panic!("expected rbf variant");
        };
        let mut xs: Vec<f64> = centers.column(0).to_vec();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((xs[0] + 3.0).abs() < 0.1 && (xs[1] - 3.0).abs() < 0.1, "{xs:?}");
    }

    #[test]
    fn axiom_checker_accepts_euclidean_and_rejects_half_space_map() {
        let points = rand_batch(20, 3, 12);
        let dirs = rand_batch(20, 3, 13);
        let euclid =
            |_x: ArrayView1<f64>, v: ArrayView1<f64>| v.iter().map(|&e| e * e).sum::<f64>().sqrt();
        let report = check_finsler_axioms(euclid, &points, &dirs, AxiomTolerances::default(), 100).unwrap();
        assert!(report.all_ok());
        // Zero up to one ulp of rounding in ‖αv‖ at α = 10.
        assert!(report.homogeneity_violation <= 1e-15);
        assert!(report.subadditivity_violation <= 1e-15);

        // v ↦ relu(⟨−v, β⟩) alone is zero on a half-space: degenerate.
        let beta = array![0.5, -1.0, 0.25];
        let relu_map = move |_x: ArrayView1<f64>, v: ArrayView1<f64>| {
            (-v.dot(&beta)).max(0.0)
        };
        let report = check_finsler_axioms(relu_map, &points, &dirs, AxiomTolerances::default(), 100).unwrap();
        assert!(!report.nondegenerate, "half-space kernel must fail the lower bound");
        assert!(report.homogeneity_ok, "the map is still positively homogeneous");
    }

    #[test]
    fn metric_gradients_match_finite_differences() {
        // A genuinely curved classifier (trained-style random MLP) with an
        // asymmetric prior and an rbf base: the hardest gradient path.
        let mut rng = component_rng(20, "gradnet");
        let net = MlpNetwork::new(&[3, 16, 16, 4], Activation::SiLU, true, &mut rng).unwrap();
        let clf = Classifier::new(net, 0.0);
        let tree = LineageTree::from_edges(names(4), &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let m = IllegalDirectionMatrix::from_tree(&tree);
        let base = ConformalMetric::RbfDensity {
            centers: rand_batch(5, 3, 21),
            bandwidth: 1.5,
            smoothing: 0.1,
        };
        let metric = FinslerMetric::new(&clf, &m, &base, 0.7).unwrap();
        let x = rand_batch(5, 3, 22);
        let v = rand_batch(5, 3, 23);
        let eval = metric.norm_with_grads(&x, &v, false).unwrap();
        let h = 1e-6;
        for i in 0..5 {
            for d in 0..3 {
                let mut vp = v.clone();
                vp[[i, d]] += h;
                let mut vm = v.clone();
                vm[[i, d]] -= h;
                let fd = (metric.norm(&x, &vp).unwrap()[i] - metric.norm(&x, &vm).unwrap()[i]) / (2.0 * h);
                let mag = eval.grad_v[[i, d]].abs().max(1e-2);
                assert!(
                    (eval.grad_v[[i, d]] - fd).abs() / mag < 1e-4,
                    "grad_v ({i},{d}): {} vs {fd}",
                    eval.grad_v[[i, d]]
                );

                let mut xp = x.clone();
                xp[[i, d]] += h;
                let mut xm = x.clone();
                xm[[i, d]] -= h;
                let fd = (metric.norm(&xp, &v).unwrap()[i] - metric.norm(&xm, &v).unwrap()[i]) / (2.0 * h);
                let mag = eval.grad_x[[i, d]].abs().max(1e-2);
                assert!(
                    (eval.grad_x[[i, d]] - fd).abs() / mag < 1e-4,
                    "grad_x ({i},{d}): {} vs {fd}",
                    eval.grad_x[[i, d]]
                );
            }
        }
    }

    #[test]
    fn frozen_jacobian_gradients_keep_probability_term_only() {
        let clf = logistic_classifier(1.5);
        let tree = LineageTree::from_edges(names(2), &[]).unwrap();
        let m = IllegalDirectionMatrix::from_tree(&tree);
        let base = ConformalMetric::Euclidean;
        let metric = FinslerMetric::new(&clf, &m, &base, 1.0).unwrap();
        let x = rand_batch(8, 1, 30);
        let v = rand_batch(8, 1, 31);
        let exact = metric.norm_with_grads(&x, &v, false).unwrap();
        let frozen = metric.norm_with_grads(&x, &v, true).unwrap();
        // Values and velocity gradients agree; position gradients differ in
        // general because the frozen path drops the nested term.
        for i in 0..8 {
            assert!((exact.value[i] - frozen.value[i]).abs() < 1e-14);
            assert!((exact.grad_v[[i, 0]] - frozen.grad_v[[i, 0]]).abs() < 1e-12);
        }
    }
}
