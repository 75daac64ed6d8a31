//! Conditional flow matching on the learned interpolants plus ODE simulation.
//!
//! A time-dependent vector field is regressed onto the geodesic interpolant
//! velocities over coupled endpoint pairs; generation then integrates the
//! field with fixed-step RK4 from the source marginal. All times here are
//! normalized to `[0, 1]`; callers map physical timepoint tags affinely.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::classifier::{argmax, Classifier};
use crate::embed::GeodesicModel;
use crate::error::{Error, Result};
use crate::nn::{Activation, AdamW, MlpNetwork, TensorBundle, TimeEmbedding};
use crate::rng::component_rng;
use crate::scalar::Real;
use crate::transport::Coupling;

/// Learned time-dependent velocity field on ambient space.
#[derive(Debug, Clone)]
pub struct VectorField<T> {
    net: MlpNetwork<T>,
    time_embed: TimeEmbedding<T>,
    dim: usize,
}

impl<T: Real> VectorField<T> {
    pub fn new<R: Rng>(
        dim: usize,
        hidden: &[usize],
        activation: Activation,
        batch_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let time_embed = TimeEmbedding::default();
        let mut dims = vec![dim + time_embed.dim()];
        dims.extend_from_slice(hidden);
        dims.push(dim);
        let net = MlpNetwork::new(&dims, activation, batch_norm, rng)?;
        Ok(VectorField {
            net,
            time_embed,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn assemble(&self, x: &Array2<T>, t: T) -> Array2<T> {
        let b = x.nrows();
        let emb = self.time_embed.embed(t);
        let mut input = Array2::zeros((b, self.dim + self.time_embed.dim()));
        for i in 0..b {
            for d in 0..self.dim {
                input[[i, d]] = x[[i, d]];
            }
            for k in 0..self.time_embed.dim() {
                input[[i, self.dim + k]] = emb[k];
            }
        }
        input
    }

    /// Velocity of every row at the shared time `t`.
    pub fn velocity(&self, x: &Array2<T>, t: T) -> Result<Array2<T>> {
        self.net.forward(&self.assemble(x, t))
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
            .ok_or_else(|| Error::Data("missing field dim".into()))?;
        Ok(VectorField {
            net,
            time_embed: TimeEmbedding::default(),
            dim: d[0] as usize,
        })
    }
}

/// Options for the flow-matching regression.
#[derive(Debug, Clone)]
pub struct FlowTrainOptions {
    pub iters: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub hidden: Vec<usize>,
    pub batch_norm: bool,
    pub activation: Activation,
}

impl Default for FlowTrainOptions {
    fn default() -> Self {
        FlowTrainOptions {
            iters: 600,
            batch_size: 512,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            hidden: vec![256, 256, 256],
            batch_norm: true,
            activation: Activation::SiLU,
        }
    }
}

/// Regress a vector field onto frozen-interpolant velocities.
///
/// `source`/`target` are the two training marginals (normalized times 0
/// and 1); `coupler` supplies the transport plan for each minibatch pair,
/// typically exact assignment under the learned distance.
pub fn train_flow<T, C>(
    geodesic: &GeodesicModel<T>,
    coupler: C,
    source: &Array2<T>,
    target: &Array2<T>,
    opts: &FlowTrainOptions,
    seed: u64,
) -> Result<(VectorField<T>, Vec<f64>)>
where
    T: Real,
    C: Fn(&Array2<T>, &Array2<T>) -> Result<Coupling<T>>,
{
    if source.nrows() == 0 || target.nrows() == 0 {
        return Err(Error::Training("flow training needs nonempty marginals".into()));
    }
    let dim = geodesic.dim();
    let mut init_rng = component_rng(seed, "flow-init");
    let mut field = VectorField::new(dim, &opts.hidden, opts.activation, opts.batch_norm, &mut init_rng)?;
    let mut opt = AdamW::new(T::of(opts.learning_rate), T::of(opts.weight_decay));
    let mut batch_rng = component_rng(seed, "flow-batches");
    let mut history = Vec::with_capacity(opts.iters);

    let b = opts.batch_size.min(source.nrows()).min(target.nrows()).max(1);
    let src_idx: Vec<usize> = (0..source.nrows()).collect();
    let tgt_idx: Vec<usize> = (0..target.nrows()).collect();
    // The coupler and geodesic are frozen here, so when every iteration
    // consumes the full marginals the plan never changes; hoist it.
    let full_batch = b == source.nrows() && b == target.nrows();
    let full_coupling = if full_batch {
        Some(coupler(source, target)?)
    } else {
        None
    };
    // The field is consumed in inference mode by the integrator, so it also
    // trains in inference mode: normalization layers act as learnable
    // per-feature affines and generation sees exactly the trained function.
    for iter in 0..opts.iters {
        let (x0, x1_matched) = if let Some(coupling) = &full_coupling {
            let mut matched = Array2::zeros(source.raw_dim());
            for &(i, j, _) in &coupling.pairs {
                matched.row_mut(i).assign(&target.row(j));
            }
            (source.clone(), matched)
        } else {
            let mut pick0 = src_idx.clone();
            let mut pick1 = tgt_idx.clone();
            pick0.shuffle(&mut batch_rng);
            pick1.shuffle(&mut batch_rng);
            let x0 = select_rows(source, &pick0[..b]);
            let x1 = select_rows(target, &pick1[..b]);
            let coupling = coupler(&x0, &x1)?;
            let mut matched = Array2::zeros(x1.raw_dim());
            for &(i, j, _) in &coupling.pairs {
                matched.row_mut(i).assign(&x1.row(j));
            }
            (x0, matched)
        };
        let ts = Array1::from_shape_fn(b, |_| T::of(batch_rng.gen_range(0.0..1.0)));
        let (xt, vt) = geodesic.interpolate(&x0, &x1_matched, &ts)?;

        // The field consumes per-sample times, so feed rows one t at a time
        // would be wasteful; instead embed each row's own time.
        let mut input = Array2::zeros((b, dim + field.time_embed.dim()));
        for i in 0..b {
            let emb = field.time_embed.embed(ts[i]);
            for d in 0..dim {
                input[[i, d]] = xt[[i, d]];
            }
            for k in 0..field.time_embed.dim() {
                input[[i, dim + k]] = emb[k];
            }
        }
        let (out, cache) = field.net.forward_cached(&input)?;
        let diff = &out - &vt;
        let bt = T::of(b as f64);
        let loss = diff.iter().map(|&d| d * d).sum::<T>() / bt;
        if !loss.is_finite() {
            return Err(Error::Training(format!("flow loss diverged at iteration {iter}")));
        }
        history.push(loss.to_f64_lossy());
        let grad_out = diff * (T::of(2.0) / bt);
        let (grads, _) = field.net.backward(&cache, &grad_out)?;
        let grad_slices = grads.slices();
        let mut params = field.net.param_slices_mut();
        opt.step(&mut params, &grad_slices)?;
    }
    Ok((field, history))
}

fn select_rows<T: Real>(m: &Array2<T>, idx: &[usize]) -> Array2<T> {
    m.select(ndarray::Axis(0), idx)
}

/// Mean squared regression error of a frozen field against interpolant
/// velocities at the given pairs and times.
pub fn flow_regression_loss<T: Real>(
    field: &VectorField<T>,
    geodesic: &GeodesicModel<T>,
    x0: &Array2<T>,
    x1: &Array2<T>,
    ts: &Array1<T>,
) -> Result<T> {
    let (xt, vt) = geodesic.interpolate(x0, x1, ts)?;
    let mut acc = T::zero();
    for i in 0..x0.nrows() {
        let xi = xt.row(i).insert_axis(ndarray::Axis(0)).to_owned();
        let v = field.velocity(&xi, ts[i])?;
        for d in 0..geodesic.dim() {
            let e = v[[0, d]] - vt[[i, d]];
            acc += e * e;
        }
    }
    Ok(acc / T::of(x0.nrows() as f64))
}

/// Fixed-step RK4 integration of the field over `[t_from, t_to]`.
///
/// Deterministic; aborts with the failing step index if the state leaves the
/// finite range.
pub fn integrate<T: Real>(
    field: &VectorField<T>,
    x0: &Array2<T>,
    t_from: T,
    t_to: T,
    steps: usize,
) -> Result<Array2<T>> {
    if steps < 1 {
        return Err(Error::Config("integration needs at least one step".into()));
    }
    let h = (t_to - t_from) / T::of(steps as f64);
    let mut x = x0.clone();
    let half = T::of(0.5);
    let sixth = T::of(1.0 / 6.0);
    let two = T::of(2.0);
    for step in 0..steps {
        let t = t_from + h * T::of(step as f64);
        let k1 = field.velocity(&x, t)?;
        let k2 = field.velocity(&(&x + &(&k1 * (h * half))), t + h * half)?;
        let k3 = field.velocity(&(&x + &(&k2 * (h * half))), t + h * half)?;
        let k4 = field.velocity(&(&x + &(&k3 * h)), t + h)?;
        x = &x + &((&(&k1 + &(&k2 * two)) + &(&(&k3 * two) + &k4)) * (h * sixth));
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "integration state became non-finite at step {step}"
            )));
        }
    }
    Ok(x)
}

/// One sampled trajectory row: position and class probabilities at a grid time.
#[derive(Debug, Clone)]
pub struct TrajectoryRow {
    pub traj_id: usize,
    pub t: f64,
    pub position: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// Trajectory table emitted for river-plot rendering.
#[derive(Debug, Clone)]
pub struct TrajectoryTable {
    pub rows: Vec<TrajectoryRow>,
    pub dim: usize,
    pub num_classes: usize,
}

impl TrajectoryTable {
    /// CSV with header `traj_id,t,x_1..x_n,p_class_0..p_class_{C−1}`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let xs: Vec<String> = (1..=self.dim).map(|d| format!("x_{d}")).collect();
        let ps: Vec<String> = (0..self.num_classes).map(|c| format!("p_class_{c}")).collect();
        let _ = writeln!(out, "traj_id,t,{},{}", xs.join(","), ps.join(","));
        for row in &self.rows {
            let _ = write!(out, "{},{:.16e}", row.traj_id, row.t);
            for v in &row.position {
                let _ = write!(out, ",{v:.16e}");
            }
            for p in &row.probabilities {
                let _ = write!(out, ",{p:.16e}");
            }
            out.push('\n');
        }
        out
    }

    /// Argmax class sequence of one trajectory, in grid order.
    pub fn class_sequence(&self, traj_id: usize) -> Vec<usize> {
        self.rows
            .iter()
            .filter(|r| r.traj_id == traj_id)
            .map(|r| argmax(&r.probabilities))
            .collect()
    }

    pub fn trajectory_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.rows.iter().map(|r| r.traj_id).collect();
        ids.dedup();
        ids
    }
}

/// Integrate each source point across the grid and classify every visited
/// position.
pub fn simulate_with_classes<T: Real>(
    field: &VectorField<T>,
    classifier: &Classifier<T>,
    x0: &Array2<T>,
    t_grid: &[f64],
    steps_per_unit: usize,
) -> Result<TrajectoryTable> {
    if t_grid.is_empty() {
        return Err(Error::Evaluation("empty time grid".into()));
    }
    if t_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Evaluation("time grid must be strictly ascending".into()));
    }
    if t_grid[0] < 0.0 || *t_grid.last().unwrap() > 1.0 {
        return Err(Error::Evaluation("time grid must lie within [0, 1]".into()));
    }
    let mut rows = Vec::new();
    let mut state = x0.clone();
    let mut current_t = 0.0f64;
    for &t in t_grid {
        if t > current_t {
            let span = t - current_t;
            let steps = ((steps_per_unit as f64 * span).ceil() as usize).max(1);
            state = integrate(field, &state, T::of(current_t), T::of(t), steps)?;
            current_t = t;
        }
        let probs = classifier.predict_proba(&state)?;
        for i in 0..state.nrows() {
            rows.push(TrajectoryRow {
                traj_id: i,
                t,
                position: state.row(i).iter().map(|v| v.to_f64_lossy()).collect(),
                probabilities: probs.row(i).iter().map(|v| v.to_f64_lossy()).collect(),
            });
        }
    }
    rows.sort_by(|a, b| (a.traj_id, a.t).partial_cmp(&(b.traj_id, b.t)).unwrap());
    Ok(TrajectoryTable {
        rows,
        dim: x0.ncols(),
        num_classes: classifier.num_classes(),
    })
}

/// Fraction of trajectories whose argmax class sequence stays inside the
/// allowed set.
pub fn lineage_consistency(table: &TrajectoryTable, allowed: &BTreeSet<usize>) -> f64 {
    let ids = table.trajectory_ids();
    if ids.is_empty() {
        return 0.0;
    }
    let ok = ids
        .iter()
        .filter(|&&id| table.class_sequence(id).iter().all(|c| allowed.contains(c)))
        .count();
    ok as f64 / ids.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::component_rng;
    use crate::transport::{build_cost, ot_coupling, CostMatrix};
    use ndarray::array;

    fn zero_field(dim: usize) -> VectorField<f64> {
        let mut rng = component_rng(0, "zero-field");
        let mut f = VectorField::new(dim, &[8], Activation::SiLU, false, &mut rng).unwrap();
        for layer in &mut f.net.layers {
            layer.weight.fill(0.0);
            layer.bias.fill(0.0);
        }
        f
    }

    fn constant_field(c: &[f64]) -> VectorField<f64> {
        let mut f = zero_field(c.len());
        let last = f.net.layers.len() - 1;
        f.net.layers[last].bias = Array1::from_vec(c.to_vec());
        f
    }

    fn rand_batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = component_rng(seed, "flow-batch");
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_field_is_the_identity_and_reversible() {
        let f = zero_field(3);
        let x = rand_batch(5, 3, 1);
        let fwd = integrate(&f, &x, 0.0, 1.0, 17).unwrap();
        assert_eq!(fwd, x);
        let back = integrate(&f, &fwd, 1.0, 0.0, 17).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn constant_field_shifts_exactly() {
        let f = constant_field(&[2.0, -0.5]);
        let x = rand_batch(4, 2, 2);
        let out = integrate(&f, &x, 0.0, 1.0, 7).unwrap();
        for i in 0..4 {
            assert!((out[[i, 0]] - (x[[i, 0]] + 2.0)).abs() < 1e-12);
            assert!((out[[i, 1]] - (x[[i, 1]] - 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_field_matches_matrix_exponential() {
        // v(x) = A·x; the flow map over [0, 1] is expm(A).
        let a = array![[0.3, -0.8], [0.5, 0.1]];
        let mut f = zero_field(2);
        // One linear layer: input (x, temb) → A·x ignoring the embedding.
        let mut w = Array2::zeros((2 + 64, 2));
        for i in 0..2 {
            for j in 0..2 {
                w[[i, j]] = a[[i, j]];
            }
        }
        let mut rng = component_rng(3, "linear-field");
        let mut net = MlpNetwork::new(&[2 + 64, 2], Activation::SiLU, false, &mut rng).unwrap();
        net.layers[0].weight = w;
        net.layers[0].bias = Array1::zeros(2);
        f.net = net;

        // Series for expm(Aᵀ is not needed: row-vector convention means the
        // state maps as x ↦ x·expm(A)).
        let mut expm = Array2::<f64>::eye(2);
        let mut term = Array2::<f64>::eye(2);
        for k in 1..40 {
            term = term.dot(&a) / (k as f64);
            expm = &expm + &term;
        }
        let x = rand_batch(6, 2, 4);
        let out = integrate(&f, &x, 0.0, 1.0, 100).unwrap();
        let expect = x.dot(&expm);
        for (o, e) in out.iter().zip(expect.iter()) {
            let mag = e.abs().max(1e-6);
            assert!((o - e).abs() / mag < 1e-6, "{o} vs {e}");
        }
    }

    fn straight_geodesic(dim: usize) -> GeodesicModel<f64> {
        let mut rng = component_rng(5, "geo-zero");
        let mut g = GeodesicModel::new(dim, &[8], Activation::SiLU, false, &mut rng).unwrap();
        // Zero out the correction so interpolants are straight lines.
        for layer in &mut g.net.layers {
            layer.weight.fill(0.0);
            layer.bias.fill(0.0);
        }
        g
    }

    fn euclid_coupler(x0: &Array2<f64>, x1: &Array2<f64>) -> crate::error::Result<Coupling<f64>> {
        let cost = build_cost(x0, x1, |a, b| {
            a.iter()
                .zip(b.iter())
                .map(|(&p, &q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt()
        })?;
        ot_coupling(&cost)
    }

    fn quick_opts() -> FlowTrainOptions {
        FlowTrainOptions {
            iters: 10000,
            batch_size: 64,
            learning_rate: 3e-3,
            weight_decay: 0.0,
            hidden: vec![64, 64],
            ..FlowTrainOptions::default()
        }
    }

    #[test]
    fn single_pair_regression_learns_the_constant_velocity() {
        let geo = straight_geodesic(2);
        let x0 = array![[0.0, 0.0]];
        let x1 = array![[1.0, 0.5]];
        let (field, history) =
            train_flow(&geo, euclid_coupler, &x0, &x1, &quick_opts(), 0).unwrap();
        // Squared-loss counterpart of the 5% field tolerance below.
        assert!(history.last().unwrap() < &3e-3, "loss {:?}", history.last());
        let displacement = (1.0f64 + 0.25).sqrt();
        for &t in &[0.1, 0.5, 0.9] {
            let xt = array![[t, 0.5 * t]];
            let v = field.velocity(&xt, t).unwrap();
            let err = ((v[[0, 0]] - 1.0).powi(2) + (v[[0, 1]] - 0.5).powi(2)).sqrt();
            assert!(err <= 0.05 * displacement, "t={t}: field error {err}");
        }
    }

    #[test]
    fn zero_length_problem_learns_a_null_field() {
        let geo = straight_geodesic(2);
        let x = rand_batch(32, 2, 6);
        let (field, _) = train_flow(&geo, euclid_coupler, &x, &x, &quick_opts(), 1).unwrap();
        let v = field.velocity(&x, 0.5).unwrap();
        let mean_norm = v
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&e| e * e).sum::<f64>().sqrt())
            .sum::<f64>()
            / 32.0;
        assert!(mean_norm <= 1e-2, "coupled identical marginals give zero targets, got {mean_norm}");
    }

    #[test]
    fn regression_loss_matches_per_sample_recomputation() {
        let geo = straight_geodesic(2);
        let mut rng = component_rng(7, "frozen");
        let field = VectorField::new(2, &[16], Activation::SiLU, false, &mut rng).unwrap();
        let x0 = rand_batch(10, 2, 8);
        let x1 = rand_batch(10, 2, 9);
        let ts = Array1::from_shape_fn(10, |i| 0.05 + 0.09 * i as f64);
        let loss = flow_regression_loss(&field, &geo, &x0, &x1, &ts).unwrap();
        let (xt, vt) = geo.interpolate(&x0, &x1, &ts).unwrap();
        let mut acc = 0.0;
        for i in 0..10 {
            let xi = xt.row(i).insert_axis(ndarray::Axis(0)).to_owned();
            let v = field.velocity(&xi, ts[i]).unwrap();
            acc += (0..2).map(|d| (v[[0, d]] - vt[[i, d]]).powi(2)).sum::<f64>();
        }
        assert!((loss - acc / 10.0).abs() < 1e-12);
    }

    #[test]
    fn simulation_at_time_zero_reports_source_probabilities() {
        use crate::classifier::Classifier;
        let mut rng = component_rng(10, "sim-clf");
        let net = MlpNetwork::new(&[2, 8, 3], Activation::SiLU, false, &mut rng).unwrap();
        let clf = Classifier::new(net, 0.0);
        let field = zero_field(2);
        let x0 = rand_batch(5, 2, 11);
        let table = simulate_with_classes(&field, &clf, &x0, &[0.0], 100).unwrap();
        assert_eq!(table.rows.len(), 5);
        let probs = clf.predict_proba(&x0).unwrap();
        for row in &table.rows {
            for (a, b) in row.probabilities.iter().zip(probs.row(row.traj_id).iter()) {
                assert_eq!(a, b);
            }
            let sum: f64 = row.probabilities.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn simulation_rows_stay_on_the_simplex_and_tables_are_deterministic() {
        use crate::classifier::Classifier;
        let mut rng = component_rng(12, "sim-clf2");
        let net = MlpNetwork::new(&[2, 8, 4], Activation::SiLU, false, &mut rng).unwrap();
        let clf = Classifier::new(net, 0.0);
        let field = constant_field(&[0.5, 0.0]);
        let x0 = rand_batch(3, 2, 13);
        let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
        let a = simulate_with_classes(&field, &clf, &x0, &grid, 100).unwrap();
        let b = simulate_with_classes(&field, &clf, &x0, &grid, 100).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.rows.len(), 15);
        for row in &a.rows {
            let sum: f64 = row.probabilities.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
        let seq = a.class_sequence(0);
        assert_eq!(seq.len(), 5);
    }

    #[test]
    fn translating_gaussian_is_reproduced_at_heldout_time() {
        use rand_distr::StandardNormal;
        let mut rng = component_rng(14, "gauss");
        let n = 500;
        let x0 = Array2::from_shape_fn((n, 2), |_| {
            let z: f64 = rng.sample(StandardNormal);
            0.1 * z
        });
        let x1 = &x0 + &ndarray::arr1(&[1.0, 0.0]);
        let geo = straight_geodesic(2);
        let opts = FlowTrainOptions {
            iters: 500,
            batch_size: 500,
            hidden: vec![64, 64],
            ..FlowTrainOptions::default()
        };
        let (field, _) = train_flow(&geo, euclid_coupler, &x0, &x1, &opts, 2).unwrap();
        let sim = integrate(&field, &x0, 0.0, 0.5, 50).unwrap();
        let truth = &x0 + &ndarray::arr1(&[0.5, 0.0]);
        let w1 = crate::transport::wasserstein1(&sim, &truth).unwrap();
        assert!(w1 <= 0.1, "held-out marginal W1 {w1}");
    }
}
