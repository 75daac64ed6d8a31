//! Datasets: labeled population snapshots, the synthetic benchmark generator,
//! and CSV persistence.
//!
//! Datasets are points in ambient space with a class label and a physical
//! timepoint tag per point. Each distinct timepoint carries a role flag
//! (`train` or `heldout`); training phases only ever consume positions from
//! train timepoints, while held-out positions exist purely for evaluation.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::lineage::LineageTree;
use crate::rng::component_rng;
use crate::scalar::Real;

/// Role of a timepoint in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Heldout,
}

/// Points in ambient space with class labels and timepoint tags.
#[derive(Debug, Clone)]
pub struct TimeSeriesDataset<T> {
    points: Array2<T>,
    labels: Vec<usize>,
    times: Vec<f64>,
    /// Sorted distinct timepoint tags.
    timepoints: Vec<f64>,
    /// Role per entry of `timepoints`.
    roles: Vec<Role>,
}

impl<T: Real> TimeSeriesDataset<T> {
    pub fn new(points: Array2<T>, labels: Vec<usize>, times: Vec<f64>) -> Result<Self> {
        let n = points.nrows();
        if labels.len() != n || times.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "points/labels/times length mismatch: {n}/{}/{}",
                labels.len(),
                times.len()
            )));
        }
        if n == 0 {
            return Err(Error::Data("dataset has no points".into()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset contains non-finite coordinates".into()));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("dataset contains non-finite timepoint tag".into()));
        }
        let mut timepoints: Vec<f64> = times.to_vec();
        timepoints.sort_by(|a, b| a.partial_cmp(b).unwrap());
        timepoints.dedup();
        let roles = vec![Role::Train; timepoints.len()];
        Ok(TimeSeriesDataset {
            points,
            labels,
            times,
            timepoints,
            roles,
        })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ambient dimension.
    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &Array2<T> {
        &self.points
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn timepoints(&self) -> &[f64] {
        &self.timepoints
    }

    pub fn role(&self, timepoint_idx: usize) -> Role {
        self.roles[timepoint_idx]
    }

    /// Mark the given physical timepoints as held out; the rest are train.
    pub fn set_heldout(&mut self, heldout: &[f64]) -> Result<()> {
        for &t in heldout {
            if !self.timepoints.iter().any(|&tp| tp == t) {
                return Err(Error::Data(format!("heldout timepoint {t} not present in dataset")));
            }
        }
        let mut roles = self.roles.clone();
        for (i, &tp) in self.timepoints.iter().enumerate() {
            roles[i] = if heldout.contains(&tp) { Role::Heldout } else { Role::Train };
        }
        let train_count = roles.iter().filter(|r| **r == Role::Train).count();
        if train_count < 2 {
            return Err(Error::Data(format!(
                "need at least two train timepoints, have {train_count}"
            )));
        }
        self.roles = roles;
        Ok(())
    }

    pub fn train_timepoints(&self) -> Vec<f64> {
        self.timepoints
            .iter()
            .zip(&self.roles)
            .filter(|(_, r)| **r == Role::Train)
            .map(|(&t, _)| t)
            .collect()
    }

    pub fn heldout_timepoints(&self) -> Vec<f64> {
        self.timepoints
            .iter()
            .zip(&self.roles)
            .filter(|(_, r)| **r == Role::Heldout)
            .map(|(&t, _)| t)
            .collect()
    }

    /// Row indices whose tag equals the given physical timepoint.
    pub fn indices_at(&self, t: f64) -> Vec<usize> {
        self.times
            .iter()
            .enumerate()
            .filter(|(_, &tt)| tt == t)
            .map(|(i, _)| i)
            .collect()
    }

    /// Positions observed at the given physical timepoint.
    pub fn marginal_at(&self, t: f64) -> Array2<T> {
        let idx = self.indices_at(t);
        self.points.select(Axis(0), &idx)
    }

    pub fn select_points(&self, idx: &[usize]) -> Array2<T> {
        self.points.select(Axis(0), idx)
    }

    /// Largest label index plus one.
    pub fn num_labels(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    /// Check that every label indexes into the tree's class set.
    pub fn validate_against(&self, tree: &LineageTree) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= tree.num_classes()) {
            Some(&bad) => Err(Error::Data(format!(
                "label {bad} out of range for {} lineage classes",
                tree.num_classes()
            ))),
            None => Ok(()),
        }
    }

    /// Write as CSV with header `t,label,x_1,...,x_n` (17 significant digits,
    /// exact round trip). Held-out timepoints are recorded on a leading
    /// comment line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let heldout = self.heldout_timepoints();
        if !heldout.is_empty() {
            let tags: Vec<String> = heldout.iter().map(|t| format!("{t:.16e}")).collect();
            let _ = writeln!(out, "# heldout: {}", tags.join(","));
        }
        let cols: Vec<String> = (1..=self.dim()).map(|i| format!("x_{i}")).collect();
        let _ = writeln!(out, "t,label,{}", cols.join(","));
        for i in 0..self.len() {
            let _ = write!(out, "{:.16e},{}", self.times[i], self.labels[i]);
            for j in 0..self.dim() {
                let _ = write!(out, ",{:.16e}", self.points[[i, j]].to_f64_lossy());
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut heldout: Vec<f64> = Vec::new();
        let mut lines = text.lines().peekable();
        if let Some(first) = lines.peek() {
            if let Some(rest) = first.strip_prefix("# heldout:") {
                heldout = rest
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Data(format!("bad heldout tag: {e}")))?;
                lines.next();
            }
        }
        let header = lines.next().ok_or_else(|| Error::Data("missing header".into()))?;
        let fields: Vec<&str> = header.split(',').collect();
        if fields.len() < 3 || fields[0] != "t" || fields[1] != "label" {
            return Err(Error::Data("header must be t,label,x_1,...".into()));
        }
        let dim = fields.len() - 2;
        let mut times = Vec::new();
        let mut labels = Vec::new();
        let mut values: Vec<T> = Vec::new();
        for (row, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != dim + 2 {
                return Err(Error::Data(format!(
                    "row {}: expected {} fields, found {}",
                    row + 1,
                    dim + 2,
                    cells.len()
                )));
            }
            let t: f64 = cells[0]
                .trim()
                .parse()
                .map_err(|e| Error::Data(format!("row {}: bad time: {e}", row + 1)))?;
            let label: usize = cells[1]
                .trim()
                .parse()
                .map_err(|e| Error::Data(format!("row {}: bad label: {e}", row + 1)))?;
            times.push(t);
            labels.push(label);
            for c in &cells[2..] {
                let v: f64 = c
                    .trim()
                    .parse()
                    .map_err(|e| Error::Data(format!("row {}: bad coordinate: {e}", row + 1)))?;
                values.push(T::of(v));
            }
        }
        if times.is_empty() {
            return Err(Error::Data("no data rows".into()));
        }
        let points = Array2::from_shape_vec((times.len(), dim), values)
            .map_err(|e| Error::Data(e.to_string()))?;
        let mut ds = TimeSeriesDataset::new(points, labels, times)?;
        if !heldout.is_empty() {
            ds.set_heldout(&heldout)?;
        }
        Ok(ds)
    }
}

/// Recipe for the synthetic five-cluster benchmark.
///
/// Five isotropic Gaussian clusters over three timepoints. The two endpoint
/// populations sit on the horizontal axis, so the observed geometry never
/// favors up over down. The true intermediate cluster sits above the midpoint
/// and is observed only at the held-out middle time. Two decoy populations —
/// one on the straight line between the endpoints, one mirrored below the
/// true cluster — are observed at the first timepoint, so the classifier
/// knows their types while the straight path stays geometrically optimal.
/// The lineage prior admits only the arc through the upper cluster.
#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    /// Ambient dimension (2 or 50 in the benchmarks).
    pub dim: usize,
    /// Per-coordinate standard deviation of every cluster.
    pub cluster_std: f64,
    /// Points in each endpoint cluster.
    pub endpoint_count: usize,
    /// Points in each intermediate-class cluster.
    pub intermediate_count: usize,
    /// Vertical offset of the true (and mirrored decoy) cluster.
    pub arm_height: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            dim: 2,
            cluster_std: 0.1,
            endpoint_count: 500,
            intermediate_count: 25,
            arm_height: 0.9,
        }
    }
}

impl SyntheticConfig {
    /// Cluster centers, embedded in the first two coordinates.
    pub fn centers(&self) -> Vec<Vec<f64>> {
        let h = self.arm_height;
        let base = [(-1.0, 0.0), (0.0, h), (0.0, 0.0), (0.0, -h), (1.0, 0.0)];
        base.iter()
            .map(|&(x, y)| {
                let mut c = vec![0.0; self.dim];
                c[0] = x;
                if self.dim > 1 {
                    c[1] = y;
                }
                c
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.dim < 1 {
            return Err(Error::Config("synthetic.dim must be ≥ 1".into()));
        }
        if self.cluster_std <= 0.0 {
            return Err(Error::Config("synthetic.cluster_std must be > 0".into()));
        }
        if self.endpoint_count < 1 || self.intermediate_count < 1 {
            return Err(Error::Config("synthetic counts must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Generate the synthetic benchmark dataset and its lineage prior.
///
/// Timepoints are `{0, 1, 2}` with `1` held out. Composition: `t = 0` holds
/// the start cluster (class 0) plus both decoy populations (classes 2 and 3);
/// `t = 1` holds the true intermediate cluster (class 1); `t = 2` holds the
/// end cluster (class 4). The lineage prior admits `0 → 1 → 4`; classes 2 and
/// 3 carry only self-loops.
pub fn gen_synthetic<T: Real>(
    cfg: &SyntheticConfig,
    seed: u64,
) -> Result<(TimeSeriesDataset<T>, LineageTree)> {
    cfg.validate()?;
    let centers = cfg.centers();
    let mut rng = component_rng(seed, "synthetic-data");
    let mut points: Vec<T> = Vec::new();
    let mut labels = Vec::new();
    let mut times = Vec::new();
    // (class, count, physical time)
    let groups = [
        (0usize, cfg.endpoint_count, 0.0),
        (2, cfg.intermediate_count, 0.0),
        (3, cfg.intermediate_count, 0.0),
        (1, cfg.intermediate_count, 1.0),
        (4, cfg.endpoint_count, 2.0),
    ];
    for (class, count, t) in groups {
        for _ in 0..count {
            for d in 0..cfg.dim {
                let noise: f64 = rng.sample(StandardNormal);
                points.push(T::of(centers[class][d] + cfg.cluster_std * noise));
            }
            labels.push(class);
            times.push(t);
        }
    }
    let n = labels.len();
    let array = Array2::from_shape_vec((n, cfg.dim), points).map_err(|e| Error::Data(e.to_string()))?;
    let mut ds = TimeSeriesDataset::new(array, labels, times)?;
    ds.set_heldout(&[1.0])?;
    let names = (0..5).map(|c| c.to_string()).collect();
    let tree = LineageTree::from_edges(names, &[(0, 1), (1, 4)])?;
    Ok((ds, tree))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_produces_1075_points() {
        let (ds, tree) = gen_synthetic::<f64>(&SyntheticConfig::default(), 0).unwrap();
        assert_eq!(ds.len(), 1075);
        assert_eq!(ds.dim(), 2);
        assert_eq!(tree.num_classes(), 5);
        assert_eq!(ds.timepoints(), &[0.0, 1.0, 2.0]);
        assert_eq!(ds.heldout_timepoints(), vec![1.0]);
        assert_eq!(ds.indices_at(0.0).len(), 550);
        assert_eq!(ds.indices_at(1.0).len(), 25);
        assert_eq!(ds.indices_at(2.0).len(), 500);
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let cfg = SyntheticConfig::default();
        let (a, _) = gen_synthetic::<f64>(&cfg, 7).unwrap();
        let (b, _) = gen_synthetic::<f64>(&cfg, 7).unwrap();
        assert_eq!(a.points(), b.points());
        assert_eq!(a.labels(), b.labels());
        let (c, _) = gen_synthetic::<f64>(&cfg, 8).unwrap();
        assert_ne!(a.points(), c.points());
    }

    #[test]
    fn endpoint_cluster_std_is_near_nominal() {
        let (ds, _) = gen_synthetic::<f64>(&SyntheticConfig::default(), 3).unwrap();
        // Class 0 has 500 points; the sampling-noise band on the std estimate
        // is far tighter than [0.08, 0.12].
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == 0).collect();
        let pts = ds.select_points(&idx);
        for d in 0..2 {
            let col = pts.column(d);
            let mean = col.sum() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
            let std = var.sqrt();
            assert!((0.08..=0.12).contains(&std), "dim {d}: std {std}");
        }
    }

    #[test]
    fn true_and_mirror_clusters_have_mirrored_moments() {
        let (ds, _) = gen_synthetic::<f64>(&SyntheticConfig::default(), 5).unwrap();
        let mean_of = |class: usize| -> (f64, f64) {
            let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == class).collect();
            let pts = ds.select_points(&idx);
            let m0 = pts.column(0).sum() / idx.len() as f64;
            let m1 = pts.column(1).sum() / idx.len() as f64;
            (m0, m1)
        };
        let (x1, y1) = mean_of(1);
        let (x3, y3) = mean_of(3);
        // Sampling tolerance: std 0.1 over 25 points gives ~0.02 standard error.
        assert!((x1 - x3).abs() < 0.1, "x means {x1} vs {x3}");
        assert!((y1 + y3).abs() < 0.1, "y means {y1} vs mirrored {y3}");
    }

    #[test]
    fn high_dimensional_variant_embeds_layout_in_first_two_coordinates() {
        let cfg = SyntheticConfig {
            dim: 50,
            ..SyntheticConfig::default()
        };
        let (ds, _) = gen_synthetic::<f64>(&cfg, 1).unwrap();
        assert_eq!(ds.dim(), 50);
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == 4).collect();
        let pts = ds.select_points(&idx);
        let m0 = pts.column(0).sum() / idx.len() as f64;
        assert!((m0 - 1.0).abs() < 0.05);
        for d in 2..50 {
            let m = pts.column(d).sum() / idx.len() as f64;
            assert!(m.abs() < 0.05, "dim {d} should be pure noise, mean {m}");
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let (ds, _) = gen_synthetic::<f64>(
            &SyntheticConfig {
                endpoint_count: 40,
                intermediate_count: 10,
                ..SyntheticConfig::default()
            },
            11,
        )
        .unwrap();
        ds.save(&path).unwrap();
        let loaded = TimeSeriesDataset::<f64>::load(&path).unwrap();
        assert_eq!(loaded.points(), ds.points());
        assert_eq!(loaded.labels(), ds.labels());
        assert_eq!(loaded.times(), ds.times());
        assert_eq!(loaded.heldout_timepoints(), ds.heldout_timepoints());
    }

    #[test]
    fn empty_body_and_malformed_rows_error() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("empty.csv");
        std::fs::write(&p1, "t,label,x_1\n").unwrap();
        let err = TimeSeriesDataset::<f64>::load(&p1).unwrap_err();
        assert!(err.to_string().contains("no data rows"));

        let p2 = dir.path().join("short.csv");
        std::fs::write(&p2, "t,label,x_1,x_2\n0.0,1,0.5\n").unwrap();
        assert!(TimeSeriesDataset::<f64>::load(&p2).is_err());
    }

    #[test]
    fn single_row_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.csv");
        std::fs::write(&p, "t,label,x_1,x_2\n0.0,2,0.5,-1.25\n").unwrap();
        let ds = TimeSeriesDataset::<f64>::load(&p).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels(), &[2]);
        assert_eq!(ds.points()[[0, 1]], -1.25);
    }

    #[test]
    fn heldout_assignment_requires_existing_time_and_two_train_points() {
        let (mut ds, _) = gen_synthetic::<f64>(&SyntheticConfig::default(), 0).unwrap();
        assert!(ds.set_heldout(&[0.25]).is_err());
        assert!(ds.set_heldout(&[0.0, 1.0]).is_err(), "would leave one train timepoint");
        ds.set_heldout(&[1.0]).unwrap();
    }
}
