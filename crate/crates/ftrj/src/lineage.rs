//! Directed lineage prior over class labels.
//!
//! The adjacency matrix `A` has `A[i][j] = 1` when class `i` may transition to
//! class `j`; self-loops are mandatory. The penalty machinery consumes the
//! illegal-direction operator `M = 𝟙 − Aᵀ` (`𝟙` is the all-ones matrix), whose
//! column `c` indicates the classes *not* reachable in one step from `c`.
//! General directed acyclic graphs are accepted; nothing in the construction
//! requires tree structure.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Validated directed transition prior over named classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LineageTree {
    class_names: Vec<String>,
    adjacency: Array2<u8>,
}

/// The operator `M = 𝟙 − Aᵀ`; entry `m[j][c] = 1` iff transition `c → j` is
/// forbidden. Its diagonal is identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct IllegalDirectionMatrix {
    m: Array2<u8>,
}

/// JSON wire format: `{"classes": [...], "edges": [[from, to], ...]}`.
/// Self-loops are implicit and added on load.
#[derive(Debug, Serialize, Deserialize)]
struct LineageFile {
    classes: Vec<String>,
    edges: Vec<(usize, usize)>,
}

impl LineageTree {
    /// Validate and build a tree from an explicit adjacency matrix.
    pub fn new(class_names: Vec<String>, adjacency: Array2<u8>) -> Result<Self> {
        let n = class_names.len();
        if n == 0 {
            return Err(Error::InvalidLineage("need at least one class".into()));
        }
        if adjacency.nrows() != n || adjacency.ncols() != n {
            return Err(Error::InvalidLineage(format!(
                "adjacency is {}×{}, expected {n}×{n}",
                adjacency.nrows(),
                adjacency.ncols()
            )));
        }
        for ((i, j), &v) in adjacency.indexed_iter() {
            if v > 1 {
                return Err(Error::InvalidLineage(format!("non-binary entry at ({i},{j})")));
            }
            if i == j && v != 1 {
                return Err(Error::InvalidLineage(format!("missing self-loop for class {i}")));
            }
        }
        let mut seen = BTreeSet::new();
        for name in &class_names {
            if !seen.insert(name) {
                return Err(Error::InvalidLineage(format!("duplicate class name '{name}'")));
            }
        }
        Ok(LineageTree { class_names, adjacency })
    }

    /// Build from an edge list; self-loops are added automatically.
    pub fn from_edges(class_names: Vec<String>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = class_names.len();
        let mut adj = Array2::<u8>::eye(n).mapv(|v| v as u8);
        for &(from, to) in edges {
            if from >= n || to >= n {
                return Err(Error::InvalidLineage(format!(
                    "edge ({from},{to}) out of range for {n} classes"
                )));
            }
            adj[[from, to]] = 1;
        }
        LineageTree::new(class_names, adj)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn adjacency(&self) -> &Array2<u8> {
        &self.adjacency
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.adjacency[[from, to]] == 1
    }

    /// All classes reachable from `start` by directed edges (including itself).
    pub fn reachable_from(&self, start: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![start];
        while let Some(c) = stack.pop() {
            if !seen.insert(c) {
                continue;
            }
            for j in 0..self.num_classes() {
                if self.adjacency[[c, j]] == 1 && !seen.contains(&j) {
                    stack.push(j);
                }
            }
        }
        seen
    }

    /// Transitively closed copy: grandparent → grandchild becomes admissible.
    /// An experiment knob, not the default reading of the prior.
    pub fn transitive_closure(&self) -> Self {
        let n = self.num_classes();
        let mut adj = self.adjacency.clone();
        for k in 0..n {
            for i in 0..n {
                if adj[[i, k]] == 1 {
                    for j in 0..n {
                        if adj[[k, j]] == 1 {
                            adj[[i, j]] = 1;
                        }
                    }
                }
            }
        }
        LineageTree {
            class_names: self.class_names.clone(),
            adjacency: adj,
        }
    }

    /// The all-admissible prior (every transition legal), which zeroes the
    /// illegal-direction operator.
    pub fn full(class_names: Vec<String>) -> Result<Self> {
        let n = class_names.len();
        LineageTree::new(class_names, Array2::from_elem((n, n), 1))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: LineageFile = serde_json::from_str(&text)?;
        LineageTree::from_edges(file.classes, &file.edges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut edges = Vec::new();
        for ((i, j), &v) in self.adjacency.indexed_iter() {
            if v == 1 && i != j {
                edges.push((i, j));
            }
        }
        let file = LineageFile {
            classes: self.class_names.clone(),
            edges,
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }
}

impl IllegalDirectionMatrix {
    /// `M = 𝟙 − Aᵀ`, entrywise.
    pub fn from_tree(tree: &LineageTree) -> Self {
        let n = tree.num_classes();
        let mut m = Array2::<u8>::zeros((n, n));
        for j in 0..n {
            for c in 0..n {
                m[[j, c]] = 1 - tree.adjacency[[c, j]];
            }
        }
        IllegalDirectionMatrix { m }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &Array2<u8> {
        &self.m
    }

    /// Column `c`: indicator of classes not reachable in one step from `c`.
    pub fn illegal_from(&self, c: usize) -> Vec<u8> {
        self.m.column(c).to_vec()
    }

    /// True when every transition is admissible (the operator vanishes).
    pub fn is_zero(&self) -> bool {
        self.m.iter().all(|&v| v == 0)
    }
}
