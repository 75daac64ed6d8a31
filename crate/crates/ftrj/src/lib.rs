//! Lineage-guided Finsler geodesic learning for population snapshots.
//!
//! The crate learns an asymmetric local cost over ambient space from a
//! cell-type classifier and a directed lineage graph, embeds that cost into a
//! learnable distance approximation, fits geodesic interpolants between two
//! observed timepoints under optimal-transport couplings, and finally
//! regresses a time-dependent vector field onto the interpolant velocities so
//! that held-out timepoints can be simulated and scored with Wasserstein-1.
//!
//! All numerical kernels are generic over the scalar type through
//! [`scalar::Real`]; the concrete aliases below fix `f64`, which every shipped
//! pipeline and test uses.

pub mod classifier;
pub mod config;
pub mod data;
pub mod finsler;
pub mod flow;
pub mod embed;
pub mod error;
pub mod lineage;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod transport;

pub use error::{Error, Result};

/// Scalar type used by the shipped pipelines.
pub type Scalar = f64;

/// Dense row-major matrix of the default scalar.
pub type Matrix = ndarray::Array2<Scalar>;
/// Dense vector of the default scalar.
pub type Vector = ndarray::Array1<Scalar>;

/// Multilayer perceptron over the default scalar.
pub type Mlp = nn::MlpNetwork<Scalar>;
/// AdamW optimizer state over the default scalar.
pub type AdamW = nn::AdamW<Scalar>;
/// Cell-type classifier over the default scalar.
pub type Classifier = classifier::Classifier<Scalar>;
/// Conformal base metric over the default scalar.
pub type ConformalMetric = finsler::ConformalMetric<Scalar>;
/// Combined lineage-informed metric over the default scalar.
pub type FinslerMetric<'a> = finsler::FinslerMetric<'a, Scalar>;
/// Distance-embedding model over the default scalar.
pub type EmbeddingModel = embed::EmbeddingModel<Scalar>;
/// Geodesic interpolant model over the default scalar.
pub type GeodesicModel = embed::GeodesicModel<Scalar>;
/// Flow-matching vector field over the default scalar.
pub type VectorField = flow::VectorField<Scalar>;
/// Labeled time-series dataset over the default scalar.
pub type TimeSeriesDataset = data::TimeSeriesDataset<Scalar>;
