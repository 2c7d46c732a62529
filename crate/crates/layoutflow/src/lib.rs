//! Flow-matching engine for document and UI layout generation.
//!
//! A layout is a set of axis-aligned boxes with categories. The engine
//! flattens layouts into fixed-size vectors (geometry plus analog-bit
//! category codes), learns a time-dependent vector field with a small
//! permutation-equivariant transformer, and generates layouts by
//! integrating that field from a simple prior. A DDPM/DDIM baseline, a
//! layout metrics suite, and an SVG renderer round out the toolkit.
//!
//! The numeric core is generic over the scalar type: `f32` is the
//! training default, `f64` backs the gradient-check fixtures and
//! checkpoint storage. Concrete aliases for both live at the crate root.

pub mod checkpoint;
pub mod conditioning;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod prior;
pub mod render;
pub mod sampler;
pub mod scalar;
pub mod trainer;

pub use checkpoint::{Checkpoint, Head};
pub use conditioning::{ConditionMask, TaskKind};
pub use data::{CategorySet, Dataset, Element, FlowVector, Layout};
pub use error::{Error, Result};
pub use flow::{TrainingSample, TrajectoryKind};
pub use model::{ModelConfig, ModelParameters, VectorFieldModel};
pub use prior::PriorKind;
pub use sampler::{SampleConfig, Sampler, SolverKind, TrajectoryTrace};
pub use scalar::Scalar;
pub use trainer::TrainConfig;

/// Layout vector in training precision.
pub type FlowVector32 = FlowVector<f32>;
/// Layout vector in checking precision.
pub type FlowVector64 = FlowVector<f64>;
/// Vector-field network in training precision.
pub type VectorFieldModel32 = VectorFieldModel<f32>;
/// Vector-field network in checking precision (gradient checks run here).
pub type VectorFieldModel64 = VectorFieldModel<f64>;
