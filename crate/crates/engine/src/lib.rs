//! Simulated multi-worker training engine for gaussian-splat scenes.
//!
//! The engine realizes mixed parallelism on one machine: gaussians are
//! sharded across `G` logical workers for transformation, densification, and
//! optimizer steps, while rendering and loss are partitioned over contiguous
//! runs of 16x16 pixel blocks balanced by measured per-block cost. Workers
//! exchange projected gaussians through a sparse all-to-all over an
//! in-process transport, and the pixel partition is recomputed every
//! iteration from the previous visit's timings.

pub mod engine;
pub mod error;
pub mod exchange;
pub mod experiments;
pub mod io;
pub mod partition;
pub mod render;
pub mod rng;
pub mod shard;
pub mod timing;
pub mod topology;
pub mod worker;

pub use engine::{Engine, EngineConfig, SceneData, StepMetrics};
pub use error::EngineError;
pub use partition::{compute_division_points, BlockLayout, PixelPartition};
pub use timing::{CostHistory, TimingRecord};
