//! Online continual learning on noisy, blurry task streams with a
//! purity- and diversity-aware episodic memory.
//!
//! Modules:
//! - [`nnkit`]: a two-layer MLP with hand-written backprop.
//! - [`stream`]: datasets, label-noise injection and blurry task splits.
//! - [`memory`]: the episodic memory and its update rules.
//! - [`robust`]: loss/uncertainty mixtures, relabeling and consistency training.
//! - [`metrics`]: purity, diversity and accuracy.
//! - [`harness`]: configuration, data synthesis and the experiment loop.

pub mod error;
pub mod harness;
pub mod memory;
pub mod metrics;
pub mod nnkit;
pub mod robust;
pub mod seed;
pub mod stream;

pub use error::{Error, Result};
pub use harness::ExperimentConfig;
pub use memory::{AlphaMode, EpisodicMemory, SamplerKind};
pub use metrics::RunRecord;
pub use nnkit::{LrSchedule, Model};
pub use robust::RobustMode;
pub use stream::{Dataset, Example, NoiseType, TaskStream};
