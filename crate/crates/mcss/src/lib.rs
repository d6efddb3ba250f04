//! Masked cross-source sampling over a per-identity clip pool.
//!
//! A sample pairs a reference frame and a target window from different
//! clips of one identity, composites both over one shared background, and
//! attaches motion and illumination guidance plus audio features.

pub mod background;
pub mod error;
pub mod pool;
pub mod prefetch;
pub mod sample;
pub mod synth;

pub use background::{composite_background, BackgroundBank};
pub use error::{Error, Result};
pub use pool::{build_identity_pool, ClipMeta, ClipRecord, IdentityPool};
pub use prefetch::SampleStream;
pub use sample::{
    assemble_training_sample, sample_cross_source_pair, Dataset, PairSelection, SamplerConfig,
    TrainingSample,
};
pub use synth::{generate_synthetic_dataset, DatasetInfo, DatasetSpec};
