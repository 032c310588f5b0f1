//! Feature records, the MAFV1 file format, the synthetic benchmark and
//! dataset splitting.

pub mod format;
pub mod record;
pub mod split;
pub mod synth;

pub use format::{read_features, write_features};
pub use record::{DataDims, Dataset, FeatureRecord};
pub use split::{batches, kfold, split};
pub use synth::{age_features, compute_oracle, decode_signal, synth_generate, SynthConfig, SynthOracle};
