//! Interaction logs, evaluation splits, negative sampling and item features.

pub mod features;
pub mod log;
pub mod split;
pub mod synthetic;

pub use features::{build_item_features, FeatureProvenance, FeatureSource, ItemFeatureMatrix};
pub use log::{load_interactions, parse_interactions, Interaction, InteractionLog, LogFormat, LogStats, RawRecord};
pub use split::{leave_one_out_split, sample_negatives, CandidateMode, EvalSplit, TestCase};
pub use synthetic::{synthetic_log, SyntheticConfig};
