//! Speech tokenization toolkit: pool frame features into segments, quantize them
//! with K-means, train a unit language model and score paired stimuli.

pub mod error;
pub mod eval;
pub mod features;
mod fsutil;
pub mod lm;
pub mod pack;
pub mod quantize;
pub mod segment;
pub mod sweep;
pub mod units;

pub use error::{Error, Result};
pub use eval::{evaluate, Benchmark, EvalReport, StimulusPair};
pub use features::{CorpusManifest, FeatureMatrix, UtteranceRecord};
pub use lm::{train_ngram, NgramConfig, NgramModel, Scorer};
pub use pack::{pack, PackedDataset};
pub use quantize::{assign, train_kmeans, Codebook, KMeansConfig};
pub use segment::{segment, PooledSequence, Segmentation, SegmentationPlan};
pub use sweep::{emit_report, run_sweep, SweepConfig};
pub use units::{deduplicate, encode, UnitSequence};
