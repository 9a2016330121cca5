//! Deep open world recognition.
//!
//! A feature extractor is trained with a global clustering term (softmax over
//! distances to class centroids), a local clustering term (soft nearest
//! neighbour loss over the batch) and feature distillation against the
//! previous step's extractor. Classification is nearest class mean in the
//! learned space; each class carries a learned maximal distance beyond which
//! a sample is rejected as unknown. Those distances are fit in a second stage
//! on exemplars held out from feature training.
//!
//! The NNO and DeepNNO rejection rules are included as baselines.
//!
//! Module map:
//!
//! * [`metric_stats`]: distances, online centroids, the pooled variance used as temperature
//! * [`backbone`]: linear / MLP extractor with hand-written backprop and SGD
//! * [`losses`]: every objective with its analytic gradient
//! * [`classifier`]: NCM, learned-threshold rejection, NNO and DeepNNO rules
//! * [`memory`]: fixed-budget exemplar memory with herding and a held-out split
//! * [`protocol`]: the incremental two-stage training loop
//! * [`evaluation`]: closed world, open set, OWR and OWR-H metrics
//! * [`datasets`]: synthetic benchmarks, CSV ingestion, episode schedules
//! * [`checkpoint`]: versioned on-disk model container
//! * [`gradcheck`]: finite differences for gradient tests

pub mod backbone;
pub mod checkpoint;
pub mod classifier;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod memory;
pub mod metric_stats;
pub mod protocol;

pub use error::{OwrError, Result};
pub use metric_stats::{ClassId, ClassStats, RunningVariance};
