//! Semi-supervised active domain adaptation for semantic segmentation.
//!
//! A small encoder-decoder segmenter is trained on a labeled source domain and a
//! shifted target domain. Target annotations are bought incrementally: at trigger
//! epochs the most uncertain unlabeled target images are sent to an annotation
//! oracle. Unlabeled target images contribute through weak-to-strong consistency,
//! and labeled losses are reweighted per class from the IoU measured on the
//! labeled target pool.

pub mod acquire;
pub mod color;
pub mod datagen;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod perturb;
pub mod pools;
pub mod report;
pub mod tensor;
pub mod trainer;
pub mod weighting;

pub use error::{Error, Result};
pub use tensor::{Image, LabelMap, ProbabilityMap, Shape, IGNORE};
