//! Contrastive training of the alias encoder.
//!
//! A batch holds two aliases from each of N/2 distinct QID groups. Rows are
//! projected, unit-normalized and compared by cosine; hard triplets are mined
//! under the Euclidean margin rule and the multi-similarity loss is taken
//! over the mined positive/negative index sets. Gradients are analytic and
//! flow back through the row normalization into a linear projection head
//! updated with AdamW.

mod head;
mod loss;
mod mining;
mod sampler;
mod similarity;
mod train;

pub use head::{AdamWConfig, HeadGradient, ProjectionHead};
pub use loss::{ms_loss, ms_loss_grad, MsLossParams};
pub use mining::{build_index_sets, euclidean, mine_hard_triplets, IndexSets, MiningOutcome, Triplet};
pub use sampler::{sample_batches, TrainingBatch};
pub use similarity::{pairwise_cosine, SimilarityMatrix};
pub use train::{train_projection, EpochReport, TrainingHyperparams, TrainingReport};

/// Row-norm tolerance for inputs that must already be unit-normalized.
pub(crate) const UNIT_TOLERANCE: f64 = 1e-5;
