//! Generative re-ranking: training-sample construction, the joint
//! cross-entropy + ranking objective, and the built-in re-ranker.

pub mod loss;
pub mod model;
pub mod samples;
pub mod train;

pub use loss::{
    LossConfig, LossParts, ScaledProbs, ce_loss, ce_loss_grad, minmax_scale, ranking_loss,
    total_loss, total_loss_grad,
};
pub use model::{EncodedInput, ModelShape, RerankerModel, RerankerParams, Vocabulary};
pub use samples::{RerankSample, SampleConfig, SampleSet, build_training_samples, target_order};
pub use train::{
    EpochLog, RerankTrainConfig, RerankTraining, batch_gradient, mean_loss, train_reranker,
};
