//! Small embedding network trained with the combined triplet and
//! cross-entropy objective.

pub mod inputs;
pub mod loss;
pub mod model;
pub mod optim;
pub mod train;

pub use inputs::{histogram_grid, manifest_inputs, INPUT_DIM};
pub use loss::{backward, combined_loss, cross_entropy, loss_and_gradient, triplet_loss, LossReport, LossWeights};
pub use model::{forward, Activations, Dense, EmbeddingModel};
pub use optim::{lr_at_epoch, sgd_step};
pub use train::{history_csv, train, train_on_vectors, window_means, write_history, EpochRecord, TrainConfig, TrainOutcome};
