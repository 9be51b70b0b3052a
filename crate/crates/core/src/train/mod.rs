//! Training: query and sensor sampling, the weighted loss, optimizers and
//! the epoch loop.

mod gradcheck;
mod loss;
mod optim;
mod sampler;
mod trainer;

pub use gradcheck::{batch_loss, batch_loss_gradient, gradient_check, GradCheckReport, LossExample, GRAD_FLOOR};
pub use loss::{compute_loss, loss_weights};
pub use optim::Optimizer;
pub use sampler::{sample_nearby_sensors, sample_query_batch};
pub use trainer::{
    write_train_log, Example, TrainBatch, TrainFailure, TrainLogRow, TrainOptions, TrainReport, TrainState, Trainer,
    MAX_VAL_QUERIES,
};
