//! Model assembly, objective, schedule, checkpoints and training loops.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod optim;
pub mod train;

pub use checkpoint::{Checkpoint, ModelSpec};
pub use config::{DataConfig, ModelConfig, RunConfig, TrainConfig};
pub use model::{total_loss, CfcmlModel, ForwardOutput, LossBundle, ModelSchema, PreparedSample};
pub use optim::{lr_at, Adam};
pub use train::{
    build_model, cross_validate, evaluate, load_manifest, model_from_checkpoint, prepare_split, run_training, CvReport,
    EpochRecord,
    Evaluation, TrainOutcome, Trainer,
};
