//! Parameter storage, optimization and branch fine-tuning.

mod branch;
mod checkpoint;
mod config;
mod params;
mod schedule;
mod sgd;
mod trainer;

pub use branch::{
    finetune, finetune_cached, finetune_full, frontier_activations, make_branch, BranchHead,
    HeadSpec, LossKind,
};
pub use checkpoint::{checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint};
pub use config::TrainConfig;
pub use params::{derive_seed, fnv1a64, init_params, ParamStore};
pub use schedule::lr_at;
pub use sgd::sgd_momentum_step;
pub use trainer::{argmax, batch_accuracy, classifier, head_loss, train, train_from, LogRow, TrainLog};
