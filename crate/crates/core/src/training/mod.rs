//! Detector training: total loss, warm-up instance weighting and the SGD
//! loop with loss-curve and checkpoint output.

mod config;
mod loss;
mod trainer;

pub use config::{LossToggles, TrainConfig};
pub use loss::{compute_instance_weights, total_loss, warmup_ramp, InstanceWeight, LossReport, TERM_NAMES};
pub use trainer::{
    smoothed, train, train_to_dir, LossHistory, Sample, TrainOutcome, Trainer, CHECKPOINT_FILE, CONFIG_FILE,
    LOSS_CURVE_FILE,
};
