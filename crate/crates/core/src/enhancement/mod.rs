//! Mask-based enhancement: the BLSTM mask network, training losses, the
//! training loop and checkpoint selection.

mod losses;
mod masknet;
mod train;

pub use losses::{
    loss_fe, loss_ol, loss_representation, loss_sg, loss_sisdr, loss_stoi, EnvelopeCorrelation, Loss, LossContext, LossKind, StoiPlugin,
};
pub use masknet::{enhance, forward_mask, InputCompression, MaskNet, MaskNetConfig};
pub use train::{
    load_checkpoints, select_checkpoint, train, train_pairs, write_training_log, Checkpoint, EpochLog, Precision, StepReport, Trainer,
    TrainingConfig, TrainingContext, TrainingRun, ValidationMetric,
};
