//! Training-time scheduling: layer dropout rates and early-exit loss weights.

mod dropout;
mod early_exit;
mod loss;

pub use dropout::{
    dropout_rate, layer_scale_d, sample_drop_mask, time_scale_s, DropoutSchedule, LayerProfile,
    TimeCurriculum,
};
pub use early_exit::{
    curriculum, exit_scale_e, normalized_exit_scale, EarlyExitLossSchedule, ExitCurriculum,
};
pub use loss::{loss_and_grad, total_loss, total_loss_weighted, LayerLoss, LossBreakdown};
