//! Stage 2: region-aware fine-tuning of a linear image encoder against
//! frozen label text embeddings.

mod encoder;
mod loss;
mod subgroups;
mod train;

pub use encoder::Encoder;
pub use loss::{
    grad_loss, loss_and_grad, loss_total, penalty, selection_margin, sigma, sigma_m, BatchImage, BatchView,
    LossBreakdown, LossConfig,
};
pub use subgroups::{assign_pseudo_labels, assign_subgroups, LabelMatcher, Subgroup, SubgroupAssignment};
pub use train::{
    evaluate_setting, sampling_weights, train, MitigationMetrics, Mode, TrainConfig, TrainLogRow, TrainOutcome,
};
