//! Joint teacher/student training on the three-term loss: teacher L2 to the
//! label, student L2 to the label, and smooth-L1 between the teacher's pooled
//! feature and the projected student feature.

mod freeze;
mod gradcheck;
mod losses;
mod optim;
mod projection;
mod step;

pub use freeze::{apply_freeze_policy, FreezePolicy, Learner};
pub use gradcheck::{
    check_gradients, randomize_for_probe, GradCheckOptions, GradCheckReport, GroupError,
};
pub use losses::{huber, huber_grad, mse_loss, smooth_l1, total_loss, LossBreakdown, LossWeights};
pub use optim::{AdamW, LrSchedule, Moments};
pub use projection::{align_features, ProjectionMap, PROJECTION_GROUP};
pub use step::{
    distill_step, predict_all, supervised_step, BatchSampler, DistillState, DistillationConfig,
    Gradients, PrefixCache, SupervisedState,
};
