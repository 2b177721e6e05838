//! Incremental learning: grouping of the unknown class, the four
//! objectives, pseudo-labels and the step-by-step protocol.

pub mod grouping;
pub mod protocol;
pub mod pseudo;
pub mod trainer;

pub use grouping::{
    ce_loss, group_by, group_new_into_u, group_past_into_u, kd_loss, lws_loss, GroupMode,
    GroupedProbMap, LossOutput,
};
pub use protocol::{derive_seed, run_protocol, ProtocolRun};
pub use pseudo::{
    fuse_pseudo_labels, pseudo_label, styled_teacher_probs, PseudoLabelMap, StyledProbs,
};
pub use trainer::{
    clip_grad_norm, grad_norm, prepare_sample, read_trace, sample_objective, train_step,
    write_trace, LossBreakdown, SampleTargets, SampleViews, TraceRow, TrainSettings, MAX_GRAD_NORM,
};
