//! Distribution-matching distillation of a few-step student.

pub mod dmd;
pub mod toy;
pub mod trainer;

pub use dmd::{
    clean_estimate, diffuse, dmd_gradient, dmd_loss_graph, regression_loss, regression_loss_graph,
    score_from_velocity, velocity_from_score, DmdGradient, MixSchedule, SampleKind, NORMALIZER_FLOOR,
};
pub use trainer::{
    clip_sample, evaluate_sync, evaluate_sync_with, generate_synthetic, is_audio_param, write_jsonl, DistillConfig, DistillMetrics,
    DistillState, Sample, SyncEval, TeacherConfig, TeacherMetrics, TeacherTrainer,
};
