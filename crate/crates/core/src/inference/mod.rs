//! End-to-end detection, COCO-style evaluation, the occluder-swap probe,
//! the ablation harness and overlay rendering.

mod ablation;
mod eval;
mod nms;
mod pipeline;
mod probe;
mod visualize;

pub use ablation::{run_ablation, write_ablation_csv, AblationGrid, AblationResult, AblationRow, ABLATION_CSV_HEADER};
pub use eval::{category_pr_curve, evaluate, EvalConfig, EvalReport, MatchOn, MetricSet, PrCurve};
pub use nms::{nms, nms_indices, rescore};
pub use pipeline::{evaluate_detector, infer, Candidate, Detector, InferenceOptions, ProposalConfig};
pub use probe::{invariance_probe, InvarianceReport, PairIou, TARGET_MATCH_IOU};
pub use visualize::{overlay, visualize_scene};
