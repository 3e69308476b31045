//! Weakly supervised multi-label actor-action association.
//!
//! Given the detected actors of a frame and only the clip-level set of actions
//! present, this crate
//!
//! - scores every non-empty subset of the clip's actions for each actor
//!   ([`powerset`]),
//! - finds the highest-scoring assignment of one subset per actor such that
//!   every annotated action is covered ([`solver`]),
//! - provides the MIML bag loss and the combined association loss with
//!   analytic gradients ([`losses`]),
//! - evaluates frame-level detections with per-class AP and mAP ([`evalmap`]),
//! - and ships a synthetic benchmark with planted ground truth plus a linear
//!   toy trainer that runs the full warmup-then-assign schedule ([`synthbench`]).

pub mod error;
pub mod evalmap;
pub mod io;
pub mod losses;
pub mod powerset;
pub mod solver;
pub mod synthbench;
pub mod types;

pub use error::{Error, Result};
pub use evalmap::{average_precision, iou, mean_average_precision, EvalReport};
pub use losses::{
    association_loss, combined_loss, loss_gradients, miml_loss, sigmoid_probs, LossBreakdown,
};
pub use powerset::{
    enumerate_power_set, log_normalizer, score_actor_subsets, subset_log_numerator,
    SubsetScoreTable,
};
pub use solver::{
    assign_without_lp, associate_frame, brute_force_assignment, solve_assignment, CoverageState,
};
pub use types::{
    validate_clip, ActionSubset, ActorDetection, AssignmentResult, BoundingBox, Clip,
    ClipAnnotation, Frame, GroundTruthRecord, LabelSet, PredictionRecord,
};
