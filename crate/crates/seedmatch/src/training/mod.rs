//! Training: synthetic correspondence data, losses, Adam, and the loop.
//!
//! The pipeline is trained end-to-end on synthetic pairs where ground
//! truth is known by construction. [`synth`] builds the pairs, [`loss`]
//! scores assignments and per-unit inlier weights, [`optim`] provides
//! Adam with checkpointable state, [`trainer`] runs the loop with
//! staged gradient blocking and a per-iteration trace, and [`eval`]
//! measures recall/precision against a classical nearest-neighbor
//! baseline.

pub mod eval;
pub mod loss;
pub mod optim;
pub mod synth;
pub mod trainer;

pub use eval::{evaluate, evaluate_baseline, nn_baseline_matches, EvalStats};
pub use loss::{
    assignment_loss, label_seeds, label_seeds_tolerant, loss_graph, stage_labels, total_loss,
    weight_loss, LossTerms, PROB_FLOOR,
};
pub use optim::Adam;
pub use synth::{synth_pair, GroundTruth, SynthConfig, TransformFamily};
pub use trainer::{train, train_resume, Checkpoint, TraceRow, TrainConfig, TrainOutcome};
