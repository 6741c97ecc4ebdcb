//! Checkpoint surgery for safety realignment of fine-tuned models.
//!
//! Fine-tuning on a downstream task can quietly undo a model's safety
//! alignment. The operations here repair that without retraining: diff
//! the fine-tuned weights against the aligned baseline, find the delta
//! coordinates that moved against the safety direction, rank them by a
//! diagonal Fisher estimate of safety importance, reset the top slice to
//! the aligned values, and recalibrate the surviving deltas with an
//! inverse-Hessian correction so task behavior is preserved.
//!
//! Everything is deterministic: tensors iterate in name order, every
//! random choice flows from an explicit seed, and artifacts round-trip
//! bit-exactly through the checkpoint container.

pub mod checkpoint;
pub mod delta;
pub mod error;
pub mod fisher;
pub mod maskbuild;
pub mod paramset;
pub mod pipeline;
pub mod refmodel;
pub mod surgery;
pub mod tensor;
pub mod world;

pub use checkpoint::{load_checkpoint, parse_checkpoint_bytes, save_checkpoint};
pub use delta::{
    compute_delta, dare_transform, interference_candidates, remove_deltas, resta_merge,
    safety_vector, DeltaSet, MaskSet,
};
pub use error::{Error, Result};
pub use fisher::{estimate_fisher, topk_threshold, FisherDiag, Scope};
pub use maskbuild::{build_mask, extend_mask_more, ExtraBasis};
pub use paramset::ParamSet;
pub use refmodel::{
    eval_suite, forward, init_model, loss_and_grads, train, Batch, CalibRecord, EvalReport,
    RefModelConfig,
};
pub use surgery::{
    build_hessian, recalibrate_layer, run_surgery, LayerHessian, LayerReport, SurgeryPlan,
};
pub use tensor::{Dtype, Tensor};
pub use world::World;
