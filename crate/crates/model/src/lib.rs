//! Vision transformer with a library of routed expert MLPs.
//!
//! The backbone is a small pre-norm ViT; its last few blocks swap the dense
//! MLP for a gated mixture over a shared expert library. Experts are first
//! distilled from several synthetic teachers under a mutual-information
//! penalty that specializes them, then reused: a frozen copy of the library
//! plus a fresh router is adapted to a downstream control task, optionally
//! with scratch experts and an annealed selection budget.

pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod expert;
pub mod gate;
pub mod losses;
pub mod moe;
pub mod routing;
pub mod task;
pub mod teachers;

pub use backbone::{
    extract_patches, ForwardCtx, Image, LayerTrace, ModelConfig, VelTrace, VerModel,
};
pub use checkpoint::{
    load_checkpoint, load_checkpoint_into, read_manifest, save_checkpoint, ManifestEntry,
};
pub use error::{ModelError, Result};
pub use expert::{ExpertMlp, ExpertOrigin};
pub use gate::{GateOutput, NoisyGate};
pub use losses::{
    cosine_distance, mutual_information, pretrain_batch_loss, BatchOutcome, DistillWeights,
    SelectionStats,
};
pub use moe::{DispatchInfo, MoeLayer};
pub use routing::{
    sample_categorical_st, sample_categorical_st_with, CtaSchedule, GumbelChoice,
    RoutingStrategy, TeacherChoiceRouter,
};
pub use task::{
    evaluate, finetune_router, ablate_topk, AblationRow, EvalReport, FinetuneConfig, FinetuneRun,
    PolicyHead, StepRecord, SyntheticTask, TaskSample, TaskSpec,
};
pub use teachers::{load_features, save_features, SyntheticTeacher, TeacherBank, TeacherKind};
