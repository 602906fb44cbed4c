//! Measurement toolkit for the expert-routing experiments: PCA reduction,
//! kNN entropy and mutual-information estimation, per-patch feature-norm
//! and MI maps, and expert-utilization tables.

pub mod error;
pub mod knn;
pub mod maps;
pub mod patch_mi;
pub mod pca;
pub mod utilization;

pub use error::{AnalysisError, Result};
pub use knn::{digamma, knn_entropy, knn_mutual_information, MiEstimate};
pub use maps::{feature_norm_map, write_map_csv, write_pgm};
pub use patch_mi::{per_patch_mi_before_after, MiMap, PatchMiConfig};
pub use pca::PcaProjector;
pub use utilization::{expert_utilization, SelectionEvent, UtilizationTable};
