//! Experiment protocols: synthetic recovery grids, semi-supervised
//! clustering, held-out RMSE and positive-unlabeled ranking evaluation.

pub mod clustering;
pub mod evaluation;
pub mod recovery;
pub mod stats;

pub use clustering::{cluster_pipeline, clustering_error, gaussian_blobs, kmeans, rff, ClusterConfig, ClusterOutcome, ClusterTask, KMeansResult};
pub use evaluation::{pu_eval, rmse_eval, PuEvalResult};
pub use recovery::{recovery_grid, GridConfig, RecoveryGridResult, GRID_MAX_ITERS, GRID_PLATEAU};
pub use stats::spearman;
