//! Contrastive anomaly detection and open-set recognition for network flows.
//!
//! The library models benign traffic (and, in the open-set variant, every
//! known class) as a von Mises-Fisher distribution on a unit hypersphere:
//! an MLP encoder with linear projection heads is trained with a
//! benign-anchored contrastive loss, class mean directions are frozen after
//! training, and test flows are scored by cosine similarity to those
//! directions. Zero-day traffic shows up nearly orthogonal to every learned
//! direction, which makes it separable without ever training on it.
//!
//! Modules follow the pipeline: [`data`] (ingestion, splits, scaling,
//! balanced sampling), [`model`] (encoder and exact gradients), [`losses`]
//! (training objectives), [`optim`] (AdamW and the schedule), [`inference`]
//! (centroids, OOD scores, decision rules), [`metrics`] (threshold-free
//! evaluation), and [`checkpoint`] (the binary model format).

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;

pub use checkpoint::Checkpoint;
pub use data::{
    balanced_batches, fit_scaler, load_csv, split_holdout, synth_blobs, write_csv, BatchPlan,
    CsvLoad, FeatureScaler, FlowDataset, SplitSpec, SynthDataset, BENIGN_CLASS,
};
pub use error::{Error, ErrorKind, Result};
pub use inference::{
    closed_set_probs, compute_proxy, predict_binary, predict_osr, score_binary, score_osr,
    CentroidProxy, CentroidSet, ClassProxy, OodScore, ScoreRecord,
};
pub use losses::{
    bce_loss, clad_loss, closr_loss, contrastive_loss, cosine_distance, supcon_loss, BatchView,
    LossConfig, LossKind, LossOutput,
};
pub use metrics::{
    auroc, closed_set_report, effective_rank, fpr_at_recall, normalized_rank, open_set_metrics,
    pr_auc, ClassScoreMetrics, ClosedSetReport, EvalReport,
};
pub use model::{backward, forward, init_network, EmbeddingBatch, ModelConfig, NetworkParameters};
pub use optim::{adamw_step, lr_at, train, EpochLog, OptimizerState, TrainConfig, TrainRun};
