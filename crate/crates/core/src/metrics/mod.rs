//! Evaluation: Hungarian-matched accuracies, NMI, calibration and cluster
//! validity indices.

mod accuracy;
mod calibration;
mod hungarian;
mod information;
mod validity;

pub use accuracy::{
    acc_top1, acc_top5, evaluate, real_protocol, Accuracies, AccuracyMode, ProtocolSummary,
    TOP_K,
};
pub use calibration::{ece, CalibrationBin, CalibrationBins, DEFAULT_BINS};
pub use hungarian::{contingency, hungarian, Assignment};
pub use information::nmi;
pub use validity::{
    alignment, davies_bouldin, silhouette, validity_indices, Validity, SILHOUETTE_FULL_LIMIT,
};
