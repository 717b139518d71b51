pub mod classification;
pub mod faithfulness;
pub mod saliency;
pub mod shift;

pub use classification::{accuracy, argmax, auprc_ovr, auroc, auroc_ovr, macro_f1};
pub use faithfulness::{
    occlusion_curve, random_scores, score_model, top_substitution, OcclusionPoint, PerturbedScore, Substitution,
};
pub use saliency::{aup_aur, auprc, saliency_report, SaliencyReport, DEFAULT_THRESHOLDS};
pub use shift::{gaussian_kl, kl_divergence_estimate, mmd_rbf, DistShiftReport, Kde, KDE_COMPONENTS};
