//! Conditional VAE with an identifiable functional-ANOVA decoder.
//!
//! The decoder is a sum of small term networks, one per subset of the
//! concatenated latent-plus-covariate input. Training enforces that every
//! term integrates to zero over each of its own coordinates, which makes
//! the decomposition unique and turns per-term output variances into an
//! interpretable per-feature variance decomposition.
//!
//! Module map:
//! - [`nn`]: dense networks, exact backprop, Adam.
//! - [`decomp`]: term indexing, the additive decoder, variance reports.
//! - [`constraint`]: quadrature, residual fields, penalty/BDMM/MDMM state.
//! - [`vi`]: encoder, ELBO, sparsity masks, the training loop.
//! - [`synth`]: synthetic generators with ground-truth decompositions.
//! - [`metrics`]: batch-mixing, rank correlation, truth scoring.
//! - [`traces`]: the single-term constrained-optimization comparison.
//! - [`bundle`]: model serialization.

pub mod bundle;
pub mod constraint;
pub mod decomp;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod synth;
pub mod traces;
pub mod vi;

pub use bundle::ModelBundle;
pub use constraint::{
    check_tolerance, multiplier_update, penalty_terms, residuals, trapezoid_integral,
    ConstraintMethod, ConstraintSet, CoordGrid, Estimator, PenaltySchedule, QuadratureGrid,
    ResidualField, ToleranceReport,
};
pub use decomp::{
    enumerate_terms, gather_columns, CoordKind, DecompositionModel, InputMeta, TermFilter,
    TermIndex, TermMasks, VarianceReport,
};
pub use error::{Error, Result};
pub use metrics::{knn_cv_accuracy, score_against_truth, spearman, ScoreSummary};
pub use nn::{Activation, AdamParams, AdamState, DenseLayer, DenseNet, GradientTape};
pub use synth::{
    generate, generate_batch2d, generate_fig1, generate_fig4, FractionTable, Generator,
    GroundTruth, SyntheticSpec,
};
pub use traces::{run_trace_experiment, sign_changes, TraceConfig, TraceRun};
pub use vi::{
    elbo, fit, gaussian_loglik, kl_standard_normal, sample_masks, CovariateKind, Dataset,
    DecoderVariant, EncoderState, FitResult, FitStatus, LogRow, MaskMode, NoiseDraws,
    SparsityMasks, TrainConfig,
};
