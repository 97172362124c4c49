//! Bayesian time-varying classification for P300 spellers.
//!
//! The model treats every stimulus flash as a binary trial (target vs.
//! non-target) and regresses the outcome on the full channel-by-time EEG
//! segment plus pairwise channel-interaction features (Fisher-z correlations).
//! Coefficients carry relaxed-thresholded Gaussian-process priors, so the
//! posterior performs temporal-spatial feature selection while it classifies.
//!
//! The crate bundles everything needed to reproduce a study end to end:
//!
//! * [`data`] — flash-indexed session model, interaction features, design
//!   assembly, and the binary session container.
//! * [`kernel`] — modified squared-exponential kernel, spectral truncation,
//!   and smoothing-parameter estimation.
//! * [`sampler`] — the Gibbs sampler with relaxation annealing and adaptive
//!   thresholds, plus posterior-draw storage.
//! * [`decode`] — stimulus scoring, character decoding, accuracy curves,
//!   throughput (bits/s), and support-recovery metrics.
//! * [`swlda`] — stepwise linear discriminant analysis baseline.
//! * [`sim`] — the synthetic P300 session generator.
//! * [`grid`] — replicate sweeps across generator settings and methods.

pub mod data;
pub mod decode;
pub mod grid;
pub mod kernel;
pub mod sampler;
pub mod sim;
pub mod stats;
pub mod swlda;

pub use data::{
    assemble_design, compute_interactions, fisher_z, load_session, save_session, DataError,
    Design, FlashRecord, SessionData, SpellerLayout, Standardizer,
};
pub use decode::{
    accuracy_curve, bci_utility, decode_character, eewr, eswr, pair_percentiles, score_flashes,
    support_from_draws, DecodeError, ScoreTable, SelectionTiming, SupportMask, SupportRule,
};
pub use grid::{run_grid, GridResults, GridSettings, KernelSettings, Method};
pub use kernel::{
    build_kl_basis, estimate_rho, gram_matrix, mse_kernel, time_grid, KernelError, KernelParams,
    KlBasis,
};
pub use sampler::{
    load_draws, run_chain, save_draws, GibbsChain, LinkFunction, OmegaGrid, PosteriorDraws,
    RtgpConfig, RtgpState, SamplerError, Xi2Schedule,
};
pub use sim::{generate_session, make_templates, truth_support, EvokedTemplates, SimConfig,
    SimError, TemplateParams};
pub use swlda::{fit_swlda, swlda_scores, swlda_support, SwldaConfig, SwldaError, SwldaModel};
