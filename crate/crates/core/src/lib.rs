//! Semiparametric mark-recapture-recovery models.
//!
//! Fits Cormack-Jolly-Seber-type models for marked animals that can be
//! recaptured alive and recovered dead, with survival (and optionally other
//! rates) depending on covariates through penalized B-splines. Three data
//! regimes are supported:
//!
//! - **array**: multinomial likelihood over m/d-array cells, optionally with
//!   a global occasion-indexed covariate and age structure by release cohort;
//! - **history_constant**: per-history products with a covariate that is
//!   fully known (constant per individual);
//! - **hmm**: a hidden-Markov approximation for stochastic, individually
//!   time-varying covariates observed only at live captures.
//!
//! Estimation is by maximum penalized likelihood with difference penalties
//! on spline coefficients; smoothing parameters are chosen by
//! cross-validation or a penalized-likelihood AIC, and uncertainty comes
//! from bootstrap resampling with pointwise and simultaneous bands.

pub mod basis;
pub mod data;
pub mod error;
pub mod fit;
pub mod io;
pub mod lik_array;
pub mod lik_hmm;
pub mod model;
pub mod optim;
pub mod simgen;
pub mod smoothing;
pub mod study;
pub mod uncertainty;
mod util;

pub use basis::{PenaltyVector, SplineBasis, SplineSmooth};
pub use data::{ArrayData, Dataset, EncounterHistory, HistoryData, MDArrays};
pub use error::{Error, Result};
pub use fit::{
    aic_p, default_init, effective_df, maximize, penalized_loglik, FitOptions, FitResult,
};
pub use io::{
    read_array_dir, read_dataset, read_history_csv, read_json, write_array_dir,
    write_aic_score_csv, write_band_csv, write_curve_csv, write_cv_score_csv, write_history_csv,
    write_json, write_replicate_csv, BestHDocument, FitDocument,
};
pub use lik_array::{
    cell_probs, chi, loglik_array, loglik_array_model, loglik_histories_model, loglik_history,
    loglik_history_model, model_cell_probs,
};
pub use lik_hmm::{
    binned_normal, build_transition, default_grid_range, emission, loglik_dataset, loglik_hmm,
    loglik_hmm_brute, CovGrid, HmmEngine,
};
pub use model::{
    inv_logit, logit, pack, rates_at, unpack, AgeClassMap, Form, ModelSpec, NaturalParams,
    ParamBlock, Regime, Role, SCHEMA_VERSION,
};
pub use simgen::{
    bias_table, curve_grid, mise, simulate_dataset, trimmed_range, true_phi, BiasInput, BiasRow,
    IndividualTruth, SimConfig, SurvivalCurve, MISE_POINTS, MISE_TRIM,
};
pub use study::{run_study, study_spec, RepRecord, RouteRecord, RouteSummary, StudyOptions, StudySummary};
pub use smoothing::{
    aic_grid, cartesian_grid, default_h_grid, extended_h_grid, kfold_cv_histories, loo_cv_array,
    staged_cv, AicRecord, AicTable, CandidateAverage, CvOptions, CvRecord, CvTable,
};
pub use uncertainty::{
    nonparam_bootstrap, param_bootstrap, pointwise_band, simultaneous_band, smooth_curve_link,
    smooth_curve_probability, Band, BootstrapOptions, BootstrapRun, SimultaneousBand,
};
