//! Replicated simulation study: generate datasets under a configured
//! protocol, select smoothing per replication, fit, and summarize
//! survival-curve integrated squared error and parametric bias.
//!
//! The driver reproduces the standard design end to end. Each replication
//! draws its own dataset (seed = base seed + replication index), builds the
//! matching semiparametric model (one survival smooth per age class,
//! constant recapture, recovery, and covariate-process blocks), selects the
//! smoothing vector by staged cross-validation and/or a grid search on
//! `AIC_p`, refits at the selection, and evaluates the fitted survival
//! curves on a common covariate grid. The summary averages squared error
//! against the true curves (MISE per age class) and tabulates relative bias
//! and replication spread for the parametric components.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{default_domain, SplineBasis};
use crate::data::{Dataset, HistoryData};
use crate::error::{Error, Result};
use crate::fit::{default_init, maximize, FitOptions, FitResult};
use crate::lik_hmm::default_grid_range;
use crate::model::{
    inv_logit, Form, ModelSpec, ParamBlock, Regime, Role, SCHEMA_VERSION,
};
use crate::simgen::{
    bias_table, curve_grid, mise, simulate_dataset, trimmed_range, BiasInput, BiasRow, SimConfig,
    MISE_POINTS,
};
use crate::smoothing::{aic_grid, cartesian_grid, default_h_grid, staged_cv, CvOptions};
use crate::uncertainty::smooth_curve_probability;

/// Knobs for [`run_study`]. The defaults mirror the standard protocol:
/// 15 basis functions per smooth, 50 covariate bins, the default smoothing
/// grid searched by two-pass staged 10-fold cross-validation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyOptions {
    /// Select smoothing by staged k-fold cross-validation.
    pub run_cv: bool,
    /// Select smoothing by a grid search on `AIC_p` over the Cartesian
    /// product of the one-dimensional grid.
    pub run_aic: bool,
    /// Basis functions per survival smooth.
    pub basis_k: usize,
    /// Covariate bins for the integrated likelihood.
    pub hmm_bins: usize,
    /// One-dimensional smoothing grid shared by both selection routes.
    pub h_grid_1d: Vec<f64>,
    /// Passes of the staged search.
    pub stages: usize,
    /// Cross-validation folds.
    pub k_folds: usize,
    /// Calibration fraction per fold.
    pub calib_frac: f64,
    /// Options for fold and candidate fits during selection. Fold fits
    /// warm-start from neighbouring candidates, so a looser tolerance and a
    /// single start keep selection affordable without moving the argmin.
    pub selection: CvOptions,
    /// Gradient tolerance of the final fit at the selected smoothing.
    pub fit_tol: f64,
    /// Iteration cap of the final fit.
    pub fit_max_iters: usize,
    /// Emit one progress line per replication and route to stderr.
    pub verbose: bool,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            run_cv: true,
            run_aic: false,
            basis_k: 15,
            hmm_bins: 50,
            h_grid_1d: default_h_grid(),
            stages: 2,
            k_folds: 10,
            calib_frac: 0.9,
            selection: CvOptions {
                restarts: 1,
                tol: 1e-5,
                max_iters: 2000,
                seed: 0,
            },
            fit_tol: 1e-6,
            fit_max_iters: 4000,
            verbose: false,
        }
    }
}

/// Outcome of one selection route within one replication.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RouteRecord {
    /// Selected smoothing vector.
    pub h: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Per-replication record kept in the summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub seed: u64,
    /// `None` when the route was not run or failed outright.
    pub cv: Option<RouteRecord>,
    pub aic: Option<RouteRecord>,
}

/// Per-route aggregate across replications.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RouteSummary {
    /// Replications whose final fit was produced (selection succeeded).
    pub fitted: usize,
    /// Of those, how many converged.
    pub converged: usize,
    /// Mean integrated squared error per age class.
    pub mise: Vec<f64>,
}

/// Full study summary: MISE per age class and route plus the bias table of
/// the parametric components (from the cross-validation route when it ran,
/// otherwise from the `AIC_p` route).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudySummary {
    pub schema_version: u32,
    pub replications: usize,
    /// Common integration grid: `grid_points` equi-spaced values over the
    /// pooled trimmed covariate range.
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_points: usize,
    /// MISE of the first age class under the primary route.
    pub mise_class1: Option<f64>,
    /// MISE of the second age class under the primary route.
    pub mise_class2: Option<f64>,
    pub cv: Option<RouteSummary>,
    pub aic: Option<RouteSummary>,
    pub bias: Vec<BiasRow>,
    pub reps: Vec<RepRecord>,
}

/// The semiparametric model matching a simulation protocol: one survival
/// smooth per age class over the observed covariate range, constant
/// recapture and recovery, and a full covariate-process block set. The
/// integration range extends beyond the observed range as
/// [`default_grid_range`] prescribes.
pub fn study_spec(
    cfg: &SimConfig,
    data: &HistoryData,
    basis_k: usize,
    hmm_bins: usize,
) -> Result<ModelSpec> {
    let classes = cfg.age_classes()?;
    let n_classes = classes.n_classes();
    let values = data.observed_covariates();
    let (b_lo, b_hi) = default_domain(&values, 0.0)?;
    let grid_range = default_grid_range(data)?;
    let mut blocks = Vec::with_capacity(3 * n_classes + 4);
    let mut bases = Vec::with_capacity(n_classes);
    for c in 1..=n_classes {
        blocks.push(ParamBlock::new(Role::Survival, Form::SplineInCovariate, Some(c)));
        bases.push(SplineBasis::new(basis_k, b_lo, b_hi)?);
    }
    blocks.push(ParamBlock::new(Role::Recapture, Form::Constant, None));
    blocks.push(ParamBlock::new(Role::Recovery, Form::Constant, None));
    blocks.push(ParamBlock::new(Role::CovprocMu0, Form::Constant, None));
    blocks.push(ParamBlock::new(Role::CovprocSigma0, Form::Constant, None));
    for c in 1..=n_classes {
        blocks.push(ParamBlock::new(Role::CovprocMu, Form::Constant, Some(c)));
        blocks.push(ParamBlock::new(Role::CovprocSigma, Form::Constant, Some(c)));
        blocks.push(ParamBlock::new(Role::CovprocEta, Form::Constant, Some(c)));
    }
    Ok(ModelSpec {
        schema_version: SCHEMA_VERSION,
        t_occasions: cfg.t,
        regime: Regime::Hmm,
        age_classes: classes,
        blocks,
        smooth_bases: bases,
        smooth_diff_order: 2,
        hmm_bins: Some(hmm_bins),
        hmm_range: Some(grid_range),
    })
}

/// The parametric components of a study fit on their natural scales, in the
/// fixed reporting order lambda, p, mu0, mu_1..mu_C, sigma0,
/// sigma_1..sigma_C, eta_1..eta_C.
fn natural_params(spec: &ModelSpec, theta: &[f64]) -> Vec<(String, f64)> {
    let layout = spec.layout();
    let mut lambda = None;
    let mut p = None;
    let mut mu0 = None;
    let mut sigma0 = None;
    let mut mu = Vec::new();
    let mut sigma = Vec::new();
    let mut eta = Vec::new();
    for (i, block) in spec.blocks.iter().enumerate() {
        if block.form != Form::Constant {
            continue;
        }
        let x = theta[layout[i].start];
        let class = block.age_class.unwrap_or(1);
        match block.role {
            Role::Recovery => lambda = Some(x),
            Role::Recapture => p = Some(x),
            Role::CovprocMu0 => mu0 = Some(x),
            Role::CovprocSigma0 => sigma0 = Some(x),
            Role::CovprocMu => mu.push((class, x)),
            Role::CovprocSigma => sigma.push((class, x)),
            Role::CovprocEta => eta.push((class, x)),
            _ => {}
        }
    }
    mu.sort_by_key(|&(c, _)| c);
    sigma.sort_by_key(|&(c, _)| c);
    eta.sort_by_key(|&(c, _)| c);
    let mut out = Vec::new();
    if let Some(x) = lambda {
        out.push(("lambda".to_string(), inv_logit(x)));
    }
    if let Some(x) = p {
        out.push(("p".to_string(), inv_logit(x)));
    }
    if let Some(x) = mu0 {
        out.push(("mu0".to_string(), x));
    }
    for &(c, x) in &mu {
        out.push((format!("mu{c}"), x));
    }
    if let Some(x) = sigma0 {
        out.push(("sigma0".to_string(), x.exp()));
    }
    for &(c, x) in &sigma {
        out.push((format!("sigma{c}"), x.exp()));
    }
    for &(c, x) in &eta {
        out.push((format!("eta{c}"), 2.0 * inv_logit(x)));
    }
    out
}

/// The true values matching [`natural_params`] for a simulation protocol.
fn natural_truth(cfg: &SimConfig) -> Vec<(String, f64)> {
    let mut out = vec![
        ("lambda".to_string(), cfg.lambda),
        ("p".to_string(), cfg.p),
        ("mu0".to_string(), cfg.mu0),
    ];
    for (c, &v) in cfg.mu.iter().enumerate() {
        out.push((format!("mu{}", c + 1), v));
    }
    out.push(("sigma0".to_string(), cfg.sigma0));
    for (c, &v) in cfg.sigma.iter().enumerate() {
        out.push((format!("sigma{}", c + 1), v));
    }
    for (c, &v) in cfg.eta.iter().enumerate() {
        out.push((format!("eta{}", c + 1), v));
    }
    out
}

struct RouteOutcome {
    record: RouteRecord,
    /// Probability-scale survival curves per age class on the common grid.
    curves: Vec<Vec<f64>>,
    params: Vec<(String, f64)>,
}

struct RepOutcome {
    record: RepRecord,
    cv: Option<RouteOutcome>,
    aic: Option<RouteOutcome>,
}

fn final_fit(
    spec: &ModelSpec,
    dataset: &Dataset,
    h: &[f64],
    seed: u64,
    opts: &StudyOptions,
) -> Result<FitResult> {
    let fit_opts = FitOptions {
        restarts: 1,
        tol: opts.fit_tol,
        max_iters: opts.fit_max_iters,
        seed,
        init: Some(default_init(spec, dataset)?),
        free: None,
        compute_edf: false,
    };
    maximize(spec, dataset, h, &fit_opts)
}

fn route_outcome(spec: &ModelSpec, fit: FitResult, grid: &[f64]) -> Result<RouteOutcome> {
    // Curve evaluation clamps into the basis domain: the common grid is the
    // pooled trimmed range, which can poke slightly past one replication's
    // own observed range.
    let (b_lo, b_hi) = spec.smooth_bases[0].domain();
    let clamped: Vec<f64> = grid.iter().map(|w| w.clamp(b_lo, b_hi)).collect();
    let n_smooths = spec.n_smooths();
    let mut curves = Vec::with_capacity(n_smooths);
    for s in 0..n_smooths {
        curves.push(smooth_curve_probability(spec, &fit.theta, s, &clamped)?);
    }
    let params = natural_params(spec, &fit.theta);
    let record = RouteRecord {
        h: fit.h.clone(),
        loglik: fit.loglik,
        converged: fit.converged,
        iterations: fit.iterations,
    };
    Ok(RouteOutcome {
        record,
        curves,
        params,
    })
}

fn run_replication(
    cfg: &SimConfig,
    data: &HistoryData,
    rep: usize,
    grid: &[f64],
    opts: &StudyOptions,
) -> Result<RepOutcome> {
    let spec = study_spec(cfg, data, opts.basis_k, opts.hmm_bins)?;
    let dataset = Dataset::Histories(data.clone());
    let mut sel_opts = opts.selection.clone();
    sel_opts.seed = cfg.seed;

    let cv = if opts.run_cv {
        match staged_cv(
            &spec,
            data,
            &opts.h_grid_1d,
            opts.stages,
            opts.k_folds,
            opts.calib_frac,
            cfg.seed,
            &sel_opts,
        )
        .and_then(|(h, _)| final_fit(&spec, &dataset, &h, cfg.seed, opts))
        {
            Ok(fit) => {
                if opts.verbose {
                    eprintln!(
                        "study rep {rep}: cv h = {:?}, loglik = {:.3}, {} iterations, converged = {}",
                        fit.h, fit.loglik, fit.iterations, fit.converged
                    );
                }
                Some(route_outcome(&spec, fit, grid)?)
            }
            Err(e) => {
                if opts.verbose {
                    eprintln!("study rep {rep}: cv route failed: {e}");
                }
                None
            }
        }
    } else {
        None
    };

    let aic = if opts.run_aic {
        let axes = vec![opts.h_grid_1d.clone(); spec.n_smooths()];
        match aic_grid(&spec, &dataset, &cartesian_grid(&axes), &sel_opts)
            .and_then(|(h, _)| final_fit(&spec, &dataset, &h, cfg.seed, opts))
        {
            Ok(fit) => {
                if opts.verbose {
                    eprintln!(
                        "study rep {rep}: aic h = {:?}, loglik = {:.3}, {} iterations, converged = {}",
                        fit.h, fit.loglik, fit.iterations, fit.converged
                    );
                }
                Some(route_outcome(&spec, fit, grid)?)
            }
            Err(e) => {
                if opts.verbose {
                    eprintln!("study rep {rep}: aic route failed: {e}");
                }
                None
            }
        }
    } else {
        None
    };

    let record = RepRecord {
        rep,
        seed: cfg.seed,
        cv: cv.as_ref().map(|o| o.record.clone()),
        aic: aic.as_ref().map(|o| o.record.clone()),
    };
    Ok(RepOutcome { record, cv, aic })
}

fn route_summary(
    outcomes: &[RepOutcome],
    pick: impl Fn(&RepOutcome) -> Option<&RouteOutcome>,
    truth: &[Vec<f64>],
    grid: &[f64],
) -> Result<Option<RouteSummary>> {
    let fitted: Vec<&RouteOutcome> = outcomes.iter().filter_map(pick).collect();
    if fitted.is_empty() {
        return Ok(None);
    }
    let mut mise_per_class = Vec::with_capacity(truth.len());
    for (c, truth_curve) in truth.iter().enumerate() {
        let estimates: Vec<Vec<f64>> = fitted.iter().map(|o| o.curves[c].clone()).collect();
        mise_per_class.push(mise(&estimates, truth_curve, grid)?);
    }
    Ok(Some(RouteSummary {
        fitted: fitted.len(),
        converged: fitted.iter().filter(|o| o.record.converged).count(),
        mise: mise_per_class,
    }))
}

/// Runs `replications` independent replications of the protocol in `base`
/// (replication `z` uses seed `base.seed + z`) and summarizes them.
///
/// Replications run in parallel; each derives everything from its own seed,
/// so the summary does not depend on thread count or evaluation order.
pub fn run_study(base: &SimConfig, replications: usize, opts: &StudyOptions) -> Result<StudySummary> {
    base.validate()?;
    if replications == 0 {
        return Err(Error::InvalidArgument {
            what: "replications".into(),
            reason: "need at least one replication".into(),
        });
    }
    if !opts.run_cv && !opts.run_aic {
        return Err(Error::InvalidArgument {
            what: "study options".into(),
            reason: "enable at least one selection route".into(),
        });
    }

    let mut cfgs = Vec::with_capacity(replications);
    let mut sims = Vec::with_capacity(replications);
    for z in 0..replications {
        let mut cfg = base.clone();
        cfg.seed = base.seed.wrapping_add(z as u64);
        let (data, _) = simulate_dataset(&cfg)?;
        cfgs.push(cfg);
        sims.push(data);
    }

    // Common integration grid: pooled observed covariates, trimmed.
    let pooled: Vec<f64> = sims.iter().flat_map(|d| d.observed_covariates()).collect();
    let (grid_lo, grid_hi) = trimmed_range(&pooled)?;
    let grid = curve_grid(grid_lo, grid_hi, MISE_POINTS);
    let truth: Vec<Vec<f64>> = base
        .survival
        .iter()
        .map(|s| grid.iter().map(|&w| s.phi(w)).collect())
        .collect();

    let outcomes: Vec<RepOutcome> = cfgs
        .par_iter()
        .zip(sims.par_iter())
        .enumerate()
        .map(|(z, (cfg, data))| run_replication(cfg, data, z, &grid, opts))
        .collect::<Result<Vec<_>>>()?;

    let cv = route_summary(&outcomes, |o| o.cv.as_ref(), &truth, &grid)?;
    let aic = route_summary(&outcomes, |o| o.aic.as_ref(), &truth, &grid)?;
    if cv.is_none() && aic.is_none() {
        return Err(Error::SimulationFailed {
            reason: "every replication failed on every selection route".into(),
        });
    }

    // Bias table from the primary route (cross-validation when it ran).
    let primary: Vec<&RouteOutcome> = if cv.is_some() {
        outcomes.iter().filter_map(|o| o.cv.as_ref()).collect()
    } else {
        outcomes.iter().filter_map(|o| o.aic.as_ref()).collect()
    };
    let bias = if primary.len() >= 2 {
        let truth_rows = natural_truth(base);
        let inputs: Vec<BiasInput> = truth_rows
            .iter()
            .map(|(name, truth_value)| BiasInput {
                name: name.clone(),
                truth: *truth_value,
                estimates: primary
                    .iter()
                    .filter_map(|o| {
                        o.params
                            .iter()
                            .find(|(n, _)| n == name)
                            .map(|&(_, v)| v)
                    })
                    .collect(),
            })
            .collect();
        bias_table(&inputs)?
    } else {
        Vec::new()
    };

    let primary_mise = cv.as_ref().or(aic.as_ref()).map(|r| r.mise.clone());
    Ok(StudySummary {
        schema_version: SCHEMA_VERSION,
        replications,
        grid_lo,
        grid_hi,
        grid_points: grid.len(),
        mise_class1: primary_mise.as_ref().and_then(|m| m.first().copied()),
        mise_class2: primary_mise.as_ref().and_then(|m| m.get(1).copied()),
        cv,
        aic,
        bias,
        reps: outcomes.into_iter().map(|o| o.record).collect(),
    })
}
