//! Penalized log-likelihood assembly, numerical maximization, effective
//! degrees of freedom, and the penalized-likelihood AIC.
//!
//! The penalized log-likelihood is the regime-appropriate log-likelihood
//! minus `sum_j h_j/2 ||Δ^q gamma_j||^2` over the spline blocks. Maximization
//! runs a limited-memory quasi-Newton ascent in the unconstrained packed
//! parameterization from several deterministic starting points (all-zero
//! theta first, then seeded uniform jitter), keeping the best local maximum.
//!
//! Model complexity under penalization is measured by the effective degrees
//! of freedom `nu = tr(I_u (I_u + P)^{-1})`, with `I_u` the observed
//! information of the unpenalized log-likelihood (numerically differentiated)
//! and `P` the exact penalty Hessian; `AIC_p = -2 loglik + 2 nu`.

use crate::basis::{add_difference_penalty_gradient, difference_penalty, difference_penalty_hessian};
use crate::data::{ArrayData, Dataset, HistoryData};
use crate::error::{Error, Result};
use crate::lik_array::{loglik_array_model, loglik_histories_model};
use crate::lik_hmm::HmmEngine;
use crate::model::{logit, Form, ModelSpec, Regime, Resolved, Role};
use crate::optim::{minimize, OptimOptions, OptimResult};
use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Relative step for the central-difference gradients used when no analytic
/// gradient is available (array and constant-covariate regimes).
const GRAD_REL_STEP: f64 = 1e-7;

/// Relative step for Hessian differencing in [`effective_df`].
const HESS_REL_STEP_GRAD: f64 = 1e-5;
const HESS_REL_STEP_VALUE: f64 = 6e-4;

/// Condition-number limit beyond which the penalized information is declared
/// singular rather than silently regularized.
pub const SINGULAR_COND_LIMIT: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Number of deterministic starting points (the first is all-zero theta
    /// or `init`; the rest add seeded uniform(-1, 1) jitter).
    pub restarts: usize,
    /// Convergence tolerance: `max|grad| < tol * (1 + |penalized loglik|)`.
    pub tol: f64,
    pub max_iters: usize,
    /// Seed for the jittered restarts.
    pub seed: u64,
    /// Starting point for the first restart; all-zero when absent.
    pub init: Option<Vec<f64>>,
    /// Coordinates the optimizer may move; `None` frees all. Frozen
    /// coordinates keep their `init` values.
    pub free: Option<Vec<bool>>,
    /// Compute effective degrees of freedom and AIC_p after fitting (adds a
    /// numerical Hessian; skipped silently if the information is singular).
    pub compute_edf: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            restarts: 5,
            tol: 1e-6,
            max_iters: 500,
            seed: 0,
            init: None,
            free: None,
            compute_edf: false,
        }
    }
}

/// A fitted model: packed estimates plus likelihood and complexity summaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub theta: Vec<f64>,
    pub h: Vec<f64>,
    /// Unpenalized log-likelihood at `theta`.
    pub loglik: f64,
    /// Penalty value at `theta` (non-negative).
    pub penalty: f64,
    /// `loglik - penalty`.
    pub penalized_loglik: f64,
    /// Effective degrees of freedom, when computed and non-singular.
    pub edf: Option<f64>,
    /// `-2 loglik + 2 edf`, when `edf` is available.
    pub aic_p: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub f_evals: usize,
    pub restarts_used: usize,
    /// Max-norm of the penalized gradient at `theta`.
    pub gradient_norm: f64,
}

/// Regime-dispatched likelihood evaluator with the penalty attached.
pub(crate) struct Objective<'a> {
    pub(crate) resolved: Resolved<'a>,
    h: Vec<f64>,
    spline_blocks: Vec<usize>,
    diff_order: usize,
    kind: ObjKind<'a>,
}

enum ObjKind<'a> {
    Array(&'a ArrayData),
    Histories(&'a HistoryData),
    Hmm(Box<HmmEngine<'a>>),
}

impl<'a> Objective<'a> {
    pub(crate) fn new(spec: &'a ModelSpec, data: &'a Dataset, h: &[f64]) -> Result<Self> {
        spec.validate()?;
        if h.len() != spec.n_smooths() {
            return Err(Error::DimensionMismatch {
                what: "smoothing parameter vector".into(),
                expected: spec.n_smooths(),
                got: h.len(),
            });
        }
        for &hj in h {
            if !(hj.is_finite() && hj >= 0.0) {
                return Err(Error::InvalidArgument {
                    what: "smoothing parameter".into(),
                    reason: format!("must be finite and non-negative, got {hj}"),
                });
            }
        }
        let resolved = spec.resolve()?;
        let kind = match (spec.regime, data) {
            (Regime::Array, Dataset::Arrays(d)) => ObjKind::Array(d),
            (Regime::HistoryConstant, Dataset::Histories(d)) => ObjKind::Histories(d),
            (Regime::Hmm, Dataset::Histories(d)) => ObjKind::Hmm(Box::new(HmmEngine::new(spec, d)?)),
            (regime, _) => {
                return Err(Error::RegimeMismatch {
                    reason: format!("{regime:?} regime cannot be fitted to this dataset kind"),
                })
            }
        };
        Ok(Objective {
            resolved,
            h: h.to_vec(),
            spline_blocks: spec.spline_blocks(),
            diff_order: spec.smooth_diff_order,
            kind,
        })
    }

    pub(crate) fn dim(&self) -> usize {
        self.resolved.dim()
    }

    pub(crate) fn loglik(&self, theta: &[f64]) -> Result<f64> {
        match &self.kind {
            ObjKind::Array(d) => loglik_array_model(&self.resolved, theta, d),
            ObjKind::Histories(d) => loglik_histories_model(&self.resolved, theta, d),
            ObjKind::Hmm(engine) => engine.loglik(theta),
        }
    }

    pub(crate) fn penalty(&self, theta: &[f64]) -> f64 {
        self.spline_blocks
            .iter()
            .enumerate()
            .map(|(j, &b)| {
                let gamma = &theta[self.resolved.layout[b].clone()];
                difference_penalty(gamma, self.h[j], self.diff_order)
            })
            .sum()
    }

    pub(crate) fn penalized(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.loglik(theta)? - self.penalty(theta))
    }

    /// Unpenalized log-likelihood and gradient: analytic for the
    /// hidden-Markov regime, central finite differences otherwise.
    pub(crate) fn loglik_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        match &self.kind {
            ObjKind::Hmm(engine) => engine.loglik_grad(theta),
            _ => {
                let f = self.loglik(theta)?;
                if f == f64::NEG_INFINITY {
                    return Ok((f, vec![0.0; theta.len()]));
                }
                let mut g = vec![0.0; theta.len()];
                let mut x = theta.to_vec();
                for i in 0..theta.len() {
                    let step = GRAD_REL_STEP * (1.0 + theta[i].abs());
                    x[i] = theta[i] + step;
                    let up = self.loglik(&x)?;
                    x[i] = theta[i] - step;
                    let dn = self.loglik(&x)?;
                    x[i] = theta[i];
                    g[i] = (up - dn) / (2.0 * step);
                }
                Ok((f, g))
            }
        }
    }

    /// Penalized log-likelihood and gradient.
    pub(crate) fn penalized_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (ll, mut g) = self.loglik_grad(theta)?;
        if ll == f64::NEG_INFINITY {
            return Ok((ll, g));
        }
        for (j, &b) in self.spline_blocks.iter().enumerate() {
            let range = self.resolved.layout[b].clone();
            let gamma: Vec<f64> = theta[range.clone()].to_vec();
            add_difference_penalty_gradient(
                &gamma,
                self.h[j],
                self.diff_order,
                -1.0,
                &mut g[range],
            );
        }
        Ok((ll - self.penalty(theta), g))
    }
}

/// Penalized log-likelihood of a packed parameter vector.
pub fn penalized_loglik(
    spec: &ModelSpec,
    theta: &[f64],
    data: &Dataset,
    h: &[f64],
) -> Result<f64> {
    let obj = Objective::new(spec, data, h)?;
    check_dim(theta, obj.dim())?;
    obj.penalized(theta)
}

fn check_dim(theta: &[f64], dim: usize) -> Result<()> {
    if theta.len() != dim {
        return Err(Error::DimensionMismatch {
            what: "packed parameter vector".into(),
            expected: dim,
            got: theta.len(),
        });
    }
    Ok(())
}

/// Maximizes the penalized log-likelihood from `opts.restarts` deterministic
/// starting points and returns the best local maximum found.
///
/// `converged` is true iff the max-norm of the (projected) penalized gradient
/// fell below `tol * (1 + |penalized loglik|)` for the returned point. If no
/// restart converges the best non-converged point is returned with
/// `converged = false`; an error is raised only when the objective is
/// `-inf` (or fails) at every starting point.
pub fn maximize(spec: &ModelSpec, data: &Dataset, h: &[f64], opts: &FitOptions) -> Result<FitResult> {
    if opts.restarts == 0 {
        return Err(Error::InvalidArgument {
            what: "fit options".into(),
            reason: "restarts must be at least 1".into(),
        });
    }
    let obj = Objective::new(spec, data, h)?;
    let dim = obj.dim();
    if let Some(init) = &opts.init {
        check_dim(init, dim)?;
    }
    if let Some(free) = &opts.free {
        if free.len() != dim {
            return Err(Error::DimensionMismatch {
                what: "free-coordinate mask".into(),
                expected: dim,
                got: free.len(),
            });
        }
    }

    let optim_opts = OptimOptions {
        tol: opts.tol,
        max_iters: opts.max_iters,
        ..OptimOptions::default()
    };
    let base: Vec<f64> = opts.init.clone().unwrap_or_else(|| vec![0.0; dim]);
    let is_free = |i: usize| opts.free.as_ref().is_none_or(|m| m[i]);

    let mut best: Option<OptimResult> = None;
    let mut last_err: Option<Error> = None;
    for start_idx in 0..opts.restarts {
        let mut x0 = base.clone();
        if start_idx > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(start_idx as u64);
            for (i, xi) in x0.iter_mut().enumerate() {
                let jitter = rng.random_range(-1.0..1.0);
                if is_free(i) {
                    *xi += jitter;
                }
            }
        }
        // Minimize the negated penalized log-likelihood.
        let run = minimize(
            |x| {
                let (pll, g) = obj.penalized_grad(x)?;
                Ok((-pll, g.into_iter().map(|v| -v).collect()))
            },
            &x0,
            opts.free.as_deref(),
            &optim_opts,
        );
        match run {
            Ok(res) => {
                let better = match &best {
                    None => true,
                    Some(b) => {
                        (res.converged, -res.f) > (b.converged, -b.f)
                    }
                };
                if better {
                    best = Some(res);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }

    let best = match best {
        Some(b) => b,
        None => {
            return Err(last_err.unwrap_or(Error::FitFailed {
                reason: "no restart produced a usable fit".into(),
            }))
        }
    };

    let loglik = obj.loglik(&best.x)?;
    let penalty = obj.penalty(&best.x);
    let gradient_norm = best.grad.iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
    let mut fit = FitResult {
        theta: best.x,
        h: h.to_vec(),
        loglik,
        penalty,
        penalized_loglik: loglik - penalty,
        edf: None,
        aic_p: None,
        converged: best.converged,
        iterations: best.iterations,
        f_evals: best.f_evals,
        restarts_used: opts.restarts,
        gradient_norm,
    };
    if opts.compute_edf {
        match effective_df_obj(&obj, &fit.theta) {
            Ok(edf) => {
                fit.aic_p = Some(aic_p(fit.loglik, edf));
                fit.edf = Some(edf);
            }
            Err(Error::SingularInformation { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(fit)
}

/// A data-informed starting point for [`maximize`]: plausible constants for
/// the rate blocks (survival 0.8, recapture 0.5, recovery 0.25, zero trend
/// and spline slopes) and observed-moment estimates for the covariate-process
/// blocks (first-capture mean/SD for the initial distribution; least squares
/// on consecutive-recapture pairs per destination class for the
/// autoregression, since `w' = eta mu + (1 - eta) w + noise`). Generic far-off
/// starts roughly double the iteration count of full-scale fits, so this is
/// the recommended `init` for cold fits.
pub fn default_init(spec: &ModelSpec, data: &Dataset) -> Result<Vec<f64>> {
    spec.validate()?;
    let layout = spec.layout();
    let mut theta = vec![0.0; spec.dim()];
    let moments = match data {
        Dataset::Histories(h) => covproc_moments(spec, h),
        Dataset::Arrays(_) => CovprocMoments::generic(spec.age_classes.n_classes()),
    };
    for (b, block) in spec.blocks.iter().enumerate() {
        let slot = &mut theta[layout[b].clone()];
        match block.role {
            Role::Survival => match block.form {
                Form::LogisticLinearInTime => slot[0] = logit(0.8),
                _ => slot.fill(logit(0.8)),
            },
            // Recapture starts at 0.5; logit(0.5) = 0 is already in place.
            Role::Recapture => {}
            Role::Recovery | Role::RecoveryTrend => match block.form {
                Form::LogisticLinearInTime => slot[0] = logit(0.25),
                _ => slot.fill(logit(0.25)),
            },
            Role::CovprocMu0 => slot[0] = moments.mu0,
            Role::CovprocSigma0 => slot[0] = moments.ln_sd0,
            Role::CovprocMu | Role::CovprocSigma | Role::CovprocEta => {
                let class = block.age_class.unwrap_or(1);
                let (mu, ln_sigma, eta_packed) = moments.class[class - 1];
                slot[0] = match block.role {
                    Role::CovprocMu => mu,
                    Role::CovprocSigma => ln_sigma,
                    _ => eta_packed,
                };
            }
        }
    }
    Ok(theta)
}

struct CovprocMoments {
    mu0: f64,
    ln_sd0: f64,
    /// Per age class: (mu, ln sigma, packed eta).
    class: Vec<(f64, f64, f64)>,
}

impl CovprocMoments {
    fn generic(n_classes: usize) -> Self {
        CovprocMoments {
            mu0: 0.0,
            ln_sd0: 0.0,
            class: vec![(0.0, 0.5f64.ln(), logit(0.25)); n_classes],
        }
    }
}

fn covproc_moments(spec: &ModelSpec, data: &HistoryData) -> CovprocMoments {
    let mut out = CovprocMoments::generic(spec.age_classes.n_classes());

    let firsts: Vec<f64> = data
        .histories
        .iter()
        .filter_map(|h| h.initial_covariate())
        .collect();
    if firsts.len() >= 2 {
        let n = firsts.len() as f64;
        let mean = firsts.iter().sum::<f64>() / n;
        let var = firsts.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0);
        out.mu0 = mean;
        out.ln_sd0 = var.sqrt().max(0.05).ln();
    }

    for (c, slot) in out.class.iter_mut().enumerate() {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for h in &data.histories {
            for occ in h.first_capture()..data.t {
                if spec.age_classes.class_of(occ + 1 - h.first_capture()) != c + 1 {
                    continue;
                }
                if let (Some(w), Some(w2)) = (h.covariates[occ - 1], h.covariates[occ]) {
                    xs.push(w);
                    ys.push(w2);
                }
            }
        }
        if xs.len() < 10 {
            continue;
        }
        let n = xs.len() as f64;
        let xbar = xs.iter().sum::<f64>() / n;
        let ybar = ys.iter().sum::<f64>() / n;
        let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
        if sxx < 1e-10 {
            continue;
        }
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
        let b = sxy / sxx;
        let a = ybar - b * xbar;
        let eta = (1.0 - b).clamp(0.1, 1.5);
        let mu = (a / eta).clamp(-10.0, 10.0);
        let resid_sd = (xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (y - a - b * x).powi(2))
            .sum::<f64>()
            / (n - 2.0))
            .sqrt();
        *slot = (mu, resid_sd.max(0.05).ln(), logit(eta / 2.0));
    }
    out
}

/// `AIC_p = -2 loglik + 2 nu` with the *unpenalized* log-likelihood.
pub fn aic_p(loglik_unpen: f64, edf: f64) -> f64 {
    -2.0 * loglik_unpen + 2.0 * edf
}

/// Effective degrees of freedom at a fitted point:
/// `nu = tr(I_u (I_u + P)^{-1})` with `I_u` the observed unpenalized
/// information (negative numerical Hessian) and `P` the exact penalty
/// Hessian. Errors with [`Error::SingularInformation`] when the penalized
/// information's condition number exceeds [`SINGULAR_COND_LIMIT`].
pub fn effective_df(spec: &ModelSpec, data: &Dataset, theta: &[f64], h: &[f64]) -> Result<f64> {
    let obj = Objective::new(spec, data, h)?;
    check_dim(theta, obj.dim())?;
    effective_df_obj(&obj, theta)
}

fn effective_df_obj(obj: &Objective<'_>, theta: &[f64]) -> Result<f64> {
    let n = theta.len();
    let info = observed_information(obj, theta)?;

    // Penalized information: add the exact penalty Hessian block-wise.
    let mut pen_info = info.clone();
    for (j, &b) in obj.spline_blocks.iter().enumerate() {
        let range = obj.resolved.layout[b].clone();
        let block = difference_penalty_hessian(range.len(), obj.h[j], obj.diff_order);
        for (a, row) in block.outer_iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                pen_info[(range.start + a, range.start + c)] += v;
            }
        }
    }

    let svd = pen_info.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !cond.is_finite() || cond > SINGULAR_COND_LIMIT {
        return Err(Error::SingularInformation {
            cond,
            limit: SINGULAR_COND_LIMIT,
        });
    }
    // nu = tr(I_u A^{-1}) = tr(A^{-1} I_u); solve A X = I_u.
    let x = svd.solve(&info, 0.0).map_err(|reason| Error::FitFailed {
        reason: format!("solving the penalized information system failed: {reason}"),
    })?;
    let nu = (0..n).map(|i| x[(i, i)]).sum();
    Ok(nu)
}

/// Observed information `-H(loglik)` by central differences: of the analytic
/// gradient where one exists, of the log-likelihood value otherwise.
fn observed_information(obj: &Objective<'_>, theta: &[f64]) -> Result<DMatrix<f64>> {
    let n = theta.len();
    let mut hess = DMatrix::zeros(n, n);
    match &obj.kind {
        ObjKind::Hmm(engine) => {
            let mut x = theta.to_vec();
            for i in 0..n {
                let step = HESS_REL_STEP_GRAD * (1.0 + theta[i].abs());
                x[i] = theta[i] + step;
                let (_, gu) = engine.loglik_grad(&x)?;
                x[i] = theta[i] - step;
                let (_, gd) = engine.loglik_grad(&x)?;
                x[i] = theta[i];
                for j in 0..n {
                    hess[(i, j)] += (gu[j] - gd[j]) / (2.0 * step);
                }
            }
            // Symmetrize the finite-difference asymmetry away.
            for i in 0..n {
                for j in 0..i {
                    let s = 0.5 * (hess[(i, j)] + hess[(j, i)]);
                    hess[(i, j)] = s;
                    hess[(j, i)] = s;
                }
            }
        }
        _ => {
            let f0 = obj.loglik(theta)?;
            let steps: Vec<f64> = theta
                .iter()
                .map(|&x| HESS_REL_STEP_VALUE * (1.0 + x.abs()))
                .collect();
            let mut x = theta.to_vec();
            for i in 0..n {
                for j in 0..=i {
                    let (si, sj) = (steps[i], steps[j]);
                    let v = if i == j {
                        x[i] = theta[i] + 2.0 * si;
                        let fpp = obj.loglik(&x)?;
                        x[i] = theta[i] - 2.0 * si;
                        let fmm = obj.loglik(&x)?;
                        x[i] = theta[i];
                        (fpp - 2.0 * f0 + fmm) / (4.0 * si * si)
                    } else {
                        x[i] = theta[i] + si;
                        x[j] = theta[j] + sj;
                        let fpp = obj.loglik(&x)?;
                        x[j] = theta[j] - sj;
                        let fpm = obj.loglik(&x)?;
                        x[i] = theta[i] - si;
                        let fmm = obj.loglik(&x)?;
                        x[j] = theta[j] + sj;
                        let fmp = obj.loglik(&x)?;
                        x[i] = theta[i];
                        x[j] = theta[j];
                        (fpp - fpm - fmp + fmm) / (4.0 * si * sj)
                    };
                    hess[(i, j)] = v;
                    hess[(j, i)] = v;
                }
            }
        }
    }
    Ok(-hess)
}
