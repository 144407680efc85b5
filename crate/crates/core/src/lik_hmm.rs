//! Approximate likelihood for stochastically time-varying individual
//! covariates observed only at live captures.
//!
//! The covariate range is partitioned into `m` bins; the augmented state
//! space has `m + 2` states — alive in bin `1..=m`, recently dead (died in
//! the last interval, still recoverable), and long dead. A scaled forward
//! algorithm marginalizes over the unobserved covariate path and survival
//! states, conditioning on first capture. The covariate evolves by
//! mean-reverting Gaussian steps `w_t = w_{t-1} + eta (mu - w_{t-1}) + sigma
//! eps_t` with age-class-specific parameters; transition bin masses are
//! normal CDF differences with tail mass folded into the boundary bins, so
//! every row stays stochastic even when the grid is too narrow (the
//! [`HmmEngine::tail_mass`] diagnostic reveals that instead).
//!
//! Conventions: survival over `(t-1, t]` uses the age class at `t-1`, the
//! covariate step into `t` uses the age class at `t`, and ages count from
//! zero at first capture. A covariate measured at first capture contributes
//! its initial-distribution bin mass as a likelihood factor; measured values
//! restrict the alive state to the containing bin (point mass) rather than
//! entering as a density.

use crate::data::{EncounterHistory, HistoryData};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, Regime, Resolved};
use crate::util::pairwise_sum;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

#[inline]
fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

#[inline]
fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Equidistant discretization of the covariate range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct CovGrid {
    m: usize,
    lo: f64,
    hi: f64,
    edges: Vec<f64>,
    midpoints: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    m: usize,
    lo: f64,
    hi: f64,
}

impl TryFrom<GridRepr> for CovGrid {
    type Error = Error;
    fn try_from(r: GridRepr) -> Result<Self> {
        CovGrid::new(r.m, r.lo, r.hi)
    }
}

impl From<CovGrid> for GridRepr {
    fn from(g: CovGrid) -> GridRepr {
        GridRepr {
            m: g.m,
            lo: g.lo,
            hi: g.hi,
        }
    }
}

impl CovGrid {
    pub fn new(m: usize, lo: f64, hi: f64) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidArgument {
                what: "covariate grid".into(),
                reason: format!("need at least 2 bins, got {m}"),
            });
        }
        if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
            return Err(Error::InvalidDomain { lo, hi });
        }
        let width = (hi - lo) / m as f64;
        let edges = (0..=m).map(|k| lo + k as f64 * width).collect();
        let midpoints = (0..m).map(|k| lo + (k as f64 + 0.5) * width).collect();
        Ok(CovGrid {
            m,
            lo,
            hi,
            edges,
            midpoints,
        })
    }

    /// Builds the grid declared in a hidden-Markov-regime spec.
    pub fn from_spec(spec: &ModelSpec) -> Result<Self> {
        let m = spec.hmm_bins.ok_or_else(|| Error::InvalidSpec {
            reason: "spec declares no hmm_bins".into(),
        })?;
        let (lo, hi) = spec.hmm_range.ok_or_else(|| Error::InvalidSpec {
            reason: "spec declares no hmm_range".into(),
        })?;
        CovGrid::new(m, lo, hi)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn midpoints(&self) -> &[f64] {
        &self.midpoints
    }

    /// Bin containing `w`, clamped to the boundary bins for out-of-range
    /// values (mirroring the tail-folding convention).
    pub fn bin_of(&self, w: f64) -> usize {
        let rel = (w - self.lo) / (self.hi - self.lo) * self.m as f64;
        (rel.floor().max(0.0) as usize).min(self.m - 1)
    }
}

/// Default grid range: observed covariate range extended on each side by
/// three pooled sample standard deviations of within-individual increments
/// between consecutive covariate measurements. Falls back to the SD of the
/// observed values when no individual carries two measurements.
pub fn default_grid_range(data: &HistoryData) -> Result<(f64, f64)> {
    let values = data.observed_covariates();
    if values.is_empty() {
        return Err(Error::InvalidData {
            reason: "no observed covariate values to derive a grid from".into(),
        });
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let mut increments = Vec::new();
    for h in &data.histories {
        let obs: Vec<f64> = h.covariates.iter().flatten().copied().collect();
        increments.extend(obs.windows(2).map(|w| w[1] - w[0]));
    }
    let sample_sd = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    let sd = if increments.len() >= 2 {
        sample_sd(&increments)
    } else if values.len() >= 2 {
        sample_sd(&values)
    } else {
        return Err(Error::InvalidData {
            reason: "need at least two covariate measurements to derive a grid".into(),
        });
    };
    if !(sd.is_finite() && sd > 0.0) {
        return Err(Error::InvalidData {
            reason: "covariate measurements are degenerate (zero spread)".into(),
        });
    }
    Ok((lo - 3.0 * sd, hi + 3.0 * sd))
}

/// Bin masses of `N(mean, sd^2)` over the grid, with the tails folded into
/// the boundary bins; sums to one by construction.
pub fn binned_normal(grid: &CovGrid, mean: f64, sd: f64) -> Vec<f64> {
    let m = grid.m;
    let mut out = vec![0.0; m];
    let mut prev_cdf = 0.0;
    for k in 1..=m {
        let cdf = if k == m {
            1.0
        } else {
            normal_cdf((grid.edges[k] - mean) / sd)
        };
        out[k - 1] = (cdf - prev_cdf).max(0.0);
        prev_cdf = cdf;
    }
    out
}

/// Per-bin derivative rows of [`binned_normal`] with respect to the mean and
/// the SD (tail folding included: boundary edge terms vanish).
fn binned_normal_derivs(grid: &CovGrid, mean: f64, sd: f64) -> (Vec<f64>, Vec<f64>) {
    let m = grid.m;
    let mut d_mean = vec![0.0; m];
    let mut d_sd = vec![0.0; m];
    let mut prev_pdf = 0.0;
    let mut prev_zpdf = 0.0;
    for k in 1..=m {
        let (pdf, zpdf) = if k == m {
            (0.0, 0.0)
        } else {
            let z = (grid.edges[k] - mean) / sd;
            let p = normal_pdf(z);
            (p, z * p)
        };
        d_mean[k - 1] = (prev_pdf - pdf) / sd;
        d_sd[k - 1] = (prev_zpdf - zpdf) / sd;
        prev_pdf = pdf;
        prev_zpdf = zpdf;
    }
    (d_mean, d_sd)
}

/// Parameter-dependent quantities shared by every history at one `theta`.
struct EvalCtx {
    /// Survival probability per age class per bin midpoint.
    phi: Vec<Vec<f64>>,
    /// Covariate-step bin-mass matrix per age class (`m x m`).
    steps: Vec<Array2<f64>>,
    /// `(mu, sigma, eta)` per age class.
    covpars: Vec<(f64, f64, f64)>,
    /// Recapture and recovery probabilities at occasions `2..=T`.
    p_occ: Vec<f64>,
    lam_occ: Vec<f64>,
    /// Binned initial covariate distribution and its parameters.
    f0: Vec<f64>,
    mu0: f64,
    sigma0: f64,
}

fn build_ctx(resolved: &Resolved<'_>, grid: &CovGrid, theta: &[f64]) -> Result<EvalCtx> {
    let n_classes = resolved.n_classes();
    let m = grid.m();
    let t_occ = resolved.spec.t_occasions;
    let mut phi = Vec::with_capacity(n_classes);
    let mut steps = Vec::with_capacity(n_classes);
    let mut covpars = Vec::with_capacity(n_classes);
    for class in 1..=n_classes {
        let phi_c: Vec<f64> = grid
            .midpoints()
            .iter()
            .map(|&mid| resolved.survival(theta, 1, class, Some(mid)))
            .collect::<Result<_>>()?;
        let (mu, sigma, eta) = resolved.covproc_class(theta, class);
        let mut mat = Array2::zeros((m, m));
        for (j, &mid) in grid.midpoints().iter().enumerate() {
            let mean = mid + eta * (mu - mid);
            let row = binned_normal(grid, mean, sigma);
            mat.row_mut(j).assign(&ndarray::ArrayView1::from(&row));
        }
        phi.push(phi_c);
        steps.push(mat);
        covpars.push((mu, sigma, eta));
    }
    let mut p_occ = Vec::with_capacity(t_occ - 1);
    let mut lam_occ = Vec::with_capacity(t_occ - 1);
    for t in 2..=t_occ {
        p_occ.push(resolved.recapture(theta, t, None)?);
        lam_occ.push(resolved.recovery(theta, t, None)?);
    }
    let (mu0, sigma0) = resolved.covproc_initial(theta);
    let f0 = binned_normal(grid, mu0, sigma0);
    Ok(EvalCtx {
        phi,
        steps,
        covpars,
        p_occ,
        lam_occ,
        f0,
        mu0,
        sigma0,
    })
}

impl EvalCtx {
    /// Emission vector over the `m + 2` states for one observation.
    fn emission(&self, m: usize, code: u8, obs_bin: Option<usize>, t: usize, out: &mut [f64]) {
        let p = self.p_occ[t - 2];
        let lam = self.lam_occ[t - 2];
        out.fill(0.0);
        match code {
            0 => {
                out[..m].fill(1.0 - p);
                out[m] = 1.0 - lam;
                out[m + 1] = 1.0;
            }
            1 => match obs_bin {
                Some(b) => out[b] = p,
                None => out[..m].fill(p),
            },
            _ => out[m] = lam,
        }
    }
}

/// One history, preprocessed for repeated likelihood evaluation.
#[derive(Debug, Clone)]
struct Prepped {
    init_bin: Option<usize>,
    steps: Vec<Step>,
}

#[derive(Debug, Clone, Copy)]
struct Step {
    t: usize,
    code: u8,
    obs_bin: Option<usize>,
    /// 0-based age classes: survival uses the class at `t-1`, the covariate
    /// step the class at `t`.
    surv_class: usize,
    cov_class: usize,
}

fn prep_history(resolved: &Resolved<'_>, grid: &CovGrid, hist: &EncounterHistory) -> Prepped {
    let c = hist.first_capture();
    let last_needed = hist.recovered_at().unwrap_or(hist.t());
    let classes = &resolved.spec.age_classes;
    let steps = (c + 1..=last_needed)
        .map(|t| Step {
            t,
            code: hist.codes[t - 1],
            obs_bin: hist.covariates[t - 1].map(|w| grid.bin_of(w)),
            surv_class: classes.class_of(t - 1 - c) - 1,
            cov_class: classes.class_of(t - c) - 1,
        })
        .collect();
    Prepped {
        init_bin: hist.initial_covariate().map(|w| grid.bin_of(w)),
        steps,
    }
}

/// Scaled forward pass. Returns the log-likelihood, optionally recording the
/// normalized forward vectors and scale factors for a gradient pass.
fn forward(
    ctx: &EvalCtx,
    m: usize,
    prep: &Prepped,
    mut record: Option<(&mut Vec<Vec<f64>>, &mut Vec<f64>)>,
) -> f64 {
    let n_states = m + 2;
    let mut u = vec![0.0; n_states];
    let mut point: Option<usize> = None;
    let mut ll = 0.0;
    match prep.init_bin {
        Some(b) => {
            let mass = ctx.f0[b];
            if mass <= 0.0 {
                return f64::NEG_INFINITY;
            }
            ll += mass.ln();
            u[b] = 1.0;
            point = Some(b);
        }
        None => u[..m].copy_from_slice(&ctx.f0),
    }
    if let Some((us, _)) = record.as_mut() {
        us.push(u.clone());
    }
    let mut tmp = vec![0.0; n_states];
    let mut emis = vec![0.0; n_states];
    for step in &prep.steps {
        let phi = &ctx.phi[step.surv_class];
        let trans = &ctx.steps[step.cov_class];
        tmp.fill(0.0);
        match point {
            Some(j) => {
                // The forward vector is an exact point mass on alive bin j.
                let row = trans.row(j);
                for k in 0..m {
                    tmp[k] = phi[j] * row[k];
                }
                tmp[m] = 1.0 - phi[j];
            }
            None => {
                for j in 0..m {
                    let w = u[j] * phi[j];
                    if w == 0.0 {
                        continue;
                    }
                    let row = trans.row(j);
                    for k in 0..m {
                        tmp[k] += w * row[k];
                    }
                    tmp[m] += u[j] * (1.0 - phi[j]);
                }
                tmp[m + 1] = u[m] + u[m + 1];
            }
        }
        ctx.emission(m, step.code, step.obs_bin, step.t, &mut emis);
        let mut norm = 0.0;
        for k in 0..n_states {
            tmp[k] *= emis[k];
            norm += tmp[k];
        }
        if !(norm > 0.0 && norm.is_finite()) {
            return f64::NEG_INFINITY;
        }
        ll += norm.ln();
        for k in 0..n_states {
            u[k] = tmp[k] / norm;
        }
        point = match (step.code, step.obs_bin) {
            (1, Some(b)) => Some(b),
            _ => None,
        };
        if let Some((us, cs)) = record.as_mut() {
            us.push(u.clone());
            cs.push(norm);
        }
    }
    ll
}

/// Transition matrix over the augmented state space for one age class (the
/// common case where the survival and covariate-step classes coincide).
/// States `0..m` are alive bins, `m` recently dead, `m+1` long dead.
pub fn build_transition(
    grid: &CovGrid,
    spec: &ModelSpec,
    theta: &[f64],
    age_class: usize,
) -> Result<Array2<f64>> {
    build_transition_pair(grid, spec, theta, age_class, age_class)
}

/// Transition matrix with distinct survival and covariate-step age classes
/// (used on the boundary step where an individual changes class).
pub fn build_transition_pair(
    grid: &CovGrid,
    spec: &ModelSpec,
    theta: &[f64],
    surv_class: usize,
    cov_class: usize,
) -> Result<Array2<f64>> {
    let resolved = spec.resolve()?;
    check_hmm_regime(&resolved)?;
    for (name, c) in [("survival", surv_class), ("covariate", cov_class)] {
        if c == 0 || c > resolved.n_classes() {
            return Err(Error::InvalidArgument {
                what: format!("{name} age class"),
                reason: format!("class {c} outside 1..={}", resolved.n_classes()),
            });
        }
    }
    let ctx = build_ctx(&resolved, grid, theta)?;
    let m = grid.m();
    let mut out = Array2::zeros((m + 2, m + 2));
    let phi = &ctx.phi[surv_class - 1];
    let steps = &ctx.steps[cov_class - 1];
    for j in 0..m {
        for k in 0..m {
            out[[j, k]] = phi[j] * steps[[j, k]];
        }
        out[[j, m]] = 1.0 - phi[j];
    }
    out[[m, m + 1]] = 1.0;
    out[[m + 1, m + 1]] = 1.0;
    Ok(out)
}

/// Emission vector over the augmented state space for one observation.
pub fn emission(
    grid: &CovGrid,
    spec: &ModelSpec,
    theta: &[f64],
    code: u8,
    cov_obs: Option<f64>,
    t: usize,
) -> Result<Vec<f64>> {
    let resolved = spec.resolve()?;
    check_hmm_regime(&resolved)?;
    if code > 2 {
        return Err(Error::InvalidArgument {
            what: "observation code".into(),
            reason: format!("code {code} is not in {{0, 1, 2}}"),
        });
    }
    if cov_obs.is_some() && code != 1 {
        return Err(Error::InvalidArgument {
            what: "emission".into(),
            reason: "a covariate can only be measured at a live capture".into(),
        });
    }
    if !(2..=spec.t_occasions).contains(&t) {
        return Err(Error::InvalidArgument {
            what: "emission occasion".into(),
            reason: format!("t = {t} outside 2..={}", spec.t_occasions),
        });
    }
    let ctx = build_ctx(&resolved, grid, theta)?;
    let m = grid.m();
    let mut out = vec![0.0; m + 2];
    ctx.emission(m, code, cov_obs.map(|w| grid.bin_of(w)), t, &mut out);
    Ok(out)
}

fn check_hmm_regime(resolved: &Resolved<'_>) -> Result<()> {
    if resolved.spec.regime != Regime::Hmm {
        return Err(Error::RegimeMismatch {
            reason: format!(
                "hidden-Markov operations need the hmm regime, spec declares {:?}",
                resolved.spec.regime
            ),
        });
    }
    Ok(())
}

/// Log-likelihood of a single history by the scaled forward algorithm.
pub fn loglik_hmm(
    spec: &ModelSpec,
    theta: &[f64],
    grid: &CovGrid,
    hist: &EncounterHistory,
) -> Result<f64> {
    let resolved = spec.resolve()?;
    check_hmm_regime(&resolved)?;
    check_history_t(spec, hist)?;
    let ctx = build_ctx(&resolved, grid, theta)?;
    let prep = prep_history(&resolved, grid, hist);
    Ok(forward(&ctx, grid.m(), &prep, None))
}

/// Log-likelihood of a dataset: the sum over histories, computed in parallel
/// with a thread-count-independent reduction.
pub fn loglik_dataset(
    spec: &ModelSpec,
    theta: &[f64],
    grid: &CovGrid,
    data: &HistoryData,
) -> Result<f64> {
    let engine = HmmEngine::with_grid(spec, data, grid.clone())?;
    engine.loglik(theta)
}

fn check_history_t(spec: &ModelSpec, hist: &EncounterHistory) -> Result<()> {
    if hist.t() != spec.t_occasions {
        return Err(Error::InvalidHistory {
            id: hist.id.clone(),
            reason: format!(
                "has {} occasions, model expects {}",
                hist.t(),
                spec.t_occasions
            ),
        });
    }
    Ok(())
}

/// Brute-force reference: sums the probability of every augmented-state path
/// explicitly. Exponential in `T - c_i`; meant for validating the forward
/// algorithm on tiny instances.
pub fn loglik_hmm_brute(
    spec: &ModelSpec,
    theta: &[f64],
    grid: &CovGrid,
    hist: &EncounterHistory,
) -> Result<f64> {
    let resolved = spec.resolve()?;
    check_hmm_regime(&resolved)?;
    check_history_t(spec, hist)?;
    let ctx = build_ctx(&resolved, grid, theta)?;
    let m = grid.m();
    let n_states = m + 2;
    let c = hist.first_capture();
    let t_end = hist.t();

    let mut init = vec![0.0; n_states];
    let mut extra_ll = 0.0;
    match hist.initial_covariate().map(|w| grid.bin_of(w)) {
        Some(b) => {
            if ctx.f0[b] <= 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            extra_ll += ctx.f0[b].ln();
            init[b] = 1.0;
        }
        None => init[..m].copy_from_slice(&ctx.f0),
    }

    // Build explicit per-step transition matrices and emission vectors.
    let classes = &resolved.spec.age_classes;
    let mut trans = Vec::new();
    let mut emis = Vec::new();
    for t in c + 1..=t_end {
        let sc = classes.class_of(t - 1 - c);
        let cc = classes.class_of(t - c);
        trans.push(build_transition_pair(grid, spec, theta, sc, cc)?);
        let mut e = vec![0.0; n_states];
        let obs_bin = hist.covariates[t - 1].map(|w| grid.bin_of(w));
        ctx.emission(m, hist.codes[t - 1], obs_bin, t, &mut e);
        emis.push(e);
    }

    let n_steps = t_end - c;
    let mut total = 0.0;
    let mut path = vec![0usize; n_steps + 1];
    #[allow(clippy::too_many_arguments)]
    fn rec(
        depth: usize,
        n_steps: usize,
        n_states: usize,
        weight: f64,
        path: &mut [usize],
        init: &[f64],
        trans: &[Array2<f64>],
        emis: &[Vec<f64>],
        total: &mut f64,
    ) {
        if weight == 0.0 {
            return;
        }
        if depth == n_steps + 1 {
            *total += weight;
            return;
        }
        for s in 0..n_states {
            path[depth] = s;
            let w = if depth == 0 {
                init[s]
            } else {
                weight * trans[depth - 1][[path[depth - 1], s]] * emis[depth - 1][s]
            };
            rec(depth + 1, n_steps, n_states, w, path, init, trans, emis, total);
        }
    }
    rec(
        0, n_steps, n_states, 1.0, &mut path, &init, &trans, &emis, &mut total,
    );
    if total <= 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(extra_ll + total.ln())
}

/// Accumulated expected sufficient statistics for the analytic gradient.
struct GradStats {
    /// Expected survival / death mass per age class per bin.
    s_surv: Vec<Vec<f64>>,
    s_die: Vec<Vec<f64>>,
    /// Expected alive-to-alive flow per covariate age class, *excluding* the
    /// step-matrix factor (so contracting with dM/d(parameter) gives the
    /// gradient without dividing by near-zero masses).
    v: Vec<Array2<f64>>,
    /// Per occasion `t = 2..=T`: expected capture, alive-miss, recovery, and
    /// recently-dead-miss masses.
    emis: Vec<[f64; 4]>,
    /// Initial-distribution weights per bin.
    g0: Vec<f64>,
}

impl GradStats {
    fn zeros(n_classes: usize, m: usize, t_occ: usize) -> Self {
        GradStats {
            s_surv: vec![vec![0.0; m]; n_classes],
            s_die: vec![vec![0.0; m]; n_classes],
            v: vec![Array2::zeros((m, m)); n_classes],
            emis: vec![[0.0; 4]; t_occ - 1],
            g0: vec![0.0; m],
        }
    }

    fn merge(&mut self, other: &GradStats) {
        for (a, b) in self.s_surv.iter_mut().zip(&other.s_surv) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.s_die.iter_mut().zip(&other.s_die) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.v.iter_mut().zip(&other.v) {
            *a += b;
        }
        for (a, b) in self.emis.iter_mut().zip(&other.emis) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (x, y) in self.g0.iter_mut().zip(&other.g0) {
            *x += y;
        }
    }
}

/// Backward smoothing pass accumulating sufficient statistics for one
/// history. `us` and `cs` come from a recorded forward pass.
fn backward_stats(
    ctx: &EvalCtx,
    m: usize,
    prep: &Prepped,
    us: &[Vec<f64>],
    cs: &[f64],
    stats: &mut GradStats,
) {
    let n_states = m + 2;
    let mut b = vec![1.0; n_states];
    let mut y = vec![0.0; n_states];
    let mut emis = vec![0.0; n_states];
    let mut b_next = vec![0.0; n_states];
    for (idx, step) in prep.steps.iter().enumerate().rev() {
        let u_now = &us[idx + 1];
        let u_prev = &us[idx];
        let c_t = cs[idx];
        ctx.emission(m, step.code, step.obs_bin, step.t, &mut emis);
        for k in 0..n_states {
            y[k] = emis[k] * b[k];
        }
        // Emission statistics from the smoothed state distribution.
        let alive_mass: f64 = (0..m).map(|k| u_now[k] * b[k]).sum();
        let rd_mass = u_now[m] * b[m];
        let e = &mut stats.emis[step.t - 2];
        match step.code {
            0 => {
                e[1] += alive_mass;
                e[3] += rd_mass;
            }
            1 => e[0] += alive_mass,
            _ => e[2] += rd_mass,
        }
        // Transition statistics and the backward recursion.
        let phi = &ctx.phi[step.surv_class];
        let trans = &ctx.steps[step.cov_class];
        let y_rd = y[m];
        let y_ld = y[m + 1];
        let s_surv = &mut stats.s_surv[step.surv_class];
        let s_die = &mut stats.s_die[step.surv_class];
        let v = &mut stats.v[step.cov_class];
        for j in 0..m {
            let row = trans.row(j);
            let mut q = 0.0;
            for k in 0..m {
                q += row[k] * y[k];
            }
            b_next[j] = (phi[j] * q + (1.0 - phi[j]) * y_rd) / c_t;
            let w = u_prev[j] / c_t;
            if w != 0.0 {
                s_surv[j] += w * phi[j] * q;
                s_die[j] += w * (1.0 - phi[j]) * y_rd;
                let scale = w * phi[j];
                let mut vrow = v.row_mut(j);
                for k in 0..m {
                    vrow[k] += scale * y[k];
                }
            }
        }
        b_next[m] = y_ld / c_t;
        b_next[m + 1] = y_ld / c_t;
        std::mem::swap(&mut b, &mut b_next);
    }
    // Initial-distribution statistics.
    match prep.init_bin {
        Some(bin) => stats.g0[bin] += 1.0 / ctx.f0[bin].max(1e-300),
        None => {
            for (g, &bj) in stats.g0.iter_mut().zip(&b) {
                *g += bj;
            }
        }
    }
}

/// Reusable evaluator for one dataset under one spec: prepares histories and
/// design matrices once, then serves repeated likelihood and gradient calls.
pub struct HmmEngine<'a> {
    resolved: Resolved<'a>,
    grid: CovGrid,
    prepped: Vec<Prepped>,
    /// Design matrix (bins x block dim) of each survival block, evaluated at
    /// the grid midpoints.
    surv_designs: Vec<(usize, Array2<f64>)>,
    /// Design matrix (occasions 2..=T x block dim) of the recapture and
    /// recovery blocks.
    recap_design: Option<(usize, Array2<f64>)>,
    recov_design: Option<(usize, Array2<f64>)>,
    n_histories: usize,
}

/// Linear-predictor design rows for a probability block, one row per
/// evaluation point.
fn block_design(
    resolved: &Resolved<'_>,
    block: usize,
    points: BlockPoints<'_>,
) -> Result<Array2<f64>> {
    use crate::model::{standardize_occasion, Form, Role};
    let spec = resolved.spec;
    let b = &spec.blocks[block];
    let dim = spec.block_dim(block);
    let rows = match points {
        BlockPoints::Covariate(mids) => mids.len(),
        BlockPoints::Occasions => spec.t_occasions - 1,
    };
    let mut out = Array2::zeros((rows, dim));
    for r in 0..rows {
        match (b.form, points) {
            (Form::Constant, _) => out[[r, 0]] = 1.0,
            (Form::PerOccasion, BlockPoints::Occasions) => out[[r, r]] = 1.0,
            (Form::LogisticLinearInTime, BlockPoints::Occasions) => {
                let (lo, hi) = match b.role {
                    Role::Survival => (1, spec.t_occasions - 1),
                    _ => (2, spec.t_occasions),
                };
                out[[r, 0]] = 1.0;
                out[[r, 1]] = standardize_occasion(r + 2, lo, hi);
            }
            (Form::LogisticLinearInCovariate, BlockPoints::Covariate(mids)) => {
                out[[r, 0]] = 1.0;
                out[[r, 1]] = mids[r];
            }
            (Form::SplineInCovariate, BlockPoints::Covariate(mids)) => {
                let smooth = resolved.spline_of_block[block].expect("spline block has a basis");
                let basis = &spec.smooth_bases[smooth];
                let (start, vals) = basis.eval_nonzero(mids[r])?;
                for (o, &v) in vals.iter().enumerate() {
                    out[[r, start + o]] = v;
                }
            }
            _ => {
                return Err(Error::InvalidSpec {
                    reason: format!(
                        "block {block}: form {:?} cannot be evaluated on these points",
                        b.form
                    ),
                })
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy)]
enum BlockPoints<'p> {
    Covariate(&'p [f64]),
    Occasions,
}

impl<'a> HmmEngine<'a> {
    pub fn new(spec: &'a ModelSpec, data: &HistoryData) -> Result<Self> {
        let grid = CovGrid::from_spec(spec)?;
        Self::with_grid(spec, data, grid)
    }

    /// Builds the engine with an explicit grid (e.g. a refinement of the
    /// spec's grid for convergence checks).
    pub fn with_grid(spec: &'a ModelSpec, data: &HistoryData, grid: CovGrid) -> Result<Self> {
        let resolved = spec.resolve()?;
        check_hmm_regime(&resolved)?;
        if data.t != spec.t_occasions {
            return Err(Error::DimensionMismatch {
                what: "dataset occasions".into(),
                expected: spec.t_occasions,
                got: data.t,
            });
        }
        let prepped = data
            .histories
            .iter()
            .map(|h| prep_history(&resolved, &grid, h))
            .collect();
        let mids = grid.midpoints().to_vec();
        let mut surv_designs = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for &block in &resolved.survival {
            if seen.insert(block) {
                surv_designs.push((block, block_design(&resolved, block, BlockPoints::Covariate(&mids))?));
            }
        }
        let recap_design = match resolved.recapture {
            Some(block) => Some((block, block_design(&resolved, block, BlockPoints::Occasions)?)),
            None => None,
        };
        let recov_design = match resolved.recovery {
            Some(block) => Some((block, block_design(&resolved, block, BlockPoints::Occasions)?)),
            None => None,
        };
        Ok(HmmEngine {
            resolved,
            grid,
            prepped,
            surv_designs,
            recap_design,
            recov_design,
            n_histories: data.histories.len(),
        })
    }

    pub fn grid(&self) -> &CovGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.resolved.dim()
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.resolved.dim() {
            return Err(Error::DimensionMismatch {
                what: "packed parameter vector".into(),
                expected: self.resolved.dim(),
                got: theta.len(),
            });
        }
        Ok(())
    }

    /// Dataset log-likelihood. Histories are mapped in parallel; per-chunk
    /// subtotals are reduced in index order so the result is identical for
    /// any thread count.
    pub fn loglik(&self, theta: &[f64]) -> Result<f64> {
        self.check_theta(theta)?;
        let ctx = build_ctx(&self.resolved, &self.grid, theta)?;
        let m = self.grid.m();
        let terms: Vec<f64> = self
            .prepped
            .par_iter()
            .map(|p| forward(&ctx, m, p, None))
            .collect();
        Ok(pairwise_sum(&terms))
    }

    /// Log-likelihood and its gradient with respect to the packed parameter
    /// vector, via a forward-backward smoothing pass. Costs roughly three
    /// likelihood evaluations regardless of the parameter count.
    ///
    /// If the likelihood is `-inf` the gradient is returned as zeros (the
    /// caller should reject such a point rather than follow it).
    pub fn loglik_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_theta(theta)?;
        let ctx = build_ctx(&self.resolved, &self.grid, theta)?;
        let m = self.grid.m();
        let n_classes = self.resolved.n_classes();
        let t_occ = self.resolved.spec.t_occasions;

        // Chunked parallelism with an index-ordered merge keeps the result
        // bit-identical for any thread count.
        const CHUNK: usize = 16;
        let results: Vec<(f64, Option<GradStats>)> = self
            .prepped
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut ll = 0.0;
                let mut stats = GradStats::zeros(n_classes, m, t_occ);
                let mut us: Vec<Vec<f64>> = Vec::new();
                let mut cs: Vec<f64> = Vec::new();
                for prep in chunk {
                    us.clear();
                    cs.clear();
                    let l = forward(&ctx, m, prep, Some((&mut us, &mut cs)));
                    if l == f64::NEG_INFINITY {
                        return (f64::NEG_INFINITY, None);
                    }
                    ll += l;
                    backward_stats(&ctx, m, prep, &us, &cs, &mut stats);
                }
                (ll, Some(stats))
            })
            .collect();

        let mut ll = 0.0;
        let mut stats = GradStats::zeros(n_classes, m, t_occ);
        for (l, s) in &results {
            if *l == f64::NEG_INFINITY {
                return Ok((f64::NEG_INFINITY, vec![0.0; self.resolved.dim()]));
            }
            ll += l;
            stats.merge(s.as_ref().expect("finite chunk carries stats"));
        }
        let grad = self.assemble_gradient(&ctx, &stats);
        Ok((ll, grad))
    }

    /// Folds the sufficient statistics into the packed gradient.
    fn assemble_gradient(&self, ctx: &EvalCtx, stats: &GradStats) -> Vec<f64> {
        let m = self.grid.m();
        let layout = &self.resolved.layout;
        let mut g = vec![0.0; self.resolved.dim()];

        // Survival blocks: d loglik / d linear predictor at bin j is
        // S_surv (1 - phi) - S_die phi; project through the design rows.
        for (block, design) in &self.surv_designs {
            let range = layout[*block].clone();
            for class in 0..self.resolved.n_classes() {
                if self.resolved.survival[class] != *block {
                    continue;
                }
                let phi = &ctx.phi[class];
                for j in 0..m {
                    let dx = stats.s_surv[class][j] * (1.0 - phi[j])
                        - stats.s_die[class][j] * phi[j];
                    if dx == 0.0 {
                        continue;
                    }
                    for (o, gslot) in g[range.clone()].iter_mut().enumerate() {
                        *gslot += dx * design[[j, o]];
                    }
                }
            }
        }

        // Recapture / recovery blocks (logit link on each occasion).
        if let Some((block, design)) = &self.recap_design {
            let range = layout[*block].clone();
            for (i, e) in stats.emis.iter().enumerate() {
                let p = ctx.p_occ[i];
                let dx = e[0] * (1.0 - p) - e[1] * p;
                if dx == 0.0 {
                    continue;
                }
                for (o, gslot) in g[range.clone()].iter_mut().enumerate() {
                    *gslot += dx * design[[i, o]];
                }
            }
        }
        if let Some((block, design)) = &self.recov_design {
            let range = layout[*block].clone();
            for (i, e) in stats.emis.iter().enumerate() {
                let lam = ctx.lam_occ[i];
                let dx = e[2] * (1.0 - lam) - e[3] * lam;
                if dx == 0.0 {
                    continue;
                }
                for (o, gslot) in g[range.clone()].iter_mut().enumerate() {
                    *gslot += dx * design[[i, o]];
                }
            }
        }

        // Covariate-process step parameters per age class.
        let cp = self.resolved.covproc().clone();
        for class in 0..self.resolved.n_classes() {
            let (mu, sigma, eta) = ctx.covpars[class];
            let v = &stats.v[class];
            let mut dmu = 0.0;
            let mut dsigma = 0.0;
            let mut deta = 0.0;
            for (j, &mid) in self.grid.midpoints().iter().enumerate() {
                let mean = mid + eta * (mu - mid);
                let (d_mean, d_sd) = binned_normal_derivs(&self.grid, mean, sigma);
                let mut flow_mean = 0.0;
                let mut flow_sd = 0.0;
                for k in 0..m {
                    flow_mean += v[[j, k]] * d_mean[k];
                    flow_sd += v[[j, k]] * d_sd[k];
                }
                dmu += eta * flow_mean;
                deta += (mu - mid) * flow_mean;
                dsigma += flow_sd;
            }
            // Chain rules: mu is identity, sigma = exp(x), eta = 2 logistic(x).
            g[layout[cp.mu[class]].start] += dmu;
            g[layout[cp.sigma[class]].start] += dsigma * sigma;
            g[layout[cp.eta[class]].start] += deta * eta * (1.0 - eta / 2.0);
        }

        // Initial covariate distribution.
        let (d_mean0, d_sd0) = binned_normal_derivs(&self.grid, ctx.mu0, ctx.sigma0);
        let mut dmu0 = 0.0;
        let mut dsig0 = 0.0;
        for j in 0..m {
            dmu0 += stats.g0[j] * d_mean0[j];
            dsig0 += stats.g0[j] * d_sd0[j];
        }
        g[layout[cp.mu0].start] += dmu0;
        g[layout[cp.sigma0].start] += dsig0 * ctx.sigma0;

        g
    }

    /// Largest normal-tail mass falling outside the grid from any bin
    /// midpoint (or the initial distribution); values above ~0.01 indicate
    /// the grid range is too narrow for the fitted process.
    pub fn tail_mass(&self, theta: &[f64]) -> Result<f64> {
        self.check_theta(theta)?;
        let ctx = build_ctx(&self.resolved, &self.grid, theta)?;
        let mut worst: f64 = 0.0;
        let probe = |mean: f64, sd: f64| {
            let below = normal_cdf((self.grid.lo() - mean) / sd);
            let above = 1.0 - normal_cdf((self.grid.hi() - mean) / sd);
            below + above
        };
        for class in 0..self.resolved.n_classes() {
            let (mu, sigma, eta) = ctx.covpars[class];
            for &mid in self.grid.midpoints() {
                worst = worst.max(probe(mid + eta * (mu - mid), sigma));
            }
        }
        worst = worst.max(probe(ctx.mu0, ctx.sigma0));
        Ok(worst)
    }

    pub fn n_histories(&self) -> usize {
        self.n_histories
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{pack, AgeClassMap, Form, ModelSpec, NaturalParams, ParamBlock, Regime, Role};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Two-age-class hidden-Markov spec with logistic-linear survival.
    fn small_spec(t: usize, m: usize, lo: f64, hi: f64) -> ModelSpec {
        let spec = ModelSpec {
            schema_version: 1,
            t_occasions: t,
            regime: Regime::Hmm,
            age_classes: AgeClassMap::new(vec![2]).unwrap(),
            blocks: vec![
                ParamBlock::new(Role::Survival, Form::LogisticLinearInCovariate, Some(1)),
                ParamBlock::new(Role::Survival, Form::LogisticLinearInCovariate, Some(2)),
                ParamBlock::new(Role::Recapture, Form::Constant, None),
                ParamBlock::new(Role::Recovery, Form::Constant, None),
                ParamBlock::new(Role::CovprocMu0, Form::Constant, None),
                ParamBlock::new(Role::CovprocSigma0, Form::Constant, None),
                ParamBlock::new(Role::CovprocMu, Form::Constant, Some(1)),
                ParamBlock::new(Role::CovprocSigma, Form::Constant, Some(1)),
                ParamBlock::new(Role::CovprocEta, Form::Constant, Some(1)),
                ParamBlock::new(Role::CovprocMu, Form::Constant, Some(2)),
                ParamBlock::new(Role::CovprocSigma, Form::Constant, Some(2)),
                ParamBlock::new(Role::CovprocEta, Form::Constant, Some(2)),
            ],
            smooth_bases: vec![],
            smooth_diff_order: 2,
            hmm_bins: Some(m),
            hmm_range: Some((lo, hi)),
        };
        spec.validate().unwrap();
        spec
    }

    fn jittered_theta(spec: &ModelSpec, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..spec.dim()).map(|_| rng.random_range(-0.6..0.6)).collect()
    }

    fn hist_with_cov(id: &str, codes: Vec<u8>, covs: Vec<Option<f64>>) -> EncounterHistory {
        EncounterHistory::new(id, codes, covs).unwrap()
    }

    #[test]
    fn grid_construction_and_binning() {
        let g = CovGrid::new(5, 0.0, 10.0).unwrap();
        assert_eq!(g.edges(), &[0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
        assert_eq!(g.midpoints(), &[1.0, 3.0, 5.0, 7.0, 9.0]);
        assert_eq!(g.bin_of(0.1), 0);
        assert_eq!(g.bin_of(1.99), 0);
        assert_eq!(g.bin_of(2.0), 1);
        assert_eq!(g.bin_of(9.99), 4);
        // Out-of-range values clamp to the boundary bins.
        assert_eq!(g.bin_of(-3.0), 0);
        assert_eq!(g.bin_of(10.0), 4);
        assert_eq!(g.bin_of(25.0), 4);
        assert!(CovGrid::new(1, 0.0, 1.0).is_err());
        assert!(CovGrid::new(4, 1.0, 1.0).is_err());
    }

    #[test]
    fn binned_normal_sums_to_one_and_folds_tails() {
        let g = CovGrid::new(7, -1.0, 1.0).unwrap();
        // SD much wider than the grid: huge tails, still a distribution.
        let f = binned_normal(&g, 0.3, 5.0);
        assert_relative_eq!(f.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(f[0] > 0.3 && f[6] > 0.3, "tails folded into boundary bins");
        // Tight SD: everything lands in the bin containing the mean.
        let f = binned_normal(&g, 0.3, 1e-4);
        assert_relative_eq!(f[g.bin_of(0.3)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn binned_normal_derivatives_match_finite_differences() {
        let g = CovGrid::new(9, -2.0, 3.0).unwrap();
        let (mean, sd) = (0.4, 0.8);
        let (d_mean, d_sd) = binned_normal_derivs(&g, mean, sd);
        let h = 1e-6;
        let fm1 = binned_normal(&g, mean + h, sd);
        let fm0 = binned_normal(&g, mean - h, sd);
        let fs1 = binned_normal(&g, mean, sd + h);
        let fs0 = binned_normal(&g, mean, sd - h);
        for k in 0..g.m() {
            assert_relative_eq!(d_mean[k], (fm1[k] - fm0[k]) / (2.0 * h), epsilon = 1e-7);
            assert_relative_eq!(d_sd[k], (fs1[k] - fs0[k]) / (2.0 * h), epsilon = 1e-7);
        }
        // Folding keeps the total mass constant, so derivatives sum to zero.
        assert_relative_eq!(d_mean.iter().sum::<f64>(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(d_sd.iter().sum::<f64>(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn transition_rows_sum_to_one() {
        let spec = small_spec(6, 8, -2.0, 2.0);
        let grid = CovGrid::from_spec(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for draw in 0..100 {
            let theta: Vec<f64> = (0..spec.dim()).map(|_| rng.random_range(-1.5..1.5)).collect();
            let class = 1 + draw % 2;
            let tr = build_transition(&grid, &spec, &theta, class).unwrap();
            for j in 0..grid.m() + 2 {
                assert_relative_eq!(tr.row(j).sum(), 1.0, epsilon = 1e-12);
            }
            // Long dead is absorbing; recently dead moves on with certainty.
            assert_eq!(tr[[grid.m() + 1, grid.m() + 1]], 1.0);
            assert_eq!(tr[[grid.m(), grid.m() + 1]], 1.0);
        }
    }

    #[test]
    fn zero_survival_sends_all_mass_to_recently_dead() {
        let spec = small_spec(4, 5, -2.0, 2.0);
        let mut theta = vec![0.0; spec.dim()];
        // Survival intercepts strongly negative, slopes zero.
        theta[0] = -40.0;
        theta[2] = -40.0;
        let grid = CovGrid::from_spec(&spec).unwrap();
        let tr = build_transition(&grid, &spec, &theta, 1).unwrap();
        for j in 0..grid.m() {
            assert_relative_eq!(tr[[j, grid.m()]], 1.0, epsilon = 1e-12);
            assert!(tr.row(j).iter().take(grid.m()).all(|&x| x < 1e-12));
        }
    }

    #[test]
    fn deterministic_mean_reversion_concentrates_on_target_bin() {
        let spec = small_spec(4, 8, 0.0, 8.0);
        let natural = NaturalParams {
            blocks: vec![
                vec![0.0, 0.0], // survival linear predictor 0 => phi = 0.5
                vec![0.0, 0.0],
                vec![0.5],
                vec![0.5],
                vec![3.0],  // mu0
                vec![1.0],  // sigma0
                vec![2.5],  // mu class 1: bin 2 center
                vec![1e-6], // sigma tiny
                vec![1.0],  // eta = 1: jump straight to mu
                vec![6.5],
                vec![1e-6],
                vec![1.0],
            ],
        };
        let theta = pack(&spec, &natural).unwrap();
        let grid = CovGrid::from_spec(&spec).unwrap();
        let tr = build_transition(&grid, &spec, &theta, 1).unwrap();
        let target = grid.bin_of(2.5);
        for j in 0..grid.m() {
            // Alive mass (phi = 0.5 at every midpoint) all goes to mu's bin.
            assert_relative_eq!(tr[[j, target]], 0.5, epsilon = 1e-9);
        }
    }

    #[test]
    fn emission_cases() {
        let spec = small_spec(5, 5, 0.0, 10.0);
        let natural_p = 0.6;
        let natural_lam = 0.3;
        let mut natural = crate::model::unpack(&spec, &vec![0.0; spec.dim()]).unwrap();
        natural.blocks[2][0] = natural_p;
        natural.blocks[3][0] = natural_lam;
        let theta = pack(&spec, &natural).unwrap();
        let grid = CovGrid::from_spec(&spec).unwrap();

        let e0 = emission(&grid, &spec, &theta, 0, None, 3).unwrap();
        assert_eq!(e0.len(), 7);
        for &v in &e0[..5] {
            assert_relative_eq!(v, 1.0 - natural_p, epsilon = 1e-12);
        }
        assert_relative_eq!(e0[5], 1.0 - natural_lam, epsilon = 1e-12);
        assert_relative_eq!(e0[6], 1.0);

        let e1 = emission(&grid, &spec, &theta, 1, Some(5.1), 3).unwrap();
        for (k, &v) in e1[..5].iter().enumerate() {
            let expect = if k == 2 { natural_p } else { 0.0 };
            assert_relative_eq!(v, expect, epsilon = 1e-12);
        }
        assert_eq!(e1[5], 0.0);
        assert_eq!(e1[6], 0.0);

        let e1m = emission(&grid, &spec, &theta, 1, None, 3).unwrap();
        for &v in &e1m[..5] {
            assert_relative_eq!(v, natural_p, epsilon = 1e-12);
        }

        let e2 = emission(&grid, &spec, &theta, 2, None, 3).unwrap();
        assert!(e2[..5].iter().all(|&x| x == 0.0));
        assert_relative_eq!(e2[5], natural_lam, epsilon = 1e-12);
        assert_eq!(e2[6], 0.0);

        // Covariate without a live capture is a contract violation.
        assert!(emission(&grid, &spec, &theta, 0, Some(1.0), 3).is_err());
        assert!(emission(&grid, &spec, &theta, 2, Some(1.0), 3).is_err());
    }

    #[test]
    fn seen_only_at_final_occasion() {
        let t = 4;
        let spec = small_spec(t, 6, -3.0, 3.0);
        let theta = jittered_theta(&spec, 17);
        let grid = CovGrid::from_spec(&spec).unwrap();
        // Unobserved initial covariate: conditioning exhausts the data.
        let h = EncounterHistory::from_codes("x", vec![0, 0, 0, 1]).unwrap();
        assert_eq!(loglik_hmm(&spec, &theta, &grid, &h).unwrap(), 0.0);
        // Observed initial covariate: its bin mass is a likelihood factor.
        let mut covs = vec![None; t];
        covs[t - 1] = Some(0.7);
        let h = hist_with_cov("y", vec![0, 0, 0, 1], covs);
        let resolved = spec.resolve().unwrap();
        let ctx = build_ctx(&resolved, &grid, &theta).unwrap();
        let expect = ctx.f0[grid.bin_of(0.7)].ln();
        assert_relative_eq!(
            loglik_hmm(&spec, &theta, &grid, &h).unwrap(),
            expect,
            epsilon = 1e-12
        );
    }

    /// Random valid history with first capture `c`, observing covariates
    /// with probability 1/2 at live captures.
    fn random_history(
        t: usize,
        c: usize,
        rng: &mut ChaCha8Rng,
        lo: f64,
        hi: f64,
    ) -> EncounterHistory {
        loop {
            let mut codes = vec![0u8; t];
            codes[c - 1] = 1;
            let mut alive = true;
            for t_i in c + 1..=t {
                if !alive {
                    break;
                }
                let u: f64 = rng.random();
                if u < 0.35 {
                    codes[t_i - 1] = 1;
                } else if u < 0.5 {
                    codes[t_i - 1] = 2;
                    alive = false;
                }
            }
            let covs: Vec<Option<f64>> = codes
                .iter()
                .map(|&code| {
                    (code == 1 && rng.random::<f64>() < 0.5)
                        .then(|| rng.random_range(lo + 0.01..hi - 0.01))
                })
                .collect();
            if let Ok(h) = EncounterHistory::new("r", codes, covs) {
                return h;
            }
        }
    }

    #[test]
    fn forward_matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (lo, hi) = (-2.0, 2.0);
        for case in 0..60 {
            let t = 4;
            let m = 2 + case % 3; // 2..=4 bins
            let spec = small_spec(t, m, lo, hi);
            let theta = jittered_theta(&spec, 100 + case as u64);
            let grid = CovGrid::from_spec(&spec).unwrap();
            let c = 1 + (case % 3); // keeps T - c <= 3
            let h = random_history(t, c, &mut rng, lo, hi);
            let fast = loglik_hmm(&spec, &theta, &grid, &h).unwrap();
            let brute = loglik_hmm_brute(&spec, &theta, &grid, &h).unwrap();
            if fast == f64::NEG_INFINITY {
                assert_eq!(brute, f64::NEG_INFINITY);
            } else {
                assert_relative_eq!(fast, brute, max_relative = 1e-12, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn dataset_loglik_sums_and_permutes() {
        let t = 5;
        let spec = small_spec(t, 6, -2.0, 2.0);
        let theta = jittered_theta(&spec, 7);
        let grid = CovGrid::from_spec(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let hists: Vec<EncounterHistory> = (0..12)
            .map(|_| {
                let c = rng.random_range(1..=t - 1);
                random_history(t, c, &mut rng, -2.0, 2.0)
            })
            .collect();
        let individual: f64 = hists
            .iter()
            .map(|h| loglik_hmm(&spec, &theta, &grid, h).unwrap())
            .sum();
        let data = HistoryData::new(hists.clone()).unwrap();
        let total = loglik_dataset(&spec, &theta, &grid, &data).unwrap();
        assert_relative_eq!(total, individual, epsilon = 1e-9, max_relative = 1e-12);

        let mut shuffled = hists;
        shuffled.reverse();
        let data2 = HistoryData::new(shuffled).unwrap();
        let total2 = loglik_dataset(&spec, &theta, &grid, &data2).unwrap();
        assert_relative_eq!(total, total2, epsilon = 1e-12);

        let empty = HistoryData::with_t(t, vec![]).unwrap();
        assert_eq!(loglik_dataset(&spec, &theta, &grid, &empty).unwrap(), 0.0);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let t = 5;
        let spec = small_spec(t, 6, -2.5, 2.5);
        let grid = CovGrid::from_spec(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let hists: Vec<EncounterHistory> = (0..25)
            .map(|_| {
                let c = rng.random_range(1..=t - 1);
                random_history(t, c, &mut rng, -2.5, 2.5)
            })
            .collect();
        let data = HistoryData::new(hists).unwrap();
        let engine = HmmEngine::with_grid(&spec, &data, grid).unwrap();
        for seed in [5u64, 6, 7] {
            let theta = jittered_theta(&spec, seed);
            let (ll, grad) = engine.loglik_grad(&theta).unwrap();
            assert!(ll.is_finite());
            assert_relative_eq!(engine.loglik(&theta).unwrap(), ll, epsilon = 1e-12);
            for i in 0..theta.len() {
                let h = 1e-5 * (1.0 + theta[i].abs());
                let mut up = theta.clone();
                up[i] += h;
                let mut dn = theta.clone();
                dn[i] -= h;
                let fd = (engine.loglik(&up).unwrap() - engine.loglik(&dn).unwrap()) / (2.0 * h);
                assert!(
                    (grad[i] - fd).abs() <= 1e-4 * (1.0 + fd.abs()),
                    "seed {seed} coord {i}: analytic {} vs fd {fd}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn grid_refinement_differences_shrink() {
        let t = 6;
        let spec = small_spec(t, 10, -3.0, 3.0);
        let theta = jittered_theta(&spec, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let hists: Vec<EncounterHistory> = (0..30)
            .map(|_| {
                let c = rng.random_range(1..=t - 1);
                random_history(t, c, &mut rng, -3.0, 3.0)
            })
            .collect();
        let data = HistoryData::new(hists).unwrap();
        let ll = |m: usize| {
            let grid = CovGrid::new(m, -3.0, 3.0).unwrap();
            loglik_dataset(&spec, &theta, &grid, &data).unwrap()
        };
        let (l10, l20, l40, l80) = (ll(10), ll(20), ll(40), ll(80));
        let d1 = (l20 - l10).abs();
        let d2 = (l40 - l20).abs();
        let d3 = (l80 - l40).abs();
        assert!(d2 <= d1 + 1e-12, "refinement 20->40 ({d2}) vs 10->20 ({d1})");
        assert!(d3 <= d2 + 1e-12, "refinement 40->80 ({d3}) vs 20->40 ({d2})");
    }

    #[test]
    fn tail_mass_flags_narrow_grids() {
        let t = 4;
        let spec = small_spec(t, 6, -0.5, 0.5);
        // sigma = 1 on a grid of half-width 0.5: most mass escapes.
        let theta = vec![0.0; spec.dim()];
        let h = EncounterHistory::from_codes("x", vec![1, 0, 0, 0]).unwrap();
        let data = HistoryData::new(vec![h]).unwrap();
        let engine = HmmEngine::new(&spec, &data).unwrap();
        assert!(engine.tail_mass(&theta).unwrap() > 0.3);

        let wide = small_spec(t, 40, -8.0, 8.0);
        let theta = vec![0.0; wide.dim()];
        let h = EncounterHistory::from_codes("x", vec![1, 0, 0, 0]).unwrap();
        let data = HistoryData::new(vec![h]).unwrap();
        let engine = HmmEngine::new(&wide, &data).unwrap();
        assert!(engine.tail_mass(&theta).unwrap() < 1e-6);
    }

    #[test]
    fn default_grid_range_from_increments() {
        let mk = |codes: Vec<u8>, covs: Vec<Option<f64>>| {
            EncounterHistory::new("x", codes, covs).unwrap()
        };
        let data = HistoryData::new(vec![
            mk(vec![1, 1, 1], vec![Some(1.0), Some(2.0), Some(3.0)]),
            mk(vec![1, 1, 0], vec![Some(5.0), Some(4.0), None]),
        ])
        .unwrap();
        // Increments: +1, +1, -1; mean 1/3, sample SD = sqrt(4/3).
        let sd = (4.0_f64 / 3.0).sqrt();
        let (lo, hi) = default_grid_range(&data).unwrap();
        assert_relative_eq!(lo, 1.0 - 3.0 * sd, epsilon = 1e-12);
        assert_relative_eq!(hi, 5.0 + 3.0 * sd, epsilon = 1e-12);
    }

    #[test]
    fn recovery_short_circuit_is_exact() {
        // A history recovered early must give the same likelihood whether or
        // not trailing all-zero occasions are processed; the engine stops at
        // the recovery, the brute force must agree while walking every path
        // to the horizon.
        let t = 5;
        let spec = small_spec(t, 3, -2.0, 2.0);
        let theta = jittered_theta(&spec, 33);
        let grid = CovGrid::from_spec(&spec).unwrap();
        let h = hist_with_cov(
            "x",
            vec![0, 1, 2, 0, 0],
            vec![None, Some(0.4), None, None, None],
        );
        let fast = loglik_hmm(&spec, &theta, &grid, &h).unwrap();
        let brute = loglik_hmm_brute(&spec, &theta, &grid, &h).unwrap();
        assert_relative_eq!(fast, brute, max_relative = 1e-12);
    }
}
