//! Bootstrap resampling and confidence bands for fitted smooths.
//!
//! Two resampling schemes are provided. The nonparametric bootstrap
//! resamples encounter histories with replacement, stratified by
//! first-capture occasion so every replicate preserves the release
//! structure of the original study. The parametric bootstrap redraws each
//! release cohort of an m/d-array from the multinomial cell probabilities
//! implied by a fitted model. Either way, replicates are refitted at the
//! original smoothing parameters, warm-started from the original estimate,
//! and the collection of refits feeds two band constructions: a pointwise
//! quantile envelope, and a simultaneous band obtained by widening the
//! pointwise band about the point estimate on the link scale until the
//! requested fraction of whole replicate curves is contained.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ArrayData, Dataset, HistoryData, MDArrays};
use crate::error::{Error, Result};
use crate::fit::{maximize, FitOptions, FitResult};
use crate::lik_array::model_cell_probs;
use crate::model::{inv_logit, logit, ModelSpec};
use crate::util::quantile_sorted;

/// Fraction of replicate refit failures tolerated before the whole
/// bootstrap run reports an error.
const MAX_FAIL_FRACTION: f64 = 0.10;
/// Minimum number of successful replicates needed to form a band.
const MIN_BAND_REPLICATES: usize = 20;
/// Largest widening factor tried for the simultaneous band.
const MAX_BAND_FACTOR: f64 = 20.0;
/// Bisection tolerance on the widening factor.
const FACTOR_TOL: f64 = 1e-3;
/// Slack used when testing whether a curve lies inside a band, so exact
/// boundary contact does not flip with rounding.
const INSIDE_EPS: f64 = 1e-9;

/// Options for the replicate refits.
#[derive(Debug, Clone)]
pub struct BootstrapOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            tol: 1e-6,
            max_iters: 500,
        }
    }
}

/// Outcome of a bootstrap run: the successful replicate refits plus how
/// many replicates were requested and how many failed (and were skipped).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapRun {
    pub fits: Vec<FitResult>,
    pub n_failed: usize,
    pub n_requested: usize,
}

/// A confidence band for one fitted smooth, on the probability scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub w: Vec<f64>,
    /// Point-estimate curve of the original fit.
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
}

/// A simultaneous band plus the widening factor that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimultaneousBand {
    pub band: Band,
    /// Factor applied to the pointwise margins on the link scale.
    pub factor: f64,
    /// Fraction of replicate curves lying entirely inside the band.
    pub achieved: f64,
}

/// Nonparametric bootstrap: resample histories with replacement within
/// first-capture strata and refit each replicate at the original `h`.
///
/// Stratum sizes are preserved exactly, so every replicate releases the
/// same number of new animals at each occasion as the original data.
/// Failed refits are skipped; more than 10% failures is an error.
pub fn nonparam_bootstrap(
    spec: &ModelSpec,
    data: &HistoryData,
    origin: &FitResult,
    b: usize,
    seed: u64,
    opts: &BootstrapOptions,
) -> Result<BootstrapRun> {
    check_replicates(b)?;
    if data.histories.is_empty() {
        return Err(Error::InvalidData {
            reason: "cannot bootstrap an empty history set".into(),
        });
    }
    let strata = first_capture_strata(data);
    let results: Vec<Option<FitResult>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = replicate_rng(seed, rep);
            let sample = resample_stratified(data, &strata, &mut rng);
            let dataset = Dataset::Histories(sample);
            refit_replicate(spec, &dataset, origin, seed, opts)
        })
        .collect();
    finish_run(results, b)
}

/// Parametric bootstrap: redraw every release cohort of the m/d-array from
/// the fitted multinomial cell probabilities and refit at the original `h`.
///
/// Each replicate keeps the original release counts; only the allocation
/// of each cohort across recapture, recovery, and never-seen cells is
/// redrawn. Failure handling matches [`nonparam_bootstrap`].
pub fn param_bootstrap(
    spec: &ModelSpec,
    data: &ArrayData,
    origin: &FitResult,
    b: usize,
    seed: u64,
    opts: &BootstrapOptions,
) -> Result<BootstrapRun> {
    check_replicates(b)?;
    let resolved = spec.resolve()?;
    let (q_m, q_d) = model_cell_probs(&resolved, &origin.theta, data)?;
    let results: Vec<Option<FitResult>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = replicate_rng(seed, rep);
            let sample = resample_arrays(data, &q_m, &q_d, &mut rng).ok()?;
            refit_replicate(spec, &Dataset::Arrays(sample), origin, seed, opts)
        })
        .collect();
    finish_run(results, b)
}

/// Pointwise confidence band: empirical quantiles of the replicate curves.
///
/// At each grid point the band takes the empirical `alpha/2` and
/// `1 - alpha/2` quantiles (`alpha = 1 - level`) of the replicate fitted
/// curves on the probability scale. Needs at least 20 successful
/// replicates.
pub fn pointwise_band(
    spec: &ModelSpec,
    origin: &FitResult,
    run: &BootstrapRun,
    smooth_index: usize,
    w_grid: &[f64],
    level: f64,
) -> Result<Band> {
    check_level(level)?;
    check_band_replicates(run)?;
    if w_grid.is_empty() {
        return Err(Error::InvalidArgument {
            what: "band grid".into(),
            reason: "need at least one covariate value".into(),
        });
    }
    let estimate = smooth_curve_probability(spec, &origin.theta, smooth_index, w_grid)?;
    let curves = replicate_curves(spec, run, smooth_index, w_grid, inv_logit)?;
    let alpha = 1.0 - level;
    let mut lower = Vec::with_capacity(w_grid.len());
    let mut upper = Vec::with_capacity(w_grid.len());
    let mut column = vec![0.0; curves.len()];
    for j in 0..w_grid.len() {
        for (ci, curve) in curves.iter().enumerate() {
            column[ci] = curve[j];
        }
        column.sort_by(f64::total_cmp);
        lower.push(quantile_sorted(&column, alpha / 2.0));
        upper.push(quantile_sorted(&column, 1.0 - alpha / 2.0));
    }
    Ok(Band {
        w: w_grid.to_vec(),
        estimate,
        lower,
        upper,
        level,
    })
}

/// Simultaneous confidence band by rescaling the pointwise band.
///
/// The pointwise margins about the point estimate are taken on the link
/// (logit) scale and scaled by the smallest factor `c >= 1` (bisection on
/// `[1, 20]`, tolerance 1e-3) such that at least `level` of the replicate
/// curves lie entirely inside the widened band; the result is mapped back
/// to the probability scale, which keeps it inside `[0, 1]`. Margins are
/// floored at zero so the band can only grow with `c`, making the covered
/// fraction non-decreasing in `c` (asserted during the bisection). If even
/// `c = 20` covers less than `level`, the error reports the fraction it
/// achieved.
pub fn simultaneous_band(
    spec: &ModelSpec,
    origin: &FitResult,
    run: &BootstrapRun,
    pointwise: &Band,
    smooth_index: usize,
) -> Result<SimultaneousBand> {
    check_band_replicates(run)?;
    let level = pointwise.level;
    let est_link = smooth_curve_link(spec, &origin.theta, smooth_index, &pointwise.w)?;
    // Margins floored at zero: under heavy replicate bias a pointwise
    // quantile can cross the point estimate, and a signed margin would
    // shrink that side as c grows, breaking coverage monotonicity.
    let lo_margin: Vec<f64> = est_link
        .iter()
        .zip(&pointwise.lower)
        .map(|(&e, &p)| (e - logit(p)).max(0.0))
        .collect();
    let hi_margin: Vec<f64> = est_link
        .iter()
        .zip(&pointwise.upper)
        .map(|(&e, &p)| (logit(p) - e).max(0.0))
        .collect();
    let curves = replicate_curves(spec, run, smooth_index, &pointwise.w, |x| x)?;
    let frac = |c: f64| fraction_inside(&curves, &est_link, &lo_margin, &hi_margin, c);

    let f_low = frac(1.0);
    let (factor, achieved) = if f_low + INSIDE_EPS >= level {
        (1.0, f_low)
    } else {
        let f_high = frac(MAX_BAND_FACTOR);
        assert!(
            f_high >= f_low,
            "covered fraction must be non-decreasing in the widening factor"
        );
        if f_high < level {
            return Err(Error::BandCoverage {
                achieved: f_high,
                level,
            });
        }
        let (mut lo_c, mut hi_c) = (1.0, MAX_BAND_FACTOR);
        let (mut f_lo, mut f_hi) = (f_low, f_high);
        while hi_c - lo_c > FACTOR_TOL {
            let mid = 0.5 * (lo_c + hi_c);
            let f_mid = frac(mid);
            assert!(
                f_mid >= f_lo && f_mid <= f_hi,
                "covered fraction must be non-decreasing in the widening factor"
            );
            if f_mid >= level {
                hi_c = mid;
                f_hi = f_mid;
            } else {
                lo_c = mid;
                f_lo = f_mid;
            }
        }
        // The upper end of the bracket is the smallest factor (within
        // tolerance) that reaches the requested coverage.
        (hi_c, f_hi)
    };

    let lower: Vec<f64> = est_link
        .iter()
        .zip(&lo_margin)
        .map(|(&e, &m)| inv_logit(e - factor * m))
        .collect();
    let upper: Vec<f64> = est_link
        .iter()
        .zip(&hi_margin)
        .map(|(&e, &m)| inv_logit(e + factor * m))
        .collect();
    Ok(SimultaneousBand {
        band: Band {
            w: pointwise.w.clone(),
            estimate: pointwise.estimate.clone(),
            lower,
            upper,
            level,
        },
        factor,
        achieved,
    })
}

/// Link-scale curve of smooth `smooth_index` at each grid point.
pub fn smooth_curve_link(
    spec: &ModelSpec,
    theta: &[f64],
    smooth_index: usize,
    w_grid: &[f64],
) -> Result<Vec<f64>> {
    let blocks = spec.spline_blocks();
    let &block = blocks
        .get(smooth_index)
        .ok_or_else(|| Error::InvalidArgument {
            what: "smooth index".into(),
            reason: format!(
                "model has {} smooth terms, asked for index {smooth_index}",
                blocks.len()
            ),
        })?;
    if theta.len() != spec.dim() {
        return Err(Error::DimensionMismatch {
            what: "parameter vector".into(),
            expected: spec.dim(),
            got: theta.len(),
        });
    }
    let range = spec.layout()[block].clone();
    let basis = &spec.smooth_bases[smooth_index];
    let gamma = &theta[range];
    w_grid
        .iter()
        .map(|&w| {
            let (start, vals) = basis.eval_nonzero(w)?;
            Ok(vals
                .iter()
                .enumerate()
                .map(|(i, v)| v * gamma[start + i])
                .sum())
        })
        .collect()
}

/// Probability-scale curve of smooth `smooth_index` at each grid point.
pub fn smooth_curve_probability(
    spec: &ModelSpec,
    theta: &[f64],
    smooth_index: usize,
    w_grid: &[f64],
) -> Result<Vec<f64>> {
    let link = smooth_curve_link(spec, theta, smooth_index, w_grid)?;
    Ok(link.into_iter().map(inv_logit).collect())
}

fn check_replicates(b: usize) -> Result<()> {
    if b == 0 {
        return Err(Error::InvalidArgument {
            what: "bootstrap replicates".into(),
            reason: "need at least one replicate".into(),
        });
    }
    Ok(())
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument {
            what: "confidence level".into(),
            reason: format!("must be strictly between 0 and 1, got {level}"),
        });
    }
    Ok(())
}

fn check_band_replicates(run: &BootstrapRun) -> Result<()> {
    if run.fits.len() < MIN_BAND_REPLICATES {
        return Err(Error::InvalidArgument {
            what: "bootstrap replicates".into(),
            reason: format!(
                "bands need at least {MIN_BAND_REPLICATES} successful replicates, have {}",
                run.fits.len()
            ),
        });
    }
    Ok(())
}

fn replicate_rng(seed: u64, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    rng
}

/// Refits one replicate at the original smoothing parameters: warm start
/// from the original theta with one restart, then one cold-start fallback.
fn refit_replicate(
    spec: &ModelSpec,
    data: &Dataset,
    origin: &FitResult,
    seed: u64,
    opts: &BootstrapOptions,
) -> Option<FitResult> {
    let warm = FitOptions {
        restarts: 1,
        tol: opts.tol,
        max_iters: opts.max_iters,
        seed,
        init: Some(origin.theta.clone()),
        free: None,
        compute_edf: false,
    };
    if let Ok(fit) = maximize(spec, data, &origin.h, &warm) {
        if fit.converged {
            return Some(fit);
        }
    }
    let cold = FitOptions { init: None, ..warm };
    match maximize(spec, data, &origin.h, &cold) {
        Ok(fit) if fit.converged => Some(fit),
        _ => None,
    }
}

fn finish_run(results: Vec<Option<FitResult>>, b: usize) -> Result<BootstrapRun> {
    let fits: Vec<FitResult> = results.into_iter().flatten().collect();
    let failed = b - fits.len();
    if failed as f64 > MAX_FAIL_FRACTION * b as f64 {
        return Err(Error::BootstrapFailed { failed, total: b });
    }
    Ok(BootstrapRun {
        fits,
        n_failed: failed,
        n_requested: b,
    })
}

/// Indices of the histories in each nonempty first-capture stratum, in
/// occasion order.
fn first_capture_strata(data: &HistoryData) -> Vec<Vec<usize>> {
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); data.t];
    for (i, h) in data.histories.iter().enumerate() {
        strata[h.first_capture() - 1].push(i);
    }
    strata.retain(|s| !s.is_empty());
    strata
}

/// With-replacement resample preserving every stratum's size.
fn resample_stratified(
    data: &HistoryData,
    strata: &[Vec<usize>],
    rng: &mut impl Rng,
) -> HistoryData {
    let mut histories = Vec::with_capacity(data.histories.len());
    for stratum in strata {
        for _ in 0..stratum.len() {
            let pick = stratum[rng.random_range(0..stratum.len())];
            histories.push(data.histories[pick].clone());
        }
    }
    HistoryData::with_t(data.t, histories)
        .expect("resampled histories share the original occasion count")
}

/// Redraws each release cohort from the fitted cell probabilities.
///
/// Cells are sampled as sequential binomials over the live-recapture and
/// dead-recovery cells in occasion order; the never-seen-again cell takes
/// the remainder, so row sums reproduce the releases exactly.
fn resample_arrays(
    data: &ArrayData,
    q_m: &Array2<f64>,
    q_d: &Array2<f64>,
    rng: &mut impl Rng,
) -> Result<ArrayData> {
    let t = data.arrays.t;
    let mut m_counts = Array2::zeros((t - 1, t));
    let mut d_counts = Array2::zeros((t - 1, t - 1));
    for r in 1..t {
        let mut left = data.arrays.releases[r - 1].round() as u64;
        if left == 0 {
            continue;
        }
        let mut rest = 1.0_f64;
        for s in r + 1..=t {
            let m_draw = binomial_step(rng, &mut left, &mut rest, q_m[[r - 1, s - 2]])?;
            m_counts[[r - 1, s - 2]] = m_draw as f64;
            let d_draw = binomial_step(rng, &mut left, &mut rest, q_d[[r - 1, s - 2]])?;
            d_counts[[r - 1, s - 2]] = d_draw as f64;
        }
        m_counts[[r - 1, t - 1]] = left as f64;
    }
    let arrays = MDArrays::new(t, m_counts, d_counts)?;
    ArrayData::new(arrays, data.covariate.clone())
}

/// One step of sequential multinomial sampling: draws the count for a cell
/// with probability `q` out of the unallocated probability `rest`.
fn binomial_step(rng: &mut impl Rng, left: &mut u64, rest: &mut f64, q: f64) -> Result<u64> {
    if *left == 0 || *rest <= 0.0 {
        return Ok(0);
    }
    let frac = (q / *rest).clamp(0.0, 1.0);
    let dist = Binomial::new(*left, frac).map_err(|e| Error::SimulationFailed {
        reason: format!("multinomial cell draw: {e}"),
    })?;
    let draw = dist.sample(rng);
    *left -= draw;
    *rest -= q;
    Ok(draw)
}

/// Replicate curves of one smooth over a grid, mapped through `scale`.
fn replicate_curves(
    spec: &ModelSpec,
    run: &BootstrapRun,
    smooth_index: usize,
    w_grid: &[f64],
    scale: impl Fn(f64) -> f64,
) -> Result<Vec<Vec<f64>>> {
    run.fits
        .iter()
        .map(|fit| {
            let link = smooth_curve_link(spec, &fit.theta, smooth_index, w_grid)?;
            Ok(link.into_iter().map(&scale).collect())
        })
        .collect()
}

/// Fraction of replicate curves lying entirely inside the band with
/// link-scale margins scaled by `c`.
fn fraction_inside(
    curves: &[Vec<f64>],
    est_link: &[f64],
    lo_margin: &[f64],
    hi_margin: &[f64],
    c: f64,
) -> f64 {
    let inside = curves
        .iter()
        .filter(|curve| {
            curve.iter().enumerate().all(|(j, &v)| {
                v >= est_link[j] - c * lo_margin[j] - INSIDE_EPS
                    && v <= est_link[j] + c * hi_margin[j] + INSIDE_EPS
            })
        })
        .count();
    inside as f64 / curves.len() as f64
}
