//! Smoothing-parameter selection.
//!
//! Four routes to a smoothing vector `h`:
//!
//! - [`loo_cv_array`]: leave-one-out over the release rows of an m/d-array —
//!   each row in turn is the validation sample, the model is calibrated on
//!   the remaining rows, and the row's unpenalized log-likelihood is the
//!   score;
//! - [`kfold_cv_histories`]: `k` seeded random calibration/validation splits
//!   of the encounter histories, stratified by first-capture occasion, scored
//!   by per-history validation log-likelihood;
//! - [`staged_cv`]: one-dimensional k-fold searches per smooth with every
//!   other block frozen at current estimates, started from a fully parametric
//!   baseline and repeated for a fixed number of passes — the practical route
//!   when a full Cartesian grid is infeasible;
//! - [`aic_grid`]: fit at every grid point and pick the smallest
//!   `AIC_p = -2 loglik + 2 edf`.
//!
//! Ties are broken toward larger (smoother) `h`. Candidates lose their
//! eligibility when more than 20% of their fold fits fail to converge.

use crate::data::{ArrayData, Dataset, HistoryData};
use crate::error::{Error, Result};
use crate::fit::{maximize, FitOptions, Objective};
use crate::model::{ModelSpec, Regime};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Fraction of a candidate's folds that may go missing (fail to converge)
/// before the candidate is disqualified.
const MAX_MISSING_FRAC: f64 = 0.2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvOptions {
    /// Restarts per fold fit (fold fits warm-start from the neighbouring
    /// grid point, so one start is usually enough).
    pub restarts: usize,
    pub tol: f64,
    pub max_iters: usize,
    /// Seed for jittered restarts inside fold fits (fold partitions take
    /// their own seed parameter where applicable).
    pub seed: u64,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            restarts: 1,
            tol: 1e-6,
            max_iters: 500,
            seed: 0,
        }
    }
}

/// One (candidate, fold) outcome. `score` is `None` when the fold's fit
/// failed to converge or errored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvRecord {
    pub h: Vec<f64>,
    pub fold: usize,
    pub score: Option<f64>,
    pub converged: bool,
}

/// Per-candidate summary: mean over non-missing folds, or `None` when the
/// candidate was disqualified.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateAverage {
    pub h: Vec<f64>,
    pub mean_score: Option<f64>,
    pub n_missing: usize,
    pub n_folds: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvTable {
    pub records: Vec<CvRecord>,
    pub averages: Vec<CandidateAverage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AicRecord {
    pub h: Vec<f64>,
    pub loglik: f64,
    pub edf: Option<f64>,
    pub aic_p: Option<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AicTable {
    pub records: Vec<AicRecord>,
}

/// The per-smooth default grid `{2^-2, 2^0, 2^2, ..., 2^10}`.
pub fn default_h_grid() -> Vec<f64> {
    (-1..=5).map(|e| 2f64.powi(2 * e)).collect()
}

/// The default grid extended up to `2^16` for near-parametric smooths.
pub fn extended_h_grid() -> Vec<f64> {
    (-1..=8).map(|e| 2f64.powi(2 * e)).collect()
}

/// Cartesian product of per-smooth axes in snake order: consecutive
/// candidates differ in only one component, so warm starts stay close.
pub fn cartesian_grid(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = vec![vec![]];
    for axis in axes {
        let mut next = Vec::with_capacity(out.len() * axis.len());
        for (i, prefix) in out.iter().enumerate() {
            let forward = i % 2 == 0;
            let values: Vec<f64> = if forward {
                axis.clone()
            } else {
                axis.iter().rev().copied().collect()
            };
            for v in values {
                let mut cand = prefix.clone();
                cand.push(v);
                next.push(cand);
            }
        }
        out = next;
    }
    out
}

/// `a` strictly better than `b` for maximization; ties prefer the
/// lexicographically larger (smoother) h.
fn better_max(score_a: f64, h_a: &[f64], score_b: f64, h_b: &[f64]) -> bool {
    match score_a.partial_cmp(&score_b) {
        Some(std::cmp::Ordering::Greater) => true,
        Some(std::cmp::Ordering::Less) => false,
        _ => h_a > h_b,
    }
}

fn validate_grid(spec: &ModelSpec, h_grid: &[Vec<f64>]) -> Result<()> {
    if h_grid.is_empty() {
        return Err(Error::InvalidArgument {
            what: "smoothing grid".into(),
            reason: "no candidate h vectors supplied".into(),
        });
    }
    for cand in h_grid {
        if cand.len() != spec.n_smooths() {
            return Err(Error::DimensionMismatch {
                what: "candidate h vector".into(),
                expected: spec.n_smooths(),
                got: cand.len(),
            });
        }
        if cand.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
            return Err(Error::InvalidArgument {
                what: "candidate h vector".into(),
                reason: format!("must be finite and non-negative: {cand:?}"),
            });
        }
    }
    Ok(())
}

/// Shared fold runner: for every candidate (sequentially, warm-starting each
/// fold from its fit under the previous candidate) fit all folds in parallel
/// and score them, then pick the best average.
fn run_cv(
    spec: &ModelSpec,
    folds: &[(Dataset, Dataset, f64)], // (calibration, validation, score divisor)
    h_grid: &[Vec<f64>],
    opts: &CvOptions,
    free: Option<&[bool]>,
    base_init: Option<&[f64]>,
) -> Result<(Vec<f64>, CvTable)> {
    validate_grid(spec, h_grid)?;
    let mut records = Vec::with_capacity(h_grid.len() * folds.len());
    let mut averages = Vec::with_capacity(h_grid.len());
    let mut warm: Vec<Option<Vec<f64>>> = vec![None; folds.len()];
    let mut best: Option<(f64, Vec<f64>)> = None;

    for cand in h_grid {
        let outcomes: Vec<(Option<f64>, bool, Option<Vec<f64>>)> = folds
            .par_iter()
            .enumerate()
            .map(|(fi, (calib, valid, divisor))| {
                let fit_opts = FitOptions {
                    restarts: opts.restarts,
                    tol: opts.tol,
                    max_iters: opts.max_iters,
                    seed: opts.seed,
                    init: warm[fi].clone().or_else(|| base_init.map(|v| v.to_vec())),
                    free: free.map(|m| m.to_vec()),
                    compute_edf: false,
                };
                match maximize(spec, calib, cand, &fit_opts) {
                    Ok(fit) => {
                        let score = if fit.converged {
                            Objective::new(spec, valid, cand)
                                .and_then(|obj| obj.loglik(&fit.theta))
                                .ok()
                                .map(|ll| ll / divisor)
                        } else {
                            None
                        };
                        (score, fit.converged, Some(fit.theta))
                    }
                    Err(_) => (None, false, None),
                }
            })
            .collect();

        let mut sum = 0.0;
        let mut n_ok = 0usize;
        for (fi, (score, converged, theta)) in outcomes.into_iter().enumerate() {
            if let Some(th) = theta {
                warm[fi] = Some(th);
            }
            if let Some(s) = score {
                sum += s;
                n_ok += 1;
            }
            records.push(CvRecord {
                h: cand.clone(),
                fold: fi,
                score,
                converged,
            });
        }
        let n_missing = folds.len() - n_ok;
        let qualified = (n_missing as f64) <= MAX_MISSING_FRAC * folds.len() as f64;
        let mean = (qualified && n_ok > 0).then(|| sum / n_ok as f64);
        if let Some(m) = mean {
            let is_better = match &best {
                None => true,
                Some((bs, bh)) => better_max(m, cand, *bs, bh),
            };
            if is_better {
                best = Some((m, cand.clone()));
            }
        }
        averages.push(CandidateAverage {
            h: cand.clone(),
            mean_score: mean,
            n_missing,
            n_folds: folds.len(),
        });
    }

    match best {
        Some((_, h)) => Ok((h, CvTable { records, averages })),
        None => Err(Error::SelectionFailed {
            reason: "every candidate was disqualified (over 20% of fold fits failed to converge)"
                .into(),
        }),
    }
}

/// Leave-one-out cross-validation over the release rows of an m/d-array:
/// each row is withheld in turn, the model is fitted to the remaining rows,
/// and the withheld row's unpenalized log-likelihood is the fold score.
pub fn loo_cv_array(
    spec: &ModelSpec,
    data: &ArrayData,
    h_grid: &[Vec<f64>],
    opts: &CvOptions,
) -> Result<(Vec<f64>, CvTable)> {
    if spec.regime != Regime::Array {
        return Err(Error::RegimeMismatch {
            reason: "leave-one-out row cross-validation applies to the array regime".into(),
        });
    }
    let t = data.arrays.t;
    let mut folds = Vec::with_capacity(t - 1);
    for r in 0..t - 1 {
        let mut calib_m = data.arrays.m_counts.clone();
        let mut calib_d = data.arrays.d_counts.clone();
        calib_m.row_mut(r).fill(0.0);
        calib_d.row_mut(r).fill(0.0);
        let mut valid_m = data.arrays.m_counts.clone();
        let mut valid_d = data.arrays.d_counts.clone();
        for rr in 0..t - 1 {
            if rr != r {
                valid_m.row_mut(rr).fill(0.0);
                valid_d.row_mut(rr).fill(0.0);
            }
        }
        let calib = ArrayData::new(
            crate::data::MDArrays::new(t, calib_m, calib_d)?,
            data.covariate.clone(),
        )?;
        let valid = ArrayData::new(
            crate::data::MDArrays::new(t, valid_m, valid_d)?,
            data.covariate.clone(),
        )?;
        folds.push((Dataset::Arrays(calib), Dataset::Arrays(valid), 1.0));
    }
    run_cv(spec, &folds, h_grid, opts, None, None)
}

/// `k` seeded random calibration/validation partitions of the histories,
/// stratified by first-capture occasion. Fold scores are the validation
/// sample's unpenalized log-likelihood divided by its size.
pub fn kfold_cv_histories(
    spec: &ModelSpec,
    data: &HistoryData,
    h_grid: &[Vec<f64>],
    k: usize,
    calib_frac: f64,
    seed: u64,
    opts: &CvOptions,
) -> Result<(Vec<f64>, CvTable)> {
    let folds = kfold_datasets(spec, data, k, calib_frac, seed)?;
    run_cv(spec, &folds, h_grid, opts, None, None)
}

/// Builds the `k` (calibration, validation, divisor) datasets for
/// [`kfold_cv_histories`].
fn kfold_datasets(
    spec: &ModelSpec,
    data: &HistoryData,
    k: usize,
    calib_frac: f64,
    seed: u64,
) -> Result<Vec<(Dataset, Dataset, f64)>> {
    if spec.regime == Regime::Array {
        return Err(Error::RegimeMismatch {
            reason: "k-fold history cross-validation needs history data (use loo_cv_array)".into(),
        });
    }
    if k < 2 {
        return Err(Error::InvalidArgument {
            what: "k".into(),
            reason: "need at least 2 folds".into(),
        });
    }
    if !(calib_frac > 0.0 && calib_frac < 1.0) {
        return Err(Error::InvalidArgument {
            what: "calib_frac".into(),
            reason: format!("must lie strictly between 0 and 1, got {calib_frac}"),
        });
    }
    let partitions = stratified_partitions(data, k, calib_frac, seed);
    let mut folds = Vec::with_capacity(k);
    for (calib_idx, valid_idx) in &partitions {
        debug_assert!(calib_idx.iter().all(|i| !valid_idx.contains(i)));
        debug_assert_eq!(calib_idx.len() + valid_idx.len(), data.len());
        if calib_idx.is_empty() || valid_idx.is_empty() {
            return Err(Error::SelectionFailed {
                reason: "a cross-validation partition left calibration or validation empty".into(),
            });
        }
        let calib: Vec<_> = calib_idx.iter().map(|&i| data.histories[i].clone()).collect();
        let valid: Vec<_> = valid_idx.iter().map(|&i| data.histories[i].clone()).collect();
        let divisor = valid.len() as f64;
        folds.push((
            Dataset::Histories(HistoryData::with_t(data.t, calib)?),
            Dataset::Histories(HistoryData::with_t(data.t, valid)?),
            divisor,
        ));
    }
    Ok(folds)
}

/// `k` seeded (calibration, validation) index partitions stratified by
/// first-capture occasion, so no fold loses an entire release cohort.
pub(crate) fn stratified_partitions(
    data: &HistoryData,
    k: usize,
    calib_frac: f64,
    seed: u64,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    // Group history indices by first-capture occasion, in dataset order.
    let mut strata: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, hist) in data.histories.iter().enumerate() {
        let c = hist.first_capture();
        match strata.iter_mut().find(|(occ, _)| *occ == c) {
            Some((_, v)) => v.push(i),
            None => strata.push((c, vec![i])),
        }
    }
    strata.sort_by_key(|(occ, _)| *occ);

    (0..k)
        .map(|fold| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(fold as u64);
            let mut calib = Vec::new();
            let mut valid = Vec::new();
            for (_, members) in &strata {
                let mut shuffled = members.clone();
                shuffled.shuffle(&mut rng);
                let n_cal = (calib_frac * shuffled.len() as f64).round() as usize;
                let n_cal = n_cal.min(shuffled.len());
                calib.extend_from_slice(&shuffled[..n_cal]);
                valid.extend_from_slice(&shuffled[n_cal..]);
            }
            calib.sort_unstable();
            valid.sort_unstable();
            (calib, valid)
        })
        .collect()
}

/// Per-smooth staged cross-validation: starting from a fully parametric
/// baseline fit, each smooth in turn gets a one-dimensional k-fold search
/// with every other block frozen at the current estimates; after each full
/// pass the semiparametric model is refitted at the selected vector. Returns
/// the final smoothing vector and the accumulated score table (each record
/// carries the full candidate vector of its one-dimensional search).
#[allow(clippy::too_many_arguments)]
pub fn staged_cv(
    spec: &ModelSpec,
    data: &HistoryData,
    h_grid_1d: &[f64],
    stages: usize,
    k: usize,
    calib_frac: f64,
    seed: u64,
    opts: &CvOptions,
) -> Result<(Vec<f64>, CvTable)> {
    let n_smooths = spec.n_smooths();
    if n_smooths == 0 {
        return Err(Error::InvalidSpec {
            reason: "staged cross-validation needs at least one smooth".into(),
        });
    }
    if h_grid_1d.is_empty() || h_grid_1d.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
        return Err(Error::InvalidArgument {
            what: "one-dimensional smoothing grid".into(),
            reason: "need a non-empty grid of finite non-negative values".into(),
        });
    }
    if stages == 0 {
        return Err(Error::InvalidArgument {
            what: "stages".into(),
            reason: "need at least one pass".into(),
        });
    }
    let dataset = Dataset::Histories(data.clone());

    // Stage 0: fully parametric baseline, mapped into the semiparametric
    // packed space (spline coefficients set to the affine function through
    // the Greville points).
    let parametric = spec.parametric_analog();
    let baseline = maximize(&parametric, &dataset, &[], &full_fit_options(opts)).map_err(|e| {
        Error::SelectionFailed {
            reason: format!("staged cross-validation unavailable: parametric baseline fit failed ({e})"),
        }
    })?;
    if !baseline.converged {
        return Err(Error::SelectionFailed {
            reason: "staged cross-validation unavailable: parametric baseline fit did not converge"
                .into(),
        });
    }
    let mut theta = embed_parametric(spec, &parametric, &baseline.theta)?;

    // Penalties on frozen blocks are constants during a per-smooth search,
    // so the placeholder values of the other components never matter; start
    // from the smoothest end of the grid.
    let top = h_grid_1d.iter().cloned().fold(f64::MIN, f64::max);
    let mut h = vec![top; n_smooths];
    let folds = kfold_datasets(spec, data, k, calib_frac, seed)?;
    let spline_blocks = spec.spline_blocks();
    let layout = spec.layout();
    let mut table = CvTable {
        records: Vec::new(),
        averages: Vec::new(),
    };

    for _pass in 0..stages {
        for j in 0..n_smooths {
            let mut free = vec![false; spec.dim()];
            for i in layout[spline_blocks[j]].clone() {
                free[i] = true;
            }
            let candidates: Vec<Vec<f64>> = h_grid_1d
                .iter()
                .map(|&hj| {
                    let mut cand = h.clone();
                    cand[j] = hj;
                    cand
                })
                .collect();
            let (best, sub) = run_cv(spec, &folds, &candidates, opts, Some(&free), Some(&theta))?;
            h = best;
            table.records.extend(sub.records);
            table.averages.extend(sub.averages);
        }
        // Full semiparametric refit at the selected vector.
        let refit = maximize(
            spec,
            &dataset,
            &h,
            &FitOptions {
                init: Some(theta.clone()),
                ..full_fit_options(opts)
            },
        )?;
        theta = refit.theta;
    }
    Ok((h, table))
}

fn full_fit_options(opts: &CvOptions) -> FitOptions {
    FitOptions {
        restarts: opts.restarts.max(2),
        tol: opts.tol,
        max_iters: opts.max_iters,
        seed: opts.seed,
        init: None,
        free: None,
        compute_edf: false,
    }
}

/// Maps a fitted parametric-analog theta into the semiparametric packed
/// space: parametric blocks copy over; each spline block takes the affine
/// coefficients `gamma_k = a + b * greville_k` reproducing the fitted
/// logistic-linear predictor exactly.
fn embed_parametric(spec: &ModelSpec, parametric: &ModelSpec, par_theta: &[f64]) -> Result<Vec<f64>> {
    let layout = spec.layout();
    let par_layout = parametric.layout();
    let mut theta = vec![0.0; spec.dim()];
    let mut smooth_idx = 0usize;
    for (b, block) in spec.blocks.iter().enumerate() {
        let dst = layout[b].clone();
        let src = par_layout[b].clone();
        if block.form == crate::model::Form::SplineInCovariate {
            let basis = &spec.smooth_bases[smooth_idx];
            smooth_idx += 1;
            let (a, slope) = (par_theta[src.start], par_theta[src.start + 1]);
            for (i, g) in basis.greville().into_iter().enumerate() {
                theta[dst.start + i] = a + slope * g;
            }
        } else {
            theta[dst.clone()].copy_from_slice(&par_theta[src]);
        }
    }
    Ok(theta)
}

/// Grid search on `AIC_p`: fits at every candidate, computes the effective
/// degrees of freedom, and returns the argmin (ties toward larger h).
/// Candidates with singular information are marked unavailable; if all are,
/// the error instructs falling back to cross-validation.
pub fn aic_grid(
    spec: &ModelSpec,
    data: &Dataset,
    h_grid: &[Vec<f64>],
    opts: &CvOptions,
) -> Result<(Vec<f64>, AicTable)> {
    validate_grid(spec, h_grid)?;
    let mut records = Vec::with_capacity(h_grid.len());
    let mut warm: Option<Vec<f64>> = None;
    let mut best: Option<(f64, Vec<f64>)> = None;
    for cand in h_grid {
        let fit_opts = FitOptions {
            restarts: opts.restarts,
            tol: opts.tol,
            max_iters: opts.max_iters,
            seed: opts.seed,
            init: warm.clone(),
            free: None,
            compute_edf: true,
        };
        match maximize(spec, data, cand, &fit_opts) {
            Ok(fit) => {
                warm = Some(fit.theta.clone());
                let usable = fit.converged && fit.aic_p.is_some();
                if usable {
                    let aic = fit.aic_p.expect("usable implies aic");
                    let is_better = match &best {
                        None => true,
                        Some((ba, bh)) => better_max(-aic, cand, -*ba, bh),
                    };
                    if is_better {
                        best = Some((aic, cand.clone()));
                    }
                }
                records.push(AicRecord {
                    h: cand.clone(),
                    loglik: fit.loglik,
                    edf: fit.edf,
                    aic_p: fit.aic_p,
                    converged: fit.converged,
                });
            }
            Err(_) => records.push(AicRecord {
                h: cand.clone(),
                loglik: f64::NEG_INFINITY,
                edf: None,
                aic_p: None,
                converged: false,
            }),
        }
    }
    match best {
        Some((_, h)) => Ok((h, AicTable { records })),
        None => Err(Error::SelectionFailed {
            reason: "AIC_p unavailable at every grid point (singular information or failed fits); \
                     fall back to cross-validation selection"
                .into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EncounterHistory, MDArrays};
    use crate::lik_array::cell_probs;
    use crate::model::{inv_logit, AgeClassMap, Form, ParamBlock, Role, SCHEMA_VERSION};
    use crate::SplineBasis;
    use approx::assert_relative_eq;
    use rand_distr::{Binomial, Distribution};

    fn spline_array_spec(t: usize, k: usize) -> ModelSpec {
        ModelSpec {
            schema_version: SCHEMA_VERSION,
            t_occasions: t,
            regime: Regime::Array,
            age_classes: AgeClassMap::single(),
            blocks: vec![
                ParamBlock::new(Role::Survival, Form::SplineInCovariate, None),
                ParamBlock::new(Role::Recapture, Form::Constant, None),
                ParamBlock::new(Role::Recovery, Form::Constant, None),
            ],
            smooth_bases: vec![SplineBasis::new(k, 0.0, 1.0).unwrap()],
            smooth_diff_order: 2,
            hmm_bins: None,
            hmm_range: None,
        }
    }

    fn covariate_series(t: usize) -> Vec<f64> {
        (0..t - 1).map(|i| (i as f64 + 0.5) / (t - 1) as f64).collect()
    }

    fn expected_arrays_curve(
        t: usize,
        phi_at: impl Fn(f64) -> f64,
        w: &[f64],
        p: f64,
        lam: f64,
        releases: f64,
    ) -> MDArrays {
        let phi_v: Vec<f64> = w.iter().map(|&wi| phi_at(wi)).collect();
        let p_v = vec![p; t - 1];
        let lam_v = vec![lam; t - 1];
        let (q_m, q_d) = cell_probs(&phi_v, &p_v, &lam_v).unwrap();
        MDArrays::new(t, &q_m * releases, &q_d * releases).unwrap()
    }

    /// Multinomial draws row by row via sequential binomials.
    fn sample_arrays(
        t: usize,
        phi_at: impl Fn(f64) -> f64,
        w: &[f64],
        p: f64,
        lam: f64,
        releases: u64,
        rng: &mut ChaCha8Rng,
    ) -> MDArrays {
        let phi_v: Vec<f64> = w.iter().map(|&wi| phi_at(wi)).collect();
        let p_v = vec![p; t - 1];
        let lam_v = vec![lam; t - 1];
        let (q_m, q_d) = cell_probs(&phi_v, &p_v, &lam_v).unwrap();
        let mut m = ndarray::Array2::zeros((t - 1, t));
        let mut d = ndarray::Array2::zeros((t - 1, t - 1));
        for r in 0..t - 1 {
            // Collect this row's cell probabilities: m cells (excluding the
            // never column), then d cells; the remainder is "never".
            let mut probs: Vec<(usize, bool, f64)> = Vec::new();
            for s in 0..t - 1 {
                probs.push((s, true, q_m[(r, s)]));
                probs.push((s, false, q_d[(r, s)]));
            }
            let mut remaining = releases;
            let mut rest = 1.0_f64; // unallocated probability, including "never"
            for (s, is_m, q) in probs {
                if remaining == 0 || q <= 0.0 {
                    rest -= q;
                    continue;
                }
                let frac = (q / rest).min(1.0);
                let draw = Binomial::new(remaining, frac).unwrap().sample(rng);
                if is_m {
                    m[(r, s)] = draw as f64;
                } else {
                    d[(r, s)] = draw as f64;
                }
                remaining -= draw;
                rest -= q;
            }
            // Survivors never seen again land in the "never" column.
            m[(r, t - 1)] = remaining as f64;
        }
        MDArrays::new(t, m, d).unwrap()
    }

    #[test]
    fn snake_grid_changes_one_component_at_a_time() {
        let grid = cartesian_grid(&[vec![1.0, 2.0], vec![10.0, 20.0, 30.0]]);
        assert_eq!(grid.len(), 6);
        assert_eq!(grid[0], vec![1.0, 10.0]);
        assert_eq!(grid[2], vec![1.0, 30.0]);
        assert_eq!(grid[3], vec![2.0, 30.0]);
        assert_eq!(grid[5], vec![2.0, 10.0]);
        for pair in grid.windows(2) {
            let diff = pair[0]
                .iter()
                .zip(&pair[1])
                .filter(|(a, b)| a != b)
                .count();
            assert_eq!(diff, 1, "{pair:?}");
        }
        // All six combinations present.
        let mut sorted = grid.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted.dedup();
        assert_eq!(sorted.len(), 6);
    }

    #[test]
    fn default_grids_match_documented_ranges() {
        let g = default_h_grid();
        assert_eq!(g.len(), 7);
        assert_relative_eq!(g[0], 0.25);
        assert_relative_eq!(g[6], 1024.0);
        let e = extended_h_grid();
        assert_eq!(e.len(), 10);
        assert_relative_eq!(e[9], 65536.0);
        assert!(g.iter().all(|v| e.contains(v)));
    }

    #[test]
    fn singleton_grid_is_returned_by_all_selectors() {
        let t = 6;
        let spec = spline_array_spec(t, 5);
        let w = covariate_series(t);
        let arrays = expected_arrays_curve(t, |wi| inv_logit(0.2 + 0.9 * wi), &w, 0.5, 0.3, 400.0);
        let data = ArrayData::new(arrays, Some(w)).unwrap();
        let grid = vec![vec![4.0]];
        let opts = CvOptions::default();
        let (best, table) = loo_cv_array(&spec, &data, &grid, &opts).unwrap();
        assert_eq!(best, vec![4.0]);
        assert_eq!(table.records.len(), t - 1);
        assert_eq!(table.averages.len(), 1);
        let dataset = Dataset::Arrays(data);
        let (best_aic, aic_table) = aic_grid(&spec, &dataset, &grid, &opts).unwrap();
        assert_eq!(best_aic, vec![4.0]);
        assert_eq!(aic_table.records.len(), 1);
    }

    #[test]
    fn loo_prefers_large_h_under_logistic_linear_truth() {
        // Noisy draws from an affine-link truth: the largest grid value
        // should win in at least 60% of replications.
        let t = 7;
        let spec = spline_array_spec(t, 5);
        let w = covariate_series(t);
        let grid = vec![vec![0.25], vec![1024.0]];
        let opts = CvOptions::default();
        let mut wins = 0;
        let reps = 20;
        for rep in 0..reps {
            let mut rng = ChaCha8Rng::seed_from_u64(900 + rep);
            let arrays = sample_arrays(
                t,
                |wi| inv_logit(0.3 + 1.0 * wi),
                &w,
                0.5,
                0.3,
                150,
                &mut rng,
            );
            let data = ArrayData::new(arrays, Some(w.clone())).unwrap();
            if let Ok((best, _)) = loo_cv_array(&spec, &data, &grid, &opts) {
                if best == vec![1024.0] {
                    wins += 1;
                }
            }
        }
        assert!(wins * 10 >= reps * 6, "large h won only {wins}/{reps}");
    }

    #[test]
    fn aic_prefers_parsimony_on_expected_counts() {
        // Expected counts from an affine-link truth: every h fits equally
        // well, so the smaller effective df at large h must win.
        let t = 8;
        let spec = spline_array_spec(t, 5);
        let w = covariate_series(t);
        let arrays = expected_arrays_curve(t, |wi| inv_logit(0.4 + 0.8 * wi), &w, 0.5, 0.3, 500.0);
        let data = Dataset::Arrays(ArrayData::new(arrays, Some(w)).unwrap());
        let grid = vec![vec![0.25], vec![1024.0]];
        let (best, table) = aic_grid(&spec, &data, &grid, &CvOptions::default()).unwrap();
        assert_eq!(best, vec![1024.0]);
        assert_eq!(table.records.len(), 2);
        let aic_small = table.records[0].aic_p.unwrap();
        let aic_large = table.records[1].aic_p.unwrap();
        assert!(aic_large < aic_small);
        assert!(table.records[1].edf.unwrap() < table.records[0].edf.unwrap());
    }

    #[test]
    fn nested_grid_never_scores_worse() {
        let t = 6;
        let spec = spline_array_spec(t, 5);
        let w = covariate_series(t);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let arrays = sample_arrays(t, |wi| inv_logit(0.5 - 0.6 * wi), &w, 0.6, 0.3, 200, &mut rng);
        let data = ArrayData::new(arrays, Some(w)).unwrap();
        let opts = CvOptions::default();
        let small = vec![vec![1.0]];
        let large = vec![vec![1.0], vec![64.0]];
        let (_, table_small) = loo_cv_array(&spec, &data, &small, &opts).unwrap();
        let (_, table_large) = loo_cv_array(&spec, &data, &large, &opts).unwrap();
        let best_of = |t: &CvTable| {
            t.averages
                .iter()
                .filter_map(|a| a.mean_score)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        assert!(best_of(&table_large) >= best_of(&table_small) - 1e-12);
    }

    #[test]
    fn stratified_partitions_are_deterministic_and_disjoint() {
        let t = 6;
        let mut histories = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..60 {
            let c = rng.random_range(0..t - 1);
            let mut codes = vec![0u8; t];
            codes[c] = 1;
            for code in codes.iter_mut().skip(c + 1) {
                if rng.random::<f64>() < 0.4 {
                    *code = 1;
                }
            }
            histories.push(EncounterHistory::from_codes(format!("h{i}"), codes).unwrap());
        }
        let data = HistoryData::new(histories).unwrap();
        let parts_a = stratified_partitions(&data, 5, 0.9, 11);
        let parts_b = stratified_partitions(&data, 5, 0.9, 11);
        assert_eq!(parts_a, parts_b);
        let parts_c = stratified_partitions(&data, 5, 0.9, 12);
        assert_ne!(parts_a, parts_c);
        for (calib, valid) in &parts_a {
            assert_eq!(calib.len() + valid.len(), data.len());
            let mut all: Vec<usize> = calib.iter().chain(valid.iter()).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..data.len()).collect::<Vec<_>>());
            // About 90% calibration, give or take stratification rounding.
            assert!(calib.len() >= 48 && calib.len() <= 60, "{}", calib.len());
        }
        // Stratification: every first-capture occasion present in the data
        // keeps at least one member in each calibration sample.
        for (calib, _) in &parts_a {
            for occ in 1..t {
                let in_data = data
                    .histories
                    .iter()
                    .filter(|h| h.first_capture() == occ)
                    .count();
                if in_data >= 2 {
                    let in_calib = calib
                        .iter()
                        .filter(|&&i| data.histories[i].first_capture() == occ)
                        .count();
                    assert!(in_calib >= 1, "occasion {occ} lost from calibration");
                }
            }
        }
    }

    #[test]
    fn disqualified_everywhere_is_an_error() {
        let t = 6;
        let spec = spline_array_spec(t, 5);
        let w = covariate_series(t);
        let arrays = expected_arrays_curve(t, |wi| inv_logit(0.2 + 0.9 * wi), &w, 0.5, 0.3, 300.0);
        let data = ArrayData::new(arrays, Some(w)).unwrap();
        // One iteration cannot converge from a cold start.
        let opts = CvOptions {
            max_iters: 1,
            ..CvOptions::default()
        };
        let grid = vec![vec![1.0]];
        match loo_cv_array(&spec, &data, &grid, &opts) {
            Err(Error::SelectionFailed { reason }) => {
                assert!(reason.contains("disqualified"), "{reason}");
            }
            other => panic!("expected selection failure, got {other:?}"),
        }
    }

    #[test]
    fn empty_grid_is_rejected() {
        let t = 6;
        let spec = spline_array_spec(t, 5);
        let w = covariate_series(t);
        let arrays = expected_arrays_curve(t, |_| inv_logit(0.2), &w, 0.5, 0.3, 300.0);
        let data = ArrayData::new(arrays, Some(w)).unwrap();
        assert!(matches!(
            loo_cv_array(&spec, &data, &[], &CvOptions::default()),
            Err(Error::InvalidArgument { .. })
        ));
    }

    /// Histories with a constant individual covariate: survival depends on
    /// it (and on age since first capture), recapture probability is shared,
    /// nobody is recovered dead.
    fn sample_histories(
        n: usize,
        t: usize,
        phi_at: impl Fn(usize, f64) -> f64, // (age at interval start, covariate)
        p: f64,
        seed: u64,
    ) -> HistoryData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut histories = Vec::with_capacity(n);
        for i in 0..n {
            let w = rng.random::<f64>();
            let c = rng.random_range(1..t); // 1-based first capture
            let mut codes = vec![0u8; t];
            codes[c - 1] = 1;
            let mut alive = true;
            for occ in c + 1..=t {
                let age = occ - 1 - c;
                if alive && rng.random::<f64>() >= phi_at(age, w) {
                    alive = false;
                }
                if alive && rng.random::<f64>() < p {
                    codes[occ - 1] = 1;
                }
            }
            let covs: Vec<Option<f64>> = codes
                .iter()
                .map(|&code| (code == 1).then_some(w))
                .collect();
            histories.push(EncounterHistory::new(format!("i{i}"), codes, covs).unwrap());
        }
        HistoryData::new(histories).unwrap()
    }

    /// One survival spline (single age class) plus constant recapture.
    fn history_spec(t: usize, k: usize) -> ModelSpec {
        ModelSpec {
            schema_version: SCHEMA_VERSION,
            t_occasions: t,
            regime: Regime::HistoryConstant,
            age_classes: AgeClassMap::single(),
            blocks: vec![
                ParamBlock::new(Role::Survival, Form::SplineInCovariate, None),
                ParamBlock::new(Role::Recapture, Form::Constant, None),
            ],
            smooth_bases: vec![SplineBasis::new(k, 0.0, 1.0).unwrap()],
            smooth_diff_order: 2,
            hmm_bins: None,
            hmm_range: None,
        }
    }

    /// Two age classes (first interval vs later), a survival spline per
    /// class, constant recapture: the legal multi-smooth shape.
    fn history_spec_two_classes(t: usize, k: usize) -> ModelSpec {
        ModelSpec {
            schema_version: SCHEMA_VERSION,
            t_occasions: t,
            regime: Regime::HistoryConstant,
            age_classes: AgeClassMap::new(vec![1]).unwrap(),
            blocks: vec![
                ParamBlock::new(Role::Survival, Form::SplineInCovariate, Some(1)),
                ParamBlock::new(Role::Survival, Form::SplineInCovariate, Some(2)),
                ParamBlock::new(Role::Recapture, Form::Constant, None),
            ],
            smooth_bases: vec![
                SplineBasis::new(k, 0.0, 1.0).unwrap(),
                SplineBasis::new(k, 0.0, 1.0).unwrap(),
            ],
            smooth_diff_order: 2,
            hmm_bins: None,
            hmm_range: None,
        }
    }

    #[test]
    fn kfold_is_deterministic_and_returns_grid_member() {
        let t = 6;
        let spec = history_spec(t, 5);
        let data = sample_histories(160, t, |_, w| inv_logit(0.6 + 0.9 * w), 0.55, 21);
        let grid = vec![vec![0.25], vec![1024.0]];
        let opts = CvOptions::default();
        let (best_a, table_a) = kfold_cv_histories(&spec, &data, &grid, 4, 0.9, 77, &opts).unwrap();
        let (best_b, table_b) = kfold_cv_histories(&spec, &data, &grid, 4, 0.9, 77, &opts).unwrap();
        assert_eq!(best_a, best_b);
        assert!(grid.contains(&best_a));
        assert_eq!(table_a.records.len(), 8);
        for (ra, rb) in table_a.records.iter().zip(&table_b.records) {
            assert_eq!(ra.score, rb.score);
        }
        // Scores are per-history averages: all finite and of sane magnitude.
        for rec in &table_a.records {
            let s = rec.score.expect("fold converged");
            assert!(s.is_finite() && s < 0.0 && s > -20.0, "score {s}");
        }
    }

    #[test]
    fn kfold_prefers_large_h_under_logistic_linear_truth() {
        // Noisy histories from an affine-link truth: the largest grid value
        // should win in at least 60% of replications.
        let t = 6;
        let spec = history_spec(t, 5);
        let grid = vec![vec![0.25], vec![1024.0]];
        let opts = CvOptions::default();
        let mut wins = 0;
        let reps = 10;
        for rep in 0..reps {
            let data = sample_histories(160, t, |_, w| inv_logit(0.6 + 0.9 * w), 0.55, 400 + rep);
            if let Ok((best, _)) = kfold_cv_histories(&spec, &data, &grid, 4, 0.9, rep, &opts) {
                if best == vec![1024.0] {
                    wins += 1;
                }
            }
        }
        assert!(wins * 10 >= reps * 6, "large h won only {wins}/{reps}");
    }

    #[test]
    fn staged_cv_selects_per_smooth_and_is_deterministic() {
        let t = 7;
        let spec = history_spec_two_classes(t, 4);
        let data = sample_histories(
            220,
            t,
            |age, w| {
                if age == 0 {
                    inv_logit(0.2 + 0.8 * w)
                } else {
                    inv_logit(1.0 + 0.5 * w)
                }
            },
            0.55,
            5,
        );
        let grid_1d = [1.0, 1024.0];
        let opts = CvOptions::default();
        let (h_a, table) = staged_cv(&spec, &data, &grid_1d, 2, 3, 0.9, 13, &opts).unwrap();
        let (h_b, _) = staged_cv(&spec, &data, &grid_1d, 2, 3, 0.9, 13, &opts).unwrap();
        assert_eq!(h_a, h_b);
        assert_eq!(h_a.len(), 2);
        for &hj in &h_a {
            assert!(grid_1d.contains(&hj), "h {hj} not from the grid");
        }
        // 2 stages x 2 smooths x 2 candidates x 3 folds.
        assert_eq!(table.records.len(), 2 * 2 * 2 * 3);
        assert!(table.records.iter().all(|r| r.h.len() == 2));
    }

    #[test]
    fn staged_cv_with_one_smooth_matches_plain_kfold() {
        let t = 6;
        let spec = history_spec(t, 5);
        let data = sample_histories(150, t, |_, w| inv_logit(0.4 + 1.0 * w), 0.5, 9);
        let grid_1d = [0.25, 1024.0];
        let opts = CvOptions::default();
        let (staged, _) = staged_cv(&spec, &data, &grid_1d, 1, 4, 0.9, 31, &opts).unwrap();
        let grid: Vec<Vec<f64>> = grid_1d.iter().map(|&h| vec![h]).collect();
        let (plain, _) = kfold_cv_histories(&spec, &data, &grid, 4, 0.9, 31, &opts).unwrap();
        assert_eq!(staged, plain);
    }

    #[test]
    fn embed_parametric_reproduces_affine_predictor() {
        let spec = spline_array_spec(6, 6);
        let parametric = spec.parametric_analog();
        // a = 0.3, b = -0.7 on the survival block; p, lambda arbitrary.
        let par_theta = vec![0.3, -0.7, 0.9, -0.4];
        let theta = embed_parametric(&spec, &parametric, &par_theta).unwrap();
        assert_eq!(theta.len(), spec.dim());
        assert_eq!(theta[6], 0.9);
        assert_eq!(theta[7], -0.4);
        let basis = &spec.smooth_bases[0];
        for i in 0..=20 {
            let w = i as f64 / 20.0;
            let b = basis.eval(w).unwrap();
            let link: f64 = b.iter().zip(&theta[..6]).map(|(bv, g)| bv * g).sum();
            assert_relative_eq!(link, 0.3 - 0.7 * w, epsilon = 1e-12);
        }
    }
}
