//! Exact likelihoods for fully observed data: multinomial m/d-array cells
//! and per-individual encounter-history products.
//!
//! Rate vectors follow one convention throughout: for `T` occasions all
//! three vectors have length `T-1`, with `phi[i]` the survival probability
//! over `(i+1, i+2]`, and `p[i]`, `lambda[i]` the recapture and recovery
//! probabilities at occasion `i+2`. Reported log-likelihoods omit the
//! multinomial coefficient (a data-only constant), so they are comparable
//! across parameter values on one dataset but not across datasets.

use crate::data::{ArrayData, EncounterHistory, HistoryData, MDArrays};
use crate::error::{Error, Result};
use crate::model::Resolved;
use crate::util::{check_probabilities, pairwise_sum};
use ndarray::Array2;
use rayon::prelude::*;

fn check_rates(t: usize, phi: &[f64], p: &[f64], lambda: &[f64]) -> Result<()> {
    for (name, v) in [("phi", phi), ("p", p), ("lambda", lambda)] {
        if v.len() != t - 1 {
            return Err(Error::DimensionMismatch {
                what: format!("{name} rate vector"),
                expected: t - 1,
                got: v.len(),
            });
        }
        check_probabilities(name, v)?;
    }
    Ok(())
}

/// Probability of never being observed again: `chi[i]` is the probability
/// that an individual alive at occasion `i+1` is neither recaptured nor
/// recovered at any later occasion. Computed by the backward recursion
/// `1 - chi_r = (1 - phi_r) lambda_{r+1} + phi_r (1 - (1 - p_{r+1}) chi_{r+1})`
/// starting from `chi_T = 1`.
pub fn chi(phi: &[f64], p: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
    let t = phi.len() + 1;
    if t < 2 {
        return Err(Error::InvalidArgument {
            what: "chi".into(),
            reason: "need at least one survival interval".into(),
        });
    }
    check_rates(t, phi, p, lambda)?;
    let mut out = vec![1.0; t];
    for i in (0..t - 1).rev() {
        let miss = (1.0 - phi[i]) * lambda[i] + phi[i] * (1.0 - (1.0 - p[i]) * out[i + 1]);
        out[i] = 1.0 - miss;
    }
    Ok(out)
}

/// Multinomial cell probabilities for each release row.
///
/// `q_m[r-1][s-2]` is the probability of being next seen alive at occasion
/// `s`, `q_m[r-1][T-1]` of never being seen again, and `q_d[r-1][s-2]` of
/// being recovered dead at occasion `s`; each row of `q_m` plus `q_d` sums
/// to one.
pub fn cell_probs(phi: &[f64], p: &[f64], lambda: &[f64]) -> Result<(Array2<f64>, Array2<f64>)> {
    let t = phi.len() + 1;
    check_rates(t, phi, p, lambda)?;
    let ch = chi(phi, p, lambda)?;
    let mut q_m = Array2::zeros((t - 1, t));
    let mut q_d = Array2::zeros((t - 1, t - 1));
    for r in 1..t {
        // prod carries the probability of surviving unseen from r to s-1.
        let mut prod = 1.0;
        for s in r + 1..=t {
            q_m[[r - 1, s - 2]] = prod * phi[s - 2] * p[s - 2];
            q_d[[r - 1, s - 2]] = prod * (1.0 - phi[s - 2]) * lambda[s - 2];
            prod *= phi[s - 2] * (1.0 - p[s - 2]);
        }
        q_m[[r - 1, t - 1]] = ch[r - 1];
    }
    Ok((q_m, q_d))
}

/// Adds `count * ln(prob)` with the usual conventions: zero counts contribute
/// nothing, and a positive count on a zero-probability cell yields `-inf`.
#[inline]
fn add_count_log(acc: &mut f64, count: f64, log_prob: f64) {
    if count > 0.0 {
        *acc += count * log_prob;
    }
}

/// Multinomial log-likelihood of m/d-array counts under shared rate vectors.
pub fn loglik_array(data: &MDArrays, phi: &[f64], p: &[f64], lambda: &[f64]) -> Result<f64> {
    check_rates(data.t, phi, p, lambda)?;
    let (q_m, q_d) = cell_probs(phi, p, lambda)?;
    let mut acc = 0.0;
    for r in 0..data.t - 1 {
        for s in 0..data.t {
            add_count_log(&mut acc, data.m_counts[[r, s]], q_m[[r, s]].ln());
        }
        for s in 0..data.t - 1 {
            add_count_log(&mut acc, data.d_counts[[r, s]], q_d[[r, s]].ln());
        }
    }
    Ok(acc)
}

/// Log-probability of one encounter history under per-individual rate
/// vectors, conditional on the first capture.
///
/// The history factorizes into survival and capture terms up to the last
/// occasion known alive `l`, then either a death-and-recovery factor
/// `(1 - phi_l) lambda_{l+1}` or the never-seen-again probability `chi_l`.
pub fn loglik_history(
    hist: &EncounterHistory,
    phi: &[f64],
    p: &[f64],
    lambda: &[f64],
) -> Result<f64> {
    let t = hist.t();
    check_rates(t, phi, p, lambda)?;
    let c = hist.first_capture();
    let l = hist.last_alive();
    let mut acc = 0.0;
    for r in c..l {
        acc += phi[r - 1].ln();
        let seen = hist.codes[r] == 1;
        acc += if seen { p[r - 1].ln() } else { (1.0 - p[r - 1]).ln() };
    }
    if hist.recovered_at().is_some() {
        // Recovery occurs at l + 1 under the recently-dead convention.
        acc += (1.0 - phi[l - 1]).ln() + lambda[l - 1].ln();
    } else if l < t {
        let mut chi_l = 1.0;
        for i in (l - 1..t - 1).rev() {
            let miss = (1.0 - phi[i]) * lambda[i] + phi[i] * (1.0 - (1.0 - p[i]) * chi_l);
            chi_l = 1.0 - miss;
        }
        acc += chi_l.ln();
    }
    Ok(acc)
}

/// Internal helper: model-driven rate vectors for one release/birth cohort.
///
/// Ages count from zero at `origin`, so occasion `t` uses the age class of
/// `t - origin`. Entries before `origin` are never read by the likelihood
/// and are filled with the first class's rates.
fn cohort_rates(
    resolved: &Resolved<'_>,
    theta: &[f64],
    origin: usize,
    covariate: Option<&[f64]>,
    w_const: Option<f64>,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let t_occ = resolved.spec.t_occasions;
    let classes = &resolved.spec.age_classes;
    let mut phi = vec![0.0; t_occ - 1];
    let mut p = vec![0.0; t_occ - 1];
    let mut lambda = vec![0.0; t_occ - 1];
    for t in 1..t_occ {
        let class = classes.class_of(t.saturating_sub(origin));
        let w = match covariate {
            Some(series) => Some(series[t - 1]),
            None => w_const,
        };
        phi[t - 1] = resolved.survival(theta, t, class, w)?;
    }
    for s in 2..=t_occ {
        let w = w_const;
        p[s - 2] = resolved.recapture(theta, s, w)?;
        lambda[s - 2] = resolved.recovery(theta, s, w)?;
    }
    Ok((phi, p, lambda))
}

/// Model-driven multinomial log-likelihood over m/d-arrays.
///
/// Each release row is treated as a cohort aged zero at its release
/// occasion, so age-structured models require rows to be birth cohorts:
/// with more than one age class, live-recapture cells must be empty
/// (recovery-only data). Age-structured data with recaptures carry the age
/// information per individual and belong in the history regimes.
pub fn loglik_array_model(resolved: &Resolved<'_>, theta: &[f64], data: &ArrayData) -> Result<f64> {
    let t = data.arrays.t;
    if t != resolved.spec.t_occasions {
        return Err(Error::DimensionMismatch {
            what: "array occasions".into(),
            expected: resolved.spec.t_occasions,
            got: t,
        });
    }
    let n_classes = resolved.spec.age_classes.n_classes();
    if n_classes > 1 {
        let recaptures: f64 = data.arrays.m_counts.slice(ndarray::s![.., ..t - 1]).sum();
        if recaptures > 0.0 {
            return Err(Error::InvalidData {
                reason: "age-structured array models need birth-cohort rows, so live-recapture \
                         cells must be empty; use encounter-history data instead"
                    .into(),
            });
        }
    }
    let cov = data.covariate.as_deref();
    let mut acc = 0.0;
    for r in 1..t {
        let row_active = data.arrays.releases[r - 1] > 0.0;
        if !row_active {
            continue;
        }
        let (phi, p, lambda) = cohort_rates(resolved, theta, r, cov, None)?;
        let mut log_prod = 0.0;
        for s in r + 1..=t {
            add_count_log(
                &mut acc,
                data.arrays.m_counts[[r - 1, s - 2]],
                log_prod + phi[s - 2].ln() + p[s - 2].ln(),
            );
            add_count_log(
                &mut acc,
                data.arrays.d_counts[[r - 1, s - 2]],
                log_prod + (1.0 - phi[s - 2]).ln() + lambda[s - 2].ln(),
            );
            log_prod += phi[s - 2].ln() + (1.0 - p[s - 2]).ln();
        }
        let never = data.arrays.m_counts[[r - 1, t - 1]];
        if never > 0.0 {
            let mut chi_r = 1.0;
            for i in (r - 1..t - 1).rev() {
                let miss = (1.0 - phi[i]) * lambda[i] + phi[i] * (1.0 - (1.0 - p[i]) * chi_r);
                chi_r = 1.0 - miss;
            }
            add_count_log(&mut acc, never, chi_r.ln());
        }
    }
    Ok(acc)
}

/// Model-driven multinomial cell probabilities for every release row.
///
/// Row `r` (1-based release occasion) of the returned pair holds the same
/// probabilities [`loglik_array_model`] scores that row against: the m-array
/// part is `(T-1) x T` with the never-seen-again column last, the d-array
/// part `(T-1) x (T-1)`, and each row of the two parts jointly sums to one.
/// Rows are treated as birth cohorts, consistent with the likelihood.
pub fn model_cell_probs(
    resolved: &Resolved<'_>,
    theta: &[f64],
    data: &ArrayData,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let t = data.arrays.t;
    if t != resolved.spec.t_occasions {
        return Err(Error::DimensionMismatch {
            what: "array occasions".into(),
            expected: resolved.spec.t_occasions,
            got: t,
        });
    }
    let cov = data.covariate.as_deref();
    let mut q_m = Array2::zeros((t - 1, t));
    let mut q_d = Array2::zeros((t - 1, t - 1));
    for r in 1..t {
        let (phi, p, lambda) = cohort_rates(resolved, theta, r, cov, None)?;
        let (row_m, row_d) = cell_probs(&phi, &p, &lambda)?;
        q_m.row_mut(r - 1).assign(&row_m.row(r - 1));
        q_d.row_mut(r - 1).assign(&row_d.row(r - 1));
    }
    Ok((q_m, q_d))
}

/// Model-driven log-likelihood of one history with a time-constant
/// individual covariate (measured at first capture) and ages counted from
/// zero at first capture.
pub fn loglik_history_model(
    resolved: &Resolved<'_>,
    theta: &[f64],
    hist: &EncounterHistory,
) -> Result<f64> {
    if hist.t() != resolved.spec.t_occasions {
        return Err(Error::InvalidHistory {
            id: hist.id.clone(),
            reason: format!(
                "has {} occasions, model expects {}",
                hist.t(),
                resolved.spec.t_occasions
            ),
        });
    }
    let c = hist.first_capture();
    let w = hist.initial_covariate();
    let (phi, p, lambda) = cohort_rates(resolved, theta, c, None, w)?;
    loglik_history(hist, &phi, &p, &lambda)
}

/// Sum of model-driven history log-likelihoods, in parallel with a
/// reduction order that does not depend on thread count.
pub fn loglik_histories_model(
    resolved: &Resolved<'_>,
    theta: &[f64],
    data: &HistoryData,
) -> Result<f64> {
    let terms: Vec<f64> = data
        .histories
        .par_iter()
        .map(|h| loglik_history_model(resolved, theta, h))
        .collect::<Result<_>>()?;
    Ok(pairwise_sum(&terms))
}
