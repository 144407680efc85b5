//! Simulation of mark-recapture-recovery studies with a stochastic
//! individual covariate, plus the metrics used to score fits against the
//! generating truth.
//!
//! The generator follows a two-age-class protocol: individuals enter the
//! study at a uniform first-capture occasion with age zero, their covariate
//! starts from a normal draw and then follows a mean-reverting AR recursion
//! with age-class-specific parameters, survival over each interval is a
//! Bernoulli draw on the true survival curve of the current age class, live
//! animals are recaptured with constant probability, and newly dead animals
//! are recovered with constant probability. The covariate is recorded
//! exactly at live captures. Alongside the observable dataset the generator
//! emits the hidden truth (full covariate paths and death times) so oracle
//! tests can score what the fitting paths never see.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{EncounterHistory, HistoryData};
use crate::error::{Error, Result};
use crate::model::{inv_logit, AgeClassMap};
use crate::util::quantile_sorted;

/// Number of grid points used for the MISE integral.
pub const MISE_POINTS: usize = 512;
/// Quantile trimmed off each end of the covariate range before integrating.
pub const MISE_TRIM: f64 = 0.005;

/// True survival curve used for one age class of a simulated study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurvivalCurve {
    /// `logit^-1(2 - 0.3 (w - 0.5)^2)` below `w = 0.5`, the plateau
    /// `logit^-1(2)` above: a threshold effect.
    Threshold,
    /// `logit^-1(sin(2.5 (w + 0.8) + 0.45) + 1.3 + 0.7 w)`: a bending,
    /// increasing curve.
    Sinusoid,
    /// Constant survival probability.
    Constant(f64),
    /// `logit^-1(a + b w)`.
    Logistic(f64, f64),
}

impl SurvivalCurve {
    /// Survival probability at covariate value `w`.
    pub fn phi(&self, w: f64) -> f64 {
        match *self {
            SurvivalCurve::Threshold => {
                if w < 0.5 {
                    inv_logit(2.0 - 0.3 * (w - 0.5) * (w - 0.5))
                } else {
                    inv_logit(2.0)
                }
            }
            SurvivalCurve::Sinusoid => {
                inv_logit((2.5 * (w + 0.8) + 0.45).sin() + 1.3 + 0.7 * w)
            }
            SurvivalCurve::Constant(phi) => phi,
            SurvivalCurve::Logistic(a, b) => inv_logit(a + b * w),
        }
    }
}

/// True survival probability of age class 1 or 2 under the default
/// simulated protocol ([`SurvivalCurve::Threshold`] and
/// [`SurvivalCurve::Sinusoid`]).
pub fn true_phi(class: usize, w: f64) -> f64 {
    match class {
        1 => SurvivalCurve::Threshold.phi(w),
        2 => SurvivalCurve::Sinusoid.phi(w),
        _ => panic!("true_phi is defined for classes 1 and 2, got {class}"),
    }
}

/// Configuration of one simulated study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Number of marked individuals.
    pub n: usize,
    /// Number of capture occasions.
    pub t: usize,
    /// Recapture probability while alive.
    pub p: f64,
    /// Recovery probability in the interval of death.
    pub lambda: f64,
    /// Mean of the initial covariate draw.
    pub mu0: f64,
    /// Standard deviation of the initial covariate draw.
    pub sigma0: f64,
    /// Mean-reversion target of the covariate process, one per age class.
    pub mu: Vec<f64>,
    /// Innovation standard deviation, one per age class.
    pub sigma: Vec<f64>,
    /// Mean-reversion rate in (0, 2), one per age class.
    pub eta: Vec<f64>,
    /// Ages at which a new class starts; class 1 covers ages below the
    /// first boundary.
    pub age_boundaries: Vec<usize>,
    /// True survival curve, one per age class.
    pub survival: Vec<SurvivalCurve>,
    pub seed: u64,
}

impl Default for SimConfig {
    /// The default protocol: N = 600 individuals over T = 10 occasions,
    /// two age classes split at age 2, threshold and sinusoid survival,
    /// p = 0.6, lambda = 0.4, and covariate process (mu0, mu1, mu2) =
    /// (-1.4, 1, 1.3), (sigma0, sigma1, sigma2) = (0.4, 0.5, 0.4),
    /// (eta1, eta2) = (0.5, 0.8).
    fn default() -> Self {
        SimConfig {
            n: 600,
            t: 10,
            p: 0.6,
            lambda: 0.4,
            mu0: -1.4,
            sigma0: 0.4,
            mu: vec![1.0, 1.3],
            sigma: vec![0.5, 0.4],
            eta: vec![0.5, 0.8],
            age_boundaries: vec![2],
            survival: vec![SurvivalCurve::Threshold, SurvivalCurve::Sinusoid],
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument {
                what: "simulation size".into(),
                reason: "need at least one individual".into(),
            });
        }
        if self.t < 2 {
            return Err(Error::InvalidArgument {
                what: "simulation occasions".into(),
                reason: format!("need at least 2 occasions, got {}", self.t),
            });
        }
        for (name, v) in [("recapture probability", self.p), ("recovery probability", self.lambda)]
        {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument {
                    what: name.into(),
                    reason: format!("{v} is outside [0, 1]"),
                });
            }
        }
        let bad_sd = |s: f64| s.is_nan() || s <= 0.0;
        if bad_sd(self.sigma0) || self.sigma.iter().any(|&s| bad_sd(s)) {
            return Err(Error::InvalidArgument {
                what: "covariate process sd".into(),
                reason: "all sigma values must be positive".into(),
            });
        }
        if self.eta.iter().any(|&e| !(e > 0.0 && e < 2.0)) {
            return Err(Error::InvalidArgument {
                what: "covariate reversion rate".into(),
                reason: "all eta values must lie in (0, 2)".into(),
            });
        }
        let classes = self.age_classes()?;
        let k = classes.n_classes();
        for (name, len) in [
            ("mu", self.mu.len()),
            ("sigma", self.sigma.len()),
            ("eta", self.eta.len()),
            ("survival curves", self.survival.len()),
        ] {
            if len != k {
                return Err(Error::DimensionMismatch {
                    what: format!("per-class {name}"),
                    expected: k,
                    got: len,
                });
            }
        }
        for s in &self.survival {
            if let SurvivalCurve::Constant(phi) = s {
                if !(0.0..=1.0).contains(phi) {
                    return Err(Error::InvalidArgument {
                        what: "constant survival".into(),
                        reason: format!("{phi} is outside [0, 1]"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn age_classes(&self) -> Result<AgeClassMap> {
        AgeClassMap::new(self.age_boundaries.clone())
    }
}

/// What actually happened to one simulated individual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualTruth {
    pub id: String,
    /// First-capture occasion (1-based).
    pub first: usize,
    /// Covariate values at occasions `first, first+1, ...` while alive.
    pub path: Vec<f64>,
    /// Occasion `s` such that death occurred in `(s-1, s]`; `None` means
    /// the individual survived beyond the last occasion.
    pub death: Option<usize>,
    pub recovered: bool,
}

/// Simulates a study: the observable histories plus the hidden truth.
///
/// Each individual is generated on its own RNG stream derived from
/// `(cfg.seed, individual index)`, so output is reproducible and
/// independent of evaluation order.
pub fn simulate_dataset(cfg: &SimConfig) -> Result<(HistoryData, Vec<IndividualTruth>)> {
    cfg.validate()?;
    let classes = cfg.age_classes()?;
    let mut histories = Vec::with_capacity(cfg.n);
    let mut truths = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let (hist, truth) = simulate_individual(cfg, &classes, i, &mut rng)?;
        histories.push(hist);
        truths.push(truth);
    }
    Ok((HistoryData::with_t(cfg.t, histories)?, truths))
}

/// One step of the covariate recursion:
/// `w' = w + eta (mu - w) + sigma * eps`.
pub(crate) fn covariate_step(w: f64, mu: f64, sigma: f64, eta: f64, eps: f64) -> f64 {
    w + eta * (mu - w) + sigma * eps
}

fn simulate_individual(
    cfg: &SimConfig,
    classes: &AgeClassMap,
    index: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(EncounterHistory, IndividualTruth)> {
    let t = cfg.t;
    let first = rng.random_range(1..t);
    let mut codes = vec![0u8; t];
    let mut covariates: Vec<Option<f64>> = vec![None; t];
    codes[first - 1] = 1;
    let z: f64 = rng.sample(StandardNormal);
    let mut w = cfg.mu0 + cfg.sigma0 * z;
    covariates[first - 1] = Some(w);
    let mut path = vec![w];
    let mut death = None;
    let mut recovered = false;
    for occ in first..t {
        // Survival over (occ, occ+1] uses the class of the age at occ.
        let class = classes.class_of(occ - first);
        let phi = cfg.survival[class - 1].phi(w);
        if rng.random::<f64>() < phi {
            // The covariate step into occ+1 uses the destination class.
            let dest = classes.class_of(occ + 1 - first);
            let eps: f64 = rng.sample(StandardNormal);
            w = covariate_step(w, cfg.mu[dest - 1], cfg.sigma[dest - 1], cfg.eta[dest - 1], eps);
            path.push(w);
            if rng.random::<f64>() < cfg.p {
                codes[occ] = 1;
                covariates[occ] = Some(w);
            }
        } else {
            death = Some(occ + 1);
            if rng.random::<f64>() < cfg.lambda {
                codes[occ] = 2;
                recovered = true;
            }
            break;
        }
    }
    let id = format!("i{index}");
    let hist = EncounterHistory::new(id.clone(), codes, covariates)?;
    Ok((
        hist,
        IndividualTruth {
            id,
            first,
            path,
            death,
            recovered,
        },
    ))
}

/// `n` equally spaced points covering `[lo, hi]`.
pub fn curve_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + step * i as f64).collect()
}

/// Covariate range trimmed at the `MISE_TRIM` and `1 - MISE_TRIM`
/// empirical quantiles, the default integration range for [`mise`].
pub fn trimmed_range(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument {
            what: "covariate sample".into(),
            reason: "need at least two values to trim a range".into(),
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&sorted, MISE_TRIM);
    let hi = quantile_sorted(&sorted, 1.0 - MISE_TRIM);
    if !lo.is_finite() || !hi.is_finite() || lo >= hi {
        return Err(Error::InvalidArgument {
            what: "covariate sample".into(),
            reason: "trimmed range is empty".into(),
        });
    }
    Ok((lo, hi))
}

/// Mean integrated squared error of per-replication curves against the
/// truth, both evaluated on the same ascending grid; the integral uses the
/// trapezoid rule.
pub fn mise(estimates: &[Vec<f64>], truth: &[f64], grid: &[f64]) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::InvalidArgument {
            what: "mise".into(),
            reason: "need at least one replication".into(),
        });
    }
    if grid.len() < 2 || truth.len() != grid.len() {
        return Err(Error::InvalidArgument {
            what: "mise".into(),
            reason: "truth and grid must share a length of at least 2".into(),
        });
    }
    let mut total = 0.0;
    for est in estimates {
        if est.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                what: "estimated curve".into(),
                expected: grid.len(),
                got: est.len(),
            });
        }
        let sq: Vec<f64> = est
            .iter()
            .zip(truth)
            .map(|(&e, &f)| (e - f) * (e - f))
            .collect();
        total += trapezoid(&sq, grid);
    }
    Ok(total / estimates.len() as f64)
}

/// Trapezoid-rule integral of `values` over the ascending `grid`.
fn trapezoid(values: &[f64], grid: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 1..grid.len() {
        acc += 0.5 * (values[i] + values[i - 1]) * (grid[i] - grid[i - 1]);
    }
    acc
}

/// Replicated estimates of one scalar parameter with its true value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasInput {
    pub name: String,
    pub truth: f64,
    pub estimates: Vec<f64>,
}

/// One row of a bias table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub name: String,
    pub truth: f64,
    /// Mean relative bias in percent, or the mean absolute bias when
    /// `absolute` is set because the true value is zero.
    pub mrb: f64,
    /// Sample standard deviation of the estimates across replications.
    pub mstd: f64,
    pub absolute: bool,
}

/// Mean relative bias (percent) and replication standard deviation per
/// parameter. A zero true value makes relative bias undefined; those rows
/// report the mean absolute bias and set the `absolute` flag.
pub fn bias_table(inputs: &[BiasInput]) -> Result<Vec<BiasRow>> {
    inputs
        .iter()
        .map(|input| {
            let n = input.estimates.len();
            if n < 2 {
                return Err(Error::InvalidArgument {
                    what: format!("bias row {}", input.name),
                    reason: format!("need at least 2 replications, got {n}"),
                });
            }
            let absolute = input.truth == 0.0;
            let mrb = if absolute {
                input.estimates.iter().map(|e| e - input.truth).sum::<f64>() / n as f64
            } else {
                100.0
                    * input
                        .estimates
                        .iter()
                        .map(|e| (e - input.truth) / input.truth)
                        .sum::<f64>()
                    / n as f64
            };
            let mean = input.estimates.iter().sum::<f64>() / n as f64;
            let var = input
                .estimates
                .iter()
                .map(|e| (e - mean) * (e - mean))
                .sum::<f64>()
                / (n - 1) as f64;
            Ok(BiasRow {
                name: input.name.clone(),
                truth: input.truth,
                mrb,
                mstd: var.sqrt(),
                absolute,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::lik_hmm::HmmEngine;
    use crate::model::{
        pack, Form, ModelSpec, NaturalParams, ParamBlock, Regime, Role, SCHEMA_VERSION,
    };
    use approx::assert_relative_eq;

    #[test]
    fn true_phi_matches_frozen_values() {
        // Plateau above the threshold.
        assert_relative_eq!(true_phi(1, 0.5), 0.8807970779778823, epsilon = 1e-15);
        assert_relative_eq!(true_phi(1, 2.0), 0.8807970779778823, epsilon = 1e-15);
        // Both branches agree at the threshold.
        let below = inv_logit(2.0 - 0.3 * (0.5 - 1e-12 - 0.5_f64).powi(2));
        assert_relative_eq!(true_phi(1, 0.5 - 1e-12), below, epsilon = 1e-15);
        assert_relative_eq!(below, true_phi(1, 0.5), epsilon = 1e-9);
        // Independent evaluations of both formulas.
        assert_relative_eq!(true_phi(1, 0.0), 0.8726949619246283, epsilon = 1e-15);
        assert_relative_eq!(true_phi(2, -0.8), 0.7640413862696096, epsilon = 1e-15);
    }

    #[test]
    fn simulation_is_deterministic_in_the_seed() {
        let cfg = SimConfig {
            n: 50,
            ..SimConfig::default()
        };
        let (data_a, truth_a) = simulate_dataset(&cfg).unwrap();
        let (data_b, truth_b) = simulate_dataset(&cfg).unwrap();
        assert_eq!(data_a, data_b);
        assert_eq!(truth_a, truth_b);
        let other = SimConfig { seed: 1, ..cfg };
        let (data_c, _) = simulate_dataset(&other).unwrap();
        assert_ne!(data_a, data_c);
    }

    #[test]
    fn full_observation_reveals_the_truth() {
        let cfg = SimConfig {
            n: 120,
            p: 1.0,
            lambda: 1.0,
            seed: 4,
            ..SimConfig::default()
        };
        let (data, truths) = simulate_dataset(&cfg).unwrap();
        for (hist, truth) in data.histories.iter().zip(&truths) {
            assert_eq!(hist.first_capture(), truth.first);
            // Every occasion alive is a live capture carrying the covariate.
            for (k, &w) in truth.path.iter().enumerate() {
                let occ = truth.first + k;
                assert_eq!(hist.codes[occ - 1], 1);
                assert_eq!(hist.covariates[occ - 1], Some(w));
            }
            // Death inside the study is always recovered and coded.
            match truth.death {
                Some(s) => {
                    assert!(truth.recovered);
                    assert_eq!(hist.codes[s - 1], 2);
                    assert_eq!(truth.path.len(), s - truth.first);
                }
                None => {
                    assert_eq!(truth.path.len(), cfg.t - truth.first + 1);
                }
            }
        }
    }

    #[test]
    fn zero_recovery_rate_produces_no_dead_codes() {
        let cfg = SimConfig {
            n: 300,
            lambda: 0.0,
            seed: 9,
            ..SimConfig::default()
        };
        let (data, truths) = simulate_dataset(&cfg).unwrap();
        assert!(data
            .histories
            .iter()
            .all(|h| h.codes.iter().all(|&c| c != 2)));
        assert!(truths.iter().all(|tr| !tr.recovered));
    }

    #[test]
    fn first_captures_are_uniform_over_the_study() {
        let cfg = SimConfig {
            n: 4000,
            seed: 2,
            ..SimConfig::default()
        };
        let (data, _) = simulate_dataset(&cfg).unwrap();
        let mut counts = vec![0usize; cfg.t];
        for h in &data.histories {
            counts[h.first_capture() - 1] += 1;
        }
        assert_eq!(counts[cfg.t - 1], 0);
        let expected = cfg.n as f64 / (cfg.t - 1) as f64;
        for &c in &counts[..cfg.t - 1] {
            // Loose binomial bound: ~5 SE.
            assert!((c as f64 - expected).abs() < 5.0 * expected.sqrt());
        }
    }

    #[test]
    fn covariate_process_reverts_to_the_class_mean() {
        let cfg = SimConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for class in 0..2 {
            let (mu, sigma, eta) = (cfg.mu[class], cfg.sigma[class], cfg.eta[class]);
            let mut w = cfg.mu0;
            let mut sum = 0.0;
            let steps = 100_000;
            for i in 0..steps + 1000 {
                let eps: f64 = rng.sample(StandardNormal);
                w = covariate_step(w, mu, sigma, eta, eps);
                if i >= 1000 {
                    sum += w;
                }
            }
            let mean = sum / steps as f64;
            assert!(
                (mean - mu).abs() < 0.02,
                "class {} long-run mean {mean} is not within 0.02 of {mu}",
                class + 1
            );
        }
    }

    #[test]
    fn class_two_survival_frequency_matches_the_curve() {
        let cfg = SimConfig {
            n: 50_000,
            seed: 123,
            ..SimConfig::default()
        };
        let classes = cfg.age_classes().unwrap();
        let (_, truths) = simulate_dataset(&cfg).unwrap();
        // Conditional survival frequency in a narrow covariate bin around
        // the class-2 stationary mean.
        let (bin_lo, bin_hi, center) = (1.26, 1.34, 1.3);
        let (mut survived, mut total) = (0u64, 0u64);
        for tr in &truths {
            let last = tr.death.map_or(cfg.t, |s| s - 1);
            for occ in tr.first..cfg.t.min(last + 1) {
                if classes.class_of(occ - tr.first) != 2 {
                    continue;
                }
                let w = tr.path[occ - tr.first];
                if w < bin_lo || w >= bin_hi {
                    continue;
                }
                total += 1;
                if occ < last {
                    survived += 1;
                }
            }
        }
        assert!(total > 1000, "bin holds only {total} intervals");
        let phi = true_phi(2, center);
        let freq = survived as f64 / total as f64;
        let se = (phi * (1.0 - phi) / total as f64).sqrt();
        assert!(
            (freq - phi).abs() <= 3.0 * se,
            "frequency {freq} vs curve {phi} exceeds 3 SE ({se})"
        );
    }

    #[test]
    fn likelihood_prefers_the_generating_parameters() {
        // Consistency smoke test: with exactly representable constant
        // survival curves, the hidden-Markov likelihood at the generating
        // parameters should beat a 20% survival perturbation on nearly
        // every dataset.
        let cfg = SimConfig {
            n: 150,
            t: 6,
            survival: vec![SurvivalCurve::Constant(0.85), SurvivalCurve::Constant(0.7)],
            ..SimConfig::default()
        };
        let make_spec = |range: (f64, f64)| ModelSpec {
            schema_version: SCHEMA_VERSION,
            t_occasions: cfg.t,
            regime: Regime::Hmm,
            age_classes: cfg.age_classes().unwrap(),
            blocks: vec![
                ParamBlock::new(Role::Survival, Form::Constant, Some(1)),
                ParamBlock::new(Role::Survival, Form::Constant, Some(2)),
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
            hmm_bins: Some(30),
            hmm_range: Some(range),
        };
        let natural = |phi1: f64, phi2: f64| NaturalParams {
            blocks: vec![
                vec![phi1],
                vec![phi2],
                vec![cfg.p],
                vec![cfg.lambda],
                vec![cfg.mu0],
                vec![cfg.sigma0],
                vec![cfg.mu[0]],
                vec![cfg.sigma[0]],
                vec![cfg.eta[0]],
                vec![cfg.mu[1]],
                vec![cfg.sigma[1]],
                vec![cfg.eta[1]],
            ],
        };
        let mut wins = 0;
        let n_sets = 20;
        for seed in 0..n_sets {
            let (data, _) = simulate_dataset(&SimConfig { seed, ..cfg.clone() }).unwrap();
            let range = crate::lik_hmm::default_grid_range(&data).unwrap();
            let spec = make_spec(range);
            let engine = HmmEngine::new(&spec, &data).unwrap();
            let ll_true = engine
                .loglik(&pack(&spec, &natural(0.85, 0.7)).unwrap())
                .unwrap();
            let ll_pert = engine
                .loglik(&pack(&spec, &natural(0.85 * 0.8, 0.7 * 0.8)).unwrap())
                .unwrap();
            if ll_true > ll_pert {
                wins += 1;
            }
        }
        assert!(
            wins >= 18,
            "generating parameters won only {wins} of {n_sets} datasets"
        );
        // Regime check: the generated data also loads as a plain dataset.
        let (data, _) = simulate_dataset(&cfg).unwrap();
        assert_eq!(Dataset::Histories(data.clone()).t(), cfg.t);
    }

    #[test]
    fn mise_zero_for_truth_and_exact_for_constant_offset() {
        let grid = curve_grid(0.2, 1.7, MISE_POINTS);
        let truth: Vec<f64> = grid.iter().map(|&w| true_phi(2, w)).collect();
        assert_relative_eq!(
            mise(&[truth.clone(), truth.clone()], &truth, &grid).unwrap(),
            0.0
        );
        let shifted: Vec<f64> = truth.iter().map(|f| f + 0.1).collect();
        let length = 1.7 - 0.2;
        assert_relative_eq!(
            mise(&[shifted], &truth, &grid).unwrap(),
            0.01 * length,
            epsilon = 1e-12
        );
    }

    #[test]
    fn mise_rejects_mismatched_inputs() {
        let grid = curve_grid(0.0, 1.0, 16);
        let truth = vec![0.5; 16];
        assert!(mise(&[], &truth, &grid).is_err());
        assert!(mise(&[vec![0.5; 15]], &truth, &grid).is_err());
        assert!(mise(&[vec![0.5; 16]], &[0.5; 15], &grid).is_err());
    }

    #[test]
    fn trimmed_range_cuts_the_tails() {
        let values: Vec<f64> = (0..=1000).map(|i| i as f64).collect();
        let (lo, hi) = trimmed_range(&values).unwrap();
        assert_relative_eq!(lo, 5.0, epsilon = 1e-12);
        assert_relative_eq!(hi, 995.0, epsilon = 1e-12);
        assert!(trimmed_range(&[1.0]).is_err());
        assert!(trimmed_range(&[2.0, 2.0]).is_err());
    }

    #[test]
    fn bias_table_matches_hand_computations() {
        let rows = bias_table(&[
            BiasInput {
                name: "lambda".into(),
                truth: 0.4,
                estimates: vec![0.4, 0.4, 0.4],
            },
            BiasInput {
                name: "pair".into(),
                truth: 2.0,
                estimates: vec![1.5, 2.5],
            },
            BiasInput {
                name: "zero".into(),
                truth: 0.0,
                estimates: vec![0.1, 0.3],
            },
        ])
        .unwrap();
        assert_eq!(rows[0].mrb, 0.0);
        assert!(rows[0].mstd.abs() < 1e-12);
        assert!(!rows[0].absolute);
        // Symmetric pair: zero relative bias, sample SD of the pair.
        assert_relative_eq!(rows[1].mrb, 0.0, epsilon = 1e-12);
        assert_relative_eq!(rows[1].mstd, 0.5_f64 * 2.0_f64.sqrt(), epsilon = 1e-12);
        // Zero truth: absolute bias with the flag set.
        assert!(rows[2].absolute);
        assert_relative_eq!(rows[2].mrb, 0.2, epsilon = 1e-12);
        let err = bias_table(&[BiasInput {
            name: "short".into(),
            truth: 1.0,
            estimates: vec![1.0],
        }]);
        assert!(err.is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let ok = SimConfig::default();
        ok.validate().unwrap();
        let bad_p = SimConfig {
            p: 1.5,
            ..ok.clone()
        };
        assert!(bad_p.validate().is_err());
        let bad_sigma = SimConfig {
            sigma: vec![0.5, 0.0],
            ..ok.clone()
        };
        assert!(bad_sigma.validate().is_err());
        let bad_eta = SimConfig {
            eta: vec![0.5, 2.0],
            ..ok.clone()
        };
        assert!(bad_eta.validate().is_err());
        let bad_len = SimConfig {
            mu: vec![1.0],
            ..ok.clone()
        };
        assert!(bad_len.validate().is_err());
        let bad_const = SimConfig {
            survival: vec![SurvivalCurve::Constant(1.2), SurvivalCurve::Sinusoid],
            ..ok
        };
        assert!(bad_const.validate().is_err());
    }
}
