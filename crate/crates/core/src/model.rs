//! Model specification: parameter blocks, link transforms and rate lookup.
//!
//! A [`ModelSpec`] describes which demographic rates are modelled (survival,
//! recapture, recovery, and for the hidden-Markov regime the individual
//! covariate process), how each varies (constant, per occasion, logistic
//! linear, or penalized spline), and how age classes partition individuals.
//!
//! Estimation works on a packed unconstrained vector `theta`; block-wise
//! transforms map it to the natural scale:
//!
//! - probability-valued blocks use the logit (so `theta = 0` means 0.5),
//! - standard deviations use the log (so `theta = 0` means 1),
//! - mean-reversion rates use a scaled logit onto `(0, 2)` (so `theta = 0`
//!   means 1, and the stationarity constraint `|1 - eta| < 1` always holds),
//! - regression and spline coefficients are used as-is.
//!
//! A missing recapture (or recovery) block is structural: the corresponding
//! probability is identically zero, which is how recovery-only ring data and
//! live-recapture-only data are expressed.

use crate::basis::{SplineBasis, SPLINE_DEGREE};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::ops::Range;

pub const SCHEMA_VERSION: u32 = 1;

/// Which demographic quantity a parameter block feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Survival,
    Recapture,
    Recovery,
    CovprocMu0,
    CovprocSigma0,
    CovprocMu,
    CovprocSigma,
    CovprocEta,
    /// Recovery probability with a logistic-linear trend in occasion index.
    /// Equivalent to `Recovery` with [`Form::LogisticLinearInTime`].
    RecoveryTrend,
}

/// Functional form of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    Constant,
    PerOccasion,
    LogisticLinearInCovariate,
    LogisticLinearInTime,
    SplineInCovariate,
}

/// Which likelihood the spec is fitted with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Multinomial likelihood over m/d-array cells; covariates, if any, are a
    /// single global series indexed by occasion.
    Array,
    /// Per-history products with a fully observed (time-constant or
    /// deterministic-in-time) individual covariate.
    HistoryConstant,
    /// Hidden-Markov approximation for a time-varying individual covariate
    /// observed only at live captures.
    Hmm,
}

/// One block of related parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub role: Role,
    pub form: Form,
    /// 1-based age class the block applies to; `None` means all classes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_class: Option<usize>,
    /// Number of packed parameters. Zero (the serde default) means "derive
    /// from the form"; a nonzero value is validated against the derived one.
    #[serde(default)]
    pub dimension: usize,
}

impl ParamBlock {
    pub fn new(role: Role, form: Form, age_class: Option<usize>) -> Self {
        ParamBlock {
            role,
            form,
            age_class,
            dimension: 0,
        }
    }
}

/// Partition of ages into classes by strictly increasing integer boundaries.
///
/// An individual of age `a` is in class `1 + #{b : b <= a}` (classes are
/// 1-based). With boundaries `[2]`, ages 0 and 1 form class 1 and ages two
/// and above form class 2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct AgeClassMap {
    boundaries: Vec<usize>,
}

impl TryFrom<Vec<usize>> for AgeClassMap {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        AgeClassMap::new(v)
    }
}

impl From<AgeClassMap> for Vec<usize> {
    fn from(m: AgeClassMap) -> Vec<usize> {
        m.boundaries
    }
}

impl AgeClassMap {
    pub fn new(boundaries: Vec<usize>) -> Result<Self> {
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSpec {
                reason: "age class boundaries must be strictly increasing".into(),
            });
        }
        if boundaries.first().is_some_and(|&b| b == 0) {
            return Err(Error::InvalidSpec {
                reason: "age class boundaries must be positive".into(),
            });
        }
        Ok(AgeClassMap { boundaries })
    }

    /// Single class covering all ages.
    pub fn single() -> Self {
        AgeClassMap { boundaries: vec![] }
    }

    pub fn n_classes(&self) -> usize {
        self.boundaries.len() + 1
    }

    /// 1-based class of an individual of the given age.
    pub fn class_of(&self, age: usize) -> usize {
        1 + self.boundaries.iter().filter(|&&b| b <= age).count()
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }
}

/// Full model specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    /// Number of capture occasions `T >= 2`.
    pub t_occasions: usize,
    pub regime: Regime,
    #[serde(default = "AgeClassMap::single")]
    pub age_classes: AgeClassMap,
    pub blocks: Vec<ParamBlock>,
    /// Bases for the spline blocks, in block order.
    #[serde(default)]
    pub smooth_bases: Vec<SplineBasis>,
    /// Difference order of the roughness penalty (1, 2 or 3).
    #[serde(default = "default_diff_order")]
    pub smooth_diff_order: usize,
    /// Number of covariate bins for the hidden-Markov regime.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hmm_bins: Option<usize>,
    /// Covariate discretization range `[lo, hi]` for the hidden-Markov regime.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hmm_range: Option<(f64, f64)>,
}

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}

fn default_diff_order() -> usize {
    2
}

impl ModelSpec {
    /// Expected packed dimension of a block under this spec.
    pub fn block_dim(&self, block_index: usize) -> usize {
        let b = &self.blocks[block_index];
        match b.form {
            Form::Constant => 1,
            Form::PerOccasion => self.t_occasions - 1,
            Form::LogisticLinearInCovariate | Form::LogisticLinearInTime => 2,
            Form::SplineInCovariate => {
                let smooth = self
                    .blocks
                    .iter()
                    .take(block_index)
                    .filter(|x| x.form == Form::SplineInCovariate)
                    .count();
                self.smooth_bases.get(smooth).map_or(0, |b| b.k())
            }
        }
    }

    /// Packed offsets of every block, in block order.
    pub fn layout(&self) -> Vec<Range<usize>> {
        let mut out = Vec::with_capacity(self.blocks.len());
        let mut offset = 0;
        for i in 0..self.blocks.len() {
            let d = self.block_dim(i);
            out.push(offset..offset + d);
            offset += d;
        }
        out
    }

    /// Total packed dimension.
    pub fn dim(&self) -> usize {
        (0..self.blocks.len()).map(|i| self.block_dim(i)).sum()
    }

    /// Indices of the spline blocks, in order (smooth `j` is the `j`-th one).
    pub fn spline_blocks(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.form == Form::SplineInCovariate)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn n_smooths(&self) -> usize {
        self.smooth_bases.len()
    }

    /// Replaces every spline block by a logistic-linear-in-covariate block,
    /// keeping everything else (used as the parametric baseline for staged
    /// smoothing selection and for parametric-limit checks).
    pub fn parametric_analog(&self) -> ModelSpec {
        let mut out = self.clone();
        for b in &mut out.blocks {
            if b.form == Form::SplineInCovariate {
                b.form = Form::LogisticLinearInCovariate;
                b.dimension = 0;
            }
        }
        out.smooth_bases.clear();
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidSpec {
                reason: format!(
                    "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                    self.schema_version
                ),
            });
        }
        if self.t_occasions < 2 {
            return Err(Error::InvalidSpec {
                reason: format!("need at least 2 occasions, got {}", self.t_occasions),
            });
        }
        if !(1..=3).contains(&self.smooth_diff_order) {
            return Err(Error::InvalidSpec {
                reason: format!(
                    "smooth_diff_order must be 1, 2 or 3, got {}",
                    self.smooth_diff_order
                ),
            });
        }
        let n_spline = self
            .blocks
            .iter()
            .filter(|b| b.form == Form::SplineInCovariate)
            .count();
        if n_spline != self.smooth_bases.len() {
            return Err(Error::InvalidSpec {
                reason: format!(
                    "{} spline blocks but {} bases were supplied",
                    n_spline,
                    self.smooth_bases.len()
                ),
            });
        }
        for (i, basis) in self.smooth_bases.iter().enumerate() {
            if self.smooth_diff_order >= basis.k() {
                return Err(Error::InvalidSpec {
                    reason: format!(
                        "smooth {i}: difference order {} needs more than {} basis functions",
                        self.smooth_diff_order,
                        self.smooth_diff_order
                    ),
                });
            }
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.dimension != 0 && b.dimension != self.block_dim(i) {
                return Err(Error::InvalidSpec {
                    reason: format!(
                        "block {i}: declared dimension {} does not match derived dimension {}",
                        b.dimension,
                        self.block_dim(i)
                    ),
                });
            }
            if let Some(c) = b.age_class {
                if c == 0 || c > self.age_classes.n_classes() {
                    return Err(Error::InvalidSpec {
                        reason: format!(
                            "block {i}: age class {c} outside 1..={}",
                            self.age_classes.n_classes()
                        ),
                    });
                }
            }
            let class_free = matches!(
                b.role,
                Role::Recapture | Role::Recovery | Role::RecoveryTrend | Role::CovprocMu0 | Role::CovprocSigma0
            );
            if class_free && b.age_class.is_some() {
                return Err(Error::InvalidSpec {
                    reason: format!(
                        "block {i}: role {:?} applies to all age classes and cannot carry one",
                        b.role
                    ),
                });
            }
            let form_ok = match b.role {
                Role::Survival => true,
                Role::Recapture | Role::Recovery => matches!(
                    b.form,
                    Form::Constant | Form::PerOccasion | Form::LogisticLinearInTime
                ),
                Role::RecoveryTrend => b.form == Form::LogisticLinearInTime,
                Role::CovprocMu0
                | Role::CovprocSigma0
                | Role::CovprocMu
                | Role::CovprocSigma
                | Role::CovprocEta => b.form == Form::Constant,
            };
            if !form_ok {
                return Err(Error::InvalidSpec {
                    reason: format!("block {i}: form {:?} is not valid for role {:?}", b.form, b.role),
                });
            }
            if self.regime == Regime::Hmm
                && b.role == Role::Survival
                && matches!(b.form, Form::PerOccasion | Form::LogisticLinearInTime)
            {
                return Err(Error::InvalidSpec {
                    reason: format!(
                        "block {i}: occasion-dependent survival is not supported in the \
                         hidden-Markov regime"
                    ),
                });
            }
        }
        self.resolve().map(|_| ())
    }

    /// Builds the lookup table used by rate evaluation and the likelihoods.
    pub fn resolve(&self) -> Result<Resolved<'_>> {
        let n_classes = self.age_classes.n_classes();
        let layout = self.layout();
        let mut survival: Vec<Option<usize>> = vec![None; n_classes];
        let mut recapture = None;
        let mut recovery = None;
        let mut cov_mu0 = None;
        let mut cov_sigma0 = None;
        let mut cov_mu: Vec<Option<usize>> = vec![None; n_classes];
        let mut cov_sigma: Vec<Option<usize>> = vec![None; n_classes];
        let mut cov_eta: Vec<Option<usize>> = vec![None; n_classes];

        let assign_per_class = |slots: &mut Vec<Option<usize>>,
                                age_class: Option<usize>,
                                idx: usize,
                                what: &str|
         -> Result<()> {
            let targets: Vec<usize> = match age_class {
                Some(c) => vec![c - 1],
                None => (0..slots.len()).collect(),
            };
            for t in targets {
                if slots[t].is_some() {
                    return Err(Error::InvalidSpec {
                        reason: format!("{what} for age class {} is specified twice", t + 1),
                    });
                }
                slots[t] = Some(idx);
            }
            Ok(())
        };
        let assign_single = |slot: &mut Option<usize>, idx: usize, what: &str| -> Result<()> {
            if slot.is_some() {
                return Err(Error::InvalidSpec {
                    reason: format!("{what} is specified twice"),
                });
            }
            *slot = Some(idx);
            Ok(())
        };

        for (i, b) in self.blocks.iter().enumerate() {
            match b.role {
                Role::Survival => assign_per_class(&mut survival, b.age_class, i, "survival")?,
                Role::Recapture => assign_single(&mut recapture, i, "recapture")?,
                Role::Recovery | Role::RecoveryTrend => {
                    assign_single(&mut recovery, i, "recovery")?
                }
                Role::CovprocMu0 => assign_single(&mut cov_mu0, i, "covproc_mu0")?,
                Role::CovprocSigma0 => assign_single(&mut cov_sigma0, i, "covproc_sigma0")?,
                Role::CovprocMu => assign_per_class(&mut cov_mu, b.age_class, i, "covproc_mu")?,
                Role::CovprocSigma => {
                    assign_per_class(&mut cov_sigma, b.age_class, i, "covproc_sigma")?
                }
                Role::CovprocEta => assign_per_class(&mut cov_eta, b.age_class, i, "covproc_eta")?,
            }
        }

        let survival: Vec<usize> = survival
            .into_iter()
            .enumerate()
            .map(|(c, s)| {
                s.ok_or_else(|| Error::InvalidSpec {
                    reason: format!("no survival block covers age class {}", c + 1),
                })
            })
            .collect::<Result<_>>()?;
        if recapture.is_none() && recovery.is_none() {
            return Err(Error::InvalidSpec {
                reason: "at least one of recapture and recovery must be modelled".into(),
            });
        }

        let covproc = if self.regime == Regime::Hmm {
            let unwrap_all = |v: Vec<Option<usize>>, what: &str| -> Result<Vec<usize>> {
                v.into_iter()
                    .enumerate()
                    .map(|(c, s)| {
                        s.ok_or_else(|| Error::InvalidSpec {
                            reason: format!("no {what} block covers age class {}", c + 1),
                        })
                    })
                    .collect()
            };
            Some(CovprocBlocks {
                mu0: cov_mu0.ok_or_else(|| Error::InvalidSpec {
                    reason: "the hidden-Markov regime needs a covproc_mu0 block".into(),
                })?,
                sigma0: cov_sigma0.ok_or_else(|| Error::InvalidSpec {
                    reason: "the hidden-Markov regime needs a covproc_sigma0 block".into(),
                })?,
                mu: unwrap_all(cov_mu, "covproc_mu")?,
                sigma: unwrap_all(cov_sigma, "covproc_sigma")?,
                eta: unwrap_all(cov_eta, "covproc_eta")?,
            })
        } else {
            if cov_mu0.is_some()
                || cov_sigma0.is_some()
                || cov_mu.iter().any(Option::is_some)
                || cov_sigma.iter().any(Option::is_some)
                || cov_eta.iter().any(Option::is_some)
            {
                return Err(Error::InvalidSpec {
                    reason: "covariate-process blocks are only valid in the hidden-Markov regime"
                        .into(),
                });
            }
            None
        };

        match self.regime {
            Regime::Hmm => {
                let bins = self.hmm_bins.ok_or_else(|| Error::InvalidSpec {
                    reason: "the hidden-Markov regime needs hmm_bins".into(),
                })?;
                if bins < 2 {
                    return Err(Error::InvalidSpec {
                        reason: format!("hmm_bins must be at least 2, got {bins}"),
                    });
                }
                let (lo, hi) = self.hmm_range.ok_or_else(|| Error::InvalidSpec {
                    reason: "the hidden-Markov regime needs hmm_range".into(),
                })?;
                if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
                    return Err(Error::InvalidDomain { lo, hi });
                }
            }
            _ => {
                if self.hmm_bins.is_some() || self.hmm_range.is_some() {
                    return Err(Error::InvalidSpec {
                        reason: "hmm_bins/hmm_range are only valid in the hidden-Markov regime"
                            .into(),
                    });
                }
            }
        }

        // Map spline blocks to their bases.
        let mut spline_of_block = vec![None; self.blocks.len()];
        for (j, &b) in self.spline_blocks().iter().enumerate() {
            spline_of_block[b] = Some(j);
        }

        Ok(Resolved {
            spec: self,
            layout,
            survival,
            recapture,
            recovery,
            covproc,
            spline_of_block,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CovprocBlocks {
    pub mu0: usize,
    pub sigma0: usize,
    pub mu: Vec<usize>,
    pub sigma: Vec<usize>,
    pub eta: Vec<usize>,
}

/// Resolved block lookup for a validated spec.
#[derive(Debug, Clone)]
pub struct Resolved<'a> {
    pub spec: &'a ModelSpec,
    pub layout: Vec<Range<usize>>,
    /// Block index of the survival block for each (0-based) age class slot.
    pub survival: Vec<usize>,
    pub recapture: Option<usize>,
    pub recovery: Option<usize>,
    pub covproc: Option<CovprocBlocks>,
    pub spline_of_block: Vec<Option<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LinkFn {
    Logit,
    Log,
    ScaledLogit2,
    Identity,
}

pub(crate) fn block_link(role: Role, form: Form) -> LinkFn {
    match role {
        Role::Survival | Role::Recapture | Role::Recovery | Role::RecoveryTrend => match form {
            Form::Constant | Form::PerOccasion => LinkFn::Logit,
            _ => LinkFn::Identity,
        },
        Role::CovprocMu0 | Role::CovprocMu => LinkFn::Identity,
        Role::CovprocSigma0 | Role::CovprocSigma => LinkFn::Log,
        Role::CovprocEta => LinkFn::ScaledLogit2,
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standardizes an occasion index to mean zero and unit variance over the
/// inclusive range `lo..=hi` (population variance).
pub fn standardize_occasion(t: usize, lo: usize, hi: usize) -> f64 {
    let n = (hi - lo + 1) as f64;
    if n <= 1.0 {
        return 0.0;
    }
    let mean = (lo + hi) as f64 / 2.0;
    let var = (n * n - 1.0) / 12.0;
    (t as f64 - mean) / var.sqrt()
}

/// Natural-scale parameter values, one vector per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalParams {
    pub blocks: Vec<Vec<f64>>,
}

/// Maps natural-scale block values to the packed unconstrained vector.
pub fn pack(spec: &ModelSpec, natural: &NaturalParams) -> Result<Vec<f64>> {
    if natural.blocks.len() != spec.blocks.len() {
        return Err(Error::DimensionMismatch {
            what: "natural parameter blocks".into(),
            expected: spec.blocks.len(),
            got: natural.blocks.len(),
        });
    }
    let mut theta = Vec::with_capacity(spec.dim());
    for (i, (b, vals)) in spec.blocks.iter().zip(&natural.blocks).enumerate() {
        let dim = spec.block_dim(i);
        if vals.len() != dim {
            return Err(Error::DimensionMismatch {
                what: format!("natural values for block {i}"),
                expected: dim,
                got: vals.len(),
            });
        }
        let link = block_link(b.role, b.form);
        for &v in vals {
            if !v.is_finite() {
                return Err(Error::ParameterOutOfRange {
                    block: i,
                    reason: format!("non-finite natural value {v}"),
                });
            }
            let x = match link {
                LinkFn::Logit => {
                    if !(v > 0.0 && v < 1.0) {
                        return Err(Error::ParameterOutOfRange {
                            block: i,
                            reason: format!("probability {v} must lie strictly inside (0, 1)"),
                        });
                    }
                    logit(v)
                }
                LinkFn::Log => {
                    if v <= 0.0 {
                        return Err(Error::ParameterOutOfRange {
                            block: i,
                            reason: format!("standard deviation {v} must be positive"),
                        });
                    }
                    v.ln()
                }
                LinkFn::ScaledLogit2 => {
                    if !(v > 0.0 && v < 2.0) {
                        return Err(Error::ParameterOutOfRange {
                            block: i,
                            reason: format!("mean-reversion rate {v} must lie strictly inside (0, 2)"),
                        });
                    }
                    logit(v / 2.0)
                }
                LinkFn::Identity => v,
            };
            theta.push(x);
        }
    }
    Ok(theta)
}

/// Maps a packed vector back to natural-scale block values.
pub fn unpack(spec: &ModelSpec, theta: &[f64]) -> Result<NaturalParams> {
    if theta.len() != spec.dim() {
        return Err(Error::DimensionMismatch {
            what: "packed parameter vector".into(),
            expected: spec.dim(),
            got: theta.len(),
        });
    }
    let layout = spec.layout();
    let blocks = spec
        .blocks
        .iter()
        .zip(&layout)
        .map(|(b, range)| {
            let link = block_link(b.role, b.form);
            theta[range.clone()]
                .iter()
                .map(|&x| match link {
                    LinkFn::Logit => inv_logit(x),
                    LinkFn::Log => x.exp(),
                    LinkFn::ScaledLogit2 => 2.0 * inv_logit(x),
                    LinkFn::Identity => x,
                })
                .collect()
        })
        .collect();
    Ok(NaturalParams { blocks })
}

impl<'a> Resolved<'a> {
    pub fn dim(&self) -> usize {
        self.layout.last().map_or(0, |r| r.end)
    }

    fn block_slice<'t>(&self, theta: &'t [f64], block: usize) -> &'t [f64] {
        &theta[self.layout[block].clone()]
    }

    pub fn n_classes(&self) -> usize {
        self.spec.age_classes.n_classes()
    }

    /// Evaluates a block's linear predictor and applies its inverse link.
    fn eval_block(&self, theta: &[f64], block: usize, t: usize, w: Option<f64>) -> Result<f64> {
        let b = &self.spec.blocks[block];
        let vals = self.block_slice(theta, block);
        let x = match b.form {
            Form::Constant => vals[0],
            Form::PerOccasion => {
                let idx = match b.role {
                    Role::Survival => {
                        debug_assert!((1..self.spec.t_occasions).contains(&t));
                        t - 1
                    }
                    _ => {
                        debug_assert!((2..=self.spec.t_occasions).contains(&t));
                        t - 2
                    }
                };
                vals[idx]
            }
            Form::LogisticLinearInCovariate => {
                let w = w.ok_or_else(|| Error::InvalidArgument {
                    what: "rate evaluation".into(),
                    reason: format!("block {block} needs a covariate value"),
                })?;
                vals[0] + vals[1] * w
            }
            Form::LogisticLinearInTime => {
                let (lo, hi) = match b.role {
                    Role::Survival => (1, self.spec.t_occasions - 1),
                    _ => (2, self.spec.t_occasions),
                };
                vals[0] + vals[1] * standardize_occasion(t, lo, hi)
            }
            Form::SplineInCovariate => {
                let w = w.ok_or_else(|| Error::InvalidArgument {
                    what: "rate evaluation".into(),
                    reason: format!("block {block} needs a covariate value"),
                })?;
                let smooth = self.spline_of_block[block].expect("spline block has a basis");
                let basis = &self.spec.smooth_bases[smooth];
                let (start, bvals) = basis.eval_nonzero(w)?;
                bvals
                    .iter()
                    .zip(&vals[start..start + SPLINE_DEGREE + 1])
                    .map(|(bv, g)| bv * g)
                    .sum()
            }
        };
        Ok(match block_link(b.role, b.form) {
            LinkFn::Logit | LinkFn::Identity if is_probability_role(b.role) => inv_logit(x),
            LinkFn::Logit => inv_logit(x),
            _ => x,
        })
    }

    /// Survival probability over `(t, t+1]` for `t in 1..=T-1`.
    pub fn survival(&self, theta: &[f64], t: usize, age_class: usize, w: Option<f64>) -> Result<f64> {
        let block = self.survival[age_class - 1];
        self.eval_block(theta, block, t, w)
    }

    /// Recapture probability at occasion `t in 2..=T`; structurally zero when
    /// no recapture block is present.
    pub fn recapture(&self, theta: &[f64], t: usize, w: Option<f64>) -> Result<f64> {
        match self.recapture {
            Some(block) => self.eval_block(theta, block, t, w),
            None => Ok(0.0),
        }
    }

    /// Recovery probability at occasion `t in 2..=T`; structurally zero when
    /// no recovery block is present.
    pub fn recovery(&self, theta: &[f64], t: usize, w: Option<f64>) -> Result<f64> {
        match self.recovery {
            Some(block) => self.eval_block(theta, block, t, w),
            None => Ok(0.0),
        }
    }

    pub fn covproc(&self) -> &CovprocBlocks {
        self.covproc
            .as_ref()
            .expect("covariate process is only defined for the hidden-Markov regime")
    }

    /// Initial covariate distribution parameters `(mu_0, sigma_0)`.
    pub fn covproc_initial(&self, theta: &[f64]) -> (f64, f64) {
        let cp = self.covproc();
        let mu0 = self.block_slice(theta, cp.mu0)[0];
        let sigma0 = self.block_slice(theta, cp.sigma0)[0].exp();
        (mu0, sigma0)
    }

    /// Covariate process parameters `(mu, sigma, eta)` for an age class.
    pub fn covproc_class(&self, theta: &[f64], age_class: usize) -> (f64, f64, f64) {
        let cp = self.covproc();
        let mu = self.block_slice(theta, cp.mu[age_class - 1])[0];
        let sigma = self.block_slice(theta, cp.sigma[age_class - 1])[0].exp();
        let eta = 2.0 * inv_logit(self.block_slice(theta, cp.eta[age_class - 1])[0]);
        (mu, sigma, eta)
    }
}

fn is_probability_role(role: Role) -> bool {
    matches!(
        role,
        Role::Survival | Role::Recapture | Role::Recovery | Role::RecoveryTrend
    )
}

/// Convenience triple `(phi, p, lambda)` at occasion `t`.
///
/// Survival is evaluated at `min(t, T-1)` (its last defined occasion) and
/// recapture/recovery at `max(t, 2)` (their first defined occasion), so the
/// triple is well defined for any `t in 1..=T`.
pub fn rates_at(
    spec: &ModelSpec,
    theta: &[f64],
    t: usize,
    age_class: usize,
    w: Option<f64>,
) -> Result<(f64, f64, f64)> {
    if !(1..=spec.t_occasions).contains(&t) {
        return Err(Error::InvalidArgument {
            what: "occasion index".into(),
            reason: format!("t = {t} outside 1..={}", spec.t_occasions),
        });
    }
    if age_class == 0 || age_class > spec.age_classes.n_classes() {
        return Err(Error::InvalidArgument {
            what: "age class".into(),
            reason: format!("class {age_class} outside 1..={}", spec.age_classes.n_classes()),
        });
    }
    let r = spec.resolve()?;
    if theta.len() != r.dim() {
        return Err(Error::DimensionMismatch {
            what: "packed parameter vector".into(),
            expected: r.dim(),
            got: theta.len(),
        });
    }
    let t_phi = t.min(spec.t_occasions - 1);
    let t_obs = t.max(2);
    Ok((
        r.survival(theta, t_phi, age_class, w)?,
        r.recapture(theta, t_obs, w)?,
        r.recovery(theta, t_obs, w)?,
    ))
}
