//! Data containers: encounter histories and m/d-array summaries.
//!
//! Occasions are 1-based in the documentation (`t = 1..=T`) and 0-based in
//! storage. Codes are `0` (not observed), `1` (seen alive), `2` (recovered
//! dead, having died in the preceding interval).

use crate::error::{Error, Result};
use ndarray::Array2;

/// One individual's capture record over all `T` occasions.
#[derive(Debug, Clone, PartialEq)]
pub struct EncounterHistory {
    pub id: String,
    /// Length `T`, values in `{0, 1, 2}`.
    pub codes: Vec<u8>,
    /// Covariate measurements aligned to occasions; only occasions with a
    /// live capture may carry one.
    pub covariates: Vec<Option<f64>>,
}

impl EncounterHistory {
    pub fn new(id: impl Into<String>, codes: Vec<u8>, covariates: Vec<Option<f64>>) -> Result<Self> {
        let h = EncounterHistory {
            id: id.into(),
            codes,
            covariates,
        };
        h.validate()?;
        Ok(h)
    }

    /// Convenience constructor for histories without covariate measurements.
    pub fn from_codes(id: impl Into<String>, codes: Vec<u8>) -> Result<Self> {
        let n = codes.len();
        Self::new(id, codes, vec![None; n])
    }

    fn validate(&self) -> Result<()> {
        let err = |reason: String| Error::InvalidHistory {
            id: self.id.clone(),
            reason,
        };
        if self.codes.is_empty() {
            return Err(err("history has no occasions".into()));
        }
        if self.codes.len() != self.covariates.len() {
            return Err(err(format!(
                "{} codes but {} covariate slots",
                self.codes.len(),
                self.covariates.len()
            )));
        }
        let mut seen_live = false;
        let mut seen_dead = false;
        for (i, &c) in self.codes.iter().enumerate() {
            let t = i + 1;
            match c {
                0 => {}
                1 => {
                    if seen_dead {
                        return Err(err(format!("seen alive at occasion {t} after a recovery")));
                    }
                    seen_live = true;
                }
                2 => {
                    if seen_dead {
                        return Err(err("more than one recovery".into()));
                    }
                    if !seen_live {
                        return Err(err(format!(
                            "recovered at occasion {t} without a prior live capture"
                        )));
                    }
                    seen_dead = true;
                }
                c => {
                    return Err(err(format!("invalid code {c} at occasion {t}")));
                }
            }
            if self.covariates[i].is_some() && c != 1 {
                return Err(err(format!(
                    "covariate measured at occasion {t} without a live capture"
                )));
            }
            if let Some(w) = self.covariates[i] {
                if !w.is_finite() {
                    return Err(err(format!("non-finite covariate {w} at occasion {t}")));
                }
            }
        }
        if !seen_live {
            return Err(err("individual is never seen alive".into()));
        }
        Ok(())
    }

    pub fn t(&self) -> usize {
        self.codes.len()
    }

    /// First capture occasion `c_i` (1-based).
    pub fn first_capture(&self) -> usize {
        1 + self.codes.iter().position(|&c| c == 1).expect("validated")
    }

    /// Recovery occasion (1-based), if the individual was recovered dead.
    pub fn recovered_at(&self) -> Option<usize> {
        self.codes.iter().position(|&c| c == 2).map(|i| i + 1)
    }

    /// Last occasion the individual is known to have been alive: the last
    /// live capture, or the occasion before the recovery if that is later.
    pub fn last_alive(&self) -> usize {
        let last_seen = 1 + self.codes.iter().rposition(|&c| c == 1).expect("validated");
        match self.recovered_at() {
            Some(s) => last_seen.max(s - 1),
            None => last_seen,
        }
    }

    /// 1-based occasions with a live capture.
    pub fn live_captures(&self) -> impl Iterator<Item = usize> + '_ {
        self.codes
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 1)
            .map(|(i, _)| i + 1)
    }

    /// Covariate at the first capture, if measured.
    pub fn initial_covariate(&self) -> Option<f64> {
        self.covariates[self.first_capture() - 1]
    }
}

/// A set of histories over a common occasion range.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryData {
    pub t: usize,
    pub histories: Vec<EncounterHistory>,
}

impl HistoryData {
    pub fn new(histories: Vec<EncounterHistory>) -> Result<Self> {
        let t = match histories.first() {
            Some(h) => h.t(),
            None => {
                return Err(Error::InvalidData {
                    reason: "no histories".into(),
                })
            }
        };
        Self::with_t(t, histories)
    }

    /// Like [`HistoryData::new`] but with an explicit occasion count, which
    /// permits an empty collection.
    pub fn with_t(t: usize, histories: Vec<EncounterHistory>) -> Result<Self> {
        if t < 2 {
            return Err(Error::InvalidData {
                reason: "histories need at least 2 occasions".into(),
            });
        }
        for h in &histories {
            if h.t() != t {
                return Err(Error::InvalidHistory {
                    id: h.id.clone(),
                    reason: format!("has {} occasions, expected {t}", h.t()),
                });
            }
        }
        Ok(HistoryData { t, histories })
    }

    pub fn len(&self) -> usize {
        self.histories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.histories.is_empty()
    }

    /// All observed covariate values, in history order.
    pub fn observed_covariates(&self) -> Vec<f64> {
        self.histories
            .iter()
            .flat_map(|h| h.covariates.iter().flatten().copied())
            .collect()
    }
}

/// m-array / d-array sufficient statistics.
///
/// Row `r` (1-based, `r = 1..=T-1`) counts individuals released (marked or
/// re-released) at occasion `r`. `m_counts[r-1][s-2]` is the number next seen
/// alive at occasion `s`, `m_counts[r-1][T-1]` the number never seen again,
/// and `d_counts[r-1][s-2]` the number recovered dead at occasion `s` (died
/// in `(s-1, s]`). Counts are real-valued so expected-count arrays can be
/// represented too.
#[derive(Debug, Clone, PartialEq)]
pub struct MDArrays {
    pub t: usize,
    /// `(T-1) x T`: recapture columns `s = 2..=T`, then the never-seen column.
    pub m_counts: Array2<f64>,
    /// `(T-1) x (T-1)`: recovery columns `s = 2..=T`.
    pub d_counts: Array2<f64>,
    /// Row sums `R_r`, `r = 1..=T-1`.
    pub releases: Vec<f64>,
}

impl MDArrays {
    pub fn new(t: usize, m_counts: Array2<f64>, d_counts: Array2<f64>) -> Result<Self> {
        if t < 2 {
            return Err(Error::InvalidData {
                reason: "arrays need at least 2 occasions".into(),
            });
        }
        if m_counts.dim() != (t - 1, t) {
            return Err(Error::InvalidData {
                reason: format!(
                    "m-array must be {}x{}, got {}x{}",
                    t - 1,
                    t,
                    m_counts.nrows(),
                    m_counts.ncols()
                ),
            });
        }
        if d_counts.dim() != (t - 1, t - 1) {
            return Err(Error::InvalidData {
                reason: format!(
                    "d-array must be {}x{}, got {}x{}",
                    t - 1,
                    t - 1,
                    d_counts.nrows(),
                    d_counts.ncols()
                ),
            });
        }
        for (arr, name) in [(&m_counts, "m-array"), (&d_counts, "d-array")] {
            for ((r, c), &v) in arr.indexed_iter() {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidData {
                        reason: format!("{name} row {} column {} holds {v}", r + 1, c + 1),
                    });
                }
                // Recapture/recovery at occasion s = c + 2 requires s > r + 1,
                // i.e. c >= r; the never-seen column (c = t - 1 in the
                // m-array) is always allowed.
                let structural = c < r && !(name == "m-array" && c == t - 1);
                if structural && v != 0.0 {
                    return Err(Error::InvalidData {
                        reason: format!(
                            "{name} row {} column {} is below the diagonal but holds {v}",
                            r + 1,
                            c + 1
                        ),
                    });
                }
            }
        }
        let releases = (0..t - 1)
            .map(|r| m_counts.row(r).sum() + d_counts.row(r).sum())
            .collect();
        Ok(MDArrays {
            t,
            m_counts,
            d_counts,
            releases,
        })
    }

    /// Aggregates encounter histories into m/d-arrays. Every consecutive pair
    /// of live captures contributes a recapture cell; the segment after the
    /// last live capture contributes a recovery or never-seen cell.
    pub fn from_histories(data: &HistoryData) -> Result<Self> {
        let t = data.t;
        let mut m = Array2::zeros((t - 1, t));
        let mut d = Array2::zeros((t - 1, t - 1));
        for h in &data.histories {
            let captures: Vec<usize> = h.live_captures().collect();
            for pair in captures.windows(2) {
                m[[pair[0] - 1, pair[1] - 2]] += 1.0;
            }
            let last = *captures.last().expect("validated history has a capture");
            match h.recovered_at() {
                Some(s) => d[[last - 1, s - 2]] += 1.0,
                None => {
                    if last < t {
                        m[[last - 1, t - 1]] += 1.0;
                    }
                }
            }
        }
        MDArrays::new(t, m, d)
    }

    pub fn total_released(&self) -> f64 {
        self.releases.iter().sum()
    }
}

/// Array-regime dataset: count arrays plus an optional global covariate
/// series `w_t` for `t = 1..=T-1` (the covariate acting on survival over
/// `(t, t+1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayData {
    pub arrays: MDArrays,
    pub covariate: Option<Vec<f64>>,
}

impl ArrayData {
    pub fn new(arrays: MDArrays, covariate: Option<Vec<f64>>) -> Result<Self> {
        if let Some(w) = &covariate {
            if w.len() != arrays.t - 1 {
                return Err(Error::InvalidData {
                    reason: format!(
                        "global covariate series has {} entries, expected {}",
                        w.len(),
                        arrays.t - 1
                    ),
                });
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData {
                    reason: "global covariate series holds a non-finite value".into(),
                });
            }
        }
        Ok(ArrayData { arrays, covariate })
    }
}

/// Either kind of dataset, as loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Histories(HistoryData),
    Arrays(ArrayData),
}

impl Dataset {
    pub fn t(&self) -> usize {
        match self {
            Dataset::Histories(d) => d.t,
            Dataset::Arrays(d) => d.arrays.t,
        }
    }
}
