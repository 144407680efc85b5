//! Cubic B-spline bases with difference penalties.
//!
//! A [`SplineBasis`] holds `k` cubic B-spline functions on an equidistant
//! knot grid spanning a closed domain `[lo, hi]`. Smooth model terms are
//! represented by a [`SplineSmooth`] (basis plus coefficient vector); several
//! smooths together with their smoothing parameters form a [`PenaltyVector`],
//! whose quadratic roughness penalty is built from discrete differences of
//! neighbouring coefficients.
//!
//! Conventions:
//! - the knot grid places `k - 2` equidistant knots on `[lo, hi]` (spacing
//!   `(hi - lo) / (k - 3)`) and extends three further knots beyond each
//!   boundary, for `k + 4` knots in total;
//! - evaluation outside `[lo, hi]` clamps the input to the nearest boundary,
//!   so predictors extend as constants beyond the domain;
//! - the penalty for one smooth is `h/2 * sum (Δ^q gamma)^2` with difference
//!   order `q` (default 2), whose null space for `q = 2` contains exactly the
//!   affine coefficient vectors.

use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub const SPLINE_DEGREE: usize = 3;

/// Default fractional widening applied to an observed covariate range when a
/// basis domain is derived from data.
pub const DOMAIN_EXTEND_FRAC: f64 = 0.05;

/// Cubic B-spline basis on an equidistant knot grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BasisRepr", into = "BasisRepr")]
pub struct SplineBasis {
    k: usize,
    lo: f64,
    hi: f64,
    knots: Vec<f64>,
}

/// Serialized form: knots are reconstructed from `(k, lo, hi)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct BasisRepr {
    k: usize,
    lo: f64,
    hi: f64,
}

impl TryFrom<BasisRepr> for SplineBasis {
    type Error = Error;
    fn try_from(r: BasisRepr) -> Result<Self> {
        SplineBasis::new(r.k, r.lo, r.hi)
    }
}

impl From<SplineBasis> for BasisRepr {
    fn from(b: SplineBasis) -> Self {
        BasisRepr {
            k: b.k,
            lo: b.lo,
            hi: b.hi,
        }
    }
}

impl SplineBasis {
    /// Builds a basis of `k >= 4` cubic B-splines over `[lo, hi]`.
    pub fn new(k: usize, lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
            return Err(Error::InvalidDomain { lo, hi });
        }
        if k < 4 {
            return Err(Error::InvalidBasis {
                reason: format!("need at least 4 basis functions, got {k}"),
            });
        }
        let spacing = (hi - lo) / (k - SPLINE_DEGREE) as f64;
        let knots = (0..k + SPLINE_DEGREE + 1)
            .map(|i| lo + (i as f64 - SPLINE_DEGREE as f64) * spacing)
            .collect();
        Ok(SplineBasis { k, lo, hi, knots })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn spacing(&self) -> f64 {
        self.knots[1] - self.knots[0]
    }

    /// Greville abscissae: the coefficient locations at which affine
    /// coefficient vectors reproduce affine functions of the covariate.
    pub fn greville(&self) -> Vec<f64> {
        (0..self.k)
            .map(|i| {
                self.knots[i + 1..i + 1 + SPLINE_DEGREE].iter().sum::<f64>()
                    / SPLINE_DEGREE as f64
            })
            .collect()
    }

    /// Evaluates all `k` basis functions at `w` (clamped into the domain).
    ///
    /// At most four entries are nonzero and the entries sum to one.
    pub fn eval(&self, w: f64) -> Result<Vec<f64>> {
        let (start, vals) = self.eval_nonzero(w)?;
        let mut out = vec![0.0; self.k];
        out[start..start + SPLINE_DEGREE + 1].copy_from_slice(&vals);
        Ok(out)
    }

    /// Evaluates the (at most four) nonzero basis functions at `w`.
    ///
    /// Returns the index of the first nonzero function and the four values
    /// `B_start(w) .. B_{start+3}(w)`.
    pub fn eval_nonzero(&self, w: f64) -> Result<(usize, [f64; 4])> {
        if w.is_nan() {
            return Err(Error::InvalidArgument {
                what: "basis evaluation point".into(),
                reason: "NaN covariate value".into(),
            });
        }
        let w = w.clamp(self.lo, self.hi);
        // Knot span j with knots[j] <= w < knots[j+1], clamped so that the
        // right boundary uses the last interior span.
        let spacing = self.spacing();
        let mut span = SPLINE_DEGREE + ((w - self.lo) / spacing).floor() as usize;
        span = span.clamp(SPLINE_DEGREE, self.k - 1);
        // Guards against floating-point drift in the span search.
        while span > SPLINE_DEGREE && w < self.knots[span] {
            span -= 1;
        }
        while span < self.k - 1 && w >= self.knots[span + 1] {
            span += 1;
        }

        // Cox-de Boor triangular scheme for the nonzero values on the span.
        let mut vals = [0.0f64; 4];
        let mut left = [0.0f64; 4];
        let mut right = [0.0f64; 4];
        vals[0] = 1.0;
        for d in 1..=SPLINE_DEGREE {
            left[d] = w - self.knots[span + 1 - d];
            right[d] = self.knots[span + d] - w;
            let mut saved = 0.0;
            for r in 0..d {
                let tmp = vals[r] / (right[r + 1] + left[d - r]);
                vals[r] = saved + right[r + 1] * tmp;
                saved = left[d - r] * tmp;
            }
            vals[d] = saved;
        }
        Ok((span - SPLINE_DEGREE, vals))
    }
}

/// Derives a default basis domain from observed covariate values: the data
/// range extended by `extend_frac` of its width on each side.
pub fn default_domain(values: &[f64], extend_frac: f64) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        if v.is_nan() {
            return Err(Error::InvalidArgument {
                what: "covariate values".into(),
                reason: "NaN value while deriving a basis domain".into(),
            });
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() || lo >= hi {
        return Err(Error::InvalidDomain { lo, hi });
    }
    let pad = extend_frac * (hi - lo);
    Ok((lo - pad, hi + pad))
}

/// A spline term: basis, coefficients, smoothing parameter, difference order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineSmooth {
    pub basis: SplineBasis,
    pub gamma: Vec<f64>,
    pub h: f64,
    pub diff_order: usize,
}

impl SplineSmooth {
    pub fn new(basis: SplineBasis, gamma: Vec<f64>, h: f64, diff_order: usize) -> Result<Self> {
        if gamma.len() != basis.k() {
            return Err(Error::DimensionMismatch {
                what: "spline coefficient vector".into(),
                expected: basis.k(),
                got: gamma.len(),
            });
        }
        validate_smoothing_parameter(h)?;
        validate_diff_order(diff_order, basis.k())?;
        Ok(SplineSmooth {
            basis,
            gamma,
            h,
            diff_order,
        })
    }

    /// Linear predictor `sum_k gamma_k B_k(w)` (clamped evaluation).
    pub fn predictor(&self, w: f64) -> Result<f64> {
        let (start, vals) = self.basis.eval_nonzero(w)?;
        Ok(vals
            .iter()
            .zip(&self.gamma[start..start + SPLINE_DEGREE + 1])
            .map(|(b, g)| b * g)
            .sum())
    }
}

fn validate_smoothing_parameter(h: f64) -> Result<()> {
    if !(h.is_finite() && h >= 0.0) {
        return Err(Error::InvalidArgument {
            what: "smoothing parameter".into(),
            reason: format!("must be finite and non-negative, got {h}"),
        });
    }
    Ok(())
}

fn validate_diff_order(order: usize, len: usize) -> Result<()> {
    if !(1..=3).contains(&order) {
        return Err(Error::InvalidArgument {
            what: "difference order".into(),
            reason: format!("must be 1, 2 or 3, got {order}"),
        });
    }
    if order >= len {
        return Err(Error::InvalidArgument {
            what: "difference order".into(),
            reason: format!("order {order} needs more than {order} coefficients, got {len}"),
        });
    }
    Ok(())
}

/// Several smooths with one smoothing parameter each.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyVector {
    smooths: Vec<SplineSmooth>,
    h_vec: Vec<f64>,
}

impl PenaltyVector {
    pub fn new(smooths: Vec<SplineSmooth>, h_vec: Vec<f64>) -> Result<Self> {
        if smooths.len() != h_vec.len() {
            return Err(Error::DimensionMismatch {
                what: "smoothing parameter vector".into(),
                expected: smooths.len(),
                got: h_vec.len(),
            });
        }
        for &h in &h_vec {
            validate_smoothing_parameter(h)?;
        }
        Ok(PenaltyVector { smooths, h_vec })
    }

    pub fn smooths(&self) -> &[SplineSmooth] {
        &self.smooths
    }

    pub fn h_vec(&self) -> &[f64] {
        &self.h_vec
    }

    /// Total roughness penalty `sum_j h_j/2 * sum (Δ^q gamma_j)^2`.
    pub fn penalty(&self) -> f64 {
        self.smooths
            .iter()
            .zip(&self.h_vec)
            .map(|(s, &h)| difference_penalty(&s.gamma, h, s.diff_order))
            .sum()
    }

    /// Block-diagonal penalty Hessian; block `j` equals `h_j * D_j' D_j`.
    ///
    /// The quadratic form `gamma' H gamma / 2` over the stacked coefficient
    /// vector reproduces [`PenaltyVector::penalty`] exactly.
    pub fn penalty_hessian(&self) -> Array2<f64> {
        let total: usize = self.smooths.iter().map(|s| s.gamma.len()).sum();
        let mut out = Array2::zeros((total, total));
        let mut offset = 0;
        for (s, &h) in self.smooths.iter().zip(&self.h_vec) {
            let len = s.gamma.len();
            let block = difference_penalty_hessian(len, h, s.diff_order);
            out.slice_mut(ndarray::s![offset..offset + len, offset..offset + len])
                .assign(&block);
            offset += len;
        }
        out
    }
}

/// Difference penalty `h/2 * sum_k (Δ^order gamma_k)^2` for one coefficient
/// vector.
pub fn difference_penalty(gamma: &[f64], h: f64, order: usize) -> f64 {
    let mut diffs = gamma.to_vec();
    for _ in 0..order {
        diffs = diffs.windows(2).map(|w| w[1] - w[0]).collect();
    }
    0.5 * h * diffs.iter().map(|d| d * d).sum::<f64>()
}

/// Gradient of [`difference_penalty`] with respect to `gamma`, accumulated
/// into `out` with a sign of `sign` (callers subtract penalties from
/// log-likelihoods, hence the explicit sign).
pub fn add_difference_penalty_gradient(gamma: &[f64], h: f64, order: usize, sign: f64, out: &mut [f64]) {
    debug_assert_eq!(gamma.len(), out.len());
    let d = difference_matrix(gamma.len(), order);
    // gradient = h * D' D gamma
    let n_rows = gamma.len() - order;
    for r in 0..n_rows {
        let mut dot = 0.0;
        for c in 0..gamma.len() {
            dot += d[(r, c)] * gamma[c];
        }
        for c in 0..gamma.len() {
            out[c] += sign * h * d[(r, c)] * dot;
        }
    }
}

/// The `(len - order) x len` difference operator of the given order.
pub fn difference_matrix(len: usize, order: usize) -> Array2<f64> {
    assert!(order < len, "difference order must be below the vector length");
    let mut d = Array2::eye(len);
    for step in 0..order {
        let rows = len - step - 1;
        let mut next = Array2::zeros((rows, len));
        for r in 0..rows {
            for c in 0..len {
                next[(r, c)] = d[(r + 1, c)] - d[(r, c)];
            }
        }
        d = next;
    }
    d
}

/// Penalty Hessian `h * D' D` for a single coefficient vector.
pub fn difference_penalty_hessian(len: usize, h: f64, order: usize) -> Array2<f64> {
    let d = difference_matrix(len, order);
    let mut out = Array2::zeros((len, len));
    for r in 0..len - order {
        for a in 0..len {
            let da = d[(r, a)];
            if da == 0.0 {
                continue;
            }
            for b in 0..len {
                out[(a, b)] += h * da * d[(r, b)];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Naive recursive Cox-de Boor evaluation, used as an oracle for the
    /// triangular scheme in `eval_nonzero`.
    fn naive_bspline(knots: &[f64], i: usize, degree: usize, w: f64) -> f64 {
        if degree == 0 {
            // Closed right end on the last interior span so that the
            // partition of unity holds at the domain boundary.
            let last = knots.len() - 2;
            if (knots[i] <= w && w < knots[i + 1]) || (i == last && w == knots[i + 1]) {
                return 1.0;
            }
            return 0.0;
        }
        let left_den = knots[i + degree] - knots[i];
        let right_den = knots[i + degree + 1] - knots[i + 1];
        let mut v = 0.0;
        if left_den > 0.0 {
            v += (w - knots[i]) / left_den * naive_bspline(knots, i, degree - 1, w);
        }
        if right_den > 0.0 {
            v += (knots[i + degree + 1] - w) / right_den * naive_bspline(knots, i + 1, degree - 1, w);
        }
        v
    }

    fn naive_eval(basis: &SplineBasis, w: f64) -> Vec<f64> {
        let w = w.clamp(basis.domain().0, basis.domain().1);
        // The naive recursion needs a knot vector whose "last span" notion
        // matches the full-support interval, so restrict to it directly.
        (0..basis.k())
            .map(|i| {
                let knots = basis.knots();
                // Treat w == hi as the limit from inside the last interior span.
                let hi = basis.domain().1;
                let w_adj = if w == hi { hi - 1e-12 * basis.spacing() } else { w };
                naive_bspline(knots, i, SPLINE_DEGREE, w_adj)
            })
            .collect()
    }

    #[test]
    fn knot_grid_small_domain() {
        let b = SplineBasis::new(4, 0.0, 1.0).unwrap();
        assert_eq!(b.knots().len(), 8);
        let expected = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0];
        for (k, e) in b.knots().iter().zip(expected) {
            assert_relative_eq!(*k, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn knot_grid_count_and_spacing() {
        let b = SplineBasis::new(7, 0.0, 57.0).unwrap();
        assert_eq!(b.knots().len(), 11);
        assert_relative_eq!(b.spacing(), 14.25, epsilon = 1e-12);
        assert_relative_eq!(b.knots()[3], 0.0, epsilon = 1e-12);
        assert_relative_eq!(b.knots()[7], 57.0, epsilon = 1e-9);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(SplineBasis::new(3, 0.0, 1.0).is_err());
        assert!(SplineBasis::new(8, 1.0, 1.0).is_err());
        assert!(SplineBasis::new(8, 2.0, 1.0).is_err());
        assert!(SplineBasis::new(8, f64::NAN, 1.0).is_err());
        let b = SplineBasis::new(8, 0.0, 1.0).unwrap();
        assert!(b.eval(f64::NAN).is_err());
    }

    #[test]
    fn interior_knot_values_match_uniform_cubic() {
        // At an interior knot a uniform cubic B-spline basis takes the
        // classic (1/6, 4/6, 1/6) values.
        let b = SplineBasis::new(10, 0.0, 7.0).unwrap();
        let w = 3.0; // interior knot (spacing 1)
        let vals = b.eval(w).unwrap();
        let nonzero: Vec<(usize, f64)> = vals
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, v)| *v > 1e-14)
            .collect();
        assert_eq!(nonzero.len(), 3);
        assert_relative_eq!(nonzero[0].1, 1.0 / 6.0, epsilon = 1e-12);
        assert_relative_eq!(nonzero[1].1, 4.0 / 6.0, epsilon = 1e-12);
        assert_relative_eq!(nonzero[2].1, 1.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn matches_naive_recursion() {
        let b = SplineBasis::new(9, -2.0, 3.0).unwrap();
        for i in 0..=200 {
            let w = -2.0 + 5.0 * i as f64 / 200.0;
            let fast = b.eval(w).unwrap();
            let slow = naive_eval(&b, w);
            for (f, s) in fast.iter().zip(&slow) {
                assert_relative_eq!(*f, *s, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn partition_of_unity_with_clamping() {
        let b = SplineBasis::new(15, 0.2, 4.7).unwrap();
        for w in [-10.0, 0.2, 0.19, 1.234567, 3.9, 4.7, 4.71, 99.0] {
            let vals = b.eval(w).unwrap();
            let sum: f64 = vals.iter().sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
            assert!(vals.iter().filter(|v| **v != 0.0).count() <= 4);
            assert!(vals.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn clamped_evaluation_is_constant_outside_domain() {
        let b = SplineBasis::new(8, 0.0, 1.0).unwrap();
        let gamma: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let s = SplineSmooth::new(b, gamma, 1.0, 2).unwrap();
        assert_relative_eq!(
            s.predictor(-5.0).unwrap(),
            s.predictor(0.0).unwrap(),
            epsilon = 1e-14
        );
        assert_relative_eq!(
            s.predictor(42.0).unwrap(),
            s.predictor(1.0).unwrap(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn greville_affine_reproduction() {
        let b = SplineBasis::new(12, -1.0, 2.0).unwrap();
        let (a0, a1) = (0.75, -1.3);
        let gamma: Vec<f64> = b.greville().iter().map(|x| a0 + a1 * x).collect();
        let s = SplineSmooth::new(b, gamma, 0.0, 2).unwrap();
        for i in 0..=60 {
            let w = -1.0 + 3.0 * i as f64 / 60.0;
            assert_relative_eq!(s.predictor(w).unwrap(), a0 + a1 * w, epsilon = 1e-10);
        }
    }

    #[test]
    fn penalty_single_smooth_hand_value() {
        // gamma = (0, 0, 1), h = 2, second differences: one term equal to 1,
        // so the penalty is h/2 * 1 = 1.
        assert_relative_eq!(difference_penalty(&[0.0, 0.0, 1.0], 2.0, 2), 1.0);
        // Same coefficients, order 1: (0-0)^2 + (1-0)^2 = 1, penalty = 1.
        assert_relative_eq!(difference_penalty(&[0.0, 0.0, 1.0], 2.0, 1), 1.0);
    }

    #[test]
    fn penalty_sums_over_smooths() {
        let b = SplineBasis::new(4, 0.0, 1.0).unwrap();
        // First smooth: second difference pattern worth 4 at h = 2:
        // gamma (0,0,1,3) -> Δ² = (1, 1) -> h/2 * 2 = 2 ... choose explicit
        // coefficient vectors whose penalties are 4 and 5.
        // (0,0,2,4): Δ² = (2, 0), sum sq = 4, h = 2 -> penalty 4.
        let s1 = SplineSmooth::new(b.clone(), vec![0.0, 0.0, 2.0, 4.0], 2.0, 2).unwrap();
        // (0,0,1,2): Δ² = (1, 0), sum sq = 1, h = 10 -> penalty 5.
        let s2 = SplineSmooth::new(b, vec![0.0, 0.0, 1.0, 2.0], 10.0, 2).unwrap();
        let pv = PenaltyVector::new(vec![s1, s2], vec![2.0, 10.0]).unwrap();
        assert_relative_eq!(pv.penalty(), 9.0, epsilon = 1e-12);
    }

    #[test]
    fn penalty_hessian_matches_quadratic_form() {
        let b = SplineBasis::new(6, 0.0, 1.0).unwrap();
        let g1 = vec![0.3, -0.2, 0.9, 1.4, -0.5, 0.0];
        let g2 = vec![1.0, 1.1, 0.7, -0.3, 0.25, 2.0];
        let s1 = SplineSmooth::new(b.clone(), g1.clone(), 3.0, 2).unwrap();
        let s2 = SplineSmooth::new(b, g2.clone(), 0.5, 2).unwrap();
        let pv = PenaltyVector::new(vec![s1, s2], vec![3.0, 0.5]).unwrap();
        let h = pv.penalty_hessian();
        let stacked: Vec<f64> = g1.iter().chain(&g2).copied().collect();
        let mut quad = 0.0;
        for a in 0..stacked.len() {
            for bb in 0..stacked.len() {
                quad += stacked[a] * h[(a, bb)] * stacked[bb];
            }
        }
        assert_relative_eq!(0.5 * quad, pv.penalty(), epsilon = 1e-12);
    }

    #[test]
    fn penalty_hessian_small_example() {
        // One smooth of length 3 with order-2 differences: D = (1, -2, 1),
        // h = 2 gives H = 2 D'D with H[0][0] = 2.
        let h = difference_penalty_hessian(3, 2.0, 2);
        assert_relative_eq!(h[(0, 0)], 2.0, epsilon = 1e-12);
        assert_relative_eq!(h[(0, 1)], -4.0, epsilon = 1e-12);
        assert_relative_eq!(h[(1, 1)], 8.0, epsilon = 1e-12);
    }

    #[test]
    fn affine_null_space_for_order_two() {
        let gamma: Vec<f64> = (0..9).map(|i| 2.0 - 0.35 * i as f64).collect();
        assert_relative_eq!(difference_penalty(&gamma, 7.5, 2), 0.0, epsilon = 1e-14);
        // Order 1 annihilates constants only.
        let flat = vec![0.4; 9];
        assert_relative_eq!(difference_penalty(&flat, 7.5, 1), 0.0, epsilon = 1e-14);
        assert!(difference_penalty(&gamma, 7.5, 1) > 0.0);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let gamma = vec![0.3, -0.2, 0.9, 1.4, -0.5];
        let h = 2.7;
        let mut grad = vec![0.0; gamma.len()];
        add_difference_penalty_gradient(&gamma, h, 2, 1.0, &mut grad);
        for i in 0..gamma.len() {
            let eps = 1e-6;
            let mut up = gamma.clone();
            up[i] += eps;
            let mut dn = gamma.clone();
            dn[i] -= eps;
            let fd = (difference_penalty(&up, h, 2) - difference_penalty(&dn, h, 2)) / (2.0 * eps);
            assert_relative_eq!(grad[i], fd, epsilon = 1e-6, max_relative = 1e-6);
        }
    }

    #[test]
    fn default_domain_extends_range() {
        let (lo, hi) = default_domain(&[0.0, 1.0, 5.0, 3.0], 0.05).unwrap();
        assert_relative_eq!(lo, -0.25, epsilon = 1e-12);
        assert_relative_eq!(hi, 5.25, epsilon = 1e-12);
        assert!(default_domain(&[2.0, 2.0], 0.05).is_err());
        assert!(default_domain(&[], 0.05).is_err());
    }

    #[test]
    fn diff_order_validation() {
        let b = SplineBasis::new(4, 0.0, 1.0).unwrap();
        assert!(SplineSmooth::new(b.clone(), vec![0.0; 4], 1.0, 0).is_err());
        assert!(SplineSmooth::new(b.clone(), vec![0.0; 4], 1.0, 4).is_err());
        assert!(SplineSmooth::new(b.clone(), vec![0.0; 3], 1.0, 2).is_err());
        assert!(SplineSmooth::new(b, vec![0.0; 4], f64::NAN, 2).is_err());
    }
}
