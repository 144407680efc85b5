//! Small numeric helpers shared across modules.

/// Sums by recursive halving. The result depends only on the order of the
/// input slice, never on thread count or chunking, and the error grows like
/// O(log n) rather than O(n).
pub(crate) fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        2 => v[0] + v[1],
        n => {
            let (a, b) = v.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// Type-7 empirical quantile (linear interpolation between order
/// statistics) of an ascending-sorted, nonempty sample.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Validates that every entry is a probability.
pub(crate) fn check_probabilities(name: &str, v: &[f64]) -> crate::error::Result<()> {
    for (i, &x) in v.iter().enumerate() {
        if !(0.0..=1.0).contains(&x) {
            return Err(crate::error::Error::InvalidArgument {
                what: name.into(),
                reason: format!("entry {i} is {x}, outside [0, 1]"),
            });
        }
    }
    Ok(())
}
