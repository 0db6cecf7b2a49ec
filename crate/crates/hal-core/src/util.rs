//! Small numeric helpers shared across modules.

/// Logistic function, numerically stable for large |x|.
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`expit`]. Caller must keep p strictly inside (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Kahan-compensated sum. Used wherever an aggregate must be reproducible
/// to ~1e-12 independent of accumulation noise.
pub fn kahan_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for x in xs {
        let y = x - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Mean via compensated summation; 0 for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    kahan_sum(xs.iter().copied()) / xs.len() as f64
}

/// Population variance (divides by n) via compensated two-pass summation.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    kahan_sum(xs.iter().map(|x| (x - m) * (x - m))) / xs.len() as f64
}

/// Sample standard deviation with the population convention of [`variance`].
pub fn sd(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

/// Linear-interpolation quantile of a sorted slice, p in [0, 1].
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expit_logit_roundtrip() {
        for &x in &[-30.0, -2.0, 0.0, 0.7, 25.0] {
            let p = expit(x);
            assert!(p > 0.0 && p < 1.0);
            if x.abs() < 20.0 {
                assert!((logit(p) - x).abs() < 1e-9, "x={x}");
            }
        }
        assert!((expit(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kahan_beats_naive_on_adversarial_sum() {
        // 1 + 1e-16 repeated: naive accumulation loses the tail entirely.
        let xs: Vec<f64> = std::iter::once(1.0)
            .chain(std::iter::repeat(1e-16).take(10_000))
            .collect();
        let k = kahan_sum(xs.iter().copied());
        assert!((k - (1.0 + 1e-12)).abs() < 1e-15);
    }

    #[test]
    fn quantile_endpoints_and_midpoint() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&xs, 0.0), 1.0);
        assert_eq!(quantile_sorted(&xs, 1.0), 4.0);
        assert!((quantile_sorted(&xs, 0.5) - 2.5).abs() < 1e-15);
    }
}
