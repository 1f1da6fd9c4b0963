//! Small numerically careful helpers shared by the likelihood code.

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// `log(sum(exp(xs)))` without overflow; `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

pub fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let max = a.max(b);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + ((a - max).exp() + (b - max).exp()).ln()
}

/// Pairwise summation with a fixed split order, so parallel and sequential
/// reductions over the same vector agree bit for bit.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// `log(1 - exp(-a))` for `a >= 0`.
pub fn log1m_exp(a: f64) -> f64 {
    if a <= 0.0 {
        f64::NEG_INFINITY
    } else if a < std::f64::consts::LN_2 {
        (-(-a).exp_m1()).ln()
    } else {
        (-(-a).exp()).ln_1p()
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(logistic(x))`.
pub fn log_logistic(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

pub fn ln_factorial(m: f64) -> f64 {
    ln_gamma(m + 1.0)
}

/// Standard normal upper-tail based two-sided p-value.
pub fn two_sided_p(z: f64) -> f64 {
    statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_handles_extremes() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        let v = log_sum_exp(&[-1000.0, -1000.0]);
        assert!((v - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        let v = log_sum_exp(&[1000.0, f64::NEG_INFINITY]);
        assert_eq!(v, 1000.0);
    }

    #[test]
    fn log1m_exp_matches_direct() {
        for &a in &[1e-10, 1e-3, 0.5, 0.7, 1.0, 5.0, 40.0] {
            let direct = (1.0 - (-a as f64).exp()).ln();
            let err = (log1m_exp(a) - direct).abs();
            assert!(err < 1e-6 * direct.abs() + 1e-15, "a={a}");
        }
        assert_eq!(log1m_exp(0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn logistic_pieces() {
        assert_eq!(logistic(0.0), 0.5);
        assert!((log_logistic(-800.0) + 800.0).abs() < 1e-12);
        assert!(log_logistic(800.0).abs() < 1e-300);
        assert!((two_sided_p(1.959963984540054) - 0.05).abs() < 1e-9);
    }

    #[test]
    fn pairwise_matches_naive() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let naive: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - naive).abs() < 1e-10);
    }
}
