//! Zero-inflated mixture mediator families: zero probabilities, component
//! densities and masses, means, exact samplers and the false-zero mechanism.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};

use crate::error::{Error, Result};
use crate::model::{MediatorFamily, ParameterSet};
use crate::numeric::{dot, ln_factorial, ln_gamma, log1m_exp, log_logistic, log_sum_exp, logistic, HALF_LN_2PI};

/// Per-(x, z) linear predictors of the mediator model.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearPredictors {
    /// `mu_k` (ZILoNM), `log lambda_k` (ZIPM) or `log mu_k` (ZINBM).
    pub mu_or_loglambda: Vec<f64>,
    /// logit of `Delta` (ZILoNM) or of the excess-zero probability `Delta*`.
    pub zero_lp: f64,
}

pub fn linear_predictors(theta: &ParameterSet, x: f64, z: &[f64]) -> LinearPredictors {
    let az = dot(&theta.alpha_z, z);
    LinearPredictors {
        mu_or_loglambda: theta
            .alpha0
            .iter()
            .zip(&theta.alpha1)
            .map(|(a0, a1)| a0 + a1 * x + az)
            .collect(),
        zero_lp: theta.gamma0 + theta.gamma1 * x + dot(&theta.gamma_z, z),
    }
}

/// `log P(M_k = 0)` for a count component with log-mean `eta`.
fn log_p0(family: MediatorFamily, theta: &ParameterSet, eta: f64) -> f64 {
    match family {
        MediatorFamily::Zilonm => f64::NEG_INFINITY,
        MediatorFamily::Zipm => -eta.exp(),
        MediatorFamily::Zinbm => {
            let r = theta.r.expect("ZINBM carries r");
            -r * (eta.exp() / r).ln_1p()
        }
    }
}

/// `log(1 - P(M_k = 0))`.
fn log1m_p0(family: MediatorFamily, theta: &ParameterSet, eta: f64) -> f64 {
    match family {
        MediatorFamily::Zilonm => 0.0,
        _ => log1m_exp(-log_p0(family, theta, eta)),
    }
}

/// Log prior class weights: `log Delta` for the structural zero and
/// `log Psi_k` for the positive components. Count components carry their own
/// zero mass into `Delta`, so their positive weight is `(1-Delta*) psi_k (1-p0_k)`;
/// the weights sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub log_delta: f64,
    pub log_psi: Vec<f64>,
}

pub fn class_weights(family: MediatorFamily, theta: &ParameterSet, lp: &LinearPredictors) -> ClassWeights {
    let log_zero = log_logistic(lp.zero_lp);
    let log_nonzero = log_logistic(-lp.zero_lp);
    match family {
        MediatorFamily::Zilonm => ClassWeights {
            log_delta: log_zero,
            log_psi: theta.psi.iter().map(|p| log_nonzero + p.ln()).collect(),
        },
        _ => {
            let mut zero_terms = Vec::with_capacity(theta.k() + 1);
            zero_terms.push(log_zero);
            let mut log_psi = Vec::with_capacity(theta.k());
            for (p, &eta) in theta.psi.iter().zip(&lp.mu_or_loglambda) {
                zero_terms.push(log_nonzero + p.ln() + log_p0(family, theta, eta));
                log_psi.push(log_nonzero + p.ln() + log1m_p0(family, theta, eta));
            }
            ClassWeights {
                log_delta: log_sum_exp(&zero_terms),
                log_psi,
            }
        }
    }
}

/// `P(B = 0)`: total structural-zero probability at `(x, z)`.
pub fn delta_prob(family: MediatorFamily, theta: &ParameterSet, x: f64, z: &[f64]) -> f64 {
    let lp = linear_predictors(theta, x, z);
    match family {
        MediatorFamily::Zilonm => logistic(lp.zero_lp),
        _ => class_weights(family, theta, &lp).log_delta.exp(),
    }
}

/// `log Gamma(m + r) - log Gamma(r)` for integer `m >= 0`.
pub(crate) fn ln_rising(r: f64, m: f64) -> f64 {
    if m <= 64.0 {
        (0..m as u64).map(|j| (r + j as f64).ln()).sum()
    } else {
        ln_gamma(m + r) - ln_gamma(r)
    }
}

/// Log density (ZILoNM) or zero-truncated log mass (counts) of component `k`
/// at `m > 0`, given that component's linear predictor `eta`.
pub fn log_component_mass(family: MediatorFamily, theta: &ParameterSet, eta: f64, m: f64) -> f64 {
    let consts = MassConstants::new(family, theta, m);
    log_component_mass_with(family, theta, eta, m, &consts)
}

/// Parts of a component mass that depend on `m` (and `r`) but not on the
/// component, so callers looping over components compute them once.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MassConstants {
    ln_m: f64,
    ln_m_fact: f64,
    ln_rise: f64,
}

impl MassConstants {
    pub(crate) fn new(family: MediatorFamily, theta: &ParameterSet, m: f64) -> Self {
        match family {
            MediatorFamily::Zilonm => Self {
                ln_m: m.ln(),
                ln_m_fact: 0.0,
                ln_rise: 0.0,
            },
            MediatorFamily::Zipm => Self {
                ln_m: 0.0,
                ln_m_fact: ln_factorial(m),
                ln_rise: 0.0,
            },
            MediatorFamily::Zinbm => Self {
                ln_m: 0.0,
                ln_m_fact: ln_factorial(m),
                ln_rise: ln_rising(theta.r.expect("ZINBM carries r"), m),
            },
        }
    }

    /// Constants for `m` given those for `m - 1` (integer `m >= 1`).
    pub(crate) fn step(self, theta: &ParameterSet, m: f64) -> Self {
        Self {
            ln_m: 0.0,
            ln_m_fact: self.ln_m_fact + m.ln(),
            ln_rise: theta.r.map_or(0.0, |r| self.ln_rise + (r + m - 1.0).ln()),
        }
    }

    pub(crate) fn at_zero() -> Self {
        Self {
            ln_m: f64::NEG_INFINITY,
            ln_m_fact: 0.0,
            ln_rise: 0.0,
        }
    }
}

pub(crate) fn log_component_mass_with(
    family: MediatorFamily,
    theta: &ParameterSet,
    eta: f64,
    m: f64,
    c: &MassConstants,
) -> f64 {
    match family {
        MediatorFamily::Zilonm => {
            let s = theta.sigma.expect("ZILoNM carries sigma");
            let d = (c.ln_m - eta) / s;
            -c.ln_m - s.ln() - HALF_LN_2PI - 0.5 * d * d
        }
        MediatorFamily::Zipm => {
            let lambda = eta.exp();
            m * eta - lambda - c.ln_m_fact - log1m_exp(lambda)
        }
        MediatorFamily::Zinbm => {
            let r = theta.r.expect("ZINBM carries r");
            let mu = eta.exp();
            let log_r_share = -(mu / r).ln_1p();
            let log_mu_share = eta - (r + mu).ln();
            c.ln_rise - c.ln_m_fact + r * log_r_share + m * log_mu_share - log1m_p0(family, theta, eta)
        }
    }
}

fn check_support(family: MediatorFamily, m: f64) -> Result<()> {
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::Support {
            value: m,
            reason: "positive mass needs m > 0",
        });
    }
    if family.is_count() && m.fract() != 0.0 {
        return Err(Error::Support {
            value: m,
            reason: "count families need integer m",
        });
    }
    Ok(())
}

/// Log density/mass of `M^p` at `m` given `B = 1`.
pub fn log_positive_mass(family: MediatorFamily, theta: &ParameterSet, m: f64, x: f64, z: &[f64]) -> Result<f64> {
    check_support(family, m)?;
    let lp = linear_predictors(theta, x, z);
    let w = class_weights(family, theta, &lp);
    let log_nonzero = log1m_exp(-w.log_delta);
    let terms: Vec<f64> = w
        .log_psi
        .iter()
        .zip(&lp.mu_or_loglambda)
        .map(|(lpsi, &eta)| lpsi - log_nonzero + log_component_mass(family, theta, eta, m))
        .collect();
    Ok(log_sum_exp(&terms))
}

pub fn positive_mass(family: MediatorFamily, theta: &ParameterSet, m: f64, x: f64, z: &[f64]) -> Result<f64> {
    log_positive_mass(family, theta, m, x, z).map(f64::exp)
}

/// `E(M)` at `(x, z)`.
pub fn mediator_mean(family: MediatorFamily, theta: &ParameterSet, x: f64, z: &[f64]) -> f64 {
    let lp = linear_predictors(theta, x, z);
    let nonzero = logistic(-lp.zero_lp);
    let half_var = match family {
        MediatorFamily::Zilonm => theta.sigma.map_or(0.0, |s| 0.5 * s * s),
        _ => 0.0,
    };
    let mix: f64 = theta
        .psi
        .iter()
        .zip(&lp.mu_or_loglambda)
        .map(|(p, eta)| p * (eta + half_var).exp())
        .sum();
    nonzero * mix
}

/// Inverse-transform draw of a component index from `psi`.
fn draw_component<R: Rng + ?Sized>(psi: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in psi.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    psi.len() - 1
}

/// Exact draw of the true mediator `M = B * M^p`. Draw order is fixed:
/// zero indicator, component, value.
pub fn sample_true<R: Rng + ?Sized>(family: MediatorFamily, theta: &ParameterSet, x: f64, z: &[f64], rng: &mut R) -> f64 {
    let lp = linear_predictors(theta, x, z);
    let zero: f64 = rng.random();
    let k = draw_component(&theta.psi, rng);
    if zero < logistic(lp.zero_lp) {
        return 0.0;
    }
    let eta = lp.mu_or_loglambda[k];
    match family {
        MediatorFamily::Zilonm => {
            let s = theta.sigma.expect("ZILoNM carries sigma");
            Normal::new(eta, s).expect("finite normal").sample(rng).exp()
        }
        MediatorFamily::Zipm => poisson(eta.exp(), rng),
        MediatorFamily::Zinbm => {
            let r = theta.r.expect("ZINBM carries r");
            let rate = Gamma::new(r, eta.exp() / r).expect("positive gamma").sample(rng);
            poisson(rate, rng)
        }
    }
}

fn poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> f64 {
    if lambda > 0.0 && lambda.is_finite() {
        Poisson::new(lambda).expect("positive rate").sample(rng)
    } else {
        0.0
    }
}

/// `P(M* = 0 | M = m)`.
pub fn false_zero_prob(m: f64, eta: f64, bound_l: f64) -> f64 {
    if m == 0.0 {
        1.0
    } else if m > bound_l {
        0.0
    } else {
        (-eta * eta * m).exp()
    }
}

/// Applies the masking mechanism. Always consumes one uniform draw.
pub fn observe<R: Rng + ?Sized>(m_true: f64, eta: f64, bound_l: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    if u < false_zero_prob(m_true, eta, bound_l) {
        0.0
    } else {
        m_true
    }
}
