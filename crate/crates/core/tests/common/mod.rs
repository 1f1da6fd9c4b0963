//! Helpers shared by the integration tests: random parameter sets and an
//! independent counterfactual sampler for the effect oracles.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Poisson};
use statrs::distribution::{Continuous, Discrete, Normal, Poisson as PoissonPmf};
use zimix::{MediatorFamily, ObservedRecord, ParameterSet};

pub fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn simplex<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| uniform(rng, 0.2, 1.0)).collect();
    let s: f64 = raw.iter().sum();
    let mut psi: Vec<f64> = raw.iter().map(|v| v / s).collect();
    let head: f64 = psi[..k - 1].iter().sum();
    psi[k - 1] = 1.0 - head;
    psi
}

/// A random valid parameter set with moderate scales.
pub fn random_theta<R: Rng>(rng: &mut R, family: MediatorFamily, k: usize, n_z: usize) -> ParameterSet {
    let mut beta = [0.0; 6];
    for b in beta.iter_mut() {
        *b = uniform(rng, -1.0, 1.0);
    }
    let (a_lo, a_hi) = match family {
        MediatorFamily::Zilonm => (-0.5, 2.0),
        _ => (-0.5, 2.2),
    };
    ParameterSet {
        beta,
        beta_z: (0..n_z).map(|_| uniform(rng, -0.5, 0.5)).collect(),
        delta: uniform(rng, 0.5, 1.5),
        alpha0: (0..k).map(|_| uniform(rng, a_lo, a_hi)).collect(),
        alpha1: (0..k).map(|_| uniform(rng, -0.5, 0.5)).collect(),
        alpha_z: (0..n_z).map(|_| uniform(rng, -0.3, 0.3)).collect(),
        gamma0: uniform(rng, -2.0, 0.0),
        gamma1: uniform(rng, -1.0, 1.0),
        gamma_z: (0..n_z).map(|_| uniform(rng, -0.3, 0.3)).collect(),
        psi: simplex(rng, k),
        sigma: (family == MediatorFamily::Zilonm).then(|| uniform(rng, 0.3, 0.8)),
        r: (family == MediatorFamily::Zinbm).then(|| uniform(rng, 1.0, 10.0)),
        eta: uniform(rng, 0.3, 1.0),
    }
}

fn pick<R: Rng>(rng: &mut R, psi: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, p) in psi.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    psi.len() - 1
}

/// One draw of the true mediator at exposure `x` (no confounders).
pub fn draw_mediator<R: Rng>(rng: &mut R, family: MediatorFamily, theta: &ParameterSet, x: f64) -> f64 {
    let zero = logistic(theta.gamma0 + theta.gamma1 * x);
    if rng.random::<f64>() < zero {
        return 0.0;
    }
    let j = pick(rng, &theta.psi);
    let lp = theta.alpha0[j] + theta.alpha1[j] * x;
    match family {
        MediatorFamily::Zilonm => LogNormal::new(lp, theta.sigma.unwrap()).unwrap().sample(rng),
        MediatorFamily::Zipm => Poisson::new(lp.exp()).unwrap().sample(rng),
        MediatorFamily::Zinbm => {
            let r = theta.r.unwrap();
            let rate = Gamma::new(r, lp.exp() / r).unwrap().sample(rng);
            if rate > 0.0 {
                Poisson::new(rate).unwrap().sample(rng)
            } else {
                0.0
            }
        }
    }
}

/// Monte Carlo mean and standard error.
#[derive(Clone, Copy, Debug)]
pub struct Mc {
    pub mean: f64,
    pub se: f64,
}

#[derive(Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.n += 1.0;
        let d = v - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (v - self.mean);
    }

    fn finish(&self) -> Mc {
        Mc {
            mean: self.mean,
            se: (self.m2 / (self.n - 1.0) / self.n).sqrt(),
        }
    }
}

/// Counterfactual estimates of (NIE1, NIE2, NDE) contrasting `x2` with `x1`,
/// from independent mediator draws under each exposure level. The outcome
/// is linear in (M, B), so each contrast reduces to a difference of
/// counterfactual outcome means with the noise term integrated out.
pub fn mc_effects<R: Rng>(rng: &mut R, family: MediatorFamily, theta: &ParameterSet, x1: f64, x2: f64, draws: usize) -> [Mc; 3] {
    let b = &theta.beta;
    let outcome = |x: f64, m: f64| {
        let bb = if m > 0.0 { 1.0 } else { 0.0 };
        b[0] + b[1] * m + b[2] * bb + b[3] * x + b[4] * x * bb + b[5] * x * m
    };
    let (mut nie1, mut nie2, mut nde) = (Moments::default(), Moments::default(), Moments::default());
    for _ in 0..draws {
        let m1 = draw_mediator(rng, family, theta, x1);
        let m2 = draw_mediator(rng, family, theta, x2);
        let (b1, b2) = ((m1 > 0.0) as u8 as f64, (m2 > 0.0) as u8 as f64);
        nie1.push((b[1] + b[5] * x2) * (m2 - m1));
        nie2.push((b[2] + b[4] * x2) * (b2 - b1));
        nde.push(outcome(x2, m1) - outcome(x1, m1));
    }
    [nie1.finish(), nie2.finish(), nde.finish()]
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Outcome density at `y` given the true mediator `m`.
fn outcome_pdf(theta: &ParameterSet, rec: &ObservedRecord, m: f64) -> f64 {
    let b = if m > 0.0 { 1.0 } else { 0.0 };
    let bt = &theta.beta;
    let x = rec.x;
    let zt: f64 = theta.beta_z.iter().zip(&rec.z).map(|(a, z)| a * z).sum();
    let mean = bt[0] + bt[1] * m + bt[2] * b + bt[3] * x + bt[4] * x * b + bt[5] * x * m + zt;
    Normal::new(mean, theta.delta).unwrap().pdf(rec.y)
}

/// Joint probability of (observed record, latent class), enumerating the
/// structural zero (class 0 of the zero model) and every true count.
/// Returns the record likelihood and, for observed zeros, the class
/// probabilities [true zero, false zero from component 1..K].
pub fn zipm_enumerate(theta: &ParameterSet, rec: &ObservedRecord, bound_l: u64) -> (f64, Vec<f64>) {
    let zt = |v: &[f64]| -> f64 { v.iter().zip(&rec.z).map(|(a, z)| a * z).sum() };
    let excess = logistic(theta.gamma0 + theta.gamma1 * rec.x + zt(&theta.gamma_z));
    let eta2 = theta.eta * theta.eta;
    let k = theta.k();
    let lambda: Vec<f64> = (0..k)
        .map(|j| (theta.alpha0[j] + theta.alpha1[j] * rec.x + zt(&theta.alpha_z)).exp())
        .collect();
    if rec.m_star > 0.0 {
        let m = rec.m_star;
        let keep = if m <= bound_l as f64 { 1.0 - (-eta2 * m).exp() } else { 1.0 };
        let total: f64 = (0..k)
            .map(|j| (1.0 - excess) * theta.psi[j] * PoissonPmf::new(lambda[j]).unwrap().pmf(m as u64))
            .sum();
        return (total * keep * outcome_pdf(theta, rec, m), Vec::new());
    }
    let mut classes = vec![0.0; k + 1];
    classes[0] += excess * outcome_pdf(theta, rec, 0.0);
    for j in 0..k {
        let pois = PoissonPmf::new(lambda[j]).unwrap();
        let w = (1.0 - excess) * theta.psi[j];
        classes[0] += w * pois.pmf(0) * outcome_pdf(theta, rec, 0.0);
        for m in 1..=bound_l {
            let mf = m as f64;
            classes[j + 1] += w * pois.pmf(m) * (-eta2 * mf).exp() * outcome_pdf(theta, rec, mf);
        }
    }
    let total: f64 = classes.iter().sum();
    (total, classes.iter().map(|c| c / total).collect())
}

/// Midpoint rule for the false-zero integral on the log-mediator scale.
pub fn riemann_h(theta: &ParameterSet, rec: &ObservedRecord, k: usize, bound_l: f64, n: usize) -> f64 {
    let b = &theta.beta;
    let x = rec.x;
    let sigma = theta.sigma.unwrap();
    let mu = theta.alpha0[k] + theta.alpha1[k] * x;
    let eta2 = theta.eta * theta.eta;
    let (lo, hi) = (mu - 10.0 * sigma, bound_l.ln());
    let step = (hi - lo) / n as f64;
    let mut sum = 0.0;
    for i in 0..n {
        let u = lo + (i as f64 + 0.5) * step;
        let m = u.exp();
        let r = rec.y - b[0] - b[1] * m - b[2] - (b[3] + b[4]) * x - b[5] * x * m;
        let d = (u - mu) / sigma;
        sum += (-r * r / (2.0 * theta.delta * theta.delta) - eta2 * m - 0.5 * d * d).exp();
    }
    sum * step
}

/// Records for the enumeration oracle: 40% observed zeros, some counts above
/// the false-zero bound, outcomes near the model mean, one confounder.
pub fn zipm_records<R: Rng>(rng: &mut R, theta: &ParameterSet, n: usize) -> Vec<ObservedRecord> {
    (0..n)
        .map(|i| {
            let m = match i % 5 {
                0 | 1 => 0.0,
                2 => 25.0,
                _ => uniform(rng, 1.0, 12.0).floor(),
            };
            let x = uniform(rng, -1.5, 1.5);
            let z = uniform(rng, -1.0, 1.0);
            let b = if m > 0.0 { 1.0 } else { 0.0 };
            let bt = &theta.beta;
            let mean = bt[0] + bt[1] * m + bt[2] * b + bt[3] * x + bt[4] * x * b + bt[5] * x * m + theta.beta_z[0] * z;
            ObservedRecord::new(mean + uniform(rng, -1.5, 1.5), m, x).with_confounders(vec![z])
        })
        .collect()
}
