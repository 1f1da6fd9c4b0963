//! Analytic gradients of `sum_i sum_c w_ic (log Psi_ic + ell_ic)` for fixed
//! class weights `w`. With EM weights this is the gradient of Q under frozen
//! quadrature nodes; with the posterior at `theta` it is the observed-data
//! score (Fisher's identity).

use statrs::function::gamma::digamma;

use crate::em::PosteriorWeights;
use crate::error::Result;
use crate::exec::map_range;
use crate::likelihood::{logliks_and_nodes, FixedNodes, OutcomeMean};
use crate::mediator::linear_predictors;
use crate::model::{Dataset, Layout, MediatorFamily, ModelConfig, ObservedRecord, ParameterSet};
use crate::numeric::{log_logistic, log_sum_exp, logistic};

/// Offsets into the natural-coordinate gradient: all six `beta`, `beta_z`,
/// `log delta`, `alpha0`, `alpha1`, `alpha_z`, `gamma0`, `gamma1`, `gamma_z`,
/// `log psi` (one per component), the log shape parameter and `log eta`.
#[derive(Clone, Copy, Debug)]
struct Offsets {
    n_z: usize,
    k: usize,
}

impl Offsets {
    fn beta_z(self) -> usize {
        6
    }
    fn log_delta(self) -> usize {
        6 + self.n_z
    }
    fn alpha0(self) -> usize {
        self.log_delta() + 1
    }
    fn alpha1(self) -> usize {
        self.alpha0() + self.k
    }
    fn alpha_z(self) -> usize {
        self.alpha1() + self.k
    }
    fn gamma0(self) -> usize {
        self.alpha_z() + self.n_z
    }
    fn gamma_z(self) -> usize {
        self.gamma0() + 2
    }
    fn log_psi(self) -> usize {
        self.gamma_z() + self.n_z
    }
    fn log_shape(self) -> usize {
        self.log_psi() + self.k
    }
    fn log_eta(self) -> usize {
        self.log_shape() + 1
    }
    fn len(self) -> usize {
        self.log_eta() + 1
    }
}

/// Scatters record-level derivatives into the natural gradient.
struct Acc<'a> {
    g: &'a mut [f64],
    off: Offsets,
    x: f64,
    z: &'a [f64],
}

impl Acc<'_> {
    fn mean(&mut self, d_base: f64, d_shift: f64, d_slope: f64) {
        self.g[0] += d_base;
        self.g[3] += d_base * self.x;
        for (j, zj) in self.z.iter().enumerate() {
            self.g[self.off.beta_z() + j] += d_base * zj;
        }
        self.g[2] += d_shift;
        self.g[4] += d_shift * self.x;
        self.g[1] += d_slope;
        self.g[5] += d_slope * self.x;
    }

    fn component(&mut self, k: usize, d: f64) {
        self.g[self.off.alpha0() + k] += d;
        self.g[self.off.alpha1() + k] += d * self.x;
        for (j, zj) in self.z.iter().enumerate() {
            self.g[self.off.alpha_z() + j] += d * zj;
        }
    }

    fn zero_lp(&mut self, d: f64) {
        let g0 = self.off.gamma0();
        self.g[g0] += d;
        self.g[g0 + 1] += d * self.x;
        for (j, zj) in self.z.iter().enumerate() {
            self.g[self.off.gamma_z() + j] += d * zj;
        }
    }

    fn add(&mut self, index: usize, d: f64) {
        self.g[index] += d;
    }
}

/// Zero-probability pieces of one count component at log-mean `eta`:
/// `log p0`, its derivatives in `eta` and `log r`, and `p0 / (1 - p0)`.
#[derive(Clone, Copy, Debug)]
struct CountZero {
    log_p0: f64,
    d_eta: f64,
    d_log_r: f64,
    odds: f64,
}

fn count_zero(family: MediatorFamily, theta: &ParameterSet, eta: f64) -> CountZero {
    let mu = eta.exp();
    let (log_p0, d_eta, d_log_r) = match family {
        MediatorFamily::Zinbm => {
            let r = theta.r.expect("ZINBM carries r");
            let l1 = (mu / r).ln_1p();
            (-r * l1, -r * mu / (r + mu), r * (mu / (r + mu) - l1))
        }
        _ => (-mu, -mu, 0.0),
    };
    CountZero {
        log_p0,
        d_eta,
        d_log_r,
        odds: 1.0 / (-log_p0).exp_m1(),
    }
}

/// Derivatives of a zero-truncated count log mass at `m` in `eta` and `log r`.
/// `rising` is `sum_{j<m} 1/(r+j)`.
fn count_mass_derivs(family: MediatorFamily, theta: &ParameterSet, eta: f64, m: f64, cz: CountZero, rising: f64) -> (f64, f64) {
    let mu = eta.exp();
    let (d_eta, d_log_r) = match family {
        MediatorFamily::Zinbm => {
            let r = theta.r.expect("ZINBM carries r");
            let l1 = (mu / r).ln_1p();
            (r * (m - mu) / (r + mu), r * (rising - l1 + (mu - m) / (r + mu)))
        }
        _ => (m - mu, 0.0),
    };
    (d_eta + cz.odds * cz.d_eta, d_log_r + cz.odds * cz.d_log_r)
}

fn rising_sum(r: f64, m: f64) -> f64 {
    if m <= 64.0 {
        (0..m as u64).map(|j| 1.0 / (r + j as f64)).sum()
    } else {
        digamma(r + m) - digamma(r)
    }
}

/// Adds `sum_c w_c d(log Psi_c + ell_c)` for one record.
#[allow(clippy::too_many_arguments)]
fn record_gradient(
    record: &ObservedRecord,
    theta: &ParameterSet,
    family: MediatorFamily,
    bound_l: f64,
    nodes: &[FixedNodes],
    w: &[f64],
    off: Offsets,
    g: &mut [f64],
) {
    let lp = linear_predictors(theta, record.x, &record.z);
    let mean = OutcomeMean::new(theta, record.x, &record.z);
    let mut acc = Acc {
        g,
        off,
        x: record.x,
        z: &record.z,
    };
    let k = theta.k();
    let delta2 = theta.delta * theta.delta;
    let eta2 = theta.eta * theta.eta;
    let zero_prob = logistic(lp.zero_lp);
    let czs: Vec<CountZero> = if family.is_count() {
        lp.mu_or_loglambda.iter().map(|&e| count_zero(family, theta, e)).collect()
    } else {
        Vec::new()
    };
    // Weight on the positive classes; they share the `log(1 - Delta) + log psi_k` part.
    let (w_pos, w_zero) = if record.m_star > 0.0 { (w, 0.0) } else { (&w[1..], w[0]) };
    let total_pos: f64 = w_pos.iter().sum();
    acc.zero_lp(-zero_prob * total_pos);
    for (c, &wc) in w_pos.iter().enumerate() {
        acc.add(off.log_psi() + c, wc);
        if family.is_count() && wc != 0.0 {
            // + log(1 - p0_k) in the class weight.
            acc.component(c, -wc * czs[c].odds * czs[c].d_eta);
            acc.add(off.log_shape(), -wc * czs[c].odds * czs[c].d_log_r);
        }
    }

    if record.m_star > 0.0 {
        let m = record.m_star;
        let r = record.y - mean.positive(m);
        acc.mean(total_pos * r / delta2, total_pos * r / delta2, total_pos * r * m / delta2);
        acc.add(off.log_delta(), total_pos * (r * r / delta2 - 1.0));
        if m <= bound_l {
            let a = eta2 * m;
            acc.add(off.log_eta(), total_pos * 2.0 * a / a.exp_m1());
        }
        let rising = match theta.r {
            Some(rv) if family == MediatorFamily::Zinbm => rising_sum(rv, m),
            _ => 0.0,
        };
        for (c, &wc) in w_pos.iter().enumerate() {
            if wc == 0.0 {
                continue;
            }
            let eta_c = lp.mu_or_loglambda[c];
            match family {
                MediatorFamily::Zilonm => {
                    let s = theta.sigma.expect("ZILoNM carries sigma");
                    let d = (m.ln() - eta_c) / s;
                    acc.component(c, wc * d / s);
                    acc.add(off.log_shape(), wc * (d * d - 1.0));
                }
                _ => {
                    let (de, dr) = count_mass_derivs(family, theta, eta_c, m, czs[c], rising);
                    acc.component(c, wc * de);
                    acc.add(off.log_shape(), wc * dr);
                }
            }
        }
        return;
    }

    // Observed zero: the structural-zero class.
    if w_zero != 0.0 {
        match family {
            MediatorFamily::Zilonm => acc.zero_lp(w_zero * (1.0 - zero_prob)),
            _ => {
                let log_zero = log_logistic(lp.zero_lp);
                let log_nonzero = log_logistic(-lp.zero_lp);
                let mut terms = Vec::with_capacity(k + 1);
                terms.push(log_zero);
                for (p, cz) in theta.psi.iter().zip(&czs) {
                    terms.push(log_nonzero + p.ln() + cz.log_p0);
                }
                let total = log_sum_exp(&terms);
                let pi: Vec<f64> = terms.iter().map(|t| (t - total).exp()).collect();
                acc.zero_lp(w_zero * (pi[0] - zero_prob));
                for (c, cz) in czs.iter().enumerate() {
                    acc.add(off.log_psi() + c, w_zero * pi[c + 1]);
                    acc.component(c, w_zero * pi[c + 1] * cz.d_eta);
                    acc.add(off.log_shape(), w_zero * pi[c + 1] * cz.d_log_r);
                }
            }
        }
        let r0 = record.y - mean.base;
        acc.mean(w_zero * r0 / delta2, 0.0, 0.0);
        acc.add(off.log_delta(), w_zero * (r0 * r0 / delta2 - 1.0));
    }

    // False zeros: softmax-weighted derivatives over nodes or counts.
    for (c, &wc) in w_pos.iter().enumerate() {
        if wc == 0.0 {
            continue;
        }
        let eta_c = lp.mu_or_loglambda[c];
        let (mut d_base, mut d_slope, mut d_logdelta, mut d_logeta, mut d_comp, mut d_shape) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        match family {
            MediatorFamily::Zilonm => {
                let s = theta.sigma.expect("ZILoNM carries sigma");
                let rule = &nodes[c];
                let terms: Vec<f64> = (0..rule.u.len())
                    .map(|j| {
                        let r = record.y - mean.positive(rule.exp_u[j]);
                        let d = (rule.u[j] - eta_c) / s;
                        rule.log_w[j] - 0.5 * r * r / delta2 - eta2 * rule.exp_u[j] - 0.5 * d * d
                    })
                    .collect();
                let total = log_sum_exp(&terms);
                if !total.is_finite() {
                    continue;
                }
                let mut d_sq = 0.0;
                for j in 0..rule.u.len() {
                    let p = (terms[j] - total).exp();
                    let e = rule.exp_u[j];
                    let r = record.y - mean.positive(e);
                    let d = (rule.u[j] - eta_c) / s;
                    d_base += p * r;
                    d_slope += p * r * e;
                    d_logdelta += p * r * r;
                    d_logeta += p * e;
                    d_comp += p * d;
                    d_sq += p * d * d;
                }
                d_comp /= s;
                d_shape = d_sq - 1.0;
            }
            _ => {
                let top = bound_l.floor() as u64;
                let mut ln_fact = 0.0;
                let mut ln_rise = 0.0;
                let mut rising = 0.0;
                let r_shape = theta.r.unwrap_or(0.0);
                let mut terms = Vec::with_capacity(top as usize);
                let mut parts = Vec::with_capacity(top as usize);
                for mi in 1..=top {
                    let m = mi as f64;
                    ln_fact += m.ln();
                    if family == MediatorFamily::Zinbm {
                        ln_rise += (r_shape + m - 1.0).ln();
                        rising += 1.0 / (r_shape + m - 1.0);
                    }
                    let r = record.y - mean.positive(m);
                    let mu = eta_c.exp();
                    let untrunc = match family {
                        MediatorFamily::Zinbm => {
                            ln_rise - ln_fact - r_shape * (mu / r_shape).ln_1p() + m * (eta_c - (r_shape + mu).ln())
                        }
                        _ => m * eta_c - mu - ln_fact,
                    };
                    let log_mass = untrunc - (-czs[c].log_p0.exp()).ln_1p();
                    terms.push(-0.5 * r * r / delta2 - eta2 * m + log_mass);
                    let (de, dr) = count_mass_derivs(family, theta, eta_c, m, czs[c], rising);
                    parts.push((m, r, de, dr));
                }
                let total = log_sum_exp(&terms);
                if !total.is_finite() {
                    continue;
                }
                for (t, &(m, r, de, dr)) in terms.iter().zip(&parts) {
                    let p = (t - total).exp();
                    d_base += p * r;
                    d_slope += p * r * m;
                    d_logdelta += p * r * r;
                    d_logeta += p * m;
                    d_comp += p * de;
                    d_shape += p * dr;
                }
            }
        }
        acc.mean(wc * d_base / delta2, wc * d_base / delta2, wc * d_slope / delta2);
        acc.add(off.log_delta(), wc * (d_logdelta / delta2 - 1.0));
        acc.add(off.log_eta(), -wc * 2.0 * eta2 * d_logeta);
        acc.component(c, wc * d_comp);
        acc.add(off.log_shape(), wc * d_shape);
    }
}

/// Natural-coordinate gradient of `sum_i sum_c w_ic (log Psi_ic + ell_ic)`
/// with false-zero integrals on the fixed rules `nodes`.
fn natural_gradient(
    dataset: &Dataset,
    theta: &ParameterSet,
    weights: &PosteriorWeights,
    nodes: &[Vec<FixedNodes>],
    config: &ModelConfig,
) -> Vec<f64> {
    let family = theta.family();
    let off = Offsets {
        n_z: theta.n_z(),
        k: theta.k(),
    };
    let recs = dataset.records();
    const CHUNK: usize = 128;
    let n_chunks = recs.len().div_ceil(CHUNK);
    let parts = map_range(config.execution, n_chunks, |c| {
        let mut g = vec![0.0; off.len()];
        let mut w = Vec::with_capacity(off.k + 1);
        for i in c * CHUNK..((c + 1) * CHUNK).min(recs.len()) {
            w.clear();
            w.extend(weights.weights(i));
            let rule: &[FixedNodes] = nodes.get(i).map_or(&[], |v| v.as_slice());
            record_gradient(&recs[i], theta, family, config.bound_l, rule, &w, off, &mut g);
        }
        g
    });
    let mut total = vec![0.0; off.len()];
    for p in parts {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Maps a natural-coordinate gradient onto the free vector of `layout`.
fn to_free(layout: &Layout, theta: &ParameterSet, g: &[f64]) -> Vec<f64> {
    let off = Offsets {
        n_z: theta.n_z(),
        k: theta.k(),
    };
    let mut out = Vec::with_capacity(layout.dim());
    for i in layout.beta_free() {
        out.push(g[i]);
    }
    out.extend_from_slice(&g[off.beta_z()..off.log_psi()]);
    let gpsi = &g[off.log_psi()..off.log_shape()];
    let sum: f64 = gpsi.iter().sum();
    for j in 0..off.k - 1 {
        out.push(gpsi[j] - theta.psi[j] * sum);
    }
    if layout.family != MediatorFamily::Zipm {
        out.push(g[off.log_shape()]);
    }
    out.push(g[off.log_eta()]);
    out
}

/// Gradient of the frozen-rule Q function in free coordinates.
pub(crate) fn q_gradient(
    dataset: &Dataset,
    theta: &ParameterSet,
    tau: &PosteriorWeights,
    nodes: &[Vec<FixedNodes>],
    layout: &Layout,
    config: &ModelConfig,
) -> Vec<f64> {
    to_free(layout, theta, &natural_gradient(dataset, theta, tau, nodes, config))
}

/// Observed-data score in free coordinates, with false-zero integrals on
/// compact rules built at `theta`.
pub(crate) fn score(dataset: &Dataset, theta: &ParameterSet, layout: &Layout, config: &ModelConfig) -> Result<Vec<f64>> {
    let (rows, nodes) = logliks_and_nodes(dataset, theta, config)?;
    let post = PosteriorWeights::from_logliks(&rows)?;
    Ok(q_gradient(dataset, theta, &post, &nodes, layout, config))
}
