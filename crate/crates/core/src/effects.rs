//! Closed-form natural direct and indirect effects with delta-method inference.

use crate::error::{Error, Result};
use crate::mediator::{delta_prob, mediator_mean};
use crate::model::{EffectEstimate, EffectKind, EffectTable, FittedModel, Layout, MediatorFamily, ParameterSet};
use crate::numeric::two_sided_p;

const Z_95: f64 = 1.959_963_984_540_054;

/// Point values of every effect, in `EffectKind::ALL` order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EffectValues {
    pub nie1: f64,
    pub nie2: f64,
    pub nie: f64,
    pub nde: f64,
    pub te: f64,
}

impl EffectValues {
    pub fn get(&self, kind: EffectKind) -> f64 {
        match kind {
            EffectKind::Nie1 => self.nie1,
            EffectKind::Nie2 => self.nie2,
            EffectKind::Nie => self.nie,
            EffectKind::Nde => self.nde,
            EffectKind::Te => self.te,
        }
    }
}

/// Mediation through the level of M.
pub fn nie1(theta: &ParameterSet, family: MediatorFamily, x1: f64, x2: f64, z_ref: &[f64]) -> f64 {
    let slope = theta.beta[1] + theta.beta[5] * x2;
    slope * (mediator_mean(family, theta, x2, z_ref) - mediator_mean(family, theta, x1, z_ref))
}

/// Mediation through the zero/non-zero switch of M.
pub fn nie2(theta: &ParameterSet, family: MediatorFamily, x1: f64, x2: f64, z_ref: &[f64]) -> f64 {
    let jump = theta.beta[2] + theta.beta[4] * x2;
    jump * (delta_prob(family, theta, x1, z_ref) - delta_prob(family, theta, x2, z_ref))
}

pub fn nde(theta: &ParameterSet, family: MediatorFamily, x1: f64, x2: f64, z_ref: &[f64]) -> f64 {
    let nonzero = 1.0 - delta_prob(family, theta, x1, z_ref);
    let mean = mediator_mean(family, theta, x1, z_ref);
    (x2 - x1) * (theta.beta[3] + theta.beta[4] * nonzero + theta.beta[5] * mean)
}

pub fn effect_values(theta: &ParameterSet, family: MediatorFamily, x1: f64, x2: f64, z_ref: &[f64]) -> EffectValues {
    let nie1 = nie1(theta, family, x1, x2, z_ref);
    let nie2 = nie2(theta, family, x1, x2, z_ref);
    let nie = nie1 + nie2;
    let nde = nde(theta, family, x1, x2, z_ref);
    EffectValues {
        nie1,
        nie2,
        nie,
        nde,
        te: nie + nde,
    }
}

/// Central-difference Jacobian of the five effects over the free coordinates
/// (step `1e-5 * max(1, |coord|)`), one row per effect.
pub fn effect_gradients(layout: &Layout, theta: &ParameterSet, x1: f64, x2: f64, z_ref: &[f64]) -> Result<Vec<Vec<f64>>> {
    let v = layout.to_free(theta)?;
    let mut rows = vec![vec![0.0; v.len()]; EffectKind::ALL.len()];
    for j in 0..v.len() {
        let h = 1e-5 * v[j].abs().max(1.0);
        let eval = |s: f64| -> Result<EffectValues> {
            let mut w = v.clone();
            w[j] += s;
            Ok(effect_values(&layout.from_free(&w)?, layout.family, x1, x2, z_ref))
        };
        let (plus, minus) = (eval(h)?, eval(-h)?);
        for (row, kind) in rows.iter_mut().zip(EffectKind::ALL) {
            row[j] = (plus.get(kind) - minus.get(kind)) / (2.0 * h);
        }
    }
    Ok(rows)
}

/// Effects of moving the exposure from `x1` to `x2` at confounder values
/// `z_ref` (the fitted data's confounder means when `None`).
pub fn effect_table(fitted: &FittedModel, x1: f64, x2: f64, z_ref: Option<&[f64]>) -> Result<EffectTable> {
    let z_ref = z_ref.unwrap_or(&fitted.confounder_means).to_vec();
    if z_ref.len() != fitted.theta_hat.n_z() {
        return Err(Error::InvalidConfig(format!(
            "z_ref has {} values, model has {} confounders",
            z_ref.len(),
            fitted.theta_hat.n_z()
        )));
    }
    let values = effect_values(&fitted.theta_hat, fitted.family, x1, x2, &z_ref);
    let grads = match &fitted.vcov {
        Some(_) => Some(effect_gradients(&fitted.layout, &fitted.theta_hat, x1, x2, &z_ref)?),
        None => None,
    };
    let effects = EffectKind::ALL
        .iter()
        .enumerate()
        .map(|(row, &kind)| {
            let estimate = values.get(kind);
            let se = match (&fitted.vcov, &grads) {
                (Some(vcov), Some(g)) => {
                    let g = nalgebra::DVector::from_column_slice(&g[row]);
                    let var = (g.transpose() * vcov * &g)[(0, 0)];
                    (var >= 0.0 && var.is_finite()).then(|| var.sqrt())
                }
                _ => None,
            };
            EffectEstimate {
                effect: kind,
                estimate,
                se,
                ci_low: se.map(|s| estimate - Z_95 * s),
                ci_high: se.map(|s| estimate + Z_95 * s),
                p_value: se.map(|s| if s > 0.0 { two_sided_p(estimate / s) } else { f64::NAN }),
            }
        })
        .collect();
    Ok(EffectTable { x1, x2, z_ref, effects })
}
