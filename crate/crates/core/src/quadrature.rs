//! Globally adaptive Gauss-Kronrod (7/15) integration of functions supplied
//! on the log scale. The integrand is shifted by its largest sampled log
//! value before exponentiation, so the tolerance is relative to the peak.

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
/// Gauss weights for the Kronrod nodes with odd index (and the centre).
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

pub const NODES_PER_PANEL: usize = 15;

/// The 15 abscissae of a panel `[a, b]`, ordered left to right.
pub fn panel_nodes(a: f64, b: f64) -> [f64; NODES_PER_PANEL] {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut out = [0.0; NODES_PER_PANEL];
    for j in 0..7 {
        out[j] = c - h * XGK[j];
        out[14 - j] = c + h * XGK[j];
    }
    out[7] = c;
    out
}

/// Kronrod weights matching `panel_nodes`, scaled to the panel width.
pub fn panel_weights(a: f64, b: f64) -> [f64; NODES_PER_PANEL] {
    let h = 0.5 * (b - a);
    let mut out = [0.0; NODES_PER_PANEL];
    for j in 0..7 {
        out[j] = h * WGK[j];
        out[14 - j] = h * WGK[j];
    }
    out[7] = h * WGK[7];
    out
}

#[derive(Clone, Debug)]
struct Panel {
    a: f64,
    b: f64,
    log_f: [f64; NODES_PER_PANEL],
    kronrod: f64,
    error: f64,
}

#[derive(Clone, Debug)]
pub struct LogQuadrature {
    /// `log` of the integral; `-inf` when the integrand vanishes.
    pub log_value: f64,
    /// Error estimate on the peak-normalised scale.
    pub error: f64,
    /// Final panel boundaries, left to right.
    pub panels: Vec<(f64, f64)>,
    /// Largest sampled log value within each panel.
    pub panel_peaks: Vec<f64>,
}

fn eval_panel<F: Fn(f64) -> f64>(log_f: &F, a: f64, b: f64) -> Panel {
    let nodes = panel_nodes(a, b);
    let mut vals = [0.0; NODES_PER_PANEL];
    for (v, &u) in vals.iter_mut().zip(&nodes) {
        *v = log_f(u);
    }
    Panel {
        a,
        b,
        log_f: vals,
        kronrod: 0.0,
        error: 0.0,
    }
}

fn rate_panel(p: &mut Panel, shift: f64) {
    let h = 0.5 * (p.b - p.a);
    let f = |j: usize| (p.log_f[j] - shift).exp();
    let mut k = WGK[7] * f(7);
    let mut g = WG[3] * f(7);
    for j in 0..7 {
        let pair = f(j) + f(14 - j);
        k += WGK[j] * pair;
        if j % 2 == 1 {
            g += WG[j / 2] * pair;
        }
    }
    p.kronrod = h * k;
    p.error = (h * (k - g)).abs();
}

/// Integrates `exp(log_f)` over `[a, b]` until the summed panel error
/// estimate (after shifting by the largest sampled log value) is at most
/// `abs_tol`.
pub fn integrate_log<F: Fn(f64) -> f64>(
    log_f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    initial_panels: usize,
    max_panels: usize,
) -> Result<LogQuadrature> {
    if !(b > a) {
        return Ok(LogQuadrature {
            log_value: f64::NEG_INFINITY,
            error: 0.0,
            panels: Vec::new(),
            panel_peaks: Vec::new(),
        });
    }
    let n0 = initial_panels.max(1);
    let width = (b - a) / n0 as f64;
    let mut panels: Vec<Panel> = (0..n0)
        .map(|i| {
            let lo = a + width * i as f64;
            let hi = if i + 1 == n0 { b } else { lo + width };
            eval_panel(&log_f, lo, hi)
        })
        .collect();
    let mut shift = panels
        .iter()
        .flat_map(|p| p.log_f.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    if shift == f64::NEG_INFINITY {
        return Ok(LogQuadrature {
            log_value: f64::NEG_INFINITY,
            error: 0.0,
            panels: panels.iter().map(|p| (p.a, p.b)).collect(),
            panel_peaks: panels.iter().map(|p| panel_peak(std::slice::from_ref(p))).collect(),
        });
    }
    if !shift.is_finite() {
        return Err(Error::Quadrature {
            estimate: shift,
            error: f64::INFINITY,
            intervals: panels.len(),
        });
    }
    panels.iter_mut().for_each(|p| rate_panel(p, shift));
    loop {
        let total_err: f64 = panels.iter().map(|p| p.error).sum();
        if total_err <= abs_tol {
            break;
        }
        if panels.len() >= max_panels {
            let estimate: f64 = panels.iter().map(|p| p.kronrod).sum();
            return Err(Error::Quadrature {
                estimate: shift + estimate.ln(),
                error: total_err,
                intervals: panels.len(),
            });
        }
        let worst = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.error.total_cmp(&y.1.error))
            .map(|(i, _)| i)
            .expect("at least one panel");
        let p = panels.remove(worst);
        let mid = 0.5 * (p.a + p.b);
        let left = eval_panel(&log_f, p.a, mid);
        let right = eval_panel(&log_f, mid, p.b);
        panels.insert(worst, right);
        panels.insert(worst, left);
        let peak = panel_peak(&panels[worst..worst + 2]);
        if peak > shift {
            // A sharper peak turned up; re-express every panel relative to it.
            shift = peak;
            panels.iter_mut().for_each(|p| rate_panel(p, shift));
        } else {
            panels[worst..worst + 2].iter_mut().for_each(|p| rate_panel(p, shift));
        }
    }
    let value: f64 = panels.iter().map(|p| p.kronrod).sum();
    Ok(LogQuadrature {
        log_value: shift + value.ln(),
        error: panels.iter().map(|p| p.error).sum(),
        panels: panels.iter().map(|p| (p.a, p.b)).collect(),
        panel_peaks: panels.iter().map(|p| panel_peak(std::slice::from_ref(p))).collect(),
    })
}

fn panel_peak(panels: &[Panel]) -> f64 {
    panels
        .iter()
        .flat_map(|p| p.log_f.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max)
}
