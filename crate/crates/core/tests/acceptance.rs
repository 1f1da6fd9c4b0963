//! Acceptance suite: one PASS/FAIL line per criterion. Runs the full-size
//! replication studies, so expect it to take a while.
//!
//! `ZIMIX_ACCEPTANCE_ONLY=c1,c3` restricts the run to the listed criteria.
//! The process exits nonzero on a failed criterion only when
//! `ZIMIX_ACCEPTANCE_STRICT=1`, so a FAIL line does not stop the rest of
//! `cargo test --workspace`.

mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use common::{mc_effects, random_theta, riemann_h, uniform, zipm_enumerate, zipm_records};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zimix::effects::{effect_table, effect_values};
use zimix::em::{e_step, fit};
use zimix::io::{to_json, FitReport, Versioned};
use zimix::likelihood::{h_integral, observed_loglik};
use zimix::select::select;
use zimix::simulate::{builtin_design, generate_dataset, replicate_study, EffectSummary, SimulationReport};
use zimix::{Dataset, EffectKind, FamilyChoice, KRange, MediatorFamily, ModelConfig, ObservedRecord};

const STUDY_STARTS: usize = 2;
const STUDY_SEED: u64 = 1;

struct Line {
    id: &'static str,
    title: &'static str,
    pass: bool,
    detail: String,
    secs: f64,
}

fn selected(id: &str) -> bool {
    match std::env::var("ZIMIX_ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').any(|s| s.trim().eq_ignore_ascii_case(id)),
        Err(_) => true,
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64())
}

fn c1_monotonicity() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let config = ModelConfig {
        n_starts: 1,
        ..ModelConfig::default()
    };
    let mut worst_drop = 0.0f64;
    let mut failures = Vec::new();
    let mut n_fits = 0;
    for family in ["zilonm", "zipm", "zinbm"] {
        for _ in 0..5 {
            let pct = [30, 50, 60, 70][rng.random_range(0..4)];
            let mut design = builtin_design(&format!("{family}{pct}")).unwrap();
            design.n = 500;
            let rep = rng.random_range(0..1000);
            let data = generate_dataset(&design, rep).unwrap();
            for k in 1..=2 {
                n_fits += 1;
                match fit(&data, design.family, k, &config) {
                    Ok(f) => {
                        let drop = f
                            .trace
                            .loglik_path
                            .windows(2)
                            .map(|w| w[0] - w[1])
                            .fold(0.0f64, f64::max);
                        worst_drop = worst_drop.max(drop);
                        if drop > 1e-10 {
                            failures.push(format!("{family}{pct} rep {rep} K={k} drop {drop:e}"));
                        }
                    }
                    Err(e) => failures.push(format!("{family}{pct} rep {rep} K={k}: {e}")),
                }
            }
        }
    }
    let detail = format!(
        "{n_fits} fits, largest per-iteration decrease {worst_drop:.3e} (tol 1e-10){}",
        if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(", ")) }
    );
    (failures.is_empty(), detail)
}

fn c2_likelihood_oracles() -> (bool, String) {
    let config = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut ll_err, mut tau_err) = (0.0f64, 0.0f64);
    for _ in 0..5 {
        let theta = random_theta(&mut rng, MediatorFamily::Zipm, 2, 1);
        let records = zipm_records(&mut rng, &theta, 20);
        let data = Dataset::new(records.clone(), vec!["z".into()]).unwrap();
        let mut brute = 0.0;
        let mut posts = Vec::new();
        for rec in &records {
            let (lik, post) = zipm_enumerate(&theta, rec, 20);
            brute += lik.ln();
            if rec.m_star == 0.0 {
                posts.push(post);
            }
        }
        ll_err = ll_err.max((observed_loglik(&data, &theta, &config).unwrap() - brute).abs());
        let tau = e_step(&data, &theta, &config).unwrap();
        for (i, post) in posts.iter().enumerate() {
            for (c, p) in post.iter().enumerate() {
                tau_err = tau_err.max((tau.tau2[(i, c)] - p).abs());
            }
        }
    }
    let mut h_err = 0.0f64;
    for _ in 0..20 {
        let theta = random_theta(&mut rng, MediatorFamily::Zilonm, 2, 0);
        let rec = ObservedRecord::new(uniform(&mut rng, -1.0, 3.0), 0.0, uniform(&mut rng, -1.5, 1.5));
        let k = rng.random_range(1..=2);
        let h = h_integral(&rec, k, &theta, &config).unwrap();
        let oracle = riemann_h(&theta, &rec, k - 1, config.bound_l, 1_000_000);
        h_err = h_err.max((h - oracle).abs() / oracle);
    }
    let pass = ll_err < 1e-10 && tau_err < 1e-10 && h_err < 1e-6;
    (
        pass,
        format!(
            "ZIPM loglik max abs err {ll_err:.2e}, tau2 max abs err {tau_err:.2e} (tol 1e-10); ZILoNM h max rel err {h_err:.2e} (tol 1e-6)"
        ),
    )
}

fn c3_effect_oracle() -> (bool, String) {
    const DRAWS: usize = 10_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut tasks = Vec::new();
    for family in MediatorFamily::ALL {
        for _ in 0..20 {
            let k = rng.random_range(1..=3);
            tasks.push((family, random_theta(&mut rng, family, k, 0)));
        }
    }
    let next = AtomicUsize::new(0);
    let results = Mutex::new(vec![None; tasks.len()]);
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= tasks.len() {
                    break;
                }
                let (family, theta) = &tasks[i];
                let mut rng = ChaCha8Rng::seed_from_u64(304);
                rng.set_stream(i as u64);
                let mc = mc_effects(&mut rng, *family, theta, 0.0, 1.0, DRAWS);
                results.lock().unwrap()[i] = Some(mc);
            });
        }
    });
    let results = results.into_inner().unwrap();
    let (mut within, mut total, mut worst_z, mut exact) = (0, 0, 0.0f64, true);
    let mut misses = Vec::new();
    for (i, ((family, theta), mc)) in tasks.iter().zip(results).enumerate() {
        let e = effect_values(theta, *family, 0.0, 1.0, &[]);
        exact &= e.nie == e.nie1 + e.nie2 && e.te == e.nie + e.nde;
        for (name, (value, est)) in ["NIE1", "NIE2", "NDE"].iter().zip([e.nie1, e.nie2, e.nde].iter().zip(mc.unwrap())) {
            total += 1;
            let z = (value - est.mean).abs() / est.se;
            worst_z = worst_z.max(z);
            if z <= 3.0 {
                within += 1;
            } else {
                // Informational only: redraw on an independent stream.
                let mut fresh = ChaCha8Rng::seed_from_u64(305);
                fresh.set_stream(i as u64);
                let again = mc_effects(&mut fresh, *family, theta, 0.0, 1.0, DRAWS);
                let j = ["NIE1", "NIE2", "NDE"].iter().position(|n| n == name).unwrap();
                let z2 = (value - again[j].mean).abs() / again[j].se;
                misses.push(format!("{} set {} {name} z={z:.2} (independent redraw z={z2:.2})", family.name(), i % 20));
            }
        }
    }
    let detail = format!(
        "{within}/{total} contrasts within 3 MC SE ({DRAWS} draws each), max |z| {worst_z:.2}; decomposition exact: {exact}{}",
        if misses.is_empty() { String::new() } else { format!("; outside: {}", misses.join(", ")) }
    );
    (within == total && exact, detail)
}

fn study(name: &str, family: FamilyChoice, k_range: KRange, reps: usize) -> SimulationReport {
    let mut design = builtin_design(name).unwrap();
    design.n_reps = reps;
    let config = ModelConfig {
        family,
        k_range,
        n_starts: STUDY_STARTS,
        seed: STUDY_SEED,
        ..ModelConfig::default()
    };
    replicate_study(&design, &config).unwrap()
}

fn nie(report: &SimulationReport) -> &EffectSummary {
    report.effects.iter().find(|e| e.effect == EffectKind::Nie).unwrap()
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.digits$}"))
}

fn zipm_selection_study() -> (String, SimulationReport) {
    let zipm = study("zipm30", FamilyChoice::Auto, KRange::new(1, 3), 100);
    let zipm_line = format!(
        "zipm30: (ZIPM, 2) selected in {:.0}% of {} reps ({} failed)",
        100.0 * zipm.selection_rate,
        zipm.n_reps - zipm.n_failed,
        zipm.n_failed
    );
    (zipm_line, zipm)
}

fn main() {
    let mut lines: Vec<Line> = Vec::new();
    let mut push = |id, title, (pass, detail): (bool, String), secs| {
        let line = Line {
            id,
            title,
            pass,
            detail,
            secs,
        };
        println!(
            "{} {:<3} {:<36} {} [{:.1}s]",
            if line.pass { "PASS" } else { "FAIL" },
            line.id,
            line.title,
            line.detail,
            line.secs
        );
        lines.push(line);
    };

    if selected("c1") {
        let (r, t) = timed(c1_monotonicity);
        let r = (r.0 && t < 300.0, format!("{}; runtime {t:.0}s (target < 300s)", r.1));
        push("C1", "EM monotonicity", r, t);
    }
    if selected("c2") {
        let (r, t) = timed(c2_likelihood_oracles);
        push("C2", "likelihood oracle equivalence", r, t);
    }
    if selected("c3") {
        let (r, t) = timed(c3_effect_oracle);
        push("C3", "effect-formula oracle", r, t);
    }

    let needs_main = ["c4", "c5", "c7"].iter().any(|c| selected(c));
    if needs_main {
        let (smoke, smoke_t) = timed(|| study("zilonm30", FamilyChoice::Auto, KRange::new(1, 3), 25));
        let (main, main_t) = timed(|| study("zilonm30", FamilyChoice::Auto, KRange::new(1, 3), 100));
        let e = nie(&main);
        if selected("c4") {
            let pb = e.percent_bias.unwrap_or(f64::NAN);
            let cp = e.cp.unwrap_or(f64::NAN);
            let pass = pb.abs() <= 5.0 && (0.90..=0.99).contains(&cp) && main_t < 1800.0 && smoke_t < 300.0;
            let detail = format!(
                "zilonm30 n={} reps={} ({} failed): NIE true {:.4}, mean {:.4}, %bias {pb:.2} (|.| <= 5), CP {cp:.2} (in [0.90, 0.99]); runtime {main_t:.0}s (< 1800s), 25-rep smoke {smoke_t:.0}s (< 300s, NIE %bias {})",
                main.design.n,
                main.n_reps,
                main.n_failed,
                e.true_value,
                e.mean_estimate,
                fmt_opt(nie(&smoke).percent_bias, 2)
            );
            push("C4", "parameter/effect recovery", (pass, detail), main_t);
        }
        if selected("c5") {
            let ((zipm_line, zipm), zipm_t) = timed(zipm_selection_study);
            let pass = main.selection_rate >= 0.90 && zipm.selection_rate >= 0.90;
            let detail = format!(
                "zilonm30: (ZILoNM, 2) selected in {:.0}% of {} reps; {zipm_line} (each >= 90%)",
                100.0 * main.selection_rate,
                main.n_reps - main.n_failed
            );
            push("C5", "BIC model selection", (pass, detail), zipm_t);
        }
        if selected("c7") {
            let ratio = match (e.mean_se, e.empirical_sd) {
                (Some(se), Some(sd)) if sd > 0.0 => se / sd,
                _ => f64::NAN,
            };
            let pass = (ratio - 1.0).abs() <= 0.15;
            let detail = format!(
                "zilonm30: mean SE(NIE) {} vs empirical SD {}, ratio {ratio:.3} (within 15% of 1)",
                fmt_opt(e.mean_se, 4),
                fmt_opt(e.empirical_sd, 4)
            );
            push("C7", "inference calibration", (pass, detail), 0.0);
        }
    }

    if selected("c6") {
        let ((k1, k2), t) = timed(|| {
            let fixed = FamilyChoice::Fixed(MediatorFamily::Zilonm);
            (
                study("zilonm50", fixed, KRange::single(1), 100),
                study("zilonm50", fixed, KRange::single(2), 100),
            )
        });
        let (b1, b2) = (nie(&k1).percent_bias.unwrap_or(f64::NAN), nie(&k2).percent_bias.unwrap_or(f64::NAN));
        let ratio = b1.abs() / b2.abs();
        let detail = format!("zilonm50 NIE %bias K=1 {b1:.2} vs K=2 {b2:.2}, ratio {ratio:.1} (>= 5)");
        push("C6", "misspecification direction", (ratio >= 5.0, detail), t);
    }

    if selected("c8") {
        let (r, t) = timed(|| {
            let sim = || {
                let mut design = builtin_design("zinbm50").unwrap();
                design.n = 300;
                design.n_reps = 3;
                let config = ModelConfig {
                    k_range: KRange::new(1, 2),
                    n_starts: 2,
                    seed: 8,
                    ..ModelConfig::default()
                };
                to_json(&Versioned::new(replicate_study(&design, &config).unwrap())).unwrap()
            };
            let fit_report = || {
                let mut design = builtin_design("zilonm30").unwrap();
                design.n = 400;
                let data = generate_dataset(&design, 5).unwrap();
                let config = ModelConfig {
                    k_range: KRange::new(1, 2),
                    n_starts: 3,
                    seed: 8,
                    ..ModelConfig::default()
                };
                let sel = select(&data, &config).unwrap();
                let effects = effect_table(&sel.best, 0.0, 1.0, None).unwrap();
                to_json(&Versioned::new(FitReport::new(&data, &config, sel.table.clone(), &sel.best, effects))).unwrap()
            };
            let (s1, s2) = (sim(), sim());
            let (f1, f2) = (fit_report(), fit_report());
            let pass = s1 == s2 && f1 == f2;
            (
                pass,
                format!(
                    "simulation report {} bytes identical: {}; fit report {} bytes identical: {}",
                    s1.len(),
                    s1 == s2,
                    f1.len(),
                    f1 == f2
                ),
            )
        });
        push("C8", "determinism", r, t);
    }

    let failed: Vec<&str> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        lines.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({})", failed.join(", ")) }
    );
    let strict = std::env::var("ZIMIX_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
