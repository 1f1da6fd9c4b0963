//! Runs a small replication study: `study DESIGN REPS [FAMILY|auto] [KMIN:KMAX] [STARTS]`.

use std::time::Instant;

use zimix::simulate::{builtin_design, replicate_study};
use zimix::{FamilyChoice, KRange, MediatorFamily, ModelConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mut design = builtin_design(args.get(1).map_or("zilonm30", String::as_str)).expect("design");
    design.n_reps = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let family = match args.get(3).map(String::as_str) {
        None | Some("auto") => FamilyChoice::Auto,
        Some(f) => FamilyChoice::Fixed(MediatorFamily::parse(f).expect("family")),
    };
    let k_range = args
        .get(4)
        .and_then(|s| s.split_once(':'))
        .map_or(KRange::new(1, 3), |(a, b)| KRange::new(a.parse().unwrap(), b.parse().unwrap()));
    let config = ModelConfig {
        family,
        k_range,
        n_starts: args.get(5).and_then(|s| s.parse().ok()).unwrap_or(5),
        ..ModelConfig::default()
    };
    let t = Instant::now();
    let report = replicate_study(&design, &config).expect("study");
    println!(
        "{}: reps={} failed={} selection={:.2} zeros={:.3} time={:.1?}",
        design.name, report.n_reps, report.n_failed, report.selection_rate, report.mean_zero_fraction, t.elapsed()
    );
    for e in &report.effects {
        println!(
            "{:>4} true={:.4} mean={:.4} %bias={:>7.2} sd={:.4} meanSE={:.4} cp={:.2}",
            e.effect.name(),
            e.true_value,
            e.mean_estimate,
            e.percent_bias.unwrap_or(f64::NAN),
            e.empirical_sd.unwrap_or(f64::NAN),
            e.mean_se.unwrap_or(f64::NAN),
            e.cp.unwrap_or(f64::NAN)
        );
    }
    let picks: Vec<String> = report
        .reps
        .iter()
        .map(|r| format!("{}{}", r.family.map_or("-", |f| f.name()), r.k.unwrap_or(0)))
        .collect();
    println!("picks: {}", picks.join(" "));
}
