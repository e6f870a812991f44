use super::config::ExperimentConfig;
use super::report::{num, Check, Report, Table};
use crate::error::Result;
use crate::mc::{optimality_probe, Perturbation, ProbeCase, ProbeResult, StrategyKind};

/// Significance (in paired SE) required for a gap to count as negative.
pub const PROBE_SIGNIFICANCE: f64 = 3.0;
pub const SLOPE_TOL: f64 = 0.2;
/// Case (iv): |gap(ε_min)| / |gap(ε_max)| must stay above this.
pub const PERSISTENCE_RATIO: f64 = 0.5;

/// The canned cases: a zero-perturbation control and the four regimes of
/// π̃⁰ + ε^α π̃¹ relative to the threshold α = (1−H)/2.
pub fn canned_cases(h: f64, c: f64) -> Vec<ProbeCase> {
    let perturbed = |alpha: f64, perturbation: Perturbation| StrategyKind::Perturbed {
        base: Box::new(StrategyKind::Pi0),
        perturbation,
        alpha,
    };
    vec![
        ProbeCase {
            name: "control".into(),
            strategy: perturbed(1.0, Perturbation::Zero),
        },
        ProbeCase {
            name: "i".into(),
            strategy: perturbed(1.0, Perturbation::ConstantFraction { c }),
        },
        ProbeCase {
            name: "ii".into(),
            strategy: perturbed((1.0 - h) / 2.0, Perturbation::FactorDependent { c }),
        },
        ProbeCase {
            name: "iii".into(),
            strategy: perturbed((1.0 - h) / 4.0, Perturbation::ConstantFraction { c }),
        },
        ProbeCase {
            name: "iv".into(),
            strategy: StrategyKind::ScaledPi0 { factor: 1.5 },
        },
    ]
}

fn smallest(r: &ProbeResult) -> &crate::mc::ProbeRow {
    r.rows.iter().min_by(|a, b| a.eps.total_cmp(&b.eps)).expect("non-empty probe")
}

fn largest(r: &ProbeResult) -> &crate::mc::ProbeRow {
    r.rows.iter().max_by(|a, b| a.eps.total_cmp(&b.eps)).expect("non-empty probe")
}

/// Per-case verdict.
pub fn verdict(r: &ProbeResult, h: f64) -> Check {
    let name = format!("case {}", r.case.name);
    match r.case.name.as_str() {
        "control" => Check::new(
            format!("{name}: zero perturbation gives zero gaps"),
            r.rows.iter().all(|row| row.gap == 0.0 && row.std_error == 0.0),
            format!("max |gap| {:.3e}", r.rows.iter().map(|row| row.gap.abs()).fold(0.0, f64::max)),
        ),
        "i" => {
            let alpha = r.case.alpha().unwrap_or(1.0);
            let f = r.scaled_limit(alpha);
            Check::new(
                format!("{name}: gap/eps^(1-H) -> 0 within {PROBE_SIGNIFICANCE} SE"),
                f.intercept.abs() <= PROBE_SIGNIFICANCE * f.intercept_se,
                format!("limit {:.3e} +- {:.3e}", f.intercept, f.intercept_se),
            )
        }
        "ii" => {
            let row = smallest(r);
            Check::new(
                format!("{name}: gap/eps^(1-H) negative at eps={}", row.eps),
                row.scaled_gap < -PROBE_SIGNIFICANCE * row.scaled_se,
                format!("{:.3e} +- {:.3e}", row.scaled_gap, row.scaled_se),
            )
        }
        "iii" => {
            let alpha = r.case.alpha().unwrap_or((1.0 - h) / 4.0);
            let negative = r.rows.iter().all(|row| row.gap < -PROBE_SIGNIFICANCE * row.std_error);
            match r.loss_slope() {
                Some(f) => Check::new(
                    format!("{name}: gap negative with slope 2 alpha = {:.2} +- {SLOPE_TOL}", 2.0 * alpha),
                    negative && (f.slope - 2.0 * alpha).abs() <= SLOPE_TOL,
                    format!("slope {:.3} (se {:.3}), all negative: {negative}", f.slope, f.slope_se),
                ),
                None => Check::new(
                    format!("{name}: gap negative with slope 2 alpha"),
                    false,
                    "fewer than two significantly negative gaps",
                ),
            }
        }
        "iv" => {
            let negative = r.rows.iter().all(|row| row.gap < -PROBE_SIGNIFICANCE * row.std_error);
            let ratio = smallest(r).gap / largest(r).gap;
            Check::new(
                format!("{name}: gap negative and non-vanishing"),
                negative && ratio > PERSISTENCE_RATIO,
                format!("all negative: {negative}, gap(eps_min)/gap(eps_max) = {ratio:.3}"),
            )
        }
        other => Check::new(format!("case {other}"), true, "no verdict defined"),
    }
}

pub fn optimality_results(cfg: &ExperimentConfig) -> Result<Vec<ProbeResult>> {
    let utility = cfg.validate()?;
    let o = &cfg.optimality;
    let cases = canned_cases(cfg.scenario.h, o.c);
    optimality_probe(&cfg.scenario, &utility, &cases, &o.eps_list, o.omega, o.n_paths, cfg.seed)
}

pub fn run_optimality_suite(cfg: &ExperimentConfig) -> Result<Report> {
    let results = optimality_results(cfg)?;
    let mut t = Table::new(&[
        "case",
        "alpha",
        "omega_id",
        "eps",
        "gap",
        "std_error",
        "scaled_gap",
        "scaled_se",
        "relative_gap",
        "n_paths",
        "n_flagged",
        "seed",
    ]);
    let mut summary = vec![format!(
        "optimality: {} paths per eps, c = {}, omega {}",
        cfg.optimality.n_paths, cfg.optimality.c, cfg.optimality.omega
    )];
    let mut checks = Vec::new();
    for r in &results {
        let alpha = r.case.alpha().map(num).unwrap_or_default();
        for row in &r.rows {
            t.push(vec![
                r.case.name.clone(),
                alpha.clone(),
                r.omega_id.to_string(),
                num(row.eps),
                num(row.gap),
                num(row.std_error),
                num(row.scaled_gap),
                num(row.scaled_se),
                num(row.relative_gap),
                row.n_paths.to_string(),
                row.n_flagged.to_string(),
                cfg.seed.to_string(),
            ]);
            summary.push(format!(
                "case {:<8} eps {:<5} gap {:+.3e} +- {:.2e}  scaled {:+.3e}  relative {:+.3}%",
                r.case.name,
                row.eps,
                row.gap,
                row.std_error,
                row.scaled_gap,
                100.0 * row.relative_gap
            ));
        }
        checks.push(verdict(r, cfg.scenario.h));
    }
    Ok(Report {
        name: "optimality".into(),
        tables: vec![(String::new(), t)],
        summary,
        checks,
    })
}
