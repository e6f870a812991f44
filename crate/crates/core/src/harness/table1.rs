use super::config::ExperimentConfig;
use super::report::{num, Check, Report, Table};
use crate::error::{Error, Result};
use crate::mc::{estimate_all, EstimatorReport, GapReport, ValueTriple};
use crate::market::ModelSpec;

/// Bands for the built-in model at ε = 0.01 (normalised V, relative gaps).
pub const BAND_EPS: f64 = 0.01;
pub const BAND_VALUE: (f64, f64) = (1.40, 1.47);
pub const BAND_GAP_PI0: (f64, f64) = (3e-4, 5e-3);
pub const BAND_GAP_PRACTICAL: (f64, f64) = (0.03, 0.09);
/// Gaps must be positive by this many paired standard errors.
pub const GAP_SIGNIFICANCE: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct Table1Cell {
    pub eps: f64,
    pub omega: u64,
    /// Deterministic part of the first-order correction at t = 0.
    pub q_correction: f64,
    pub values: ValueTriple,
}

const COLUMNS: [&str; 14] = [
    "omega_id",
    "eps",
    "estimator",
    "estimate",
    "std_error",
    "n_paths",
    "seed",
    "normalized",
    "normalized_se",
    "relative",
    "relative_se",
    "paired",
    "n_flagged",
    "q_correction",
];

fn estimator_row(c: &Table1Cell, r: &EstimatorReport) -> Vec<String> {
    vec![
        c.omega.to_string(),
        num(c.eps),
        r.estimator.name().to_string(),
        num(r.estimate),
        num(r.std_error),
        r.n_paths.to_string(),
        r.seed.to_string(),
        num(r.normalized),
        num(r.normalized_se),
        String::new(),
        String::new(),
        String::new(),
        r.n_flagged.to_string(),
        num(c.q_correction),
    ]
}

fn gap_row(c: &Table1Cell, name: &str, g: &GapReport) -> Vec<String> {
    let o = &c.values.optimal;
    vec![
        c.omega.to_string(),
        num(c.eps),
        name.to_string(),
        num(g.estimate),
        num(g.std_error),
        o.n_paths.to_string(),
        o.seed.to_string(),
        num(g.normalized),
        num(g.normalized_se),
        num(g.relative),
        num(g.relative_se),
        g.paired.to_string(),
        o.n_flagged.to_string(),
        num(c.q_correction),
    ]
}

fn in_band(x: f64, (lo, hi): (f64, f64)) -> bool {
    x >= lo && x <= hi
}

/// Sign, ordering and (for the built-in model at ε = 0.01) band checks of one cell.
pub fn cell_checks(cfg: &ExperimentConfig, c: &Table1Cell) -> Vec<Check> {
    let v = &c.values;
    let tag = format!("eps={} omega={}", c.eps, c.omega);
    let mut out = Vec::new();
    if cfg.scenario.model.is_constant() {
        for g in [&v.gap_pi0, &v.gap_practical] {
            out.push(Check::new(
                format!("{} vanishes {tag}", g.label),
                g.estimate.abs() <= 3.0 * g.std_error + 1e-12 * v.optimal.estimate.abs(),
                format!("{:.3e} +- {:.3e}", g.estimate, g.std_error),
            ));
        }
        return out;
    }
    // ordering V ≥ V^{π⁰} ≥ V^{π̄⁰} of the point estimates
    out.push(Check::new(
        format!("ordering {tag}"),
        v.optimal.estimate >= v.pi0.estimate && v.pi0.estimate >= v.practical.estimate,
        format!(
            "{:.6} >= {:.6} >= {:.6}",
            v.optimal.normalized, v.pi0.normalized, v.practical.normalized
        ),
    ));
    for g in [&v.gap_pi0, &v.gap_practical] {
        out.push(Check::new(
            format!("{} > {GAP_SIGNIFICANCE} SE {tag}", g.label),
            g.positive_by(GAP_SIGNIFICANCE),
            format!("{:.3e} +- {:.3e} ({:.2} SE)", g.estimate, g.std_error, g.estimate / g.std_error),
        ));
    }
    if cfg.scenario.model == ModelSpec::Builtin && (c.eps - BAND_EPS).abs() < 1e-12 {
        out.push(Check::new(
            format!("normalized V in [{}, {}] {tag}", BAND_VALUE.0, BAND_VALUE.1),
            in_band(v.optimal.normalized, BAND_VALUE),
            format!("{:.5} +- {:.5}", v.optimal.normalized, v.optimal.normalized_se),
        ));
        out.push(Check::new(
            format!("relative gap to pi0 in [{}%, {}%] {tag}", BAND_GAP_PI0.0 * 100.0, BAND_GAP_PI0.1 * 100.0),
            in_band(v.gap_pi0.relative, BAND_GAP_PI0),
            format!("{:.4}% +- {:.4}%", 100.0 * v.gap_pi0.relative, 100.0 * v.gap_pi0.relative_se),
        ));
        out.push(Check::new(
            format!(
                "relative gap to practical in [{}%, {}%] {tag}",
                BAND_GAP_PRACTICAL.0 * 100.0,
                BAND_GAP_PRACTICAL.1 * 100.0
            ),
            in_band(v.gap_practical.relative, BAND_GAP_PRACTICAL),
            format!("{:.3}% +- {:.3}%", 100.0 * v.gap_practical.relative, 100.0 * v.gap_practical.relative_se),
        ));
    }
    out
}

/// All cells of the (ε, omega) grid, ε outer, omega inner.
pub fn table1_cells(cfg: &ExperimentConfig) -> Result<Vec<Table1Cell>> {
    let utility = cfg.validate()?;
    let sc = &cfg.scenario;
    let mut cells = Vec::new();
    for &eps in &cfg.eps_list {
        let sim = sc.simulator(eps)?;
        let inputs = sc.inputs(eps)?;
        let q_correction = inputs.deterministic_correction(0.0)?;
        for &omega in &cfg.omegas {
            let hist = sim.history(cfg.seed, omega);
            let values = estimate_all(&sim, &hist, &inputs, &utility, cfg.n_paths, cfg.seed, sc.x0, cfg.crn)
                .map_err(|e| Error::Numeric {
                    routine: "table1".into(),
                    detail: format!("eps {eps}, omega {omega}: {e}"),
                })?;
            cells.push(Table1Cell {
                eps,
                omega,
                q_correction,
                values,
            });
        }
    }
    Ok(cells)
}

pub fn run_table1(cfg: &ExperimentConfig) -> Result<Report> {
    let cells = table1_cells(cfg)?;
    let mut t = Table::new(&COLUMNS);
    let mut checks = Vec::new();
    let mut summary = vec![format!(
        "table1: {} paths, dt = {}, crn = {}, gamma = {}, rho = {}",
        cfg.n_paths, cfg.scenario.dt, cfg.crn, cfg.scenario.gamma, cfg.scenario.rho
    )];
    for c in &cells {
        let v = &c.values;
        t.push(estimator_row(c, &v.optimal));
        t.push(estimator_row(c, &v.pi0));
        t.push(estimator_row(c, &v.practical));
        t.push(gap_row(c, "gap_pi0", &v.gap_pi0));
        t.push(gap_row(c, "gap_practical", &v.gap_practical));
        summary.push(format!(
            "eps {:<5} omega {:<3} (1-g)V {:.4}  (1-g)V_pi0 {:.4}  (1-g)V_practical {:.4}  gap1 {:.2e} ({:+.3}%)  gap2 {:.2e} ({:+.2}%)",
            c.eps,
            c.omega,
            v.optimal.normalized,
            v.pi0.normalized,
            v.practical.normalized,
            v.gap_pi0.normalized,
            100.0 * v.gap_pi0.relative,
            v.gap_practical.normalized,
            100.0 * v.gap_practical.relative
        ));
        checks.extend(cell_checks(cfg, c));
    }
    // mean relative gaps at the smallest ε against the ~0.1% / ~5% reference levels
    let eps_min = cfg.eps_list.iter().cloned().fold(f64::INFINITY, f64::min);
    let small: Vec<&Table1Cell> = cells.iter().filter(|c| c.eps == eps_min).collect();
    let mean = |f: &dyn Fn(&Table1Cell) -> f64| small.iter().map(|c| f(c)).sum::<f64>() / small.len() as f64;
    summary.push(format!(
        "eps {eps_min}: mean relative gap to pi0 {:.3}% (reference 0.1%), to practical {:.2}% (reference 5%)",
        100.0 * mean(&|c| c.values.gap_pi0.relative),
        100.0 * mean(&|c| c.values.gap_practical.relative)
    ));
    Ok(Report {
        name: "table1".into(),
        tables: vec![(String::new(), t)],
        summary,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::ModelSpec;

    fn small(model: ModelSpec) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.scenario.model = model;
        c.scenario.dt = 0.02;
        c.n_paths = 2000;
        c.omegas = vec![1];
        c.eps_list = vec![0.1];
        c
    }

    #[test]
    fn constant_model_gaps_vanish() {
        let r = run_table1(&small(ModelSpec::Constant { lambda: 0.5, sigma: 0.2 })).unwrap();
        assert_eq!(r.checks.len(), 2);
        assert!(r.passed(), "{:?}", r.checks);
        assert_eq!(r.tables[0].1.rows.len(), 5);
    }

    #[test]
    fn correction_column_flips_with_rho() {
        let a = small(ModelSpec::Builtin);
        let mut b = a.clone();
        b.scenario.rho = 0.5;
        b.n_paths = 2;
        let mut a2 = a.clone();
        a2.n_paths = 2;
        let qa = table1_cells(&a2).unwrap()[0].q_correction;
        let qb = table1_cells(&b).unwrap()[0].q_correction;
        assert!(qa < 0.0 && (qa + qb).abs() < 1e-15);
    }
}
