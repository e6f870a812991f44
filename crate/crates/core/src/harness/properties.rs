use std::sync::Arc;

use super::config::ExperimentConfig;
use super::report::{num, Check, Report, Table};
use crate::error::Result;
use crate::fou::{kernel_k, kernel_sq_integral, stationary_variance};
use crate::market::MarketModel;
use crate::merton::{pde_residual, solve_merton_general, solve_merton_power, PowerMixture, UtilitySpec};

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// |σ_ou² closed form − ∫𝒦² quadrature| at (a, H).
pub fn variance_consistency(a: f64, h: f64) -> Result<(f64, f64)> {
    let closed = stationary_variance(a, h);
    Ok((closed, (closed - kernel_sq_integral(a, h)?).abs()))
}

/// sup over [0, 5] of |𝒦(t) − e^{−at}| at H = 0.5001.
pub fn kernel_markov_limit(a: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for t in linspace(1e-3, 5.0, 500) {
        worst = worst.max((kernel_k(t, a, 0.5001)? - (-a * t).exp()).abs());
    }
    Ok(worst)
}

/// max relative difference of the dual solver against the power closed form on a 20×20 grid.
pub fn dual_vs_closed_form(gamma: f64, lambda: f64, horizon: f64) -> Result<f64> {
    let exact = solve_merton_power(gamma, lambda, horizon)?;
    let dual = solve_merton_general(&UtilitySpec::power(gamma)?.as_general(), lambda, horizon)?;
    let mut worst: f64 = 0.0;
    for t in linspace(0.0, horizon, 20) {
        for x in linspace(0.1, 5.0, 20) {
            let (e, d) = (exact.value(t, x)?, dual.value(t, x)?);
            worst = worst.max(((e - d) / e).abs());
        }
    }
    Ok(worst)
}

/// Relative PDE residual of the reference power mixture.
pub fn mixture_residual(lambda: f64, horizon: f64) -> Result<f64> {
    let sol = solve_merton_general(&UtilitySpec::General(Arc::new(PowerMixture::reference())), lambda, horizon)?;
    pde_residual(&sol, lambda, &linspace(0.0, 0.9 * horizon, 10), &linspace(0.2, 5.0, 10))
}

/// max |D₁v + D₂v| / |D₁v| on a grid, power closed form.
pub fn d1_plus_d2(gamma: f64, lambda: f64, horizon: f64) -> Result<f64> {
    let s = solve_merton_power(gamma, lambda, horizon)?;
    let mut worst: f64 = 0.0;
    for t in linspace(0.0, horizon, 10) {
        for x in linspace(0.1, 5.0, 10) {
            let d1 = s.d1_value(t, x)?;
            worst = worst.max(((d1 + s.d2_value(t, x)?) / d1).abs());
        }
    }
    Ok(worst)
}

pub fn run_properties(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let sc = &cfg.scenario;
    let mut checks = Vec::new();
    let mut t = Table::new(&["quantity", "value", "reference", "tolerance"]);
    let mut row = |name: &str, value: f64, reference: f64, tol: f64, check: bool| {
        t.push(vec![name.to_string(), num(value), num(reference), num(tol)]);
        checks.push(Check::new(
            name,
            check,
            format!("{value:.6e} vs {reference:.6e} (tol {tol:e})"),
        ));
    };

    let (s2, diff) = variance_consistency(sc.a, sc.h)?;
    row("sigma_ou^2 closed form vs kernel quadrature", diff, 0.0, 1e-6, diff <= 1e-6);
    if sc.a == 1.0 && sc.h == 0.6 {
        row("sigma_ou^2(a=1, H=0.6)", s2, 0.52573, 1e-5, (s2 - 0.52573).abs() <= 1e-5);
    }
    let k = kernel_markov_limit(sc.a)?;
    row("kernel at H=0.5001 vs exp(-a t) on [0,5]", k, 0.0, 1e-2, k <= 1e-2);

    let m = MarketModel::from_spec(&sc.model, sc.rho, sc.gamma, stationary_variance(sc.a, sc.h).sqrt())?;
    let av = m.averages()?;
    if sc.model == crate::market::ModelSpec::Builtin {
        row("<lambda^2>", av.lambda_bar_sq, 0.49, 1e-6, (av.lambda_bar_sq - 0.49).abs() <= 1e-6);
        row("<mu>", av.mu_bar, 0.087, 1e-3, (av.mu_bar - 0.087).abs() <= 1e-3);
        row("<sigma^2>", av.sigma_bar_sq, 0.0176, 3e-4, (av.sigma_bar_sq - 0.0176).abs() <= 3e-4);
    }
    let (g1, g2) = av.inequality_gaps();
    row("<lambda^2> - lambda_tilde^2 >= 0", g1, 0.0, 0.0, g1 >= -1e-15);
    row("<lambda^2> - <mu>^2/<sigma^2> >= 0", g2, 0.0, 0.0, g2 >= -1e-15);

    let lbar = av.lambda_bar;
    let dual = dual_vs_closed_form(sc.gamma, lbar, sc.horizon)?;
    row("dual solver vs power closed form (20x20)", dual, 0.0, 1e-8, dual <= 1e-8);
    let res = mixture_residual(lbar, sc.horizon)?;
    row("mixture utility PDE residual", res, 0.0, 1e-5, res <= 1e-5);
    let d = d1_plus_d2(sc.gamma, lbar, sc.horizon)?;
    row("D1 v + D2 v = 0 (power)", d, 0.0, 1e-8, d <= 1e-8);

    Ok(Report {
        name: "properties".into(),
        tables: vec![(String::new(), t)],
        summary: vec![format!("properties at a = {}, H = {}, gamma = {}", sc.a, sc.h, sc.gamma)],
        checks,
    })
}
