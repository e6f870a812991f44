use rayon::prelude::*;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::report::{num, Check, Report, Table};
use crate::asymptotics::{phi0_samples, phi_variance_core, phi_variance_limit, sigma_phi_sq, ExpansionInputs};
use crate::error::Result;
use crate::fou::{FactorSimulator, HistoryPolicy};
use crate::stats::{self, LinearFit};

/// Stream key of the stationary paths used for the L² norms.
const NORM_STREAM: u64 = 0x6e6f_726d;

/// An L² norm ‖X‖₂ = √E[X²] with its delta-method standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Norm {
    pub value: f64,
    pub std_error: f64,
}

impl Norm {
    fn of(samples: &[f64]) -> Norm {
        let sq: Vec<f64> = samples.iter().map(|v| v * v).collect();
        let m = stats::mean(&sq);
        let value = m.sqrt();
        let std_error = if value > 0.0 { stats::std_error(&sq) / (2.0 * value) } else { 0.0 };
        Norm { value, std_error }
    }
}

/// ‖η_T‖₂, ‖κ_T‖₂, ‖I_T‖₂ with η = ∫(λ − λ̃), κ = ∫(λλ′ − ⟨λλ′⟩), I = ∫(λ² − λ̄²),
/// left-point sums over stationary paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FluctuationNorms {
    pub eta: Norm,
    pub kappa: Norm,
    pub i: Norm,
}

pub fn fluctuation_norms(sim: &FactorSimulator, inputs: &ExpansionInputs, n_paths: usize, seed: u64) -> FluctuationNorms {
    let m = &inputs.model;
    let av = &inputs.averages;
    let dt = sim.grid.dt;
    let n = sim.grid.n_steps;
    let per_path: Vec<[f64; 3]> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let y = sim.stationary_path(seed, NORM_STREAM, i);
            let mut terms = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
            for &yk in &y[..n] {
                let l = m.lambda(yk);
                terms[0].push(l - av.lambda_tilde);
                terms[1].push(l * m.lambda_prime(yk) - av.avg_lambda_lambda_prime);
                terms[2].push(m.lambda_sq(yk) - av.lambda_bar_sq);
            }
            terms.map(|t| dt * stats::pairwise_sum(&t))
        })
        .collect();
    let col = |j: usize| per_path.iter().map(|r| r[j]).collect::<Vec<f64>>();
    FluctuationNorms {
        eta: Norm::of(&col(0)),
        kappa: Norm::of(&col(1)),
        i: Norm::of(&col(2)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub eps: f64,
    pub dt: f64,
    pub norms: FluctuationNorms,
    pub var_phi: f64,
    pub var_phi_se: f64,
    /// Var(φ₀)·ε^{2H−2}.
    pub var_phi_scaled: f64,
    /// Exact leading Gaussian term of Var(φ₀), scaled by ε^{2H−2}.
    pub var_phi_core_scaled: f64,
    /// σ_φ²T^{2H} as stated, and the σ_ou²-free limit ⟨λλ′⟩²·bracket/a²·T^{2H}.
    pub target_stated: f64,
    pub target_limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeFit {
    pub name: String,
    pub target: f64,
    pub fit: LinearFit,
}

impl SlopeFit {
    /// 95% interval for the slope.
    pub fn ci(&self) -> (f64, f64) {
        (self.fit.slope - 1.96 * self.fit.slope_se, self.fit.slope + 1.96 * self.fit.slope_se)
    }
}

/// Weighted log-log slope; None when any value is non-positive.
pub fn log_log_slope(eps: &[f64], values: &[f64], std_errors: &[f64]) -> Option<LinearFit> {
    if values.iter().any(|v| !(*v > 0.0)) || eps.len() < 2 {
        return None;
    }
    let x: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let y: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let w: Vec<f64> = values.iter().zip(std_errors).map(|(v, s)| (v / s).powi(2)).collect();
    Some(stats::weighted_fit(&x, &y, &w))
}

pub fn scaling_rows(cfg: &ExperimentConfig) -> Result<Vec<ScalingRow>> {
    cfg.validate()?;
    let sc = &cfg.scenario;
    let s = &cfg.scaling;
    let mut rows = Vec::new();
    for &eps in &s.eps_list {
        let p = sc.params(eps)?;
        let inputs = sc.inputs(eps)?;
        let dt = (eps / s.steps_per_eps).min(sc.horizon);
        let norm_sim = FactorSimulator::new(p, HistoryPolicy::default().grid(&p, sc.horizon, dt)?, sc.rho)?;
        let norms = fluctuation_norms(&norm_sim, &inputs, s.n_paths, cfg.seed);
        let phi_sim = FactorSimulator::new(
            p,
            HistoryPolicy::Explicit { m: s.phi_history }.grid(&p, sc.horizon, dt)?,
            sc.rho,
        )?;
        let phi = phi0_samples(&phi_sim, &inputs, cfg.seed, s.n_histories)?;
        let mean = stats::mean(&phi);
        let dev: Vec<f64> = phi.iter().map(|v| (v - mean).powi(2)).collect();
        let var_phi = stats::variance(&phi);
        let var_phi_se = stats::std_error(&dev);
        let scale = eps.powf(2.0 * p.h - 2.0);
        let t2h = sc.horizon.powf(2.0 * p.h);
        let (target_stated, target_limit) = if sc.model.is_constant() {
            (0.0, 0.0)
        } else {
            (sigma_phi_sq(&inputs)? * t2h, phi_variance_limit(&inputs)? * t2h)
        };
        rows.push(ScalingRow {
            eps,
            dt,
            norms,
            var_phi,
            var_phi_se,
            var_phi_scaled: var_phi * scale,
            var_phi_core_scaled: phi_variance_core(&phi_sim, &inputs) * scale,
            target_stated,
            target_limit,
        });
    }
    Ok(rows)
}

/// Slopes of ‖η‖₂, ‖κ‖₂, ‖I‖₂ (target 1−H) and Var(φ₀) (target 2−2H).
pub fn scaling_fits(rows: &[ScalingRow], h: f64) -> Vec<Option<SlopeFit>> {
    let eps: Vec<f64> = rows.iter().map(|r| r.eps).collect();
    let norm_fit = |name: &str, f: &dyn Fn(&FluctuationNorms) -> Norm| {
        let v: Vec<f64> = rows.iter().map(|r| f(&r.norms).value).collect();
        let s: Vec<f64> = rows.iter().map(|r| f(&r.norms).std_error).collect();
        log_log_slope(&eps, &v, &s).map(|fit| SlopeFit {
            name: name.to_string(),
            target: 1.0 - h,
            fit,
        })
    };
    let v: Vec<f64> = rows.iter().map(|r| r.var_phi).collect();
    let s: Vec<f64> = rows.iter().map(|r| r.var_phi_se).collect();
    vec![
        norm_fit("eta", &|n| n.eta),
        norm_fit("kappa", &|n| n.kappa),
        norm_fit("I", &|n| n.i),
        log_log_slope(&eps, &v, &s).map(|fit| SlopeFit {
            name: "var_phi".into(),
            target: 2.0 - 2.0 * h,
            fit,
        }),
    ]
}

pub fn run_scaling_suite(cfg: &ExperimentConfig) -> Result<Report> {
    let rows = scaling_rows(cfg)?;
    let h = cfg.scenario.h;
    let s = &cfg.scaling;
    let mut t = Table::new(&[
        "eps",
        "dt",
        "eta_l2",
        "eta_se",
        "kappa_l2",
        "kappa_se",
        "I_l2",
        "I_se",
        "var_phi",
        "var_phi_se",
        "var_phi_scaled",
        "var_phi_core_scaled",
        "target_stated",
        "target_limit",
    ]);
    for r in &rows {
        let n = &r.norms;
        t.push(vec![
            num(r.eps),
            num(r.dt),
            num(n.eta.value),
            num(n.eta.std_error),
            num(n.kappa.value),
            num(n.kappa.std_error),
            num(n.i.value),
            num(n.i.std_error),
            num(r.var_phi),
            num(r.var_phi_se),
            num(r.var_phi_scaled),
            num(r.var_phi_core_scaled),
            num(r.target_stated),
            num(r.target_limit),
        ]);
    }
    let mut slopes = Table::new(&["quantity", "slope", "slope_se", "ci_low", "ci_high", "target"]);
    let mut checks = Vec::new();
    let mut summary = vec![format!(
        "scaling: H = {h}, dt = eps/{}, {} paths for norms, {} histories for var(phi), phi history {}",
        s.steps_per_eps, s.n_paths, s.n_histories, s.phi_history
    )];
    if cfg.scenario.model.is_constant() {
        let zero = rows
            .iter()
            .all(|r| r.norms.eta.value == 0.0 && r.norms.kappa.value == 0.0 && r.norms.i.value == 0.0 && r.var_phi == 0.0);
        checks.push(Check::new("constant model: all norms identically zero", zero, ""));
    } else {
        for r in &rows {
            summary.push(format!(
                "eps {:<5} var(phi) eps^(2H-2) {:.4e} +- {:.1e}  gaussian core {:.4e}  limit {:.4e}",
                r.eps,
                r.var_phi_scaled,
                r.var_phi_se * r.var_phi_scaled / r.var_phi,
                r.var_phi_core_scaled,
                r.target_limit
            ));
        }
        for f in scaling_fits(&rows, h).into_iter().flatten() {
            let (lo, hi) = f.ci();
            slopes.push(vec![
                f.name.clone(),
                num(f.fit.slope),
                num(f.fit.slope_se),
                num(lo),
                num(hi),
                num(f.target),
            ]);
            summary.push(format!(
                "slope {:<8} {:.3} [{:.3}, {:.3}] target {:.2}",
                f.name, f.fit.slope, lo, hi, f.target
            ));
            checks.push(Check::new(
                format!("{} slope = {:.2} +- {}", f.name, f.target, s.slope_tol),
                (f.fit.slope - f.target).abs() <= s.slope_tol,
                format!("{:.4} (se {:.4})", f.fit.slope, f.fit.slope_se),
            ));
        }
        let last = rows
            .iter()
            .min_by(|a, b| a.eps.total_cmp(&b.eps))
            .expect("non-empty ladder");
        for (name, target) in [("sigma_phi^2 T^2H as stated", last.target_stated), ("sigma_ou-free limit", last.target_limit)] {
            let ratio = last.var_phi_scaled / target;
            checks.push(Check::new(
                format!("var(phi) eps^(2H-2) within {}% of {name} at eps={}", 100.0 * s.level_tol, last.eps),
                (ratio - 1.0).abs() <= s.level_tol,
                format!("{:.4e} vs {:.4e} (ratio {:.3})", last.var_phi_scaled, target, ratio),
            ));
        }
    }
    Ok(Report {
        name: "scaling".into(),
        tables: vec![(String::new(), t), ("slopes".into(), slopes)],
        summary,
        checks,
    })
}
