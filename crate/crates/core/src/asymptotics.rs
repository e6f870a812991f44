//! First-order expansion objects: φ^ε, the power-utility value expansion,
//! the strategies π⁽⁰⁾, π⁽¹⁾ and the practical constant-fraction strategy,
//! σ_φ², and the general-utility decomposition v⁽⁰⁾ + D₁v⁽⁰⁾φ + ε^{1−H}ρλ̃v⁽¹⁾.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fou::{FactorSimulator, FouParams, History};
use crate::market::{Averages, MarketModel};
use crate::merton::MertonSolution;
use crate::quadrature::GaussHermite;
use crate::rng;
use crate::special::gamma;
use crate::stats;

pub const DEFAULT_INNER_PATHS: usize = 20_000;
/// Stream key for inner (nested) φ paths; distinct from the estimator keys.
pub const PHI_STREAM: u64 = 0x7068_6921;
const PHI_NODES: usize = 48;
/// Largest tolerated tail variance of the truncated history, as a fraction of σ_ou².
pub const PHI_HISTORY_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct ExpansionInputs {
    pub params: FouParams,
    pub model: MarketModel,
    pub averages: Averages,
    pub horizon: f64,
    pub gamma: f64,
}

impl ExpansionInputs {
    pub fn new(params: FouParams, model: MarketModel, horizon: f64) -> Result<Self> {
        params.validate()?;
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::domain(format!("horizon must be positive, got {horizon}")));
        }
        let s = params.sigma_ou();
        if ((model.sigma_ou - s) / s).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "model built with sigma_ou = {} but the factor has sigma_ou = {s}",
                model.sigma_ou
            )));
        }
        let averages = model.averages()?;
        Ok(ExpansionInputs {
            params,
            gamma: model.gamma,
            model,
            averages,
            horizon,
        })
    }

    /// ε^{1−H}.
    pub fn eps_scale(&self) -> f64 {
        self.params.eps.powf(1.0 - self.params.h)
    }

    fn tau(&self, t: f64) -> Result<f64> {
        if !(t <= self.horizon) || t.is_nan() {
            return Err(Error::domain(format!("t = {t} beyond horizon {}", self.horizon)));
        }
        Ok((self.horizon - t).max(0.0))
    }

    /// C_{t,T} = ⟨λλ′⟩(T−t)^{H+½} / (aΓ(H+3/2)).
    pub fn c_tt(&self, t: f64) -> Result<f64> {
        let tau = self.tau(t)?;
        let h = self.params.h;
        Ok(self.averages.avg_lambda_lambda_prime * tau.powf(h + 0.5) / (self.params.a * gamma(h + 1.5)))
    }

    /// ε^{1−H} ρ λ̃ ((1−γ)/γ) C_{t,T}: the deterministic part of the correction bracket.
    pub fn deterministic_correction(&self, t: f64) -> Result<f64> {
        let c2 = (1.0 - self.gamma) / self.gamma;
        Ok(self.eps_scale() * self.model.rho * self.averages.lambda_tilde * c2 * self.c_tt(t)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhiEstimate {
    pub t: f64,
    pub value: f64,
    pub std_error: f64,
    pub n_inner_paths: usize,
}

fn check_history(sim: &FactorSimulator) -> Result<()> {
    let r = sim.truncation()?;
    if r.relative_tail > PHI_HISTORY_TOL * (1.0 + 1e-9) {
        return Err(Error::domain(format!(
            "history [-{:.4}, 0] too short for phi: tail variance {:.3e} = {:.2e} sigma_ou^2 > {PHI_HISTORY_TOL:e} (tail bound {:.3e})",
            r.history_span, r.tail_variance, r.relative_tail, r.tail_bound
        )));
    }
    Ok(())
}

/// Nested Monte Carlo estimate of φ_t^ε given the history and the realised
/// ΔW^Y on [0, t] (`prefix`, so t = prefix.len()·Δt): inner paths resample
/// ΔW^Y on (t, T] and average ½Σ(λ²(Y_k) − λ̄²)Δt over the remaining nodes.
pub fn estimate_phi(
    sim: &FactorSimulator,
    hist: &History,
    prefix: &[f64],
    inputs: &ExpansionInputs,
    n_inner: usize,
    seed: u64,
) -> Result<PhiEstimate> {
    let n = sim.grid.n_steps;
    let k0 = prefix.len();
    let t = sim.grid.time(k0.min(n));
    if k0 > n {
        return Err(Error::domain(format!("prefix of {k0} steps exceeds the {n}-step grid")));
    }
    check_history(sim)?;
    if n_inner < 2 {
        return Err(Error::domain("nested estimate needs at least two inner paths"));
    }
    if k0 == n {
        return Ok(PhiEstimate {
            t,
            value: 0.0,
            std_error: 0.0,
            n_inner_paths: n_inner,
        });
    }
    let dt = sim.grid.dt;
    let lbar2 = inputs.averages.lambda_bar_sq;
    let sd = dt.sqrt();
    let samples: Vec<f64> = (0..n_inner as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::path_rng(seed, PHI_STREAM, i);
            let mut wy = Vec::with_capacity(n);
            wy.extend_from_slice(prefix);
            wy.extend((k0..n).map(|_| sd * r.sample::<f64, _>(StandardNormal)));
            let mut y = vec![0.0; n + 1];
            sim.fill_y(&hist.contribution, &wy, &mut y);
            let terms: Vec<f64> = y[k0..n].iter().map(|&v| inputs.model.lambda_sq(v) - lbar2).collect();
            0.5 * dt * stats::pairwise_sum(&terms)
        })
        .collect();
    Ok(PhiEstimate {
        t,
        value: stats::mean(&samples),
        std_error: stats::std_error(&samples),
        n_inner_paths: n_inner,
    })
}

/// φ₀^ε of the discretised factor by exact conditioning: given the history,
/// Y_k ~ N(m_k, v_k) with m_k the history contribution and v_k = Σ_{m≤k}κ_m²Δt,
/// so φ₀ = ½Σ_k Δt (E[λ²(m_k + √v_k Z)] − λ̄²), evaluated by Gauss–Hermite.
pub fn phi_conditional(sim: &FactorSimulator, hist: &History, inputs: &ExpansionInputs) -> f64 {
    let n = sim.grid.n_steps;
    let dt = sim.grid.dt;
    let v = sim.conditional_variances();
    let gh = GaussHermite::cached(PHI_NODES);
    let lbar2 = inputs.averages.lambda_bar_sq;
    let terms: Vec<f64> = (0..n)
        .map(|k| {
            let (m, s) = (hist.contribution[k], v[k].sqrt());
            gh.expect(|z| inputs.model.lambda_sq(m + s * z) - lbar2)
        })
        .collect();
    0.5 * dt * stats::pairwise_sum(&terms)
}

/// φ₀^ε for omegas 0..n_hist (each with its own history), in omega order.
pub fn phi0_samples(sim: &FactorSimulator, inputs: &ExpansionInputs, seed: u64, n_hist: usize) -> Result<Vec<f64>> {
    check_history(sim)?;
    Ok((0..n_hist as u64)
        .into_par_iter()
        .map(|omega| phi_conditional(sim, &sim.history(seed, omega), inputs))
        .collect())
}

/// 1/(Γ(2H+1) sin πH) − 1/(2H Γ(H+½)²).
pub fn sigma_phi_bracket(h: f64) -> f64 {
    1.0 / (gamma(2.0 * h + 1.0) * (PI * h).sin()) - 1.0 / (2.0 * h * gamma(h + 0.5).powi(2))
}

/// σ_φ² = σ_ou² ⟨λλ′⟩² · bracket(H).
pub fn sigma_phi_sq(inputs: &ExpansionInputs) -> Result<f64> {
    let h = inputs.params.h;
    if !(h > 0.5 && h < 1.0) {
        return Err(Error::domain(format!("sigma_phi^2 needs H in (1/2, 1), got {h}")));
    }
    Ok(inputs.params.sigma_ou_sq() * inputs.averages.avg_lambda_lambda_prime.powi(2) * sigma_phi_bracket(h))
}

/// lim ε^{2H−2}Var(φ₀^ε)/T^{2H} of the discretised factor: ⟨λλ′⟩²·bracket(H)/a².
/// Differs from [`sigma_phi_sq`] by the factor σ_ou², which Monte Carlo on the factor does not support.
pub fn phi_variance_limit(inputs: &ExpansionInputs) -> Result<f64> {
    let h = inputs.params.h;
    if !(h > 0.5 && h < 1.0) {
        return Err(Error::domain(format!("phi variance limit needs H in (1/2, 1), got {h}")));
    }
    Ok((inputs.averages.avg_lambda_lambda_prime / inputs.params.a).powi(2) * sigma_phi_bracket(h))
}

/// Leading Gaussian term of Var(φ₀^ε) for the discretised factor:
/// ⟨λλ′⟩²·Σ_d (Δt Σ_k κ_{k+d})² Δt over the history increments d = 1..h,
/// i.e. the variance of ⟨λλ′⟩∫₀ᵀE[Y_s|𝒢₀]ds. No sampling involved.
pub fn phi_variance_core(sim: &FactorSimulator, inputs: &ExpansionInputs) -> f64 {
    let (n, h, dt) = (sim.grid.n_steps, sim.grid.history_len, sim.grid.dt);
    let taps = sim.taps();
    let mut cum = vec![0.0; n + h + 1];
    for j in 0..n + h {
        cum[j + 1] = cum[j] + taps[j];
    }
    let terms: Vec<f64> = (1..=h)
        .map(|d| {
            let s = dt * (cum[n + d - 1] - cum[d - 1]);
            s * s * dt
        })
        .collect();
    inputs.averages.avg_lambda_lambda_prime.powi(2) * stats::pairwise_sum(&terms)
}

/// Q_t^ε(x) = leading·[1 + ((1−γ)/γ)(φ + deterministic)].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QExpansion {
    pub leading: f64,
    pub phi: f64,
    pub deterministic: f64,
    pub value: f64,
}

pub fn q_expansion_value(t: f64, x: f64, phi: f64, inputs: &ExpansionInputs) -> Result<QExpansion> {
    if !(x > 0.0) {
        return Err(Error::domain(format!("wealth must be positive, got {x}")));
    }
    let g = inputs.gamma;
    let tau = inputs.tau(t)?;
    let leading = x.powf(1.0 - g) / (1.0 - g) * ((1.0 - g) / (2.0 * g) * inputs.averages.lambda_bar_sq * tau).exp();
    let deterministic = inputs.deterministic_correction(t)?;
    Ok(QExpansion {
        leading,
        phi,
        deterministic,
        value: leading * (1.0 + (1.0 - g) / g * (phi + deterministic)),
    })
}

/// π⁽⁰⁾ = λ(y)/σ(y) · R(t, x; λ̄); for power utility R = x/γ.
pub fn strategy_pi0(t: f64, x: f64, y: f64, inputs: &ExpansionInputs, merton: &MertonSolution) -> Result<f64> {
    let sigma = inputs.model.sigma(y);
    if sigma == 0.0 || !sigma.is_finite() {
        return Err(Error::domain(format!("sigma({y}) = {sigma}: pi0 undefined")));
    }
    Ok(inputs.model.lambda(y) / sigma * merton.risk_tolerance(t, x)?)
}

/// π⁽¹⁾ coefficient ρ(1−γ)/(γ²σ(y)) · ⟨λλ′⟩/(aΓ(H+½)) · (T−t)^{H−½} · x,
/// multiplied by ε^{1−H} only when `include_scale` is set.
pub fn strategy_pi1(t: f64, x: f64, y: f64, inputs: &ExpansionInputs, include_scale: bool) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::domain(format!("wealth must be positive, got {x}")));
    }
    let tau = inputs.tau(t)?;
    let h = inputs.params.h;
    if tau == 0.0 {
        return if h > 0.5 {
            Ok(0.0)
        } else {
            Err(Error::domain("pi1 is singular at t = T unless H > 1/2"))
        };
    }
    let sigma = inputs.model.sigma(y);
    if sigma == 0.0 || !sigma.is_finite() {
        return Err(Error::domain(format!("sigma({y}) = {sigma}: pi1 undefined")));
    }
    let g = inputs.gamma;
    let coeff = inputs.model.rho * (1.0 - g) / (g * g * sigma) * inputs.averages.avg_lambda_lambda_prime
        / (inputs.params.a * gamma(h + 0.5))
        * tau.powf(h - 0.5);
    let scale = if include_scale { inputs.eps_scale() } else { 1.0 };
    Ok(scale * coeff * x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PracticalStrategy {
    /// Constant fraction of wealth μ̄/(γσ̄²).
    pub c_star: f64,
    /// μ̄²/σ̄².
    pub sharpe_sq: f64,
    /// exp(((1−γ)/(2γ))·(μ̄²/σ̄²)·T).
    pub value_factor: f64,
    /// λ̄² − μ̄²/σ̄² ≥ 0.
    pub cauchy_schwarz_gap: f64,
}

pub fn practical_strategy(inputs: &ExpansionInputs) -> Result<PracticalStrategy> {
    practical_from_averages(&inputs.averages, inputs.gamma, inputs.horizon)
}

pub fn practical_from_averages(av: &Averages, gamma: f64, horizon: f64) -> Result<PracticalStrategy> {
    if !(av.sigma_bar_sq > 0.0) {
        return Err(Error::domain(format!("sigma_bar^2 must be positive, got {}", av.sigma_bar_sq)));
    }
    let sharpe_sq = av.practical_sharpe_sq();
    Ok(PracticalStrategy {
        c_star: av.mu_bar / (gamma * av.sigma_bar_sq),
        sharpe_sq,
        value_factor: ((1.0 - gamma) / (2.0 * gamma) * sharpe_sq * horizon).exp(),
        cauchy_schwarz_gap: av.lambda_bar_sq - sharpe_sq,
    })
}

/// Q^{π⁰,ε} = v⁽⁰⁾ + D₁v⁽⁰⁾φ + ε^{1−H}ρλ̃v⁽¹⁾ with v⁽¹⁾ = D₁²v⁽⁰⁾·C_{t,T}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeneralCorrection {
    pub c_tt: f64,
    pub v0: f64,
    pub d1_v0: f64,
    pub v1: f64,
    pub value: f64,
}

/// `merton` must be the constant-coefficient solution at λ̄.
pub fn general_utility_correction(
    t: f64,
    x: f64,
    phi: f64,
    inputs: &ExpansionInputs,
    merton: &MertonSolution,
) -> Result<GeneralCorrection> {
    let c_tt = inputs.c_tt(t)?;
    let p = merton.point(t, x)?;
    let d1_v0 = p.risk_tolerance() * p.m_x;
    let v1 = if c_tt == 0.0 { 0.0 } else { merton.d1_squared_value(t, x)? * c_tt };
    let value = p.m + d1_v0 * phi + inputs.eps_scale() * inputs.model.rho * inputs.averages.lambda_tilde * v1;
    Ok(GeneralCorrection {
        c_tt,
        v0: p.m,
        d1_v0,
        v1,
        value,
    })
}

/// D₁²v⁽⁰⁾ = R∂_x(R v_x) by a central difference of step h on g = R·v_x.
pub fn d1_squared_fd(merton: &MertonSolution, t: f64, x: f64, h: f64) -> Result<f64> {
    let g = |x: f64| -> Result<f64> {
        let p = merton.point(t, x)?;
        Ok(p.risk_tolerance() * p.m_x)
    };
    Ok(merton.risk_tolerance(t, x)? * (g(x + h)? - g(x - h)?) / (2.0 * h))
}

/// Formal H ↓ ½ limit: leading·[1 + √ε ρ((1−γ)/γ)² λ̃⟨λλ′⟩(T−t)/a].
pub fn markovian_limit_value(t: f64, x: f64, inputs: &ExpansionInputs) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::domain(format!("wealth must be positive, got {x}")));
    }
    let g = inputs.gamma;
    let tau = inputs.tau(t)?;
    let c2 = (1.0 - g) / g;
    let leading = x.powf(1.0 - g) / (1.0 - g) * (0.5 * c2 * inputs.averages.lambda_bar_sq * tau).exp();
    let av = &inputs.averages;
    Ok(leading
        * (1.0
            + inputs.params.eps.sqrt() * inputs.model.rho * c2 * c2 * av.lambda_tilde * av.avg_lambda_lambda_prime * tau
                / inputs.params.a))
}
