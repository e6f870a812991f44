//! Sharpe-ratio, return and volatility functions of the factor, and their
//! averages under the invariant law N(0, σ_ou²).

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::GaussHermite;
use crate::special::{norm_cdf, norm_pdf};

const LAMBDA_SQ_FLOOR: f64 = 1e-300;
pub const DEFAULT_NODES: usize = 200;

/// A factor-dependent market: λ²(y), its derivative, and μ(y).
/// σ is always derived as μ/λ.
pub trait SharpeShape: Send + Sync {
    fn id(&self) -> String;
    fn lambda_sq(&self, y: f64) -> f64;
    /// d/dy λ²(y).
    fn lambda_sq_prime(&self, y: f64) -> f64;
    fn mu(&self, y: f64) -> f64;
    /// True when λ and μ do not depend on y (averages are then exact).
    fn is_constant(&self) -> bool {
        false
    }
}

/// λ²(y) = ½∫_{−∞}^{y/σ_ou} p(z/2) dz = Φ(y / (2σ_ou)),
/// μ(y) = 0.1 λ(y) / (0.1 + λ(y)).
#[derive(Debug, Clone, Copy)]
pub struct BuiltinModel {
    pub sigma_ou: f64,
}

pub fn builtin_lambda_sq(y: f64, sigma_ou: f64) -> f64 {
    norm_cdf(y / (2.0 * sigma_ou))
}

pub fn builtin_mu_from_lambda(lambda: f64) -> f64 {
    0.1 * lambda / (0.1 + lambda)
}

impl SharpeShape for BuiltinModel {
    fn id(&self) -> String {
        "paper-3.6".into()
    }
    fn lambda_sq(&self, y: f64) -> f64 {
        builtin_lambda_sq(y, self.sigma_ou)
    }
    fn lambda_sq_prime(&self, y: f64) -> f64 {
        norm_pdf(y / (2.0 * self.sigma_ou)) / (2.0 * self.sigma_ou)
    }
    fn mu(&self, y: f64) -> f64 {
        builtin_mu_from_lambda(self.lambda_sq(y).max(LAMBDA_SQ_FLOOR).sqrt())
    }
}

/// Constant coefficients: the classical Merton market.
#[derive(Debug, Clone, Copy)]
pub struct ConstantModel {
    pub lambda: f64,
    pub sigma: f64,
}

impl SharpeShape for ConstantModel {
    fn id(&self) -> String {
        format!("constant(lambda={}, sigma={})", self.lambda, self.sigma)
    }
    fn lambda_sq(&self, _: f64) -> f64 {
        self.lambda * self.lambda
    }
    fn lambda_sq_prime(&self, _: f64) -> f64 {
        0.0
    }
    fn mu(&self, _: f64) -> f64 {
        self.lambda * self.sigma
    }
    fn is_constant(&self) -> bool {
        true
    }
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// User-supplied (λ², μ) pair; (λ²)′ by central differences unless given.
#[derive(Clone)]
pub struct ClosureModel {
    pub name: String,
    pub lambda_sq: ScalarFn,
    pub lambda_sq_prime: Option<ScalarFn>,
    pub mu: ScalarFn,
}

impl SharpeShape for ClosureModel {
    fn id(&self) -> String {
        self.name.clone()
    }
    fn lambda_sq(&self, y: f64) -> f64 {
        (self.lambda_sq)(y)
    }
    fn lambda_sq_prime(&self, y: f64) -> f64 {
        match &self.lambda_sq_prime {
            Some(f) => f(y),
            None => {
                let h = 1e-5 * y.abs().max(1.0);
                ((self.lambda_sq)(y + h) - (self.lambda_sq)(y - h)) / (2.0 * h)
            }
        }
    }
    fn mu(&self, y: f64) -> f64 {
        (self.mu)(y)
    }
}

/// Config-level model selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id")]
pub enum ModelSpec {
    #[serde(rename = "paper-3.6")]
    Builtin,
    #[serde(rename = "constant")]
    Constant { lambda: f64, sigma: f64 },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Builtin
    }
}

impl ModelSpec {
    pub fn shape(&self, sigma_ou: f64) -> Arc<dyn SharpeShape> {
        match *self {
            ModelSpec::Builtin => Arc::new(BuiltinModel { sigma_ou }),
            ModelSpec::Constant { lambda, sigma } => Arc::new(ConstantModel { lambda, sigma }),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, ModelSpec::Constant { .. })
    }
}

/// A market driven by the factor, with correlation ρ and the investor's γ.
#[derive(Clone)]
pub struct MarketModel {
    pub shape: Arc<dyn SharpeShape>,
    pub rho: f64,
    pub gamma: f64,
    pub sigma_ou: f64,
}

impl fmt::Debug for MarketModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MarketModel")
            .field("model", &self.shape.id())
            .field("rho", &self.rho)
            .field("gamma", &self.gamma)
            .field("sigma_ou", &self.sigma_ou)
            .finish()
    }
}

impl MarketModel {
    pub fn new(shape: Arc<dyn SharpeShape>, rho: f64, gamma: f64, sigma_ou: f64) -> Result<Self> {
        if !(rho.abs() < 1.0) {
            return Err(Error::domain(format!("|rho| must be < 1, got {rho}")));
        }
        if !(gamma > 0.0) || gamma == 1.0 {
            return Err(Error::domain(format!(
                "gamma must be positive and != 1 (log utility is out of scope), got {gamma}"
            )));
        }
        if !(sigma_ou > 0.0) {
            return Err(Error::domain(format!("sigma_ou must be positive, got {sigma_ou}")));
        }
        Ok(MarketModel {
            shape,
            rho,
            gamma,
            sigma_ou,
        })
    }

    pub fn builtin(rho: f64, gamma: f64, sigma_ou: f64) -> Result<Self> {
        MarketModel::new(Arc::new(BuiltinModel { sigma_ou }), rho, gamma, sigma_ou)
    }

    pub fn from_spec(spec: &ModelSpec, rho: f64, gamma: f64, sigma_ou: f64) -> Result<Self> {
        MarketModel::new(spec.shape(sigma_ou), rho, gamma, sigma_ou)
    }

    #[inline]
    pub fn lambda_sq(&self, y: f64) -> f64 {
        self.shape.lambda_sq(y).max(LAMBDA_SQ_FLOOR)
    }

    #[inline]
    pub fn lambda(&self, y: f64) -> f64 {
        self.lambda_sq(y).sqrt()
    }

    /// λ′ = (λ²)′ / (2λ).
    #[inline]
    pub fn lambda_prime(&self, y: f64) -> f64 {
        self.shape.lambda_sq_prime(y) / (2.0 * self.lambda(y))
    }

    #[inline]
    pub fn mu(&self, y: f64) -> f64 {
        self.shape.mu(y)
    }

    #[inline]
    pub fn sigma(&self, y: f64) -> f64 {
        self.mu(y) / self.lambda(y)
    }

    /// Structural checks on a grid over ±`width`·σ_ou: σ > 0, λ bounded and
    /// λ′ consistent with central differences.
    pub fn check(&self, width: f64, n: usize) -> Result<()> {
        let mut sup_lambda: f64 = 0.0;
        for i in 0..=n {
            let y = self.sigma_ou * width * (2.0 * i as f64 / n as f64 - 1.0);
            let s = self.sigma(y);
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Spec(format!("sigma(y) = {s} at y = {y}")));
            }
            let l = self.lambda(y);
            if !l.is_finite() {
                return Err(Error::Spec(format!("lambda(y) not finite at y = {y}")));
            }
            sup_lambda = sup_lambda.max(l);
            let h = 1e-5 * y.abs().max(1.0);
            let fd = (self.lambda(y + h) - self.lambda(y - h)) / (2.0 * h);
            let an = self.lambda_prime(y);
            if (fd - an).abs() > 1e-6 * an.abs().max(1.0) {
                return Err(Error::Spec(format!(
                    "lambda' = {an} disagrees with finite difference {fd} at y = {y}"
                )));
            }
        }
        if !(sup_lambda < 1e6) {
            return Err(Error::Spec("lambda is not bounded on the check grid".into()));
        }
        Ok(())
    }

    pub fn averages(&self) -> Result<Averages> {
        Averages::compute(self, DEFAULT_NODES)
    }
}

/// ⟨g⟩ under N(0, σ_ou²) by `n_nodes`-point Gauss–Hermite, verified by
/// doubling the node count.
pub fn invariant_average<F: Fn(f64) -> f64>(g: F, sigma_ou: f64, n_nodes: usize) -> Result<f64> {
    let coarse = GaussHermite::cached(n_nodes).expect(|z| g(sigma_ou * z));
    let fine = GaussHermite::cached(2 * n_nodes).expect(|z| g(sigma_ou * z));
    if !coarse.is_finite() || (coarse - fine).abs() > 1e-8 * coarse.abs().max(1.0) {
        return Err(Error::numeric(
            "invariant_average",
            format!("{n_nodes} nodes give {coarse:e}, {} give {fine:e}", 2 * n_nodes),
        ));
    }
    Ok(coarse)
}

/// q = γ / (γ + (1−γ)ρ²).
pub fn distortion_q(gamma: f64, rho: f64) -> Result<f64> {
    if !(gamma > 0.0) || gamma == 1.0 {
        return Err(Error::domain(format!(
            "gamma must be positive and != 1 (log utility is out of scope), got {gamma}"
        )));
    }
    if !(rho.abs() < 1.0) {
        return Err(Error::domain(format!("|rho| must be < 1, got {rho}")));
    }
    Ok(gamma / (gamma + (1.0 - gamma) * rho * rho))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Averages {
    pub lambda_bar_sq: f64,
    pub lambda_bar: f64,
    pub lambda_tilde: f64,
    pub avg_lambda_lambda_prime: f64,
    pub mu_bar: f64,
    pub sigma_bar_sq: f64,
    pub q: f64,
}

impl Averages {
    pub fn compute(m: &MarketModel, n_nodes: usize) -> Result<Self> {
        if m.shape.is_constant() {
            let l2 = m.lambda_sq(0.0);
            return Ok(Averages {
                lambda_bar_sq: l2,
                lambda_bar: l2.sqrt(),
                lambda_tilde: m.lambda(0.0),
                avg_lambda_lambda_prime: 0.0,
                mu_bar: m.mu(0.0),
                sigma_bar_sq: m.sigma(0.0).powi(2),
                q: distortion_q(m.gamma, m.rho)?,
            });
        }
        let s = m.sigma_ou;
        let lambda_bar_sq = invariant_average(|y| m.lambda_sq(y), s, n_nodes)?;
        let lambda_tilde = invariant_average(|y| m.lambda(y), s, n_nodes)?;
        // λλ′ = (λ²)′/2
        let avg_ll = invariant_average(|y| 0.5 * m.shape.lambda_sq_prime(y), s, n_nodes)?;
        let mu_bar = invariant_average(|y| m.mu(y), s, n_nodes)?;
        let sigma_bar_sq = invariant_average(|y| m.sigma(y).powi(2), s, n_nodes)?;
        Ok(Averages {
            lambda_bar_sq,
            lambda_bar: lambda_bar_sq.sqrt(),
            lambda_tilde,
            avg_lambda_lambda_prime: avg_ll,
            mu_bar,
            sigma_bar_sq,
            q: distortion_q(m.gamma, m.rho)?,
        })
    }

    /// μ̄²/σ̄²: squared Sharpe ratio seen by a factor-blind investor.
    pub fn practical_sharpe_sq(&self) -> f64 {
        self.mu_bar * self.mu_bar / self.sigma_bar_sq
    }

    /// Jensen (⟨λ²⟩ ≥ ⟨λ⟩²) and Cauchy–Schwarz (⟨λ²⟩ ≥ μ̄²/σ̄²) gaps; both
    /// must be non-negative.
    pub fn inequality_gaps(&self) -> (f64, f64) {
        (
            self.lambda_bar_sq - self.lambda_tilde * self.lambda_tilde,
            self.lambda_bar_sq - self.practical_sharpe_sq(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fou::stationary_variance;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn builtin() -> MarketModel {
        MarketModel::builtin(-0.5, 0.4, stationary_variance(1.0, 0.6).sqrt()).unwrap()
    }

    #[test]
    fn builtin_lambda_sq_values() {
        let s = 0.725;
        assert!((builtin_lambda_sq(1e6, s) - 1.0).abs() < 1e-15);
        assert_eq!(builtin_lambda_sq(0.0, s), 0.5);
        let m = builtin();
        assert!((m.lambda(0.0) - 0.5f64.sqrt()).abs() < 1e-15);
        let mut prev = 0.0;
        for i in 0..100 {
            let v = builtin_lambda_sq(-5.0 + 0.1 * i as f64, s);
            assert!(v > prev && v < 1.0);
            prev = v;
        }
    }

    #[test]
    fn builtin_mu_values() {
        assert!((builtin_mu_from_lambda(0.1) - 0.05).abs() < 1e-16);
        let m = builtin();
        for i in 0..50 {
            let y = -4.0 + 0.16 * i as f64;
            assert!(m.mu(y) > 0.0 && m.mu(y) < 0.1);
        }
    }

    #[test]
    fn builtin_averages_against_reference_values() {
        let a = builtin().averages().unwrap();
        // ⟨μ⟩ = 0.087 and ⟨σ²⟩ = 0.0176 as reported
        assert!((a.mu_bar - 0.087).abs() < 1e-3, "{}", a.mu_bar);
        assert!((a.sigma_bar_sq - 0.0176).abs() < 3e-4, "{}", a.sigma_bar_sq);
        // λ² = Φ(y/(2σ_ou)) has mean exactly 1/2 under N(0, σ_ou²)
        assert!((a.lambda_bar_sq - 0.5).abs() < 1e-12);
        assert!((a.q - 0.4 / 0.55).abs() < 1e-15);
    }

    #[test]
    fn invariant_average_trivial_cases() {
        assert!((invariant_average(|_| 3.5, 0.7, 50).unwrap() - 3.5).abs() < 1e-14);
        assert!((invariant_average(|y| y * y, 0.7, 50).unwrap() - 0.49).abs() < 1e-14);
        // |y| is not smooth: doubling detects insufficient resolution
        assert!(invariant_average(|y: f64| y.abs(), 1.0, 10).is_err());
    }

    #[test]
    fn lambda_lambda_prime_matches_monte_carlo() {
        let m = builtin();
        let a = m.averages().unwrap();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let y = m.sigma_ou * r.sample::<f64, _>(StandardNormal);
                m.lambda(y) * m.lambda_prime(y)
            })
            .collect();
        let mean = crate::stats::mean(&xs);
        let se = crate::stats::std_error(&xs);
        assert!((mean - a.avg_lambda_lambda_prime).abs() < 3.0 * se, "{mean} ± {se} vs {}", a.avg_lambda_lambda_prime);
    }

    #[test]
    fn lambda_prime_chain_rule_and_checks() {
        let m = builtin();
        m.check(5.0, 400).unwrap();
        let s = m.sigma_ou;
        for i in 0..=100 {
            let y = -5.0 * s + 0.1 * s * i as f64;
            let h = 1e-5;
            let fd = (m.lambda(y + h) - m.lambda(y - h)) / (2.0 * h);
            assert!((fd - m.lambda_prime(y)).abs() < 1e-6);
        }
    }

    #[test]
    fn inequality_chain_is_strict_for_builtin_model() {
        let a = builtin().averages().unwrap();
        let (jensen, cs) = a.inequality_gaps();
        assert!(jensen > 0.0 && cs > 0.0);
        assert!(a.lambda_bar_sq > a.practical_sharpe_sq());
        // reported rounded values give 0.087²/0.0176 = 0.4301
        assert!((0.087f64.powi(2) / 0.0176 - 0.4301).abs() < 1e-4);
    }

    #[test]
    fn constant_model_has_no_gaps() {
        let m = MarketModel::from_spec(&ModelSpec::Constant { lambda: 0.7, sigma: 0.2 }, -0.5, 0.4, 0.7).unwrap();
        let a = m.averages().unwrap();
        let (jensen, cs) = a.inequality_gaps();
        assert!(jensen.abs() < 1e-14 && cs.abs() < 1e-14);
        assert_eq!(a.avg_lambda_lambda_prime, 0.0);
    }

    #[test]
    fn closure_model_uses_finite_difference_derivative() {
        let shape = ClosureModel {
            name: "tanh".into(),
            lambda_sq: Arc::new(|y: f64| 0.3 + 0.1 * y.tanh()),
            lambda_sq_prime: None,
            mu: Arc::new(|y: f64| 0.05 * (0.3 + 0.1 * y.tanh()).sqrt()),
        };
        let m = MarketModel::new(Arc::new(shape), 0.2, 2.0, 0.6).unwrap();
        m.check(5.0, 200).unwrap();
        assert!((m.sigma(0.3) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn distortion_exponent() {
        assert_eq!(distortion_q(0.4, 0.0).unwrap(), 1.0);
        assert!((distortion_q(0.4, -0.5).unwrap() - 0.727_272_727_272_727_3).abs() < 1e-15);
        assert!((distortion_q(2.0, -0.5).unwrap() - 1.142_857_142_857_142_8).abs() < 1e-15);
        assert!(matches!(distortion_q(1.0, 0.3), Err(Error::Domain(_))));
    }

    #[test]
    fn model_spec_round_trip() {
        let s: ModelSpec = serde_json::from_str(r#"{"id":"paper-3.6"}"#).unwrap();
        assert_eq!(s, ModelSpec::Builtin);
        let c: ModelSpec = serde_json::from_str(r#"{"id":"constant","lambda":0.7,"sigma":0.2}"#).unwrap();
        assert!(c.is_constant());
    }
}
