//! Constant-coefficient Merton problem: closed form for power utility, dual
//! terminal-wealth construction for general utilities, risk tolerance and
//! the operators D_k.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::GaussHermite;

pub const MERTON_NODES: usize = 200;
const BUDGET_TOL: f64 = 1e-12;

/// Utility on (0, ∞) with marginal inverse I = (U′)^{−1}.
pub trait Utility: Send + Sync {
    fn name(&self) -> String;
    fn u(&self, x: f64) -> f64;
    fn u_prime(&self, x: f64) -> f64;
    fn u_second(&self, x: f64) -> f64;
    fn inverse_marginal(&self, y: f64) -> f64;
    /// Closed-form absolute risk tolerance −U′/U″ when cheap.
    fn risk_tolerance(&self, x: f64) -> f64 {
        -self.u_prime(x) / self.u_second(x)
    }
}

/// U(x) = x^{1−γ}/(1−γ).
#[derive(Debug, Clone, Copy)]
pub struct PowerUtility {
    pub gamma: f64,
}

impl Utility for PowerUtility {
    fn name(&self) -> String {
        format!("power(gamma={})", self.gamma)
    }
    fn u(&self, x: f64) -> f64 {
        x.powf(1.0 - self.gamma) / (1.0 - self.gamma)
    }
    fn u_prime(&self, x: f64) -> f64 {
        x.powf(-self.gamma)
    }
    fn u_second(&self, x: f64) -> f64 {
        -self.gamma * x.powf(-self.gamma - 1.0)
    }
    fn inverse_marginal(&self, y: f64) -> f64 {
        y.powf(-1.0 / self.gamma)
    }
}

/// Σ wᵢ x^{1−γᵢ}/(1−γᵢ): a positive mixture of power utilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerMixture {
    pub terms: Vec<MixtureTerm>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureTerm {
    pub weight: f64,
    pub gamma: f64,
}

impl PowerMixture {
    /// ½·(2√x) + ½·(x^{0.6}/0.6).
    pub fn reference() -> Self {
        PowerMixture {
            terms: vec![
                MixtureTerm { weight: 0.5, gamma: 0.5 },
                MixtureTerm { weight: 0.5, gamma: 0.4 },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::Spec("mixture utility needs at least one term".into()));
        }
        for t in &self.terms {
            if !(t.weight > 0.0) || !(t.gamma > 0.0) || t.gamma == 1.0 {
                return Err(Error::Spec(format!(
                    "mixture term needs weight > 0 and gamma in (0,1) ∪ (1,∞), got {t:?}"
                )));
            }
        }
        Ok(())
    }
}

impl Utility for PowerMixture {
    fn name(&self) -> String {
        let parts: Vec<String> = self
            .terms
            .iter()
            .map(|t| format!("{}*power({})", t.weight, t.gamma))
            .collect();
        format!("mixture[{}]", parts.join(" + "))
    }
    fn u(&self, x: f64) -> f64 {
        self.terms
            .iter()
            .map(|t| t.weight * x.powf(1.0 - t.gamma) / (1.0 - t.gamma))
            .sum()
    }
    fn u_prime(&self, x: f64) -> f64 {
        self.terms.iter().map(|t| t.weight * x.powf(-t.gamma)).sum()
    }
    fn u_second(&self, x: f64) -> f64 {
        self.terms
            .iter()
            .map(|t| -t.weight * t.gamma * x.powf(-t.gamma - 1.0))
            .sum()
    }
    /// Solves U′(x) = y by safeguarded Newton in s = ln x.
    fn inverse_marginal(&self, y: f64) -> f64 {
        let target = y.ln();
        let f = |s: f64| self.u_prime(s.exp()).ln() - target;
        // d/ds ln U′(e^s) = x U″/U′
        let df = |s: f64| {
            let x = s.exp();
            x * self.u_second(x) / self.u_prime(x)
        };
        let gmin = self.terms.iter().map(|t| t.gamma).fold(f64::INFINITY, f64::min);
        let mut s = -target / gmin;
        let (mut lo, mut hi) = (s - 1.0, s + 1.0);
        while f(lo) < 0.0 {
            lo -= 2.0 * (hi - lo);
        }
        while f(hi) > 0.0 {
            hi += 2.0 * (hi - lo);
        }
        for _ in 0..200 {
            let v = f(s);
            if v > 0.0 {
                lo = s;
            } else {
                hi = s;
            }
            let mut next = s - v / df(s);
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - s).abs() < 1e-15 * s.abs().max(1.0) {
                s = next;
                break;
            }
            s = next;
        }
        s.exp()
    }
}

/// Either the power family (closed forms available) or any utility served
/// through the numerical dual solver.
#[derive(Clone)]
pub enum UtilitySpec {
    Power { gamma: f64 },
    General(Arc<dyn Utility>),
}

impl fmt::Debug for UtilitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UtilitySpec::Power { gamma } => write!(f, "Power {{ gamma: {gamma} }}"),
            UtilitySpec::General(u) => write!(f, "General({})", u.name()),
        }
    }
}

/// Config-level utility selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UtilityConfig {
    Power { gamma: f64 },
    Mixture(PowerMixture),
}

impl UtilityConfig {
    pub fn build(&self) -> Result<UtilitySpec> {
        let spec = match self {
            UtilityConfig::Power { gamma } => UtilitySpec::Power { gamma: *gamma },
            UtilityConfig::Mixture(m) => {
                m.validate()?;
                UtilitySpec::General(Arc::new(m.clone()))
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl UtilitySpec {
    pub fn power(gamma: f64) -> Result<Self> {
        let s = UtilitySpec::Power { gamma };
        s.validate()?;
        Ok(s)
    }

    pub fn utility(&self) -> Arc<dyn Utility> {
        match self {
            UtilitySpec::Power { gamma } => Arc::new(PowerUtility { gamma: *gamma }),
            UtilitySpec::General(u) => u.clone(),
        }
    }

    /// The same utility routed through the general solver.
    pub fn as_general(&self) -> UtilitySpec {
        UtilitySpec::General(self.utility())
    }

    pub fn power_gamma(&self) -> Option<f64> {
        match self {
            UtilitySpec::Power { gamma } => Some(*gamma),
            UtilitySpec::General(_) => None,
        }
    }

    /// Monotonicity, concavity, Inada limits, inverse-marginal consistency
    /// and a polynomial growth bound on I, all on sample grids.
    pub fn validate(&self) -> Result<()> {
        if let UtilitySpec::Power { gamma } = self {
            if !(*gamma > 0.0) || *gamma == 1.0 {
                return Err(Error::domain(format!(
                    "power utility needs gamma > 0 and != 1, got {gamma}"
                )));
            }
        }
        let u = self.utility();
        let xs: Vec<f64> = (-40..=40).map(|k| 10f64.powf(k as f64 / 8.0)).collect();
        for w in xs.windows(2) {
            if !(u.u(w[1]) > u.u(w[0])) {
                return Err(Error::Spec(format!("U not increasing between {} and {}", w[0], w[1])));
            }
        }
        for &x in &xs {
            if !(u.u_prime(x) > 0.0) || !(u.u_second(x) < 0.0) {
                return Err(Error::Spec(format!("U not strictly increasing and concave at x = {x}")));
            }
            let back = u.inverse_marginal(u.u_prime(x));
            if ((back - x) / x).abs() > 1e-9 {
                return Err(Error::Spec(format!("I(U'(x)) = {back} != x = {x}")));
            }
        }
        // power utility satisfies the Inada limits analytically; x^-γ with small γ
        // moves too slowly for a finite-range probe
        let u1 = u.u_prime(1.0);
        if self.power_gamma().is_none() && !(u.u_prime(1e-60) > 1e3 * u1 && u.u_prime(1e60) < 1e-3 * u1) {
            return Err(Error::Spec("Inada conditions U'(0+) = inf, U'(inf) = 0 fail numerically".into()));
        }
        // I(y) ≤ α + κ y^{−α}: the growth exponent of I at small y must be finite
        let alpha = (1..=12)
            .map(|k| {
                let y = 10f64.powi(-k);
                u.inverse_marginal(y).ln() / (1.0 / y).ln()
            })
            .fold(0.0f64, f64::max);
        if !alpha.is_finite() || alpha > 1e3 {
            return Err(Error::Spec(format!("inverse marginal grows faster than any power (exponent {alpha})")));
        }
        Ok(())
    }
}

/// Solution of the Merton problem with constant Sharpe ratio `lambda` on [0, T].
#[derive(Clone)]
pub struct MertonSolution {
    pub utility: UtilitySpec,
    pub lambda_param: f64,
    pub horizon: f64,
    rule: Arc<GaussHermite>,
}

impl fmt::Debug for MertonSolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MertonSolution")
            .field("utility", &self.utility)
            .field("lambda", &self.lambda_param)
            .field("horizon", &self.horizon)
            .finish()
    }
}

/// Value and first two x-derivatives at one (t, x).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValuePoint {
    pub m: f64,
    pub m_x: f64,
    pub m_xx: f64,
}

impl ValuePoint {
    pub fn risk_tolerance(&self) -> f64 {
        -self.m_x / self.m_xx
    }
}

pub fn solve_merton_power(gamma: f64, lambda: f64, horizon: f64) -> Result<MertonSolution> {
    let utility = UtilitySpec::power(gamma)?;
    MertonSolution::new(utility, lambda, horizon)
}

/// General utility through the dual construction (even for power specs).
pub fn solve_merton_general(spec: &UtilitySpec, lambda: f64, horizon: f64) -> Result<MertonSolution> {
    spec.validate()?;
    MertonSolution::new(spec.as_general(), lambda, horizon)
}

impl MertonSolution {
    pub fn new(utility: UtilitySpec, lambda: f64, horizon: f64) -> Result<Self> {
        if !lambda.is_finite() || !(horizon >= 0.0) {
            return Err(Error::domain(format!("need finite lambda and T >= 0, got {lambda}, {horizon}")));
        }
        Ok(MertonSolution {
            utility,
            lambda_param: lambda,
            horizon,
            rule: GaussHermite::cached(MERTON_NODES),
        })
    }

    fn check_point(&self, t: f64, x: f64) -> Result<f64> {
        if !(x > 0.0) {
            return Err(Error::domain(format!("wealth must be positive, got x = {x}")));
        }
        if !(t <= self.horizon + 1e-12) {
            return Err(Error::domain(format!("t = {t} beyond horizon {}", self.horizon)));
        }
        Ok((self.horizon - t).max(0.0))
    }

    /// M, M_x, M_xx at (t, x).
    pub fn point(&self, t: f64, x: f64) -> Result<ValuePoint> {
        let tau = self.check_point(t, x)?;
        let lam = self.lambda_param;
        match self.utility {
            UtilitySpec::Power { gamma } => {
                let growth = ((1.0 - gamma) / (2.0 * gamma) * lam * lam * tau).exp();
                Ok(ValuePoint {
                    m: x.powf(1.0 - gamma) / (1.0 - gamma) * growth,
                    m_x: x.powf(-gamma) * growth,
                    m_xx: -gamma * x.powf(-gamma - 1.0) * growth,
                })
            }
            UtilitySpec::General(ref u) => {
                if tau == 0.0 || lam == 0.0 {
                    return Ok(ValuePoint {
                        m: u.u(x),
                        m_x: u.u_prime(x),
                        m_xx: u.u_second(x),
                    });
                }
                self.dual_point(u.as_ref(), tau, x)
            }
        }
    }

    fn dual_point(&self, u: &dyn Utility, tau: f64, x: f64) -> Result<ValuePoint> {
        let lam = self.lambda_param;
        let s = lam * tau.sqrt();
        let xi: Vec<f64> = self
            .rule
            .nodes()
            .iter()
            .map(|z| (-s * z - 0.5 * s * s).exp())
            .collect();
        let w = self.rule.weights();
        // budget B(y) = E[ξ I(yξ)], decreasing in y
        let budget = |ln_y: f64| -> (f64, f64) {
            let y = ln_y.exp();
            let mut b = 0.0;
            let mut db = 0.0; // dB/d ln y = E[ξ · yξ · I′(yξ)]
            for (wi, &xi_j) in w.iter().zip(&xi) {
                let c = u.inverse_marginal(y * xi_j);
                let dc = 1.0 / u.u_second(c); // I′(v) = 1/U″(I(v))
                b += wi * xi_j * c;
                db += wi * xi_j * y * xi_j * dc;
            }
            (b, db)
        };
        let mut ln_y = u.u_prime(x).ln();
        let (mut lo, mut hi) = (ln_y - 1.0, ln_y + 1.0);
        let mut expand = 0;
        while budget(lo).0 < x || budget(hi).0 > x {
            if budget(lo).0 < x {
                lo -= 2.0 * (hi - lo);
            }
            if budget(hi).0 > x {
                hi += 2.0 * (hi - lo);
            }
            expand += 1;
            if expand > 60 || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::domain(format!(
                    "budget equation E[xi I(y xi)] = {x} cannot be bracketed (wealth outside reachable range)"
                )));
            }
        }
        let mut converged = false;
        for _ in 0..200 {
            let (b, db) = budget(ln_y);
            if !b.is_finite() || !db.is_finite() {
                return Err(Error::Spec(format!(
                    "inverse marginal produced non-finite budget at y = {:e} (Inada violation?)",
                    ln_y.exp()
                )));
            }
            let r = b - x;
            if r.abs() <= BUDGET_TOL * x {
                converged = true;
                break;
            }
            if r > 0.0 {
                lo = ln_y;
            } else {
                hi = ln_y;
            }
            let mut next = ln_y - r / db;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            ln_y = next;
        }
        if !converged {
            return Err(Error::numeric(
                "merton_dual",
                format!("budget root not found to {BUDGET_TOL:e} at x = {x}, tau = {tau}"),
            ));
        }
        let y = ln_y.exp();
        let mut m = 0.0;
        let mut dx_dy = 0.0;
        for (wi, &xi_j) in w.iter().zip(&xi) {
            let c = u.inverse_marginal(y * xi_j);
            m += wi * u.u(c);
            dx_dy += wi * xi_j * xi_j / u.u_second(c);
        }
        Ok(ValuePoint {
            m,
            m_x: y,
            m_xx: 1.0 / dx_dy,
        })
    }

    pub fn value(&self, t: f64, x: f64) -> Result<f64> {
        Ok(self.point(t, x)?.m)
    }

    pub fn value_x(&self, t: f64, x: f64) -> Result<f64> {
        Ok(self.point(t, x)?.m_x)
    }

    pub fn value_xx(&self, t: f64, x: f64) -> Result<f64> {
        Ok(self.point(t, x)?.m_xx)
    }

    /// R(t, x; λ) = −M_x/M_xx.
    pub fn risk_tolerance(&self, t: f64, x: f64) -> Result<f64> {
        if let UtilitySpec::Power { gamma } = self.utility {
            self.check_point(t, x)?;
            return Ok(x / gamma);
        }
        Ok(self.point(t, x)?.risk_tolerance())
    }

    /// ∂_x R by Richardson-extrapolated central differences (exact 1/γ for power).
    pub fn risk_tolerance_x(&self, t: f64, x: f64) -> Result<f64> {
        self.check_point(t, x)?;
        if let UtilitySpec::Power { gamma } = self.utility {
            return Ok(1.0 / gamma);
        }
        let h = 1e-3 * x;
        let d = |h: f64| -> Result<f64> {
            Ok((self.risk_tolerance(t, x + h)? - self.risk_tolerance(t, x - h)?) / (2.0 * h))
        };
        let (d1, d2) = (d(h)?, d(0.5 * h)?);
        Ok((4.0 * d2 - d1) / 3.0)
    }

    /// ∂_t M: analytic for power, Richardson central differences otherwise.
    pub fn value_t(&self, t: f64, x: f64) -> Result<f64> {
        let tau = self.check_point(t, x)?;
        if let UtilitySpec::Power { gamma } = self.utility {
            let c = (1.0 - gamma) / (2.0 * gamma) * self.lambda_param.powi(2);
            return Ok(-c * self.value(t, x)?);
        }
        // one-sided near the horizon
        let h = 1e-3 * tau.max(1e-3).min(1.0);
        if tau > 2.0 * h {
            let d = |h: f64| -> Result<f64> { Ok((self.value(t + h, x)? - self.value(t - h, x)?) / (2.0 * h)) };
            let (d1, d2) = (d(h)?, d(0.5 * h)?);
            Ok((4.0 * d2 - d1) / 3.0)
        } else {
            let d = |h: f64| -> Result<f64> { Ok((self.value(t, x)? - self.value(t - h, x)?) / h) };
            let (d1, d2) = (d(h)?, d(0.5 * h)?);
            Ok(2.0 * d2 - d1)
        }
    }

    /// D₁v = R·v_x applied to the value itself.
    pub fn d1_value(&self, t: f64, x: f64) -> Result<f64> {
        let p = self.point(t, x)?;
        Ok(p.risk_tolerance() * p.m_x)
    }

    /// D₂v = R²·v_xx applied to the value itself.
    pub fn d2_value(&self, t: f64, x: f64) -> Result<f64> {
        let p = self.point(t, x)?;
        let r = p.risk_tolerance();
        Ok(r * r * p.m_xx)
    }

    /// D₁²v = R ∂_x(R v_x) = R v_x (R_x − 1), using R v_xx = −v_x.
    pub fn d1_squared_value(&self, t: f64, x: f64) -> Result<f64> {
        let p = self.point(t, x)?;
        Ok(p.risk_tolerance() * p.m_x * (self.risk_tolerance_x(t, x)? - 1.0))
    }
}

/// D_k f = R(t,x;λ)^k ∂_x^k f by central differences with h = 1e-5·x.
pub fn apply_dk<F: Fn(f64, f64) -> f64>(sol: &MertonSolution, k: u32, f: F, t: f64, x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::domain(format!("D_k needs x > 0, got {x}")));
    }
    let h = 1e-5 * x;
    let r = sol.risk_tolerance(t, x)?;
    match k {
        1 => Ok(r * (f(t, x + h) - f(t, x - h)) / (2.0 * h)),
        2 => Ok(r * r * (f(t, x + h) - 2.0 * f(t, x) + f(t, x - h)) / (h * h)),
        _ => Err(Error::domain(format!("D_k is provided for k in {{1, 2}}, got {k}"))),
    }
}

/// max over the grid of |∂_t v + ½λ²D₂v + λ²D₁v| / |v|, with the operator's
/// Sharpe ratio `lambda_op` (normally the solution's own).
pub fn pde_residual(sol: &MertonSolution, lambda_op: f64, t_grid: &[f64], x_grid: &[f64]) -> Result<f64> {
    let l2 = lambda_op * lambda_op;
    let mut worst: f64 = 0.0;
    for &t in t_grid {
        for &x in x_grid {
            let p = sol.point(t, x)?;
            let r = p.risk_tolerance();
            let d1 = r * p.m_x;
            let d2 = r * r * p.m_xx;
            let res = (sol.value_t(t, x)? + 0.5 * l2 * d2 + l2 * d1).abs() / p.m.abs();
            worst = worst.max(res);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn power_closed_form_values() {
        let s = solve_merton_power(0.4, 0.7, 1.0).unwrap();
        assert!(((1.0 - 0.4) * s.value(0.0, 1.0).unwrap() - (0.75f64 * 0.49).exp()).abs() < 1e-12);
        assert_eq!(s.risk_tolerance(0.3, 2.0).unwrap(), 5.0);
        let flat = solve_merton_power(0.4, 0.0, 1.0).unwrap();
        for &t in &[0.0, 0.5, 1.0] {
            assert!((flat.value(t, 2.0).unwrap() - 2f64.powf(0.6) / 0.6).abs() < 1e-14);
        }
        assert!(matches!(solve_merton_power(1.0, 0.7, 1.0), Err(Error::Domain(_))));
        assert!(matches!(s.value(0.0, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn general_solver_reproduces_power_on_grid() {
        for &gamma in &[0.4, 2.0] {
            let closed = solve_merton_power(gamma, 0.7, 1.0).unwrap();
            let general = solve_merton_general(&UtilitySpec::power(gamma).unwrap(), 0.7, 1.0).unwrap();
            for &t in &grid(0.0, 1.0, 20) {
                for &x in &grid(0.1, 5.0, 20) {
                    let a = closed.point(t, x).unwrap();
                    let b = general.point(t, x).unwrap();
                    assert!(((a.m - b.m) / a.m).abs() < 1e-8, "gamma={gamma} t={t} x={x}: {} vs {}", a.m, b.m);
                    let (ra, rb) = (a.risk_tolerance(), b.risk_tolerance());
                    assert!(((ra - rb) / ra).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn general_solver_zero_lambda_is_terminal_utility() {
        let spec = UtilitySpec::General(Arc::new(PowerMixture::reference()));
        let sol = solve_merton_general(&spec, 0.0, 1.0).unwrap();
        let u = PowerMixture::reference();
        for &x in &[0.2, 1.0, 7.0] {
            assert_eq!(sol.value(0.0, x).unwrap(), u.u(x));
        }
    }

    #[test]
    fn mixture_terminal_risk_tolerance_and_residual() {
        let u = PowerMixture::reference();
        let spec = UtilitySpec::General(Arc::new(u.clone()));
        let sol = solve_merton_general(&spec, 0.7, 1.0).unwrap();
        for &x in &[0.1, 0.5, 1.0, 3.0, 10.0] {
            // R(T, x) = −U′/U″, analytic
            let analytic = -u.u_prime(x) / u.u_second(x);
            assert!((sol.risk_tolerance(1.0, x).unwrap() - analytic).abs() < 1e-6 * analytic);
            assert!((sol.value(1.0, x).unwrap() - u.u(x)).abs() < 1e-8 * u.u(x));
        }
        let res = pde_residual(&sol, 0.7, &grid(0.0, 0.9, 5), &grid(0.2, 5.0, 6)).unwrap();
        assert!(res < 1e-5, "residual {res}");
        // negative control: the solution of a different Sharpe ratio
        let wrong = solve_merton_general(&spec, 0.77, 1.0).unwrap();
        let res_wrong = pde_residual(&wrong, 0.7, &grid(0.0, 0.9, 5), &grid(0.2, 5.0, 6)).unwrap();
        assert!(res_wrong > 1e-3, "corrupted residual {res_wrong}");
    }

    #[test]
    fn power_residual_is_exact() {
        let s = solve_merton_power(0.4, 0.7, 1.0).unwrap();
        assert!(pde_residual(&s, 0.7, &grid(0.0, 1.0, 7), &grid(0.1, 4.0, 7)).unwrap() < 1e-10);
        let r = pde_residual(&solve_merton_power(0.4, 0.77, 1.0).unwrap(), 0.7, &[0.0], &[1.0]).unwrap();
        // (1.21 − 1)·½·0.49·(1−γ)/γ
        assert!((r - 0.21 * 0.5 * 0.49 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn dk_identities() {
        let gamma = 0.4;
        let lam = 0.7;
        let s = solve_merton_power(gamma, lam, 1.0).unwrap();
        let g = s.clone();
        for &(t, x) in &[(0.0, 1.0), (0.5, 2.5), (0.9, 0.3)] {
            let growth = ((1.0 - gamma) / (2.0 * gamma) * lam * lam * (1.0 - t)).exp();
            let d1 = s.d1_value(t, x).unwrap();
            assert!((d1 - x.powf(1.0 - gamma) / gamma * growth).abs() < 1e-12);
            assert!((d1 + s.d2_value(t, x).unwrap()).abs() < 1e-8 * d1.abs());
            let d11 = s.d1_squared_value(t, x).unwrap();
            assert!((d11 - (1.0 - gamma) / gamma.powi(2) * x.powf(1.0 - gamma) * growth).abs() < 1e-12);
            // finite-difference operator on the value field
            let fd1 = apply_dk(&s, 1, |t, x| g.value(t, x).unwrap(), t, x).unwrap();
            assert!((fd1 - d1).abs() < 1e-8 * d1.abs());
            let fd2 = apply_dk(&s, 2, |t, x| g.value(t, x).unwrap(), t, x).unwrap();
            assert!((fd2 + d1).abs() < 1e-4 * d1.abs());
        }
        let mix = solve_merton_general(&UtilitySpec::General(Arc::new(PowerMixture::reference())), lam, 1.0).unwrap();
        for &(t, x) in &[(0.0, 1.0), (0.5, 2.5), (0.9, 0.3)] {
            let d1 = mix.d1_value(t, x).unwrap();
            assert!((d1 + mix.d2_value(t, x).unwrap()).abs() < 1e-8 * d1.abs());
        }
        assert!(apply_dk(&s, 3, |_, x| x, 0.0, 1.0).is_err());
        assert!(apply_dk(&s, 1, |_, x| x, 0.0, 0.0).is_err());
    }

    #[test]
    fn structural_properties_of_general_solution() {
        let sol = solve_merton_general(&UtilitySpec::General(Arc::new(PowerMixture::reference())), 0.7, 1.0).unwrap();
        let xs = grid(0.05, 8.0, 25);
        for &t in &[0.0, 0.4, 0.8] {
            let mut prev = f64::NEG_INFINITY;
            for &x in &xs {
                let p = sol.point(t, x).unwrap();
                assert!(p.m > prev && p.m_xx < 0.0 && p.risk_tolerance() > 0.0);
                prev = p.m;
                // envelope: finite-difference ∂M/∂x equals the multiplier y*
                let h = 1e-4 * x;
                let fd = (sol.value(t, x + h).unwrap() - sol.value(t, x - h).unwrap()) / (2.0 * h);
                assert!((fd - p.m_x).abs() < 1e-6 * p.m_x, "t={t} x={x}");
                // value decreases in t
                assert!(sol.value(t + 0.1, x).unwrap() < p.m);
            }
        }
        assert!(sol.risk_tolerance(0.0, 1e-6).unwrap() < 1e-5);
    }

    #[test]
    fn validation_rejects_bad_utilities() {
        struct Linear;
        impl Utility for Linear {
            fn name(&self) -> String {
                "linear".into()
            }
            fn u(&self, x: f64) -> f64 {
                x
            }
            fn u_prime(&self, _: f64) -> f64 {
                1.0
            }
            fn u_second(&self, _: f64) -> f64 {
                0.0
            }
            fn inverse_marginal(&self, _: f64) -> f64 {
                1.0
            }
        }
        assert!(matches!(UtilitySpec::General(Arc::new(Linear)).validate(), Err(Error::Spec(_))));
        let bad = UtilityConfig::Mixture(PowerMixture { terms: vec![MixtureTerm { weight: -1.0, gamma: 0.5 }] });
        assert!(bad.build().is_err());
        let cfg: UtilityConfig = serde_json::from_str(r#"{"kind":"power","gamma":0.4}"#).unwrap();
        assert!(cfg.build().unwrap().power_gamma() == Some(0.4));
    }
}
