//! Fractional Ornstein–Uhlenbeck factor: kernel, exact Gaussian statistics
//! and moving-average path simulation conditional on a shared history.

use std::f64::consts::PI;
use std::io::Write;
use std::fmt;
use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{integrate, integrate_pieces, wynn_epsilon, GaussHermite};
use crate::rng;
use crate::special::gamma;

/// Beyond this many mean-reversion times the kernel is evaluated from its
/// asymptotic expansion.
const TAIL_START: f64 = 200.0;
const ASYMPTOTIC_TERMS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FouParams {
    pub a: f64,
    #[serde(rename = "H")]
    pub h: f64,
    pub eps: f64,
}

impl FouParams {
    pub fn new(a: f64, h: f64, eps: f64) -> Result<Self> {
        let p = FouParams { a, h, eps };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(Error::domain(format!("a must be positive, got {}", self.a)));
        }
        if !(self.h > 0.5 && self.h < 1.0) {
            return Err(Error::domain(format!("H must lie in (1/2, 1), got {}", self.h)));
        }
        if !(self.eps > 0.0 && self.eps <= 1.0) {
            return Err(Error::domain(format!("eps must lie in (0, 1], got {}", self.eps)));
        }
        Ok(())
    }

    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        FouParams::new(self.a, self.h, eps)
    }

    pub fn sigma_ou_sq(&self) -> f64 {
        stationary_variance(self.a, self.h)
    }

    pub fn sigma_ou(&self) -> f64 {
        self.sigma_ou_sq().sqrt()
    }
}

/// σ_ou² = 1 / (2 a^{2H} sin πH). Valid for H ∈ [1/2, 1).
pub fn stationary_variance(a: f64, h: f64) -> f64 {
    1.0 / (2.0 * a.powf(2.0 * h) * (PI * h).sin())
}

/// The same quantity assembled from the fBm normalisation, σ_H² = 1/(Γ(2H+1) sin πH).
pub fn stationary_variance_from_fbm(a: f64, h: f64) -> f64 {
    let sigma_h_sq = 1.0 / (gamma(2.0 * h + 1.0) * (PI * h).sin());
    0.5 * a.powf(-2.0 * h) * gamma(2.0 * h + 1.0) * sigma_h_sq
}

/// fOU moving-average kernel 𝒦(t).
///
/// Uses the integrated-by-parts form `(1/Γ(H−½)) ∫₀ᵗ u^{H−3/2} e^{−a(t−u)} du`,
/// which is positive term by term, under the substitution `v = u^{H−½}`.
pub fn kernel_k(t: f64, a: f64, h: f64) -> Result<f64> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::domain(format!("kernel argument must be t >= 0, got {t}")));
    }
    if !(a >= 0.0) {
        return Err(Error::domain(format!("kernel needs a >= 0, got {a}")));
    }
    if !(0.5..1.0).contains(&h) {
        return Err(Error::domain(format!("kernel needs H in [1/2, 1), got {h}")));
    }
    if h == 0.5 {
        return Ok((-a * t).exp());
    }
    let beta = h - 0.5;
    if t == 0.0 {
        return Ok(0.0);
    }
    if a == 0.0 {
        return Ok(t.powf(beta) / gamma(h + 0.5));
    }
    if a * t >= TAIL_START {
        // truncation error of the series is below 1e-13 relative here
        return Ok(kernel_asymptotic(t, a, h));
    }
    kernel_quadrature(t, a, h)
}

fn kernel_quadrature(t: f64, a: f64, h: f64) -> Result<f64> {
    let beta = h - 0.5;
    let inv_beta = 1.0 / beta;
    let f = |v: f64| (-a * (t - v.powf(inv_beta)).max(0.0)).exp();
    let split = (t - 40.0 / a).max(0.0);
    let upper = t.powf(beta);
    let mut total = integrate(f, split.powf(beta), upper, 0.0, 1e-12, 400)?.value;
    if split > 0.0 {
        total += integrate(f, 0.0, split.powf(beta), 1e-18 * total, 1e-10, 400)?.value;
    }
    Ok(total / gamma(h + 0.5))
}

/// 𝒦^ε(t) = ε^{−1/2} 𝒦(t/ε).
pub fn scaled_kernel(t: f64, p: &FouParams) -> Result<f64> {
    Ok(kernel_k(t / p.eps, p.a, p.h)? / p.eps.sqrt())
}

/// Coefficients `b_k` of the large-t expansion 𝒦(t) ≈ Σ b_k t^{H−3/2−k}.
fn kernel_asymptotic_coeffs(a: f64, h: f64) -> Vec<f64> {
    let beta = h - 0.5;
    let g = gamma(beta);
    let mut coeffs = Vec::with_capacity(ASYMPTOTIC_TERMS);
    let mut c = 1.0;
    for k in 0..ASYMPTOTIC_TERMS {
        if k > 0 {
            c *= -(beta - k as f64);
        }
        coeffs.push(c / (g * a.powi(k as i32 + 1)));
    }
    coeffs
}

/// Large-t asymptotic expansion of 𝒦 (accurate for a·t ≳ 50).
pub fn kernel_asymptotic(t: f64, a: f64, h: f64) -> f64 {
    let beta = h - 0.5;
    kernel_asymptotic_coeffs(a, h)
        .iter()
        .enumerate()
        .map(|(k, b)| b * t.powf(beta - 1.0 - k as f64))
        .sum()
}

/// ∫_X^∞ 𝒦² using the squared asymptotic series (X in unscaled time).
fn kernel_sq_tail_series(x: f64, a: f64, h: f64) -> f64 {
    let beta = h - 0.5;
    let b = kernel_asymptotic_coeffs(a, h);
    let mut total = 0.0;
    for (j, bj) in b.iter().enumerate() {
        for (k, bk) in b.iter().enumerate() {
            let p1 = 2.0 * beta - 1.0 - (j + k) as f64;
            total += bj * bk * (-x.powf(p1) / p1);
        }
    }
    total
}

/// ∫_x^∞ 𝒦(u)² du for unscaled kernel, x ≥ 0.
pub fn kernel_sq_tail(x: f64, a: f64, h: f64) -> Result<f64> {
    if h == 0.5 {
        return Ok((-2.0 * a * x).exp() / (2.0 * a));
    }
    let big = TAIL_START / a;
    if x >= big {
        return Ok(kernel_sq_tail_series(x, a, h));
    }
    let mut pts = vec![x];
    let mut p = if x > 0.0 { x } else { 1e-3 / a };
    if x == 0.0 {
        pts.push(p);
    }
    while p * 2.0 < big {
        p *= 2.0;
        pts.push(p);
    }
    pts.push(big);
    let body = integrate_pieces(
        |u| {
            let k = kernel_k(u, a, h).unwrap_or(f64::NAN);
            k * k
        },
        &pts,
        1e-14,
        1e-11,
    )?;
    Ok(body + kernel_sq_tail_series(big, a, h))
}

/// ∫₀^∞ 𝒦(u)² du; equals σ_ou² analytically.
pub fn kernel_sq_integral(a: f64, h: f64) -> Result<f64> {
    kernel_sq_tail(0.0, a, h)
}

/// ∫_M^∞ (𝒦^ε)² du: variance lost by truncating the history at `[-M, 0]`.
pub fn truncation_tail_variance(m: f64, p: &FouParams) -> Result<f64> {
    kernel_sq_tail(m / p.eps, p.a, p.h)
}

/// Leading-order power-law bound of the truncation tail,
/// (M/ε)^{2H−2} / ((2−2H) a² Γ(H−½)²).
pub fn truncation_tail_bound(m: f64, p: &FouParams) -> f64 {
    let g = gamma(p.h - 0.5);
    (m / p.eps).powf(2.0 * p.h - 2.0) / ((2.0 - 2.0 * p.h) * p.a * p.a * g * g)
}

/// Smallest history length M (time units) whose truncation tail does not
/// exceed `tol_frac·σ_ou²`.
pub fn history_length_for_tolerance(p: &FouParams, tol_frac: f64) -> Result<f64> {
    if !(tol_frac > 0.0 && tol_frac < 1.0) {
        return Err(Error::Config(format!(
            "history tolerance must lie in (0, 1), got {tol_frac}"
        )));
    }
    let target = tol_frac * p.sigma_ou_sq();
    let tail = |x: f64| kernel_sq_tail(x, p.a, p.h);
    let mut lo = 0.0;
    let mut hi = 1.0 / p.a;
    while tail(hi)? > target {
        lo = hi;
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::numeric("history_length", "tail tolerance unreachable"));
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if tail(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-6 * hi {
            break;
        }
    }
    Ok(hi * p.eps)
}

/// Normalised autocorrelation 𝒞_Y(s) =
/// (2 sin πH / π) ∫₀^∞ cos(a s x) x^{1−2H} / (1 + x²) dx.
pub fn covariance_cy(s: f64, a: f64, h: f64) -> Result<f64> {
    if !(s >= 0.0) || !s.is_finite() {
        return Err(Error::domain(format!("lag must be s >= 0, got {s}")));
    }
    if !(0.5..1.0).contains(&h) {
        return Err(Error::domain(format!("H must lie in [1/2, 1), got {h}")));
    }
    if s == 0.0 {
        return Ok(1.0);
    }
    let w = a * s;
    let e = 2.0 - 2.0 * h;
    // [0, 1] with v = x^{2-2H}: x^{1-2H} dx = dv / (2 - 2H)
    let head = integrate(
        |v: f64| {
            let x = v.powf(1.0 / e);
            (w * x).cos() / (1.0 + x * x) / e
        },
        0.0,
        1.0,
        1e-15,
        1e-12,
        1000,
    )?
    .value;
    let g = |x: f64| (w * x).cos() * x.powf(1.0 - 2.0 * h) / (1.0 + x * x);
    // [1, first zero of cos(wx) after 1]
    let half = PI / w;
    let mut k0 = ((w - 0.5 * PI) / PI).floor() + 1.0;
    if (k0 + 0.5) * half <= 1.0 {
        k0 += 1.0;
    }
    let first_zero = (k0 + 0.5) * half;
    let mut pts = vec![1.0];
    let mut p = 1.0;
    while p * 2.0 < first_zero {
        p *= 2.0;
        pts.push(p);
    }
    pts.push(first_zero);
    let lead = integrate_pieces(g, &pts, 1e-15, 1e-12)?;
    let mut partial = Vec::with_capacity(40);
    let mut acc = 0.0;
    for j in 0..40 {
        let lo = first_zero + j as f64 * half;
        acc += integrate(g, lo, lo + half, 1e-16, 1e-12, 200)?.value;
        partial.push(acc);
    }
    let tail = wynn_epsilon(&partial);
    if !tail.is_finite() {
        return Err(Error::numeric(
            "covariance_cy",
            format!("oscillatory tail did not converge at s = {s}, partial sums end at {acc:e}"),
        ));
    }
    Ok(2.0 * (PI * h).sin() / PI * (head + lead + tail))
}

/// Leading large-lag behaviour (as)^{2H−2} / Γ(2H−1).
pub fn covariance_cy_asymptotic(s: f64, a: f64, h: f64) -> f64 {
    (a * s).powf(2.0 * h - 2.0) / gamma(2.0 * h - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimGrid {
    pub dt: f64,
    pub n_steps: usize,
    pub history_len: usize,
}

impl SimGrid {
    pub fn new(horizon: f64, dt: f64, history_len: usize) -> Result<Self> {
        if !(dt > 0.0) || !(horizon > 0.0) {
            return Err(Error::domain(format!("need dt > 0 and T > 0, got dt={dt}, T={horizon}")));
        }
        let n = (horizon / dt).round();
        if n < 1.0 || (n * dt - horizon).abs() > 1e-9 * horizon {
            return Err(Error::domain(format!("T = {horizon} is not a multiple of dt = {dt}")));
        }
        Ok(SimGrid {
            dt,
            n_steps: n as usize,
            history_len,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }

    pub fn history_span(&self) -> f64 {
        self.history_len as f64 * self.dt
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }
}

/// How much of the past (−∞, 0] is simulated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HistoryPolicy {
    /// Truncation tail ≤ `tol·σ_ou²`.
    TailVariance { tol: f64 },
    /// History interval [−m, 0] in time units.
    Explicit { m: f64 },
    /// M = (T/Δt)^{1.5} time units.
    PaperScale,
}

impl Default for HistoryPolicy {
    fn default() -> Self {
        HistoryPolicy::TailVariance { tol: 1e-3 }
    }
}

impl HistoryPolicy {
    /// History span M in time units.
    pub fn span(&self, p: &FouParams, horizon: f64, dt: f64) -> Result<f64> {
        match *self {
            HistoryPolicy::TailVariance { tol } => history_length_for_tolerance(p, tol),
            HistoryPolicy::Explicit { m } => {
                if m >= 0.0 {
                    Ok(m)
                } else {
                    Err(Error::Config(format!("history span must be >= 0, got {m}")))
                }
            }
            HistoryPolicy::PaperScale => Ok((horizon / dt).powf(1.5)),
        }
    }

    pub fn grid(&self, p: &FouParams, horizon: f64, dt: f64) -> Result<SimGrid> {
        let m = self.span(p, horizon, dt)?;
        SimGrid::new(horizon, dt, (m / dt).ceil() as usize)
    }
}

/// Truncation diagnostics for a grid.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TruncationReport {
    pub history_span: f64,
    pub tail_variance: f64,
    pub tail_bound: f64,
    pub relative_tail: f64,
}

/// One simulated history segment on [−M, 0] and its contribution to Y^ε on [0, T].
#[derive(Debug, Clone)]
pub struct History {
    pub omega: u64,
    /// ΔW^Y on [−M, 0], oldest first.
    pub increments: Arc<Vec<f64>>,
    /// Σ over history increments of 𝒦^ε(t_k − s_j) ΔW^Y_j at each node t_k, k = 0..=n.
    pub contribution: Arc<Vec<f64>>,
}

/// Discretised realisation of (W^Y, Y^ε, W) on [0, T] sharing a history.
#[derive(Debug, Clone)]
pub struct FactorPath {
    pub path_id: u64,
    pub grid: SimGrid,
    pub history: Arc<Vec<f64>>,
    /// Future ΔW^Y, one per step.
    pub wy_increments: Vec<f64>,
    /// ΔW = ρ ΔW^Y + √(1−ρ²) ΔW^⊥.
    pub w_increments: Vec<f64>,
    /// Y^ε at nodes t_0..t_n.
    pub y_values: Vec<f64>,
}

impl FactorPath {
    /// ΔW^Y over history then future, oldest first.
    pub fn all_wy_increments(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.history.len() + self.wy_increments.len());
        v.extend_from_slice(&self.history);
        v.extend_from_slice(&self.wy_increments);
        v
    }
}

/// Precomputed taps κ_m = 𝒦^ε(m Δt), m ≥ 1, for the left-point Riemann rule
/// Y_k = Σ_{m≥1} κ_m ΔW^Y_{k−m}.
#[derive(Debug, Clone)]
pub struct FactorSimulator {
    pub params: FouParams,
    pub grid: SimGrid,
    pub rho: f64,
    taps: Arc<Vec<f64>>,
    spectrum: Arc<OnceLock<TapSpectrum>>,
}

/// FFT of κ_1..κ_{n+h} zero-padded to a power of two ≥ n + h, with plans.
#[derive(Clone)]
struct TapSpectrum {
    size: usize,
    taps_hat: Vec<Complex<f64>>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for TapSpectrum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TapSpectrum({})", self.size)
    }
}

impl FactorSimulator {
    pub fn new(params: FouParams, grid: SimGrid, rho: f64) -> Result<Self> {
        params.validate()?;
        if !(rho.abs() < 1.0) {
            return Err(Error::domain(format!("|rho| must be < 1, got {rho}")));
        }
        let n = grid.n_steps + grid.history_len;
        let taps = (1..=n)
            .map(|m| scaled_kernel(m as f64 * grid.dt, &params))
            .collect::<Result<Vec<f64>>>()?;
        Ok(FactorSimulator {
            params,
            grid,
            rho,
            taps: Arc::new(taps),
            spectrum: Arc::new(OnceLock::new()),
        })
    }

    /// κ_1, κ_2, ... (index 0 holds κ_1).
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn truncation(&self) -> Result<TruncationReport> {
        let m = self.grid.history_span();
        let tail = truncation_tail_variance(m, &self.params)?;
        Ok(TruncationReport {
            history_span: m,
            tail_variance: tail,
            tail_bound: truncation_tail_bound(m.max(self.params.eps), &self.params),
            relative_tail: tail / self.params.sigma_ou_sq(),
        })
    }

    /// Warning text when the history is too short for `tol·σ_ou²`.
    pub fn truncation_warning(&self, tol: f64) -> Result<Option<String>> {
        let r = self.truncation()?;
        if r.relative_tail > tol {
            Ok(Some(format!(
                "history [-{:.4}, 0] leaves tail variance {:.3e} ({:.2e} of sigma_ou^2, bound (M/eps)^(2H-2) term {:.3e}) above tolerance {tol:e}",
                r.history_span, r.tail_variance, r.relative_tail, r.tail_bound
            )))
        } else {
            Ok(None)
        }
    }

    /// Conditional variance of Y_k given the history: Σ_{m=1}^{k} κ_m² Δt.
    pub fn conditional_variances(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.grid.n_steps + 1);
        let mut acc = 0.0;
        v.push(0.0);
        for m in 0..self.grid.n_steps {
            acc += self.taps[m] * self.taps[m] * self.grid.dt;
            v.push(acc);
        }
        v
    }

    /// Draw the history for omega `omega` and its contribution on [0, T].
    pub fn history(&self, seed: u64, omega: u64) -> History {
        let mut r = rng::history_rng(seed, omega);
        let sd = self.grid.dt.sqrt();
        let inc: Vec<f64> = (0..self.grid.history_len)
            .map(|_| sd * r.sample::<f64, _>(StandardNormal))
            .collect();
        self.history_from_increments(omega, inc)
    }

    pub fn history_from_increments(&self, omega: u64, inc: Vec<f64>) -> History {
        assert_eq!(inc.len(), self.grid.history_len);
        let contribution = self.history_contribution(&inc);
        History {
            omega,
            increments: Arc::new(inc),
            contribution: Arc::new(contribution),
        }
    }

    /// hist_k = Σ_i ΔW_i κ_{k+h−i}, k = 0..=n.
    fn history_contribution(&self, inc: &[f64]) -> Vec<f64> {
        let n = self.grid.n_steps;
        let h = inc.len();
        if h == 0 {
            return vec![0.0; n + 1];
        }
        if (n + 1) * h <= 4_000_000 {
            (0..=n)
                .map(|k| {
                    let taps = &self.taps[k..k + h];
                    // κ_{k+h−i} = taps[k+h−1−i]
                    dot_reversed(inc, taps)
                })
                .collect()
        } else {
            // Circular convolution of length ≥ n + h: every history index is
            // below the output indices we keep, so nothing wraps into them.
            let sp = self.spectrum.get_or_init(|| {
                let size = (n + h).next_power_of_two();
                let mut planner = FftPlanner::<f64>::new();
                let fwd = planner.plan_fft_forward(size);
                let inv = planner.plan_fft_inverse(size);
                let mut taps_hat: Vec<Complex<f64>> = (0..size)
                    .map(|i| Complex::new(self.taps.get(i).copied().unwrap_or(0.0), 0.0))
                    .collect();
                fwd.process(&mut taps_hat);
                TapSpectrum { size, taps_hat, fwd, inv }
            });
            let mut buf: Vec<Complex<f64>> = (0..sp.size)
                .map(|i| Complex::new(inc.get(i).copied().unwrap_or(0.0), 0.0))
                .collect();
            sp.fwd.process(&mut buf);
            for (u, v) in buf.iter_mut().zip(&sp.taps_hat) {
                *u *= v;
            }
            sp.inv.process(&mut buf);
            let scale = 1.0 / sp.size as f64;
            (0..=n).map(|k| buf[k + h - 1].re * scale).collect()
        }
    }

    /// Future path `path` conditional on `hist`; draws all ΔW^Y first, then ΔW^⊥.
    pub fn future(&self, hist: &History, seed: u64, stream_key: u64, path: u64) -> FactorPath {
        let n = self.grid.n_steps;
        let mut r = rng::path_rng(seed, stream_key, path);
        let sd = self.grid.dt.sqrt();
        let wy: Vec<f64> = (0..n).map(|_| sd * r.sample::<f64, _>(StandardNormal)).collect();
        let c = (1.0 - self.rho * self.rho).sqrt();
        let w: Vec<f64> = wy
            .iter()
            .map(|&dy| self.rho * dy + c * sd * r.sample::<f64, _>(StandardNormal))
            .collect();
        let mut y = vec![0.0; n + 1];
        self.fill_y(&hist.contribution, &wy, &mut y);
        FactorPath {
            path_id: path,
            grid: self.grid,
            history: hist.increments.clone(),
            wy_increments: wy,
            w_increments: w,
            y_values: y,
        }
    }

    /// Y_k = hist_k + Σ_{m=1}^{k} κ_m ΔW^Y_{k−m}.
    pub fn fill_y(&self, hist: &[f64], wy: &[f64], y: &mut [f64]) {
        let n = wy.len();
        for k in 0..=n {
            // Σ_{j<k} wy[j] κ_{k−j} = Σ_j wy[j] taps[k−1−j]
            y[k] = hist[k] + dot_reversed(&wy[..k], &self.taps[..k]);
        }
    }

    /// A stationary path with its own (fresh) history: all of ΔW^Y on
    /// [−M, T] comes from stream `path` of `seed`.
    pub fn stationary_path(&self, seed: u64, stream_key: u64, path: u64) -> Vec<f64> {
        let n = self.grid.n_steps;
        let h = self.grid.history_len;
        let mut r = rng::path_rng(seed, stream_key, path);
        let sd = self.grid.dt.sqrt();
        let inc: Vec<f64> = (0..h + n)
            .map(|_| sd * r.sample::<f64, _>(StandardNormal))
            .collect();
        let full = convolve(&inc, &self.taps[..n + h]);
        (0..=n).map(|k| if k + h == 0 { 0.0 } else { full[k + h - 1] }).collect()
    }
}

/// Σ_i x[i]·t[len−1−i] with four independent accumulators.
#[inline]
fn dot_reversed(x: &[f64], t: &[f64]) -> f64 {
    let len = x.len();
    debug_assert_eq!(len, t.len());
    let mut acc = [0.0f64; 4];
    let chunks = len / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += x[i] * t[len - 1 - i];
        acc[1] += x[i + 1] * t[len - 2 - i];
        acc[2] += x[i + 2] * t[len - 3 - i];
        acc[3] += x[i + 3] * t[len - 4 - i];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..len {
        s += x[i] * t[len - 1 - i];
    }
    s
}

/// Linear convolution via FFT; output length x.len() + y.len() − 1.
pub fn convolve(x: &[f64], y: &[f64]) -> Vec<f64> {
    let out_len = x.len() + y.len() - 1;
    let size = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut a: Vec<Complex<f64>> = (0..size)
        .map(|i| Complex::new(x.get(i).copied().unwrap_or(0.0), 0.0))
        .collect();
    let mut b: Vec<Complex<f64>> = (0..size)
        .map(|i| Complex::new(y.get(i).copied().unwrap_or(0.0), 0.0))
        .collect();
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (u, v) in a.iter_mut().zip(&b) {
        *u *= v;
    }
    inv.process(&mut a);
    let scale = 1.0 / size as f64;
    a[..out_len].iter().map(|c| c.re * scale).collect()
}

/// Simulate `n_paths` factor paths. With `shared_history` all paths share the
/// history of omega 0; otherwise path `i` uses history omega `i`.
pub fn simulate_factor(
    params: FouParams,
    grid: SimGrid,
    rho: f64,
    seed: u64,
    n_paths: usize,
    shared_history: bool,
) -> Result<Vec<FactorPath>> {
    use rayon::prelude::*;
    let sim = FactorSimulator::new(params, grid, rho)?;
    let shared = shared_history.then(|| sim.history(seed, 0));
    Ok((0..n_paths as u64)
        .into_par_iter()
        .map(|i| match &shared {
            Some(hist) => sim.future(hist, seed, 0, i),
            None => sim.future(&sim.history(seed, i), seed, 0, i),
        })
        .collect())
}

/// Exact stationary Gaussian sampling of Y^ε at `times` by Cholesky
/// factorisation of σ_ou² 𝒞_Y(|t_i − t_j|/ε). Validation oracle only.
pub fn cholesky_paths(
    params: &FouParams,
    times: &[f64],
    seed: u64,
    n_paths: usize,
) -> Result<Vec<Vec<f64>>> {
    let n = times.len();
    if n == 0 || n > 2048 {
        return Err(Error::domain(format!(
            "Cholesky oracle supports 1..=2048 nodes, got {n}"
        )));
    }
    let var = params.sigma_ou_sq();
    // cache correlations by rounded lag for uniform grids
    let mut cache = std::collections::HashMap::new();
    let mut cov = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let lag = (times[i] - times[j]).abs() / params.eps;
            let key = (lag * 1e9).round() as i64;
            let c = match cache.get(&key) {
                Some(&c) => c,
                None => {
                    let c = covariance_cy(lag, params.a, params.h)?;
                    cache.insert(key, c);
                    c
                }
            };
            cov[(i, j)] = var * c;
            cov[(j, i)] = var * c;
        }
    }
    let chol = nalgebra::Cholesky::new(cov)
        .ok_or_else(|| Error::numeric("cholesky_paths", "covariance not positive definite"))?;
    let l = chol.l();
    Ok((0..n_paths as u64)
        .map(|i| {
            let mut r = rng::path_rng(seed, 0xc401, i);
            let z = nalgebra::DVector::from_iterator(
                n,
                (0..n).map(|_| r.sample::<f64, _>(StandardNormal)),
            );
            (&l * z).iter().copied().collect()
        })
        .collect())
}

/// Hermite coefficients C_k = E[He_k(Z) f(σ_ou Z)] together with the
/// weighted series Σ α^k C_k² / k!.
#[derive(Debug, Clone, Serialize)]
pub struct HermiteReport {
    pub coefficients: Vec<f64>,
    /// Partial sums of Σ α^k C_k²/k!.
    pub partial_sums: Vec<f64>,
    /// Ratios of consecutive series terms, skipping terms at the quadrature
    /// noise floor (e.g. the vanishing even coefficients of an odd function).
    pub term_ratios: Vec<f64>,
    /// Set when k_max had to be reduced because He_k overflowed on the nodes.
    pub capped_at: Option<usize>,
}

pub fn hermite_coefficients<F: Fn(f64) -> f64>(
    f: F,
    sigma_ou: f64,
    k_max: usize,
    alpha: f64,
    n_nodes: usize,
) -> HermiteReport {
    let gh = GaussHermite::new(n_nodes);
    let mut coeffs = vec![0.0; k_max + 1];
    let mut capped = None;
    // He_k(z)/√k! stays O(e^{z²/4}); normalise to avoid overflow
    let fz: Vec<f64> = gh.nodes().iter().map(|&z| f(sigma_ou * z)).collect();
    let mut prev = vec![0.0; gh.len()];
    let mut cur = vec![1.0; gh.len()];
    for (k, coeff) in coeffs.iter_mut().enumerate() {
        // cur holds He_k / √k!
        let s: f64 = gh
            .weights()
            .iter()
            .zip(&cur)
            .zip(&fz)
            .map(|((w, h), f)| w * h * f)
            .sum();
        if !s.is_finite() {
            capped = Some(k);
            break;
        }
        *coeff = s; // normalised coefficient C_k/√k!
        let kf = k as f64;
        for ((p, c), &z) in prev.iter_mut().zip(cur.iter_mut()).zip(gh.nodes()) {
            let next = (z * *c - kf.sqrt() * *p) / (kf + 1.0).sqrt();
            *p = *c;
            *c = next;
        }
    }
    let kept = capped.unwrap_or(k_max + 1);
    coeffs.truncate(kept);
    let mut partial = Vec::with_capacity(kept);
    let mut out = Vec::with_capacity(kept);
    let mut terms = Vec::with_capacity(kept);
    let mut acc = 0.0;
    let mut ln_fact = 0.0;
    for (k, c_norm) in coeffs.iter().enumerate() {
        if k > 0 {
            ln_fact += (k as f64).ln();
        }
        // C_k = c_norm·√k!
        out.push(c_norm * (0.5 * ln_fact).exp());
        let term = alpha.powi(k as i32) * c_norm * c_norm;
        acc += term;
        partial.push(acc);
        terms.push(term);
    }
    // ratios between consecutive terms whose coefficient stands above
    // quadrature round-off (α^k would otherwise amplify exact zeros)
    let c_max = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let significant: Vec<f64> = coeffs
        .iter()
        .zip(&terms)
        .filter(|(c, _)| c.abs() > 1e-12 * c_max)
        .map(|(_, &t)| t)
        .collect();
    let ratios: Vec<f64> = significant.windows(2).map(|w| w[1] / w[0]).collect();
    HermiteReport {
        coefficients: out,
        partial_sums: partial,
        term_ratios: ratios,
        capped_at: capped,
    }
}

/// Write paths as CSV: `path_id,t,y,w_increment,wy_increment`. The final node
/// carries no increment.
pub fn write_paths_csv<W: Write>(paths: &[FactorPath], out: &mut W) -> Result<()> {
    writeln!(out, "path_id,t,y,w_increment,wy_increment")?;
    for p in paths {
        for (k, y) in p.y_values.iter().enumerate() {
            let t = p.grid.time(k);
            match (p.w_increments.get(k), p.wy_increments.get(k)) {
                (Some(w), Some(wy)) => {
                    writeln!(out, "{},{:.6},{:.12e},{:.12e},{:.12e}", p.path_id, t, y, w, wy)?
                }
                _ => writeln!(out, "{},{:.6},{:.12e},,", p.path_id, t, y)?,
            }
        }
    }
    Ok(())
}
