//! Numerical integration: globally adaptive Gauss–Kronrod, Gauss–Hermite
//! rules for Gaussian expectations, and Wynn's epsilon accelerator.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};

// G7/K15 abscissae and weights on [-1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Outcome of an adaptive integration.
#[derive(Debug, Clone, Copy)]
pub struct Quad {
    pub value: f64,
    pub abs_error: f64,
    pub intervals: usize,
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

fn kronrod_segment<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Segment {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let pair = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    Segment {
        a,
        b,
        value: kronrod * half,
        error: ((kronrod - gauss) * half).abs(),
    }
}

/// Globally adaptive G7K15 integration of `f` over `[a, b]`.
///
/// The interval with the largest error estimate is bisected until the total
/// error drops below `max(abs_tol, rel_tol·|I|)` or `max_intervals` is hit.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
    max_intervals: usize,
) -> Result<Quad> {
    if a == b {
        return Ok(Quad {
            value: 0.0,
            abs_error: 0.0,
            intervals: 0,
        });
    }
    let mut segments = vec![kronrod_segment(&f, a, b)];
    loop {
        let total: f64 = segments.iter().map(|s| s.value).sum();
        let err: f64 = segments.iter().map(|s| s.error).sum();
        if !total.is_finite() {
            return Err(Error::numeric("integrate", "non-finite integrand"));
        }
        if err <= abs_tol.max(rel_tol * total.abs()) {
            return Ok(Quad {
                value: total,
                abs_error: err,
                intervals: segments.len(),
            });
        }
        if segments.len() >= max_intervals {
            return Err(Error::numeric(
                "integrate",
                format!(
                    "no convergence on [{a}, {b}] after {} intervals: value {total:e}, error {err:e}",
                    segments.len()
                ),
            ));
        }
        let (worst, _) = segments
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, s)| {
                if s.error > acc.1 {
                    (i, s.error)
                } else {
                    acc
                }
            });
        let s = segments.swap_remove(worst);
        let mid = 0.5 * (s.a + s.b);
        if mid <= s.a || mid >= s.b {
            // interval cannot be split further in floating point
            return Ok(Quad {
                value: total,
                abs_error: err,
                intervals: segments.len() + 1,
            });
        }
        segments.push(kronrod_segment(&f, s.a, mid));
        segments.push(kronrod_segment(&f, mid, s.b));
    }
}

/// Integrate over consecutive pieces `[p0, p1], [p1, p2], ...`.
pub fn integrate_pieces<F: Fn(f64) -> f64>(
    f: F,
    breakpoints: &[f64],
    abs_tol: f64,
    rel_tol: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for w in breakpoints.windows(2) {
        total += integrate(&f, w[0], w[1], abs_tol, rel_tol, 2000)?.value;
    }
    Ok(total)
}

/// Wynn's epsilon algorithm applied to a sequence of partial sums; returns
/// the estimate from the deepest even column that is still finite.
pub fn wynn_epsilon(partial_sums: &[f64]) -> f64 {
    let n = partial_sums.len();
    if n < 3 {
        return partial_sums.last().copied().unwrap_or(0.0);
    }
    let mut prev: Vec<f64> = vec![0.0; n + 1];
    let mut cur: Vec<f64> = partial_sums.to_vec();
    let mut best = partial_sums[n - 1];
    let mut col = 0;
    while cur.len() > 1 {
        let mut next = Vec::with_capacity(cur.len() - 1);
        for i in 0..cur.len() - 1 {
            let diff = cur[i + 1] - cur[i];
            if diff == 0.0 {
                // converged to working precision
                return if col % 2 == 0 { cur[i + 1] } else { best };
            }
            next.push(prev[i + 1] + 1.0 / diff);
        }
        col += 1;
        prev = cur;
        cur = next;
        if col % 2 == 0 {
            match cur.last() {
                Some(&v) if v.is_finite() => best = v,
                _ => break,
            }
        }
    }
    best
}

/// Probabilists' Gauss–Hermite rule normalised so that
/// `Σ wᵢ f(zᵢ) ≈ E[f(Z)]` for `Z ~ N(0, 1)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Build an `n`-point rule. Starting nodes are the eigenvalues of the
    /// Jacobi matrix of the Hermite recurrence (Golub–Welsch), polished by
    /// Newton; weights come from the Christoffel formula 1/Σ h_k(z)², which
    /// keeps the tiny tail weights relatively accurate.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss–Hermite rule needs at least one node");
        let mut jacobi = nalgebra::DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let b = (k as f64).sqrt();
            jacobi[(k - 1, k)] = b;
            jacobi[(k, k - 1)] = b;
        }
        let eig = nalgebra::SymmetricEigen::new(jacobi);
        let mut approx: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        approx.sort_by(|a, b| a.total_cmp(b));
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            // symmetric rule: polish the positive half and mirror
            let j = n - 1 - i;
            let mut z = 0.5 * (approx[j] - approx[i]);
            if n % 2 == 1 && i == n / 2 {
                z = 0.0;
            }
            for _ in 0..3 {
                let (hn, hn1, _) = hermite_orthonormal(z, n);
                if hn1 == 0.0 {
                    break;
                }
                z -= hn / ((n as f64).sqrt() * hn1);
            }
            let (_, _, ln_sum) = hermite_orthonormal(z, n);
            let w = (-ln_sum).exp();
            nodes[j] = z;
            nodes[i] = -z;
            weights[i] = w;
            weights[j] = w;
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        GaussHermite { nodes, weights }
    }

    /// Shared rule for `n` nodes, built once per process.
    pub fn cached(n: usize) -> Arc<GaussHermite> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussHermite>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        if let Some(r) = cache.lock().unwrap().get(&n) {
            return r.clone();
        }
        let rule = Arc::new(GaussHermite::new(n));
        cache.lock().unwrap().entry(n).or_insert(rule).clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E[f(Z)]` for a standard normal `Z`.
    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * f(z))
            .sum()
    }
}

/// Orthonormal probabilists' Hermite values at `z`: returns
/// `(h_n, h_{n−1}, ln Σ_{k<n} h_k²)` with `h_n, h_{n−1}` sharing an arbitrary
/// positive scale (only their ratio is meaningful).
fn hermite_orthonormal(z: f64, n: usize) -> (f64, f64, f64) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    let mut sum = 0.0;
    let mut ln_scale = 0.0;
    for k in 0..n {
        sum += cur * cur;
        let kf = k as f64;
        let next = (z * cur - kf.sqrt() * prev) / (kf + 1.0).sqrt();
        prev = cur;
        cur = next;
        if cur.abs() > 1e100 {
            prev *= 1e-100;
            cur *= 1e-100;
            sum *= 1e-200;
            ln_scale += 200.0 * std::f64::consts::LN_10;
        }
    }
    (cur, prev, sum.ln() + ln_scale)
}
