//! Small statistics toolkit: fixed-order sums, moments, least squares.

/// Pairwise (tree) summation; the result depends only on the order of `x`.
pub fn pairwise_sum(x: &[f64]) -> f64 {
    if x.len() <= 32 {
        return x.iter().sum();
    }
    let mid = x.len() / 2;
    pairwise_sum(&x[..mid]) + pairwise_sum(&x[mid..])
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(x) / x.len() as f64
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(x);
    let dev: Vec<f64> = x.iter().map(|v| (v - m) * (v - m)).collect();
    pairwise_sum(&dev) / (n - 1) as f64
}

/// Standard error of the sample mean.
pub fn std_error(x: &[f64]) -> f64 {
    (variance(x) / x.len() as f64).sqrt()
}

/// Sample covariance of two equally long series.
pub fn covariance(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (mx, my) = (mean(x), mean(y));
    let prod: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
    pairwise_sum(&prod) / (x.len() - 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub intercept_se: f64,
}

/// Ordinary least squares `y ≈ intercept + slope·x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    assert_eq!(x.len(), y.len());
    assert!(x.len() >= 2, "need at least two points for a fit");
    let n = x.len() as f64;
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let s2 = if x.len() > 2 { rss / (n - 2.0) } else { 0.0 };
    LinearFit {
        slope,
        intercept,
        slope_se: (s2 / sxx).sqrt(),
        intercept_se: (s2 * (1.0 / n + mx * mx / sxx)).sqrt(),
    }
}

/// Weighted least squares with weights `w` (inverse variances); the slope SE
/// is the model-based one.
pub fn weighted_fit(x: &[f64], y: &[f64], w: &[f64]) -> LinearFit {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(a, b)| b * (a - mx).powi(2)).sum();
    let sxy: f64 = x
        .iter()
        .zip(y)
        .zip(w)
        .map(|((a, c), b)| b * (a - mx) * (c - my))
        .sum();
    let slope = sxy / sxx;
    LinearFit {
        slope,
        intercept: my - slope * mx,
        slope_se: (1.0 / sxx).sqrt(),
        intercept_se: (1.0 / sw + mx * mx / sxx).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_and_fit() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&x), 2.5);
        assert!((variance(&x) - 5.0 / 3.0).abs() < 1e-15);
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 0.5 * v).collect();
        let fit = linear_fit(&x, &y);
        assert!((fit.slope + 0.5).abs() < 1e-14 && (fit.intercept - 3.0).abs() < 1e-14);
        assert!(fit.slope_se < 1e-12);
        let wf = weighted_fit(&x, &y, &[1.0, 2.0, 3.0, 4.0]);
        assert!((wf.slope + 0.5).abs() < 1e-14);
        // intercept SE of a weighted mean: 1/√Σw when x is constant-centred
        let z = weighted_fit(&[-1.0, 1.0], &[0.0, 0.0], &[4.0, 4.0]);
        assert!((z.intercept_se - (1.0f64 / 8.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn pairwise_matches_naive_for_exact_values() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
    }
}
