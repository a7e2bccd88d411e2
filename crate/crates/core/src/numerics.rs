//! Shared numerical kernels: Gaussian quadrature rules, deterministic
//! summation, Gaussian special functions, and least-squares fits.

use nalgebra::DMatrix;
use statrs::function::erf;

use crate::error::{Error, Result};

/// Pairwise (fixed-tree) summation. The reduction tree depends only on the
/// slice length, never on worker count, so sums are reproducible.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BASE: usize = 32;
    if values.len() <= BASE {
        let mut acc = 0.0;
        for v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Composite trapezoid rule for nodal values on a uniform grid over `[0,1]`
/// with `values.len() - 1` cells.
pub fn trapezoid(values: &[f64]) -> f64 {
    let n = values.len();
    assert!(n >= 2, "trapezoid needs at least two nodes");
    let h = 1.0 / (n - 1) as f64;
    let interior = pairwise_sum(&values[1..n - 1]);
    h * (0.5 * values[0] + interior + 0.5 * values[n - 1])
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal distribution function, via `erf`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf::erf(x / std::f64::consts::SQRT_2))
}

/// Inverse standard normal distribution function.
pub fn normal_inv_cdf(p: f64) -> f64 {
    erf::erf_inv(2.0 * p - 1.0) * std::f64::consts::SQRT_2
}

fn sorted_eigen_rule(jacobi: DMatrix<f64>, weight_scale: f64) -> Vec<(f64, f64)> {
    let n = jacobi.nrows();
    let eig = nalgebra::SymmetricEigen::new(jacobi);
    let mut rule: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let node = eig.eigenvalues[i];
            let v0 = eig.eigenvectors[(0, i)];
            (node, weight_scale * v0 * v0)
        })
        .collect();
    rule.sort_by(|a, b| a.0.total_cmp(&b.0));
    rule
}

/// Gauss–Legendre rule of order `n` on `[-1, 1]` (Golub–Welsch).
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    assert!(n >= 1);
    let mut j = DMatrix::zeros(n, n);
    for i in 1..n {
        let b = i as f64 / ((4 * i * i - 1) as f64).sqrt();
        j[(i, i - 1)] = b;
        j[(i - 1, i)] = b;
    }
    sorted_eigen_rule(j, 2.0)
}

/// Gauss–Legendre rule mapped to `[a, b]`.
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    gauss_legendre(n)
        .into_iter()
        .map(|(t, w)| (mid + half * t, half * w))
        .collect()
}

/// Gauss–Hermite rule of order `n` for the weight `exp(-t^2)`.
///
/// For standard normal expectations use [`hermite_normal_rule`], which folds
/// the change of variables in.
pub fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
    assert!(n >= 1);
    let mut j = DMatrix::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        j[(i, i - 1)] = b;
        j[(i - 1, i)] = b;
    }
    sorted_eigen_rule(j, std::f64::consts::PI.sqrt())
}

/// Nodes and weights such that `E[f(Z)] ≈ Σ w_i f(z_i)` for `Z ~ N(0,1)`.
pub fn hermite_normal_rule(n: usize) -> Vec<(f64, f64)> {
    let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
    gauss_hermite(n)
        .into_iter()
        .map(|(t, w)| (std::f64::consts::SQRT_2 * t, w * inv_sqrt_pi))
        .collect()
}

/// Additive-recurrence low-discrepancy sequence in `[0,1)^d` (the
/// plastic-constant generalization of the golden-ratio sequence).
pub fn r_sequence(dim: usize, count: usize) -> Vec<Vec<f64>> {
    // Unique positive root of x^(d+1) = x + 1.
    let mut phi = 1.5_f64;
    for _ in 0..64 {
        phi = (1.0 + phi).powf(1.0 / (dim as f64 + 1.0));
    }
    let alphas: Vec<f64> = (1..=dim).map(|j| (1.0 / phi.powi(j as i32)).fract()).collect();
    (0..count)
        .map(|k| {
            alphas
                .iter()
                .map(|&a| (0.5 + a * (k as f64 + 1.0)).fract())
                .collect()
        })
        .collect()
}

/// Result of a univariate least-squares line fit.
#[derive(Debug, Clone, Copy)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Standard error of the slope.
    pub slope_se: f64,
    pub points: usize,
}

/// Ordinary least squares `y = intercept + slope * x`; the slope standard
/// error comes from the residual variance.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    let w = vec![1.0; xs.len()];
    fit_line_weighted(xs, ys, &w, false)
}

/// Weighted least squares with `weights = 1 / Var(y_i)`. With
/// `known_variance = true` the slope standard error is taken from the
/// supplied variances rather than the residuals.
pub fn fit_line_weighted(xs: &[f64], ys: &[f64], weights: &[f64], known_variance: bool) -> Result<LineFit> {
    let n = xs.len();
    if n < 3 || ys.len() != n || weights.len() != n {
        return Err(Error::domain(format!(
            "line fit needs at least 3 points with matching lengths, got {n}"
        )));
    }
    let sw = pairwise_sum(weights);
    let xbar = pairwise_sum(&xs.iter().zip(weights).map(|(x, w)| x * w).collect::<Vec<_>>()) / sw;
    let ybar = pairwise_sum(&ys.iter().zip(weights).map(|(y, w)| y * w).collect::<Vec<_>>()) / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        let dx = xs[i] - xbar;
        sxx += weights[i] * dx * dx;
        sxy += weights[i] * dx * (ys[i] - ybar);
    }
    if sxx <= 0.0 {
        return Err(Error::domain("degenerate abscissae in line fit"));
    }
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let mut ssr = 0.0;
    let mut sst = 0.0;
    for i in 0..n {
        let r = ys[i] - intercept - slope * xs[i];
        ssr += weights[i] * r * r;
        sst += weights[i] * (ys[i] - ybar) * (ys[i] - ybar);
    }
    let r_squared = if sst > 0.0 { 1.0 - ssr / sst } else { 1.0 };
    let slope_se = if known_variance {
        (1.0 / sxx).sqrt()
    } else {
        let dof = (n - 2) as f64;
        (ssr / dof / sxx).sqrt()
    };
    Ok(LineFit { slope, intercept, r_squared, slope_se, points: n })
}

/// Two-sided Student-t quantile, for confidence intervals on fitted slopes.
pub fn t_quantile(p: f64, dof: f64) -> f64 {
    use statrs::distribution::ContinuousCDF;
    let t = statrs::distribution::StudentsT::new(0.0, 1.0, dof.max(1.0))
        .expect("valid Student t parameters");
    t.inverse_cdf(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn legendre_integrates_polynomials() {
        let rule = gauss_legendre(8);
        // degree 15 is exact for an 8-point rule
        let val: f64 = rule.iter().map(|(t, w)| w * t.powi(14)).sum();
        assert_abs_diff_eq!(val, 2.0 / 15.0, epsilon = 1e-13);
        let total: f64 = rule.iter().map(|(_, w)| w).sum();
        assert_abs_diff_eq!(total, 2.0, epsilon = 1e-13);
    }

    #[test]
    fn hermite_normal_moments() {
        let rule = hermite_normal_rule(24);
        let m0: f64 = rule.iter().map(|(_, w)| w).sum();
        let m2: f64 = rule.iter().map(|(z, w)| w * z * z).sum();
        let m4: f64 = rule.iter().map(|(z, w)| w * z.powi(4)).sum();
        assert_abs_diff_eq!(m0, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m2, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m4, 3.0, epsilon = 1e-11);
    }

    #[test]
    fn normal_cdf_roundtrip() {
        for &p in &[0.01, 0.3, 0.5, 0.9, 0.999] {
            assert_abs_diff_eq!(normal_cdf(normal_inv_cdf(p)), p, epsilon = 1e-10);
        }
        assert_abs_diff_eq!(normal_cdf(0.0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn exact_line_fit() {
        let xs: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 - 0.5 * x).collect();
        let fit = fit_line(&xs, &ys).unwrap();
        assert_abs_diff_eq!(fit.slope, -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.intercept, 2.0, epsilon = 1e-12);
        assert!(fit.r_squared > 1.0 - 1e-12);
    }

    #[test]
    fn fit_needs_three_points() {
        assert!(fit_line(&[0.0, 1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn pairwise_matches_naive() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let naive: f64 = v.iter().sum();
        assert_abs_diff_eq!(pairwise_sum(&v), naive, epsilon = 1e-9);
    }

    #[test]
    fn r_sequence_in_unit_cube() {
        for p in r_sequence(3, 100) {
            assert_eq!(p.len(), 3);
            assert!(p.iter().all(|&u| (0.0..1.0).contains(&u)));
        }
    }
}
