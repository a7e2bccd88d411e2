//! Convex sets with exact Gaussian measures, empirical measures of sample
//! clouds, the convex-set discrepancy estimator, and Gaussian shell-bound
//! checks.
//!
//! Shapes are restricted to half-spaces, Euclidean balls and axis-aligned
//! boxes so that the Gaussian measure is exact (`Φ`, (noncentral) chi-square,
//! products of `Φ` differences); the discrepancy estimate over a finite
//! family is then a pure lower bound for the supremum over all convex sets
//! with purely statistical error.

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::gamma_lr;

use crate::error::{Error, Result};
use crate::exec;
use crate::numerics::{normal_cdf, normal_inv_cdf, pairwise_sum};
use crate::rng;

/// A convex subset of `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvexSet {
    /// `{ x : a·x <= b }` with `‖a‖ = 1`.
    HalfSpace { a: Vec<f64>, b: f64 },
    /// `{ x : ‖x - c‖ <= r }`.
    Ball { c: Vec<f64>, r: f64 },
    /// `{ x : lo <= x <= hi }` componentwise.
    AxisBox { lo: Vec<f64>, hi: Vec<f64> },
}

impl ConvexSet {
    /// Normalizing half-space constructor.
    pub fn half_space(a: Vec<f64>, b: f64) -> Result<Self> {
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-300 {
            return Err(Error::domain("half-space needs a nonzero normal"));
        }
        Ok(ConvexSet::HalfSpace { a: a.into_iter().map(|v| v / norm).collect(), b: b / norm })
    }

    pub fn ball(c: Vec<f64>, r: f64) -> Result<Self> {
        if r <= 0.0 {
            return Err(Error::domain(format!("ball radius must be positive, got {r}")));
        }
        Ok(ConvexSet::Ball { c, r })
    }

    pub fn axis_box(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.iter().zip(&hi).any(|(l, h)| l >= h) {
            return Err(Error::domain("box needs lo < hi componentwise"));
        }
        Ok(ConvexSet::AxisBox { lo, hi })
    }

    pub fn dim(&self) -> usize {
        match self {
            ConvexSet::HalfSpace { a, .. } => a.len(),
            ConvexSet::Ball { c, .. } => c.len(),
            ConvexSet::AxisBox { lo, .. } => lo.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ConvexSet::HalfSpace { a, .. } => {
                let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-12 {
                    return Err(Error::domain(format!("half-space normal has ‖a‖ = {norm}")));
                }
            }
            ConvexSet::Ball { r, .. } => {
                if *r <= 0.0 {
                    return Err(Error::domain("ball radius must be positive"));
                }
            }
            ConvexSet::AxisBox { lo, hi } => {
                if lo.iter().zip(hi).any(|(l, h)| l >= h) {
                    return Err(Error::domain("box is empty"));
                }
            }
        }
        Ok(())
    }

    pub fn shape_name(&self) -> &'static str {
        match self {
            ConvexSet::HalfSpace { .. } => "half_space",
            ConvexSet::Ball { .. } => "ball",
            ConvexSet::AxisBox { .. } => "axis_box",
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            ConvexSet::HalfSpace { a, b } => dot(a, x) <= *b,
            ConvexSet::Ball { c, r } => dist2(c, x) <= r * r,
            ConvexSet::AxisBox { lo, hi } => {
                x.iter().zip(lo).all(|(v, l)| v >= l) && x.iter().zip(hi).all(|(v, h)| v <= h)
            }
        }
    }

    /// Euclidean distance to the set (zero inside).
    pub fn dist(&self, x: &[f64]) -> f64 {
        match self {
            ConvexSet::HalfSpace { a, b } => (dot(a, x) - b).max(0.0),
            ConvexSet::Ball { c, r } => (dist2(c, x).sqrt() - r).max(0.0),
            ConvexSet::AxisBox { lo, hi } => {
                let mut s = 0.0;
                for i in 0..x.len() {
                    let e = (lo[i] - x[i]).max(0.0).max(x[i] - hi[i]);
                    s += e * e;
                }
                s.sqrt()
            }
        }
    }

    /// Distance to the complement (zero outside); realizes `C^{-ε}` as
    /// `{ depth > ε }`.
    pub fn depth(&self, x: &[f64]) -> f64 {
        match self {
            ConvexSet::HalfSpace { a, b } => (b - dot(a, x)).max(0.0),
            ConvexSet::Ball { c, r } => (r - dist2(c, x).sqrt()).max(0.0),
            ConvexSet::AxisBox { lo, hi } => {
                let mut m = f64::INFINITY;
                for i in 0..x.len() {
                    m = m.min(x[i] - lo[i]).min(hi[i] - x[i]);
                }
                m.max(0.0)
            }
        }
    }

    /// Gradient of the distance function (a unit vector outside the set,
    /// zero inside; an arbitrary subgradient choice on kinks).
    pub fn dist_gradient(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        match self {
            ConvexSet::HalfSpace { a, b } => {
                if dot(a, x) > *b {
                    a.clone()
                } else {
                    vec![0.0; d]
                }
            }
            ConvexSet::Ball { c, r } => {
                let rho = dist2(c, x).sqrt();
                if rho > *r && rho > 0.0 {
                    x.iter().zip(c).map(|(v, cc)| (v - cc) / rho).collect()
                } else {
                    vec![0.0; d]
                }
            }
            ConvexSet::AxisBox { lo, hi } => {
                let mut g: Vec<f64> = (0..d)
                    .map(|i| {
                        if x[i] > hi[i] {
                            x[i] - hi[i]
                        } else if x[i] < lo[i] {
                            x[i] - lo[i]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for v in &mut g {
                        *v /= norm;
                    }
                }
                g
            }
        }
    }

    /// The `ε`-inflation `C^ε`, realized per shape.
    pub fn inflate(&self, eps: f64) -> ConvexSet {
        match self {
            ConvexSet::HalfSpace { a, b } => ConvexSet::HalfSpace { a: a.clone(), b: b + eps },
            ConvexSet::Ball { c, r } => ConvexSet::Ball { c: c.clone(), r: r + eps },
            ConvexSet::AxisBox { lo, hi } => ConvexSet::AxisBox {
                lo: lo.iter().map(|v| v - eps).collect(),
                hi: hi.iter().map(|v| v + eps).collect(),
            },
        }
    }

    /// Exact standard Gaussian measure.
    pub fn gaussian_measure(&self) -> Result<f64> {
        match self {
            ConvexSet::HalfSpace { b, .. } => Ok(normal_cdf(*b)),
            ConvexSet::Ball { c, r } => {
                let lambda = c.iter().map(|v| v * v).sum::<f64>();
                if lambda == 0.0 {
                    Ok(chi2_cdf(c.len() as f64, r * r))
                } else {
                    Ok(noncentral_chi2_cdf(c.len(), lambda, r * r, 1e-10, 100_000)?.value)
                }
            }
            ConvexSet::AxisBox { lo, hi } => {
                Ok(lo.iter().zip(hi).map(|(l, h)| normal_cdf(*h) - normal_cdf(*l)).product())
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Central chi-square distribution function (regularized lower gamma).
pub fn chi2_cdf(dof: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_lr(0.5 * dof, 0.5 * x)
    }
}

/// Value of the noncentral chi-square CDF with the number of Poisson-mixture
/// terms that were used.
#[derive(Debug, Clone, Copy)]
pub struct NcChi2 {
    pub value: f64,
    pub terms: usize,
}

/// `P(χ²_k(λ) <= x)` by the Poisson mixture
/// `Σ_j e^{-λ/2} (λ/2)^j / j! · P(χ²_{k+2j} <= x)`, expanded outward from
/// the mode `j₀ = ⌊λ/2⌋` until the unassigned Poisson mass drops below
/// `rel_tol` (the remaining terms contribute at most that mass).
pub fn noncentral_chi2_cdf(
    dof: usize,
    lambda: f64,
    x: f64,
    rel_tol: f64,
    max_terms: usize,
) -> Result<NcChi2> {
    if lambda < 0.0 || dof == 0 {
        return Err(Error::domain("noncentral chi-square needs dof >= 1, lambda >= 0"));
    }
    if x <= 0.0 {
        return Ok(NcChi2 { value: 0.0, terms: 0 });
    }
    if lambda == 0.0 {
        return Ok(NcChi2 { value: chi2_cdf(dof as f64, x), terms: 1 });
    }
    let half_l = 0.5 * lambda;
    let half_x = 0.5 * x;
    let k2 = 0.5 * dof as f64;
    let j0 = half_l.floor();
    use statrs::function::gamma::ln_gamma;
    let ln_p0 = j0 * half_l.ln() - half_l - ln_gamma(j0 + 1.0);
    let p0 = ln_p0.exp();
    let c0 = gamma_lr(k2 + j0, half_x);
    // t_j = (x/2)^(k/2 + j) e^{-x/2} / Γ(k/2 + j + 1), so that
    // P(a + 1, x/2) = P(a, x/2) − t_j with a = k/2 + j
    let ln_t0 = (k2 + j0) * half_x.ln() - half_x - ln_gamma(k2 + j0 + 1.0);
    let t0 = ln_t0.exp();

    let mut sum = p0 * c0;
    let mut mass = p0;
    let mut terms = 1usize;

    // upward from j0
    let (mut pj, mut cj, mut tj, mut j) = (p0, c0, t0, j0);
    loop {
        cj -= tj;
        if cj < 0.0 {
            cj = 0.0;
        }
        tj *= half_x / (k2 + j + 1.0);
        pj *= half_l / (j + 1.0);
        j += 1.0;
        sum += pj * cj;
        mass += pj;
        terms += 1;
        if 1.0 - mass <= rel_tol || pj < 1e-320 {
            break;
        }
        if terms > max_terms {
            return Err(Error::Numeric(format!(
                "noncentral chi-square mixture did not converge after {terms} terms"
            )));
        }
    }
    // downward from j0
    let (mut pj, mut cj, mut tj, mut j) = (p0, c0, t0, j0);
    while j >= 1.0 && 1.0 - mass > rel_tol {
        tj *= (k2 + j) / half_x;
        cj += tj;
        if cj > 1.0 {
            cj = 1.0;
        }
        pj *= j / half_l;
        j -= 1.0;
        sum += pj * cj;
        mass += pj;
        terms += 1;
        if pj < 1e-320 {
            break;
        }
        if terms > max_terms {
            return Err(Error::Numeric(format!(
                "noncentral chi-square mixture did not converge after {terms} terms"
            )));
        }
    }
    Ok(NcChi2 { value: sum.clamp(0.0, 1.0), terms })
}

/// A sample cloud in `R^d`, row-major `(sample, component)`.
#[derive(Debug, Clone)]
pub struct SampleCloud {
    data: Vec<f64>,
    dim: usize,
}

impl SampleCloud {
    pub fn new(data: Vec<f64>, dim: usize) -> Self {
        assert!(dim >= 1 && data.len() % dim == 0, "row-major layout mismatch");
        SampleCloud { data, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Projections onto a direction.
    pub fn project(&self, dir: &[f64]) -> Vec<f64> {
        (0..self.count()).map(|i| dot(self.row(i), dir)).collect()
    }
}

/// Standard Gaussian cloud from the deterministic chunked sampler.
pub fn sample_gaussian_cloud(dim: usize, count: usize, seed: u64) -> SampleCloud {
    let mut data = vec![0.0; count * dim];
    let chunks: Vec<(usize, Vec<f64>)> = exec::map_indexed(count.div_ceil(exec::CHUNK), |c| {
        let lo = c * exec::CHUNK;
        let hi = (lo + exec::CHUNK).min(count);
        let mut rng = rng::stream(seed, "gaussian-cloud", c as u64);
        let vals: Vec<f64> = (0..(hi - lo) * dim).map(|_| rng.sample(StandardNormal)).collect();
        (lo * dim, vals)
    });
    for (offset, vals) in chunks {
        data[offset..offset + vals.len()].copy_from_slice(&vals);
    }
    SampleCloud::new(data, dim)
}

/// Empirical measure of a set with its binomial standard error.
pub fn empirical_measure(cloud: &SampleCloud, set: &ConvexSet) -> Result<(f64, f64)> {
    let m = cloud.count();
    if m == 0 {
        return Err(Error::domain("empirical measure needs at least one sample"));
    }
    let mut hits = 0usize;
    for i in 0..m {
        if set.contains(cloud.row(i)) {
            hits += 1;
        }
    }
    let p = hits as f64 / m as f64;
    let se = (p * (1.0 - p) / m as f64).sqrt();
    Ok((p, se))
}

/// Generation spec for a finite surrogate of the class of convex sets.
#[derive(Debug, Clone)]
pub struct ConvexFamilySpec {
    pub dim: usize,
    pub half_spaces: usize,
    pub balls: usize,
    pub boxes: usize,
    pub seed: u64,
    /// Ball centers are drawn uniformly from `[-range, range]^d`.
    pub ball_center_range: f64,
    pub ball_radius_range: (f64, f64),
    pub box_center_range: f64,
    pub box_halfwidth_range: (f64, f64),
}

impl ConvexFamilySpec {
    /// The default family: 256 half-spaces (64 low-discrepancy directions
    /// with three sample-quantile offsets and one random offset each), 64
    /// balls and 32 axis boxes.
    pub fn default_family(dim: usize, seed: u64) -> Self {
        ConvexFamilySpec {
            dim,
            half_spaces: 256,
            balls: 64,
            boxes: 32,
            seed,
            ball_center_range: 1.5,
            ball_radius_range: (0.5, 2.5),
            box_center_range: 1.5,
            box_halfwidth_range: (0.3, 2.0),
        }
    }

    /// Low-discrepancy unit directions: signs in d=1, equispaced on the
    /// circle in d=2, a Fibonacci sphere in d=3, normalized Gaussian draws
    /// beyond.
    pub fn directions(&self, count: usize) -> Vec<Vec<f64>> {
        let d = self.dim;
        match d {
            1 => (0..count).map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }]).collect(),
            2 => (0..count)
                .map(|i| {
                    let theta = 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / count as f64;
                    vec![theta.cos(), theta.sin()]
                })
                .collect(),
            3 => {
                let golden = (1.0 + 5.0_f64.sqrt()) / 2.0;
                (0..count)
                    .map(|i| {
                        let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
                        let rho = (1.0 - z * z).sqrt();
                        let theta = 2.0 * std::f64::consts::PI * (i as f64 / golden).fract();
                        vec![rho * theta.cos(), rho * theta.sin(), z]
                    })
                    .collect()
            }
            _ => {
                let mut rng = rng::stream(self.seed, "family-directions", 0);
                (0..count)
                    .map(|_| {
                        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                        v.iter_mut().for_each(|x| *x /= n);
                        v
                    })
                    .collect()
            }
        }
    }

    /// Generate the family; when a sample cloud is supplied, half-space
    /// offsets are fitted to its projection quantiles (this maximizes the
    /// discrepancy power for near-Gaussian clouds).
    pub fn generate(&self, samples: Option<&SampleCloud>) -> Vec<ConvexSet> {
        let d = self.dim;
        let mut sets = Vec::with_capacity(self.half_spaces + self.balls + self.boxes);
        let mut rng = rng::stream(self.seed, "family", 0);
        let per_dir = 4usize;
        let n_dirs = (self.half_spaces / per_dir).max(1);
        let dirs = self.directions(n_dirs);
        let quantiles = [0.5, 0.8, 0.95];
        for dir in &dirs {
            if sets.len() >= self.half_spaces {
                break;
            }
            let offsets: Vec<f64> = match samples {
                Some(cloud) if cloud.count() > 4 => {
                    let mut proj = cloud.project(dir);
                    quantiles
                        .iter()
                        .map(|&q| {
                            let k = ((proj.len() - 1) as f64 * q).round() as usize;
                            *proj.select_nth_unstable_by(k, f64::total_cmp).1
                        })
                        .collect()
                }
                _ => quantiles.iter().map(|&q| normal_inv_cdf(q)).collect(),
            };
            for b in offsets {
                sets.push(ConvexSet::HalfSpace { a: dir.clone(), b });
            }
            sets.push(ConvexSet::HalfSpace { a: dir.clone(), b: rng.gen_range(-3.0..3.0) });
        }
        while sets.len() < self.half_spaces {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= n);
            sets.push(ConvexSet::HalfSpace { a: v, b: rng.gen_range(-3.0..3.0) });
        }
        for _ in 0..self.balls {
            let c: Vec<f64> =
                (0..d).map(|_| rng.gen_range(-self.ball_center_range..self.ball_center_range)).collect();
            let r = rng.gen_range(self.ball_radius_range.0..self.ball_radius_range.1);
            sets.push(ConvexSet::Ball { c, r });
        }
        for _ in 0..self.boxes {
            let c: Vec<f64> =
                (0..d).map(|_| rng.gen_range(-self.box_center_range..self.box_center_range)).collect();
            let w: Vec<f64> = (0..d)
                .map(|_| rng.gen_range(self.box_halfwidth_range.0..self.box_halfwidth_range.1))
                .collect();
            sets.push(ConvexSet::AxisBox {
                lo: c.iter().zip(&w).map(|(a, b)| a - b).collect(),
                hi: c.iter().zip(&w).map(|(a, b)| a + b).collect(),
            });
        }
        sets
    }
}

/// One row of the per-set discrepancy table.
#[derive(Debug, Clone)]
pub struct DcRow {
    pub set_index: usize,
    pub shape: &'static str,
    pub empirical: f64,
    pub gaussian: f64,
    pub diff: f64,
    pub se: f64,
}

/// The family discrepancy estimate: a lower bound for
/// `sup_C |P(W in C) - N_d(C)|` over all convex sets.
#[derive(Debug, Clone)]
pub struct DcReport {
    pub dc: f64,
    pub argmax: usize,
    pub rows: Vec<DcRow>,
}

impl DcReport {
    /// Standard error of the winning set's empirical measure.
    pub fn argmax_se(&self) -> f64 {
        self.rows[self.argmax].se
    }

    pub fn max_se(&self) -> f64 {
        self.rows.iter().map(|r| r.se).fold(0.0, f64::max)
    }
}

/// Maximum empirical/Gaussian discrepancy over the family.
pub fn dc_estimate(cloud: &SampleCloud, dim: usize, family: &[ConvexSet]) -> Result<DcReport> {
    if family.is_empty() {
        return Err(Error::domain("dc estimate needs a nonempty family"));
    }
    if cloud.dim() != dim {
        return Err(Error::domain("sample cloud dimension mismatch"));
    }
    let rows = exec::map_indexed(family.len(), |i| -> Result<DcRow> {
        let set = &family[i];
        let (p, se) = empirical_measure(cloud, set)?;
        let g = set.gaussian_measure()?;
        Ok(DcRow { set_index: i, shape: set.shape_name(), empirical: p, gaussian: g, diff: (p - g).abs(), se })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let argmax = rows
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.diff.total_cmp(&b.1.diff))
        .map(|(i, _)| i)
        .expect("nonempty rows");
    Ok(DcReport { dc: rows[argmax].diff, argmax, rows })
}

/// Monte-Carlo shell masses for one set.
#[derive(Debug, Clone)]
pub struct ShellRow {
    pub set_index: usize,
    pub shape: &'static str,
    /// Estimate of `N_d(C^ε \ C)` with its standard error.
    pub outer: (f64, f64),
    /// Estimate of `N_d(C \ C^{-ε})` with its standard error.
    pub inner: (f64, f64),
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct ShellReport {
    pub eps: f64,
    pub bound: f64,
    pub rows: Vec<ShellRow>,
}

impl ShellReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

/// Check `max{N_d(C^ε\C), N_d(C\C^{-ε})} <= 4 d^{1/4} ε` by Monte Carlo
/// (`+ 3` standard errors of slack) for every set in the family.
pub fn shell_bound_check(
    family: &[ConvexSet],
    dim: usize,
    eps: f64,
    mc_points: usize,
    seed: u64,
) -> Result<ShellReport> {
    if eps <= 0.0 {
        return Err(Error::domain("shell check needs eps > 0"));
    }
    let cloud = sample_gaussian_cloud(dim, mc_points, seed);
    let bound = 4.0 * (dim as f64).powf(0.25) * eps;
    let m = mc_points as f64;
    let rows = exec::map_indexed(family.len(), |i| {
        let set = &family[i];
        let mut outer_hits = 0usize;
        let mut inner_hits = 0usize;
        for s in 0..mc_points {
            let x = cloud.row(s);
            if set.contains(x) {
                if set.depth(x) <= eps {
                    inner_hits += 1;
                }
            } else if set.dist(x) <= eps {
                outer_hits += 1;
            }
        }
        let po = outer_hits as f64 / m;
        let pi = inner_hits as f64 / m;
        let se_o = (po * (1.0 - po) / m).sqrt();
        let se_i = (pi * (1.0 - pi) / m).sqrt();
        let pass = po <= bound + 3.0 * se_o && pi <= bound + 3.0 * se_i;
        ShellRow { set_index: i, shape: set.shape_name(), outer: (po, se_o), inner: (pi, se_i), bound, pass }
    });
    Ok(ShellReport { eps, bound, rows })
}

/// Mean and standard error of a bounded function over a cloud; used by the
/// smoothing-based discrepancy chain.
pub fn sample_mean(cloud: &SampleCloud, f: impl Fn(&[f64]) -> f64 + Sync + Send) -> (f64, f64) {
    let m = cloud.count();
    let vals: Vec<f64> = exec::map_indexed(m, |i| f(cloud.row(i)));
    let mean = pairwise_sum(&vals) / m as f64;
    let var = pairwise_sum(&vals.iter().map(|v| (v - mean) * (v - mean)).collect::<Vec<_>>())
        / (m as f64 - 1.0).max(1.0);
    (mean, (var / m as f64).sqrt())
}
