//! Vector observables, centered Birkhoff sums over index windows, Monte-Carlo
//! covariance matrices with standard errors, normalization, and the
//! eigenvalue-growth checks behind the main convergence estimate.
//!
//! Index conventions are 0-based: the window `(δ1, δ2)` covers the integers
//! `δ1 N <= n < δ2 N`, the `n`-th summand is `φ̄_n ∘ T_n ... T_1` with
//! `T_0 ... T_1 = id`, and centering constants `μ(φ ∘ T_n) = λ(φ · P_n ρ)`
//! are computed through the transfer operator, not by Monte Carlo.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;

use crate::convex::SampleCloud;
use crate::error::{Error, Result};
use crate::exec::{self, CHUNK};
use crate::maps::SequentialSchedule;
use crate::numerics;
use crate::rng;
use crate::transfer::{correlation2, GridDensity, ScalarFn, TransferEngine};

/// Grid used when certifying observable norms.
const NORM_GRID: usize = 1 << 12;

/// A vector of Hölder observables with a certified norm bound `L`.
#[derive(Clone)]
pub struct VectorObservable {
    comps: Vec<ScalarFn>,
    pub alpha: f64,
    /// Certified bound with `‖φ_r‖_α <= L` for every component; `L >= 1`.
    pub l_bound: f64,
}

impl VectorObservable {
    pub fn new(comps: Vec<ScalarFn>, alpha: f64, l_bound: f64) -> Result<Self> {
        if comps.is_empty() {
            return Err(Error::domain("observable needs at least one component"));
        }
        if l_bound < 1.0 {
            return Err(Error::domain(format!("observable bound must satisfy L >= 1, got {l_bound}")));
        }
        let obs = VectorObservable { comps, alpha, l_bound };
        for r in 0..obs.dim() {
            let est = obs.component_alpha_norm(r);
            if est > l_bound {
                return Err(Error::domain(format!(
                    "component {r} has grid alpha-norm {est:.4} > certified L = {l_bound}"
                )));
            }
        }
        Ok(obs)
    }

    /// Trigonometric observable: entry `(k, true)` is `sin(2πkx)`, entry
    /// `(k, false)` is `cos(2πkx)`.
    pub fn trig(modes: &[(u32, bool)], alpha: f64, l_bound: f64) -> Self {
        let comps: Vec<ScalarFn> = modes
            .iter()
            .map(|&(k, is_sin)| {
                let w = 2.0 * std::f64::consts::PI * k as f64;
                let f: ScalarFn = if is_sin {
                    Arc::new(move |x: f64| (w * x).sin())
                } else {
                    Arc::new(move |x: f64| (w * x).cos())
                };
                f
            })
            .collect();
        VectorObservable::new(comps, alpha, l_bound).expect("trig observable within bound")
    }

    /// Scaled trigonometric observable with the certified bound taken from
    /// the grid estimate.
    pub fn trig_scaled(modes: &[(u32, bool, f64)], alpha: f64) -> Result<Self> {
        let comps: Vec<ScalarFn> = modes
            .iter()
            .map(|&(k, is_sin, amp)| {
                let w = 2.0 * std::f64::consts::PI * k as f64;
                let f: ScalarFn = if is_sin {
                    Arc::new(move |x: f64| amp * (w * x).sin())
                } else {
                    Arc::new(move |x: f64| amp * (w * x).cos())
                };
                f
            })
            .collect();
        let probe = VectorObservable { comps, alpha, l_bound: f64::INFINITY };
        let est = (0..probe.dim()).map(|r| probe.component_alpha_norm(r)).fold(0.0, f64::max);
        VectorObservable::new(probe.comps, alpha, (est * 1.0001).max(1.0))
    }

    pub fn dim(&self) -> usize {
        self.comps.len()
    }

    pub fn component(&self, r: usize) -> &ScalarFn {
        &self.comps[r]
    }

    pub fn eval_into(&self, x: f64, out: &mut [f64]) {
        for (r, c) in self.comps.iter().enumerate() {
            out[r] = c(x);
        }
    }

    /// Grid estimate of `‖φ_r‖_α` (sup plus strided seminorm).
    pub fn component_alpha_norm(&self, r: usize) -> f64 {
        let f = crate::transfer::GridFunction::from_fn(NORM_GRID, self.alpha, |x| (self.comps[r])(x));
        f.alpha_norm()
    }

    /// Shift every component by a constant vector (doubles the certified
    /// bound, matching the centering estimate `‖φ − μ(φ∘T_n)‖_α <= 2L`).
    pub fn shifted(&self, shift: &[f64]) -> VectorObservable {
        let comps: Vec<ScalarFn> = self
            .comps
            .iter()
            .zip(shift)
            .map(|(c, &s)| {
                let c = c.clone();
                let f: ScalarFn = Arc::new(move |x: f64| c(x) - s);
                f
            })
            .collect();
        VectorObservable { comps, alpha: self.alpha, l_bound: 2.0 * self.l_bound }
    }
}

impl std::fmt::Debug for VectorObservable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VectorObservable")
            .field("dim", &self.dim())
            .field("alpha", &self.alpha)
            .field("l_bound", &self.l_bound)
            .finish()
    }
}

/// Per-step centering constants `c_n = μ(φ ∘ T_n)`, computed through the
/// transfer operator: `c_n = λ(φ · P_n ρ)`.
pub fn centering_constants(
    schedule: &SequentialSchedule,
    phi: &VectorObservable,
    n_max: usize,
    mu: &GridDensity,
    engine: &TransferEngine,
) -> Result<Vec<Vec<f64>>> {
    let cells = engine.cells();
    let node_vals: Vec<Vec<f64>> = (0..phi.dim())
        .map(|r| (0..=cells).map(|i| (phi.component(r))(i as f64 / cells as f64)).collect())
        .collect();
    let mut centers = Vec::with_capacity(n_max);
    engine.iterate(schedule, mu.as_fn(), n_max.saturating_sub(1), |_, rho_n| {
        let c: Vec<f64> = node_vals
            .iter()
            .map(|nv| {
                numerics::trapezoid(
                    &rho_n.values().iter().zip(nv).map(|(a, b)| a * b).collect::<Vec<_>>(),
                )
            })
            .collect();
        centers.push(c);
    })?;
    Ok(centers)
}

/// The per-window centering of one observable: `φ̄ = φ − μ(φ ∘ T_n)`.
pub fn center_observable(
    phi: &VectorObservable,
    schedule: &SequentialSchedule,
    n: usize,
    mu: &GridDensity,
    engine: &TransferEngine,
) -> Result<VectorObservable> {
    let centers = centering_constants(schedule, phi, n + 1, mu, engine)?;
    Ok(phi.shifted(&centers[n]))
}

/// An observable together with per-step centering constants, acting as the
/// sequence `φ̄_n = φ − c_n`.
#[derive(Debug, Clone)]
pub struct CenteredObservables {
    pub phi: VectorObservable,
    /// `centers[n][r]`, for `n = 0..n_max`.
    pub centers: Vec<Vec<f64>>,
}

impl CenteredObservables {
    pub fn prepare(
        schedule: &SequentialSchedule,
        phi: &VectorObservable,
        n_max: usize,
        mu: &GridDensity,
        engine: &TransferEngine,
    ) -> Result<Self> {
        let centers = centering_constants(schedule, phi, n_max, mu, engine)?;
        Ok(CenteredObservables { phi: phi.clone(), centers })
    }

    /// No centering (all constants zero).
    pub fn uncentered(phi: &VectorObservable, n_max: usize) -> Self {
        let centers = vec![vec![0.0; phi.dim()]; n_max];
        CenteredObservables { phi: phi.clone(), centers }
    }

    pub fn dim(&self) -> usize {
        self.phi.dim()
    }
}

/// Integer window `δ1 N <= n < δ2 N`.
pub fn window_bounds(d1: f64, d2: f64, n: usize) -> (usize, usize) {
    let lo = (d1 * n as f64 - 1e-9).ceil().max(0.0) as usize;
    let hi = (d2 * n as f64 - 1e-9).ceil().max(0.0) as usize;
    (lo.min(n), hi.min(n))
}

/// Birkhoff sum of the centered observables along the orbit of `x`, over the
/// index window `(δ1, δ2)`; one orbit pass.
pub fn birkhoff_sum(
    schedule: &SequentialSchedule,
    obs: &CenteredObservables,
    d1: f64,
    d2: f64,
    n: usize,
    x: f64,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&d1) || !(0.0..=1.0).contains(&d2) || d1 > d2 {
        return Err(Error::domain("window needs 0 <= d1 <= d2 <= 1"));
    }
    let (lo, hi) = window_bounds(d1, d2, n);
    let d = obs.dim();
    let mut acc = vec![0.0; d];
    if lo >= hi {
        return Ok(acc);
    }
    let steps = schedule.steps_between(1, hi.saturating_sub(1))?;
    let mut buf = vec![0.0; d];
    let mut y = x;
    for idx in 0..hi {
        if idx >= lo {
            obs.phi.eval_into(y, &mut buf);
            let c = &obs.centers[idx];
            for r in 0..d {
                acc[r] += buf[r] - c[r];
            }
        }
        if idx + 1 < hi {
            y = steps[idx].eval(y);
        }
    }
    Ok(acc)
}

/// Draw `count` points from a grid density by inverse-CDF sampling through
/// the cumulative trapezoid (piecewise-quadratic CDF inverted per cell).
pub fn sample_mu(mu: &GridDensity, count: usize, seed: u64) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::domain("sample_mu needs at least one draw"));
    }
    let inv = MuSampler::new(mu)?;
    let mut out = vec![0.0; count];
    let parts: Vec<(usize, Vec<f64>)> = exec::map_indexed(count.div_ceil(CHUNK), |c| {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(count);
        let mut rng = rng::stream(seed, "sample-mu", c as u64);
        let vals = (lo..hi).map(|_| inv.draw(rng.gen::<f64>())).collect();
        (lo, vals)
    });
    for (lo, vals) in parts {
        out[lo..lo + vals.len()].copy_from_slice(&vals);
    }
    Ok(out)
}

/// Inverse-CDF sampler for a grid density.
pub struct MuSampler {
    cdf: Vec<f64>,
    values: Vec<f64>,
    cells: usize,
}

impl MuSampler {
    pub fn new(mu: &GridDensity) -> Result<Self> {
        let v = mu.as_fn().values();
        let g = mu.cells();
        let h = 1.0 / g as f64;
        let mut cdf = Vec::with_capacity(g + 1);
        cdf.push(0.0);
        let mut acc = 0.0;
        for i in 0..g {
            acc += 0.5 * (v[i] + v[i + 1]) * h;
            cdf.push(acc);
        }
        let total = cdf[g];
        if total <= 1e-12 {
            return Err(Error::domain("degenerate density"));
        }
        let mut cdf = cdf;
        for c in cdf.iter_mut() {
            *c /= total;
        }
        Ok(MuSampler { cdf, values: v.to_vec(), cells: g })
    }

    /// Map a uniform variate through the inverse CDF.
    pub fn draw(&self, u: f64) -> f64 {
        let g = self.cells;
        let h = 1.0 / g as f64;
        let i = match self.cdf.binary_search_by(|c| c.total_cmp(&u)) {
            Ok(k) => k.min(g - 1),
            Err(k) => k.saturating_sub(1).min(g - 1),
        };
        let du = u - self.cdf[i];
        let v0 = self.values[i];
        let v1 = self.values[i + 1];
        let a = 0.5 * (v1 - v0) / h;
        // solve a t^2 + v0 t = du on [0, h]
        let t = if a.abs() < 1e-12 * (v0.abs() + 1.0) {
            if v0 > 0.0 {
                du / v0
            } else {
                0.5 * h
            }
        } else {
            let disc = (v0 * v0 + 4.0 * a * du).max(0.0);
            (-v0 + disc.sqrt()) / (2.0 * a)
        };
        (i as f64 * h + t.clamp(0.0, h)).clamp(0.0, 1.0)
    }
}

/// Accumulated per-sample sums over consecutive index segments, row-major
/// `(sample, segment, component)`.
pub struct SegmentSums {
    pub breaks: Vec<usize>,
    pub dim: usize,
    pub count: usize,
    data: Vec<f64>,
}

impl SegmentSums {
    pub fn segments(&self) -> usize {
        self.breaks.len() - 1
    }

    fn row(&self, s: usize) -> &[f64] {
        let w = self.segments() * self.dim;
        &self.data[s * w..(s + 1) * w]
    }

    /// Window sum for sample `s` over segments `[s0, s1)`.
    pub fn window_sum(&self, s: usize, s0: usize, s1: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let row = self.row(s);
        for seg in s0..s1 {
            for r in 0..self.dim {
                out[r] += row[seg * self.dim + r];
            }
        }
    }

    /// Segment range covering the integer window `[lo, hi)`; the breakpoints
    /// must contain both bounds.
    pub fn segment_range(&self, lo: usize, hi: usize) -> Option<(usize, usize)> {
        let s0 = self.breaks.iter().position(|&b| b == lo)?;
        let s1 = self.breaks.iter().position(|&b| b == hi)?;
        Some((s0, s1))
    }
}

/// Dither amplitude applied to Monte-Carlo orbits after every step.
///
/// Affine maps such as `2x (mod 1)` are exact mantissa shifts in `f64`, so
/// every double-precision orbit collapses onto the dyadic fixed point after
/// about 53 steps. Re-seeding the lowest mantissa bits with `±5e-16` of
/// stream noise keeps long orbits distributed like the underlying system;
/// the per-step perturbation sits at machine precision, orders of magnitude
/// below any Monte-Carlo tolerance used here.
const ORBIT_DITHER: f64 = 1e-15;

/// One Monte-Carlo pass: sample `count` initial points from `μ` and
/// accumulate the centered observable along each orbit into the segments
/// delimited by `breaks` (strictly increasing, ending at the horizon).
pub fn sample_segment_sums(
    schedule: &SequentialSchedule,
    obs: &CenteredObservables,
    breaks: &[usize],
    mu: &GridDensity,
    count: usize,
    seed: u64,
) -> Result<SegmentSums> {
    if breaks.len() < 2 || breaks.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::domain("segment breakpoints must be strictly increasing"));
    }
    let n = *breaks.last().expect("nonempty breaks");
    if obs.centers.len() < n {
        return Err(Error::domain("centering constants shorter than the horizon"));
    }
    let d = obs.dim();
    let segs = breaks.len() - 1;
    let sampler = MuSampler::new(mu)?;
    let steps = schedule.steps_between(1, n.saturating_sub(1))?;
    let width = segs * d;
    let mut data = vec![0.0; count * width];
    let parts: Vec<(usize, Vec<f64>)> = exec::map_indexed(count.div_ceil(CHUNK), |c| {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(count);
        let mut rng = rng::stream(seed, "orbit", c as u64);
        let mut chunk = vec![0.0; (hi - lo) * width];
        let mut buf = vec![0.0; d];
        for s in 0..hi - lo {
            let mut x = sampler.draw(rng.gen::<f64>());
            let row = &mut chunk[s * width..(s + 1) * width];
            let mut seg = 0usize;
            for idx in 0..n {
                while idx >= breaks[seg + 1] {
                    seg += 1;
                }
                obs.phi.eval_into(x, &mut buf);
                let cn = &obs.centers[idx];
                for r in 0..d {
                    row[seg * d + r] += buf[r] - cn[r];
                }
                if idx + 1 < n {
                    x = steps[idx].eval(x) + (rng.gen::<f64>() - 0.5) * ORBIT_DITHER;
                    if x < 0.0 {
                        x += 1.0;
                    } else if x >= 1.0 {
                        x -= 1.0;
                    }
                }
            }
        }
        (lo, chunk)
    });
    for (lo, chunk) in parts {
        data[lo * width..lo * width + chunk.len()].copy_from_slice(&chunk);
    }
    Ok(SegmentSums { breaks: breaks.to_vec(), dim: d, count, data })
}

/// Monte-Carlo second-moment matrix with eigen data and per-entry standard
/// errors.
#[derive(Debug, Clone)]
pub struct CovarianceReport {
    pub sigma: DMatrix<f64>,
    pub std_errors: DMatrix<f64>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `Σ^{-1/2}` when `λ_min` clears the scale-free tolerance.
    pub inv_sqrt: Option<DMatrix<f64>>,
    pub sample_count: usize,
    pub window: (f64, f64),
    pub n: usize,
}

impl CovarianceReport {
    pub fn invertible(&self) -> bool {
        self.inv_sqrt.is_some()
    }
}

/// Symmetric positive-definite inverse square root by eigendecomposition.
pub fn inv_sqrt(sigma: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let sym = nalgebra::SymmetricEigen::new(sigma.clone());
    let lambda_min = sym.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if lambda_min <= tol {
        return Err(Error::SingularCovariance { lambda_min, tol });
    }
    let d = sigma.nrows();
    let mut scaled = sym.eigenvectors.clone();
    for j in 0..d {
        let s = 1.0 / sym.eigenvalues[j].sqrt();
        for i in 0..d {
            scaled[(i, j)] *= s;
        }
    }
    Ok(&scaled * sym.eigenvectors.transpose())
}

/// Assemble the covariance report for the window covering segments
/// `[s0, s1)` of a segment-sum batch.
pub fn covariance_from_sums(
    sums: &SegmentSums,
    s0: usize,
    s1: usize,
    window: (f64, f64),
    n: usize,
) -> CovarianceReport {
    let d = sums.dim;
    let m = sums.count;
    let width = d * d;
    let acc = exec::chunked_reduce(
        m,
        |_, range| {
            let mut sum = vec![0.0; width];
            let mut sq = vec![0.0; width];
            let mut s_vec = vec![0.0; d];
            for s in range {
                sums.window_sum(s, s0, s1, &mut s_vec);
                for r in 0..d {
                    for c in 0..d {
                        let p = s_vec[r] * s_vec[c];
                        sum[r * d + c] += p;
                        sq[r * d + c] += p * p;
                    }
                }
            }
            (sum, sq)
        },
        |(mut a, mut b), (c, e)| {
            for i in 0..width {
                a[i] += c[i];
                b[i] += e[i];
            }
            (a, b)
        },
    )
    .expect("nonempty sample set");
    let mf = m as f64;
    let sigma = DMatrix::from_fn(d, d, |r, c| acc.0[r * d + c] / mf);
    let std_errors = DMatrix::from_fn(d, d, |r, c| {
        let mean = acc.0[r * d + c] / mf;
        let var = (acc.1[r * d + c] / mf - mean * mean).max(0.0);
        (var / mf).sqrt()
    });
    let sym = nalgebra::SymmetricEigen::new(sigma.clone());
    let lambda_min = sym.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let lambda_max = sym.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-8 * lambda_max.max(0.0);
    let inv = inv_sqrt(&sigma, tol).ok();
    CovarianceReport { sigma, std_errors, lambda_min, lambda_max, inv_sqrt: inv, sample_count: m, window, n }
}

/// Monte-Carlo covariance of the windowed sum, with per-entry standard
/// errors; the observable is centered per step through the transfer
/// operator before summing.
#[allow(clippy::too_many_arguments)]
pub fn covariance_matrix(
    schedule: &SequentialSchedule,
    phi: &VectorObservable,
    d1: f64,
    d2: f64,
    n: usize,
    mu: &GridDensity,
    count: usize,
    seed: u64,
    engine: &TransferEngine,
) -> Result<CovarianceReport> {
    let (report, _) = covariance_with_samples(schedule, phi, d1, d2, n, mu, count, seed, engine)?;
    Ok(report)
}

/// As [`covariance_matrix`], additionally returning the per-sample window
/// sums as a cloud (for normalization downstream).
#[allow(clippy::too_many_arguments)]
pub fn covariance_with_samples(
    schedule: &SequentialSchedule,
    phi: &VectorObservable,
    d1: f64,
    d2: f64,
    n: usize,
    mu: &GridDensity,
    count: usize,
    seed: u64,
    engine: &TransferEngine,
) -> Result<(CovarianceReport, SampleCloud)> {
    let obs = CenteredObservables::prepare(schedule, phi, n, mu, engine)?;
    let (lo, hi) = window_bounds(d1, d2, n);
    if lo >= hi {
        return Err(Error::domain(format!("empty window ({d1}, {d2}) at N = {n}")));
    }
    let breaks = if lo == 0 { vec![0, hi] } else { vec![0, lo, hi] };
    let sums = sample_segment_sums(schedule, &obs, &breaks, mu, count, seed)?;
    let (s0, s1) = sums.segment_range(lo, hi).expect("window on breakpoints");
    let report = covariance_from_sums(&sums, s0, s1, (d1, d2), n);
    let d = phi.dim();
    let mut data = vec![0.0; count * d];
    let mut s_vec = vec![0.0; d];
    for s in 0..count {
        sums.window_sum(s, s0, s1, &mut s_vec);
        data[s * d..(s + 1) * d].copy_from_slice(&s_vec);
    }
    Ok((report, SampleCloud::new(data, d)))
}

/// Normalize a cloud of window sums by `Σ^{-1/2}`.
pub fn normalize_cloud(report: &CovarianceReport, sums: &SampleCloud) -> Result<SampleCloud> {
    let inv = report.inv_sqrt.as_ref().ok_or(Error::SingularCovariance {
        lambda_min: report.lambda_min,
        tol: 1e-8 * report.lambda_max,
    })?;
    let d = sums.dim();
    let mut data = vec![0.0; sums.count() * d];
    for s in 0..sums.count() {
        let row = sums.row(s);
        for r in 0..d {
            let mut acc = 0.0;
            for c in 0..d {
                acc += inv[(r, c)] * row[c];
            }
            data[s * d + r] = acc;
        }
    }
    Ok(SampleCloud::new(data, d))
}

/// Small-`N` oracle: assemble the covariance entrywise from transfer-route
/// correlation sums `Σ_{n,n'} μ(φ̄_r^n φ̄_s^{n'})`.
pub fn covariance_by_correlations(
    schedule: &SequentialSchedule,
    phi: &VectorObservable,
    n: usize,
    mu: &GridDensity,
    engine: &TransferEngine,
) -> Result<DMatrix<f64>> {
    if n > 12 {
        return Err(Error::Resource(format!("correlation-sum covariance capped at N = 12, got {n}")));
    }
    let d = phi.dim();
    let mut sigma = DMatrix::zeros(d, d);
    for r in 0..d {
        for c in 0..d {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let v = if j >= i {
                        correlation2(schedule, phi.component(r), phi.component(c), i, j - i, mu, engine)?
                            .transfer
                    } else {
                        correlation2(schedule, phi.component(c), phi.component(r), j, i - j, mu, engine)?
                            .transfer
                    };
                    acc += v;
                }
            }
            sigma[(r, c)] = acc;
        }
    }
    Ok(sigma)
}

/// Per-triple outcome of the eigenvalue-growth check.
#[derive(Debug, Clone)]
pub struct C1c2Row {
    pub d1: f64,
    pub d: f64,
    pub d2: f64,
    pub lambda_max: f64,
    /// `λ_min` of the larger sub-window, `None` when that window is
    /// degenerate or numerically singular.
    pub lambda_min_sub: Option<f64>,
    /// `λ_max / λ_min_sub`.
    pub ratio: Option<f64>,
    pub skipped: bool,
}

/// Fits of the two constants for a grid of window exponents.
#[derive(Debug, Clone)]
pub struct C1c2Report {
    pub n: usize,
    pub rows: Vec<C1c2Row>,
    /// `(K0, C0_fit, C0'_fit)` per fitted exponent; `C0_fit` is the largest
    /// eigenvalue ratio over usable triples, `C0'_fit` the largest
    /// `λ_max |δ2-δ1|^{K0}`.
    pub fits: Vec<(f64, f64, f64)>,
}

impl C1c2Report {
    pub fn c0_fit(&self, k0: f64) -> Option<f64> {
        self.fits.iter().find(|(k, _, _)| *k == k0).map(|(_, c0, _)| *c0)
    }

    /// Finite `C0` over all non-skipped triples.
    pub fn pass(&self) -> bool {
        self.rows.iter().filter(|r| !r.skipped).all(|r| r.ratio.is_some_and(f64::is_finite))
    }
}

/// Evaluate the eigenvalue-growth conditions on a grid of window triples
/// `δ1 <= δ <= δ2`, splitting on which sub-window is larger, and fit the
/// smallest constants for `K0 ∈ {0, 1/2, 1}`.
#[allow(clippy::too_many_arguments)]
pub fn check_c1_c2(
    schedule: &SequentialSchedule,
    phi: &VectorObservable,
    n: usize,
    triples: &[(f64, f64, f64)],
    mu: &GridDensity,
    count: usize,
    seed: u64,
    engine: &TransferEngine,
) -> Result<C1c2Report> {
    let mut breaks: Vec<usize> = vec![0, n];
    for &(a, b, c) in triples {
        if !(0.0..=1.0).contains(&a) || a > b || b > c || c > 1.0 {
            return Err(Error::domain(format!("bad window triple ({a}, {b}, {c})")));
        }
        for v in [a, b, c] {
            breaks.push(window_bounds(v, v, n).0);
        }
    }
    breaks.sort_unstable();
    breaks.dedup();
    let obs = CenteredObservables::prepare(schedule, phi, n, mu, engine)?;
    let sums = sample_segment_sums(schedule, &obs, &breaks, mu, count, seed)?;

    let window_report = |a: f64, b: f64| -> Option<CovarianceReport> {
        let (lo, hi) = window_bounds(a, b, n);
        if lo >= hi {
            return None;
        }
        let (s0, s1) = sums.segment_range(lo, hi)?;
        Some(covariance_from_sums(&sums, s0, s1, (a, b), n))
    };

    let mut rows = Vec::with_capacity(triples.len());
    for &(a, b, c) in triples {
        let Some(full) = window_report(a, c) else {
            rows.push(C1c2Row {
                d1: a,
                d: b,
                d2: c,
                lambda_max: 0.0,
                lambda_min_sub: None,
                ratio: None,
                skipped: true,
            });
            continue;
        };
        // split by which sub-window is larger
        let sub = if (c - b) >= (b - a) { window_report(b, c) } else { window_report(a, b) };
        let lam_sub = sub.as_ref().and_then(|r| {
            if r.lambda_min > 1e-8 * full.lambda_max.max(1e-300) {
                Some(r.lambda_min)
            } else {
                None
            }
        });
        let ratio = lam_sub.map(|l| full.lambda_max / l);
        rows.push(C1c2Row {
            d1: a,
            d: b,
            d2: c,
            lambda_max: full.lambda_max,
            lambda_min_sub: lam_sub,
            ratio,
            skipped: false,
        });
    }

    let fits = [0.0, 0.5, 1.0]
        .into_iter()
        .map(|k0| {
            let c0 = rows.iter().filter_map(|r| r.ratio).fold(0.0, f64::max);
            let c0p = rows
                .iter()
                .filter(|r| !r.skipped)
                .map(|r| r.lambda_max * (r.d2 - r.d1).powf(k0))
                .fold(0.0, f64::max);
            (k0, c0, c0p)
        })
        .collect();
    Ok(C1c2Report { n, rows, fits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::PiecewiseExpandingMap;
    use approx::assert_abs_diff_eq;

    const TAU: f64 = 2.0 * std::f64::consts::PI;

    fn doubling_schedule() -> SequentialSchedule {
        SequentialSchedule::constant(PiecewiseExpandingMap::affine_mod(2))
    }

    #[test]
    fn observable_bound_is_checked() {
        // ‖cos(2πx)‖_1 = 1 + 2π ≈ 7.28
        assert!(VectorObservable::new(
            vec![Arc::new(|x: f64| (TAU * x).cos()) as ScalarFn],
            1.0,
            7.0
        )
        .is_err());
        let ok = VectorObservable::trig(&[(1, false)], 1.0, 7.3);
        assert_eq!(ok.dim(), 1);
        assert!(VectorObservable::new(vec![Arc::new(|_| 0.0) as ScalarFn], 1.0, 0.5).is_err());
    }

    #[test]
    fn centering_kills_constants_and_fixes_means() {
        let engine = TransferEngine::new(1024);
        let sched = doubling_schedule();
        let mu = engine.uniform_density();
        let constant = VectorObservable::new(vec![Arc::new(|_| 3.0) as ScalarFn], 1.0, 3.0).unwrap();
        let centered = center_observable(&constant, &sched, 5, &mu, &engine).unwrap();
        assert_abs_diff_eq!((centered.component(0))(0.37), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(centered.l_bound, 6.0, epsilon = 0.0);

        // cos(2πx) is mean-zero under Lebesgue for every n (P-invariance)
        let phi = VectorObservable::trig(&[(1, false)], 1.0, 7.3);
        let centers = centering_constants(&sched, &phi, 6, &mu, &engine).unwrap();
        for c in centers {
            assert_abs_diff_eq!(c[0], 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn birkhoff_sum_windows() {
        let sched = doubling_schedule();
        let phi = VectorObservable::trig(&[(1, false)], 1.0, 7.3);
        let obs = CenteredObservables::uncentered(&phi, 16);
        // empty window
        let z = birkhoff_sum(&sched, &obs, 0.3, 0.3, 16, 0.5).unwrap();
        assert_eq!(z, vec![0.0]);
        // N = 2 on the doubling orbit of 0.1
        let s = birkhoff_sum(&sched, &obs, 0.0, 1.0, 2, 0.1).unwrap();
        assert_abs_diff_eq!(s[0], (TAU * 0.1).cos() + (TAU * 0.2).cos(), epsilon = 1e-12);
        // window additivity at the sample level
        let full = birkhoff_sum(&sched, &obs, 0.0, 1.0, 16, 0.123).unwrap();
        let a = birkhoff_sum(&sched, &obs, 0.0, 0.5, 16, 0.123).unwrap();
        let b = birkhoff_sum(&sched, &obs, 0.5, 1.0, 16, 0.123).unwrap();
        assert_abs_diff_eq!(full[0], a[0] + b[0], epsilon = 1e-12);
    }

    #[test]
    fn sample_mu_uniform_dkw() {
        let mu = GridDensity::uniform(2048);
        let m = 100_000;
        let mut xs = sample_mu(&mu, m, 123).unwrap();
        xs.sort_unstable_by(f64::total_cmp);
        let mut ks: f64 = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            let emp_hi = (i + 1) as f64 / m as f64;
            let emp_lo = i as f64 / m as f64;
            ks = ks.max((emp_hi - x).abs()).max((emp_lo - x).abs());
        }
        assert!(ks <= 1.63 / (m as f64).sqrt(), "KS = {ks}");
        assert!(sample_mu(&mu, 0, 1).is_err());
    }

    #[test]
    fn sample_mu_is_deterministic_across_modes() {
        let mu = GridDensity::from_fn(512, 1.0, |x| 1.0 + 0.5 * (TAU * x).sin()).unwrap();
        let a = sample_mu(&mu, 20_000, 9).unwrap();
        crate::exec::set_force_sequential(true);
        let b = sample_mu(&mu, 20_000, 9).unwrap();
        crate::exec::set_force_sequential(false);
        assert_eq!(a, b);
    }

    #[test]
    fn covariance_doubling_cos_is_n_over_two() {
        let engine = TransferEngine::new(2048);
        let sched = doubling_schedule();
        let mu = engine.uniform_density();
        let phi = VectorObservable::trig(&[(1, false)], 1.0, 7.3);
        let n = 64;
        let report = covariance_matrix(&sched, &phi, 0.0, 1.0, n, &mu, 60_000, 2024, &engine).unwrap();
        let expected = n as f64 / 2.0;
        let dev = (report.sigma[(0, 0)] - expected).abs();
        assert!(dev <= 3.0 * report.std_errors[(0, 0)], "Σ = {} vs {expected}", report.sigma[(0, 0)]);
        assert!(report.invertible());
    }

    #[test]
    fn covariance_matches_correlation_sum_oracle() {
        let engine = TransferEngine::new(4096);
        let sched = doubling_schedule();
        let mu = engine.uniform_density();
        let phi = VectorObservable::trig(&[(1, false)], 1.0, 7.3);
        let n = 8;
        let oracle = covariance_by_correlations(&sched, &phi, n, &mu, &engine).unwrap();
        assert_abs_diff_eq!(oracle[(0, 0)], n as f64 / 2.0, epsilon = 1e-6);
        let report = covariance_matrix(&sched, &phi, 0.0, 1.0, n, &mu, 200_000, 5, &engine).unwrap();
        let dev = (report.sigma[(0, 0)] - oracle[(0, 0)]).abs();
        assert!(dev <= 3.0 * report.std_errors[(0, 0)]);
    }

    #[test]
    fn off_diagonal_vanishes_for_orthogonal_pair() {
        let engine = TransferEngine::new(2048);
        let sched = doubling_schedule();
        let mu = engine.uniform_density();
        let phi = VectorObservable::trig(&[(1, false), (2, true)], 1.0, 14.0);
        let report = covariance_matrix(&sched, &phi, 0.0, 1.0, 32, &mu, 60_000, 77, &engine).unwrap();
        let dev = report.sigma[(0, 1)].abs();
        assert!(dev <= 3.0 * report.std_errors[(0, 1)], "off-diag {dev}");
    }

    #[test]
    fn zero_observable_gives_singular_covariance() {
        let engine = TransferEngine::new(512);
        let sched = doubling_schedule();
        let mu = engine.uniform_density();
        let phi = VectorObservable::new(vec![Arc::new(|_| 0.0) as ScalarFn], 1.0, 1.0).unwrap();
        let report = covariance_matrix(&sched, &phi, 0.0, 1.0, 8, &mu, 4_000, 3, &engine).unwrap();
        assert!(!report.invertible());
        assert_abs_diff_eq!(report.sigma[(0, 0)], 0.0, epsilon = 0.0);
    }

    #[test]
    fn inv_sqrt_diagonal_and_singular() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 9.0]));
        let inv = inv_sqrt(&m, 1e-10).unwrap();
        assert_abs_diff_eq!(inv[(0, 0)], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(inv[(1, 1)], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(inv[(0, 1)], 0.0, epsilon = 1e-12);

        let id = DMatrix::identity(3, 3);
        let inv = inv_sqrt(&id, 1e-10).unwrap();
        assert!((inv - DMatrix::identity(3, 3)).norm() < 1e-12);

        let bad = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 1e-14]));
        assert!(matches!(inv_sqrt(&bad, 1e-10), Err(Error::SingularCovariance { .. })));
    }

    #[test]
    fn normalized_cloud_has_identity_covariance() {
        let engine = TransferEngine::new(2048);
        let sched = doubling_schedule();
        let mu = engine.uniform_density();
        let phi = VectorObservable::trig(&[(1, false), (2, true)], 1.0, 14.0);
        let (report, sums) =
            covariance_with_samples(&sched, &phi, 0.0, 1.0, 32, &mu, 40_000, 8, &engine).unwrap();
        let w = normalize_cloud(&report, &sums).unwrap();
        let m = w.count() as f64;
        for r in 0..2 {
            for c in 0..2 {
                let mean: f64 = (0..w.count()).map(|s| w.row(s)[r] * w.row(s)[c]).sum::<f64>() / m;
                let target = if r == c { 1.0 } else { 0.0 };
                // empirical second moment of W against its own normalizer is
                // the identity up to inverse-root floating error
                assert_abs_diff_eq!(mean, target, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn scaling_equivariance() {
        let engine = TransferEngine::new(1024);
        let sched = doubling_schedule();
        let mu = engine.uniform_density();
        let phi1 = VectorObservable::trig(&[(1, false)], 1.0, 7.3);
        let phi2 = VectorObservable::new(
            vec![Arc::new(|x: f64| 2.0 * (TAU * x).cos()) as ScalarFn],
            1.0,
            14.6,
        )
        .unwrap();
        let (r1, s1) =
            covariance_with_samples(&sched, &phi1, 0.0, 1.0, 16, &mu, 10_000, 4, &engine).unwrap();
        let (r2, s2) =
            covariance_with_samples(&sched, &phi2, 0.0, 1.0, 16, &mu, 10_000, 4, &engine).unwrap();
        for s in (0..s1.count()).step_by(997) {
            assert_abs_diff_eq!(2.0 * s1.row(s)[0], s2.row(s)[0], epsilon = 1e-12);
        }
        let w1 = normalize_cloud(&r1, &s1).unwrap();
        let w2 = normalize_cloud(&r2, &s2).unwrap();
        for s in (0..w1.count()).step_by(997) {
            assert_abs_diff_eq!(w1.row(s)[0], w2.row(s)[0], epsilon = 1e-8);
        }
    }

    #[test]
    fn c1c2_on_doubling_is_bounded_by_window_ratio() {
        let engine = TransferEngine::new(1024);
        let sched = doubling_schedule();
        let mu = engine.uniform_density();
        let phi = VectorObservable::trig(&[(1, false)], 1.0, 7.3);
        let triples = vec![(0.0, 0.5, 1.0), (0.0, 0.25, 0.5), (0.25, 0.5, 1.0), (0.2, 0.2, 0.2)];
        let report = check_c1_c2(&sched, &phi, 64, &triples, &mu, 40_000, 21, &engine).unwrap();
        assert!(report.rows[3].skipped);
        assert!(report.pass());
        // variance is linear in window length, so the ratio stays near
        // (d2 - d1)/(larger sub-window), at most about 2 on this grid
        let c0 = report.c0_fit(1.0).unwrap();
        assert!(c0 < 2.5, "C0 = {c0}");
        assert!(c0 > 1.0);
    }

    #[test]
    fn c1c2_degenerate_subwindow_is_reported() {
        let engine = TransferEngine::new(512);
        let sched = doubling_schedule();
        let mu = engine.uniform_density();
        let phi = VectorObservable::trig(&[(1, false)], 1.0, 7.3);
        // a one-term window whose sub-windows round to empty integer
        // ranges: the triple cannot be covered by a finite C0
        let triples = vec![(0.0, 0.008, 0.016)];
        let report = check_c1_c2(&sched, &phi, 32, &triples, &mu, 5_000, 2, &engine).unwrap();
        assert!(!report.rows[0].skipped);
        assert!(report.rows[0].ratio.is_none());
        assert!(!report.pass());
    }
}
