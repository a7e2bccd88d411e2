//! Grid-based transfer operators and their composition, Hölder/log-Hölder
//! seminorms, explicit coupling constants, memory-loss decay curves,
//! conditional densities on cylinders, and correlation functions.
//!
//! Functions and densities live on a uniform grid with `g` cells (`g + 1`
//! nodes) over `[0,1]` and are interpolated linearly between nodes. One
//! transfer application is exact per node: `(Pf)(y) = Σ_b f(x_b) / |T'(x_b)|`
//! over the inverse branches `x_b` of `y`, with `f` read off the grid. The
//! per-map inverse-branch tables are cached, so iterating a composition costs
//! `O(g · branches)` per step.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::exec;
use crate::maps::{cylinder_partition, CylinderSet, PiecewiseExpandingMap, SequentialSchedule};
use crate::numerics::{self, pairwise_sum};

/// Default number of grid cells.
pub const DEFAULT_GRID: usize = 4096;

/// Maximum composition depth accepted by the orbit-quadrature route.
pub const ORBIT_DEPTH_CAP: usize = 16;

/// Gauss–Legendre nodes per cylinder in the orbit quadrature.
const ORBIT_GL: usize = 32;

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Real values on the uniform grid, with the Hölder exponent they are
/// measured against.
#[derive(Debug, Clone)]
pub struct GridFunction {
    values: Vec<f64>,
    pub alpha: f64,
}

impl GridFunction {
    pub fn new(values: Vec<f64>, alpha: f64) -> Self {
        assert!(values.len() >= 2, "grid needs at least one cell");
        assert!((0.0..=1.0).contains(&alpha) && alpha > 0.0, "alpha in (0,1]");
        GridFunction { values, alpha }
    }

    /// Sample a callable exactly at the nodes of a `cells`-cell grid.
    pub fn from_fn(cells: usize, alpha: f64, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..=cells).map(|i| f(i as f64 / cells as f64)).collect();
        GridFunction::new(values, alpha)
    }

    pub fn zero(cells: usize, alpha: f64) -> Self {
        GridFunction::new(vec![0.0; cells + 1], alpha)
    }

    pub fn cells(&self) -> usize {
        self.values.len() - 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn node(&self, i: usize) -> f64 {
        i as f64 / self.cells() as f64
    }

    /// Linear interpolation at `x ∈ [0,1]`.
    pub fn interp(&self, x: f64) -> f64 {
        let g = self.cells() as f64;
        let t = (x * g).clamp(0.0, g);
        let i = (t as usize).min(self.cells() - 1);
        let frac = t - i as f64;
        self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
    }

    pub fn integral(&self) -> f64 {
        numerics::trapezoid(&self.values)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().fold(f64::INFINITY, |m, &v| m.min(v))
    }

    /// Lower estimate of the Hölder seminorm from adjacent and
    /// geometric-stride node pairs (`O(g log g)` pairs).
    pub fn holder_seminorm(&self) -> f64 {
        strided_seminorm(&self.values, self.alpha, |v| v)
    }

    /// `‖·‖_α = ‖·‖_∞ + |·|_α`, both estimated on the grid.
    pub fn alpha_norm(&self) -> f64 {
        self.sup_norm() + self.holder_seminorm()
    }

    pub fn map_values(&self, f: impl Fn(usize, f64) -> f64) -> GridFunction {
        let values = self.values.iter().enumerate().map(|(i, &v)| f(i, v)).collect();
        GridFunction::new(values, self.alpha)
    }

    pub fn sub(&self, other: &GridFunction) -> GridFunction {
        assert_eq!(self.cells(), other.cells());
        self.map_values(|i, v| v - other.values[i])
    }

    pub fn scale(&self, s: f64) -> GridFunction {
        self.map_values(|_, v| s * v)
    }
}

fn strided_seminorm(values: &[f64], alpha: f64, transform: impl Fn(f64) -> f64) -> f64 {
    let g = values.len() - 1;
    let h = 1.0 / g as f64;
    let mut best: f64 = 0.0;
    let mut stride = 1;
    while stride <= g {
        let dist = (stride as f64 * h).powf(alpha);
        for i in 0..=(g - stride) {
            let d = (transform(values[i + stride]) - transform(values[i])).abs() / dist;
            if d > best {
                best = d;
            }
        }
        stride *= 2;
    }
    best
}

/// A probability density on the grid: nonnegative nodal values with unit
/// trapezoid integral.
#[derive(Debug, Clone)]
pub struct GridDensity {
    f: GridFunction,
    /// Log-Hölder seminorm estimate recorded at construction (`None` for
    /// densities with zero values).
    pub seminorm_cache: Option<f64>,
}

impl GridDensity {
    /// Normalize nonnegative nodal values into a density.
    pub fn new(values: Vec<f64>, alpha: f64) -> Result<Self> {
        if values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::domain("density values must be finite and nonnegative"));
        }
        let mut f = GridFunction::new(values, alpha);
        let z = f.integral();
        if z <= 1e-300 {
            return Err(Error::domain("density integrates to zero"));
        }
        f = f.scale(1.0 / z);
        let cache = if f.min_value() > 0.0 { Some(strided_seminorm(f.values(), alpha, f64::ln)) } else { None };
        Ok(GridDensity { f, seminorm_cache: cache })
    }

    pub fn from_fn(cells: usize, alpha: f64, f: impl Fn(f64) -> f64) -> Result<Self> {
        GridDensity::new((0..=cells).map(|i| f(i as f64 / cells as f64)).collect(), alpha)
    }

    pub fn uniform(cells: usize) -> Self {
        GridDensity::new(vec![1.0; cells + 1], 1.0).expect("uniform density")
    }

    pub fn as_fn(&self) -> &GridFunction {
        &self.f
    }

    pub fn cells(&self) -> usize {
        self.f.cells()
    }

    pub fn interp(&self, x: f64) -> f64 {
        self.f.interp(x)
    }

    /// `|log ρ|_α` estimated on node pairs; requires strict positivity.
    pub fn log_holder_seminorm(&self) -> Result<f64> {
        log_holder_seminorm(&self.f)
    }

    /// Measure of an interval under the piecewise-linear interpolant.
    pub fn measure_interval(&self, lo: f64, hi: f64) -> f64 {
        let g = self.f.cells() as f64;
        let (lo, hi) = (lo.clamp(0.0, 1.0), hi.clamp(0.0, 1.0));
        if hi <= lo {
            return 0.0;
        }
        // integrate the interpolant cell by cell
        let first = (lo * g).floor() as usize;
        let last = ((hi * g).ceil() as usize).min(self.f.cells());
        let mut total = 0.0;
        for cell in first..last {
            let a = (cell as f64 / g).max(lo);
            let b = ((cell + 1) as f64 / g).min(hi);
            if b > a {
                let fa = self.f.interp(a);
                let fb = self.f.interp(b);
                total += 0.5 * (fa + fb) * (b - a);
            }
        }
        total
    }
}

/// `|log f|_α` for a strictly positive grid function.
pub fn log_holder_seminorm(f: &GridFunction) -> Result<f64> {
    if f.min_value() <= 0.0 {
        return Err(Error::domain(format!(
            "log-Hölder seminorm needs strictly positive values, min = {:.3e}",
            f.min_value()
        )));
    }
    Ok(strided_seminorm(f.values(), f.alpha, f64::ln))
}

/// Coupling constants of the explicit memory-loss argument:
/// `R = 2K / (1 - Λ^{-α})`, `ξ = e^{-R} (1 - Λ^{-α}) / 2`,
/// `p̃ = (⌈log K' / log Λ⌉ + 1) p`, `q = 1 - ξ`, and
/// `C_# = 4 e^R (1 + R) / q`, giving the certificate
/// `‖P_{i,n+i-1} u‖_α ≤ C_# q^{n/p̃} |u|_α` for mean-zero `u`.
#[derive(Debug, Clone, Copy)]
pub struct CouplingConstants {
    pub r: f64,
    pub xi: f64,
    pub p_tilde: usize,
    /// `1 - ξ`; may round to `1.0` in `f64` when `ξ` underflows, so
    /// invariants are validated through `ξ` itself.
    pub q: f64,
    pub c_sharp: f64,
}

/// Assemble [`CouplingConstants`] from the system data `(K, Λ, α, K', p)`.
pub fn coupling_bound(k: f64, lambda: f64, alpha: f64, kprime: f64, p: usize) -> Result<CouplingConstants> {
    if lambda <= 1.0 {
        return Err(Error::domain(format!("coupling bound needs Lambda > 1, got {lambda}")));
    }
    if k < 0.0 || kprime < 1.0 || p < 1 || !(0.0..=1.0).contains(&alpha) || alpha <= 0.0 {
        return Err(Error::domain("coupling bound needs K >= 0, K' >= 1, p >= 1, alpha in (0,1]"));
    }
    let gap = 1.0 - lambda.powf(-alpha);
    let r = 2.0 * k / gap;
    let xi = (-r).exp() * gap / 2.0;
    let p_tilde = ((kprime.ln() / lambda.ln()).ceil().max(0.0) as usize + 1) * p;
    let q = 1.0 - xi;
    // R (1 - ξ e^R) >= K + Λ^{-α} R holds with equality for these choices
    debug_assert!(r * (1.0 - xi * r.exp()) >= k + lambda.powf(-alpha) * r - 1e-9);
    if !(xi > 0.0 && xi < 1.0) {
        return Err(Error::Numeric(format!("coupling xi = {xi:.3e} escaped (0,1)")));
    }
    let c_sharp = 4.0 * r.exp() * (1.0 + r) / q;
    Ok(CouplingConstants { r, xi, p_tilde, q, c_sharp })
}

/// Inverse-branch data at every grid node for one map.
struct InverseTable {
    /// `(x, 1/|T'(x)|)` for node-major, branch-minor layout.
    entries: Vec<(f64, f64)>,
    branches: usize,
}

impl InverseTable {
    fn build(map: &PiecewiseExpandingMap, cells: usize) -> Result<Self> {
        let branches = map.branch_count();
        let mut entries = Vec::with_capacity((cells + 1) * branches);
        for i in 0..=cells {
            let y = i as f64 / cells as f64;
            for b in 0..branches {
                let x = map.invert_on_branch(b, y)?;
                let w = 1.0 / map.derivative(x.min(1.0 - 1e-15)).abs();
                entries.push((x, w));
            }
        }
        Ok(InverseTable { entries, branches })
    }
}

/// Grid resolution plus cached per-map inverse tables.
pub struct TransferEngine {
    cells: usize,
    tables: Mutex<BTreeMap<String, Arc<InverseTable>>>,
}

impl TransferEngine {
    pub fn new(cells: usize) -> Self {
        TransferEngine { cells, tables: Mutex::new(BTreeMap::new()) }
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn uniform_density(&self) -> GridDensity {
        GridDensity::uniform(self.cells)
    }

    fn table(&self, map: &PiecewiseExpandingMap) -> Result<Arc<InverseTable>> {
        let mut guard = self.tables.lock().expect("table lock");
        if let Some(t) = guard.get(map.label()) {
            return Ok(t.clone());
        }
        let t = Arc::new(InverseTable::build(map, self.cells)?);
        guard.insert(map.label().to_string(), t.clone());
        Ok(t)
    }

    /// One transfer application of a grid function (`f` interpolated at the
    /// preimages).
    pub fn apply(&self, map: &PiecewiseExpandingMap, f: &GridFunction) -> Result<GridFunction> {
        assert_eq!(f.cells(), self.cells, "grid mismatch");
        let table = self.table(map)?;
        let b = table.branches;
        let values: Vec<f64> = (0..=self.cells)
            .map(|i| {
                let row = &table.entries[i * b..(i + 1) * b];
                let mut acc = 0.0;
                for (x, w) in row {
                    acc += f.interp(*x) * w;
                }
                acc
            })
            .collect();
        Ok(GridFunction::new(values, f.alpha))
    }

    /// One transfer application with `f` evaluated exactly at the preimages.
    pub fn apply_exact(&self, map: &PiecewiseExpandingMap, alpha: f64, f: impl Fn(f64) -> f64) -> Result<GridFunction> {
        let table = self.table(map)?;
        let b = table.branches;
        let values: Vec<f64> = (0..=self.cells)
            .map(|i| {
                let row = &table.entries[i * b..(i + 1) * b];
                let mut acc = 0.0;
                for (x, w) in row {
                    acc += f(*x) * w;
                }
                acc
            })
            .collect();
        Ok(GridFunction::new(values, alpha))
    }

    /// `P_k ... P_j f`; the identity when `k < j`.
    pub fn compose(&self, schedule: &SequentialSchedule, j: usize, k: usize, f: &GridFunction) -> Result<GridFunction> {
        let mut cur = f.clone();
        for n in j..=k {
            cur = self.apply(schedule.map_at(n)?, &cur)?;
        }
        Ok(cur)
    }

    /// Visit `P_n ... P_1 f` for `n = 0..=n_max` in order.
    pub fn iterate(
        &self,
        schedule: &SequentialSchedule,
        f: &GridFunction,
        n_max: usize,
        mut visit: impl FnMut(usize, &GridFunction),
    ) -> Result<()> {
        let mut cur = f.clone();
        visit(0, &cur);
        for n in 1..=n_max {
            cur = self.apply(schedule.map_at(n)?, &cur)?;
            visit(n, &cur);
        }
        Ok(())
    }
}

/// `|∫ (Pf)·g dλ − ∫ f·(g∘T) dλ|` with `f`, `g` evaluated exactly; the
/// duality defect of the discretized operator.
pub fn duality_defect(
    engine: &TransferEngine,
    map: &PiecewiseExpandingMap,
    f: impl Fn(f64) -> f64,
    g: impl Fn(f64) -> f64,
) -> Result<f64> {
    let pf = engine.apply_exact(map, 1.0, &f)?;
    let cells = engine.cells();
    let lhs_vals: Vec<f64> = (0..=cells)
        .map(|i| {
            let y = i as f64 / cells as f64;
            pf.values()[i] * g(y)
        })
        .collect();
    let rhs_vals: Vec<f64> = (0..=cells)
        .map(|i| {
            let x = i as f64 / cells as f64;
            f(x) * g(map.eval(x))
        })
        .collect();
    Ok((numerics::trapezoid(&lhs_vals) - numerics::trapezoid(&rhs_vals)).abs())
}

/// Decay curve of `‖P_n ... P_1 u‖_α` with its log-linear fit.
#[derive(Debug, Clone)]
pub struct DecayCurve {
    /// `‖P_n u‖_α` for `n = 0..=n_max`.
    pub norms: Vec<f64>,
    /// Fitted per-step rate `exp(slope)`.
    pub q_emp: f64,
    pub r_squared: f64,
    pub fitted_points: usize,
}

/// Iterate a mean-zero function through the schedule and fit the exponential
/// decay rate of its `α`-norm.
pub fn memory_loss_decay(
    schedule: &SequentialSchedule,
    u: &GridFunction,
    n_max: usize,
    engine: &TransferEngine,
) -> Result<DecayCurve> {
    let mass = u.integral();
    if mass.abs() > 1e-8 {
        return Err(Error::domain(format!(
            "memory loss needs a mean-zero function, integral = {mass:.3e}"
        )));
    }
    // each application injects O(g^-2) relative interpolation error; its
    // oscillatory part decays with the iterate, but any mass component is
    // preserved by P forever and would floor the curve, so the iterate is
    // re-projected onto the mean-zero subspace after every step
    let mut norms = Vec::with_capacity(n_max + 1);
    let mut cur = u.clone();
    norms.push(cur.alpha_norm());
    for n in 1..=n_max {
        cur = engine.apply(schedule.map_at(n)?, &cur)?;
        let drift = cur.integral();
        cur = cur.map_values(|_, v| v - drift);
        norms.push(cur.alpha_norm());
    }
    let floor = norms[0].max(1e-300) * 1e-14;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (n, &v) in norms.iter().enumerate() {
        if v > floor {
            xs.push(n as f64);
            ys.push(v.ln());
        }
    }
    let (q_emp, r_squared, fitted_points) = match numerics::fit_line(&xs, &ys) {
        Ok(fit) => (fit.slope.exp(), fit.r_squared, fit.points),
        Err(_) => (0.0, 1.0, xs.len()),
    };
    Ok(DecayCurve { norms, q_emp, r_squared, fitted_points })
}

/// `ψ_a = μ(a)^{-1} ψ 1_a`: the density conditioned on a cylinder.
pub fn conditioned_density(mu: &GridDensity, a: &CylinderSet) -> Result<GridDensity> {
    let mass = mu.measure_interval(a.lo, a.hi);
    if mass <= 1e-12 {
        return Err(Error::domain(format!(
            "degenerate cylinder [{:.6}, {:.6}]: mu(a) = {mass:.3e}",
            a.lo, a.hi
        )));
    }
    let g = mu.cells() as f64;
    let values: Vec<f64> = mu
        .as_fn()
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let x = i as f64 / g;
            if x >= a.lo && x <= a.hi {
                v / mass
            } else {
                0.0
            }
        })
        .collect();
    GridDensity::new(values, mu.as_fn().alpha)
}

/// A correlation value computed along both routes.
#[derive(Debug, Clone, Copy)]
pub struct Correlation {
    /// Orbit quadrature over the cylinder partition.
    pub orbit: f64,
    /// Transfer-operator identity on the grid.
    pub transfer: f64,
}

impl Correlation {
    pub fn disagreement(&self) -> f64 {
        (self.orbit - self.transfer).abs()
    }
}

/// Integrate `integrand(orbit)` against `ρ dλ` by Gauss–Legendre panels on
/// the cylinders of the depth-`depth` composition; `orbit[i] = T_i ... T_1 x`
/// (`orbit[0] = x`).
fn orbit_quadrature(
    schedule: &SequentialSchedule,
    depth: usize,
    rho: &GridDensity,
    integrand: impl Fn(&[f64]) -> f64 + Sync + Send,
) -> Result<f64> {
    if depth > ORBIT_DEPTH_CAP {
        return Err(Error::Resource(format!(
            "orbit quadrature refused: depth {depth} exceeds piecewise-smoothness cap {ORBIT_DEPTH_CAP} \
             (the integrand has branches^depth pieces)"
        )));
    }
    let intervals: Vec<(f64, f64)> = if depth == 0 {
        vec![(0.0, 1.0)]
    } else {
        cylinder_partition(schedule, 1, depth, crate::maps::CYLINDER_CAP)?
            .into_iter()
            .map(|c| (c.lo, c.hi))
            .collect()
    };
    let rule = numerics::gauss_legendre(ORBIT_GL);
    let steps = schedule.steps_between(1, depth)?;
    let parts = exec::map_indexed(intervals.len(), |ci| {
        let (lo, hi) = intervals[ci];
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (lo + hi);
        let mut buf = vec![0.0; depth + 1];
        let mut acc = 0.0;
        for (t, w) in &rule {
            let x = mid + half * t;
            buf[0] = x;
            for (i, m) in steps.iter().enumerate() {
                buf[i + 1] = m.eval(buf[i]);
            }
            acc += w * half * rho.interp(x) * integrand(&buf);
        }
        acc
    });
    Ok(pairwise_sum(&parts))
}

/// Second-order correlation `μ(ψ̄_1^n ψ̄_2^{n+m})` of the centered
/// observables `ψ̄_i^k = ψ_i ∘ T_k - μ(ψ_i ∘ T_k)`, via both routes.
pub fn correlation2(
    schedule: &SequentialSchedule,
    psi1: &ScalarFn,
    psi2: &ScalarFn,
    n: usize,
    m: usize,
    mu: &GridDensity,
    engine: &TransferEngine,
) -> Result<Correlation> {
    // (i) orbit quadrature: raw moments on the depth-(n+m) cylinders
    let depth = n + m;
    let e12 = orbit_quadrature(schedule, depth, mu, |orbit| psi1(orbit[n]) * psi2(orbit[n + m]))?;
    let e1 = orbit_quadrature(schedule, depth, mu, |orbit| psi1(orbit[n]))?;
    let e2 = orbit_quadrature(schedule, depth, mu, |orbit| psi2(orbit[n + m]))?;
    let orbit = e12 - e1 * e2;

    // (ii) transfer identity:
    // μ(ψ̄₁ⁿψ̄₂^{n+m}) = λ{ ψ₂ · P_{n+1..n+m}[ ψ₁ P_n ρ − μ(ψ₁∘T_n) P_n ρ ] }
    let rho_n = engine.compose(schedule, 1, n, mu.as_fn())?;
    let cells = engine.cells();
    let psi1_grid: Vec<f64> = (0..=cells).map(|i| psi1(i as f64 / cells as f64)).collect();
    let c1 = numerics::trapezoid(
        &rho_n.values().iter().zip(&psi1_grid).map(|(r, p)| r * p).collect::<Vec<_>>(),
    );
    let v = rho_n.map_values(|i, r| (psi1_grid[i] - c1) * r);
    let v_m = engine.compose(schedule, n + 1, n + m, &v)?;
    let transfer = numerics::trapezoid(
        &v_m
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * psi2(i as f64 / cells as f64))
            .collect::<Vec<_>>(),
    );
    Ok(Correlation { orbit, transfer })
}

/// Third-order correlation `μ(ψ̄_1^n ψ̄_2^{n+m} ψ̄_3^{n+m+k})` via both routes.
#[allow(clippy::too_many_arguments)]
pub fn correlation3(
    schedule: &SequentialSchedule,
    psi1: &ScalarFn,
    psi2: &ScalarFn,
    psi3: &ScalarFn,
    n: usize,
    m: usize,
    k: usize,
    mu: &GridDensity,
    engine: &TransferEngine,
) -> Result<Correlation> {
    let depth = n + m + k;
    let e123 = orbit_quadrature(schedule, depth, mu, |o| psi1(o[n]) * psi2(o[n + m]) * psi3(o[n + m + k]))?;
    let e12 = orbit_quadrature(schedule, depth, mu, |o| psi1(o[n]) * psi2(o[n + m]))?;
    let e13 = orbit_quadrature(schedule, depth, mu, |o| psi1(o[n]) * psi3(o[n + m + k]))?;
    let e23 = orbit_quadrature(schedule, depth, mu, |o| psi2(o[n + m]) * psi3(o[n + m + k]))?;
    let e1 = orbit_quadrature(schedule, depth, mu, |o| psi1(o[n]))?;
    let e2 = orbit_quadrature(schedule, depth, mu, |o| psi2(o[n + m]))?;
    let e3 = orbit_quadrature(schedule, depth, mu, |o| psi3(o[n + m + k]))?;
    let orbit = e123 - e12 * e3 - e13 * e2 - e23 * e1 + 2.0 * e1 * e2 * e3;

    // transfer route: the same moment algebra with each raw moment computed
    // through composed pullbacks
    let cells = engine.cells();
    let node_fn = |f: &ScalarFn| -> Vec<f64> { (0..=cells).map(|i| f(i as f64 / cells as f64)).collect() };
    let (g1, g2, g3) = (node_fn(psi1), node_fn(psi2), node_fn(psi3));
    let weight = |v: &GridFunction, g: &[f64]| -> f64 {
        numerics::trapezoid(&v.values().iter().zip(g).map(|(a, b)| a * b).collect::<Vec<_>>())
    };
    let rho_n = engine.compose(schedule, 1, n, mu.as_fn())?;
    let t1 = weight(&rho_n, &g1);
    let p1 = rho_n.map_values(|i, r| g1[i] * r);
    let p1m = engine.compose(schedule, n + 1, n + m, &p1)?;
    let t12 = weight(&p1m, &g2);
    let p12 = p1m.map_values(|i, r| g2[i] * r);
    let p12k = engine.compose(schedule, n + m + 1, n + m + k, &p12)?;
    let t123 = weight(&p12k, &g3);
    let p1mk = engine.compose(schedule, n + 1, n + m + k, &p1)?;
    let t13 = weight(&p1mk, &g3);
    let rho_nm = engine.compose(schedule, n + 1, n + m, &rho_n)?;
    let t2 = weight(&rho_nm, &g2);
    let p2 = rho_nm.map_values(|i, r| g2[i] * r);
    let p2k = engine.compose(schedule, n + m + 1, n + m + k, &p2)?;
    let t23 = weight(&p2k, &g3);
    let rho_nmk = engine.compose(schedule, n + m + 1, n + m + k, &rho_nm)?;
    let t3 = weight(&rho_nmk, &g3);
    let transfer = t123 - t12 * t3 - t13 * t2 - t23 * t1 + 2.0 * t1 * t2 * t3;
    Ok(Correlation { orbit, transfer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::{PiecewiseExpandingMap, SequentialSchedule};
    use approx::assert_abs_diff_eq;

    const TAU: f64 = 2.0 * std::f64::consts::PI;

    fn doubling_schedule() -> SequentialSchedule {
        SequentialSchedule::constant(PiecewiseExpandingMap::affine_mod(2))
    }

    #[test]
    fn transfer_preserves_constants_under_doubling() {
        let engine = TransferEngine::new(1024);
        let map = PiecewiseExpandingMap::affine_mod(2);
        let one = GridFunction::from_fn(1024, 1.0, |_| 1.0);
        let out = engine.apply(&map, &one).unwrap();
        for v in out.values() {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn transfer_of_identity_under_tripling() {
        // P x = (y + 1) / 3
        let engine = TransferEngine::new(1024);
        let map = PiecewiseExpandingMap::affine_mod(3);
        let f = GridFunction::from_fn(1024, 1.0, |x| x);
        let out = engine.apply(&map, &f).unwrap();
        for (i, v) in out.values().iter().enumerate() {
            let y = i as f64 / 1024.0;
            assert_abs_diff_eq!(*v, (y + 1.0) / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn doubling_annihilates_first_mode() {
        let engine = TransferEngine::new(1024);
        let map = PiecewiseExpandingMap::affine_mod(2);
        let f = GridFunction::from_fn(1024, 1.0, |x| (TAU * x).cos());
        let out = engine.apply(&map, &f).unwrap();
        assert!(out.sup_norm() < 1e-14, "sup = {}", out.sup_norm());
    }

    #[test]
    fn empty_composition_is_identity() {
        let engine = TransferEngine::new(256);
        let sched = doubling_schedule();
        let f = GridFunction::from_fn(256, 1.0, |x| x * x);
        let out = engine.compose(&sched, 3, 2, &f).unwrap();
        assert_eq!(out.values(), f.values());
    }

    #[test]
    fn mass_conservation_and_positivity() {
        let engine = TransferEngine::new(4096);
        let sched = SequentialSchedule::constant(PiecewiseExpandingMap::perturbed_doubling(0.1).unwrap());
        let rho = GridDensity::from_fn(4096, 1.0, |x| (0.8 * (TAU * x).cos()).exp()).unwrap();
        let mut f = rho.as_fn().clone();
        for n in 1..=5 {
            f = engine.compose(&sched, n, n, &f).unwrap();
            assert!(f.min_value() > 0.0);
            assert_abs_diff_eq!(f.integral(), 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn log_seminorm_of_exp_cos_density() {
        // |log rho|_1 = sup |d/dx cos(2 pi x)| = 2 pi
        let rho = GridDensity::from_fn(4096, 1.0, |x| (TAU * x).cos().exp()).unwrap();
        let s = rho.log_holder_seminorm().unwrap();
        assert!((s - TAU).abs() / TAU < 0.02, "estimate {s} vs {TAU}");
        // and it is a lower estimate
        assert!(s <= TAU + 1e-9);

        let uniform = GridDensity::uniform(256);
        assert_abs_diff_eq!(uniform.log_holder_seminorm().unwrap(), 0.0, epsilon = 0.0);
    }

    #[test]
    fn log_seminorm_rejects_zero_values() {
        let mut vals = vec![1.0; 257];
        vals[40] = 0.0;
        let f = GridFunction::new(vals, 1.0);
        assert!(log_holder_seminorm(&f).is_err());
    }

    #[test]
    fn coupling_constants_doubling() {
        // K = 0, Lambda = 2, alpha = 1, K' = 1, p = 1
        let c = coupling_bound(0.0, 2.0, 1.0, 1.0, 1).unwrap();
        assert_abs_diff_eq!(c.r, 0.0, epsilon = 0.0);
        assert_abs_diff_eq!(c.xi, 0.25, epsilon = 1e-15);
        assert_eq!(c.p_tilde, 1);
        assert_abs_diff_eq!(c.q, 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(c.c_sharp, 16.0 / 3.0, epsilon = 1e-12);

        let c = coupling_bound(0.5, 2.0, 1.0, 1.0, 1).unwrap();
        assert_abs_diff_eq!(c.r, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.xi, (-2.0_f64).exp() / 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.q, 1.0 - (-2.0_f64).exp() / 4.0, epsilon = 1e-15);

        assert!(coupling_bound(0.0, 1.0, 1.0, 1.0, 1).is_err());
    }

    #[test]
    fn two_step_annihilation_of_second_mode() {
        let engine = TransferEngine::new(4096);
        let sched = doubling_schedule();
        let u = GridFunction::from_fn(4096, 1.0, |x| 0.3 * (2.0 * TAU * x).cos());
        let curve = memory_loss_decay(&sched, &u, 4, &engine).unwrap();
        assert!(curve.norms[2] <= 1e-8, "n=2 norm = {:.3e}", curve.norms[2]);
        assert!(curve.norms[3] <= 1e-8);
    }

    #[test]
    fn zero_function_decay_curve() {
        let engine = TransferEngine::new(256);
        let sched = doubling_schedule();
        let u = GridFunction::zero(256, 1.0);
        let curve = memory_loss_decay(&sched, &u, 3, &engine).unwrap();
        assert!(curve.norms.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decay_requires_mean_zero() {
        let engine = TransferEngine::new(256);
        let sched = doubling_schedule();
        let u = GridFunction::from_fn(256, 1.0, |_| 1.0);
        assert!(memory_loss_decay(&sched, &u, 3, &engine).is_err());
    }

    #[test]
    fn conditioned_density_on_half_interval() {
        let mu = GridDensity::uniform(1024);
        let a = CylinderSet { lo: 0.0, hi: 0.5, depth: 1, start: 1, word: vec![0] };
        let cond = conditioned_density(&mu, &a).unwrap();
        // one boundary cell smears under linear interpolation, so the
        // interior plateau is 2 up to O(1/G)
        assert_abs_diff_eq!(cond.interp(0.25), 2.0, epsilon = 3.0 / 1024.0);
        assert_abs_diff_eq!(cond.interp(0.75), 0.0, epsilon = 0.0);
        assert_abs_diff_eq!(cond.as_fn().integral(), 1.0, epsilon = 1e-12);

        let full = CylinderSet { lo: 0.0, hi: 1.0, depth: 0, start: 1, word: vec![] };
        let same = conditioned_density(&mu, &full).unwrap();
        assert_eq!(same.as_fn().values(), mu.as_fn().values());

        let degenerate = CylinderSet { lo: 0.3, hi: 0.3, depth: 1, start: 1, word: vec![0] };
        assert!(conditioned_density(&mu, &degenerate).is_err());
    }

    #[test]
    fn correlation_oracles_under_doubling() {
        let engine = TransferEngine::new(4096);
        let sched = doubling_schedule();
        let mu = engine.uniform_density();
        let cos1: ScalarFn = Arc::new(|x| (TAU * x).cos());

        // m = 0: integral of cos^2 = 1/2
        let c0 = correlation2(&sched, &cos1, &cos1, 0, 0, &mu, &engine).unwrap();
        assert_abs_diff_eq!(c0.orbit, 0.5, epsilon = 1e-8);
        assert_abs_diff_eq!(c0.transfer, 0.5, epsilon = 1e-8);

        // Fourier orthogonality: zero for every m >= 1
        for m in 1..=4 {
            let c = correlation2(&sched, &cos1, &cos1, 0, m, &mu, &engine).unwrap();
            assert!(c.orbit.abs() < 1e-8, "orbit corr at m={m}: {}", c.orbit);
            assert!(c.transfer.abs() < 1e-8);
        }

        // constants are killed by centering
        let one: ScalarFn = Arc::new(|_| 1.0);
        let c = correlation2(&sched, &one, &cos1, 1, 2, &mu, &engine).unwrap();
        assert!(c.orbit.abs() < 1e-12 && c.transfer.abs() < 1e-12);
    }

    #[test]
    fn correlation_routes_agree_on_perturbed_schedule() {
        let engine = TransferEngine::new(4096);
        let lambda = 2.0 - 0.2 * std::f64::consts::PI;
        let sched = SequentialSchedule::cyclic(
            vec![
                PiecewiseExpandingMap::perturbed_doubling(0.05).unwrap(),
                PiecewiseExpandingMap::perturbed_doubling(0.1).unwrap(),
                PiecewiseExpandingMap::affine_mod(2),
            ],
            1,
            lambda,
            1.0,
        );
        let mu = engine.uniform_density();
        let cos1: ScalarFn = Arc::new(|x| (TAU * x).cos());
        let sin2: ScalarFn = Arc::new(|x| (2.0 * TAU * x).sin());
        for (n, m) in [(0, 1), (1, 2), (2, 3)] {
            let c = correlation2(&sched, &cos1, &sin2, n, m, &mu, &engine).unwrap();
            assert!(c.disagreement() < 1e-5, "(n,m)=({n},{m}): {:?}", c);
        }
        let c3 = correlation3(&sched, &cos1, &sin2, &cos1, 1, 2, 1, &mu, &engine).unwrap();
        assert!(c3.disagreement() < 1e-5, "corr3: {:?}", c3);
    }

    #[test]
    fn orbit_quadrature_depth_cap() {
        let engine = TransferEngine::new(256);
        let sched = doubling_schedule();
        let mu = engine.uniform_density();
        let cos1: ScalarFn = Arc::new(|x| (TAU * x).cos());
        let err = correlation2(&sched, &cos1, &cos1, 0, ORBIT_DEPTH_CAP + 1, &mu, &engine).unwrap_err();
        assert!(matches!(err, Error::Resource(_)));
    }

    #[test]
    fn duality_defect_small_for_trig_polynomials() {
        let engine = TransferEngine::new(8192);
        for map in [
            PiecewiseExpandingMap::affine_mod(2),
            PiecewiseExpandingMap::perturbed_doubling(0.1).unwrap(),
        ] {
            let d = duality_defect(&engine, &map, |x| (3.0 * TAU * x).cos(), |x| (2.0 * TAU * x).sin()).unwrap();
            assert!(d < 1e-8, "defect {d:.3e} for {}", map.label());
        }
    }
}
