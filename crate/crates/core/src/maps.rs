//! Full-branch piecewise expanding maps of the unit interval, sequential
//! compositions, cylinder partitions, and uniform-expansion certificates.
//!
//! The phase space is `M = [0,1]` with the Euclidean metric and Lebesgue
//! reference measure; `x = 1` is identified with `x = 0`. A map is described
//! by an increasing endpoint sequence `0 = e_0 < ... < e_B = 1`; each branch
//! `[e_b, e_{b+1})` owns its left endpoint and maps monotonically onto
//! `(0,1)`. Shipped families:
//!
//! - `x -> m x  (mod 1)` for integer `m >= 2` (affine, zero distortion);
//! - `x -> 2x + c sin(2 pi x)  (mod 1)` for `0 <= c < 0.15` (two full
//!   branches split exactly at `1/2`, distortion `4 pi^2 c / (2 - 2 pi c)^2`).

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

pub type DynFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Grid points per branch used by numeric inf/sup certification.
pub const GRID_PER_BRANCH: usize = 1 << 12;

/// Default cap on the number of cylinders a partition may hold.
pub const CYLINDER_CAP: usize = 1 << 20;

const ROOT_TOL: f64 = 1e-13;
const ROOT_MAX_ITERS: usize = 200;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Branch-wise definition of the map.
#[derive(Clone)]
pub enum MapKernel {
    /// `x -> m x (mod 1)`.
    AffineMod { m: u32 },
    /// `x -> 2x + c sin(2 pi x) (mod 1)`.
    PerturbedDoubling { c: f64 },
    /// Arbitrary per-branch closures, each extending continuously to the
    /// closed branch.
    Custom {
        forward: Vec<DynFn>,
        derivative: Vec<DynFn>,
        second: Vec<Option<DynFn>>,
    },
}

/// A full-branch piecewise expanding map of `[0,1]`.
#[derive(Clone)]
pub struct PiecewiseExpandingMap {
    label: String,
    endpoints: Vec<f64>,
    kernel: MapKernel,
    /// Certified lower bound `a` on `inf |T'|`.
    min_slope: f64,
    /// Certified upper bound `B` on `sup |T''| / (T')^2`.
    distortion_bound: f64,
}

/// One preimage of a point under one branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversePoint {
    pub branch: usize,
    pub x: f64,
    pub abs_derivative: f64,
}

impl fmt::Debug for PiecewiseExpandingMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PiecewiseExpandingMap")
            .field("label", &self.label)
            .field("branches", &self.branch_count())
            .field("min_slope", &self.min_slope)
            .field("distortion_bound", &self.distortion_bound)
            .finish()
    }
}

impl PiecewiseExpandingMap {
    /// The affine map `x -> m x (mod 1)`, `m >= 2`.
    pub fn affine_mod(m: u32) -> Self {
        assert!(m >= 2, "affine family needs slope >= 2");
        let endpoints = (0..=m).map(|k| k as f64 / m as f64).collect();
        PiecewiseExpandingMap {
            label: format!("mod{m}"),
            endpoints,
            kernel: MapKernel::AffineMod { m },
            min_slope: m as f64,
            distortion_bound: 0.0,
        }
    }

    /// The perturbed doubling map `x -> 2x + c sin(2 pi x) (mod 1)`.
    ///
    /// Both branch endpoints are exact (`sin(2 pi / 2) = 0` pins the split at
    /// `1/2`), the minimal slope is `2 - 2 pi c` and the distortion bound is
    /// `4 pi^2 c / (2 - 2 pi c)^2`.
    pub fn perturbed_doubling(c: f64) -> Result<Self> {
        if !(0.0..0.15).contains(&c) {
            return Err(Error::domain(format!(
                "perturbed doubling needs c in [0, 0.15), got {c}"
            )));
        }
        let a = 2.0 - TWO_PI * c;
        let b = if c == 0.0 { 0.0 } else { 4.0 * std::f64::consts::PI.powi(2) * c / (a * a) };
        Ok(PiecewiseExpandingMap {
            label: format!("pert{c}"),
            endpoints: vec![0.0, 0.5, 1.0],
            kernel: MapKernel::PerturbedDoubling { c },
            min_slope: a,
            distortion_bound: b,
        })
    }

    /// A map from explicit per-branch closures. Invariants (partition,
    /// monotone full branches, slope and distortion bounds) are certified on
    /// a grid of [`GRID_PER_BRANCH`] points per branch.
    pub fn from_branches(
        label: impl Into<String>,
        endpoints: Vec<f64>,
        forward: Vec<DynFn>,
        derivative: Vec<DynFn>,
        second: Vec<Option<DynFn>>,
        min_slope: f64,
        distortion_bound: f64,
    ) -> Result<Self> {
        let n = endpoints.len();
        if n < 2 || forward.len() != n - 1 || derivative.len() != n - 1 || second.len() != n - 1 {
            return Err(Error::domain("branch data lengths do not match endpoints"));
        }
        let map = PiecewiseExpandingMap {
            label: label.into(),
            endpoints,
            kernel: MapKernel::Custom { forward, derivative, second },
            min_slope,
            distortion_bound,
        };
        map.certify()?;
        Ok(map)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn branch_count(&self) -> usize {
        self.endpoints.len() - 1
    }

    pub fn endpoints(&self) -> &[f64] {
        &self.endpoints
    }

    pub fn min_slope(&self) -> f64 {
        self.min_slope
    }

    pub fn distortion_bound(&self) -> f64 {
        self.distortion_bound
    }

    /// Branch owning `x` (left endpoint closed; `x = 1` wraps to branch 0).
    pub fn branch_of(&self, x: f64) -> usize {
        if x >= 1.0 {
            return 0;
        }
        let idx = self.endpoints.partition_point(|e| *e <= x);
        idx.saturating_sub(1).min(self.branch_count() - 1)
    }

    /// Branch image without the mod-1 wrap; valid on the closed branch, so
    /// `forward_on_branch(b, e_b) = 0` and `forward_on_branch(b, e_{b+1}) = 1`
    /// for increasing branches.
    pub fn forward_on_branch(&self, branch: usize, x: f64) -> f64 {
        match &self.kernel {
            MapKernel::AffineMod { m } => *m as f64 * x - branch as f64,
            MapKernel::PerturbedDoubling { c } => 2.0 * x + c * (TWO_PI * x).sin() - branch as f64,
            MapKernel::Custom { forward, .. } => forward[branch](x),
        }
    }

    /// `T(x)` with left-closed branch ownership; result in `[0,1)`.
    pub fn eval(&self, x: f64) -> f64 {
        let x = if x >= 1.0 { 0.0 } else { x };
        let b = self.branch_of(x);
        let y = self.forward_on_branch(b, x);
        y.clamp(0.0, 1.0 - f64::EPSILON)
    }

    /// `T'(x)` (signed), using branch ownership of `x`.
    pub fn derivative(&self, x: f64) -> f64 {
        let x = if x >= 1.0 { 0.0 } else { x };
        match &self.kernel {
            MapKernel::AffineMod { m } => *m as f64,
            MapKernel::PerturbedDoubling { c } => 2.0 + TWO_PI * c * (TWO_PI * x).cos(),
            MapKernel::Custom { derivative, .. } => derivative[self.branch_of(x)](x),
        }
    }

    /// `T''(x)`; differentiates the supplied derivative numerically when no
    /// analytic second derivative is available.
    pub fn second_derivative(&self, x: f64) -> f64 {
        let x = if x >= 1.0 { 0.0 } else { x };
        match &self.kernel {
            MapKernel::AffineMod { .. } => 0.0,
            MapKernel::PerturbedDoubling { c } => {
                -TWO_PI * TWO_PI * c * (TWO_PI * x).sin()
            }
            MapKernel::Custom { second, derivative, .. } => {
                let b = self.branch_of(x);
                if let Some(s) = &second[b] {
                    s(x)
                } else {
                    let (lo, hi) = (self.endpoints[b], self.endpoints[b + 1]);
                    let h = (hi - lo) * 1e-6;
                    let xm = (x - h).max(lo);
                    let xp = (x + h).min(hi);
                    (derivative[b](xp) - derivative[b](xm)) / (xp - xm)
                }
            }
        }
    }

    /// Solve `forward_on_branch(branch, x) = y` for `x` in the closed branch
    /// by bisection with Newton polishing.
    pub fn invert_on_branch(&self, branch: usize, y: f64) -> Result<f64> {
        let (lo, hi) = (self.endpoints[branch], self.endpoints[branch + 1]);
        let f_lo = self.forward_on_branch(branch, lo);
        let f_hi = self.forward_on_branch(branch, hi);
        let increasing = f_hi > f_lo;
        // fast path: affine branches invert exactly
        if let MapKernel::AffineMod { m } = self.kernel {
            return Ok((y + branch as f64) / m as f64);
        }
        let mut a = lo;
        let mut b = hi;
        let mut x = lo + (hi - lo) * if increasing { y.clamp(0.0, 1.0) } else { 1.0 - y.clamp(0.0, 1.0) };
        for _ in 0..ROOT_MAX_ITERS {
            let fx = self.forward_on_branch(branch, x) - y;
            if fx.abs() < ROOT_TOL {
                return Ok(x);
            }
            if (fx > 0.0) == increasing {
                b = x;
            } else {
                a = x;
            }
            let d = match &self.kernel {
                MapKernel::AffineMod { m } => *m as f64,
                MapKernel::PerturbedDoubling { c } => 2.0 + TWO_PI * c * (TWO_PI * x).cos(),
                MapKernel::Custom { derivative, .. } => derivative[branch](x),
            };
            let newton = if d.abs() > 1e-12 { x - fx / d } else { f64::NAN };
            x = if newton.is_finite() && newton > a && newton < b {
                newton
            } else {
                0.5 * (a + b)
            };
            if b - a < 1e-16 {
                return Ok(x);
            }
        }
        Err(Error::RootFind { label: self.label.clone(), branch, y })
    }

    /// All preimages of `y` (one per branch) with `|T'|` at each preimage.
    pub fn inverse_branches(&self, y: f64) -> Result<Vec<InversePoint>> {
        if !(0.0..=1.0).contains(&y) {
            return Err(Error::domain(format!("inverse_branches needs y in (0,1), got {y}")));
        }
        (0..self.branch_count())
            .map(|b| {
                let x = self.invert_on_branch(b, y)?;
                Ok(InversePoint { branch: b, x, abs_derivative: self.derivative_on_branch(b, x).abs() })
            })
            .collect()
    }

    fn derivative_on_branch(&self, branch: usize, x: f64) -> f64 {
        match &self.kernel {
            MapKernel::AffineMod { m } => *m as f64,
            MapKernel::PerturbedDoubling { c } => 2.0 + TWO_PI * c * (TWO_PI * x).cos(),
            MapKernel::Custom { derivative, .. } => derivative[branch](x),
        }
    }

    /// Numerically certify the type invariants on the per-branch grid:
    /// increasing endpoints partitioning `[0,1]`, monotone branches with
    /// image `(0,1)`, `inf |T'| >= a` and `sup |T''|/(T')^2 <= B`.
    pub fn certify(&self) -> Result<()> {
        let eps = 1e-9;
        if (self.endpoints[0]).abs() > eps || (self.endpoints[self.endpoints.len() - 1] - 1.0).abs() > eps {
            return Err(Error::domain(format!(
                "map `{}`: branch endpoints must span [0,1]",
                self.label
            )));
        }
        if self.endpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain(format!("map `{}`: endpoints not increasing", self.label)));
        }
        if self.min_slope <= 0.0 {
            return Err(Error::domain(format!("map `{}`: min_slope must be positive", self.label)));
        }
        for b in 0..self.branch_count() {
            let (lo, hi) = (self.endpoints[b], self.endpoints[b + 1]);
            let f_lo = self.forward_on_branch(b, lo);
            let f_hi = self.forward_on_branch(b, hi);
            let (img_lo, img_hi) = if f_hi > f_lo { (f_lo, f_hi) } else { (f_hi, f_lo) };
            if img_lo.abs() > 1e-7 || (img_hi - 1.0).abs() > 1e-7 {
                return Err(Error::domain(format!(
                    "map `{}`: branch {b} is not full (image [{img_lo:.3e}, {img_hi:.3e}])",
                    self.label
                )));
            }
            let mut prev = f_lo;
            for t in 1..=GRID_PER_BRANCH {
                let x = lo + (hi - lo) * t as f64 / GRID_PER_BRANCH as f64;
                let fx = self.forward_on_branch(b, x);
                if (fx - prev) * (f_hi - f_lo) < 0.0 {
                    return Err(Error::domain(format!(
                        "map `{}`: branch {b} not monotone near x = {x:.6}",
                        self.label
                    )));
                }
                prev = fx;
                let d = self.derivative_on_branch(b, x).abs();
                if d < self.min_slope - 1e-9 {
                    return Err(Error::domain(format!(
                        "map `{}`: |T'| = {d:.6} < a = {} at x = {x:.6}",
                        self.label, self.min_slope
                    )));
                }
                let dist = self.second_derivative(x.min(hi - (hi - lo) * 1e-9)).abs() / (d * d);
                if dist > self.distortion_bound + 1e-7 {
                    return Err(Error::domain(format!(
                        "map `{}`: |T''|/(T')^2 = {dist:.6} > B = {} at x = {x:.6}",
                        self.label, self.distortion_bound
                    )));
                }
            }
        }
        Ok(())
    }
}

/// How the map applied at each time step is selected.
#[derive(Debug, Clone)]
pub enum ScheduleRule {
    /// Finite explicit list of map labels, `T_1, T_2, ...`.
    Explicit(Vec<String>),
    /// Infinite cyclic repetition of the listed labels.
    Cyclic(Vec<String>),
    /// Externally supplied index sequence into the alphabet order.
    Omega(Vec<usize>),
}

/// A sequence of maps `(T_n)` together with its claimed expansion data.
#[derive(Debug, Clone)]
pub struct SequentialSchedule {
    rule: ScheduleRule,
    atlas: BTreeMap<String, Arc<PiecewiseExpandingMap>>,
    alphabet: Vec<String>,
    steps: ResolvedSteps,
    /// Block length for the expansion hypothesis.
    pub p: usize,
    /// Claimed `p`-step expansion constant, `> 1`.
    pub lambda: f64,
    /// Backward-Lipschitz constant for sub-block compositions, `>= 1`.
    pub kprime: f64,
}

#[derive(Debug, Clone)]
enum ResolvedSteps {
    Cycle(Vec<Arc<PiecewiseExpandingMap>>),
    List(Vec<Arc<PiecewiseExpandingMap>>),
}

impl SequentialSchedule {
    pub fn new(
        rule: ScheduleRule,
        atlas: BTreeMap<String, Arc<PiecewiseExpandingMap>>,
        p: usize,
        lambda: f64,
        kprime: f64,
    ) -> Result<Self> {
        if p < 1 {
            return Err(Error::config("schedule needs p >= 1"));
        }
        if lambda <= 1.0 {
            return Err(Error::config(format!("schedule needs Lambda > 1, got {lambda}")));
        }
        if kprime < 1.0 {
            return Err(Error::config(format!("schedule needs K' >= 1, got {kprime}")));
        }
        let alphabet: Vec<String> = atlas.keys().cloned().collect();
        let resolve = |label: &String| -> Result<Arc<PiecewiseExpandingMap>> {
            atlas
                .get(label)
                .cloned()
                .ok_or_else(|| Error::config(format!("map label `{label}` does not resolve in the atlas")))
        };
        let steps = match &rule {
            ScheduleRule::Explicit(labels) => {
                ResolvedSteps::List(labels.iter().map(resolve).collect::<Result<_>>()?)
            }
            ScheduleRule::Cyclic(labels) => {
                if labels.is_empty() {
                    return Err(Error::config("cyclic schedule needs at least one label"));
                }
                ResolvedSteps::Cycle(labels.iter().map(resolve).collect::<Result<_>>()?)
            }
            ScheduleRule::Omega(indices) => {
                let maps: Vec<Arc<PiecewiseExpandingMap>> = indices
                    .iter()
                    .map(|&i| {
                        let label = alphabet.get(i).ok_or_else(|| {
                            Error::config(format!("omega index {i} outside alphabet of size {}", alphabet.len()))
                        })?;
                        resolve(label)
                    })
                    .collect::<Result<_>>()?;
                ResolvedSteps::List(maps)
            }
        };
        Ok(SequentialSchedule { rule, atlas, alphabet, steps, p, lambda, kprime })
    }

    /// Single-map schedule with `p = 1` and `Lambda = a`.
    pub fn constant(map: PiecewiseExpandingMap) -> Self {
        let lambda = map.min_slope();
        Self::cyclic(vec![map], 1, lambda, 1.0)
    }

    /// Cyclic schedule over the listed maps; `Lambda` defaults to the
    /// smallest branch slope over the cycle.
    pub fn cyclic(maps: Vec<PiecewiseExpandingMap>, p: usize, lambda: f64, kprime: f64) -> Self {
        let mut atlas = BTreeMap::new();
        let labels: Vec<String> = maps.iter().map(|m| m.label().to_string()).collect();
        for m in maps {
            atlas.insert(m.label().to_string(), Arc::new(m));
        }
        Self::new(ScheduleRule::Cyclic(labels), atlas, p, lambda, kprime)
            .expect("cyclic schedule construction")
    }

    pub fn rule(&self) -> &ScheduleRule {
        &self.rule
    }

    pub fn atlas(&self) -> &BTreeMap<String, Arc<PiecewiseExpandingMap>> {
        &self.atlas
    }

    pub fn alphabet(&self) -> &[String] {
        &self.alphabet
    }

    /// The map `T_n` applied at (1-based) step `n`.
    pub fn map_at(&self, n: usize) -> Result<&Arc<PiecewiseExpandingMap>> {
        if n == 0 {
            return Err(Error::config("schedule steps are 1-based"));
        }
        match &self.steps {
            ResolvedSteps::Cycle(maps) => Ok(&maps[(n - 1) % maps.len()]),
            ResolvedSteps::List(maps) => maps.get(n - 1).ok_or_else(|| {
                Error::config(format!("schedule exhausted: step {n} beyond horizon {}", maps.len()))
            }),
        }
    }

    /// Distinct maps appearing in steps `1..=horizon`.
    pub fn maps_within(&self, horizon: usize) -> Vec<Arc<PiecewiseExpandingMap>> {
        let mut seen = BTreeMap::new();
        match &self.steps {
            ResolvedSteps::Cycle(maps) => {
                for m in maps.iter().take(horizon.max(1)) {
                    seen.entry(m.label().to_string()).or_insert_with(|| m.clone());
                }
            }
            ResolvedSteps::List(maps) => {
                for m in maps.iter().take(horizon) {
                    seen.entry(m.label().to_string()).or_insert_with(|| m.clone());
                }
            }
        }
        seen.into_values().collect()
    }

    /// The maps applied in steps `j..=k`, in application order.
    pub fn steps_between(&self, j: usize, k: usize) -> Result<Vec<Arc<PiecewiseExpandingMap>>> {
        if j == 0 {
            return Err(Error::config("schedule steps are 1-based"));
        }
        if k + 1 < j {
            return Ok(Vec::new());
        }
        (j..=k).map(|n| self.map_at(n).cloned()).collect()
    }

    /// Orbit point `T_k ∘ ... ∘ T_j (x)`; the identity when `k < j`.
    pub fn compose_eval(&self, j: usize, k: usize, x: f64) -> Result<f64> {
        let mut y = x;
        for n in j..=k {
            y = self.map_at(n)?.eval(y);
        }
        Ok(y)
    }

    /// `|comp' (x)|` along the same composition, by the chain rule.
    pub fn compose_abs_derivative(&self, j: usize, k: usize, x: f64) -> Result<f64> {
        let mut y = x;
        let mut d = 1.0;
        for n in j..=k {
            let map = self.map_at(n)?;
            d *= map.derivative(y).abs();
            y = map.eval(y);
        }
        Ok(d)
    }
}

/// Evaluate a pre-resolved composition at `x`.
pub fn orbit_eval(maps: &[Arc<PiecewiseExpandingMap>], x: f64) -> f64 {
    let mut y = x;
    for m in maps {
        y = m.eval(y);
    }
    y
}

/// An interval on which an `n`-step composition is a bijection onto `(0,1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CylinderSet {
    pub lo: f64,
    pub hi: f64,
    /// Number of composition steps.
    pub depth: usize,
    /// 1-based index of the first map in the composition.
    pub start: usize,
    /// Branch ids visited along the composition.
    pub word: Vec<u32>,
}

impl CylinderSet {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn word_string(&self) -> String {
        self.word.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(".")
    }
}

/// Locate `x` in `(lo, hi)` with `g(x) = target` by bisection, where `g` is
/// monotone on the interval with (virtual) endpoint values `0` and `1`.
fn bisect_monotone<F: Fn(f64) -> f64>(g: F, lo: f64, hi: f64, target: f64, increasing: bool) -> f64 {
    let mut a = lo;
    let mut b = hi;
    for _ in 0..80 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        let below = g(mid) < target;
        if below == increasing {
            a = mid;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

/// The partition of `[0,1]` into cylinders of `T_{j+n-1} ∘ ... ∘ T_j`,
/// sorted by left endpoint. Fails with a resource error when the count would
/// exceed `cap` (the count grows like `branches^n`).
pub fn cylinder_partition(
    schedule: &SequentialSchedule,
    j: usize,
    n: usize,
    cap: usize,
) -> Result<Vec<CylinderSet>> {
    if n < 1 {
        return Err(Error::domain("cylinder_partition needs depth n >= 1"));
    }
    let first = schedule.map_at(j)?;
    let mut cylinders: Vec<CylinderSet> = (0..first.branch_count())
        .map(|b| CylinderSet {
            lo: first.endpoints()[b],
            hi: first.endpoints()[b + 1],
            depth: 1,
            start: j,
            word: vec![b as u32],
        })
        .collect();
    for depth in 2..=n {
        let map = schedule.map_at(j + depth - 1)?.clone();
        let branches = map.branch_count();
        if cylinders.len().saturating_mul(branches) > cap {
            return Err(Error::Resource(format!(
                "cylinder count {} x {} branches exceeds cap {cap} at depth {depth}",
                cylinders.len(),
                branches
            )));
        }
        let prefix = schedule.steps_between(j, j + depth - 2)?;
        let mut refined = Vec::with_capacity(cylinders.len() * branches);
        for cyl in &cylinders {
            // g = composition up to the previous depth, a monotone bijection
            // from this cylinder onto (0,1)
            let g = |x: f64| orbit_eval(&prefix, x);
            let w = cyl.hi - cyl.lo;
            let increasing = g(cyl.lo + 0.25 * w) < g(cyl.lo + 0.75 * w);
            let mut cuts = Vec::with_capacity(branches + 1);
            cuts.push(cyl.lo);
            for b in 1..branches {
                let target = map.endpoints()[b];
                cuts.push(bisect_monotone(g, cyl.lo, cyl.hi, target, increasing));
            }
            cuts.push(cyl.hi);
            if !increasing {
                // cut points were found in reversed image order
                let interior: Vec<f64> = cuts[1..branches].iter().rev().copied().collect();
                cuts.splice(1..branches, interior);
            }
            for (i, pair) in cuts.windows(2).enumerate() {
                let branch = if increasing { i } else { branches - 1 - i };
                let mut word = cyl.word.clone();
                word.push(branch as u32);
                refined.push(CylinderSet { lo: pair[0], hi: pair[1], depth, start: j, word });
            }
        }
        cylinders = refined;
    }
    Ok(cylinders)
}

/// Expansion lower bound for a composition, with the grid resolution used.
#[derive(Debug, Clone)]
pub struct ExpansionEstimate {
    pub factor: f64,
    pub cylinders: usize,
    pub points_per_cylinder: usize,
    /// Cylinder on which the minimum was attained.
    pub argmin: (f64, f64),
}

/// Lower bound on `Lambda_{j,k}`, the infimum over cylinders of the composed
/// derivative, minimized on a dense grid per cylinder.
pub fn expansion_factor(schedule: &SequentialSchedule, j: usize, k: usize) -> Result<ExpansionEstimate> {
    if k < j {
        return Err(Error::domain("expansion_factor needs j <= k"));
    }
    let cylinders = cylinder_partition(schedule, j, k - j + 1, CYLINDER_CAP)?;
    let budget: usize = 1 << 22;
    let pts = (budget / cylinders.len().max(1)).clamp(64, GRID_PER_BRANCH);
    let mut factor = f64::INFINITY;
    let mut argmin = (0.0, 1.0);
    for cyl in &cylinders {
        let w = cyl.hi - cyl.lo;
        for t in 0..=pts {
            // pull grid points slightly inside so the orbit never crosses a
            // neighboring branch through rounding
            let frac = (t as f64 + 0.5) / (pts as f64 + 1.0);
            let x = cyl.lo + w * frac;
            let d = schedule.compose_abs_derivative(j, k, x)?;
            if d < factor {
                factor = d;
                argmin = (cyl.lo, cyl.hi);
            }
        }
    }
    Ok(ExpansionEstimate { factor, cylinders: cylinders.len(), points_per_cylinder: pts, argmin })
}

/// One violated inequality found by [`verify_ue`].
#[derive(Debug, Clone)]
pub struct UeViolation {
    pub j: usize,
    pub kind: String,
    pub cylinder: Option<(f64, f64)>,
    pub value: f64,
    pub bound: f64,
}

/// Numeric uniform-expansion certificate for a schedule.
#[derive(Debug, Clone)]
pub struct UeReport {
    pub p: usize,
    pub lambda_claimed: f64,
    /// Minimum measured `Lambda_{j, p+j-1}` over sampled `j`.
    pub lambda_measured: f64,
    pub kprime_claimed: f64,
    /// Maximum measured back-Lipschitz ratio over sub-block compositions.
    pub kprime_measured: f64,
    /// Smallest branch slope over the maps in the horizon.
    pub a_min: f64,
    /// Largest distortion bound over the maps in the horizon.
    pub b_max: f64,
    /// Distortion constant `C_* = B min{1,a}^{-p} Lambda / (1 - Lambda^{-1/p})`,
    /// reported as the log-Hoelder constant `K`.
    pub distortion_k: f64,
    pub js_checked: Vec<usize>,
    pub grid_points: usize,
    pub violations: Vec<UeViolation>,
}

impl UeReport {
    pub fn pass(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check the expansion and back-Lipschitz hypotheses on sampled start
/// indices over `1..=n_max`, and assemble the distortion constant of the
/// piecewise-smooth family.
pub fn verify_ue(schedule: &SequentialSchedule, n_max: usize) -> Result<UeReport> {
    let p = schedule.p;
    let lambda = schedule.lambda;
    let kprime = schedule.kprime;
    let last_j = n_max.saturating_sub(p - 1).max(1);
    let mut js: Vec<usize> = if last_j <= 48 {
        (1..=last_j).collect()
    } else {
        let mut v: Vec<usize> = (0..48).map(|i| 1 + i * (last_j - 1) / 47).collect();
        v.dedup();
        v
    };
    js.sort_unstable();

    let mut violations = Vec::new();
    let mut lambda_measured = f64::INFINITY;
    let mut grid_points = 0;
    for &j in &js {
        let est = expansion_factor(schedule, j, j + p - 1)?;
        grid_points = est.points_per_cylinder;
        if est.factor < lambda_measured {
            lambda_measured = est.factor;
        }
        if est.factor < lambda - 1e-9 {
            violations.push(UeViolation {
                j,
                kind: "expansion (UE:1)".into(),
                cylinder: Some(est.argmin),
                value: est.factor,
                bound: lambda,
            });
        }
    }

    // (UE:2): for sub-block lengths l < p, points in a common cylinder may
    // contract by at most 1/K'.
    let mut kprime_measured: f64 = 1.0;
    for &j in &js {
        for l in 1..p {
            let cyls = cylinder_partition(schedule, j, l, CYLINDER_CAP)?;
            for cyl in cyls {
                let w = cyl.width();
                let (x, y) = (cyl.lo + w / 3.0, cyl.lo + 2.0 * w / 3.0);
                let (fx, fy) = (
                    schedule.compose_eval(j, j + l - 1, x)?,
                    schedule.compose_eval(j, j + l - 1, y)?,
                );
                let ratio = (y - x) / (fy - fx).abs().max(1e-300);
                if ratio > kprime_measured {
                    kprime_measured = ratio;
                }
                if ratio > kprime + 1e-9 {
                    violations.push(UeViolation {
                        j,
                        kind: "back-Lipschitz (UE:2)".into(),
                        cylinder: Some((cyl.lo, cyl.hi)),
                        value: ratio,
                        bound: kprime,
                    });
                }
            }
        }
    }

    let maps = schedule.maps_within(n_max);
    let a_min = maps.iter().map(|m| m.min_slope()).fold(f64::INFINITY, f64::min);
    let b_max = maps.iter().map(|m| m.distortion_bound()).fold(0.0, f64::max);
    let distortion_k =
        b_max * a_min.min(1.0).powi(-(p as i32)) * lambda / (1.0 - lambda.powf(-1.0 / p as f64));

    Ok(UeReport {
        p,
        lambda_claimed: lambda,
        lambda_measured,
        kprime_claimed: kprime,
        kprime_measured,
        a_min,
        b_max,
        distortion_k,
        js_checked: js,
        grid_points,
        violations,
    })
}
