//! Experiment configuration: a single JSON tree per run, with explicit seeds
//! everywhere (no implicit entropy) and per-kind required fields.

use std::collections::BTreeMap;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;

use seqclt_core::clt::VectorObservable;
use seqclt_core::convex::{ConvexFamilySpec, ConvexSet};
use seqclt_core::maps::{PiecewiseExpandingMap, ScheduleRule, SequentialSchedule};
use seqclt_core::random::{BaseKind, BaseProcess, RdsSystem};
use seqclt_core::transfer::GridDensity;

pub const DEFAULT_GRID: usize = 4096;

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MapSpec {
    /// `x -> m x (mod 1)`.
    Mod { m: u32 },
    /// `x -> 2x + c sin(2 pi x) (mod 1)`.
    Perturbed { c: f64 },
}

impl MapSpec {
    pub fn build(&self, label: &str) -> Result<PiecewiseExpandingMap> {
        let map = match self {
            MapSpec::Mod { m } => {
                if *m < 2 {
                    bail!("atlas.{label}: affine family needs m >= 2");
                }
                PiecewiseExpandingMap::affine_mod(*m)
            }
            MapSpec::Perturbed { c } => PiecewiseExpandingMap::perturbed_doubling(*c)
                .map_err(|e| anyhow!("atlas.{label}: {e}"))?,
        };
        Ok(map.with_label(label))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RuleSpec {
    Cyclic(Vec<String>),
    Explicit(Vec<String>),
    Omega(Vec<usize>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub rule: RuleSpec,
    #[serde(default = "one_usize")]
    pub p: usize,
    /// Claimed p-step expansion constant; defaults to the smallest branch
    /// slope over the atlas.
    pub lambda: Option<f64>,
    #[serde(default = "one_f64")]
    pub kprime: f64,
}

fn one_usize() -> usize {
    1
}

fn one_f64() -> f64 {
    1.0
}

pub fn build_atlas(atlas: &BTreeMap<String, MapSpec>) -> Result<BTreeMap<String, Arc<PiecewiseExpandingMap>>> {
    let mut out = BTreeMap::new();
    for (label, spec) in atlas {
        out.insert(label.clone(), Arc::new(spec.build(label)?));
    }
    Ok(out)
}

impl ScheduleSpec {
    pub fn build(&self, atlas: &BTreeMap<String, MapSpec>) -> Result<SequentialSchedule> {
        let resolved = build_atlas(atlas)?;
        let lambda = self
            .lambda
            .unwrap_or_else(|| resolved.values().map(|m| m.min_slope()).fold(f64::INFINITY, f64::min));
        let rule = match &self.rule {
            RuleSpec::Cyclic(labels) => ScheduleRule::Cyclic(labels.clone()),
            RuleSpec::Explicit(labels) => ScheduleRule::Explicit(labels.clone()),
            RuleSpec::Omega(indices) => ScheduleRule::Omega(indices.clone()),
        };
        SequentialSchedule::new(rule, resolved, self.p, lambda, self.kprime)
            .map_err(|e| anyhow!("schedule: {e}"))
    }
}

/// Selection process: exactly one of `iid` or `transition`+`initial`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSpec {
    pub alphabet: Vec<String>,
    pub iid: Option<Vec<f64>>,
    pub transition: Option<Vec<Vec<f64>>>,
    pub initial: Option<Vec<f64>>,
}

impl BaseSpec {
    pub fn build(&self) -> Result<BaseProcess> {
        let kind = match (&self.iid, &self.transition, &self.initial) {
            (Some(w), None, None) => BaseKind::Iid { weights: w.clone() },
            (None, Some(t), Some(i)) => BaseKind::Markov { transition: t.clone(), initial: i.clone() },
            _ => bail!("base: specify either `iid` weights or `transition` + `initial`"),
        };
        BaseProcess::new(self.alphabet.clone(), kind).map_err(|e| anyhow!("base: {e}"))
    }

    pub fn build_system(
        &self,
        atlas: &BTreeMap<String, MapSpec>,
        p: usize,
        lambda: Option<f64>,
        kprime: f64,
    ) -> Result<RdsSystem> {
        let base = self.build()?;
        let maps: Vec<PiecewiseExpandingMap> = atlas
            .iter()
            .map(|(label, spec)| spec.build(label))
            .collect::<Result<_>>()?;
        let lam = lambda.unwrap_or_else(|| maps.iter().map(|m| m.min_slope()).fold(f64::INFINITY, f64::min));
        RdsSystem::new(base, maps, p, lam, kprime).map_err(|e| anyhow!("base: {e}"))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigComponent {
    pub kind: TrigKind,
    pub k: u32,
    #[serde(default = "one_f64")]
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrigKind {
    Cos,
    Sin,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservableSpec {
    pub components: Vec<TrigComponent>,
    #[serde(default = "one_f64")]
    pub alpha: f64,
}

impl ObservableSpec {
    pub fn build(&self) -> Result<VectorObservable> {
        let modes: Vec<(u32, bool, f64)> = self
            .components
            .iter()
            .map(|c| (c.k, matches!(c.kind, TrigKind::Sin), c.amplitude))
            .collect();
        VectorObservable::trig_scaled(&modes, self.alpha).map_err(|e| anyhow!("observable: {e}"))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MuSpec {
    Uniform,
    /// `rho(x) ∝ exp(a cos(2 pi x))`.
    ExpCos { amplitude: f64 },
}

impl Default for MuSpec {
    fn default() -> Self {
        MuSpec::Uniform
    }
}

impl MuSpec {
    pub fn build(&self, cells: usize, alpha: f64) -> Result<GridDensity> {
        match self {
            MuSpec::Uniform => Ok(GridDensity::uniform(cells)),
            MuSpec::ExpCos { amplitude } => {
                let a = *amplitude;
                GridDensity::from_fn(cells, alpha, |x| {
                    (a * (2.0 * std::f64::consts::PI * x).cos()).exp()
                })
                .map_err(|e| anyhow!("mu: {e}"))
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub half_spaces: Option<usize>,
    pub balls: Option<usize>,
    pub boxes: Option<usize>,
}

impl FamilySpec {
    pub fn build(&self, dim: usize, seed: u64) -> ConvexFamilySpec {
        let mut spec = ConvexFamilySpec::default_family(dim, seed);
        if let Some(h) = self.half_spaces {
            spec.half_spaces = h;
        }
        if let Some(b) = self.balls {
            spec.balls = b;
        }
        if let Some(b) = self.boxes {
            spec.boxes = b;
        }
        spec
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum SetSpec {
    HalfSpace { normal: Vec<f64>, offset: f64 },
    Ball { center: Vec<f64>, radius: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl SetSpec {
    pub fn build(&self) -> Result<ConvexSet> {
        let set = match self {
            SetSpec::HalfSpace { normal, offset } => ConvexSet::half_space(normal.clone(), *offset),
            SetSpec::Ball { center, radius } => ConvexSet::ball(center.clone(), *radius),
            SetSpec::Box { lo, hi } => ConvexSet::axis_box(lo.clone(), hi.clone()),
        };
        set.map_err(|e| anyhow!("set: {e}"))
    }
}

/// Top-level experiment description; the `kind` tag selects the pipeline and
/// its required fields.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExperimentConfig {
    /// Iterate a mean-zero function through the schedule and fit its decay.
    MemoryLoss {
        seed: u64,
        #[serde(default = "default_grid")]
        grid: usize,
        atlas: BTreeMap<String, MapSpec>,
        schedule: ScheduleSpec,
        function: ObservableSpec,
        n_max: usize,
    },
    /// Two-route correlation table over gaps `0..=m_max` at start index `n`.
    Correlation {
        seed: u64,
        #[serde(default = "default_grid")]
        grid: usize,
        atlas: BTreeMap<String, MapSpec>,
        schedule: ScheduleSpec,
        psi1: TrigComponent,
        psi2: TrigComponent,
        #[serde(default)]
        mu: MuSpec,
        n: usize,
        m_max: usize,
    },
    /// Residuals of the characterizing identity at random points.
    SteinCheck {
        seed: u64,
        dim: usize,
        eps_list: Vec<f64>,
        points: usize,
        #[serde(default = "default_fd_step")]
        fd_step: f64,
    },
    /// The seven-term decomposition identity on orbit Monte Carlo.
    EiIdentity {
        seed: u64,
        #[serde(default = "default_grid")]
        grid: usize,
        atlas: BTreeMap<String, MapSpec>,
        schedule: ScheduleSpec,
        observable: ObservableSpec,
        #[serde(default)]
        mu: MuSpec,
        n: usize,
        m_samples: usize,
        set: SetSpec,
        eps: f64,
        #[serde(default = "default_fd_step")]
        fd_step: f64,
    },
    /// Deterministic-schedule convergence-rate experiment.
    CltRate {
        seed: u64,
        #[serde(default = "default_grid")]
        grid: usize,
        atlas: BTreeMap<String, MapSpec>,
        schedule: ScheduleSpec,
        observable: ObservableSpec,
        #[serde(default)]
        mu: MuSpec,
        ns: Vec<usize>,
        m_samples: usize,
        family: Option<FamilySpec>,
        /// Optional eigenvalue-growth triples `(d1, d, d2)` checked at the
        /// largest window.
        triples: Option<Vec<(f64, f64, f64)>>,
        /// Write each window's normalized samples as little-endian f64
        /// binary, row-major `(sample, component)`.
        #[serde(default)]
        dump_w: bool,
    },
    /// Quenched convergence-rate experiment over several realizations.
    QuenchedRate {
        seed: u64,
        #[serde(default = "default_grid")]
        grid: usize,
        atlas: BTreeMap<String, MapSpec>,
        base: BaseSpec,
        #[serde(default = "one_usize")]
        p: usize,
        lambda: Option<f64>,
        #[serde(default = "one_f64")]
        kprime: f64,
        observable: ObservableSpec,
        #[serde(default)]
        mu: MuSpec,
        ns: Vec<usize>,
        m_samples: usize,
        family: Option<FamilySpec>,
        omega_seeds: Vec<u64>,
        /// Independent draws for the asymptotic covariance table.
        #[serde(default = "default_n_omega")]
        n_omega: usize,
    },
    /// Monte-Carlo Gaussian shell masses against the dimensional bound.
    ShellCheck {
        seed: u64,
        dim: usize,
        eps_list: Vec<f64>,
        mc_points: usize,
        family: Option<FamilySpec>,
    },
}

fn default_grid() -> usize {
    DEFAULT_GRID
}

fn default_fd_step() -> f64 {
    1e-3
}

fn default_n_omega() -> usize {
    3
}

impl ExperimentConfig {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ExperimentConfig::MemoryLoss { .. } => "memory_loss",
            ExperimentConfig::Correlation { .. } => "correlation",
            ExperimentConfig::SteinCheck { .. } => "stein_check",
            ExperimentConfig::EiIdentity { .. } => "ei_identity",
            ExperimentConfig::CltRate { .. } => "clt_rate",
            ExperimentConfig::QuenchedRate { .. } => "quenched_rate",
            ExperimentConfig::ShellCheck { .. } => "shell_check",
        }
    }

    pub fn override_seed(&mut self, new_seed: u64) {
        match self {
            ExperimentConfig::MemoryLoss { seed, .. }
            | ExperimentConfig::Correlation { seed, .. }
            | ExperimentConfig::SteinCheck { seed, .. }
            | ExperimentConfig::EiIdentity { seed, .. }
            | ExperimentConfig::CltRate { seed, .. }
            | ExperimentConfig::QuenchedRate { seed, .. }
            | ExperimentConfig::ShellCheck { seed, .. } => *seed = new_seed,
        }
    }
}

/// A parsed config file: the experiment, the optional output directory, and
/// the raw bytes (hashed for provenance).
pub struct LoadedConfig {
    pub experiment: ExperimentConfig,
    pub out_dir: Option<std::path::PathBuf>,
    pub raw: Vec<u8>,
}

/// Parse a config file; schema violations report the offending field.
pub fn load_config(path: &std::path::Path) -> Result<LoadedConfig> {
    let raw = std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut value: serde_json::Value = serde_json::from_slice(&raw)
        .map_err(|e| anyhow!("config {} is not valid JSON (line {}, column {}): {e}", path.display(), e.line(), e.column()))?;
    let out_dir = value
        .as_object_mut()
        .and_then(|m| m.remove("out_dir"))
        .map(|v| -> Result<std::path::PathBuf> {
            Ok(std::path::PathBuf::from(
                v.as_str().ok_or_else(|| anyhow!("out_dir must be a string"))?,
            ))
        })
        .transpose()?;
    let experiment: ExperimentConfig = serde_json::from_value(value)
        .map_err(|e| anyhow!("schema violation in {}: {e}", path.display()))?;
    Ok(LoadedConfig { experiment, out_dir, raw })
}
