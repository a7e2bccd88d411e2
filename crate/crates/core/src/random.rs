//! Random dynamical systems: a mixing selection process over a finite map
//! alphabet, quenched rate experiments per realization, estimation of the
//! asymptotic covariance, and log-log convergence-rate fits.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;

use crate::clt::{covariance_from_sums, sample_segment_sums, CenteredObservables, VectorObservable};
use crate::convex::{ConvexFamilySpec, ConvexSet, SampleCloud};
use crate::error::{Error, Result};
use crate::maps::{PiecewiseExpandingMap, ScheduleRule, SequentialSchedule};
use crate::numerics::{self, LineFit};
use crate::rng;
use crate::transfer::{GridDensity, TransferEngine};

/// Law of the map-selection process.
#[derive(Debug, Clone)]
pub enum BaseKind {
    Iid { weights: Vec<f64> },
    Markov { transition: Vec<Vec<f64>>, initial: Vec<f64> },
}

/// A stationary selection process over an ordered map alphabet.
#[derive(Debug, Clone)]
pub struct BaseProcess {
    pub alphabet: Vec<String>,
    pub kind: BaseKind,
}

fn check_distribution(w: &[f64], what: &str) -> Result<()> {
    if w.is_empty() || w.iter().any(|v| *v < 0.0) {
        return Err(Error::config(format!("{what} must be nonnegative and nonempty")));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::config(format!("{what} must sum to 1 within 1e-12, got {s}")));
    }
    Ok(())
}

impl BaseProcess {
    pub fn new(alphabet: Vec<String>, kind: BaseKind) -> Result<Self> {
        let states = alphabet.len();
        if states == 0 {
            return Err(Error::config("base process needs a nonempty alphabet"));
        }
        match &kind {
            BaseKind::Iid { weights } => {
                if weights.len() != states {
                    return Err(Error::config("iid weights must match the alphabet"));
                }
                check_distribution(weights, "iid weights")?;
            }
            BaseKind::Markov { transition, initial } => {
                if transition.len() != states || initial.len() != states {
                    return Err(Error::config("transition matrix must match the alphabet"));
                }
                for (i, row) in transition.iter().enumerate() {
                    if row.len() != states {
                        return Err(Error::config(format!("transition row {i} has wrong length")));
                    }
                    check_distribution(row, &format!("transition row {i}"))?;
                }
                check_distribution(initial, "initial distribution")?;
            }
        }
        Ok(BaseProcess { alphabet, kind })
    }

    pub fn states(&self) -> usize {
        self.alphabet.len()
    }

    /// `1 - |λ₂|` of the transition matrix (`1` for iid selection); a
    /// positive gap certifies geometric mixing of the base, which satisfies
    /// the polynomial mixing hypothesis for every rate exponent.
    pub fn spectral_gap(&self) -> f64 {
        match &self.kind {
            BaseKind::Iid { .. } => 1.0,
            BaseKind::Markov { transition, .. } => {
                let n = transition.len();
                let m = DMatrix::from_fn(n, n, |i, j| transition[i][j]);
                let eigs = m.complex_eigenvalues();
                let mut mags: Vec<f64> = eigs.iter().map(|c| c.norm()).collect();
                mags.sort_by(|a, b| b.total_cmp(a));
                1.0 - mags.get(1).copied().unwrap_or(0.0)
            }
        }
    }
}

fn draw_from(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// One realization `ω_1..ω_n` of the selection process. Sequential draws
/// from a single stream keyed by the seed, so longer horizons extend
/// shorter ones (shift consistency of the realization).
pub fn sample_omega(base: &BaseProcess, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::domain("sample_omega needs n >= 1"));
    }
    let mut rng = rng::stream(seed, "omega", 0);
    let mut out = Vec::with_capacity(n);
    match &base.kind {
        BaseKind::Iid { weights } => {
            for _ in 0..n {
                out.push(draw_from(weights, rng.gen::<f64>()));
            }
        }
        BaseKind::Markov { transition, initial } => {
            let mut state = draw_from(initial, rng.gen::<f64>());
            out.push(state);
            for _ in 1..n {
                state = draw_from(&transition[state], rng.gen::<f64>());
                out.push(state);
            }
        }
    }
    Ok(out)
}

/// A random system: selection process, atlas, and the claimed expansion data
/// shared by every realized schedule.
#[derive(Debug, Clone)]
pub struct RdsSystem {
    pub base: BaseProcess,
    pub atlas: BTreeMap<String, Arc<PiecewiseExpandingMap>>,
    pub p: usize,
    pub lambda: f64,
    pub kprime: f64,
}

impl RdsSystem {
    pub fn new(
        base: BaseProcess,
        maps: Vec<PiecewiseExpandingMap>,
        p: usize,
        lambda: f64,
        kprime: f64,
    ) -> Result<Self> {
        let mut atlas = BTreeMap::new();
        for m in maps {
            atlas.insert(m.label().to_string(), Arc::new(m));
        }
        for label in &base.alphabet {
            if !atlas.contains_key(label) {
                return Err(Error::config(format!("alphabet label `{label}` missing from the atlas")));
            }
        }
        Ok(RdsSystem { base, atlas, p, lambda, kprime })
    }

    /// The sequential schedule realized by an index sequence.
    pub fn schedule_for(&self, omega: &[usize]) -> Result<SequentialSchedule> {
        let labels: Vec<String> = omega
            .iter()
            .map(|&i| {
                self.base
                    .alphabet
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::config(format!("omega index {i} outside the alphabet")))
            })
            .collect::<Result<_>>()?;
        SequentialSchedule::new(
            ScheduleRule::Explicit(labels),
            self.atlas.clone(),
            self.p,
            self.lambda,
            self.kprime,
        )
    }
}

/// One window length of a rate experiment.
#[derive(Debug, Clone)]
pub struct RatePoint {
    pub n: usize,
    pub dc: f64,
    pub se: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `Σ_N / N` and the per-entry standard errors of that ratio.
    pub sigma_over_n: DMatrix<f64>,
    pub sigma_se_over_n: DMatrix<f64>,
    pub skipped: bool,
}

/// Discrepancy-versus-`N` curve with its fitted rate exponent.
#[derive(Debug, Clone)]
pub struct RateReport {
    pub ns: Vec<usize>,
    pub points: Vec<RatePoint>,
    pub slope: f64,
    pub intercept: f64,
    /// 95% confidence interval for the slope.
    pub ci: (f64, f64),
    pub r_squared: f64,
    pub omega_seed: Option<u64>,
}

/// Weighted log-log least squares of the discrepancy against the window
/// length; weights follow from the standard errors by the delta method.
pub fn fit_rate(ns: &[usize], dcs: &[f64], ses: &[f64]) -> Result<LineFit> {
    if ns.len() < 3 {
        return Err(Error::domain(format!("rate fit needs at least 3 points, got {}", ns.len())));
    }
    if dcs.iter().any(|v| *v <= 0.0) {
        return Err(Error::domain("rate fit needs positive discrepancies"));
    }
    let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = dcs.iter().map(|&v| v.ln()).collect();
    let ws: Vec<f64> = dcs
        .iter()
        .zip(ses)
        .map(|(&d, &s)| {
            let var = (s / d) * (s / d);
            1.0 / var.max(1e-12)
        })
        .collect();
    numerics::fit_line_weighted(&xs, &ys, &ws, false)
}

fn ci_from_fit(fit: &LineFit) -> (f64, f64) {
    let t = numerics::t_quantile(0.975, (fit.points.saturating_sub(2)) as f64);
    (fit.slope - t * fit.slope_se, fit.slope + t * fit.slope_se)
}

/// Full rate experiment for one (deterministic or realized) schedule: per
/// window length, center, sum, normalize, estimate the convex-set
/// discrepancy, then fit the log-log slope over the usable points.
#[allow(clippy::too_many_arguments)]
pub fn rate_experiment(
    schedule: &SequentialSchedule,
    phi: &VectorObservable,
    ns: &[usize],
    mu: &GridDensity,
    m_samples: usize,
    family: &ConvexFamilySpec,
    seed: u64,
    engine: &TransferEngine,
) -> Result<RateReport> {
    if ns.is_empty() || ns.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::domain("rate experiment needs strictly increasing window lengths"));
    }
    let d = phi.dim();
    let n_max = *ns.last().expect("nonempty ns");
    let obs = CenteredObservables::prepare(schedule, phi, n_max, mu, engine)?;
    // one orbit pass with checkpoints at every window length: the window
    // clouds share samples (common random numbers), so the per-N noise
    // largely cancels out of the fitted slope
    let mut breaks = vec![0usize];
    breaks.extend_from_slice(ns);
    let sums = sample_segment_sums(schedule, &obs, &breaks, mu, m_samples, seed)?;

    let mut points = Vec::with_capacity(ns.len());
    for (ni, &n) in ns.iter().enumerate() {
        let report = covariance_from_sums(&sums, 0, ni + 1, (0.0, 1.0), n);
        let nf = n as f64;
        let sigma_over_n = report.sigma.map(|v| v / nf);
        let sigma_se_over_n = report.std_errors.map(|v| v / nf);
        let Some(inv) = report.inv_sqrt.as_ref() else {
            points.push(RatePoint {
                n,
                dc: f64::NAN,
                se: f64::NAN,
                lambda_min: report.lambda_min,
                lambda_max: report.lambda_max,
                sigma_over_n,
                sigma_se_over_n,
                skipped: true,
            });
            continue;
        };
        // normalize the per-sample sums into the W cloud
        let mut w_data = vec![0.0; m_samples * d];
        let mut s_vec = vec![0.0; d];
        for s in 0..m_samples {
            sums.window_sum(s, 0, ni + 1, &mut s_vec);
            for r in 0..d {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += inv[(r, c)] * s_vec[c];
                }
                w_data[s * d + r] = acc;
            }
        }
        // family discrepancy with quantile offsets fitted to this window's
        // cloud; the per-window family seed keeps reruns reproducible
        let cloud = SampleCloud::new(w_data, d);
        let mut fam_spec = family.clone();
        fam_spec.seed = seed ^ (n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let sets: Vec<ConvexSet> = fam_spec.generate(Some(&cloud));
        let picked = crate::convex::dc_estimate(&cloud, d, &sets)?;
        points.push(RatePoint {
            n,
            dc: picked.dc,
            se: picked.argmax_se(),
            lambda_min: report.lambda_min,
            lambda_max: report.lambda_max,
            sigma_over_n,
            sigma_se_over_n,
            skipped: false,
        });
    }
    let usable: Vec<&RatePoint> = points.iter().filter(|p| !p.skipped && p.dc > 0.0).collect();
    if usable.len() < 3 {
        return Err(Error::domain(format!(
            "rate experiment: only {} usable window lengths (all others singular)",
            usable.len()
        )));
    }
    let fit = fit_rate(
        &usable.iter().map(|p| p.n).collect::<Vec<_>>(),
        &usable.iter().map(|p| p.dc).collect::<Vec<_>>(),
        &usable.iter().map(|p| p.se).collect::<Vec<_>>(),
    )?;
    Ok(RateReport {
        ns: ns.to_vec(),
        points,
        slope: fit.slope,
        intercept: fit.intercept,
        ci: ci_from_fit(&fit),
        r_squared: fit.r_squared,
        omega_seed: None,
    })
}

/// Quenched experiment: realize `ω` from the base process, run the rate
/// experiment along the realized schedule.
#[allow(clippy::too_many_arguments)]
pub fn quenched_experiment(
    sys: &RdsSystem,
    omega_seed: u64,
    phi: &VectorObservable,
    ns: &[usize],
    mu: &GridDensity,
    m_samples: usize,
    family: &ConvexFamilySpec,
    seed: u64,
    engine: &TransferEngine,
) -> Result<RateReport> {
    let n_max = *ns.last().ok_or_else(|| Error::domain("quenched experiment needs window lengths"))?;
    let omega = sample_omega(&sys.base, n_max, omega_seed)?;
    let schedule = sys.schedule_for(&omega)?;
    let mut report = rate_experiment(&schedule, phi, ns, mu, m_samples, family, seed, engine)?;
    report.omega_seed = Some(omega_seed);
    Ok(report)
}

/// Asymptotic covariance estimate with a drift table across doubling window
/// lengths.
#[derive(Debug, Clone)]
pub struct SigmaInfReport {
    pub sigma: DMatrix<f64>,
    pub lambda_min: f64,
    /// Per-entry standard error of the averaged `Σ_N / N`.
    pub se: DMatrix<f64>,
    /// `(N, max entry |Σ_N/N - Σ_{N/2}/(N/2)|)` rows, averaged over draws.
    pub drift: Vec<(usize, f64)>,
    pub n_omega: usize,
}

/// Average `Σ_N(ω)/N` over independent realizations at `N`, with successive
/// differences over `{N/4, N/2, N}` certifying the drift decreases.
#[allow(clippy::too_many_arguments)]
pub fn sigma_infinity_estimate(
    sys: &RdsSystem,
    phi: &VectorObservable,
    n: usize,
    n_omega: usize,
    mu: &GridDensity,
    m_samples: usize,
    seed: u64,
    engine: &TransferEngine,
) -> Result<SigmaInfReport> {
    if n_omega == 0 || n < 4 {
        return Err(Error::domain("sigma estimate needs n_omega >= 1 and N >= 4"));
    }
    let d = phi.dim();
    let ns = [n / 4, n / 2, n];
    let mut per_n: Vec<DMatrix<f64>> = vec![DMatrix::zeros(d, d); 3];
    let mut se_acc: DMatrix<f64> = DMatrix::zeros(d, d);
    for i in 0..n_omega {
        let omega = sample_omega(&sys.base, n, seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xabcd)?;
        let schedule = sys.schedule_for(&omega)?;
        let obs = CenteredObservables::prepare(&schedule, phi, n, mu, engine)?;
        for (k, &nk) in ns.iter().enumerate() {
            let sums = sample_segment_sums(&schedule, &obs, &[0, nk], mu, m_samples, seed ^ (k as u64) ^ 17)?;
            let report = covariance_from_sums(&sums, 0, 1, (0.0, 1.0), nk);
            per_n[k] += report.sigma.map(|v| v / nk as f64);
            if k == 2 {
                se_acc += report.std_errors.map(|v| v / nk as f64);
            }
        }
    }
    for m in per_n.iter_mut() {
        *m /= n_omega as f64;
    }
    let se = se_acc.map(|v| v / n_omega as f64 / (n_omega as f64).sqrt());
    let drift = vec![
        (n / 2, (per_n[1].clone() - per_n[0].clone()).amax()),
        (n, (per_n[2].clone() - per_n[1].clone()).amax()),
    ];
    let sigma = per_n[2].clone();
    let eig = nalgebra::SymmetricEigen::new(sigma.clone());
    let lambda_min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(SigmaInfReport { sigma, lambda_min, se, drift, n_omega })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_state_markov() -> BaseProcess {
        BaseProcess::new(
            vec!["mod2".into(), "pert0.1".into()],
            BaseKind::Markov {
                transition: vec![vec![0.7, 0.3], vec![0.4, 0.6]],
                initial: vec![0.5, 0.5],
            },
        )
        .unwrap()
    }

    #[test]
    fn base_process_validation() {
        assert!(BaseProcess::new(vec![], BaseKind::Iid { weights: vec![] }).is_err());
        assert!(BaseProcess::new(
            vec!["a".into()],
            BaseKind::Iid { weights: vec![0.5] }
        )
        .is_err());
        assert!(BaseProcess::new(
            vec!["a".into(), "b".into()],
            BaseKind::Markov {
                transition: vec![vec![0.5, 0.6], vec![0.5, 0.5]],
                initial: vec![0.5, 0.5]
            }
        )
        .is_err());
        let gap = two_state_markov().spectral_gap();
        // second eigenvalue of [[.7,.3],[.4,.6]] is 0.3
        assert_abs_diff_eq!(gap, 0.7, epsilon = 1e-12);
    }

    #[test]
    fn omega_sampling_properties() {
        // absorbing identity chain is constant
        let absorbing = BaseProcess::new(
            vec!["a".into(), "b".into()],
            BaseKind::Markov {
                transition: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                initial: vec![1.0, 0.0],
            },
        )
        .unwrap();
        let omega = sample_omega(&absorbing, 50, 3).unwrap();
        assert!(omega.iter().all(|&i| i == 0));

        // iid frequencies within binomial error
        let iid = BaseProcess::new(
            vec!["a".into(), "b".into(), "c".into()],
            BaseKind::Iid { weights: vec![1.0 / 3.0; 3] },
        )
        .unwrap();
        let n = 100_000;
        let omega = sample_omega(&iid, n, 5).unwrap();
        for s in 0..3 {
            let freq = omega.iter().filter(|&&i| i == s).count() as f64 / n as f64;
            let tol = 3.0 * (2.0 / 9.0 / n as f64).sqrt();
            assert!((freq - 1.0 / 3.0).abs() <= tol, "freq {freq}");
        }

        // determinism and shift consistency
        let a = sample_omega(&iid, 1000, 9).unwrap();
        let b = sample_omega(&iid, 1000, 9).unwrap();
        assert_eq!(a, b);
        let longer = sample_omega(&iid, 1500, 9).unwrap();
        assert_eq!(&longer[..1000], &a[..]);
    }

    #[test]
    fn fit_rate_oracles() {
        let ns = [128usize, 256, 512, 1024, 2048];
        // noiseless N^{-1/2}
        let dcs: Vec<f64> = ns.iter().map(|&n| (n as f64).powf(-0.5)).collect();
        let ses = vec![1e-6; ns.len()];
        let fit = fit_rate(&ns, &dcs, &ses).unwrap();
        assert_abs_diff_eq!(fit.slope, -0.5, epsilon = 1e-12);

        // 5% multiplicative noise: slope within the residual CI of -1/2
        let mut rng = crate::rng::stream(2, "rate-noise", 0);
        let noisy: Vec<f64> = dcs.iter().map(|d| d * (1.0 + 0.05 * (rng.gen::<f64>() - 0.5))).collect();
        let ses: Vec<f64> = noisy.iter().map(|d| 0.05 * d).collect();
        let fit = fit_rate(&ns, &noisy, &ses).unwrap();
        let t = crate::numerics::t_quantile(0.975, (ns.len() - 2) as f64);
        assert!((fit.slope + 0.5).abs() <= t * fit.slope_se.max(0.02), "slope {}", fit.slope);

        assert!(fit_rate(&ns[..2], &dcs[..2], &ses[..2]).is_err());
        assert!(fit_rate(&ns, &[0.0; 5], &ses).is_err());
    }

    #[test]
    fn singleton_alphabet_reduces_to_deterministic_pipeline() {
        let engine = TransferEngine::new(1024);
        let mu = engine.uniform_density();
        let phi = VectorObservable::trig(&[(1, false)], 1.0, 7.3);
        let map = PiecewiseExpandingMap::affine_mod(2);
        let sys = RdsSystem::new(
            BaseProcess::new(vec!["mod2".into()], BaseKind::Iid { weights: vec![1.0] }).unwrap(),
            vec![map.clone()],
            1,
            2.0,
            1.0,
        )
        .unwrap();
        let family = ConvexFamilySpec::default_family(1, 7);
        let ns = [8usize, 16, 32];
        let quenched =
            quenched_experiment(&sys, 11, &phi, &ns, &mu, 4000, &family, 77, &engine).unwrap();
        let det_schedule = SequentialSchedule::constant(map);
        let det = rate_experiment(&det_schedule, &phi, &ns, &mu, 4000, &family, 77, &engine).unwrap();
        for (a, b) in quenched.points.iter().zip(&det.points) {
            assert_eq!(a.dc.to_bits(), b.dc.to_bits(), "dc differs at N = {}", a.n);
            assert_eq!(a.lambda_min.to_bits(), b.lambda_min.to_bits());
        }
        assert_eq!(quenched.slope.to_bits(), det.slope.to_bits());
    }

    #[test]
    fn zero_observable_reports_singular() {
        let engine = TransferEngine::new(256);
        let mu = engine.uniform_density();
        let phi = VectorObservable::new(
            vec![std::sync::Arc::new(|_: f64| 0.0) as crate::transfer::ScalarFn],
            1.0,
            1.0,
        )
        .unwrap();
        let sched = SequentialSchedule::constant(PiecewiseExpandingMap::affine_mod(2));
        let family = ConvexFamilySpec::default_family(1, 3);
        let err = rate_experiment(&sched, &phi, &[8, 16, 32], &mu, 2000, &family, 5, &engine);
        assert!(err.is_err());
    }

    #[test]
    fn sigma_infinity_singleton_doubling() {
        let engine = TransferEngine::new(1024);
        let mu = engine.uniform_density();
        let phi = VectorObservable::trig(&[(1, false)], 1.0, 7.3);
        let sys = RdsSystem::new(
            BaseProcess::new(vec!["mod2".into()], BaseKind::Iid { weights: vec![1.0] }).unwrap(),
            vec![PiecewiseExpandingMap::affine_mod(2)],
            1,
            2.0,
            1.0,
        )
        .unwrap();
        let rep = sigma_infinity_estimate(&sys, &phi, 64, 2, &mu, 30_000, 6, &engine).unwrap();
        assert!((rep.sigma[(0, 0)] - 0.5).abs() <= 3.0 * rep.se[(0, 0)].max(2e-3),
            "sigma {} (se {})", rep.sigma[(0, 0)], rep.se[(0, 0)]);
        assert!(rep.lambda_min > 0.0);
    }
}
