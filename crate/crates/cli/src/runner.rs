//! Experiment execution: each kind builds its pipeline from the config,
//! writes `report.json` plus per-kind CSVs into the output directory, and
//! reports whether its built-in checks held.
//!
//! Every artifact is a pure function of `(config bytes, seed, tool
//! version)`: floats are printed with shortest round-trip formatting, JSON
//! maps are sorted, and no timestamps or machine identifiers enter the
//! outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use seqclt_core::clt::{check_c1_c2, covariance_with_samples, normalize_cloud};
use seqclt_core::convex::{sample_gaussian_cloud, shell_bound_check, ConvexSet};
use seqclt_core::maps::verify_ue;
use seqclt_core::random::{quenched_experiment, sigma_infinity_estimate, RateReport};
use seqclt_core::stein::{ei_experiment, stein_residual, SmoothedIndicator, SteinQuadrature, SteinSolution};
use seqclt_core::transfer::{
    correlation2, coupling_bound, memory_loss_decay, GridFunction, ScalarFn, TransferEngine,
};

use crate::config::{ExperimentConfig, TrigComponent, TrigKind};

/// Exit status of a run: `Ok` maps to 0, `CheckFailed` to 2 (config errors
/// surface as `Err` and map to 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    Ok,
    CheckFailed,
}

fn config_hash(raw: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(raw);
    format!("{:x}", hasher.finalize())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_report(out_dir: &Path, kind: &str, hash: &str, seed: u64, payload: Value) -> Result<()> {
    let report = json!({
        "tool_version": env!("CARGO_PKG_VERSION"),
        "kind": kind,
        "config_hash": hash,
        "seed": seed,
        "results": payload,
    });
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write_text(&out_dir.join("report.json"), &text)
}

fn trig_fn(c: &TrigComponent) -> ScalarFn {
    let w = 2.0 * std::f64::consts::PI * c.k as f64;
    let amp = c.amplitude;
    match c.kind {
        TrigKind::Cos => Arc::new(move |x: f64| amp * (w * x).cos()),
        TrigKind::Sin => Arc::new(move |x: f64| amp * (w * x).sin()),
    }
}

fn rate_rows(report: &RateReport) -> String {
    let mut csv = String::from("n,dc,se,lambda_min,lambda_max,skipped\n");
    for p in &report.points {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            p.n, p.dc, p.se, p.lambda_min, p.lambda_max, p.skipped
        );
    }
    csv
}

fn rate_json(report: &RateReport) -> Value {
    json!({
        "slope": report.slope,
        "intercept": report.intercept,
        "ci_low": report.ci.0,
        "ci_high": report.ci.1,
        "r_squared": report.r_squared,
        "omega_seed": report.omega_seed,
        "points": report.points.iter().map(|p| json!({
            "n": p.n,
            "dc": p.dc,
            "se": p.se,
            "lambda_min": p.lambda_min,
            "lambda_max": p.lambda_max,
            "sigma_over_n": matrix_json(&p.sigma_over_n),
            "skipped": p.skipped,
        })).collect::<Vec<_>>(),
    })
}

fn matrix_json(m: &nalgebra::DMatrix<f64>) -> Value {
    Value::Array(
        (0..m.nrows())
            .map(|r| Value::Array((0..m.ncols()).map(|c| json!(m[(r, c)])).collect()))
            .collect(),
    )
}

/// Execute one experiment into `out_dir`.
pub fn run(config: &ExperimentConfig, raw: &[u8], out_dir: &Path) -> Result<RunOutcome> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    let hash = config_hash(raw);
    let kind = config.kind_name();

    match config {
        ExperimentConfig::MemoryLoss { seed, grid, atlas, schedule, function, n_max } => {
            let sched = schedule.build(atlas)?;
            let engine = TransferEngine::new(*grid);
            let obs = function.build()?;
            let u = GridFunction::from_fn(*grid, obs.alpha, |x| (obs.component(0))(x));
            if u.integral().abs() > 1e-8 {
                return Err(anyhow!(
                    "function must be mean-zero for a memory-loss run (integral = {:.3e})",
                    u.integral()
                ));
            }
            let ue = verify_ue(&sched, *n_max).map_err(|e| anyhow!("{e}"))?;
            let coupling =
                coupling_bound(ue.distortion_k, sched.lambda, obs.alpha, sched.kprime, sched.p)
                    .map_err(|e| anyhow!("{e}"))?;
            let curve = memory_loss_decay(&sched, &u, *n_max, &engine).map_err(|e| anyhow!("{e}"))?;
            let seminorm = u.holder_seminorm();
            let mut csv = String::from("n,norm,bound\n");
            let mut certificate_pass = true;
            for (n, v) in curve.norms.iter().enumerate() {
                let bound =
                    coupling.c_sharp * coupling.q.powf(n as f64 / coupling.p_tilde as f64) * seminorm;
                if *v > bound * 1.1 {
                    certificate_pass = false;
                }
                let _ = writeln!(csv, "{n},{v},{bound}");
            }
            write_text(&out_dir.join("decay.csv"), &csv)?;
            let rate_pass = curve.q_emp <= coupling.q;
            write_report(
                out_dir,
                kind,
                &hash,
                *seed,
                json!({
                    "grid": grid,
                    "q_emp": curve.q_emp,
                    "r_squared": curve.r_squared,
                    "fitted_points": curve.fitted_points,
                    "ue": {
                        "pass": ue.pass(),
                        "distortion_k": ue.distortion_k,
                        "lambda_measured": ue.lambda_measured,
                        "kprime_measured": ue.kprime_measured,
                        "grid_points": ue.grid_points,
                        "violations": ue.violations.len(),
                    },
                    "coupling": {
                        "r": coupling.r,
                        "xi": coupling.xi,
                        "q": coupling.q,
                        "p_tilde": coupling.p_tilde,
                        "c_sharp": coupling.c_sharp,
                    },
                    "certificate_pass": certificate_pass,
                    "rate_within_certificate": rate_pass,
                }),
            )?;
            if ue.pass() && certificate_pass && rate_pass {
                Ok(RunOutcome::Ok)
            } else {
                Ok(RunOutcome::CheckFailed)
            }
        }

        ExperimentConfig::Correlation { seed, grid, atlas, schedule, psi1, psi2, mu, n, m_max } => {
            let sched = schedule.build(atlas)?;
            let engine = TransferEngine::new(*grid);
            let density = mu.build(*grid, 1.0)?;
            let f1 = trig_fn(psi1);
            let f2 = trig_fn(psi2);
            let mut csv = String::from("m,orbit,transfer,disagreement,fitted_bound\n");
            let mut rows = Vec::new();
            for m in 0..=*m_max {
                let c = correlation2(&sched, &f1, &f2, *n, m, &density, &engine)
                    .map_err(|e| anyhow!("{e}"))?;
                rows.push((m, c));
            }
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for (m, c) in &rows {
                if *m >= 1 && c.transfer.abs() > 1e-13 {
                    xs.push(*m as f64);
                    ys.push(c.transfer.abs().ln());
                }
            }
            let fit = seqclt_core::numerics::fit_line(&xs, &ys).ok();
            let (q_emp, c0, r2) = fit
                .map(|f| (f.slope.exp(), f.intercept.exp(), f.r_squared))
                .unwrap_or((f64::NAN, f64::NAN, f64::NAN));
            let mut agree = true;
            for (m, c) in &rows {
                let bound = c0 * q_emp.powi(*m as i32);
                if c.disagreement() > 1e-5 {
                    agree = false;
                }
                let _ = writeln!(csv, "{m},{},{},{},{bound}", c.orbit, c.transfer, c.disagreement());
            }
            write_text(&out_dir.join("correlations.csv"), &csv)?;
            write_report(
                out_dir,
                kind,
                &hash,
                *seed,
                json!({
                    "grid": grid,
                    "n": n,
                    "q_emp": q_emp,
                    "prefactor": c0,
                    "fit_r_squared": r2,
                    "two_method_agreement": agree,
                }),
            )?;
            Ok(if agree && (q_emp.is_nan() || q_emp < 1.0) {
                RunOutcome::Ok
            } else {
                RunOutcome::CheckFailed
            })
        }

        ExperimentConfig::SteinCheck { seed, dim, eps_list, points, fd_step } => {
            let d = *dim;
            let quad = SteinQuadrature::standard(d);
            // test sets with high-accuracy convolutions: half-spaces and balls
            let dirs = seqclt_core::convex::ConvexFamilySpec::default_family(d, *seed).directions(2);
            let mut sets: Vec<ConvexSet> = dirs
                .iter()
                .enumerate()
                .map(|(i, a)| ConvexSet::HalfSpace { a: a.clone(), b: 0.3 * (i as f64 + 1.0) - 0.5 })
                .collect();
            sets.push(ConvexSet::Ball { c: vec![0.0; d], r: 1.0 });
            sets.push(ConvexSet::Ball { c: vec![0.4; d], r: 0.8 });
            let w_cloud = sample_gaussian_cloud(d, *points, *seed);
            let mut csv = String::from("set,shape,eps,point,residual,budget\n");
            let mut worst: f64 = 0.0;
            for (si, set) in sets.iter().enumerate() {
                for &eps in eps_list {
                    let h = SmoothedIndicator::new(set.clone(), eps).map_err(|e| anyhow!("{e}"))?;
                    let sol = SteinSolution::new(&h, &quad);
                    for p in 0..*points {
                        let w: Vec<f64> = w_cloud.row(p).to_vec();
                        let rep = stein_residual(&sol, &w, *fd_step);
                        worst = worst.max(rep.residual);
                        let _ = writeln!(
                            csv,
                            "{si},{},{eps},{p},{},{}",
                            set.shape_name(),
                            rep.residual,
                            rep.budget
                        );
                    }
                }
            }
            write_text(&out_dir.join("residuals.csv"), &csv)?;
            write_report(
                out_dir,
                kind,
                &hash,
                *seed,
                json!({
                    "dim": d,
                    "fd_step": fd_step,
                    "points": points,
                    "worst_residual": worst,
                    "threshold": 1e-3,
                }),
            )?;
            Ok(if worst <= 1e-3 { RunOutcome::Ok } else { RunOutcome::CheckFailed })
        }

        ExperimentConfig::EiIdentity {
            seed,
            grid,
            atlas,
            schedule,
            observable,
            mu,
            n,
            m_samples,
            set,
            eps,
            fd_step,
        } => {
            let sched = schedule.build(atlas)?;
            let engine = TransferEngine::new(*grid);
            let phi = observable.build()?;
            let density = mu.build(*grid, phi.alpha)?;
            let h = SmoothedIndicator::new(set.build()?, *eps).map_err(|e| anyhow!("{e}"))?;
            let rep = ei_experiment(&sched, &phi, *n, &density, *m_samples, *seed, &engine, &h, *fd_step)
                .map_err(|e| anyhow!("{e}"))?;
            let mut csv = String::from("term,value\n");
            for (i, e) in rep.e.iter().enumerate() {
                let _ = writeln!(csv, "e{},{e}", i + 1);
            }
            let _ = writeln!(csv, "total,{}", rep.total);
            let _ = writeln!(csv, "lhs,{}", rep.lhs);
            let _ = writeln!(csv, "residual,{}", rep.residual);
            let _ = writeln!(csv, "residual_se,{}", rep.residual_se);
            write_text(&out_dir.join("ei.csv"), &csv)?;
            let pass = rep.residual <= 3.0 * rep.residual_se + 1e-6;
            write_report(
                out_dir,
                kind,
                &hash,
                *seed,
                json!({
                    "grid": grid,
                    "n": n,
                    "m_samples": m_samples,
                    "eps": eps,
                    "fd_step": fd_step,
                    "terms": rep.e.to_vec(),
                    "total": rep.total,
                    "lhs": rep.lhs,
                    "residual": rep.residual,
                    "residual_se": rep.residual_se,
                    "pass": pass,
                }),
            )?;
            Ok(if pass { RunOutcome::Ok } else { RunOutcome::CheckFailed })
        }

        ExperimentConfig::CltRate {
            seed,
            grid,
            atlas,
            schedule,
            observable,
            mu,
            ns,
            m_samples,
            family,
            triples,
            dump_w,
        } => {
            let sched = schedule.build(atlas)?;
            let engine = TransferEngine::new(*grid);
            let phi = observable.build()?;
            let density = mu.build(*grid, phi.alpha)?;
            let fam = family
                .as_ref()
                .map(|f| f.build(phi.dim(), *seed))
                .unwrap_or_else(|| seqclt_core::convex::ConvexFamilySpec::default_family(phi.dim(), *seed));
            let report =
                seqclt_core::random::rate_experiment(&sched, &phi, ns, &density, *m_samples, &fam, *seed, &engine)
                    .map_err(|e| anyhow!("{e}"))?;
            write_text(&out_dir.join("rate.csv"), &rate_rows(&report))?;
            if *dump_w {
                for &n in ns {
                    let (cov, sums) = covariance_with_samples(
                        &sched, &phi, 0.0, 1.0, n, &density, *m_samples, *seed, &engine,
                    )
                    .map_err(|e| anyhow!("{e}"))?;
                    if let Ok(w) = normalize_cloud(&cov, &sums) {
                        let mut bytes = Vec::with_capacity(w.data().len() * 8);
                        for v in w.data() {
                            bytes.extend_from_slice(&v.to_le_bytes());
                        }
                        std::fs::write(out_dir.join(format!("w_{n}.bin")), bytes)?;
                    }
                }
            }
            let mut pass = true;
            let mut c1c2_json = Value::Null;
            if let Some(triples) = triples {
                let n_top = *ns.last().expect("nonempty ns");
                let check = check_c1_c2(&sched, &phi, n_top, triples, &density, *m_samples, *seed, &engine)
                    .map_err(|e| anyhow!("{e}"))?;
                let mut csv = String::from("d1,d,d2,lambda_max,lambda_min_sub,ratio,skipped\n");
                for row in &check.rows {
                    let _ = writeln!(
                        csv,
                        "{},{},{},{},{},{},{}",
                        row.d1,
                        row.d,
                        row.d2,
                        row.lambda_max,
                        row.lambda_min_sub.map(|v| v.to_string()).unwrap_or_default(),
                        row.ratio.map(|v| v.to_string()).unwrap_or_default(),
                        row.skipped
                    );
                }
                write_text(&out_dir.join("c1c2.csv"), &csv)?;
                pass = check.pass();
                c1c2_json = json!({
                    "pass": check.pass(),
                    "fits": check.fits.iter().map(|(k0, c0, c0p)| json!({
                        "k0": k0, "c0": c0, "c0_prime": c0p
                    })).collect::<Vec<_>>(),
                });
            }
            write_report(
                out_dir,
                kind,
                &hash,
                *seed,
                json!({
                    "grid": grid,
                    "m_samples": m_samples,
                    "rate": rate_json(&report),
                    "c1c2": c1c2_json,
                }),
            )?;
            Ok(if pass { RunOutcome::Ok } else { RunOutcome::CheckFailed })
        }

        ExperimentConfig::QuenchedRate {
            seed,
            grid,
            atlas,
            base,
            p,
            lambda,
            kprime,
            observable,
            mu,
            ns,
            m_samples,
            family,
            omega_seeds,
            n_omega,
        } => {
            if omega_seeds.is_empty() {
                return Err(anyhow!("quenched_rate needs at least one omega seed"));
            }
            let sys = base.build_system(atlas, *p, *lambda, *kprime)?;
            let engine = TransferEngine::new(*grid);
            let phi = observable.build()?;
            let density = mu.build(*grid, phi.alpha)?;
            let fam = family
                .as_ref()
                .map(|f| f.build(phi.dim(), *seed))
                .unwrap_or_else(|| seqclt_core::convex::ConvexFamilySpec::default_family(phi.dim(), *seed));
            let mut reports = Vec::new();
            for &os in omega_seeds {
                let rep = quenched_experiment(&sys, os, &phi, ns, &density, *m_samples, &fam, *seed, &engine)
                    .map_err(|e| anyhow!("omega seed {os}: {e}"))?;
                write_text(&out_dir.join(format!("rate_omega{os}.csv")), &rate_rows(&rep))?;
                reports.push(rep);
            }
            let n_top = *ns.last().expect("nonempty ns");
            let sigma = sigma_infinity_estimate(&sys, &phi, n_top, *n_omega, &density, *m_samples, *seed, &engine)
                .map_err(|e| anyhow!("{e}"))?;
            write_report(
                out_dir,
                kind,
                &hash,
                *seed,
                json!({
                    "grid": grid,
                    "m_samples": m_samples,
                    "spectral_gap": sys.base.spectral_gap(),
                    "omega_runs": reports.iter().map(rate_json).collect::<Vec<_>>(),
                    "sigma_infinity": {
                        "matrix": matrix_json(&sigma.sigma),
                        "lambda_min": sigma.lambda_min,
                        "se": matrix_json(&sigma.se),
                        "drift": sigma.drift.iter().map(|(n, v)| json!({"n": n, "max_diff": v})).collect::<Vec<_>>(),
                    },
                }),
            )?;
            Ok(RunOutcome::Ok)
        }

        ExperimentConfig::ShellCheck { seed, dim, eps_list, mc_points, family } => {
            let fam_spec = family
                .as_ref()
                .map(|f| f.build(*dim, *seed))
                .unwrap_or_else(|| seqclt_core::convex::ConvexFamilySpec::default_family(*dim, *seed));
            let sets = fam_spec.generate(None);
            let mut csv = String::from("eps,set,shape,outer,outer_se,inner,inner_se,bound,pass\n");
            let mut all_pass = true;
            let mut summaries = Vec::new();
            for &eps in eps_list {
                let rep = shell_bound_check(&sets, *dim, eps, *mc_points, *seed).map_err(|e| anyhow!("{e}"))?;
                all_pass &= rep.all_pass();
                for row in &rep.rows {
                    let _ = writeln!(
                        csv,
                        "{eps},{},{},{},{},{},{},{},{}",
                        row.set_index,
                        row.shape,
                        row.outer.0,
                        row.outer.1,
                        row.inner.0,
                        row.inner.1,
                        row.bound,
                        row.pass
                    );
                }
                summaries.push(json!({ "eps": eps, "bound": rep.bound, "all_pass": rep.all_pass() }));
            }
            write_text(&out_dir.join("shells.csv"), &csv)?;
            write_report(
                out_dir,
                kind,
                &hash,
                *seed,
                json!({
                    "dim": dim,
                    "mc_points": mc_points,
                    "checks": summaries,
                }),
            )?;
            Ok(if all_pass { RunOutcome::Ok } else { RunOutcome::CheckFailed })
        }
    }
}

/// Merge rate reports into one convergence table (CSV text). Refuses mixed
/// or non-rate kinds.
pub fn summarize(paths: &[std::path::PathBuf]) -> Result<String> {
    if paths.is_empty() {
        return Err(anyhow!("summarize needs at least one report"));
    }
    let mut out = String::from("experiment,omega_seed,n,dc,se,slope,ci_low,ci_high\n");
    let mut kinds = BTreeMap::new();
    for path in paths {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let report: Value = serde_json::from_str(&text)?;
        let kind = report["kind"].as_str().unwrap_or("?").to_string();
        kinds.insert(kind.clone(), ());
        if kind != "clt_rate" && kind != "quenched_rate" {
            return Err(anyhow!(
                "summarize combines rate reports only; {} has kind `{kind}`",
                path.display()
            ));
        }
        let stem = path
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "report".into());
        let runs: Vec<&Value> = if kind == "clt_rate" {
            vec![&report["results"]["rate"]]
        } else {
            report["results"]["omega_runs"].as_array().map(|v| v.iter().collect()).unwrap_or_default()
        };
        for run in runs {
            let slope = &run["slope"];
            let omega = run["omega_seed"].as_u64().map(|v| v.to_string()).unwrap_or_default();
            for p in run["points"].as_array().into_iter().flatten() {
                let _ = writeln!(
                    out,
                    "{stem},{omega},{},{},{},{slope},{},{}",
                    p["n"], p["dc"], p["se"], run["ci_low"], run["ci_high"]
                );
            }
        }
    }
    Ok(out)
}
