//! Invariants tying the smoothing apparatus to the convex-set metric: the
//! smoothing-based discrepancy chain, the uniform bound on the Gaussian
//! third-derivative functional, and its Monte-Carlo cross-check.

use rand::Rng;
use seqclt_core::convex::{dc_estimate, sample_gaussian_cloud, ConvexFamilySpec, SampleCloud};
use seqclt_core::stein::{
    gauss_third_deriv_functional, stein_g_derivs, GaussScheme, SmoothedIndicator, SteinQuadrature,
    SteinTestFn,
};

#[test]
fn smoothing_chain_dominates_dc_estimate() {
    // d_c(cloud) <= 4 d^{1/4} eps + max_C |mean h_{C,eps} - N_d(h_{C,eps})| + 3 se
    let dim = 2;
    let m = 40_000;
    let base = sample_gaussian_cloud(dim, m, 71);
    // shift the first coordinate so the discrepancy is visible
    let shifted = SampleCloud::new(
        base.data()
            .iter()
            .enumerate()
            .map(|(i, v)| if i % dim == 0 { v + 0.25 } else { *v })
            .collect(),
        dim,
    );
    let family = ConvexFamilySpec::default_family(dim, 72).generate(Some(&shifted));
    let report = dc_estimate(&shifted, dim, &family).unwrap();
    let scheme = GaussScheme::for_dim(dim);
    for eps in [0.05, 0.15] {
        let mut smooth_max: f64 = 0.0;
        let mut max_se: f64 = 0.0;
        // half-spaces and balls carry exact convolutions; they dominate the
        // discrepancy for this cloud
        for set in family.iter().filter(|s| s.shape_name() != "axis_box").step_by(3) {
            let h = SmoothedIndicator::new(set.clone(), eps).unwrap();
            let gauss_mean = h.gauss_mean(&vec![0.0; dim], 1.0, &scheme);
            let (mean, se) = seqclt_core::convex::sample_mean(&shifted, |x| h.value(x));
            smooth_max = smooth_max.max((mean - gauss_mean).abs());
            max_se = max_se.max(se);
        }
        let rhs = 4.0 * (dim as f64).powf(0.25) * eps + smooth_max + 3.0 * max_se;
        assert!(
            report.dc <= rhs,
            "chain violated at eps {eps}: dc {} > {rhs}",
            report.dc
        );
    }
}

#[test]
fn third_functional_uniform_in_eps_and_mc_cross_check() {
    let dim = 2;
    let scheme = GaussScheme::for_dim(dim);
    let tau = 0.4;
    // |int |phi_rst|| via the same scheme gives the absolute-constant bound
    let mut abs_bound = vec![0.0; dim * dim * dim];
    let zeros = vec![0.0; dim];
    scheme.expect_affine_multi(&zeros, -1.0, &mut abs_bound, |_, z, out| {
        for r in 0..dim {
            for s in 0..dim {
                for t in 0..dim {
                    let mut herm3 = -z[r] * z[s] * z[t];
                    if r == s {
                        herm3 += z[t];
                    }
                    if r == t {
                        herm3 += z[s];
                    }
                    if s == t {
                        herm3 += z[r];
                    }
                    out[(r * dim + s) * dim + t] = herm3.abs();
                }
            }
        }
    });
    let prefactor = 0.5 * (1.0 - tau as f64).sqrt();
    let ball = seqclt_core::convex::ConvexSet::ball(vec![0.2, -0.1], 1.0).unwrap();
    for eps in [0.01, 0.05, 0.1, 0.25, 0.5] {
        let h = SmoothedIndicator::new(ball.clone(), eps).unwrap();
        let t3 = gauss_third_deriv_functional(&h, tau, &scheme).unwrap();
        for (v, b) in t3.iter().zip(&abs_bound) {
            assert!(v.abs() <= prefactor * b + 1e-9, "functional above absolute bound at eps {eps}");
        }
    }

    // Monte-Carlo cross-check: N_d[g_rst(., tau)] equals the average of the
    // pointwise third derivatives over Gaussian draws. A smooth test
    // function keeps the tensor rule near-exact on both sides (for kinked
    // indicators the generic scheme carries a few-percent error, which is
    // why their convolutions go through the closed forms instead).
    let h = seqclt_core::stein::FnTest { f: |x: &[f64]| 1.0 / (1.0 + x.iter().map(|v| v * v).sum::<f64>()), dim: 2 };
    let quad = SteinQuadrature::standard(dim);
    let functional = gauss_third_deriv_functional(&h, tau, &scheme).unwrap();
    let mut rng = seqclt_core::rng::stream(55, "functional-mc", 0);
    let draws = 400;
    let mut sums = vec![0.0; dim * dim * dim];
    let mut sqs = vec![0.0; dim * dim * dim];
    for _ in 0..draws {
        let w: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let d3 = stein_g_derivs(&h, &w, tau, &quad).unwrap().third;
        for (i, v) in d3.iter().enumerate() {
            sums[i] += v;
            sqs[i] += v * v;
        }
    }
    for i in 0..sums.len() {
        let mean = sums[i] / draws as f64;
        let var = (sqs[i] / draws as f64 - mean * mean).max(0.0);
        let se = (var / draws as f64).sqrt();
        assert!(
            (mean - functional[i]).abs() <= 3.0 * se + 5e-3,
            "index {i}: MC {mean:.4} vs functional {:.4} (se {se:.4})",
            functional[i]
        );
    }
}
