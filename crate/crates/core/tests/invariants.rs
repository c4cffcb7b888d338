//! Structural invariants of the models, laws, probabilities, identities,
//! designs and estimators.

use std::path::Path;

use choice_lab::choiceprob::{binary_choice_prob, choice_prob, cond_choice_prob};
use choice_lab::controlfn::conditional_independence_witness;
use choice_lab::estimate::{local_linear_fit, simulate_cross_section, KernelConfig};
use choice_lab::experiment::ExperimentConfig;
use choice_lab::identities::{thm1_rhs_analytic, thm1_rhs_smoothed, thm2_rhs};
use choice_lab::model::fd_step;
use choice_lab::panel::{default_diag_grid, stationarity_witness, thm9_recover_beta, PanelDgp, PanelXLaw};
use choice_lab::report::CheckContext;
use choice_lab::rng::CounterRng;
use choice_lab::{Dists, Error, EtaDist, Expr, IntegrationSpec, ModelDims, NoiseDist, UtilityModel};

fn config(name: &str) -> ExperimentConfig {
    ExperimentConfig::from_path(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)).unwrap()
}

fn uniform(rng: &mut CounterRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

fn probe(rng: &mut CounterRng, n: usize, r: f64) -> Vec<f64> {
    (0..n).map(|_| uniform(rng, -r, r)).collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-8 || (a - b).abs() <= 1e-6 * b.abs()
}

fn families() -> Vec<UtilityModel> {
    let tanh = Expr::sum(vec![
        Expr::tanh(Expr::product(vec![Expr::eta(0), Expr::x(0)])),
        Expr::product(vec![Expr::eta(1), Expr::pow(Expr::x(1), 2)]),
        Expr::V,
    ]);
    let link = Expr::sigmoid(Expr::sum(vec![Expr::product(vec![Expr::eta(0), Expr::Index]), Expr::eta(1)]));
    vec![
        UtilityModel::binary_rc(3),
        UtilityModel::general(ModelDims::binary(2), 2, vec![tanh]).unwrap(),
        UtilityModel::index(vec![1.0, -0.5], link, 2).unwrap(),
        UtilityModel::quadratic_scalar(),
        UtilityModel::linear_rc(vec![0.0, 0.5, -0.5], 2).unwrap(),
    ]
}

#[test]
fn analytic_gradients_match_central_differences() {
    for (f, model) in families().into_iter().enumerate() {
        let (p, m) = (model.x_len(), model.eta_dim());
        for i in 0..100 {
            let mut rng = CounterRng::stream(1, "probe", (f * 1000 + i) as u64);
            let x = probe(&mut rng, p, 2.0);
            let eta = probe(&mut rng, m, 2.0);
            let v = uniform(&mut rng, -1.0, 1.0);
            if model.is_binary() {
                let g = model.grad_x_delta(&x, &eta, v).unwrap();
                for k in 0..p {
                    let h = fd_step(x[k]);
                    let (mut up, mut dn) = (x.clone(), x.clone());
                    up[k] += h;
                    dn[k] -= h;
                    let fd = (model.eval_delta(&up, &eta, v).unwrap() - model.eval_delta(&dn, &eta, v).unwrap())
                        / (2.0 * h);
                    assert!(close(g[k], fd), "family {f} probe {i}: {} vs {fd}", g[k]);
                }
                if model.is_additive() {
                    let direct = model.eval_delta(&x, &eta, v).unwrap();
                    assert_eq!(direct, model.canonical_h(&x, &eta).unwrap() + v);
                }
            } else {
                let g = model.grad_x_utilities(&x, &eta).unwrap();
                for k in 0..p {
                    let h = fd_step(x[k]);
                    let (mut up, mut dn) = (x.clone(), x.clone());
                    up[k] += h;
                    dn[k] -= h;
                    let (u1, u0) = (model.eval_utilities(&up, &eta).unwrap(), model.eval_utilities(&dn, &eta).unwrap());
                    for j in 0..u1.len() {
                        assert!(close(g[j][k], (u1[j] - u0[j]) / (2.0 * h)));
                    }
                }
            }
        }
    }
}

#[test]
fn gradient_norm_is_bounded_on_a_bounded_grid() {
    let model = UtilityModel::binary_rc(2);
    let probes: Vec<_> = (0..200)
        .map(|i| {
            let mut rng = CounterRng::stream(2, "bound", i);
            (probe(&mut rng, 2, 3.0), probe(&mut rng, 2, 2.0), 0.0)
        })
        .collect();
    let c = model.max_gradient_norm(&probes).unwrap();
    assert!(c > 0.0 && c <= 8f64.sqrt());
}

fn noise_kinds() -> Vec<(NoiseDist, Vec<f64>)> {
    vec![
        (NoiseDist::LogisticDiff { xi: 0.7 }, vec![]),
        (NoiseDist::Gaussian { mean: -0.3, sd: 1.4 }, vec![]),
        (NoiseDist::eta_shifted(NoiseDist::LogisticDiff { xi: 0.0 }, vec![0.5, -1.0]), vec![1.0, 0.4]),
        (NoiseDist::eta_shifted(NoiseDist::Gaussian { mean: 0.0, sd: 0.8 }, vec![1.0]), vec![-0.6]),
    ]
}

#[test]
fn noise_densities_integrate_to_one() {
    for (noise, eta) in noise_kinds() {
        let h = 1e-3;
        let total: f64 = (0..=80_000)
            .map(|i| {
                let w = if i == 0 || i == 80_000 { 0.5 } else { 1.0 };
                w * noise.density_v(-40.0 + i as f64 * h, &eta) * h
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-6, "{noise:?}: {total}");
    }
}

#[test]
fn noise_cdfs_are_nondecreasing_and_density_derivatives_match() {
    for (noise, eta) in noise_kinds() {
        let grid: Vec<f64> = (0..1000).map(|i| -10.0 + 20.0 * i as f64 / 999.0).collect();
        for w in grid.windows(2) {
            assert!(noise.cdf_v(w[1], &eta) >= noise.cdf_v(w[0], &eta));
        }
        for &v in grid.iter().step_by(10) {
            let h = 1e-5;
            let fd = (noise.density_v(v + h, &eta) - noise.density_v(v - h, &eta)) / (2.0 * h);
            assert!((noise.ddensity_v(v, &eta) - fd).abs() < 1e-6);
        }
    }
}

#[test]
fn multinomial_probabilities_sum_to_one() {
    let model = UtilityModel::linear_rc(vec![0.0, 0.3, -0.2], 2).unwrap();
    let eta = EtaDist::normal(vec![1.0, -0.5], vec![vec![0.5, 0.1], vec![0.1, 0.25]]);
    let gumbel = Dists::new(eta.clone(), NoiseDist::IidGumbel);
    let gauss = Dists::new(eta, NoiseDist::Gaussian { mean: 0.0, sd: 1.0 });
    for i in 0..20 {
        let x = probe(&mut CounterRng::stream(3, "grid", i), 6, 1.0);
        let gh = choice_prob(&model, &gumbel, &x, &IntegrationSpec::gauss_hermite(12)).unwrap();
        assert!((gh.value.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        let mc = choice_prob(&model, &gauss, &x, &IntegrationSpec::monte_carlo(20_000, i)).unwrap();
        let se = mc.mc_se.iter().cloned().fold(0.0, f64::max);
        assert!((mc.value.iter().sum::<f64>() - 1.0).abs() <= 1e-10f64.max(3.0 * se));
    }
}

#[test]
fn logit_choice_kernel_is_translation_invariant() {
    let integ = IntegrationSpec::gauss_hermite(10);
    for c in [-7.5, 0.1, 12.0] {
        let u = [0.3, -1.2, 2.0];
        let shifted: Vec<f64> = u.iter().map(|v| v + c).collect();
        let a = cond_choice_prob(&u, &NoiseDist::IidGumbel, &[], &integ);
        let b = cond_choice_prob(&shifted, &NoiseDist::IidGumbel, &[], &integ);
        for (p, q) in a.value.iter().zip(&b.value) {
            assert!((p - q).abs() <= 1e-12);
        }
    }
}

#[test]
fn binary_probability_increases_with_positive_coefficients() {
    let model = UtilityModel::binary_rc(2);
    let dists = Dists::new(EtaDist::PointMass(vec![0.8, 1.5]), NoiseDist::Gaussian { mean: 0.0, sd: 1.0 });
    let integ = IntegrationSpec::gauss_hermite(8);
    for k in 0..2 {
        let mut last = -1.0;
        for i in 0..21 {
            let mut x = vec![0.2, -0.1];
            x[k] = -2.0 + 0.2 * i as f64;
            let p = binary_choice_prob(&model, &dists, &x, &integ).unwrap().value[0];
            assert!(p >= last);
            last = p;
        }
    }
}

#[test]
fn density_route_equals_linear_coefficient_route() {
    let model = UtilityModel::binary_rc(2);
    let dists = Dists::new(
        EtaDist::normal(vec![1.0, -2.0], vec![vec![1.0, 0.3], vec![0.3, 0.8]]),
        NoiseDist::LogisticDiff { xi: 0.4 },
    );
    let integ = IntegrationSpec::gauss_hermite(16);
    for x in [[0.0, 0.0], [0.5, -0.25], [-1.0, 1.0]] {
        let a = thm1_rhs_analytic(&model, &dists, &x, &integ).unwrap();
        let b = thm2_rhs(&model, &dists, &x, &integ).unwrap();
        for k in 0..2 {
            assert!((a.value[k] - b.value[k]).abs() <= 1e-12);
        }
    }
}

#[test]
fn smoothing_bias_shrinks_fourfold_per_bandwidth_halving() {
    let model = UtilityModel::binary_rc(2);
    let dists = Dists::new(EtaDist::normal(vec![1.0, -2.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]]), NoiseDist::LogisticDiff { xi: 0.0 });
    let integ = IntegrationSpec::gauss_hermite(24);
    let x = [0.3, 0.2];
    let exact = thm1_rhs_analytic(&model, &dists, &x, &integ).unwrap();
    let bias: Vec<f64> = [0.4, 0.2, 0.1, 0.05]
        .iter()
        .map(|&b| (thm1_rhs_smoothed(&model, &dists, &x, &integ, b).unwrap().value[0] - exact.value[0]).abs())
        .collect();
    for w in bias.windows(2) {
        let ratio = w[0] / w[1];
        assert!((3.6..4.4).contains(&ratio), "{bias:?}");
    }
}

#[test]
fn reflecting_coefficients_and_regressors_leaves_probabilities_unchanged() {
    let model = UtilityModel::binary_rc(2);
    let cov = vec![vec![0.7, -0.2], vec![-0.2, 1.1]];
    let plus = Dists::new(EtaDist::normal(vec![0.5, -1.0], cov.clone()), NoiseDist::LogisticDiff { xi: 0.0 });
    let minus = Dists::new(EtaDist::normal(vec![-0.5, 1.0], cov), NoiseDist::LogisticDiff { xi: 0.0 });
    let integ = IntegrationSpec::gauss_hermite(16);
    for x in [[0.4, 0.9], [-1.2, 0.3]] {
        let a = binary_choice_prob(&model, &plus, &x, &integ).unwrap().value[0];
        let b = binary_choice_prob(&model, &minus, &[-x[0], -x[1]], &integ).unwrap().value[0];
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn heterogeneity_is_independent_of_regressors_given_the_control() {
    for (cfg, design) in [("ref_control.json", None), ("ref_control.json", Some("truncated"))] {
        let cfg = config(cfg);
        let dgp = match design {
            None => cfg.triangular.clone().unwrap(),
            Some(name) => cfg.designs.iter().find(|d| d.name == name).unwrap().triangular.clone().unwrap(),
        };
        let w = conditional_independence_witness(&dgp, 100_000, 10, 5);
        assert!(!w.rejected, "{w:?}");
    }
}

#[test]
fn shipped_binary_panels_are_stationary() {
    for name in ["ref_panel.json", "ref_nonid.json", "nonid_linear.json", "est_panel.json"] {
        let cfg = config(name);
        let model = cfg.model.build().unwrap();
        let dgp = cfg.panel.clone().unwrap();
        let probe = vec![0.25; model.x_len()];
        let w = stationarity_witness(&dgp, &model, &probe, 60_000, 6, 9).unwrap();
        assert!(!w.rejected, "{name}: {w:?}");
    }
}

#[test]
fn direction_recovery_reports_scalars_and_refuses_when_they_vanish() {
    let model = UtilityModel::linear_rc(vec![0.0, 0.5, -0.5], 2).unwrap();
    let dgp = PanelDgp::new(PanelXLaw::Uniform { lo: -1.0, hi: 1.0 }, vec![1.0, -1.0], NoiseDist::IidGumbel)
        .with_alpha(vec![0.2; 6], 0.5);
    let ctx = CheckContext::new(IntegrationSpec::gauss_hermite(12));
    let grid = default_diag_grid(6);
    let rec = thm9_recover_beta(&dgp, &model, &grid, &ctx, None).unwrap();
    assert!(rec.report.rows_prefixed("scalar_").count() == 9 * grid.len());
    assert!(rec.angle < 1e-3);

    let far = UtilityModel::linear_rc(vec![0.0, 80.0, -80.0], 2).unwrap();
    let err = thm9_recover_beta(&dgp, &far, &grid, &ctx, None).unwrap_err();
    assert!(matches!(err, Error::Identification(_)), "{err:?}");
}

#[test]
fn estimated_origin_slope_improves_with_sample_size() {
    let model = UtilityModel::binary_rc(2);
    let mu = [1.0, -2.0];
    let dists = Dists::new(
        EtaDist::normal(mu.to_vec(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
        NoiseDist::LogisticDiff { xi: 0.0 },
    );
    let x_law = EtaDist::normal(vec![0.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let kcfg = KernelConfig::default();
    let err = |n: usize| {
        (0..3)
            .map(|s| {
                let sample = simulate_cross_section(&model, &dists, &x_law, n, 300 + s).unwrap();
                let fit = &local_linear_fit(&sample, &[0.0, 0.0], &kcfg).unwrap()[0];
                (0..2).map(|k| (fit.slope[k] - 0.25 * mu[k]).powi(2)).sum::<f64>().sqrt()
            })
            .sum::<f64>()
            / 3.0
    };
    let errs: Vec<f64> = [10_000, 100_000, 1_000_000].into_iter().map(err).collect();
    assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
}
