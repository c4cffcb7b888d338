//! Worked examples checked against values computed independently here:
//! closed forms, hand differentiation, simple quadrature and simulation.

use choice_lab::choiceprob::{
    binary_choice_prob, cond_choice_prob, logit_jacobian, logit_kernel, num_grad, StepRule,
};
use choice_lab::controlfn::{cond_prob_xw, ScalarLaw, TriangularDgp};
use choice_lab::estimate::{local_linear, simulate_cross_section, KernelKind};
use choice_lab::identities::{
    binary_prob_grad, choice_prob_jacobian, thm1_rhs_analytic, thm2_rhs, thm4_rhs,
    weighted_avg_derivative, WeightFn,
};
use choice_lab::panel::{construct_equivalent_linear, PanelDgp, PanelXLaw};
use choice_lab::report::CheckContext;
use choice_lab::rng::CounterRng;
use choice_lab::{Dists, EtaDist, Expr, IntegrationSpec, ModelDims, NoiseDist, UtilityModel};

fn lambda(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

fn lambda_prime(t: f64) -> f64 {
    let s = lambda(t);
    s * (1.0 - s)
}

fn identity(d: usize) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

#[test]
fn tanh_model_gradient_at_zero_is_the_coefficient() {
    let m = UtilityModel::general(
        ModelDims::binary(1),
        1,
        vec![Expr::sum(vec![Expr::tanh(Expr::product(vec![Expr::eta(0), Expr::x(0)])), Expr::V])],
    )
    .unwrap();
    for eta in [-1.3, 0.4, 2.5] {
        let g = m.grad_x_delta(&[0.0], &[eta], 0.2).unwrap()[0];
        let h = 1e-6;
        let fd = (m.eval_delta(&[h], &[eta], 0.2).unwrap() - m.eval_delta(&[-h], &[eta], 0.2).unwrap())
            / (2.0 * h);
        assert!((g - eta).abs() < 1e-14);
        assert!((fd - eta).abs() < 1e-8);
    }
}

#[test]
fn shifted_logistic_density_at_zero() {
    let e = std::f64::consts::E;
    let want = e / ((1.0 + e) * (1.0 + e));
    let got = NoiseDist::LogisticDiff { xi: 1.0 }.density_v(0.0, &[]);
    assert!((got - want).abs() < 1e-15);
    assert!((want - 0.196612).abs() < 1e-6);
}

#[test]
fn gumbel_difference_is_logistic() {
    let n = 40_000;
    let below = (0..n)
        .filter(|&i| {
            let mut rng = CounterRng::stream(11, "oracle_gumbel", i);
            let v = NoiseDist::IidGumbel.sample_vector(&[], 2, &mut rng);
            v[0] - v[1] <= 0.0
        })
        .count();
    let frac = below as f64 / n as f64;
    assert!((frac - 0.5).abs() <= 3.0 / (n as f64).sqrt(), "{frac}");
    let below_one = (0..n)
        .filter(|&i| {
            let mut rng = CounterRng::stream(12, "oracle_gumbel", i);
            let v = NoiseDist::IidGumbel.sample_vector(&[], 2, &mut rng);
            v[0] - v[1] <= 1.0
        })
        .count() as f64
        / n as f64;
    let want = lambda(1.0);
    let se = (want * (1.0 - want) / n as f64).sqrt();
    assert!((below_one - want).abs() <= 4.0 * se);
}

#[test]
fn eta_shifted_noise_centres_on_the_loading() {
    let noise = NoiseDist::eta_shifted(NoiseDist::Gaussian { mean: 0.0, sd: 1.0 }, vec![0.5, -2.0]);
    let eta = [1.2, 0.3];
    let n = 20_000;
    let mean = (0..n)
        .map(|i| noise.sample_scalar(&eta, &mut CounterRng::stream(5, "oracle_shift", i)))
        .sum::<f64>()
        / n as f64;
    let want = 0.5 * 1.2 - 2.0 * 0.3;
    assert!((mean - want).abs() <= 4.0 / (n as f64).sqrt());
}

#[test]
fn logit_kernel_values() {
    let u = [1.0, 2.0, 3.0];
    let denom: f64 = u.iter().map(|v: &f64| v.exp()).sum();
    let p = logit_kernel(&u);
    for (pi, ui) in p.iter().zip(&u) {
        assert!((pi - ui.exp() / denom).abs() < 1e-15);
    }
    for (pi, want) in p.iter().zip([0.090031, 0.244728, 0.665241]) {
        assert!((pi - want).abs() < 1e-6);
    }
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
}

#[test]
fn logit_jacobian_at_equal_utilities() {
    let jac = logit_jacobian(&[0.0, 0.0, 0.0]);
    let third = 1.0 / 3.0;
    assert!((jac[0][0] - third * (2.0 * third)).abs() < 1e-15);
    assert!((jac[0][1] + third * third).abs() < 1e-15);
    assert!((jac[0][0] - 2.0 / 9.0).abs() < 1e-15);
}

#[test]
fn gaussian_noise_symmetric_probabilities() {
    let integ = IntegrationSpec::monte_carlo(100_000, 9);
    let p = cond_choice_prob(&[0.0, 0.0], &NoiseDist::Gaussian { mean: 0.0, sd: 1.0 }, &[], &integ);
    assert!((p.value[0] - 0.5).abs() <= 3.0 * p.mc_se[0], "{:?}", p);
    assert!(p.mc_se[0] > 0.0);
}

#[test]
fn monte_carlo_matches_quadrature_scalar_design() {
    let model = UtilityModel::binary_rc(1);
    let dists = Dists::new(EtaDist::normal(vec![1.0], vec![vec![1.0]]), NoiseDist::LogisticDiff { xi: 0.0 });
    let mc = binary_choice_prob(&model, &dists, &[1.0], &IntegrationSpec::monte_carlo(200_000, 4)).unwrap();
    let gh = binary_choice_prob(&model, &dists, &[1.0], &IntegrationSpec::gauss_hermite(30)).unwrap();
    assert!((mc.value[0] - gh.value[0]).abs() <= 3.0 * mc.mc_se[0]);
    // Independent trapezoid integral of Λ(η) φ(η − 1).
    let h = 1e-3;
    let trap: f64 = (-12_000..=12_000)
        .map(|k| {
            let e = 1.0 + k as f64 * h;
            lambda(e) * (-(e - 1.0) * (e - 1.0) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt() * h
        })
        .sum();
    assert!((gh.value[0] - trap).abs() < 1e-9);
}

#[test]
fn chain_rule_derivative() {
    let d = num_grad(|x| lambda(2.0 * x[0]), &[0.0], StepRule::CLOSED_FORM).unwrap();
    assert!((d.value[0][0] - 0.5).abs() < 1e-7);
}

#[test]
fn point_mass_logit_structural_derivative() {
    let model = UtilityModel::binary_rc(2);
    let beta = vec![1.0, -2.0];
    let dists = Dists::new(EtaDist::PointMass(beta.clone()), NoiseDist::LogisticDiff { xi: 0.0 });
    let integ = IntegrationSpec::gauss_hermite(10);
    let r = thm1_rhs_analytic(&model, &dists, &[0.0, 0.0], &integ).unwrap();
    assert!((r.value[0] - 0.25).abs() < 1e-15 && (r.value[1] + 0.5).abs() < 1e-15);
    let x = [0.7, 0.2];
    let t = beta[0] * x[0] + beta[1] * x[1];
    let r = thm1_rhs_analytic(&model, &dists, &x, &integ).unwrap();
    for k in 0..2 {
        assert!((r.value[k] - beta[k] * lambda_prime(t)).abs() < 1e-15);
    }
}

#[test]
fn gaussian_noise_origin_derivative() {
    let model = UtilityModel::binary_rc(2);
    let mu = vec![1.0, -2.0];
    let dists = Dists::new(
        EtaDist::normal(mu.clone(), identity(2)),
        NoiseDist::Gaussian { mean: 0.0, sd: 1.0 },
    );
    let r = thm2_rhs(&model, &dists, &[0.0, 0.0], &IntegrationSpec::gauss_hermite(12)).unwrap();
    let phi0 = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    assert!((phi0 - 0.398942).abs() < 1e-6);
    for k in 0..2 {
        assert!((r.value[k] - phi0 * mu[k]).abs() < 1e-12);
    }
}

#[test]
fn index_model_derivative_ratio() {
    let beta0 = vec![2.0, 1.0];
    let link = Expr::sigmoid(Expr::sum(vec![Expr::product(vec![Expr::eta(0), Expr::Index]), Expr::eta(1)]));
    let model = UtilityModel::index(beta0, link, 2).unwrap();
    let dists = Dists::new(
        EtaDist::normal(vec![1.0, 0.2], vec![vec![0.3, 0.1], vec![0.1, 0.5]]),
        NoiseDist::LogisticDiff { xi: 0.3 },
    );
    for x in [[0.0, 0.0], [0.4, -0.7], [-1.0, 0.5]] {
        let g = binary_prob_grad(&model, &dists, &x, &IntegrationSpec::gauss_hermite(16)).unwrap();
        let ratio = g.value[0][0] / g.value[0][1];
        assert!((ratio - 2.0).abs() < 1e-6, "{ratio}");
    }
}

#[test]
fn two_alternatives_reduce_to_the_binary_identity() {
    let xi = [0.4, -0.3];
    let multi = UtilityModel::linear_rc(xi.to_vec(), 2).unwrap();
    let eta = EtaDist::normal(vec![1.0, -0.5], vec![vec![0.5, 0.1], vec![0.1, 0.3]]);
    let mdists = Dists::new(eta.clone(), NoiseDist::IidGumbel);
    let binary = UtilityModel::binary_rc(2);
    let bdists = Dists::new(eta, NoiseDist::LogisticDiff { xi: xi[0] - xi[1] });
    let integ = IntegrationSpec::gauss_hermite(16);
    let x1 = [0.3, -0.6];
    let bundle = [x1[0], x1[1], 0.0, 0.0];
    let m = thm4_rhs(&multi, &mdists, &bundle, &integ).unwrap();
    let b = thm2_rhs(&binary, &bdists, &x1, &integ).unwrap();
    // Row 1 of the flattened Jacobian, columns of x^1.
    for c in 0..2 {
        assert!((m.value[c] - b.value[c]).abs() < 1e-12);
    }
    let pm = choice_prob_jacobian(&multi, &mdists, &bundle, &integ).unwrap();
    assert!((pm.value[0][0] - b.value[0]).abs() < 1e-6);
}

#[test]
fn two_alternative_origin_case() {
    let multi = UtilityModel::linear_rc(vec![0.0, 0.0], 2).unwrap();
    let mu = vec![1.5, -0.5];
    let dists = Dists::new(EtaDist::normal(mu.clone(), vec![vec![1.0, 0.0], vec![0.0, 2.0]]), NoiseDist::IidGumbel);
    let j = choice_prob_jacobian(&multi, &dists, &[0.0; 4], &IntegrationSpec::gauss_hermite(12)).unwrap();
    for c in 0..2 {
        assert!((j.value[0][c] - 0.25 * mu[c]).abs() < 1e-8);
    }
}

#[test]
fn weighted_average_with_unit_weight() {
    let model = UtilityModel::binary_rc(2);
    let beta = vec![1.0, -0.5];
    let xi = 0.3;
    let dists = Dists::new(EtaDist::PointMass(beta.clone()), NoiseDist::LogisticDiff { xi });
    let x_law = EtaDist::normal(vec![0.0, 0.0], identity(2));
    let ctx = CheckContext::new(IntegrationSpec::monte_carlo(50_000, 3));
    let rep = weighted_avg_derivative(&model, &dists, &WeightFn::Constant(1.0), &x_law, 5_000, &ctx).unwrap();
    // β'X ~ N(0, |β|²): E[Λ'(β'X − ξ)] by the trapezoid rule. P = 1 − F_v(−β'x)
    // with v = ξ + logistic, so the density enters at −β'x − ξ.
    let s = (beta[0] * beta[0] + beta[1] * beta[1]).sqrt();
    let h = 1e-3;
    let e: f64 = (-10_000..=10_000)
        .map(|k| {
            let z = k as f64 * h;
            lambda_prime(s * z + xi) * (-z * z / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt() * h
        })
        .sum();
    for (k, row) in rep.rows.iter().enumerate() {
        let want = beta[k] * e;
        assert!((row.rhs - want).abs() <= 3.0 * row.mc_se + 1e-3 * want.abs(), "{row:?} {want}");
        assert!((row.lhs - want).abs() <= 3.0 * row.mc_se + 1e-3 * want.abs(), "{row:?} {want}");
    }
}

#[test]
fn control_function_probabilities_monte_carlo_vs_quadrature() {
    let dgp = TriangularDgp {
        instrument: ScalarLaw::Normal { mean: 0.0, sd: 1.0 },
        control: ScalarLaw::Normal { mean: 0.0, sd: 1.0 },
        first_stage: vec![1.0],
        eta_mean: vec![1.0],
        gamma: vec![0.8],
        eta_cov: vec![vec![0.5]],
        noise: NoiseDist::LogisticDiff { xi: 0.0 },
        noise_w_shift: Vec::new(),
        common_support: true,
    };
    let model = UtilityModel::binary_rc(1);
    for (x, w) in [(0.5, -1.0), (-0.3, 0.7)] {
        let mc = cond_prob_xw(&dgp, &model, &[x], w, &IntegrationSpec::monte_carlo(100_000, 8)).unwrap();
        let gh = cond_prob_xw(&dgp, &model, &[x], w, &IntegrationSpec::gauss_hermite(20)).unwrap();
        assert!((mc.value[0] - gh.value[0]).abs() <= 3.0 * mc.mc_se[0]);
    }
}

#[test]
fn linear_panel_construction_is_exact() {
    let model = UtilityModel::binary_rc(1);
    let dgp = PanelDgp::new(
        PanelXLaw::Uniform { lo: -1.0, hi: 1.0 },
        vec![1.0],
        NoiseDist::Gaussian { mean: 0.0, sd: 1.0 },
    )
    .with_eta_cov(vec![vec![0.25]])
    .with_alpha(vec![0.5], 0.5)
    .with_time_invariant_noise();
    let eq = construct_equivalent_linear(&dgp, &model, 5_000, 2).unwrap();
    assert_eq!(eq.mismatches, 0);
    assert!(eq.max_rel_err <= 1e-12);
}

#[test]
fn point_mass_logit_sample_matches_binned_probabilities() {
    let model = UtilityModel::binary_rc(1);
    let dists = Dists::new(EtaDist::PointMass(vec![1.5]), NoiseDist::LogisticDiff { xi: 0.0 });
    let x_law = EtaDist::normal(vec![0.0], vec![vec![1.0]]);
    let s = simulate_cross_section(&model, &dists, &x_law, 100_000, 21).unwrap();
    for (lo, hi) in [(-1.0, -0.8), (-0.1, 0.1), (0.6, 0.8)] {
        let bin: Vec<usize> = (0..s.len()).filter(|&i| s.x[i][0] >= lo && s.x[i][0] < hi).collect();
        let n = bin.len() as f64;
        let phat = bin.iter().map(|&i| s.y[i] as f64).sum::<f64>() / n;
        let want = bin.iter().map(|&i| lambda(1.5 * s.x[i][0])).sum::<f64>() / n;
        let se = (want * (1.0 - want) / n).sqrt();
        assert!((phat - want).abs() <= 4.0 * se, "{lo}: {phat} vs {want}");
    }
}

#[test]
fn noiseless_local_linear_slope_bias_is_quadratic_in_bandwidth() {
    // Grid data from P(x) = Λ(2x − 0.5); the slope error at x0 is O(b²).
    let xs: Vec<Vec<f64>> = (0..=4000).map(|i| vec![-2.0 + i as f64 * 1e-3]).collect();
    let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![lambda(2.0 * x[0] - 0.5)]).collect();
    let x0 = [0.1];
    let truth = 2.0 * lambda_prime(2.0 * x0[0] - 0.5);
    let err = |b: f64| {
        let f = local_linear(&xs, &ys, &x0, &[b], KernelKind::Epanechnikov).unwrap();
        (f[0].slope[0] - truth).abs()
    };
    let (e1, e2) = (err(0.2), err(0.1));
    assert!(e2 < e1);
    let ratio = e1 / e2;
    assert!((3.0..5.0).contains(&ratio), "{ratio}");
}

#[test]
fn narrower_bandwidth_has_larger_standard_error() {
    let model = UtilityModel::binary_rc(1);
    let dists = Dists::new(EtaDist::PointMass(vec![1.0]), NoiseDist::LogisticDiff { xi: 0.0 });
    let x_law = EtaDist::normal(vec![0.0], vec![vec![1.0]]);
    let s = simulate_cross_section(&model, &dists, &x_law, 50_000, 4).unwrap();
    let ys: Vec<Vec<f64>> = s.y.iter().map(|y| vec![*y as f64]).collect();
    let fit = |b: f64| local_linear(&s.x, &ys, &[0.0], &[b], KernelKind::Gaussian).unwrap().remove(0);
    let (wide, narrow) = (fit(0.4), fit(0.1));
    assert!(narrow.slope_se[0] > wide.slope_se[0]);
    assert!(narrow.level_se > wide.level_se);
    assert!(narrow.n_eff < wide.n_eff);
}

#[test]
fn counter_streams_are_reproducible_and_distinct() {
    let a = CounterRng::stream(1, "x", 3);
    let b = CounterRng::stream(1, "x", 3);
    let c = CounterRng::stream(1, "y", 3);
    let d = CounterRng::stream(2, "x", 3);
    assert_eq!(a.at(0), b.at(0));
    assert_ne!(a.at(0), c.at(0));
    assert_ne!(a.at(0), d.at(0));
}
