//! Cross-section derivative identities: structural averages computed from the
//! model, compared with numerically differentiated choice probabilities.

use serde::{Deserialize, Serialize};

use crate::choiceprob::{
    binary_prob_at, check_dists, check_x, draw_indices, kernel_jacobian, kernel_probs,
    logit_kernel, num_grad_prob, num_hessian_prob, num_jacobian_prob, require_additive_binary,
    require_multinomial, Derivative, IntegrationSpec, StepRule,
};
use crate::distributions::{Dists, EtaDist, NoiseDist};
use crate::error::{Error, Result};
use crate::model::{dot, Family, UtilityModel};
use crate::numeric::{gauss_hermite, normal_pdf, unsigned_angle, NodeSet, VecEstimate};
use crate::report::{CheckContext, Criterion, DerivativeReport, Row};
use crate::rng::CounterRng;

/// Default grid: 5 points per dimension on `[-1.5, 1.5]`.
pub fn default_grid(d: usize) -> Vec<Vec<f64>> {
    let pts = [-1.5, -0.75, 0.0, 0.75, 1.5];
    let mut grid = vec![Vec::new()];
    for _ in 0..d {
        grid = grid
            .into_iter()
            .flat_map(|g| {
                pts.iter().map(move |p| {
                    let mut h = g.clone();
                    h.push(*p);
                    h
                })
            })
            .collect();
    }
    grid
}

/// Gaussian smoothing kernel `K_b(t) = φ(t/b)/b`.
pub fn gaussian_kernel(t: f64, b: f64) -> f64 {
    normal_pdf(t / b) / b
}

/// Rule-of-thumb bandwidth `1.06 σ n^{-1/5}`.
pub fn silverman(sd: f64, n: usize) -> f64 {
    1.06 * sd * (n as f64).powf(-0.2)
}

fn hypot_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x.hypot(*y)).collect()
}

/// `∂x P(x)` by central differences of the integrated probability, with the
/// same η nodes in every perturbed evaluation.
pub fn binary_prob_grad(
    model: &UtilityModel,
    dists: &Dists,
    x: &[f64],
    integ: &IntegrationSpec,
) -> Result<Derivative> {
    require_additive_binary(model, "binary_prob_grad")?;
    check_x(model, x)?;
    check_dists(model, dists)?;
    prob_grad_on(model, dists, x, &dists.eta.nodes(integ)?)
}

fn prob_grad_on(model: &UtilityModel, dists: &Dists, x: &[f64], nodes: &NodeSet) -> Result<Derivative> {
    num_grad_prob(nodes, x, StepRule::for_nodes(nodes), |x, eta| {
        binary_prob_at(model, &dists.noise, x, eta)
    })
}

/// `∫ ∂x h(x, η) f_v(−h(x, η) | η) F_η(dη)`.
pub fn thm2_rhs(
    model: &UtilityModel,
    dists: &Dists,
    x: &[f64],
    integ: &IntegrationSpec,
) -> Result<VecEstimate> {
    require_additive_binary(model, "thm2_rhs")?;
    check_x(model, x)?;
    check_dists(model, dists)?;
    Ok(thm2_on(model, dists, x, &dists.eta.nodes(integ)?))
}

fn thm2_on(model: &UtilityModel, dists: &Dists, x: &[f64], nodes: &NodeSet) -> VecEstimate {
    nodes.expect_vec(x.len(), |eta| {
        let (h, g) = model.h_and_grad(x, eta);
        let f = dists.noise.density_v(-h, eta);
        g.into_iter().map(|gi| gi * f).collect()
    })
}

/// `E[∂x δ | δ = 0] f_δ(0)` through the change of variables `v* = −h(x, η)`:
/// conditional on η the event `δ = 0` is the single point `v*`, whose density
/// is `f_v(v* | η) / ∂v δ` with `∂v δ = 1`.
pub fn thm1_rhs_analytic(
    model: &UtilityModel,
    dists: &Dists,
    x: &[f64],
    integ: &IntegrationSpec,
) -> Result<VecEstimate> {
    require_additive_binary(model, "thm1_rhs")?;
    check_x(model, x)?;
    check_dists(model, dists)?;
    Ok(analytic_on(model, dists, x, &dists.eta.nodes(integ)?))
}

fn analytic_on(model: &UtilityModel, dists: &Dists, x: &[f64], nodes: &NodeSet) -> VecEstimate {
    nodes.expect_vec(x.len(), |eta| {
        let v_star = -model.canonical_h(x, eta).expect("checked binary additive model");
        let f = dists.noise.density_v(v_star, eta);
        let g = model
            .grad_x_delta(x, eta, v_star)
            .expect("checked binary additive model");
        g.into_iter().map(|gi| gi * f).collect()
    })
}

/// Kernel-conditioned estimate `E[∂x δ · K_b(δ)]` from joint draws of
/// `(η, v)`. Returns the estimate and the bandwidth used; without an explicit
/// bandwidth the rule `1.06 σ̂_δ n^{-1/5}` applies.
pub fn thm1_rhs_kernel(
    model: &UtilityModel,
    dists: &Dists,
    x: &[f64],
    integ: &IntegrationSpec,
    bandwidth: Option<f64>,
) -> Result<(VecEstimate, f64)> {
    require_additive_binary(model, "thm1_rhs")?;
    check_x(model, x)?;
    check_dists(model, dists)?;
    if let Some(b) = bandwidth {
        if !(b > 0.0) {
            return Err(Error::config("bandwidth", "must be positive"));
        }
    }
    let joint = joint_draws(dists, integ)?;
    Ok(kernel_on(model, x, &joint, bandwidth))
}

/// Joint draws of `(η, v)` as points `(η_1, …, η_m, v)`.
fn joint_draws(dists: &Dists, integ: &IntegrationSpec) -> Result<NodeSet> {
    let sampler = dists.eta.sampler()?;
    let m = dists.eta.dim();
    let mut flat = Vec::with_capacity(integ.draws * (m + 1));
    for i in 0..integ.draws {
        let mut rng = CounterRng::stream(integ.seed, "thm1_joint", i as u64);
        let eta = sampler.draw(&mut rng);
        let v = dists.noise.sample_scalar(&eta, &mut rng);
        flat.extend_from_slice(&eta);
        flat.push(v);
    }
    Ok(NodeSet::monte_carlo(m + 1, flat))
}

fn kernel_on(model: &UtilityModel, x: &[f64], joint: &NodeSet, bandwidth: Option<f64>) -> (VecEstimate, f64) {
    let split = |p: &[f64]| {
        let (eta, v) = p.split_at(p.len() - 1);
        (eta.to_vec(), v[0])
    };
    let b = match bandwidth {
        Some(b) => b,
        None => {
            let m = joint.expect_vec(2, |p| {
                let (eta, v) = split(p);
                let d = model.h_and_grad(x, &eta).0 + v;
                vec![d, d * d]
            });
            let sd = (m.value[1] - m.value[0] * m.value[0]).max(0.0).sqrt();
            silverman(sd, joint.len())
        }
    };
    let est = joint.expect_vec(x.len(), |p| {
        let (eta, v) = split(p);
        let d = model.eval_delta(x, &eta, v).expect("checked binary model");
        let k = gaussian_kernel(d, b);
        let g = model.grad_x_delta(x, &eta, v).expect("checked binary model");
        g.into_iter().map(|gi| gi * k).collect()
    });
    (est, b)
}

/// The expectation the kernel path estimates, `E[∂x δ · K_b(δ)]`, computed
/// with the disturbance integrated by quadrature:
/// `E_η[∂x h · E_s f_v(−h − b s | η)]` with `s ~ N(0, 1)`.
pub fn thm1_rhs_smoothed(
    model: &UtilityModel,
    dists: &Dists,
    x: &[f64],
    integ: &IntegrationSpec,
    b: f64,
) -> Result<VecEstimate> {
    require_additive_binary(model, "thm1_rhs")?;
    check_x(model, x)?;
    check_dists(model, dists)?;
    if !(b > 0.0) {
        return Err(Error::config("bandwidth", "must be positive"));
    }
    let (s, w) = gauss_hermite(48);
    let nodes = dists.eta.nodes(integ)?;
    Ok(nodes.expect_vec(x.len(), |eta| {
        let (h, g) = model.h_and_grad(x, eta);
        let f: f64 = s
            .iter()
            .zip(&w)
            .map(|(si, wi)| wi * dists.noise.density_v(-h - b * si, eta))
            .sum();
        g.into_iter().map(|gi| gi * f).collect()
    }))
}

/// Both evaluation paths of the conditional-expectation formula.
#[derive(Clone, Debug, PartialEq)]
pub struct Thm1Rhs {
    pub analytic: VecEstimate,
    pub kernel: VecEstimate,
    pub bandwidth: f64,
}

pub fn thm1_rhs(
    model: &UtilityModel,
    dists: &Dists,
    x: &[f64],
    integ: &IntegrationSpec,
    bandwidth: Option<f64>,
) -> Result<Thm1Rhs> {
    let analytic = thm1_rhs_analytic(model, dists, x, integ)?;
    let (kernel, bandwidth) = thm1_rhs_kernel(model, dists, x, integ, bandwidth)?;
    Ok(Thm1Rhs {
        analytic,
        kernel,
        bandwidth,
    })
}

fn component(k: usize) -> String {
    format!("d{}", k + 1)
}

/// Numerical `∂x P(x)` against the conditional-expectation formula on a grid.
/// Kernel-path rows are reported for information.
pub fn verify_thm1(
    model: &UtilityModel,
    dists: &Dists,
    grid: &[Vec<f64>],
    ctx: &CheckContext,
) -> Result<DerivativeReport> {
    require_additive_binary(model, "verify_thm1")?;
    check_dists(model, dists)?;
    let nodes = dists.eta.nodes(&ctx.integ)?;
    let joint = joint_draws(dists, &ctx.integ)?;
    let mut rep = ctx.report("thm1");
    for x in grid {
        check_x(model, x)?;
        let lhs = prob_grad_on(model, dists, x, &nodes)?;
        let analytic = analytic_on(model, dists, x, &nodes);
        let (kernel, bandwidth) = kernel_on(model, x, &joint, None);
        let (l, lse) = lhs.row(0);
        let se = hypot_vec(lse, &analytic.se);
        for k in 0..x.len() {
            rep.push(Row::new(x, component(k), l[k], analytic.value[k], se[k], ctx.agree()));
        }
        for k in 0..x.len() {
            rep.push(Row::new(
                x,
                format!("{}_kernel", component(k)),
                l[k],
                kernel.value[k],
                lse[k].hypot(kernel.se[k]),
                Criterion::Info,
            ));
        }
        rep.note(format!("kernel bandwidth at {x:?}: {bandwidth}"));
    }
    Ok(rep.finish())
}

/// Numerical `∂x P(x)` against `E[∂x h f_v(−h | η)]` on a grid.
pub fn verify_thm2(
    model: &UtilityModel,
    dists: &Dists,
    grid: &[Vec<f64>],
    ctx: &CheckContext,
) -> Result<DerivativeReport> {
    require_additive_binary(model, "verify_thm2")?;
    check_dists(model, dists)?;
    let nodes = dists.eta.nodes(&ctx.integ)?;
    let mut rep = ctx.report("thm2");
    for x in grid {
        check_x(model, x)?;
        let lhs = prob_grad_on(model, dists, x, &nodes)?;
        let rhs = thm2_on(model, dists, x, &nodes);
        let (l, lse) = lhs.row(0);
        for k in 0..x.len() {
            rep.push(Row::new(
                x,
                component(k),
                l[k],
                rhs.value[k],
                lse[k].hypot(rhs.se[k]),
                ctx.agree(),
            ));
        }
    }
    Ok(rep.finish())
}

fn require_rc(model: &UtilityModel, op: &'static str) -> Result<()> {
    match model.family() {
        Family::BinaryRc => Ok(()),
        other => Err(Error::WrongFamily {
            op,
            expected: "binary_rc",
            family: other.tag().into(),
        }),
    }
}

/// At `x = 0`: `∂x P(0) = f_v(0) E[η]`, and the ratios
/// `∂_{x_j}P / ∂_{x_k}P = E[η_j] / E[η_k]` for `j < k`.
pub fn cor3_check(model: &UtilityModel, dists: &Dists, ctx: &CheckContext) -> Result<DerivativeReport> {
    require_rc(model, "cor3_check")?;
    check_dists(model, dists)?;
    if dists.noise.depends_on_eta() {
        return Ok(DerivativeReport::skipped(
            "cor3",
            ctx.meta.clone(),
            "the disturbance depends on the random coefficients",
        ));
    }
    let d = model.x_len();
    let x0 = vec![0.0; d];
    let mean = dists.eta.mean();
    let f0 = dists.noise.density_v(0.0, &mean);
    let nodes = dists.eta.nodes(&ctx.integ)?;
    let rule = StepRule::for_nodes(&nodes);
    let prob = |x: &[f64], eta: &[f64]| binary_prob_at(model, &dists.noise, x, eta);
    let lhs = num_grad_prob(&nodes, &x0, rule, prob)?;
    let (l, lse) = lhs.row(0);
    let mut rep = ctx.report("cor3");
    for k in 0..d {
        rep.push(Row::new(&x0, component(k), l[k], f0 * mean[k], lse[k], ctx.agree()));
    }
    for j in 0..d {
        for k in j + 1..d {
            if mean[k].abs() < 1e-12 || l[k].abs() <= 3.0 * lse[k] {
                rep.note(format!("ratio {}/{} not reported: denominator indistinguishable from zero", j + 1, k + 1));
                continue;
            }
            let ratio = l[j] / l[k];
            // Delta-method standard error from the per-node linearization
            // d_j − R d_k, evaluated on the same nodes.
            let se = if nodes.is_stochastic() {
                let steps: Vec<f64> = x0.iter().map(|xi| rule.step(*xi)).collect();
                let e = nodes.expect(|eta| {
                    let dj = (prob(&bump(&x0, j, steps[j]), eta) - prob(&bump(&x0, j, -steps[j]), eta))
                        / (2.0 * steps[j]);
                    let dk = (prob(&bump(&x0, k, steps[k]), eta) - prob(&bump(&x0, k, -steps[k]), eta))
                        / (2.0 * steps[k]);
                    dj - ratio * dk
                });
                e.se / l[k].abs()
            } else {
                0.0
            };
            rep.push(Row::new(
                &x0,
                format!("ratio_{}_{}", j + 1, k + 1),
                ratio,
                mean[j] / mean[k],
                se,
                ctx.agree(),
            ));
        }
    }
    Ok(rep.finish())
}

fn bump(x: &[f64], c: usize, d: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    y[c] += d;
    y
}

/// At `x = 0`: `∂²P/∂x∂x' = −E[ηη'] f_vv(0)`.
pub fn hessian_check(
    model: &UtilityModel,
    dists: &Dists,
    ctx: &CheckContext,
) -> Result<DerivativeReport> {
    require_rc(model, "hessian_check")?;
    check_dists(model, dists)?;
    if dists.noise.depends_on_eta() {
        return Ok(DerivativeReport::skipped(
            "hessian",
            ctx.meta.clone(),
            "the disturbance depends on the random coefficients",
        ));
    }
    let d = model.x_len();
    let x0 = vec![0.0; d];
    let mean = dists.eta.mean();
    let fvv = dists.noise.ddensity_v(0.0, &mean);
    let m2 = dists.eta.second_moment();
    let nodes = dists.eta.nodes(&ctx.integ)?;
    let lhs = num_hessian_prob(&nodes, &x0, StepRule::for_nodes(&nodes), |x, eta| {
        binary_prob_at(model, &dists.noise, x, eta)
    })?;
    let mut rep = ctx.report("hessian");
    for a in 0..d {
        for b in 0..d {
            rep.push(Row::new(
                &x0,
                format!("h{}{}", a + 1, b + 1),
                lhs.value[a][b],
                -m2[a][b] * fvv,
                lhs.se[a][b],
                ctx.agree(),
            ));
        }
    }
    rep.note(format!("f_vv(0) = {fvv}"));
    Ok(rep.finish())
}

/// `τ(u) = E_η[Pr(g(u, η) + v ≥ 0 | η)]` for the index family.
pub fn index_tau(
    model: &UtilityModel,
    dists: &Dists,
    u: f64,
    integ: &IntegrationSpec,
) -> Result<f64> {
    model.index_link(0.0, &vec![0.0; model.eta_dim()])?;
    check_dists(model, dists)?;
    let nodes = dists.eta.nodes(integ)?;
    Ok(nodes
        .expect(|eta| {
            let g = model.index_link(u, eta).expect("index family").0;
            dists.noise.survival_v(-g, eta)
        })
        .value)
}

/// Index models: `∂x P(x) = β0 τ_u(β0'x)`, with `τ_u` from one-dimensional
/// differentiation of the mixed index probability.
pub fn index_check(
    model: &UtilityModel,
    dists: &Dists,
    grid: &[Vec<f64>],
    ctx: &CheckContext,
) -> Result<DerivativeReport> {
    let beta0 = model
        .beta0()
        .ok_or_else(|| Error::WrongFamily {
            op: "index_check",
            expected: "index",
            family: model.family().tag().into(),
        })?
        .to_vec();
    require_additive_binary(model, "index_check")?;
    check_dists(model, dists)?;
    let nodes = dists.eta.nodes(&ctx.integ)?;
    let rule = StepRule::for_nodes(&nodes);
    let mut rep = ctx.report("index");
    for x in grid {
        check_x(model, x)?;
        let lhs = num_grad_prob(&nodes, x, rule, |x, eta| {
            binary_prob_at(model, &dists.noise, x, eta)
        })?;
        let u0 = dot(&beta0, x);
        let tau_u = num_grad_prob(&nodes, &[u0], rule, |u, eta| {
            let g = model.index_link(u[0], eta).expect("index family").0;
            dists.noise.survival_v(-g, eta)
        })?;
        let (l, lse) = lhs.row(0);
        let (t, tse) = (tau_u.value[0][0], tau_u.se[0][0]);
        for k in 0..x.len() {
            rep.push(Row::new(
                x,
                component(k),
                l[k],
                beta0[k] * t,
                lse[k].hypot(beta0[k].abs() * tse),
                ctx.agree(),
            ));
        }
        let norm = dot(l, l).sqrt();
        let noise = dot(lse, lse).sqrt();
        let angle = unsigned_angle(l, &beta0);
        let crit = if norm > 10.0 * noise.max(1e-10) {
            Criterion::AtMost(1e-3)
        } else {
            Criterion::Info
        };
        rep.push(Row::new(x, "angle", angle, 0.0, 0.0, crit));
    }
    Ok(rep.finish())
}

/// Name of flattened covariate slot `c`.
pub fn slot_name(model: &UtilityModel, c: usize) -> String {
    let dims = model.dims();
    if !model.is_binary() && dims.choice_specific {
        format!("x{}.{}", c / dims.covariates + 1, c % dims.covariates + 1)
    } else {
        format!("x{}", c + 1)
    }
}

/// `∂x P_j(x)` for all `j` by central differences with common nodes.
pub fn choice_prob_jacobian(
    model: &UtilityModel,
    dists: &Dists,
    x: &[f64],
    integ: &IntegrationSpec,
) -> Result<Derivative> {
    require_multinomial(model, "choice_prob_jacobian")?;
    check_x(model, x)?;
    check_dists(model, dists)?;
    let nodes = dists.eta.nodes(integ)?;
    jacobian_on(model, &dists.noise, &nodes, x)
}

pub(crate) fn jacobian_on(
    model: &UtilityModel,
    noise: &NoiseDist,
    nodes: &NodeSet,
    x: &[f64],
) -> Result<Derivative> {
    num_jacobian_prob(nodes, x, model.alternatives(), StepRule::for_nodes(nodes), |x, eta| {
        let (u, _) = model.utilities_and_grad(x, eta);
        kernel_probs(noise, &u, eta)
    })
}

/// `Σ_k p_jk(u | η) ∂x u_k` for one η, flattened `J × x_len`.
pub(crate) fn structural_jacobian(
    model: &UtilityModel,
    noise: &NoiseDist,
    x: &[f64],
    eta: &[f64],
) -> Vec<f64> {
    let (u, g) = model.utilities_and_grad(x, eta);
    let pjk = kernel_jacobian(noise, &u, eta);
    let j_n = u.len();
    let p = x.len();
    let mut out = vec![0.0; j_n * p];
    for j in 0..j_n {
        for k in 0..j_n {
            for c in 0..p {
                out[j * p + c] += pjk[j][k] * g[k][c];
            }
        }
    }
    out
}

/// The logit form `p̃_j (∂x u_j − Σ_k p̃_k ∂x u_k)` for one η.
fn logit_form(model: &UtilityModel, noise: &NoiseDist, x: &[f64], eta: &[f64]) -> Vec<f64> {
    let (mut u, g) = model.utilities_and_grad(x, eta);
    for (j, uj) in u.iter_mut().enumerate() {
        *uj += noise.shift(j, eta);
    }
    let pt = logit_kernel(&u);
    let p = x.len();
    let avg: Vec<f64> = (0..p)
        .map(|c| pt.iter().zip(&g).map(|(pk, gk)| pk * gk[c]).sum())
        .collect();
    let mut out = Vec::with_capacity(u.len() * p);
    for j in 0..u.len() {
        for c in 0..p {
            out.push(pt[j] * (g[j][c] - avg[c]));
        }
    }
    out
}

/// `E[Σ_k p_jk(u(x, η) | η) ∂x u_k(x, η)]`, flattened `J × x_len`.
pub fn thm4_rhs(
    model: &UtilityModel,
    dists: &Dists,
    x: &[f64],
    integ: &IntegrationSpec,
) -> Result<VecEstimate> {
    require_multinomial(model, "thm4_rhs")?;
    check_x(model, x)?;
    check_dists(model, dists)?;
    let nodes = dists.eta.nodes(integ)?;
    let k = model.alternatives() * x.len();
    Ok(nodes.expect_vec(k, |eta| structural_jacobian(model, &dists.noise, x, eta)))
}

/// Multinomial derivative identity at one covariate bundle; for Gumbel
/// disturbances the general form is also compared with the logit form.
pub fn thm4_check(
    model: &UtilityModel,
    dists: &Dists,
    x: &[f64],
    ctx: &CheckContext,
) -> Result<DerivativeReport> {
    let lhs = choice_prob_jacobian(model, dists, x, &ctx.integ)?;
    let nodes = dists.eta.nodes(&ctx.integ)?;
    let p = x.len();
    let j_n = model.alternatives();
    let rhs = nodes.expect_vec(2 * j_n * p, |eta| {
        let mut v = structural_jacobian(model, &dists.noise, x, eta);
        if matches!(dists.noise.base(), NoiseDist::IidGumbel) {
            v.extend(logit_form(model, &dists.noise, x, eta));
        } else {
            v.extend(std::iter::repeat_n(f64::NAN, j_n * p));
        }
        v
    });
    let mut rep = ctx.report("thm4");
    for j in 0..j_n {
        for c in 0..p {
            let i = j * p + c;
            let name = format!("dP{}/d{}", j + 1, slot_name(model, c));
            rep.push(Row::new(
                x,
                name.clone(),
                lhs.value[j][c],
                rhs.value[i],
                lhs.se[j][c].hypot(rhs.se[i]),
                ctx.agree(),
            ));
            let logit = rhs.value[j_n * p + i];
            if logit.is_finite() {
                rep.push(Row::new(
                    x,
                    format!("{name}_logit_form"),
                    rhs.value[i],
                    logit,
                    0.0,
                    Criterion::Agree(crate::report::Tolerance {
                        abs: 1e-12,
                        rel: 1e-10,
                        k_se: 0.0,
                    }),
                ));
            }
        }
    }
    Ok(rep.finish())
}

/// Linear random coefficients with choice-specific regressors:
/// `∂_{x^k} P_j = E[p_jk(u | η) η]`; at the origin with equal intercepts and
/// `v ⊥ η` this is `p_jk(ξ) E[η]`.
pub fn berry_deriv_check(
    model: &UtilityModel,
    dists: &Dists,
    x: &[f64],
    ctx: &CheckContext,
) -> Result<DerivativeReport> {
    let xi = match model.family() {
        Family::LinearRc { xi } if model.dims().choice_specific => xi.clone(),
        other => {
            return Err(Error::WrongFamily {
                op: "berry_deriv_check",
                expected: "linear_rc with choice-specific regressors",
                family: other.tag().into(),
            })
        }
    };
    let lhs = choice_prob_jacobian(model, dists, x, &ctx.integ)?;
    let nodes = dists.eta.nodes(&ctx.integ)?;
    let j_n = model.alternatives();
    let d = model.dims().covariates;
    let rhs = nodes.expect_vec(j_n * j_n * d, |eta| {
        let (u, _) = model.utilities_and_grad(x, eta);
        let pjk = kernel_jacobian(&dists.noise, &u, eta);
        let mut out = Vec::with_capacity(j_n * j_n * d);
        for row in &pjk {
            for pk in row {
                out.extend(eta.iter().map(|e| pk * e));
            }
        }
        out
    });
    let at_origin = x.iter().all(|v| *v == 0.0) && !dists.noise.depends_on_eta();
    let mean = dists.eta.mean();
    let p0 = kernel_jacobian(&dists.noise, &xi, &mean);
    let point_mass = matches!(dists.eta, EtaDist::PointMass(_));
    let mut rep = ctx.report("berry");
    for j in 0..j_n {
        for k in 0..j_n {
            let block: Vec<f64> = (0..d).map(|c| lhs.value[j][k * d + c]).collect();
            for c in 0..d {
                let slot = k * d + c;
                let name = format!("dP{}/d{}", j + 1, slot_name(model, slot));
                let r = (j * j_n + k) * d + c;
                rep.push(Row::new(
                    x,
                    name.clone(),
                    lhs.value[j][slot],
                    rhs.value[r],
                    lhs.se[j][slot].hypot(rhs.se[r]),
                    ctx.agree(),
                ));
                if at_origin {
                    rep.push(Row::new(
                        x,
                        format!("{name}_origin"),
                        lhs.value[j][slot],
                        p0[j][k] * mean[c],
                        lhs.se[j][slot],
                        ctx.agree(),
                    ));
                }
            }
            if point_mass && dot(&block, &block).sqrt() > 1e-8 {
                rep.push(Row::new(
                    x,
                    format!("angle_P{}_x{}", j + 1, k + 1),
                    unsigned_angle(&block, &mean),
                    0.0,
                    0.0,
                    Criterion::AtMost(1e-6),
                ));
            }
        }
    }
    Ok(rep.finish())
}

/// Weight functions for weighted average derivatives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightFn {
    Constant(f64),
    /// `1{‖x‖ ≤ radius}`.
    Ball { radius: f64 },
}

impl WeightFn {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            WeightFn::Constant(c) => *c,
            WeightFn::Ball { radius } => {
                if dot(x, x).sqrt() <= *radius {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// `E[w(X) ∂x P(X)] = E[w(X) f_v(−h(X, η) | η) ∂x h(X, η)]`. The left side
/// averages numerical derivatives of `P` over `x_draws` draws of `X`; the
/// right side is a joint simulation over `(X, η)` with `integ.draws` draws.
pub fn weighted_avg_derivative(
    model: &UtilityModel,
    dists: &Dists,
    weight: &WeightFn,
    x_law: &EtaDist,
    x_draws: usize,
    ctx: &CheckContext,
) -> Result<DerivativeReport> {
    require_additive_binary(model, "weighted_avg_derivative")?;
    check_dists(model, dists)?;
    x_law.validate()?;
    let d = model.x_len();
    if x_law.dim() != d {
        return Err(Error::dim("x_law", d, x_law.dim()));
    }
    let integ = &ctx.integ;
    let eta_nodes = dists.eta.nodes(integ)?;
    let rule = StepRule::for_nodes(&eta_nodes);
    let x_nodes = NodeSet::monte_carlo(d, x_law.sample(x_draws, integ.seed, "wavg_x")?.concat());
    let lhs = x_nodes.expect_vec(d, |x| {
        let w = weight.eval(x);
        if w == 0.0 {
            return vec![0.0; d];
        }
        let g = num_grad_prob(&eta_nodes, x, rule, |x, eta| {
            binary_prob_at(model, &dists.noise, x, eta)
        })
        .expect("validated inputs");
        g.value[0].iter().map(|v| w * v).collect()
    });
    let xs = x_law.sampler()?;
    let es = dists.eta.sampler()?;
    let rhs = draw_indices(integ.draws).expect_vec(d, |i| {
        let mut rng = CounterRng::stream(integ.seed, "wavg_joint", i[0] as u64);
        let x = xs.draw(&mut rng);
        let eta = es.draw(&mut rng);
        let w = weight.eval(&x);
        if w == 0.0 {
            return vec![0.0; d];
        }
        let (h, g) = model.h_and_grad(&x, &eta);
        let f = dists.noise.density_v(-h, &eta);
        g.into_iter().map(|gi| w * f * gi).collect()
    });
    let mut rep = ctx.report("wavg");
    for k in 0..d {
        rep.push(Row::new(
            &[],
            component(k),
            lhs.value[k],
            rhs.value[k],
            lhs.se[k].hypot(rhs.se[k]),
            ctx.agree(),
        ));
    }
    Ok(rep.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::logistic_pdf;

    fn logit_point(beta: Vec<f64>) -> (UtilityModel, Dists) {
        let d = beta.len();
        (
            UtilityModel::binary_rc(d),
            Dists::new(EtaDist::PointMass(beta), NoiseDist::LogisticDiff { xi: 0.0 }),
        )
    }

    #[test]
    fn grid_has_five_points_per_dimension() {
        let g = default_grid(2);
        assert_eq!(g.len(), 25);
        assert_eq!(g[0], vec![-1.5, -1.5]);
        assert_eq!(g[24], vec![1.5, 1.5]);
    }

    #[test]
    fn point_mass_logit_rhs() {
        let (m, dists) = logit_point(vec![1.0, -2.0]);
        let integ = IntegrationSpec::gauss_hermite(10);
        let r = thm1_rhs_analytic(&m, &dists, &[0.0, 0.0], &integ).unwrap();
        assert_eq!(r.value, vec![0.25, -0.5]);
        let x = [0.3, 0.4];
        let r = thm2_rhs(&m, &dists, &x, &integ).unwrap();
        let f = logistic_pdf(0.3 - 0.8);
        assert!((r.value[0] - f).abs() < 1e-15 && (r.value[1] + 2.0 * f).abs() < 1e-15);
    }

    #[test]
    fn far_shifted_noise_has_vanishing_rhs() {
        let m = UtilityModel::binary_rc(2);
        let dists = Dists::new(
            EtaDist::normal_identity(vec![1.0, -2.0]),
            NoiseDist::LogisticDiff { xi: 60.0 },
        );
        let r = thm2_rhs(&m, &dists, &[0.0, 0.0], &IntegrationSpec::gauss_hermite(10)).unwrap();
        assert!(r.value.iter().all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn bandwidth_must_be_positive() {
        let (m, dists) = logit_point(vec![1.0]);
        let integ = IntegrationSpec::monte_carlo(1000, 1);
        assert!(matches!(
            thm1_rhs_kernel(&m, &dists, &[0.0], &integ, Some(0.0)),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn cor3_skipped_when_noise_depends_on_eta() {
        let m = UtilityModel::binary_rc(1);
        let dists = Dists::new(
            EtaDist::normal_identity(vec![1.0]),
            NoiseDist::eta_shifted(NoiseDist::LogisticDiff { xi: 0.0 }, vec![0.5]),
        );
        let ctx = CheckContext::new(IntegrationSpec::gauss_hermite(10));
        let r = cor3_check(&m, &dists, &ctx).unwrap();
        assert_eq!(r.status.tag(), "skipped");
    }

    #[test]
    fn weight_functions() {
        assert_eq!(WeightFn::Constant(0.0).eval(&[3.0]), 0.0);
        let b = WeightFn::Ball { radius: 1.0 };
        assert_eq!(b.eval(&[0.6, 0.8]), 1.0);
        assert_eq!(b.eval(&[0.6, 0.81]), 0.0);
    }
}
