//! Choice probabilities, conditional choice kernels and their derivatives,
//! and finite-difference derivatives of integrated probabilities.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::distributions::{standard_normals, Dists, EtaDist, NoiseDist, MAX_QUADRATURE_DIM};
use crate::error::{Error, Result};
use crate::model::UtilityModel;
use crate::numeric::{
    gauss_hermite, gauss_hermite_tensor, gauss_legendre, logistic, logistic_pdf, normal_cdf,
    normal_pdf, NodeSet,
};
use crate::rng::CounterRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MonteCarlo,
    GaussHermite,
    /// Quadrature over `η` where it applies, Monte Carlo otherwise; the
    /// disturbance is always integrated in closed form.
    Hybrid,
}

fn default_draws() -> usize {
    100_000
}

fn default_nodes() -> usize {
    20
}

/// How expectations over heterogeneity are computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationSpec {
    pub method: Method,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_nodes")]
    pub nodes_per_dim: usize,
    #[serde(default)]
    pub seed: u64,
}

impl IntegrationSpec {
    pub fn monte_carlo(draws: usize, seed: u64) -> Self {
        Self {
            method: Method::MonteCarlo,
            draws,
            nodes_per_dim: default_nodes(),
            seed,
        }
    }

    pub fn gauss_hermite(nodes_per_dim: usize) -> Self {
        Self {
            method: Method::GaussHermite,
            draws: default_draws(),
            nodes_per_dim,
            seed: 0,
        }
    }

    pub fn hybrid(nodes_per_dim: usize, draws: usize, seed: u64) -> Self {
        Self {
            method: Method::Hybrid,
            draws,
            nodes_per_dim,
            seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.draws == 0 {
            return Err(Error::config("integration.draws", "must be positive"));
        }
        if !(5..=50).contains(&self.nodes_per_dim) {
            return Err(Error::config(
                "integration.nodes_per_dim",
                "must lie in 5..=50",
            ));
        }
        Ok(())
    }

    pub fn draws(&self) -> usize {
        self.draws
    }

    /// Draw count recorded in reports (zero for pure quadrature).
    pub fn reported_draws(&self) -> usize {
        match self.method {
            Method::GaussHermite => 0,
            _ => self.draws,
        }
    }

    pub(crate) fn wants_quadrature(&self, dim: usize, gaussian: bool) -> Result<bool> {
        self.validate()?;
        let feasible = gaussian && dim <= MAX_QUADRATURE_DIM;
        match self.method {
            Method::MonteCarlo => Ok(false),
            Method::Hybrid => Ok(feasible),
            Method::GaussHermite if feasible => Ok(true),
            Method::GaussHermite => Err(Error::UnsupportedMethod(format!(
                "Gauss-Hermite needs Gaussian heterogeneity of dimension at most \
                 {MAX_QUADRATURE_DIM}, got dimension {dim}"
            ))),
        }
    }

    /// Nodes per dimension when `eta` is to be integrated by quadrature.
    pub fn quadrature_nodes(&self, eta: &EtaDist) -> Result<Option<usize>> {
        if let EtaDist::PointMass(_) = eta {
            self.validate()?;
            return Ok(Some(1));
        }
        let q = self.wants_quadrature(eta.dim(), eta.is_gaussian_family())?;
        Ok(q.then_some(self.nodes_per_dim))
    }

    /// Nodes for `N(0, I_dim)`: a tensor Gauss–Hermite rule or Monte Carlo
    /// draws from streams tagged `tag`.
    pub fn standard_normal_nodes(&self, dim: usize, tag: &str) -> Result<NodeSet> {
        if dim == 0 {
            return Ok(NodeSet::point(Vec::new()));
        }
        if self.wants_quadrature(dim, true)? {
            return Ok(gauss_hermite_tensor(dim, self.nodes_per_dim));
        }
        let mut flat = Vec::with_capacity(dim * self.draws);
        for i in 0..self.draws {
            flat.extend(standard_normals(
                &mut CounterRng::stream(self.seed, tag, i as u64),
                dim,
            ));
        }
        Ok(NodeSet::monte_carlo(dim, flat))
    }
}

/// Equal-weight Monte Carlo nodes carrying only their draw index; integrands
/// open the stream for that index themselves.
pub fn draw_indices(n: usize) -> NodeSet {
    NodeSet::monte_carlo(1, (0..n).map(|i| i as f64).collect())
}

/// Probabilities with Monte Carlo standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbResult {
    pub value: Vec<f64>,
    pub mc_se: Vec<f64>,
    pub n_effective: usize,
}

/// Multinomial logit probabilities `e^{u_j} / Σ_k e^{u_k}`.
pub fn logit_kernel(u: &[f64]) -> Vec<f64> {
    let m = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = u.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `p_jk = p_j (1{j=k} − p_k)`.
pub fn logit_jacobian(u: &[f64]) -> Vec<Vec<f64>> {
    let p = logit_kernel(u);
    let j = p.len();
    (0..j)
        .map(|a| {
            let mut row: Vec<f64> = (0..j).map(|b| -p[a] * p[b]).collect();
            row[a] = p[a] * (1.0 - p[a]);
            row
        })
        .collect()
}

fn hermite_1d() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(64))
}

/// Nodes and weights on (0, 1) for integrals over a quantile variable.
fn unit_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| {
        let (x, w) = gauss_legendre(12);
        let panels = 48;
        let h = 1.0 / panels as f64;
        let mut xs = Vec::new();
        let mut ws = Vec::new();
        for p in 0..panels {
            let mid = (p as f64 + 0.5) * h;
            for (xi, wi) in x.iter().zip(&w) {
                xs.push(mid + 0.5 * h * xi);
                ws.push(0.5 * h * wi);
            }
        }
        (xs, ws)
    })
}

/// Utilities including the `η`-dependent location of each disturbance.
fn shifted(noise: &NoiseDist, u: &[f64], eta: &[f64]) -> Vec<f64> {
    match noise {
        NoiseDist::EtaShifted { .. } => u
            .iter()
            .enumerate()
            .map(|(j, x)| x + noise.shift(j, eta))
            .collect(),
        _ => u.to_vec(),
    }
}

/// Independent, identically distributed disturbances: `p_j` and `p_jk` by
/// integrating over the disturbance of alternative `j`.
fn iid_kernel(base: &NoiseDist, u: &[f64], with_jac: bool) -> (Vec<f64>, Option<Vec<Vec<f64>>>) {
    let j_n = u.len();
    // Each rule returns nodes `t` of v_j (standardized) with weights, plus the
    // CDF/density of the gap variable.
    let (ts, ws, scale): (Vec<f64>, &[f64], f64) = match base {
        NoiseDist::Gaussian { sd, .. } => {
            let (x, w) = hermite_1d();
            (x.clone(), w, *sd)
        }
        NoiseDist::LogisticDiff { .. } => {
            let (s, w) = unit_rule();
            (s.iter().map(|s| (s / (1.0 - s)).ln()).collect(), w, 1.0)
        }
        NoiseDist::IidGumbel | NoiseDist::EtaShifted { .. } => {
            unreachable!("handled by the caller")
        }
    };
    let (cdf, pdf): (fn(f64) -> f64, fn(f64) -> f64) = match base {
        NoiseDist::Gaussian { .. } => (normal_cdf, normal_pdf),
        _ => (logistic, logistic_pdf),
    };
    let mut p = vec![0.0; j_n];
    let mut jac = vec![vec![0.0; j_n]; j_n];
    for a in 0..j_n {
        for (t, w) in ts.iter().zip(ws) {
            let gaps: Vec<f64> = (0..j_n).map(|k| (u[a] - u[k]) / scale + t).collect();
            let cdfs: Vec<f64> = gaps.iter().map(|g| cdf(*g)).collect();
            let prod: f64 = (0..j_n).filter(|k| *k != a).map(|k| cdfs[k]).product();
            p[a] += w * prod;
            if with_jac {
                for k in (0..j_n).filter(|k| *k != a) {
                    let others: f64 = (0..j_n)
                        .filter(|l| *l != a && *l != k)
                        .map(|l| cdfs[l])
                        .product();
                    jac[a][k] -= w * pdf(gaps[k]) * others / scale;
                }
            }
        }
        if with_jac {
            jac[a][a] = -(0..j_n).filter(|k| *k != a).map(|k| jac[a][k]).sum::<f64>();
        }
    }
    (p, with_jac.then_some(jac))
}

/// Conditional choice probabilities `p_j(u | η)` by deterministic integration
/// over the disturbance.
pub fn kernel_probs(noise: &NoiseDist, u: &[f64], eta: &[f64]) -> Vec<f64> {
    let us = shifted(noise, u, eta);
    match noise.base() {
        NoiseDist::IidGumbel => logit_kernel(&us),
        base => iid_kernel(base, &us, false).0,
    }
}

/// `p_jk(u | η) = ∂p_j(u | η)/∂u_k`.
pub fn kernel_jacobian(noise: &NoiseDist, u: &[f64], eta: &[f64]) -> Vec<Vec<f64>> {
    let us = shifted(noise, u, eta);
    match noise.base() {
        NoiseDist::IidGumbel => logit_jacobian(&us),
        base => iid_kernel(base, &us, true).1.expect("jacobian requested"),
    }
}

/// `p_j(u | η)`: closed form for Gumbel disturbances, otherwise the Monte
/// Carlo frequency of each alternative being the argmax (ties go to the
/// lowest index).
pub fn cond_choice_prob(
    u: &[f64],
    noise: &NoiseDist,
    eta: &[f64],
    integ: &IntegrationSpec,
) -> ProbResult {
    let j_n = u.len();
    if let NoiseDist::IidGumbel = noise.base() {
        return ProbResult {
            value: logit_kernel(&shifted(noise, u, eta)),
            mc_se: vec![0.0; j_n],
            n_effective: 1,
        };
    }
    let est = draw_indices(integ.draws).expect_vec(j_n, |idx| {
        let mut rng = CounterRng::stream(integ.seed, "cond_choice", idx[0] as u64);
        let v = noise.sample_vector(eta, j_n, &mut rng);
        let mut best = 0;
        for k in 1..j_n {
            if u[k] + v[k] > u[best] + v[best] {
                best = k;
            }
        }
        let mut ind = vec![0.0; j_n];
        ind[best] = 1.0;
        ind
    });
    ProbResult {
        value: est.value,
        mc_se: est.se,
        n_effective: est.n,
    }
}

/// Binary choice probability given `η` at covariate `x`.
pub(crate) fn binary_prob_at(model: &UtilityModel, noise: &NoiseDist, x: &[f64], eta: &[f64]) -> f64 {
    let h = model.h_and_grad(x, eta).0;
    noise.survival_v(-h, eta)
}

pub(crate) fn require_additive_binary(model: &UtilityModel, op: &'static str) -> Result<()> {
    if !model.is_binary() {
        return Err(Error::WrongFamily {
            op,
            expected: "binary",
            family: model.family().tag().into(),
        });
    }
    if !model.is_additive() {
        return Err(Error::Unsupported(format!(
            "{op} needs a net utility additive in v"
        )));
    }
    Ok(())
}

pub(crate) fn require_multinomial(model: &UtilityModel, op: &'static str) -> Result<()> {
    if model.is_binary() {
        return Err(Error::WrongFamily {
            op,
            expected: "multinomial",
            family: model.family().tag().into(),
        });
    }
    Ok(())
}

pub(crate) fn check_x(model: &UtilityModel, x: &[f64]) -> Result<()> {
    if x.len() != model.x_len() {
        return Err(Error::dim("x", model.x_len(), x.len()));
    }
    Ok(())
}

pub(crate) fn check_dists(model: &UtilityModel, dists: &Dists) -> Result<()> {
    dists.validate(model.eta_dim())
}

/// `P(x) = E_η[1 − F_v(−h(x, η) | η)]`.
pub fn binary_choice_prob(
    model: &UtilityModel,
    dists: &Dists,
    x: &[f64],
    integ: &IntegrationSpec,
) -> Result<ProbResult> {
    require_additive_binary(model, "binary_choice_prob")?;
    check_x(model, x)?;
    check_dists(model, dists)?;
    let nodes = dists.eta.nodes(integ)?;
    let e = nodes.expect(|eta| binary_prob_at(model, &dists.noise, x, eta));
    Ok(ProbResult {
        value: vec![e.value],
        mc_se: vec![e.se],
        n_effective: e.n,
    })
}

/// `P_j(x) = ∫ p_j(u(x, η) | η) F_η(dη)` for every alternative.
pub fn choice_prob(
    model: &UtilityModel,
    dists: &Dists,
    x: &[f64],
    integ: &IntegrationSpec,
) -> Result<ProbResult> {
    require_multinomial(model, "choice_prob")?;
    check_x(model, x)?;
    check_dists(model, dists)?;
    let nodes = dists.eta.nodes(integ)?;
    let j_n = model.alternatives();
    let e = nodes.expect_vec(j_n, |eta| {
        let (u, _) = model.utilities_and_grad(x, eta);
        kernel_probs(&dists.noise, &u, eta)
    });
    Ok(ProbResult {
        value: e.value,
        mc_se: e.se,
        n_effective: e.n,
    })
}

/// Finite-difference step `h_i = scale · max(1, |x_i|)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRule {
    pub scale: f64,
}

impl StepRule {
    /// For probabilities integrated by Monte Carlo.
    pub const MONTE_CARLO: StepRule = StepRule { scale: 1e-3 };
    /// For closed forms and quadrature.
    pub const CLOSED_FORM: StepRule = StepRule { scale: 1e-5 };

    pub fn for_nodes(nodes: &NodeSet) -> StepRule {
        if nodes.is_stochastic() {
            Self::MONTE_CARLO
        } else {
            Self::CLOSED_FORM
        }
    }

    pub fn step(&self, xi: f64) -> f64 {
        self.scale * xi.abs().max(1.0)
    }

    fn steps(&self, x: &[f64]) -> Result<Vec<f64>> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config("step.scale", "must be positive and finite"));
        }
        x.iter()
            .map(|xi| {
                let h = self.step(*xi);
                let h2 = 0.5 * h;
                if xi + h2 == *xi || xi - h2 == *xi {
                    Err(Error::config("step", format!("step {h} underflows at x = {xi}")))
                } else {
                    Ok(h)
                }
            })
            .collect()
    }
}

/// Numerical derivative of an integrated quantity: row `r`, column `c` is
/// `∂ f_r / ∂ x_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Derivative {
    pub value: Vec<Vec<f64>>,
    /// Monte Carlo standard error, floored by the round-off bound of the
    /// difference quotient.
    pub se: Vec<Vec<f64>>,
    pub step: Vec<f64>,
    pub n: usize,
}

impl Derivative {
    /// The single row of a scalar function's derivative.
    pub fn row(&self, r: usize) -> (&[f64], &[f64]) {
        (&self.value[r], &self.se[r])
    }
}

fn perturbed(x: &[f64], c: usize, d: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    y[c] += d;
    y
}

/// Central-difference Jacobian of `E[f(x, node)]` with common nodes across
/// all perturbed evaluations. `f` returns `m` values per node.
pub fn num_jacobian_prob<F>(
    nodes: &NodeSet,
    x: &[f64],
    m: usize,
    rule: StepRule,
    f: F,
) -> Result<Derivative>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64> + Sync + Send,
{
    let p = x.len();
    let steps = rule.steps(x)?;
    let est = nodes.expect_vec(m * p + m, |node| {
        let mut out = vec![0.0; m * p + m];
        for c in 0..p {
            let h = steps[c];
            let up = f(&perturbed(x, c, h), node);
            let dn = f(&perturbed(x, c, -h), node);
            for r in 0..m {
                out[r * p + c] = (up[r] - dn[r]) / (2.0 * h);
            }
        }
        let base = f(x, node);
        for r in 0..m {
            out[m * p + r] = base[r].abs();
        }
        out
    });
    let mut value = vec![vec![0.0; p]; m];
    let mut se = vec![vec![0.0; p]; m];
    for r in 0..m {
        let scale = est.value[m * p + r].max(1.0);
        for c in 0..p {
            value[r][c] = est.value[r * p + c];
            let round_off = 4.0 * f64::EPSILON * scale / steps[c];
            se[r][c] = est.se[r * p + c].max(round_off);
        }
    }
    Ok(Derivative {
        value,
        se,
        step: steps,
        n: est.n,
    })
}

/// Gradient of a scalar `E[f(x, node)]`; see [`num_jacobian_prob`].
pub fn num_grad_prob<F>(nodes: &NodeSet, x: &[f64], rule: StepRule, f: F) -> Result<Derivative>
where
    F: Fn(&[f64], &[f64]) -> f64 + Sync + Send,
{
    num_jacobian_prob(nodes, x, 1, rule, |x, n| vec![f(x, n)])
}

/// Gradient of a plain function of `x`.
pub fn num_grad<F>(f: F, x: &[f64], rule: StepRule) -> Result<Derivative>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    num_grad_prob(&NodeSet::point(Vec::new()), x, rule, |x, _| f(x))
}

/// Central-difference Hessian of a scalar `E[f(x, node)]` with common nodes.
/// Returns the `p × p` matrix as a [`Derivative`] whose rows are Hessian rows.
pub fn num_hessian_prob<F>(nodes: &NodeSet, x: &[f64], rule: StepRule, f: F) -> Result<Derivative>
where
    F: Fn(&[f64], &[f64]) -> f64 + Sync + Send,
{
    let p = x.len();
    let steps = rule.steps(x)?;
    let second = |node: &[f64]| -> Vec<f64> {
        let f0 = f(x, node);
        let mut out = vec![0.0; p * p];
        for a in 0..p {
            let ha = steps[a];
            let up = f(&perturbed(x, a, ha), node);
            let dn = f(&perturbed(x, a, -ha), node);
            out[a * p + a] = (up - 2.0 * f0 + dn) / (ha * ha);
            for b in 0..a {
                let hb = steps[b];
                let mut y = x.to_vec();
                let mut corner = |sa: f64, sb: f64| {
                    y.copy_from_slice(x);
                    y[a] += sa * ha;
                    y[b] += sb * hb;
                    f(&y, node)
                };
                let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0)
                    + corner(-1.0, -1.0))
                    / (4.0 * ha * hb);
                out[a * p + b] = v;
                out[b * p + a] = v;
            }
        }
        out
    };
    let est = nodes.expect_vec(p * p + 1, |node| {
        let mut out = second(node);
        out.push(f(x, node).abs());
        out
    });
    let scale = est.value[p * p].max(1.0);
    let mut value = vec![vec![0.0; p]; p];
    let mut se = vec![vec![0.0; p]; p];
    for a in 0..p {
        for b in 0..p {
            let i = a * p + b;
            value[a][b] = est.value[i];
            let round_off = 16.0 * f64::EPSILON * scale / (steps[a] * steps[b]);
            se[a][b] = est.se[i].max(round_off);
        }
    }
    Ok(Derivative {
        value,
        se,
        step: steps,
        n: est.n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logit_kernel_examples() {
        assert_eq!(logit_kernel(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = logit_kernel(&[2f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = logit_kernel(&[1.0, 2.0, 3.0]);
        let e: Vec<f64> = [1f64, 2.0, 3.0].iter().map(|u| u.exp()).collect();
        let s: f64 = e.iter().sum();
        for (a, b) in p.iter().zip(&e) {
            assert!((a - b / s).abs() < 1e-15);
        }
        assert!((p[0] - 0.090031).abs() < 1e-6);
        assert!((p[1] - 0.244728).abs() < 1e-6);
        assert!((p[2] - 0.665241).abs() < 1e-6);
        let big = logit_kernel(&[1000.0, 0.0]);
        assert!(big[0] == 1.0 && big[1] >= 0.0);
    }

    #[test]
    fn logit_jacobian_examples() {
        let j = logit_jacobian(&[0.0, 0.0]);
        assert_eq!(j[0][0], 0.25);
        assert_eq!(j[0][1], -0.25);
        let j = logit_jacobian(&[0.0, 0.0, 0.0]);
        assert!((j[0][0] - 2.0 / 9.0).abs() < 1e-15);
        assert!((j[0][1] + 1.0 / 9.0).abs() < 1e-15);
        let j = logit_jacobian(&[0.3, -1.2, 2.0, 0.1]);
        for row in j {
            assert!(row.iter().sum::<f64>().abs() < 1e-14);
        }
    }

    #[test]
    fn gaussian_kernel_matches_bivariate_closed_form() {
        // Two alternatives: p_1 = Φ((u1 − u2)/(σ√2)).
        let noise = NoiseDist::Gaussian { mean: 0.3, sd: 1.5 };
        let u = [0.4, -0.2];
        let p = kernel_probs(&noise, &u, &[]);
        let want = normal_cdf(0.6 / (1.5 * 2f64.sqrt()));
        assert!((p[0] - want).abs() < 1e-10, "{} vs {want}", p[0]);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        let jac = kernel_jacobian(&noise, &u, &[]);
        let dens = normal_pdf(0.6 / (1.5 * 2f64.sqrt())) / (1.5 * 2f64.sqrt());
        assert!((jac[0][0] - dens).abs() < 1e-10);
        assert!((jac[0][1] + dens).abs() < 1e-10);
    }

    #[test]
    fn logistic_kernel_for_two_alternatives() {
        // Difference of two independent logistics at zero gap is symmetric.
        let noise = NoiseDist::LogisticDiff { xi: 0.0 };
        let p = kernel_probs(&noise, &[0.0, 0.0, 0.0], &[]);
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-10);
        }
        let u = [0.7, -0.1, 0.4];
        let jac = kernel_jacobian(&noise, &u, &[]);
        for a in 0..3 {
            for k in 0..3 {
                let h = 1e-5;
                let mut up = u;
                up[k] += h;
                let mut dn = u;
                dn[k] -= h;
                let fd = (kernel_probs(&noise, &up, &[])[a] - kernel_probs(&noise, &dn, &[])[a])
                    / (2.0 * h);
                assert!((fd - jac[a][k]).abs() < 1e-8, "{a}{k}: {fd} vs {}", jac[a][k]);
            }
        }
    }

    #[test]
    fn cond_choice_prob_examples() {
        let integ = IntegrationSpec::monte_carlo(20_000, 5);
        let p = cond_choice_prob(&[0.0; 4], &NoiseDist::IidGumbel, &[], &integ);
        assert_eq!(p.value, vec![0.25; 4]);
        let p = cond_choice_prob(&[2f64.ln(), 0.0], &NoiseDist::IidGumbel, &[], &integ);
        assert!((p.value[0] - 2.0 / 3.0).abs() < 1e-15);
        let g = NoiseDist::Gaussian { mean: 0.0, sd: 1.0 };
        let p = cond_choice_prob(&[0.0, 0.0], &g, &[], &integ);
        assert!((p.value[0] - 0.5).abs() <= 3.0 * p.mc_se[0]);
        assert!((p.value[0] + p.value[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn numerical_gradient_examples() {
        let d = num_grad(|x| logistic(x[0]), &[0.0], StepRule::CLOSED_FORM).unwrap();
        assert!((d.value[0][0] - 0.25).abs() < 1e-8);
        let d = num_grad(|_| 0.7, &[0.3, -2.0], StepRule::CLOSED_FORM).unwrap();
        assert_eq!(d.value[0], vec![0.0, 0.0]);
        let d = num_grad(|x| logistic(2.0 * x[0]), &[0.0], StepRule::CLOSED_FORM).unwrap();
        assert!((d.value[0][0] - 0.5).abs() < 1e-7);
        assert!(matches!(
            num_grad(|x| x[0], &[0.0], StepRule { scale: 0.0 }),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn numerical_hessian_of_quadratic() {
        let h = num_hessian_prob(
            &NodeSet::point(Vec::new()),
            &[0.5, -1.0],
            StepRule::MONTE_CARLO,
            |x, _| 3.0 * x[0] * x[0] - x[0] * x[1] + 0.5 * x[1] * x[1],
        )
        .unwrap();
        let want = [[6.0, -1.0], [-1.0, 1.0]];
        for a in 0..2 {
            for b in 0..2 {
                assert!((h.value[a][b] - want[a][b]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn quadrature_rejected_for_high_dimension() {
        let eta = EtaDist::normal_identity(vec![0.0; 4]);
        let integ = IntegrationSpec::gauss_hermite(10);
        assert!(matches!(
            integ.quadrature_nodes(&eta),
            Err(Error::UnsupportedMethod(_))
        ));
        let hybrid = IntegrationSpec::hybrid(10, 1000, 1);
        assert_eq!(hybrid.quadrature_nodes(&eta).unwrap(), None);
    }
}
