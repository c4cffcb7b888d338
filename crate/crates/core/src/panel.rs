//! Two-period panels with time-stationary heterogeneity: conditional choice
//! probabilities given both periods' regressors, derivative identities on the
//! diagonal `X1 = X2`, recovery of index coefficients up to scale, and the
//! observationally equivalent linear constructions off the diagonal.

use std::io::{self, Write};

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::choiceprob::{
    check_x, draw_indices, kernel_jacobian, kernel_probs, logit_kernel, num_jacobian_prob,
    require_additive_binary, require_multinomial, Derivative, IntegrationSpec, ProbResult,
    StepRule,
};
use crate::controlfn::{ks_p_value, ks_statistic, KsWitness};
use crate::distributions::{cov_matrix, standard_normals, NoiseDist};
use crate::error::{Error, Result};
use crate::identities::{gaussian_kernel, silverman, slot_name};
use crate::model::{dot, Family, UtilityModel};
use crate::numeric::{dominant_direction, psd_factor, unsigned_angle, NodeSet, VecEstimate};
use crate::report::{CheckContext, Criterion, DerivativeReport, Row, Tolerance};
use crate::rng::CounterRng;

/// Guard on `|X2 − X1|` below which a draw is excluded from the constructions.
pub const DIAGONAL_GUARD: f64 = 1e-10;

/// Joint law of `(X1_c, X2_c)` for every covariate slot `c`, independent
/// across slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PanelXLaw {
    /// Bivariate normal with common mean and sd and correlation `rho`.
    Gaussian { mean: f64, sd: f64, rho: f64 },
    /// Independent uniforms on `[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
}

impl PanelXLaw {
    fn validate(&self) -> Result<()> {
        match self {
            PanelXLaw::Gaussian { sd, rho, .. } => {
                if !(*sd > 0.0) {
                    return Err(Error::config("panel.x_law.sd", "must be positive"));
                }
                if !(rho.abs() < 1.0) {
                    return Err(Error::config("panel.x_law.rho", "must lie in (-1, 1)"));
                }
                Ok(())
            }
            PanelXLaw::Uniform { lo, hi } if !(hi > lo) => {
                Err(Error::config("panel.x_law", "need lo < hi"))
            }
            PanelXLaw::Uniform { .. } => Ok(()),
        }
    }

    fn draw_pair(&self, rng: &mut CounterRng) -> (f64, f64) {
        match self {
            PanelXLaw::Gaussian { mean, sd, rho } => {
                let a: f64 = StandardNormal.sample(rng);
                let b: f64 = StandardNormal.sample(rng);
                let c = (1.0 - rho * rho).sqrt();
                (mean + sd * a, mean + sd * (rho * a + c * b))
            }
            PanelXLaw::Uniform { lo, hi } => {
                let w = hi - lo;
                (lo + w * rng.uniform(), lo + w * rng.uniform())
            }
        }
    }
}

/// Two-period design. With `x̄ = (X1 + X2)/2`:
/// `η = μ + Γ x̄ + L z` and `α = γ'x̄ + σ_α z_α` are time invariant; `α` adds
/// to the net utility of a binary model and enters alternative `j` of a
/// multinomial model with loading `λ_j`; transitory disturbances are i.i.d.
/// over periods given `(η, α, X)` unless `time_invariant_noise` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelDgp {
    pub x_law: PanelXLaw,
    pub eta_mean: Vec<f64>,
    /// `Γ`, one row per heterogeneity coordinate; empty means zero.
    #[serde(default)]
    pub eta_load: Vec<Vec<f64>>,
    /// Covariance `L L'`; empty means a point mass at the mean.
    #[serde(default)]
    pub eta_cov: Vec<Vec<f64>>,
    /// `γ`; empty means zero.
    #[serde(default)]
    pub alpha_gamma: Vec<f64>,
    #[serde(default)]
    pub alpha_sd: f64,
    /// `λ`; empty means `(1, 0, …, 0)`.
    #[serde(default)]
    pub alpha_load: Vec<f64>,
    pub noise: NoiseDist,
    #[serde(default)]
    pub time_invariant_noise: bool,
}

/// Time-invariant heterogeneity at a node.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub eta: Vec<f64>,
    pub alpha: f64,
}

/// One simulated unit.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelUnit {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub latent: Latent,
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
}

impl PanelDgp {
    pub fn new(x_law: PanelXLaw, eta_mean: Vec<f64>, noise: NoiseDist) -> Self {
        Self {
            x_law,
            eta_mean,
            eta_load: Vec::new(),
            eta_cov: Vec::new(),
            alpha_gamma: Vec::new(),
            alpha_sd: 0.0,
            alpha_load: Vec::new(),
            noise,
            time_invariant_noise: false,
        }
    }

    pub fn with_eta_cov(mut self, cov: Vec<Vec<f64>>) -> Self {
        self.eta_cov = cov;
        self
    }

    pub fn with_eta_load(mut self, load: Vec<Vec<f64>>) -> Self {
        self.eta_load = load;
        self
    }

    pub fn with_alpha(mut self, gamma: Vec<f64>, sd: f64) -> Self {
        self.alpha_gamma = gamma;
        self.alpha_sd = sd;
        self
    }

    pub fn with_alpha_load(mut self, load: Vec<f64>) -> Self {
        self.alpha_load = load;
        self
    }

    pub fn with_time_invariant_noise(mut self) -> Self {
        self.time_invariant_noise = true;
        self
    }

    pub fn validate(&self, model: &UtilityModel) -> Result<()> {
        self.x_law.validate()?;
        let m = model.eta_dim();
        let p = model.x_len();
        if self.eta_mean.len() != m {
            return Err(Error::dim("panel.eta_mean", m, self.eta_mean.len()));
        }
        if !self.eta_load.is_empty() {
            if self.eta_load.len() != m {
                return Err(Error::dim("panel.eta_load rows", m, self.eta_load.len()));
            }
            for r in &self.eta_load {
                if r.len() != p {
                    return Err(Error::dim("panel.eta_load columns", p, r.len()));
                }
            }
        }
        if !self.eta_cov.is_empty() {
            if self.eta_cov.len() != m || self.eta_cov.iter().any(|r| r.len() != m) {
                return Err(Error::dim("panel.eta_cov", m, self.eta_cov.len()));
            }
            psd_factor(&cov_matrix(&self.eta_cov)).ok_or_else(|| {
                Error::config("panel.eta_cov", "not symmetric positive semidefinite")
            })?;
        }
        if !self.alpha_gamma.is_empty() && self.alpha_gamma.len() != p {
            return Err(Error::dim("panel.alpha_gamma", p, self.alpha_gamma.len()));
        }
        if !(self.alpha_sd >= 0.0 && self.alpha_sd.is_finite()) {
            return Err(Error::config("panel.alpha_sd", "must be nonnegative"));
        }
        if model.is_binary() {
            if !self.alpha_load.is_empty() {
                return Err(Error::config(
                    "panel.alpha_load",
                    "only multinomial models take loadings",
                ));
            }
            if !model.is_additive() {
                return Err(Error::Unsupported(
                    "panel checks need a net utility additive in v".into(),
                ));
            }
        } else if !self.alpha_load.is_empty() && self.alpha_load.len() != model.alternatives() {
            return Err(Error::dim(
                "panel.alpha_load",
                model.alternatives(),
                self.alpha_load.len(),
            ));
        }
        self.noise.validate(m)
    }

    /// Whether the law of the heterogeneity moves with the regressors.
    pub fn is_endogenous(&self) -> bool {
        self.alpha_gamma.iter().any(|g| *g != 0.0)
            || self.eta_load.iter().flatten().any(|g| *g != 0.0)
    }

    /// Whether `η` is a point mass given `X`.
    pub fn eta_is_constant(&self) -> bool {
        self.eta_cov.iter().flatten().all(|c| *c == 0.0)
            && self.eta_load.iter().flatten().all(|g| *g == 0.0)
    }

    /// Nonzero columns of the covariance factor.
    fn factor_columns(&self) -> Vec<Vec<f64>> {
        if self.eta_cov.is_empty() {
            return Vec::new();
        }
        let l: DMatrix<f64> = psd_factor(&cov_matrix(&self.eta_cov)).expect("validated");
        (0..l.ncols())
            .map(|c| l.column(c).iter().copied().collect::<Vec<f64>>())
            .filter(|c| c.iter().any(|v| *v != 0.0))
            .collect()
    }

    /// Dimension of the standard normal vector driving `(η, α)`.
    pub fn latent_dim(&self) -> usize {
        self.factor_columns().len() + usize::from(self.alpha_sd > 0.0)
    }

    fn midpoint(x1: &[f64], x2: &[f64]) -> Vec<f64> {
        x1.iter().zip(x2).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    /// `E[η | X]`.
    pub fn eta_mean_given(&self, x1: &[f64], x2: &[f64]) -> Vec<f64> {
        let xb = Self::midpoint(x1, x2);
        (0..self.eta_mean.len())
            .map(|i| {
                self.eta_mean[i] + self.eta_load.get(i).map(|r| dot(r, &xb)).unwrap_or(0.0)
            })
            .collect()
    }

    fn latent_from(&self, cols: &[Vec<f64>], x1: &[f64], x2: &[f64], z: &[f64]) -> Latent {
        let xb = Self::midpoint(x1, x2);
        let mut eta = self.eta_mean_given(x1, x2);
        for (c, zc) in cols.iter().zip(z) {
            for (e, l) in eta.iter_mut().zip(c) {
                *e += l * zc;
            }
        }
        let mut alpha = if self.alpha_gamma.is_empty() {
            0.0
        } else {
            dot(&self.alpha_gamma, &xb)
        };
        if self.alpha_sd > 0.0 {
            alpha += self.alpha_sd * z[cols.len()];
        }
        Latent { eta, alpha }
    }

    fn loading(&self, j: usize) -> f64 {
        if self.alpha_load.is_empty() {
            if j == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            self.alpha_load[j]
        }
    }

    fn nodes(&self, integ: &IntegrationSpec, tag: &str) -> Result<NodeSet> {
        integ.standard_normal_nodes(self.latent_dim(), tag)
    }

    /// Draws `(X1, X2)` and the unit's disturbances.
    pub fn draw_unit(&self, model: &UtilityModel, seed: u64, i: u64) -> PanelUnit {
        let mut rng = CounterRng::stream(seed, "panel_unit", i);
        let p = model.x_len();
        let mut x1 = Vec::with_capacity(p);
        let mut x2 = Vec::with_capacity(p);
        for _ in 0..p {
            let (a, b) = self.x_law.draw_pair(&mut rng);
            x1.push(a);
            x2.push(b);
        }
        let z = standard_normals(&mut rng, self.latent_dim());
        let latent = self.latent_from(&self.factor_columns(), &x1, &x2, &z);
        let draw_v = |rng: &mut CounterRng| {
            if model.is_binary() {
                vec![self.noise.sample_scalar(&latent.eta, rng)]
            } else {
                self.noise
                    .sample_vector(&latent.eta, model.alternatives(), rng)
            }
        };
        let v1 = draw_v(&mut rng);
        let v2 = if self.time_invariant_noise {
            v1.clone()
        } else {
            draw_v(&mut rng)
        };
        PanelUnit {
            x1,
            x2,
            latent,
            v1,
            v2,
        }
    }

    /// Systematic part of period utilities: `[h + α]` for binary models,
    /// `u_j + λ_j α` otherwise.
    fn systematic(&self, model: &UtilityModel, xt: &[f64], lat: &Latent) -> Vec<f64> {
        if model.is_binary() {
            vec![model.h_and_grad(xt, &lat.eta).0 + lat.alpha]
        } else {
            let (u, _) = model.utilities_and_grad(xt, &lat.eta);
            u.iter()
                .enumerate()
                .map(|(j, uj)| uj + self.loading(j) * lat.alpha)
                .collect()
        }
    }

    fn probs(&self, model: &UtilityModel, xt: &[f64], lat: &Latent) -> Vec<f64> {
        let s = self.systematic(model, xt, lat);
        if model.is_binary() {
            vec![self.noise.survival_v(-s[0], &lat.eta)]
        } else {
            kernel_probs(&self.noise, &s, &lat.eta)
        }
    }

    /// `f_v(−h − α) ∂x h` or `Σ_k p_jk ∂x u_k`, flattened.
    fn structural(&self, model: &UtilityModel, xt: &[f64], lat: &Latent) -> Vec<f64> {
        if model.is_binary() {
            let (h, g) = model.h_and_grad(xt, &lat.eta);
            let f = self.noise.density_v(-(h + lat.alpha), &lat.eta);
            return g.into_iter().map(|gi| f * gi).collect();
        }
        let (u, g) = model.utilities_and_grad(xt, &lat.eta);
        let s: Vec<f64> = u
            .iter()
            .enumerate()
            .map(|(j, uj)| uj + self.loading(j) * lat.alpha)
            .collect();
        let pjk = kernel_jacobian(&self.noise, &s, &lat.eta);
        let p = xt.len();
        let mut out = vec![0.0; u.len() * p];
        for j in 0..u.len() {
            for k in 0..u.len() {
                for c in 0..p {
                    out[j * p + c] += pjk[j][k] * g[k][c];
                }
            }
        }
        out
    }
}

impl PanelUnit {
    /// Period-`t` net utility (binary) or utilities (multinomial).
    pub fn utilities(&self, dgp: &PanelDgp, model: &UtilityModel, t: usize) -> Vec<f64> {
        let (x, v) = if t == 1 {
            (&self.x1, &self.v1)
        } else {
            (&self.x2, &self.v2)
        };
        dgp.systematic(model, x, &self.latent)
            .iter()
            .zip(v)
            .map(|(s, v)| s + v)
            .collect()
    }

    /// Chosen alternative in period `t`: `0/1` for binary models, `0..J`
    /// otherwise.
    pub fn choice(&self, dgp: &PanelDgp, model: &UtilityModel, t: usize) -> usize {
        let u = self.utilities(dgp, model, t);
        if model.is_binary() {
            usize::from(u[0] >= 0.0)
        } else {
            let mut best = 0;
            for j in 1..u.len() {
                if u[j] > u[best] {
                    best = j;
                }
            }
            best
        }
    }
}

fn outputs(model: &UtilityModel) -> usize {
    if model.is_binary() {
        1
    } else {
        model.alternatives()
    }
}

fn check_pair(model: &UtilityModel, x1: &[f64], x2: &[f64]) -> Result<()> {
    check_x(model, x1)?;
    check_x(model, x2)
}

/// `E[Y_t | X1, X2]` (binary) or `E[Y_jt | X1, X2]` for all `j`.
pub fn cond_e_yt(
    dgp: &PanelDgp,
    model: &UtilityModel,
    x1: &[f64],
    x2: &[f64],
    t: usize,
    integ: &IntegrationSpec,
) -> Result<ProbResult> {
    dgp.validate(model)?;
    check_pair(model, x1, x2)?;
    if t != 1 && t != 2 {
        return Err(Error::config("t", "period must be 1 or 2"));
    }
    let nodes = dgp.nodes(integ, "panel")?;
    let cols = dgp.factor_columns();
    let xt = if t == 1 { x1 } else { x2 };
    let e = nodes.expect_vec(outputs(model), |z| {
        dgp.probs(model, xt, &dgp.latent_from(&cols, x1, x2, z))
    });
    Ok(ProbResult {
        value: e.value,
        mc_se: e.se,
        n_effective: e.n,
    })
}

/// `∂_{X2} E[Y2 − Y1 | X1, X2]` at `X1 = X2 = x_diag`: central differences
/// in `X2` with `X1` held fixed, re-mixing the heterogeneity law at each
/// perturbed `X2`.
pub fn thm7_lhs(
    dgp: &PanelDgp,
    model: &UtilityModel,
    x_diag: &[f64],
    integ: &IntegrationSpec,
) -> Result<Derivative> {
    dgp.validate(model)?;
    check_x(model, x_diag)?;
    let nodes = dgp.nodes(integ, "panel")?;
    diff_derivative(dgp, model, x_diag, x_diag, &nodes)
}

fn diff_derivative(
    dgp: &PanelDgp,
    model: &UtilityModel,
    x1: &[f64],
    x2: &[f64],
    nodes: &NodeSet,
) -> Result<Derivative> {
    let cols = dgp.factor_columns();
    num_jacobian_prob(nodes, x2, outputs(model), StepRule::for_nodes(nodes), |x2, z| {
        let lat = dgp.latent_from(&cols, x1, x2, z);
        let p2 = dgp.probs(model, x2, &lat);
        let p1 = dgp.probs(model, x1, &lat);
        p2.iter().zip(&p1).map(|(a, b)| a - b).collect()
    })
}

/// Heterogeneity bias `∂_{X2} E[Y1 | X1, X2]`: the part of the derivative
/// that flows through the dependence of the heterogeneity law on `X2`.
pub fn heterogeneity_bias(
    dgp: &PanelDgp,
    model: &UtilityModel,
    x1: &[f64],
    x2: &[f64],
    integ: &IntegrationSpec,
) -> Result<Derivative> {
    dgp.validate(model)?;
    check_pair(model, x1, x2)?;
    let nodes = dgp.nodes(integ, "panel")?;
    let cols = dgp.factor_columns();
    num_jacobian_prob(&nodes, x2, outputs(model), StepRule::for_nodes(&nodes), |x2, z| {
        dgp.probs(model, x1, &dgp.latent_from(&cols, x1, x2, z))
    })
}

/// Right side of the diagonal identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Thm7Rhs {
    /// `E[f_v(−h − α | η, X) ∂x h | X]`.
    pub analytic: VecEstimate,
    /// `E[∂x δ K_b(δ) | X]` from simulated disturbances.
    pub kernel: VecEstimate,
    pub bandwidth: f64,
}

/// `E[∂x δ | X, δ = 0] f_δ(0 | X)` at `X1 = X2 = x_diag` for a binary model.
pub fn thm7_rhs(
    dgp: &PanelDgp,
    model: &UtilityModel,
    x_diag: &[f64],
    integ: &IntegrationSpec,
    bandwidth: Option<f64>,
) -> Result<Thm7Rhs> {
    require_additive_binary(model, "thm7_rhs")?;
    dgp.validate(model)?;
    check_x(model, x_diag)?;
    let nodes = dgp.nodes(integ, "panel")?;
    let cols = dgp.factor_columns();
    let analytic = nodes.expect_vec(x_diag.len(), |z| {
        dgp.structural(model, x_diag, &dgp.latent_from(&cols, x_diag, x_diag, z))
    });
    let draws = draw_indices(integ.draws());
    let sim = |i: f64| -> (f64, Vec<f64>) {
        let mut rng = CounterRng::stream(integ.seed, "thm7_kernel", i as u64);
        let z = standard_normals(&mut rng, cols.len() + usize::from(dgp.alpha_sd > 0.0));
        let lat = dgp.latent_from(&cols, x_diag, x_diag, &z);
        let v = dgp.noise.sample_scalar(&lat.eta, &mut rng);
        let (h, g) = model.h_and_grad(x_diag, &lat.eta);
        (h + lat.alpha + v, g)
    };
    let b = match bandwidth {
        Some(b) if b > 0.0 => b,
        Some(_) => return Err(Error::config("bandwidth", "must be positive")),
        None => {
            let m = draws.expect_vec(2, |n| {
                let d = sim(n[0]).0;
                vec![d, d * d]
            });
            silverman((m.value[1] - m.value[0] * m.value[0]).max(0.0).sqrt(), draws.len())
        }
    };
    let kernel = draws.expect_vec(x_diag.len(), |n| {
        let (d, g) = sim(n[0]);
        let k = gaussian_kernel(d, b);
        g.into_iter().map(|gi| gi * k).collect()
    });
    Ok(Thm7Rhs {
        analytic,
        kernel,
        bandwidth: b,
    })
}

/// Diagonal identity for a binary panel at each grid point, together with
/// the heterogeneity bias that the differencing removes.
pub fn verify_thm7(
    dgp: &PanelDgp,
    model: &UtilityModel,
    diag_grid: &[Vec<f64>],
    ctx: &CheckContext,
) -> Result<DerivativeReport> {
    require_additive_binary(model, "verify_thm7")?;
    dgp.validate(model)?;
    let mut rep = ctx.report("thm7");
    for x in diag_grid {
        check_x(model, x)?;
        let lhs = thm7_lhs(dgp, model, x, &ctx.integ)?;
        let rhs = thm7_rhs(dgp, model, x, &ctx.integ, None)?;
        let bias = heterogeneity_bias(dgp, model, x, x, &ctx.integ)?;
        for k in 0..x.len() {
            rep.push(Row::new(
                x,
                format!("d{}", k + 1),
                lhs.value[0][k],
                rhs.analytic.value[k],
                lhs.se[0][k].hypot(rhs.analytic.se[k]),
                ctx.agree(),
            ));
            rep.push(Row::new(
                x,
                format!("d{}_kernel", k + 1),
                lhs.value[0][k],
                rhs.kernel.value[k],
                lhs.se[0][k].hypot(rhs.kernel.se[k]),
                Criterion::Info,
            ));
            rep.push(Row::new(
                x,
                format!("bias_d{}", k + 1),
                bias.value[0][k],
                0.0,
                bias.se[0][k],
                Criterion::Info,
            ));
        }
        let norm = bias.value[0].iter().map(|b| b * b).sum::<f64>().sqrt();
        let norm_se = bias.se[0].iter().map(|s| s * s).sum::<f64>().sqrt();
        let crit = if dgp.is_endogenous() {
            Criterion::differ()
        } else {
            ctx.agree()
        };
        rep.push(Row::new(x, "bias_norm", norm, 0.0, norm_se, crit));
        rep.note(format!("kernel bandwidth at {x:?}: {}", rhs.bandwidth));
    }
    rep.note("x column lists the common value X1 = X2");
    Ok(rep.finish())
}

/// `p_jk(u | X) = E_α[p_jk(u + λα)]` at `X1 = X2 = x`; `η` does not enter
/// when the disturbances are independent of it.
fn mixed_kernel_jacobian(
    dgp: &PanelDgp,
    model: &UtilityModel,
    x: &[f64],
    nodes: &NodeSet,
) -> VecEstimate {
    let cols = dgp.factor_columns();
    let j_n = model.alternatives();
    nodes.expect_vec(j_n * j_n, |z| {
        let lat = dgp.latent_from(&cols, x, x, z);
        let s = dgp.systematic(model, x, &lat);
        kernel_jacobian(&dgp.noise, &s, &lat.eta).concat()
    })
}

fn logit_form(dgp: &PanelDgp, model: &UtilityModel, x: &[f64], lat: &Latent) -> Vec<f64> {
    let (_, g) = model.utilities_and_grad(x, &lat.eta);
    let pt = logit_kernel(&dgp.systematic(model, x, lat));
    let p = x.len();
    let avg: Vec<f64> = (0..p)
        .map(|c| pt.iter().zip(&g).map(|(pk, gk)| pk * gk[c]).sum())
        .collect();
    let mut out = Vec::with_capacity(pt.len() * p);
    for j in 0..pt.len() {
        for c in 0..p {
            out.push(pt[j] * (g[j][c] - avg[c]));
        }
    }
    out
}

/// Multinomial diagonal identity; adds the logit form for Gumbel
/// disturbances and, at the origin of a linear random-coefficient model, the
/// scalar-multiple form `p_jk(0 | X) E[η | X]`.
pub fn thm8_check(
    dgp: &PanelDgp,
    model: &UtilityModel,
    diag_grid: &[Vec<f64>],
    ctx: &CheckContext,
) -> Result<DerivativeReport> {
    require_multinomial(model, "thm8_check")?;
    dgp.validate(model)?;
    let nodes = dgp.nodes(&ctx.integ, "panel")?;
    let cols = dgp.factor_columns();
    let j_n = model.alternatives();
    let tight = Criterion::Agree(Tolerance {
        abs: 1e-12,
        rel: 1e-10,
        k_se: 0.0,
    });
    let mut rep = ctx.report("thm8");
    for x in diag_grid {
        check_x(model, x)?;
        let p = x.len();
        let lhs = diff_derivative(dgp, model, x, x, &nodes)?;
        let gumbel = matches!(dgp.noise, NoiseDist::IidGumbel);
        let rhs = nodes.expect_vec(2 * j_n * p, |z| {
            let lat = dgp.latent_from(&cols, x, x, z);
            let s = dgp.structural(model, x, &lat);
            let l = if gumbel {
                logit_form(dgp, model, x, &lat)
            } else {
                vec![0.0; j_n * p]
            };
            [s, l].concat()
        });
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
                if gumbel {
                    rep.push(Row::new(
                        x,
                        format!("{name}_logit_form"),
                        rhs.value[i],
                        rhs.value[j_n * p + i],
                        0.0,
                        tight,
                    ));
                }
            }
        }
        let berry = matches!(model.family(), Family::LinearRc { .. })
            && model.dims().choice_specific
            && !dgp.noise.depends_on_eta()
            && x.iter().all(|v| *v == 0.0);
        if berry {
            let d = model.dims().covariates;
            let pjk = mixed_kernel_jacobian(dgp, model, x, &nodes);
            let mean = dgp.eta_mean_given(x, x);
            for j in 0..j_n {
                for k in 0..j_n {
                    for c in 0..d {
                        let slot = k * d + c;
                        rep.push(Row::new(
                            x,
                            format!("dP{}/d{}_origin", j + 1, slot_name(model, slot)),
                            lhs.value[j][slot],
                            pjk.value[j * j_n + k] * mean[c],
                            lhs.se[j][slot].hypot(pjk.se[j * j_n + k] * mean[c].abs()),
                            ctx.agree(),
                        ));
                    }
                }
            }
        }
    }
    rep.note("x column lists the common value X1 = X2");
    Ok(rep.finish())
}

/// Index coefficients recovered up to scale from diagonal derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct BetaRecovery {
    /// Unit vector with its largest-magnitude component positive.
    pub direction: Vec<f64>,
    /// Angle to `β0 / ‖β0‖`, ignoring sign.
    pub angle: f64,
    pub report: DerivativeReport,
}

/// Stacks `∂_{X2^k} E[Y_j2 − Y_j1 | X]` over diagonal points and all
/// `(j, k)`, then extracts the dominant direction. The model must be a linear
/// random-coefficient model whose coefficients are a point mass `β0`.
pub fn thm9_recover_beta(
    dgp: &PanelDgp,
    model: &UtilityModel,
    diag_grid: &[Vec<f64>],
    ctx: &CheckContext,
    angle_tol: Option<f64>,
) -> Result<BetaRecovery> {
    require_multinomial(model, "thm9_recover_beta")?;
    if !matches!(model.family(), Family::LinearRc { .. }) || !model.dims().choice_specific {
        return Err(Error::WrongFamily {
            op: "thm9_recover_beta",
            expected: "linear_rc with alternative-specific covariates",
            family: model.family().tag().into(),
        });
    }
    dgp.validate(model)?;
    if !dgp.eta_is_constant() {
        return Err(Error::Precondition(
            "coefficients must be a point mass given the regressors".into(),
        ));
    }
    let beta0 = dgp.eta_mean.clone();
    let d = beta0.len();
    let j_n = model.alternatives();
    let nodes = dgp.nodes(&ctx.integ, "panel")?;
    let tol = angle_tol.unwrap_or(if nodes.is_stochastic() { 0.02 } else { 1e-3 });
    let mut rep = ctx.report("thm9");
    let mut rows = Vec::new();
    let mut largest: f64 = 0.0;
    for x in diag_grid {
        check_x(model, x)?;
        let lhs = diff_derivative(dgp, model, x, x, &nodes)?;
        let pjk = mixed_kernel_jacobian(dgp, model, x, &nodes);
        for j in 0..j_n {
            for k in 0..j_n {
                let s = pjk.value[j * j_n + k];
                largest = largest.max(s.abs());
                rep.push(Row::new(
                    x,
                    format!("scalar_{}{}", j + 1, k + 1),
                    s,
                    s,
                    pjk.se[j * j_n + k],
                    Criterion::Info,
                ));
                rows.push(lhs.value[j][k * d..(k + 1) * d].to_vec());
            }
        }
    }
    if largest < 1e-10 {
        return Err(Error::Identification(
            "every diagonal scalar p_jk is zero; the direction is not identified".into(),
        ));
    }
    let direction = dominant_direction(&rows)
        .ok_or_else(|| Error::Identification("no nonzero diagonal derivative".into()))?;
    let angle = unsigned_angle(&direction, &beta0);
    for (c, v) in direction.iter().enumerate() {
        let norm = beta0.iter().map(|b| b * b).sum::<f64>().sqrt();
        let sign = if dot(&direction, &beta0) < 0.0 { -1.0 } else { 1.0 };
        rep.push(Row::new(
            &[],
            format!("direction_{}", c + 1),
            *v,
            sign * beta0[c] / norm,
            0.0,
            Criterion::Info,
        ));
    }
    rep.push(Row::new(&[], "angle", angle, 0.0, 0.0, Criterion::AtMost(tol)));
    Ok(BetaRecovery {
        direction,
        angle,
        report: rep.finish(),
    })
}

/// One draw of an observationally equivalent linear representation.
#[derive(Clone, Debug, PartialEq)]
pub struct EquivRecord {
    pub id: u64,
    pub ea: f64,
    pub eb: f64,
    pub y1: f64,
    pub y2: f64,
    pub x1: f64,
    pub x2: f64,
}

/// Per-draw linear representation `x ↦ ε̃_a + ε̃_b x` of a scalar-regressor
/// panel, either of the outcome itself (`binary == false`) or of the net
/// utility behind a binary outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct EquivalentLinearModel {
    pub binary: bool,
    pub records: Vec<EquivRecord>,
    /// Draws with `|X2 − X1|` below [`DIAGONAL_GUARD`].
    pub excluded: usize,
    /// Largest `|Y_t − (ε̃_a + ε̃_b X_t)|` relative to the magnitudes
    /// involved (smooth case) or of the net utilities (binary case).
    pub max_rel_err: f64,
    /// Draws whose observed binary outcome differs from the constructed one.
    pub mismatches: usize,
}

impl EquivalentLinearModel {
    pub fn excluded_fraction(&self) -> f64 {
        let n = self.records.len() + self.excluded;
        if n == 0 {
            0.0
        } else {
            self.excluded as f64 / n as f64
        }
    }

    /// Sample mean of `ε̃_b` and its standard error.
    pub fn mean_eb(&self) -> (f64, f64) {
        let n = self.records.len() as f64;
        let m = self.records.iter().map(|r| r.eb).sum::<f64>() / n;
        let v = self.records.iter().map(|r| (r.eb - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (v / n).sqrt())
    }

    /// Audit dump: one line per retained draw.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "draw,eps_a,eps_b,y1,y2,x1,x2")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.id, r.ea, r.eb, r.y1, r.y2, r.x1, r.x2
            )?;
        }
        Ok(())
    }
}

fn require_scalar_panel(dgp: &PanelDgp, model: &UtilityModel, op: &'static str) -> Result<()> {
    require_additive_binary(model, op)?;
    dgp.validate(model)?;
    if model.x_len() != 1 {
        return Err(Error::dim("scalar regressor", 1, model.x_len()));
    }
    Ok(())
}

fn rel_gap(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / scale.max(1.0)
}

fn construct(
    dgp: &PanelDgp,
    model: &UtilityModel,
    draws: usize,
    seed: u64,
    binary: bool,
) -> EquivalentLinearModel {
    let mut records = Vec::with_capacity(draws);
    let mut excluded = 0;
    let mut max_rel_err: f64 = 0.0;
    let mut mismatches = 0;
    for i in 0..draws as u64 {
        let unit = dgp.draw_unit(model, seed, i);
        let (x1, x2) = (unit.x1[0], unit.x2[0]);
        if (x2 - x1).abs() < DIAGONAL_GUARD {
            excluded += 1;
            continue;
        }
        let d1 = unit.utilities(dgp, model, 1)[0];
        let d2 = unit.utilities(dgp, model, 2)[0];
        let eb = (d2 - d1) / (x2 - x1);
        let ea = d1 - eb * x1;
        for (x, d) in [(x1, d1), (x2, d2)] {
            let fitted = ea + eb * x;
            let scale = d.abs().max(ea.abs()).max((eb * x).abs());
            max_rel_err = max_rel_err.max(rel_gap(fitted, d, scale));
            if binary && (fitted >= 0.0) != (d >= 0.0) {
                mismatches += 1;
            }
        }
        let (y1, y2) = if binary {
            (f64::from(u8::from(d1 >= 0.0)), f64::from(u8::from(d2 >= 0.0)))
        } else {
            (d1, d2)
        };
        records.push(EquivRecord {
            id: i,
            ea,
            eb,
            y1,
            y2,
            x1,
            x2,
        });
    }
    EquivalentLinearModel {
        binary,
        records,
        excluded,
        max_rel_err,
        mismatches,
    }
}

/// Smooth outcomes `Y_t = h(X_t, η) + α + v_t`: per draw
/// `ε̃_b = (Y2 − Y1)/(X2 − X1)` and `ε̃_a = Y1 − ε̃_b X1`.
pub fn construct_equivalent_linear(
    dgp: &PanelDgp,
    model: &UtilityModel,
    draws: usize,
    seed: u64,
) -> Result<EquivalentLinearModel> {
    require_scalar_panel(dgp, model, "construct_equivalent_linear")?;
    Ok(construct(dgp, model, draws, seed, false))
}

/// Binary outcomes `Y_t = 1{δ(X_t, ε_t) ≥ 0}`: the same construction applied
/// to `δ`, with the constructed threshold rule checked against every
/// observed outcome.
pub fn construct_equivalent_binary(
    dgp: &PanelDgp,
    model: &UtilityModel,
    draws: usize,
    seed: u64,
) -> Result<EquivalentLinearModel> {
    require_scalar_panel(dgp, model, "construct_equivalent_binary")?;
    Ok(construct(dgp, model, draws, seed, true))
}

/// Pairs sharing a midpoint whose separations differ by a factor of two,
/// as `(wide, narrow)` index pairs.
fn halving_pairs(pairs: &[(f64, f64)]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (a, pa) in pairs.iter().enumerate() {
        for (b, pb) in pairs.iter().enumerate() {
            let (da, db) = (pa.1 - pa.0, pb.1 - pb.0);
            let same_mid = ((pa.0 + pa.1) - (pb.0 + pb.1)).abs() < 1e-12;
            if a != b && same_mid && db != 0.0 && (da - 2.0 * db).abs() < 1e-12 {
                out.push((a, b));
            }
        }
    }
    out
}

/// Expected difference quotient against expected derivative at off-diagonal
/// pairs of a scalar-regressor panel, with the remainder
/// `E[φ(X2) − φ(X1) − φ_x(X2)(X2 − X1) | X]` whose nonzero value makes the
/// two differ.
pub fn thm10_gap(
    dgp: &PanelDgp,
    model: &UtilityModel,
    pairs: &[(f64, f64)],
    ctx: &CheckContext,
) -> Result<DerivativeReport> {
    require_scalar_panel(dgp, model, "thm10_gap")?;
    let nodes = dgp.nodes(&ctx.integ, "panel")?;
    let cols = dgp.factor_columns();
    let quadratic = matches!(model.family(), Family::QuadraticScalar);
    let mut rep = ctx.report("thm10");
    let mut gaps = vec![None; pairs.len()];
    for (i, &(x1, x2)) in pairs.iter().enumerate() {
        let x = [x1, x2];
        let d = x2 - x1;
        if d.abs() < DIAGONAL_GUARD {
            rep.note(format!("pair {x:?} lies on the diagonal and was skipped"));
            continue;
        }
        let e = nodes.expect_vec(4, |z| {
            let lat = dgp.latent_from(&cols, &[x1], &[x2], z);
            let h1 = model.h_and_grad(&[x1], &lat.eta).0;
            let (h2, g2) = model.h_and_grad(&[x2], &lat.eta);
            let a = (h2 - h1) / d;
            vec![a, g2[0], a - g2[0], h2 - h1 - g2[0] * d]
        });
        let (a, b, rem) = (e.value[0], e.value[1], e.value[3]);
        let holds = rem.abs() > (5.0 * e.se[3]).max(1e-9);
        let crit = if holds { Criterion::differ() } else { ctx.agree() };
        rep.push(Row::new(&x, "gap", a, b, e.se[2], crit));
        rep.push(Row::new(
            &x,
            "expected_difference_quotient",
            a,
            a,
            e.se[0],
            Criterion::Info,
        ));
        if quadratic {
            let ec = dgp.eta_mean_given(&[x1], &[x2])[2];
            rep.push(Row::new(&x, "gap_law", a - b, ec * (x1 - x2), e.se[2], ctx.agree()));
            rep.push(Row::new(&x, "remainder", rem, -ec * d * d, e.se[3], ctx.agree()));
        } else {
            rep.push(Row::new(&x, "remainder", rem, rem, e.se[3], Criterion::Info));
        }
        gaps[i] = Some((a - b, rem));
    }
    for (wide, narrow) in halving_pairs(pairs) {
        if let (Some(w), Some(n)) = (gaps[wide], gaps[narrow]) {
            if n.0.abs() > 1e-9 && n.1.abs() > 1e-12 {
                let x = [pairs[narrow].0, pairs[narrow].1];
                let tol = Criterion::Agree(Tolerance::rel(0.01));
                rep.push(Row::new(&x, "gap_ratio", w.0 / n.0, 2.0, 0.0, tol));
                rep.push(Row::new(&x, "remainder_ratio", w.1 / n.1, 4.0, 0.0, tol));
            }
        }
    }
    let eq = construct_equivalent_linear(dgp, model, ctx.integ.draws(), ctx.integ.seed)?;
    let (gp, gp_se) = graham_powell(dgp, model, ctx.integ.draws(), ctx.integ.seed);
    rep.push(Row::new(
        &[],
        "expected_difference_quotient_marginal",
        gp,
        gp,
        gp_se,
        Criterion::Info,
    ));
    rep.push(Row::new(
        &[],
        "equivalence_rel_err",
        eq.max_rel_err,
        0.0,
        0.0,
        Criterion::AtMost(1e-12),
    ));
    rep.push(Row::new(
        &[],
        "excluded_fraction",
        eq.excluded_fraction(),
        0.0,
        0.0,
        Criterion::AtMost(1e-6),
    ));
    rep.note("x column lists X1;X2");
    Ok(rep.finish())
}

/// `E[(φ(X2, ε2) − φ(X1, ε2))/(X2 − X1)]` over the regressor law.
fn graham_powell(dgp: &PanelDgp, model: &UtilityModel, draws: usize, seed: u64) -> (f64, f64) {
    let nodes = draw_indices(draws);
    let e = nodes.expect_vec(1, |n| {
        let u = dgp.draw_unit(model, seed, n[0] as u64);
        let d = u.x2[0] - u.x1[0];
        if d.abs() < DIAGONAL_GUARD {
            return vec![0.0];
        }
        let h1 = model.h_and_grad(&u.x1, &u.latent.eta).0;
        let h2 = model.h_and_grad(&u.x2, &u.latent.eta).0;
        vec![(h2 - h1) / d]
    });
    (e.value[0], e.se[0])
}

/// Kernel-conditioned derivative objects of a binary panel and of its
/// equivalent linear threshold model at off-diagonal pairs, with the side
/// condition under which they differ. On diagonal pairs the constructed
/// slope is replaced by its limit `∂x h(X2, η)`.
pub fn thm11_gap(
    dgp: &PanelDgp,
    model: &UtilityModel,
    pairs: &[(f64, f64)],
    ctx: &CheckContext,
    bandwidth: Option<f64>,
) -> Result<DerivativeReport> {
    require_scalar_panel(dgp, model, "thm11_gap")?;
    let cols = dgp.factor_columns();
    let draws = draw_indices(ctx.integ.draws());
    let mut rep = ctx.report("thm11");
    for &(x1, x2) in pairs {
        let x = [x1, x2];
        let d = x2 - x1;
        let diagonal = d.abs() < DIAGONAL_GUARD;
        // Per draw: δ1, δ2, constructed δ̃(X2), ε̃_b, ∂x δ(X2), δ(X1, ε2).
        let sim = |i: f64| -> [f64; 6] {
            let mut rng = CounterRng::stream(ctx.integ.seed, "thm11", i as u64);
            let z = standard_normals(&mut rng, cols.len() + usize::from(dgp.alpha_sd > 0.0));
            let lat = dgp.latent_from(&cols, &[x1], &[x2], &z);
            let v1 = dgp.noise.sample_scalar(&lat.eta, &mut rng);
            let v2 = if dgp.time_invariant_noise {
                v1
            } else {
                dgp.noise.sample_scalar(&lat.eta, &mut rng)
            };
            let h1 = model.h_and_grad(&[x1], &lat.eta).0;
            let (h2, g2) = model.h_and_grad(&[x2], &lat.eta);
            let d1 = h1 + lat.alpha + v1;
            let d2 = h2 + lat.alpha + v2;
            let (eb, dt2) = if diagonal {
                (g2[0], d2)
            } else {
                let eb = (d2 - d1) / d;
                let ea = d1 - eb * x1;
                (eb, ea + eb * x2)
            };
            [d1, d2, dt2, eb, g2[0], h1 + lat.alpha + v2]
        };
        let b = match bandwidth {
            Some(b) if b > 0.0 => b,
            Some(_) => return Err(Error::config("bandwidth", "must be positive")),
            None => {
                let m = draws.expect_vec(2, |n| {
                    let s = sim(n[0]);
                    vec![s[1], s[1] * s[1]]
                });
                silverman((m.value[1] - m.value[0] * m.value[0]).max(0.0).sqrt(), draws.len())
            }
        };
        let e = draws.expect_vec(7, |n| {
            let [_, d2, dt2, eb, g2, d1_at_2] = sim(n[0]);
            let k2 = gaussian_kernel(d2, b);
            let kt = gaussian_kernel(dt2, b);
            let side = d1_at_2 + g2 * d - d2;
            vec![
                eb * kt,
                g2 * k2,
                eb * kt - g2 * k2,
                kt,
                k2,
                kt - k2,
                side * k2,
            ]
        });
        let f = e.value[4];
        let (side, side_se) = if f > 0.0 {
            (e.value[6] / f, e.se[6] / f)
        } else {
            (0.0, 0.0)
        };
        let holds = !diagonal && side.abs() > (5.0 * side_se).max(1e-9);
        let crit = if holds { Criterion::differ() } else { ctx.agree() };
        rep.push(Row::new(&x, "gap", e.value[0], e.value[1], e.se[2], crit));
        rep.push(Row::new(&x, "density", e.value[3], e.value[4], e.se[5], ctx.agree()));
        rep.push(Row::new(&x, "side_condition", side, 0.0, side_se, Criterion::Info));
        if diagonal {
            let rhs = thm7_rhs(dgp, model, &[x1], &ctx.integ, Some(b))?;
            rep.push(Row::new(
                &x,
                "diagonal_vs_thm7",
                e.value[1],
                rhs.analytic.value[0],
                e.se[1].hypot(rhs.analytic.se[0]),
                Criterion::Info,
            ));
        }
        rep.note(format!("kernel bandwidth at {x:?}: {b}"));
    }
    rep.note("x column lists X1;X2; side condition is measured net of delta(X2, eps2)");
    Ok(rep.finish())
}

/// Witness for time stationarity: within quantile bins of `X1` (first
/// slot), compares `δ(x̄, ε_1)` on odd draws with `δ(x̄, ε_2)` on even draws
/// at a fixed probe `x̄`.
pub fn stationarity_witness(
    dgp: &PanelDgp,
    model: &UtilityModel,
    probe: &[f64],
    n: usize,
    bins: usize,
    seed: u64,
) -> Result<KsWitness> {
    require_additive_binary(model, "stationarity_witness")?;
    dgp.validate(model)?;
    check_x(model, probe)?;
    let mut sims: Vec<(f64, usize, f64)> = (0..n as u64)
        .map(|i| {
            let u = dgp.draw_unit(model, seed, i);
            let t = if i % 2 == 0 { 2 } else { 1 };
            let v = if t == 1 { u.v1[0] } else { u.v2[0] };
            let delta = model.h_and_grad(probe, &u.latent.eta).0 + u.latent.alpha + v;
            (u.x1[0], t, delta)
        })
        .collect();
    sims.sort_by(|a, b| a.0.total_cmp(&b.0));
    let per = n / bins;
    let mut ps = Vec::with_capacity(bins);
    for b in 0..bins {
        let bin = &sims[b * per..(b + 1) * per];
        let s1: Vec<f64> = bin.iter().filter(|s| s.1 == 1).map(|s| s.2).collect();
        let s2: Vec<f64> = bin.iter().filter(|s| s.1 == 2).map(|s| s.2).collect();
        ps.push(ks_p_value(ks_statistic(&s1, &s2), s1.len(), s2.len()));
    }
    Ok(KsWitness::from_p_values(&ps, 0.05))
}

/// Five diagonal points `c · (1, −1, 1, …)` for `c ∈ {−1, −½, 0, ½, 1}`.
pub fn default_diag_grid(p: usize) -> Vec<Vec<f64>> {
    [-1.0, -0.5, 0.0, 0.5, 1.0]
        .iter()
        .map(|c| {
            (0..p)
                .map(|i| if i % 2 == 0 { *c } else { -*c })
                .collect()
        })
        .collect()
}

/// Off-diagonal pairs around midpoint `m` with separations
/// `1, ½, ¼, ⅛`.
pub fn default_pairs(m: f64) -> Vec<(f64, f64)> {
    [1.0, 0.5, 0.25, 0.125]
        .iter()
        .map(|s| (m - 0.5 * s, m + 0.5 * s))
        .collect()
}
