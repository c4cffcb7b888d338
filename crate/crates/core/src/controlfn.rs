//! Triangular designs with an observed control variable `w`: regressors
//! `X = a ∘ Z + w`, heterogeneity `η | w ~ N(μ + Γw, Σ)`, and disturbances
//! whose location may move with `w`.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::choiceprob::{
    check_x, kernel_jacobian, kernel_probs, num_jacobian_prob, IntegrationSpec, ProbResult,
    StepRule,
};
use crate::distributions::{cov_matrix, standard_normals, EtaDist, NoiseDist};
use crate::error::{Error, Result};
use crate::identities::{silverman, slot_name};
use crate::model::UtilityModel;
use crate::numeric::{gauss_hermite, gauss_legendre, psd_factor, NodeSet, VecEstimate};
use crate::report::{CheckContext, Criterion, DerivativeReport, Row};
use crate::rng::CounterRng;

/// A scalar law for instruments and controls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarLaw {
    Normal { mean: f64, sd: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl ScalarLaw {
    pub fn validate(&self, field: &str) -> Result<()> {
        match self {
            ScalarLaw::Normal { sd, .. } if !(*sd > 0.0) => {
                Err(Error::config(field, "sd must be positive"))
            }
            ScalarLaw::Uniform { lo, hi } if !(hi > lo) => {
                Err(Error::config(field, "need lo < hi"))
            }
            _ => Ok(()),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            ScalarLaw::Normal { mean, .. } => *mean,
            ScalarLaw::Uniform { lo, hi } => 0.5 * (lo + hi),
        }
    }

    pub fn var(&self) -> f64 {
        match self {
            ScalarLaw::Normal { sd, .. } => sd * sd,
            ScalarLaw::Uniform { lo, hi } => (hi - lo) * (hi - lo) / 12.0,
        }
    }

    pub fn support(&self) -> (f64, f64) {
        match self {
            ScalarLaw::Normal { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            ScalarLaw::Uniform { lo, hi } => (*lo, *hi),
        }
    }

    pub fn draw(&self, rng: &mut CounterRng) -> f64 {
        match self {
            ScalarLaw::Normal { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
            ScalarLaw::Uniform { lo, hi } => lo + (hi - lo) * rng.uniform(),
        }
    }

    /// Deterministic rule: Gauss–Hermite for the normal, Gauss–Legendre for
    /// the uniform.
    fn quadrature(&self, n: usize) -> NodeSet {
        let (x, w) = match self {
            ScalarLaw::Normal { mean, sd } => {
                let (x, w) = gauss_hermite(n);
                (x.iter().map(|z| mean + sd * z).collect(), w)
            }
            ScalarLaw::Uniform { lo, hi } => {
                let (x, w) = gauss_legendre(n);
                (
                    x.iter().map(|t| lo + 0.5 * (hi - lo) * (t + 1.0)).collect(),
                    w.iter().map(|w| 0.5 * w).collect::<Vec<f64>>(),
                )
            }
        };
        NodeSet::new(1, x, w, false)
    }
}

/// Conditional support of `w` given `X = x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Support {
    Interval(f64, f64),
    Point(f64),
    Empty,
}

impl Support {
    pub fn contains(&self, w: f64) -> bool {
        match self {
            Support::Interval(lo, hi) => *lo <= w && w <= *hi,
            Support::Point(p) => *p == w,
            Support::Empty => false,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriangularDgp {
    pub instrument: ScalarLaw,
    pub control: ScalarLaw,
    /// First-stage slopes `a_c` in `X_c = a_c Z_c + w`; one instrument per
    /// covariate slot.
    pub first_stage: Vec<f64>,
    pub eta_mean: Vec<f64>,
    /// Loading `Γ` of the heterogeneity mean on `w`.
    pub gamma: Vec<f64>,
    pub eta_cov: Vec<Vec<f64>>,
    pub noise: NoiseDist,
    /// Location shift `κ_j w` of each disturbance (one entry for binary
    /// models). Empty means none.
    #[serde(default)]
    pub noise_w_shift: Vec<f64>,
    /// Declared common support of `w` given `X` and of `w`.
    #[serde(default = "default_true")]
    pub common_support: bool,
}

impl TriangularDgp {
    pub fn validate(&self, model: &UtilityModel) -> Result<()> {
        self.instrument.validate("dgp.instrument")?;
        self.control.validate("dgp.control")?;
        let p = model.x_len();
        if self.first_stage.len() != p {
            return Err(Error::dim("dgp.first_stage", p, self.first_stage.len()));
        }
        let m = model.eta_dim();
        if self.eta_mean.len() != m {
            return Err(Error::dim("dgp.eta_mean", m, self.eta_mean.len()));
        }
        if self.gamma.len() != m {
            return Err(Error::dim("dgp.gamma", m, self.gamma.len()));
        }
        EtaDist::normal(self.eta_mean.clone(), self.eta_cov.clone()).validate()?;
        self.noise.validate(m)?;
        let want = if model.is_binary() { 1 } else { model.alternatives() };
        if !self.noise_w_shift.is_empty() && self.noise_w_shift.len() != want {
            return Err(Error::dim("dgp.noise_w_shift", want, self.noise_w_shift.len()));
        }
        if model.is_binary() && !model.is_additive() {
            return Err(Error::Unsupported(
                "control-function checks need a net utility additive in v".into(),
            ));
        }
        Ok(())
    }

    fn factor(&self) -> DMatrix<f64> {
        psd_factor(&cov_matrix(&self.eta_cov)).expect("validated covariance")
    }

    pub fn eta_given_w(&self, w: f64) -> EtaDist {
        EtaDist::normal(self.eta_at(w, &[]), self.eta_cov.clone())
    }

    fn eta_at(&self, w: f64, lz: &[f64]) -> Vec<f64> {
        (0..self.eta_mean.len())
            .map(|i| self.eta_mean[i] + self.gamma[i] * w + lz.get(i).copied().unwrap_or(0.0))
            .collect()
    }

    fn eta_from(&self, l: &DMatrix<f64>, w: f64, z: &[f64]) -> Vec<f64> {
        let lz = l * DVector::from_column_slice(z);
        self.eta_at(w, lz.as_slice())
    }

    fn offsets(&self, model: &UtilityModel, w: f64) -> Vec<f64> {
        let n = if model.is_binary() { 1 } else { model.alternatives() };
        if self.noise_w_shift.is_empty() {
            vec![0.0; n]
        } else {
            self.noise_w_shift.iter().map(|k| k * w).collect()
        }
    }

    /// Implied marginal law of `η` when `w` is Gaussian.
    pub fn implied_eta(&self) -> Option<EtaDist> {
        match self.control {
            ScalarLaw::Normal { mean, sd } => {
                let m = self.eta_mean.len();
                let mu = self.eta_at(mean, &[]);
                let cov = (0..m)
                    .map(|i| {
                        (0..m)
                            .map(|j| self.eta_cov[i][j] + sd * sd * self.gamma[i] * self.gamma[j])
                            .collect()
                    })
                    .collect();
                Some(EtaDist::normal(mu, cov))
            }
            ScalarLaw::Uniform { .. } => None,
        }
    }

    /// `supp(w | X = x)`.
    pub fn conditional_support(&self, x: &[f64]) -> Support {
        let (mut lo, mut hi) = self.control.support();
        let (zlo, zhi) = self.instrument.support();
        let mut point: Option<f64> = None;
        for (c, a) in self.first_stage.iter().enumerate() {
            if *a == 0.0 {
                match point {
                    Some(p) if p != x[c] => return Support::Empty,
                    _ => point = Some(x[c]),
                }
                continue;
            }
            let (e1, e2) = (x[c] - a * zhi, x[c] - a * zlo);
            lo = lo.max(e1.min(e2));
            hi = hi.min(e1.max(e2));
        }
        if let Some(p) = point {
            return if lo <= p && p <= hi {
                Support::Point(p)
            } else {
                Support::Empty
            };
        }
        if lo > hi {
            Support::Empty
        } else {
            Support::Interval(lo, hi)
        }
    }

    /// Whether `supp(w | X = x)` equals `supp(w)`.
    pub fn has_common_support_at(&self, x: &[f64]) -> bool {
        let (lo, hi) = self.control.support();
        self.conditional_support(x) == Support::Interval(lo, hi)
    }

    /// Draw `i`: `(Z, w, η)` with `X = a ∘ Z + w`.
    pub fn draw(&self, seed: u64, i: u64) -> (Vec<f64>, f64, Vec<f64>) {
        let mut rng = CounterRng::stream(seed, "cf_draw", i);
        let w = self.control.draw(&mut rng);
        let z: Vec<f64> = self
            .first_stage
            .iter()
            .map(|_| self.instrument.draw(&mut rng))
            .collect();
        let x: Vec<f64> = z.iter().zip(&self.first_stage).map(|(z, a)| a * z + w).collect();
        let e = standard_normals(&mut rng, self.eta_mean.len());
        let eta = self.eta_from(&self.factor(), w, &e);
        (x, w, eta)
    }

    /// Joint nodes over `(w, z_η)`: a product rule under quadrature, paired
    /// draws under Monte Carlo.
    fn joint_nodes(&self, integ: &IntegrationSpec) -> Result<NodeSet> {
        let m = self.eta_mean.len();
        if integ.wants_quadrature(m, true)? {
            let wn = self.control.quadrature(integ.nodes_per_dim);
            let zn = integ.standard_normal_nodes(m, "cf_eta")?;
            return Ok(wn.product(&zn));
        }
        let mut flat = Vec::with_capacity((m + 1) * integ.draws);
        for i in 0..integ.draws {
            let mut rng = CounterRng::stream(integ.seed, "cf_joint", i as u64);
            flat.push(self.control.draw(&mut rng));
            flat.extend(standard_normals(&mut rng, m));
        }
        Ok(NodeSet::monte_carlo(m + 1, flat))
    }
}

/// Choice probabilities given `(η, w)`: `[P]` for binary models, `P_1..P_J`
/// otherwise.
fn probs_at(model: &UtilityModel, noise: &NoiseDist, off: &[f64], x: &[f64], eta: &[f64]) -> Vec<f64> {
    if model.is_binary() {
        let h = model.h_and_grad(x, eta).0 + off[0];
        vec![noise.survival_v(-h, eta)]
    } else {
        let (u, _) = model.utilities_and_grad(x, eta);
        let us: Vec<f64> = u.iter().zip(off).map(|(a, b)| a + b).collect();
        kernel_probs(noise, &us, eta)
    }
}

/// `Σ_k p_jk(u | η, w) ∂x u_k` (or `f_v(−h | η, w) ∂x h`), flattened.
fn structural_at(
    model: &UtilityModel,
    noise: &NoiseDist,
    off: &[f64],
    x: &[f64],
    eta: &[f64],
) -> Vec<f64> {
    if model.is_binary() {
        let (h, g) = model.h_and_grad(x, eta);
        let f = noise.density_v(-(h + off[0]), eta);
        return g.into_iter().map(|gi| gi * f).collect();
    }
    let (u, g) = model.utilities_and_grad(x, eta);
    let us: Vec<f64> = u.iter().zip(off).map(|(a, b)| a + b).collect();
    let pjk = kernel_jacobian(noise, &us, eta);
    let p = x.len();
    let j_n = u.len();
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

fn outputs(model: &UtilityModel) -> usize {
    if model.is_binary() {
        1
    } else {
        model.alternatives()
    }
}

fn output_name(model: &UtilityModel, j: usize, c: usize) -> String {
    format!("dP{}/d{}", j + 1, slot_name(model, c))
}

/// `P_j(x, w) = ∫ p_j(u(x, η) | η, w) F_η(dη | w)`.
pub fn cond_prob_xw(
    dgp: &TriangularDgp,
    model: &UtilityModel,
    x: &[f64],
    w: f64,
    integ: &IntegrationSpec,
) -> Result<ProbResult> {
    dgp.validate(model)?;
    check_x(model, x)?;
    let nodes = dgp.eta_given_w(w).nodes(integ)?;
    let off = dgp.offsets(model, w);
    let e = nodes.expect_vec(outputs(model), |eta| probs_at(model, &dgp.noise, &off, x, eta));
    Ok(ProbResult {
        value: e.value,
        mc_se: e.se,
        n_effective: e.n,
    })
}

/// Numerical `∂x P_j(x, w)` against `E[Σ_k p_jk ∂x u_k | w]` on an
/// `(x, w)` grid.
pub fn verify_thm5(
    dgp: &TriangularDgp,
    model: &UtilityModel,
    x_grid: &[Vec<f64>],
    w_grid: &[f64],
    ctx: &CheckContext,
) -> Result<DerivativeReport> {
    dgp.validate(model)?;
    let mut rep = ctx.report("thm5");
    let m = outputs(model);
    for x in x_grid {
        check_x(model, x)?;
        let p = x.len();
        for &w in w_grid {
            let nodes = dgp.eta_given_w(w).nodes(&ctx.integ)?;
            let off = dgp.offsets(model, w);
            let lhs = num_jacobian_prob(&nodes, x, m, StepRule::for_nodes(&nodes), |x, eta| {
                probs_at(model, &dgp.noise, &off, x, eta)
            })?;
            let rhs = nodes.expect_vec(m * p, |eta| structural_at(model, &dgp.noise, &off, x, eta));
            let mut at = x.clone();
            at.push(w);
            for j in 0..m {
                for c in 0..p {
                    let i = j * p + c;
                    rep.push(Row::new(
                        &at,
                        output_name(model, j, c),
                        lhs.value[j][c],
                        rhs.value[i],
                        lhs.se[j][c].hypot(rhs.se[i]),
                        ctx.agree(),
                    ));
                }
            }
        }
    }
    rep.note("x column lists the covariates followed by w");
    Ok(rep.finish())
}

/// Averages over the marginal law of `w`: `∫ ∂x P_j(x, w) F_w(dw)` against the
/// unconditional structural average. The left side is built only from
/// conditional probabilities the data identify, i.e. for `w` in
/// `supp(w | X = x)`; without common support the two sides separate.
pub fn avg_over_w(
    dgp: &TriangularDgp,
    model: &UtilityModel,
    x: &[f64],
    ctx: &CheckContext,
) -> Result<DerivativeReport> {
    dgp.validate(model)?;
    check_x(model, x)?;
    let m = outputs(model);
    let p = x.len();
    let k = m * p;
    let support = dgp.conditional_support(x);
    let joint = dgp.joint_nodes(&ctx.integ)?;
    let l = dgp.factor();
    let rule = StepRule::CLOSED_FORM;
    let per_node = |node: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let w = node[0];
        let eta = dgp.eta_from(&l, w, &node[1..]);
        let off = dgp.offsets(model, w);
        let structural = structural_at(model, &dgp.noise, &off, x, &eta);
        let lhs = if support.contains(w) {
            num_jacobian_prob(&NodeSet::point(Vec::new()), x, m, rule, |x, _| {
                probs_at(model, &dgp.noise, &off, x, &eta)
            })
            .expect("validated step")
            .value
            .concat()
        } else {
            vec![0.0; k]
        };
        (lhs, structural)
    };
    let implied = match (&dgp.implied_eta(), dgp.noise_w_shift.iter().all(|s| *s == 0.0)) {
        (Some(e), true) => Some(e.clone()),
        _ => None,
    };
    let (lhs, rhs, diff_se): (Vec<f64>, Vec<f64>, Vec<f64>) = match &implied {
        Some(eta) => {
            let l_est = joint.expect_vec(k, |n| per_node(n).0);
            let nodes = eta.nodes(&ctx.integ)?;
            let off = vec![0.0; m];
            let r_est = nodes.expect_vec(k, |e| structural_at(model, &dgp.noise, &off, x, e));
            let se = l_est.se.iter().zip(&r_est.se).map(|(a, b)| a.hypot(*b)).collect();
            (l_est.value, r_est.value, se)
        }
        None => {
            let est = joint.expect_vec(3 * k, |n| {
                let (a, b) = per_node(n);
                let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
                [a, b, d].concat()
            });
            (
                est.value[..k].to_vec(),
                est.value[k..2 * k].to_vec(),
                est.se[2 * k..].to_vec(),
            )
        }
    };
    let mut rep = ctx.report("cor6");
    for j in 0..m {
        for c in 0..p {
            let i = j * p + c;
            rep.push(Row::new(
                x,
                output_name(model, j, c),
                lhs[i],
                rhs[i],
                diff_se[i],
                ctx.agree(),
            ));
        }
    }
    rep.note(match implied {
        Some(_) => "right side integrates over the implied Gaussian law of eta",
        None => "right side integrates over the joint law of (w, eta)",
    });
    let common = dgp.common_support && dgp.has_common_support_at(x);
    if !common {
        let (lo, hi) = match support {
            Support::Interval(lo, hi) => (lo, hi),
            Support::Point(p) => (p, p),
            Support::Empty => (f64::NAN, f64::NAN),
        };
        rep = rep.with_precondition_failure(format!(
            "support of w given X = {x:?} is [{lo}, {hi}], not the marginal support"
        ));
    }
    Ok(rep.finish())
}

/// How the conditional law of `w` given `X = x` is obtained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LarMethod {
    /// Closed form for Gaussian instruments and controls.
    Analytic,
    /// Simulated `(Z, w)` with `X` within a Silverman-width bin of `x`.
    Binning { draws: usize },
}

/// Law of `w | X = x` in the Gaussian design: mean and standard deviation.
pub fn conditional_w_gaussian(dgp: &TriangularDgp, x: &[f64]) -> Result<(f64, f64)> {
    let (ScalarLaw::Normal { mean: mz, sd: sz }, ScalarLaw::Normal { mean: mw, sd: sw }) =
        (&dgp.instrument, &dgp.control)
    else {
        return Err(Error::Unsupported(
            "closed-form conditional law needs Gaussian instruments and control".into(),
        ));
    };
    if let Support::Point(p) = dgp.conditional_support(x) {
        return Ok((p, 0.0));
    }
    if dgp.conditional_support(x) == Support::Empty {
        return Err(Error::Precondition(format!("x = {x:?} is outside the support of X")));
    }
    let a = &dgp.first_stage;
    let p = a.len();
    let v = DMatrix::from_fn(p, p, |i, j| {
        sw * sw + if i == j { a[i] * a[i] * sz * sz } else { 0.0 }
    });
    let c = DVector::from_element(p, sw * sw);
    let dev = DVector::from_iterator(p, (0..p).map(|i| x[i] - a[i] * mz - mw));
    let vinv = v
        .try_inverse()
        .ok_or_else(|| Error::Precondition("singular covariance of X".into()))?;
    let k = vinv * &c;
    let mean = mw + k.dot(&dev);
    let var = (sw * sw - k.dot(&c)).max(0.0);
    Ok((mean, var.sqrt()))
}

/// Local average response `∫ ∂x P_j(x, w) F_w(dw | X = x)`, flattened
/// `J × x_len` (one row for binary models).
pub fn local_average_response(
    dgp: &TriangularDgp,
    model: &UtilityModel,
    x: &[f64],
    method: LarMethod,
    integ: &IntegrationSpec,
) -> Result<VecEstimate> {
    dgp.validate(model)?;
    check_x(model, x)?;
    let m = outputs(model);
    let p = x.len();
    let w_nodes = match method {
        LarMethod::Analytic => {
            let (mean, sd) = conditional_w_gaussian(dgp, x)?;
            if sd == 0.0 {
                NodeSet::point(vec![mean])
            } else {
                let law = ScalarLaw::Normal { mean, sd };
                if integ.wants_quadrature(1, true)? {
                    law.quadrature(integ.nodes_per_dim)
                } else {
                    let ws = (0..integ.draws)
                        .map(|i| law.draw(&mut CounterRng::stream(integ.seed, "lar_w", i as u64)))
                        .collect();
                    NodeSet::monte_carlo(1, ws)
                }
            }
        }
        LarMethod::Binning { draws } => {
            let mut stats = vec![(0.0, 0.0); p];
            let sims: Vec<(Vec<f64>, f64)> = (0..draws)
                .map(|i| {
                    let (xs, w, _) = dgp.draw(integ.seed, i as u64);
                    (xs, w)
                })
                .collect();
            for (xs, _) in &sims {
                for c in 0..p {
                    stats[c].0 += xs[c];
                    stats[c].1 += xs[c] * xs[c];
                }
            }
            let n = draws as f64;
            let widths: Vec<f64> = stats
                .iter()
                .map(|(s, s2)| silverman(((s2 / n) - (s / n) * (s / n)).max(0.0).sqrt(), draws))
                .collect();
            let kept: Vec<f64> = sims
                .iter()
                .filter(|(xs, _)| (0..p).all(|c| (xs[c] - x[c]).abs() <= 0.5 * widths[c]))
                .map(|(_, w)| *w)
                .collect();
            if kept.len() < 50 {
                return Err(Error::InsufficientData {
                    x0: x.to_vec(),
                    effective: kept.len(),
                    required: 50,
                });
            }
            NodeSet::monte_carlo(1, kept)
        }
    };
    let z_nodes = dgp_eta_nodes(dgp, integ)?;
    let l = dgp.factor();
    let joint = if w_nodes.is_stochastic() && z_nodes.is_stochastic() {
        // Pair the i-th control with the i-th heterogeneity draw.
        let n = w_nodes.len();
        let mut flat = Vec::with_capacity(n * (1 + z_nodes.dim()));
        for i in 0..n {
            flat.push(w_nodes.node(i)[0]);
            flat.extend_from_slice(z_nodes.node(i % z_nodes.len()));
        }
        NodeSet::monte_carlo(1 + z_nodes.dim(), flat)
    } else {
        w_nodes.product(&z_nodes)
    };
    let rule = StepRule::CLOSED_FORM;
    Ok(joint.expect_vec(m * p, |node| {
        let w = node[0];
        let eta = dgp.eta_from(&l, w, &node[1..]);
        let off = dgp.offsets(model, w);
        num_jacobian_prob(&NodeSet::point(Vec::new()), x, m, rule, |x, _| {
            probs_at(model, &dgp.noise, &off, x, &eta)
        })
        .expect("validated step")
        .value
        .concat()
    }))
}

fn dgp_eta_nodes(dgp: &TriangularDgp, integ: &IntegrationSpec) -> Result<NodeSet> {
    integ.standard_normal_nodes(dgp.eta_mean.len(), "lar_eta")
}

/// Local average response as a report row set (information only).
pub fn lar_report(
    dgp: &TriangularDgp,
    model: &UtilityModel,
    x: &[f64],
    ctx: &CheckContext,
) -> Result<DerivativeReport> {
    let analytic = local_average_response(dgp, model, x, LarMethod::Analytic, &ctx.integ);
    let binned = local_average_response(
        dgp,
        model,
        x,
        LarMethod::Binning {
            draws: ctx.integ.draws.max(100_000),
        },
        &ctx.integ,
    )?;
    let mut rep = ctx.report("lar");
    let p = x.len();
    for j in 0..outputs(model) {
        for c in 0..p {
            let i = j * p + c;
            match &analytic {
                Ok(a) => rep.push(Row::new(
                    x,
                    output_name(model, j, c),
                    binned.value[i],
                    a.value[i],
                    binned.se[i].hypot(a.se[i]),
                    Criterion::Info,
                )),
                Err(_) => rep.push(Row::new(
                    x,
                    output_name(model, j, c),
                    binned.value[i],
                    binned.value[i],
                    binned.se[i],
                    Criterion::Info,
                )),
            }
        }
    }
    rep.note("lhs: binned simulation of w given X; rhs: closed-form conditional law");
    Ok(rep.finish())
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic p-value of the two-sample statistic `d` (Kolmogorov
/// distribution with the usual small-sample correction).
pub fn ks_p_value(d: f64, na: usize, nb: usize) -> f64 {
    let ne = (na as f64 * nb as f64) / (na + nb) as f64;
    let s = ne.sqrt();
    let lambda = (s + 0.12 + 0.11 / s) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powi(k as i32 - 1) * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Outcome of a family of two-sample KS tests with a Bonferroni correction.
#[derive(Clone, Debug, PartialEq)]
pub struct KsWitness {
    pub tests: usize,
    pub min_p: f64,
    pub level: f64,
    pub rejected: bool,
}

impl KsWitness {
    pub fn from_p_values(ps: &[f64], level: f64) -> Self {
        let tests = ps.len();
        let min_p = ps.iter().copied().fold(1.0, f64::min);
        Self {
            tests,
            min_p,
            level,
            rejected: tests > 0 && min_p < level / tests as f64,
        }
    }
}

/// Witness for `η ⊥ X | w`: within each of `w_bins` quantile bins of `w`,
/// compares `η_1 − Γ_1 w` between draws with `X_1` below and above the bin
/// median. Removing the slope on `w` keeps the spread of `w` inside a bin
/// from registering as dependence on `X`.
pub fn conditional_independence_witness(
    dgp: &TriangularDgp,
    n: usize,
    w_bins: usize,
    seed: u64,
) -> KsWitness {
    let mut sims: Vec<(f64, f64, f64)> = (0..n)
        .map(|i| {
            let (x, w, eta) = dgp.draw(seed, i as u64);
            (w, x[0], eta[0] - dgp.gamma[0] * w)
        })
        .collect();
    sims.sort_by(|a, b| a.0.total_cmp(&b.0));
    let per = n / w_bins;
    let mut ps = Vec::new();
    for b in 0..w_bins {
        let mut bin: Vec<(f64, f64, f64)> = sims[b * per..(b + 1) * per].to_vec();
        bin.sort_by(|a, b| a.1.total_cmp(&b.1));
        let half = bin.len() / 2;
        let lo: Vec<f64> = bin[..half].iter().map(|s| s.2).collect();
        let hi: Vec<f64> = bin[half..].iter().map(|s| s.2).collect();
        ps.push(ks_p_value(ks_statistic(&lo, &hi), lo.len(), hi.len()));
    }
    KsWitness::from_p_values(&ps, 0.05)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_dgp(gamma: f64) -> TriangularDgp {
        TriangularDgp {
            instrument: ScalarLaw::Normal { mean: 0.0, sd: 1.0 },
            control: ScalarLaw::Normal { mean: 0.0, sd: 1.0 },
            first_stage: vec![1.0],
            eta_mean: vec![1.0],
            gamma: vec![gamma],
            eta_cov: vec![vec![0.5]],
            noise: NoiseDist::LogisticDiff { xi: 0.0 },
            noise_w_shift: Vec::new(),
            common_support: true,
        }
    }

    #[test]
    fn supports() {
        let mut dgp = gaussian_dgp(1.0);
        assert!(dgp.has_common_support_at(&[3.0]));
        dgp.instrument = ScalarLaw::Uniform { lo: -1.0, hi: 1.0 };
        dgp.control = ScalarLaw::Uniform { lo: -1.0, hi: 1.0 };
        assert_eq!(dgp.conditional_support(&[1.0]), Support::Interval(0.0, 1.0));
        assert_eq!(dgp.conditional_support(&[0.0]), Support::Interval(-1.0, 1.0));
        assert_eq!(dgp.conditional_support(&[2.5]), Support::Empty);
        dgp.first_stage = vec![0.0];
        assert_eq!(dgp.conditional_support(&[0.5]), Support::Point(0.5));
    }

    #[test]
    fn gaussian_conditional_law_of_w() {
        // X = Z + w with unit variances: w | X = x ~ N(x/2, 1/2).
        let dgp = gaussian_dgp(1.0);
        let (m, s) = conditional_w_gaussian(&dgp, &[1.2]).unwrap();
        assert!((m - 0.6).abs() < 1e-15);
        assert!((s - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn no_endogeneity_gives_w_free_probabilities() {
        let dgp = gaussian_dgp(0.0);
        let model = UtilityModel::binary_rc(1);
        let integ = IntegrationSpec::gauss_hermite(20);
        let a = cond_prob_xw(&dgp, &model, &[0.7], -1.0, &integ).unwrap();
        let b = cond_prob_xw(&dgp, &model, &[0.7], 2.0, &integ).unwrap();
        assert!((a.value[0] - b.value[0]).abs() < 1e-14);
    }

    #[test]
    fn ks_detects_shift_and_accepts_equal_laws() {
        let a: Vec<f64> = (0..2000).map(|i| (i as f64 + 0.5) / 2000.0).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 0.2).collect();
        let d = ks_statistic(&a, &b);
        assert!((d - 0.2).abs() < 1e-3);
        assert!(ks_p_value(d, 2000, 2000) < 1e-10);
        assert!(ks_p_value(ks_statistic(&a, &a), 2000, 2000) > 0.99);
    }
}
