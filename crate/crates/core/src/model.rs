//! Structural utility specifications.
//!
//! Binary models are described by the net utility `δ(x, η, v)`; multinomial
//! models by the systematic utilities `u_j(x, η)` to which additive
//! disturbances `v_j` are added. Every family carries an analytic gradient in
//! `x`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of alternatives, covariates per alternative, and whether covariates
/// are alternative specific (`x¹, …, x^J`) or shared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub alternatives: usize,
    pub covariates: usize,
    #[serde(default)]
    pub choice_specific: bool,
}

impl ModelDims {
    pub fn binary(d: usize) -> Self {
        Self {
            alternatives: 2,
            covariates: d,
            choice_specific: false,
        }
    }

    pub fn multinomial(j: usize, d: usize, choice_specific: bool) -> Self {
        Self {
            alternatives: j,
            covariates: d,
            choice_specific,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alternatives < 2 {
            return Err(Error::config("dims.alternatives", "need at least 2 alternatives"));
        }
        if self.covariates < 1 {
            return Err(Error::config("dims.covariates", "need at least 1 covariate"));
        }
        Ok(())
    }
}

/// Closed expression grammar for nonseparable utilities: affine combinations,
/// products, smooth sigmoids and integer powers over covariates `x`, the
/// heterogeneity vector `η`, the index `β0'x` (index family only) and the
/// scalar disturbance `v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expr {
    Const(f64),
    X(usize),
    Eta(usize),
    Index,
    V,
    Sum(Vec<Expr>),
    Product(Vec<Expr>),
    Scale { by: f64, expr: Box<Expr> },
    Tanh(Box<Expr>),
    Sigmoid(Box<Expr>),
    Pow { base: Box<Expr>, exp: u32 },
}

impl Expr {
    pub fn x(i: usize) -> Self {
        Expr::X(i)
    }

    pub fn eta(i: usize) -> Self {
        Expr::Eta(i)
    }

    pub fn sum(terms: Vec<Expr>) -> Self {
        Expr::Sum(terms)
    }

    pub fn product(terms: Vec<Expr>) -> Self {
        Expr::Product(terms)
    }

    pub fn tanh(e: Expr) -> Self {
        Expr::Tanh(Box::new(e))
    }

    pub fn sigmoid(e: Expr) -> Self {
        Expr::Sigmoid(Box::new(e))
    }

    pub fn scale(by: f64, e: Expr) -> Self {
        Expr::Scale {
            by,
            expr: Box::new(e),
        }
    }

    pub fn pow(e: Expr, exp: u32) -> Self {
        Expr::Pow {
            base: Box::new(e),
            exp,
        }
    }

    fn any(&self, pred: &dyn Fn(&Expr) -> bool) -> bool {
        if pred(self) {
            return true;
        }
        match self {
            Expr::Sum(ts) | Expr::Product(ts) => ts.iter().any(|t| t.any(pred)),
            Expr::Scale { expr, .. } => expr.any(pred),
            Expr::Tanh(e) | Expr::Sigmoid(e) => e.any(pred),
            Expr::Pow { base, .. } => base.any(pred),
            _ => false,
        }
    }

    pub fn mentions_v(&self) -> bool {
        self.any(&|e| matches!(e, Expr::V))
    }

    fn check(&self, n_x: usize, n_eta: usize, allow_index: bool, path: &str) -> Result<()> {
        let bad_x = self.any(&|e| matches!(e, Expr::X(i) if *i >= n_x));
        if bad_x {
            return Err(Error::config(path, format!("x index out of range (have {n_x})")));
        }
        let bad_eta = self.any(&|e| matches!(e, Expr::Eta(i) if *i >= n_eta));
        if bad_eta {
            return Err(Error::config(path, format!("eta index out of range (have {n_eta})")));
        }
        if !allow_index && self.any(&|e| matches!(e, Expr::Index)) {
            return Err(Error::config(path, "`index` is only valid in the index family"));
        }
        if self.any(&|e| matches!(e, Expr::Sum(t) | Expr::Product(t) if t.is_empty())) {
            return Err(Error::config(path, "empty sum or product"));
        }
        Ok(())
    }

    /// Value and gradient with respect to the variables seeded in `env`.
    fn eval(&self, env: &Env<'_>) -> Dual {
        match self {
            Expr::Const(c) => Dual::constant(*c, env.nvars),
            Expr::X(i) => {
                let mut d = Dual::constant(env.x[*i], env.nvars);
                if env.x_seeded {
                    d.g[*i] = 1.0;
                }
                d
            }
            Expr::Eta(i) => Dual::constant(env.eta[*i], env.nvars),
            Expr::V => Dual::constant(env.v, env.nvars),
            Expr::Index => Dual {
                v: env.index,
                g: env.index_grad.to_vec(),
            },
            Expr::Sum(ts) => {
                let mut acc = Dual::constant(0.0, env.nvars);
                for t in ts {
                    let d = t.eval(env);
                    acc.v += d.v;
                    for (a, b) in acc.g.iter_mut().zip(&d.g) {
                        *a += b;
                    }
                }
                acc
            }
            Expr::Product(ts) => {
                let mut acc = Dual::constant(1.0, env.nvars);
                for t in ts {
                    let d = t.eval(env);
                    for (a, b) in acc.g.iter_mut().zip(&d.g) {
                        *a = *a * d.v + acc.v * b;
                    }
                    acc.v *= d.v;
                }
                acc
            }
            Expr::Scale { by, expr } => {
                let mut d = expr.eval(env);
                d.v *= by;
                d.g.iter_mut().for_each(|g| *g *= by);
                d
            }
            Expr::Tanh(e) => {
                let mut d = e.eval(env);
                let t = d.v.tanh();
                let dt = 1.0 - t * t;
                d.v = t;
                d.g.iter_mut().for_each(|g| *g *= dt);
                d
            }
            Expr::Sigmoid(e) => {
                let mut d = e.eval(env);
                let s = crate::numeric::logistic(d.v);
                let ds = crate::numeric::logistic_pdf(d.v);
                d.v = s;
                d.g.iter_mut().for_each(|g| *g *= ds);
                d
            }
            Expr::Pow { base, exp } => {
                let mut d = base.eval(env);
                if *exp == 0 {
                    return Dual::constant(1.0, env.nvars);
                }
                let k = *exp as i32;
                let dv = f64::from(*exp) * d.v.powi(k - 1);
                d.v = d.v.powi(k);
                d.g.iter_mut().for_each(|g| *g *= dv);
                d
            }
        }
    }
}

struct Dual {
    v: f64,
    g: Vec<f64>,
}

impl Dual {
    fn constant(v: f64, n: usize) -> Self {
        Dual { v, g: vec![0.0; n] }
    }
}

struct Env<'a> {
    x: &'a [f64],
    eta: &'a [f64],
    v: f64,
    index: f64,
    index_grad: &'a [f64],
    x_seeded: bool,
    nvars: usize,
}

/// The structural family and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Family {
    /// `δ = η'x + v`.
    BinaryRc,
    /// `u_j = η'x^j + ξ_j` (or `η'x + ξ_j` with shared covariates).
    LinearRc { xi: Vec<f64> },
    /// `δ = g(β0'x, η) + v`, or `g(β0'x, η, v)` when `g` mentions `v`.
    Index { beta0: Vec<f64>, link: Expr },
    /// One expression (binary `δ`) or `J` expressions (`u_1 … u_J`).
    General { exprs: Vec<Expr> },
    /// `φ(x, η) = η_a + η_b x + η_c x²`, scalar `x`; as a binary model `δ = φ + v`.
    QuadraticScalar,
}

impl Family {
    pub fn tag(&self) -> &'static str {
        match self {
            Family::BinaryRc => "binary_rc",
            Family::LinearRc { .. } => "linear_rc",
            Family::Index { .. } => "index",
            Family::General { .. } => "general",
            Family::QuadraticScalar => "quadratic_scalar",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtilityModel {
    dims: ModelDims,
    eta_dim: usize,
    family: Family,
}

impl UtilityModel {
    pub fn binary_rc(d: usize) -> Self {
        Self {
            dims: ModelDims::binary(d),
            eta_dim: d,
            family: Family::BinaryRc,
        }
    }

    /// Alternative-specific linear random coefficients `u_j = η'x^j + ξ_j`.
    pub fn linear_rc(xi: Vec<f64>, d: usize) -> Result<Self> {
        Self::new(
            ModelDims::multinomial(xi.len(), d, true),
            d,
            Family::LinearRc { xi },
        )
    }

    pub fn index(beta0: Vec<f64>, link: Expr, eta_dim: usize) -> Result<Self> {
        let d = beta0.len();
        Self::new(ModelDims::binary(d), eta_dim, Family::Index { beta0, link })
    }

    pub fn general(dims: ModelDims, eta_dim: usize, exprs: Vec<Expr>) -> Result<Self> {
        Self::new(dims, eta_dim, Family::General { exprs })
    }

    pub fn quadratic_scalar() -> Self {
        Self {
            dims: ModelDims::binary(1),
            eta_dim: 3,
            family: Family::QuadraticScalar,
        }
    }

    pub fn new(dims: ModelDims, eta_dim: usize, family: Family) -> Result<Self> {
        dims.validate()?;
        let m = Self {
            dims,
            eta_dim,
            family,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let d = self.dims.covariates;
        match &self.family {
            Family::BinaryRc => {
                if self.dims.alternatives != 2 || self.eta_dim != d {
                    return Err(Error::config("params", "binary_rc needs J = 2 and eta_dim = d"));
                }
            }
            Family::LinearRc { xi } => {
                if xi.len() != self.dims.alternatives {
                    return Err(Error::dim("params.xi", self.dims.alternatives, xi.len()));
                }
                if self.eta_dim != d {
                    return Err(Error::dim("eta_dim", d, self.eta_dim));
                }
            }
            Family::Index { beta0, link } => {
                if beta0.len() != d {
                    return Err(Error::dim("params.beta0", d, beta0.len()));
                }
                link.check(0, self.eta_dim, true, "expr[0]")?;
            }
            Family::General { exprs } => {
                let n_x = self.x_len();
                let want = if self.dims.alternatives == 2 && exprs.len() == 1 {
                    1
                } else {
                    self.dims.alternatives
                };
                if exprs.len() != want {
                    return Err(Error::dim("expr", want, exprs.len()));
                }
                for (i, e) in exprs.iter().enumerate() {
                    e.check(n_x, self.eta_dim, false, &format!("expr[{i}]"))?;
                    if exprs.len() > 1 && e.mentions_v() {
                        return Err(Error::config(
                            format!("expr[{i}]"),
                            "multinomial utilities take v additively",
                        ));
                    }
                }
            }
            Family::QuadraticScalar => {
                if d != 1 || self.eta_dim != 3 {
                    return Err(Error::config("params", "quadratic_scalar needs d = 1, eta_dim = 3"));
                }
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn eta_dim(&self) -> usize {
        self.eta_dim
    }

    pub fn alternatives(&self) -> usize {
        if self.is_binary() {
            2
        } else {
            self.dims.alternatives
        }
    }

    /// Length of the flattened covariate vector the model consumes.
    pub fn x_len(&self) -> usize {
        if !self.is_binary() && self.dims.choice_specific {
            self.dims.alternatives * self.dims.covariates
        } else {
            self.dims.covariates
        }
    }

    pub fn is_binary(&self) -> bool {
        match &self.family {
            Family::BinaryRc | Family::Index { .. } | Family::QuadraticScalar => true,
            Family::LinearRc { .. } => false,
            Family::General { exprs } => exprs.len() == 1,
        }
    }

    /// Whether `δ(x, η, v) = h(x, η) + v` holds by construction.
    pub fn is_additive(&self) -> bool {
        match &self.family {
            Family::Index { link, .. } => !link.mentions_v(),
            Family::General { exprs } if exprs.len() == 1 => !exprs[0].mentions_v(),
            _ => true,
        }
    }

    fn require_binary(&self, op: &'static str) -> Result<()> {
        if self.is_binary() {
            Ok(())
        } else {
            Err(Error::WrongFamily {
                op,
                expected: "binary",
                family: self.family.tag().into(),
            })
        }
    }

    fn require_multinomial(&self, op: &'static str) -> Result<()> {
        if self.is_binary() {
            Err(Error::WrongFamily {
                op,
                expected: "multinomial",
                family: self.family.tag().into(),
            })
        } else {
            Ok(())
        }
    }

    fn check_args(&self, x: &[f64], eta: &[f64]) -> Result<()> {
        if x.len() != self.x_len() {
            return Err(Error::dim("x", self.x_len(), x.len()));
        }
        if eta.len() != self.eta_dim {
            return Err(Error::dim("eta", self.eta_dim, eta.len()));
        }
        Ok(())
    }

    /// Binary net utility and its x-gradient in one pass.
    fn delta_dual(&self, x: &[f64], eta: &[f64], v: f64) -> (f64, Vec<f64>) {
        let d = self.dims.covariates;
        match &self.family {
            Family::BinaryRc => {
                let val = dot(eta, x) + v;
                (val, eta.to_vec())
            }
            Family::QuadraticScalar => {
                let x0 = x[0];
                let val = eta[0] + eta[1] * x0 + eta[2] * x0 * x0 + v;
                (val, vec![eta[1] + 2.0 * eta[2] * x0])
            }
            Family::Index { beta0, link } => {
                let env = Env {
                    x,
                    eta,
                    v,
                    index: dot(beta0, x),
                    index_grad: beta0,
                    x_seeded: false,
                    nvars: d,
                };
                let r = link.eval(&env);
                if link.mentions_v() {
                    (r.v, r.g)
                } else {
                    (r.v + v, r.g)
                }
            }
            Family::General { exprs } => {
                let env = Env {
                    x,
                    eta,
                    v,
                    index: 0.0,
                    index_grad: &[],
                    x_seeded: true,
                    nvars: x.len(),
                };
                let r = exprs[0].eval(&env);
                if exprs[0].mentions_v() {
                    (r.v, r.g)
                } else {
                    (r.v + v, r.g)
                }
            }
            Family::LinearRc { .. } => unreachable!("binary families only"),
        }
    }

    /// Net utility `δ(x, η, v)` of a binary model.
    pub fn eval_delta(&self, x: &[f64], eta: &[f64], v: f64) -> Result<f64> {
        self.require_binary("eval_delta")?;
        self.check_args(x, eta)?;
        Ok(self.delta_dual(x, eta, v).0)
    }

    /// `∂x δ(x, η, v)`.
    pub fn grad_x_delta(&self, x: &[f64], eta: &[f64], v: f64) -> Result<Vec<f64>> {
        self.require_binary("grad_x_delta")?;
        self.check_args(x, eta)?;
        Ok(self.delta_dual(x, eta, v).1)
    }

    /// The canonical additive form `h(x, η)` with `δ ≥ 0 ⟺ h + v ≥ 0`.
    pub fn canonical_h(&self, x: &[f64], eta: &[f64]) -> Result<f64> {
        self.require_binary("canonical_h")?;
        if !self.is_additive() {
            return Err(Error::Unsupported(
                "canonical form of a net utility that is not additive in v".into(),
            ));
        }
        self.eval_delta(x, eta, 0.0)
    }

    /// `h(x, η)` together with `∂x h(x, η)`; unchecked fast path.
    pub(crate) fn h_and_grad(&self, x: &[f64], eta: &[f64]) -> (f64, Vec<f64>) {
        self.delta_dual(x, eta, 0.0)
    }

    /// `∂x h` at the index value `u` for the index family: `∂u g(u, η)`.
    pub fn index_link(&self, u: f64, eta: &[f64]) -> Result<(f64, f64)> {
        match &self.family {
            Family::Index { link, .. } => {
                if link.mentions_v() {
                    return Err(Error::Unsupported("index link that is not additive in v".into()));
                }
                let env = Env {
                    x: &[],
                    eta,
                    v: 0.0,
                    index: u,
                    index_grad: &[1.0],
                    x_seeded: false,
                    nvars: 1,
                };
                let r = link.eval(&env);
                Ok((r.v, r.g[0]))
            }
            _ => Err(Error::WrongFamily {
                op: "index_link",
                expected: "index",
                family: self.family.tag().into(),
            }),
        }
    }

    pub fn beta0(&self) -> Option<&[f64]> {
        match &self.family {
            Family::Index { beta0, .. } => Some(beta0),
            _ => None,
        }
    }

    fn utilities_dual(&self, x: &[f64], eta: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let j = self.dims.alternatives;
        let d = self.dims.covariates;
        let p = x.len();
        match &self.family {
            Family::LinearRc { xi } => {
                let mut u = Vec::with_capacity(j);
                let mut g = Vec::with_capacity(j);
                for k in 0..j {
                    let xk = if self.dims.choice_specific {
                        &x[k * d..(k + 1) * d]
                    } else {
                        x
                    };
                    u.push(dot(eta, xk) + xi[k]);
                    let mut row = vec![0.0; p];
                    if self.dims.choice_specific {
                        row[k * d..(k + 1) * d].copy_from_slice(eta);
                    } else {
                        row.copy_from_slice(eta);
                    }
                    g.push(row);
                }
                (u, g)
            }
            Family::General { exprs } => {
                let env = Env {
                    x,
                    eta,
                    v: 0.0,
                    index: 0.0,
                    index_grad: &[],
                    x_seeded: true,
                    nvars: p,
                };
                let mut u = Vec::with_capacity(j);
                let mut g = Vec::with_capacity(j);
                for e in exprs {
                    let r = e.eval(&env);
                    u.push(r.v);
                    g.push(r.g);
                }
                (u, g)
            }
            _ => unreachable!("multinomial families only"),
        }
    }

    /// Systematic utilities `(u_1(x, η), …, u_J(x, η))`.
    pub fn eval_utilities(&self, x: &[f64], eta: &[f64]) -> Result<Vec<f64>> {
        self.require_multinomial("eval_utilities")?;
        self.check_args(x, eta)?;
        Ok(self.utilities_dual(x, eta).0)
    }

    /// `∂x u_k(x, η)` for every alternative: a `J × x_len` array.
    pub fn grad_x_utilities(&self, x: &[f64], eta: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.require_multinomial("grad_x_utilities")?;
        self.check_args(x, eta)?;
        Ok(self.utilities_dual(x, eta).1)
    }

    pub(crate) fn utilities_and_grad(&self, x: &[f64], eta: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        self.utilities_dual(x, eta)
    }

    /// Largest gradient norm of `δ` (or of any `u_j`) over probe points, a
    /// witness for the bounded-derivative requirement.
    pub fn max_gradient_norm(&self, probes: &[(Vec<f64>, Vec<f64>, f64)]) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (x, eta, v) in probes {
            let grads = if self.is_binary() {
                vec![self.grad_x_delta(x, eta, *v)?]
            } else {
                self.grad_x_utilities(x, eta)?
            };
            for g in grads {
                worst = worst.max(dot(&g, &g).sqrt());
            }
        }
        Ok(worst)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central-difference step used to cross-check analytic gradients.
pub fn fd_step(x: f64) -> f64 {
    1e-4 * x.abs().max(1.0)
}

/// Serializable model description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: String,
    pub dims: ModelDims,
    #[serde(default)]
    pub params: ModelParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expr: Option<Vec<Expr>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_dim: Option<usize>,
}

impl ModelSpec {
    pub fn build(&self) -> Result<UtilityModel> {
        self.dims.validate()?;
        let d = self.dims.covariates;
        let need_expr = || -> Result<Vec<Expr>> {
            self.expr
                .clone()
                .ok_or_else(|| Error::config("model.expr", "required for this family"))
        };
        match self.family.as_str() {
            "binary_rc" => {
                if self.dims.alternatives != 2 {
                    return Err(Error::config("model.dims.alternatives", "binary_rc is binary"));
                }
                Ok(UtilityModel::binary_rc(d))
            }
            "linear_rc" => {
                let xi = self
                    .params
                    .xi
                    .clone()
                    .unwrap_or_else(|| vec![0.0; self.dims.alternatives]);
                UtilityModel::new(self.dims, d, Family::LinearRc { xi })
            }
            "index" => {
                let beta0 = self
                    .params
                    .beta0
                    .clone()
                    .ok_or_else(|| Error::config("model.params.beta0", "required for index"))?;
                let mut e = need_expr()?;
                if e.len() != 1 {
                    return Err(Error::dim("model.expr", 1, e.len()));
                }
                let eta_dim = self.params.eta_dim.unwrap_or(0);
                UtilityModel::new(
                    ModelDims::binary(d),
                    eta_dim,
                    Family::Index {
                        beta0,
                        link: e.remove(0),
                    },
                )
            }
            "general" => {
                let eta_dim = self
                    .params
                    .eta_dim
                    .ok_or_else(|| Error::config("model.params.eta_dim", "required for general"))?;
                UtilityModel::new(self.dims, eta_dim, Family::General { exprs: need_expr()? })
            }
            "quadratic_scalar" => Ok(UtilityModel::quadratic_scalar()),
            other => Err(Error::config("model.family", format!("unknown family `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_rc_evaluates_affine_net_utility() {
        let m = UtilityModel::binary_rc(2);
        assert_eq!(m.eval_delta(&[1.0, 0.0], &[2.0, -1.0], 0.5).unwrap(), 2.5);
        assert_eq!(m.eval_delta(&[0.0, 0.0], &[3.0, 7.0], -1.25).unwrap(), -1.25);
        assert_eq!(m.grad_x_delta(&[0.3, 9.0], &[2.0, -1.0], 0.0).unwrap(), vec![2.0, -1.0]);
        assert_eq!(m.canonical_h(&[0.0, 0.0], &[2.0, -1.0]).unwrap(), 0.0);
    }

    #[test]
    fn tanh_model_at_zero() {
        let dims = ModelDims::binary(1);
        let m = UtilityModel::general(dims, 1, vec![Expr::tanh(Expr::product(vec![Expr::eta(0), Expr::x(0)]))])
            .unwrap();
        assert_eq!(m.eval_delta(&[0.0], &[1.7], 0.3).unwrap(), 0.3);
        assert_eq!(m.grad_x_delta(&[0.0], &[1.7], 0.0).unwrap(), vec![1.7]);
        let x = 0.4;
        assert_eq!(m.canonical_h(&[x], &[1.7]).unwrap(), (1.7f64 * x).tanh());
    }

    #[test]
    fn quadratic_scalar_gradient() {
        let m = UtilityModel::quadratic_scalar();
        let g = m.grad_x_delta(&[1.5], &[0.1, 2.0, -3.0], 0.0).unwrap();
        assert_eq!(g, vec![2.0 - 2.0 * 3.0 * 1.5]);
    }

    #[test]
    fn linear_rc_utilities() {
        let m = UtilityModel::linear_rc(vec![1.0, 0.0], 1).unwrap();
        assert_eq!(m.eval_utilities(&[2.0, -1.0], &[1.0]).unwrap(), vec![3.0, -1.0]);
        let m0 = UtilityModel::linear_rc(vec![0.0, 0.0], 1).unwrap();
        assert_eq!(m0.eval_utilities(&[0.0, 0.0], &[5.0]).unwrap(), vec![0.0, 0.0]);
        let m3 = UtilityModel::linear_rc(vec![0.5, -1.0, 2.0], 2).unwrap();
        assert_eq!(
            m3.eval_utilities(&[0.0; 6], &[1.0, 1.0]).unwrap(),
            vec![0.5, -1.0, 2.0]
        );
        let g = m3.grad_x_utilities(&[0.0; 6], &[3.0, 4.0]).unwrap();
        assert_eq!(g[1], vec![0.0, 0.0, 3.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn wrong_family_and_dimension_errors() {
        let bin = UtilityModel::binary_rc(2);
        assert!(matches!(bin.eval_utilities(&[0.0, 0.0], &[0.0, 0.0]), Err(Error::WrongFamily { .. })));
        assert!(matches!(bin.eval_delta(&[0.0], &[0.0, 0.0], 0.0), Err(Error::Dimension { .. })));
        let multi = UtilityModel::linear_rc(vec![0.0, 0.0], 1).unwrap();
        assert!(matches!(multi.eval_delta(&[0.0, 0.0], &[0.0], 0.0), Err(Error::WrongFamily { .. })));
    }

    #[test]
    fn nonadditive_canonical_form_is_unsupported() {
        let dims = ModelDims::binary(1);
        let e = Expr::product(vec![Expr::sum(vec![Expr::x(0), Expr::V]), Expr::Const(2.0)]);
        let m = UtilityModel::general(dims, 0, vec![e]).unwrap();
        assert!(!m.is_additive());
        assert!(matches!(m.canonical_h(&[0.0], &[]), Err(Error::Unsupported(_))));
        assert_eq!(m.eval_delta(&[1.0], &[], 0.5).unwrap(), 3.0);
    }

    #[test]
    fn spec_round_trip_through_json() {
        let json = r#"{
            "family": "index",
            "dims": {"alternatives": 2, "covariates": 2},
            "params": {"beta0": [2.0, 1.0], "eta_dim": 1},
            "expr": [{"sum": ["index", {"scale": {"by": 0.5, "expr": {"tanh": {"product": ["index", {"eta": 0}]}}}}]}]
        }"#;
        let spec: ModelSpec = serde_json::from_str(json).unwrap();
        let m = spec.build().unwrap();
        assert_eq!(m.beta0().unwrap(), &[2.0, 1.0]);
        let back: ModelSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
        let bad = r#"{"family": "binary_rc", "dims": {"alternatives": 2, "covariates": 1}, "bogus": 1}"#;
        assert!(serde_json::from_str::<ModelSpec>(bad).is_err());
    }
}
