//! Laws of the heterogeneity vector `η` and of the additive disturbance `v`
//! given `η`.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::choiceprob::IntegrationSpec;
use crate::error::{Error, Result};
use crate::numeric::{
    gauss_hermite_tensor, logistic, logistic_pdf, normal_cdf, normal_pdf, psd_factor, NodeSet,
};
use crate::rng::CounterRng;

/// Largest η dimension integrated by tensor-product Gauss–Hermite.
pub const MAX_QUADRATURE_DIM: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EtaDist {
    Normal { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    PointMass(Vec<f64>),
    Mixture { weights: Vec<f64>, components: Vec<EtaDist> },
}

impl EtaDist {
    pub fn normal(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Self {
        EtaDist::Normal { mean, cov }
    }

    /// `N(mean, I)`.
    pub fn normal_identity(mean: Vec<f64>) -> Self {
        let d = mean.len();
        let cov = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        EtaDist::Normal { mean, cov }
    }

    pub fn dim(&self) -> usize {
        match self {
            EtaDist::Normal { mean, .. } => mean.len(),
            EtaDist::PointMass(b) => b.len(),
            EtaDist::Mixture { components, .. } => components.first().map_or(0, |c| c.dim()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EtaDist::Normal { mean, cov } => {
                let d = mean.len();
                if cov.len() != d || cov.iter().any(|r| r.len() != d) {
                    return Err(Error::config("eta.normal.cov", format!("must be {d}x{d}")));
                }
                if psd_factor(&cov_matrix(cov)).is_none() {
                    return Err(Error::config(
                        "eta.normal.cov",
                        "not symmetric positive semidefinite",
                    ));
                }
                Ok(())
            }
            EtaDist::PointMass(_) => Ok(()),
            EtaDist::Mixture {
                weights,
                components,
            } => {
                if weights.len() != components.len() || components.is_empty() {
                    return Err(Error::config(
                        "eta.mixture",
                        "weights and components must be non-empty and of equal length",
                    ));
                }
                if weights.iter().any(|w| *w < 0.0) {
                    return Err(Error::config("eta.mixture.weights", "negative weight"));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::config(
                        "eta.mixture.weights",
                        format!("weights sum to {total}, not 1"),
                    ));
                }
                let d = components[0].dim();
                for c in components {
                    if c.dim() != d {
                        return Err(Error::dim("eta.mixture component", d, c.dim()));
                    }
                    c.validate()?;
                }
                Ok(())
            }
        }
    }

    /// `E[η]`.
    pub fn mean(&self) -> Vec<f64> {
        match self {
            EtaDist::Normal { mean, .. } => mean.clone(),
            EtaDist::PointMass(b) => b.clone(),
            EtaDist::Mixture {
                weights,
                components,
            } => {
                let mut m = vec![0.0; self.dim()];
                for (w, c) in weights.iter().zip(components) {
                    for (a, b) in m.iter_mut().zip(c.mean()) {
                        *a += w * b;
                    }
                }
                m
            }
        }
    }

    /// `E[ηη']`.
    pub fn second_moment(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        match self {
            EtaDist::Normal { mean, cov } => (0..d)
                .map(|i| (0..d).map(|j| cov[i][j] + mean[i] * mean[j]).collect())
                .collect(),
            EtaDist::PointMass(b) => (0..d)
                .map(|i| (0..d).map(|j| b[i] * b[j]).collect())
                .collect(),
            EtaDist::Mixture {
                weights,
                components,
            } => {
                let mut m = vec![vec![0.0; d]; d];
                for (w, c) in weights.iter().zip(components) {
                    let s = c.second_moment();
                    for i in 0..d {
                        for j in 0..d {
                            m[i][j] += w * s[i][j];
                        }
                    }
                }
                m
            }
        }
    }

    /// Whether every component is Gaussian or degenerate, so Gauss–Hermite applies.
    pub fn is_gaussian_family(&self) -> bool {
        match self {
            EtaDist::Normal { .. } | EtaDist::PointMass(_) => true,
            EtaDist::Mixture { components, .. } => components.iter().all(|c| c.is_gaussian_family()),
        }
    }

    /// A sampler with the covariance factors precomputed.
    pub fn sampler(&self) -> Result<EtaSampler> {
        Ok(match self {
            EtaDist::Normal { mean, cov } => EtaSampler::Normal {
                mean: mean.clone(),
                factor: psd_factor(&cov_matrix(cov))
                    .ok_or_else(|| Error::config("eta.normal.cov", "not positive semidefinite"))?,
            },
            EtaDist::PointMass(b) => EtaSampler::Point(b.clone()),
            EtaDist::Mixture {
                weights,
                components,
            } => EtaSampler::Mixture {
                weights: weights.clone(),
                components: components
                    .iter()
                    .map(|c| c.sampler())
                    .collect::<Result<_>>()?,
            },
        })
    }

    /// One draw from a stream.
    pub fn draw(&self, rng: &mut CounterRng) -> Result<Vec<f64>> {
        Ok(self.sampler()?.draw(rng))
    }

    /// `n` i.i.d. draws; draw `i` comes from stream `(seed, tag, i)`.
    pub fn sample(&self, n: usize, seed: u64, tag: &str) -> Result<Vec<Vec<f64>>> {
        if n == 0 {
            return Err(Error::config("draws", "need at least one draw"));
        }
        self.validate()?;
        let sampler = self.sampler()?;
        Ok((0..n)
            .map(|i| sampler.draw(&mut CounterRng::stream(seed, tag, i as u64)))
            .collect())
    }

    /// Integration nodes for expectations over η under `integ`.
    pub fn nodes(&self, integ: &IntegrationSpec) -> Result<NodeSet> {
        self.validate()?;
        let d = self.dim();
        if let Some(per_dim) = integ.quadrature_nodes(self)? {
            return self.quadrature(per_dim);
        }
        let draws = integ.draws();
        let flat: Vec<f64> = self.sample(draws, integ.seed, "eta")?.concat();
        Ok(NodeSet::monte_carlo(d, flat))
    }

    fn quadrature(&self, per_dim: usize) -> Result<NodeSet> {
        match self {
            EtaDist::PointMass(b) => Ok(NodeSet::point(b.clone())),
            EtaDist::Normal { mean, cov } => {
                let d = mean.len();
                let l = psd_factor(&cov_matrix(cov))
                    .ok_or_else(|| Error::config("eta.normal.cov", "not positive semidefinite"))?;
                let base = gauss_hermite_tensor(d, per_dim);
                Ok(base.map_points(d, |z| affine(mean, &l, z)))
            }
            EtaDist::Mixture {
                weights,
                components,
            } => {
                let parts = weights
                    .iter()
                    .zip(components)
                    .map(|(w, c)| Ok((*w, c.quadrature(per_dim)?)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(NodeSet::mixture(&parts))
            }
        }
    }
}

/// Draws from an [`EtaDist`].
#[derive(Clone, Debug)]
pub enum EtaSampler {
    Normal { mean: Vec<f64>, factor: DMatrix<f64> },
    Point(Vec<f64>),
    Mixture { weights: Vec<f64>, components: Vec<EtaSampler> },
}

impl EtaSampler {
    pub fn draw(&self, rng: &mut CounterRng) -> Vec<f64> {
        match self {
            EtaSampler::Normal { mean, factor } => affine_normal(mean, factor, rng),
            EtaSampler::Point(b) => b.clone(),
            EtaSampler::Mixture {
                weights,
                components,
            } => {
                let u = rng.uniform();
                let mut acc = 0.0;
                let mut pick = components.len() - 1;
                for (k, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                // Rounding in the cumulative sum can land on a zero-weight tail.
                while weights[pick] == 0.0 && pick > 0 {
                    pick -= 1;
                }
                components[pick].draw(&mut rng.split(1))
            }
        }
    }
}

pub(crate) fn cov_matrix(cov: &[Vec<f64>]) -> DMatrix<f64> {
    let d = cov.len();
    DMatrix::from_fn(d, d, |i, j| cov[i][j])
}

fn affine(mean: &[f64], l: &DMatrix<f64>, z: &[f64]) -> Vec<f64> {
    let zv = DVector::from_column_slice(z);
    let lz = l * zv;
    mean.iter().zip(lz.iter()).map(|(m, s)| m + s).collect()
}

pub(crate) fn standard_normals(rng: &mut CounterRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn affine_normal(mean: &[f64], l: &DMatrix<f64>, rng: &mut CounterRng) -> Vec<f64> {
    let z = standard_normals(rng, mean.len());
    affine(mean, l, &z)
}

/// Law of the additive disturbance given `η`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseDist {
    /// Independent standard Gumbel (type I extreme value) per alternative.
    IidGumbel,
    /// Logistic with location `xi`: the binary net disturbance `ξ + (ε₁ − ε₀)`.
    LogisticDiff { xi: f64 },
    /// Normal with the given mean and standard deviation (independent per
    /// alternative in multinomial models).
    Gaussian { mean: f64, sd: f64 },
    /// `base` shifted by `λ'η`. Binary models use the first row of `lambda`;
    /// multinomial models shift alternative `j` by row `j`.
    EtaShifted {
        base: Box<NoiseDist>,
        lambda: Vec<Vec<f64>>,
    },
}

impl NoiseDist {
    pub fn eta_shifted(base: NoiseDist, lambda: Vec<f64>) -> Self {
        NoiseDist::EtaShifted {
            base: Box::new(base),
            lambda: vec![lambda],
        }
    }

    pub fn validate(&self, eta_dim: usize) -> Result<()> {
        match self {
            NoiseDist::Gaussian { sd, .. } if *sd <= 0.0 => {
                Err(Error::config("noise.gaussian.sd", "must be positive"))
            }
            NoiseDist::EtaShifted { base, lambda } => {
                if matches!(**base, NoiseDist::EtaShifted { .. }) {
                    return Err(Error::config("noise.eta_shifted.base", "nested shifts"));
                }
                if lambda.is_empty() || lambda.iter().any(|r| r.len() != eta_dim) {
                    return Err(Error::config(
                        "noise.eta_shifted.lambda",
                        format!("rows must have length {eta_dim}"),
                    ));
                }
                base.validate(eta_dim)
            }
            _ => Ok(()),
        }
    }

    /// Whether the law of `v` given `η` varies with `η`.
    pub fn depends_on_eta(&self) -> bool {
        match self {
            NoiseDist::EtaShifted { lambda, .. } => lambda.iter().flatten().any(|l| *l != 0.0),
            _ => false,
        }
    }

    pub(crate) fn shift(&self, row: usize, eta: &[f64]) -> f64 {
        match self {
            NoiseDist::EtaShifted { lambda, .. } => {
                let r = &lambda[row.min(lambda.len() - 1)];
                r.iter().zip(eta).map(|(a, b)| a * b).sum()
            }
            _ => 0.0,
        }
    }

    pub(crate) fn base(&self) -> &NoiseDist {
        match self {
            NoiseDist::EtaShifted { base, .. } => base,
            other => other,
        }
    }

    /// Scalar density `f_v(v | η)`.
    pub fn density_v(&self, v: f64, eta: &[f64]) -> f64 {
        match self {
            NoiseDist::IidGumbel => {
                let e = (-v).exp();
                if e.is_infinite() {
                    return 0.0;
                }
                e * (-e).exp()
            }
            NoiseDist::LogisticDiff { xi } => logistic_pdf(v - xi),
            NoiseDist::Gaussian { mean, sd } => normal_pdf((v - mean) / sd) / sd,
            NoiseDist::EtaShifted { base, .. } => base.density_v(v - self.shift(0, eta), eta),
        }
    }

    /// Scalar CDF `F_v(v | η)`.
    pub fn cdf_v(&self, v: f64, eta: &[f64]) -> f64 {
        match self {
            NoiseDist::IidGumbel => (-(-v).exp()).exp(),
            NoiseDist::LogisticDiff { xi } => logistic(v - xi),
            NoiseDist::Gaussian { mean, sd } => normal_cdf((v - mean) / sd),
            NoiseDist::EtaShifted { base, .. } => base.cdf_v(v - self.shift(0, eta), eta),
        }
    }

    /// `Pr(v ≥ t | η) = 1 − F_v(t | η)`, computed without cancellation.
    pub fn survival_v(&self, t: f64, eta: &[f64]) -> f64 {
        match self {
            NoiseDist::IidGumbel => -(-(-t).exp()).exp_m1(),
            NoiseDist::LogisticDiff { xi } => logistic(xi - t),
            NoiseDist::Gaussian { mean, sd } => normal_cdf((mean - t) / sd),
            NoiseDist::EtaShifted { base, .. } => base.survival_v(t - self.shift(0, eta), eta),
        }
    }

    /// `f_vv(v | η) = ∂v f_v(v | η)`.
    pub fn ddensity_v(&self, v: f64, eta: &[f64]) -> f64 {
        match self {
            NoiseDist::IidGumbel => self.density_v(v, eta) * ((-v).exp() - 1.0),
            NoiseDist::LogisticDiff { xi } => {
                let f = logistic_pdf(v - xi);
                f * (1.0 - 2.0 * logistic(v - xi))
            }
            NoiseDist::Gaussian { mean, sd } => {
                let z = (v - mean) / sd;
                -z * normal_pdf(z) / (sd * sd)
            }
            NoiseDist::EtaShifted { base, .. } => base.ddensity_v(v - self.shift(0, eta), eta),
        }
    }

    /// Mean of the scalar disturbance given η.
    pub fn mean_v(&self, eta: &[f64]) -> f64 {
        match self {
            NoiseDist::IidGumbel => 0.577_215_664_901_532_9,
            NoiseDist::LogisticDiff { xi } => *xi,
            NoiseDist::Gaussian { mean, .. } => *mean,
            NoiseDist::EtaShifted { base, .. } => base.mean_v(eta) + self.shift(0, eta),
        }
    }

    fn draw_base(&self, rng: &mut CounterRng) -> f64 {
        match self {
            NoiseDist::IidGumbel => -(-rng.uniform().ln()).ln(),
            NoiseDist::LogisticDiff { xi } => {
                let u = rng.uniform();
                xi + (u / (1.0 - u)).ln()
            }
            NoiseDist::Gaussian { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
            NoiseDist::EtaShifted { base, .. } => base.draw_base(rng),
        }
    }

    /// Scalar draw of `v` given `η` (binary models).
    pub fn sample_scalar(&self, eta: &[f64], rng: &mut CounterRng) -> f64 {
        self.draw_base(rng) + self.shift(0, eta)
    }

    /// Vector draw `(v_1, …, v_J)` given `η` (multinomial models).
    pub fn sample_vector(&self, eta: &[f64], alternatives: usize, rng: &mut CounterRng) -> Vec<f64> {
        (0..alternatives)
            .map(|j| self.draw_base(rng) + self.shift(j, eta))
            .collect()
    }
}

/// Heterogeneity: the law of `η` and the law of `v` given `η`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dists {
    pub eta: EtaDist,
    pub noise: NoiseDist,
}

impl Dists {
    pub fn new(eta: EtaDist, noise: NoiseDist) -> Self {
        Self { eta, noise }
    }

    pub fn validate(&self, eta_dim: usize) -> Result<()> {
        if self.eta.dim() != eta_dim {
            return Err(Error::dim("eta", eta_dim, self.eta.dim()));
        }
        self.eta.validate()?;
        self.noise.validate(eta_dim)
    }
}
