//! Simulated samples and local-linear kernel estimators of choice
//! probabilities and their derivatives, for cross sections and for the
//! diagonal of a two-period panel.

use std::io::{self, Write};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::choiceprob::check_dists;
use crate::distributions::{Dists, EtaDist};
use crate::error::{Error, Result};
use crate::model::UtilityModel;
use crate::numeric::dominant_direction;
use crate::panel::PanelDgp;
use crate::rng::CounterRng;

/// Minimum number of observations within two bandwidths of the evaluation
/// point.
pub const MIN_WINDOW: usize = 50;

/// Gaussian weights are truncated beyond this many bandwidths.
const GAUSSIAN_REACH: f64 = 6.0;

#[derive(Clone, Debug, PartialEq)]
pub struct CrossSectionSample {
    pub x: Vec<Vec<f64>>,
    /// Chosen alternative: `0/1` for binary models, `0..J` otherwise.
    pub y: Vec<usize>,
    pub alternatives: usize,
    pub binary: bool,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PanelSample {
    pub x1: Vec<Vec<f64>>,
    pub x2: Vec<Vec<f64>>,
    pub y1: Vec<usize>,
    pub y2: Vec<usize>,
    pub alternatives: usize,
    pub binary: bool,
    pub config_hash: String,
    pub seed: u64,
}

fn y_label(binary: bool, y: usize) -> usize {
    if binary {
        y
    } else {
        y + 1
    }
}

fn write_row<W: Write>(out: &mut W, xs: &[&[f64]], ys: &[usize]) -> io::Result<()> {
    let mut first = true;
    for x in xs {
        for v in x.iter() {
            if !first {
                write!(out, ",")?;
            }
            write!(out, "{v}")?;
            first = false;
        }
    }
    for y in ys {
        write!(out, ",{y}")?;
    }
    writeln!(out)
}

impl CrossSectionSample {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Header `x1,…,xp,y`; multinomial choices are written as `1..J`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        let p = self.x.first().map_or(0, Vec::len);
        let names: Vec<String> = (1..=p).map(|c| format!("x{c}")).collect();
        writeln!(out, "{},y", names.join(","))?;
        for (x, y) in self.x.iter().zip(&self.y) {
            write_row(out, &[x], &[y_label(self.binary, *y)])?;
        }
        Ok(())
    }

    /// Indicator responses `1{Y = j}`: one column for binary samples
    /// (`Y = 1`), `J` columns otherwise.
    fn responses(&self) -> Vec<Vec<f64>> {
        self.y
            .iter()
            .map(|y| indicators(self.binary, self.alternatives, *y))
            .collect()
    }
}

impl PanelSample {
    pub fn len(&self) -> usize {
        self.y1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y1.is_empty()
    }

    /// Header `x1_1,…,x1_p,x2_1,…,x2_p,y1,y2`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        let p = self.x1.first().map_or(0, Vec::len);
        let mut names: Vec<String> = (1..=p).map(|c| format!("x1_{c}")).collect();
        names.extend((1..=p).map(|c| format!("x2_{c}")));
        writeln!(out, "{},y1,y2", names.join(","))?;
        for i in 0..self.len() {
            write_row(
                out,
                &[&self.x1[i], &self.x2[i]],
                &[
                    y_label(self.binary, self.y1[i]),
                    y_label(self.binary, self.y2[i]),
                ],
            )?;
        }
        Ok(())
    }
}

fn indicators(binary: bool, alternatives: usize, y: usize) -> Vec<f64> {
    if binary {
        vec![y as f64]
    } else {
        (0..alternatives).map(|j| f64::from(u8::from(j == y))).collect()
    }
}

/// Draws `n` observations: `X` from `x_law` (flattened covariates), the
/// disturbances from `dists`, and the utility-maximizing choice.
pub fn simulate_cross_section(
    model: &UtilityModel,
    dists: &Dists,
    x_law: &EtaDist,
    n: usize,
    seed: u64,
) -> Result<CrossSectionSample> {
    check_dists(model, dists)?;
    x_law.validate()?;
    if x_law.dim() != model.x_len() {
        return Err(Error::dim("x_law", model.x_len(), x_law.dim()));
    }
    let xs = x_law.sampler()?;
    let es = dists.eta.sampler()?;
    let j_n = model.alternatives();
    let rows: Vec<(Vec<f64>, usize)> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = CounterRng::stream(seed, "sample_cs", i);
            let x = xs.draw(&mut rng);
            let eta = es.draw(&mut rng);
            let y = if model.is_binary() {
                let v = dists.noise.sample_scalar(&eta, &mut rng);
                let d = model.eval_delta(&x, &eta, v).expect("validated model");
                usize::from(d >= 0.0)
            } else {
                let v = dists.noise.sample_vector(&eta, j_n, &mut rng);
                let u = model.eval_utilities(&x, &eta).expect("validated model");
                argmax(u.iter().zip(&v).map(|(a, b)| a + b))
            };
            (x, y)
        })
        .collect();
    let (x, y) = rows.into_iter().unzip();
    Ok(CrossSectionSample {
        x,
        y,
        alternatives: j_n,
        binary: model.is_binary(),
        config_hash: String::new(),
        seed,
    })
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, u) in it.enumerate() {
        if u > best.1 {
            best = (j, u);
        }
    }
    best.0
}

/// Draws `n` two-period units from `dgp`.
pub fn simulate_panel(
    dgp: &PanelDgp,
    model: &UtilityModel,
    n: usize,
    seed: u64,
) -> Result<PanelSample> {
    dgp.validate(model)?;
    let units: Vec<_> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let u = dgp.draw_unit(model, seed, i);
            let (y1, y2) = (u.choice(dgp, model, 1), u.choice(dgp, model, 2));
            (u.x1, u.x2, y1, y2)
        })
        .collect();
    let mut s = PanelSample {
        x1: Vec::with_capacity(n),
        x2: Vec::with_capacity(n),
        y1: Vec::with_capacity(n),
        y2: Vec::with_capacity(n),
        alternatives: model.alternatives(),
        binary: model.is_binary(),
        config_hash: String::new(),
        seed,
    };
    for (x1, x2, y1, y2) in units {
        s.x1.push(x1);
        s.x2.push(x2);
        s.y1.push(y1);
        s.y2.push(y2);
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Gaussian,
    Epanechnikov,
}

impl KernelKind {
    fn weight(&self, u: f64) -> f64 {
        match self {
            KernelKind::Gaussian if u.abs() <= GAUSSIAN_REACH => (-0.5 * u * u).exp(),
            KernelKind::Gaussian => 0.0,
            KernelKind::Epanechnikov => (1.0 - u * u).max(0.0),
        }
    }

    fn reach(&self) -> f64 {
        match self {
            KernelKind::Gaussian => GAUSSIAN_REACH,
            KernelKind::Epanechnikov => 1.0,
        }
    }
}

/// What a rule-of-thumb bandwidth targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthTarget {
    Level,
    Derivative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidth {
    Rule(BandwidthTarget),
    Values(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub kernel: KernelKind,
    pub bandwidth: Bandwidth,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            kernel: KernelKind::Gaussian,
            bandwidth: Bandwidth::Rule(BandwidthTarget::Derivative),
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Values(b) = &self.bandwidth {
            if b.is_empty() || b.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::config("kernel.bandwidth", "must be positive reals"));
            }
        }
        Ok(())
    }

    fn resolve(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.validate()?;
        let d = xs.first().map_or(0, Vec::len);
        match &self.bandwidth {
            Bandwidth::Rule(t) => Ok(bandwidth_rule(xs, *t)),
            Bandwidth::Values(b) if b.len() == 1 => Ok(vec![b[0]; d]),
            Bandwidth::Values(b) if b.len() == d => Ok(b.clone()),
            Bandwidth::Values(b) => Err(Error::dim("kernel.bandwidth", d, b.len())),
        }
    }
}

/// `b_i = 1.06 σ̂_i n^{−1/(d+4)}` for levels and `n^{−1/(d+6)}` for
/// derivatives.
pub fn bandwidth_rule(xs: &[Vec<f64>], target: BandwidthTarget) -> Vec<f64> {
    let n = xs.len();
    let d = xs.first().map_or(0, Vec::len);
    let expo = match target {
        BandwidthTarget::Level => -1.0 / (d as f64 + 4.0),
        BandwidthTarget::Derivative => -1.0 / (d as f64 + 6.0),
    };
    let nf = n as f64;
    (0..d)
        .map(|c| {
            let m = xs.iter().map(|x| x[c]).sum::<f64>() / nf;
            let v = xs.iter().map(|x| (x[c] - m).powi(2)).sum::<f64>() / (nf - 1.0);
            1.06 * v.sqrt() * nf.powf(expo)
        })
        .collect()
}

/// Local-linear fit of one response at `x0`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalFit {
    pub level: f64,
    pub slope: Vec<f64>,
    pub level_se: f64,
    pub slope_se: Vec<f64>,
    /// Kish effective sample size `(Σw)² / Σw²`.
    pub n_eff: f64,
    /// Observations within two bandwidths of `x0` in every coordinate.
    pub n_window: usize,
    pub bandwidth: Vec<f64>,
}

/// Observations with nonzero kernel weight at `x0`: indices and weights.
fn window(xs: &[Vec<f64>], x0: &[f64], b: &[f64], kernel: KernelKind) -> (Vec<usize>, Vec<f64>) {
    let reach = kernel.reach();
    let mut idx = Vec::new();
    let mut w = Vec::new();
    for (i, x) in xs.iter().enumerate() {
        let mut wi = 1.0;
        for c in 0..x0.len() {
            let u = (x[c] - x0[c]) / b[c];
            if u.abs() > reach {
                wi = 0.0;
                break;
            }
            wi *= kernel.weight(u);
        }
        if wi > 0.0 {
            idx.push(i);
            w.push(wi);
        }
    }
    (idx, w)
}

/// Solves the weighted normal equations for design rows `z` (leading 1)
/// and responses `y`: returns `(Z'WZ)⁻¹` and the coefficient matrix.
fn normal_equations<'a>(
    x0: &[f64],
    obs: impl Iterator<Item = (&'a [f64], f64, &'a [f64])>,
    p: usize,
    k: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DMatrix::<f64>::zeros(p, k);
    for (z, wi, y) in obs {
        for r in 0..p {
            let wz = wi * z[r];
            for s in 0..=r {
                a[(r, s)] += wz * z[s];
            }
            for j in 0..k {
                rhs[(r, j)] += wz * y[j];
            }
        }
    }
    for r in 0..p {
        for s in 0..r {
            a[(s, r)] = a[(r, s)];
        }
    }
    let scale = (0..p).map(|r| a[(r, r)]).fold(0.0, f64::max);
    let eig = a.clone().symmetric_eigenvalues();
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 1e-12 * scale) {
        return Err(Error::SingularFit { x0: x0.to_vec() });
    }
    let inv = a
        .try_inverse()
        .ok_or_else(|| Error::SingularFit { x0: x0.to_vec() })?;
    let beta = &inv * &rhs;
    Ok((inv, beta))
}

fn design_row(x: &[f64], x0: &[f64]) -> Vec<f64> {
    let mut z = Vec::with_capacity(x0.len() + 1);
    z.push(1.0);
    z.extend(x.iter().zip(x0).map(|(a, b)| a - b));
    z
}

/// Weighted least squares of each response column on `(1, x − x0)` over
/// the rows in `rows`, with sandwich standard errors.
fn wls(
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    x0: &[f64],
    rows: &[usize],
    w: &[f64],
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let p = x0.len() + 1;
    let k = ys.first().map_or(0, Vec::len);
    let zs: Vec<Vec<f64>> = rows.iter().map(|&i| design_row(&xs[i], x0)).collect();
    let obs = zs
        .iter()
        .zip(w)
        .zip(rows)
        .map(|((z, wi), &i)| (z.as_slice(), *wi, ys[i].as_slice()));
    let (inv, beta) = normal_equations(x0, obs, p, k)?;
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let bj = beta.column(j);
        let mut meat = DMatrix::<f64>::zeros(p, p);
        for ((z, &wi), &i) in zs.iter().zip(w).zip(rows) {
            let fit: f64 = (0..p).map(|r| z[r] * bj[r]).sum();
            let e = wi * (ys[i][j] - fit);
            for r in 0..p {
                for s in 0..p {
                    meat[(r, s)] += e * e * z[r] * z[s];
                }
            }
        }
        let cov = &inv * meat * &inv;
        let coef: Vec<f64> = bj.iter().copied().collect();
        let se: Vec<f64> = (0..p).map(|r| cov[(r, r)].max(0.0).sqrt()).collect();
        out.push((coef, se));
    }
    Ok(out)
}

/// Local-linear regression of each response column on `(1, x − x0)`.
pub fn local_linear(
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    x0: &[f64],
    b: &[f64],
    kernel: KernelKind,
) -> Result<Vec<LocalFit>> {
    if b.len() != x0.len() {
        return Err(Error::dim("bandwidth", x0.len(), b.len()));
    }
    let (rows, w) = window(xs, x0, b, kernel);
    let n_window = rows
        .iter()
        .filter(|&&i| (0..x0.len()).all(|c| (xs[i][c] - x0[c]).abs() <= 2.0 * b[c]))
        .count();
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|v| v * v).sum();
    let n_eff = if sw2 > 0.0 { sw * sw / sw2 } else { 0.0 };
    if n_window < MIN_WINDOW {
        return Err(Error::InsufficientData {
            x0: x0.to_vec(),
            effective: n_window,
            required: MIN_WINDOW,
        });
    }
    Ok(wls(xs, ys, x0, &rows, &w)?
        .into_iter()
        .map(|(coef, se)| LocalFit {
            level: coef[0],
            slope: coef[1..].to_vec(),
            level_se: se[0],
            slope_se: se[1..].to_vec(),
            n_eff,
            n_window,
            bandwidth: b.to_vec(),
        })
        .collect())
}

/// `P̂_j(x0)` and `∂̂P_j(x0)` for every alternative (a single fit for `Y = 1`
/// in a binary sample).
pub fn local_linear_fit(
    sample: &CrossSectionSample,
    x0: &[f64],
    kcfg: &KernelConfig,
) -> Result<Vec<LocalFit>> {
    let b = kcfg.resolve(&sample.x)?;
    local_linear(&sample.x, &sample.responses(), x0, &b, kcfg.kernel)
}

/// A derivative ratio with its bootstrap uncertainty.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioCi {
    pub value: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
}

impl RatioCi {
    pub fn covers(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatioEstimate {
    pub fit: LocalFit,
    pub reference: usize,
    /// Bootstrap standard errors of the slopes.
    pub slope_boot_se: Vec<f64>,
    /// `∂̂_c / ∂̂_reference` for every `c`; `None` for the reference itself and
    /// whenever `|∂̂_reference|` is within three bootstrap standard errors of
    /// zero.
    pub ratios: Vec<Option<RatioCi>>,
}

/// Number of bootstrap resamples used for ratio intervals.
pub const BOOTSTRAP_RESAMPLES: usize = 200;

/// Ratios of `∂̂P(0)` components against component `reference`, with
/// normal-approximation 95% intervals from a nonparametric bootstrap.
///
/// Only observations with nonzero kernel weight affect the fit, so each
/// resample draws how many of the `n` resampled observations land in the
/// window and then resamples that many from the window alone; this has the
/// same law as resampling the full sample.
pub fn estimate_mean_coeff_ratio(
    sample: &CrossSectionSample,
    kcfg: &KernelConfig,
    reference: usize,
    seed: u64,
) -> Result<RatioEstimate> {
    if !sample.binary {
        return Err(Error::Unsupported("coefficient ratios need a binary sample".into()));
    }
    let p = sample.x.first().map_or(0, Vec::len);
    if reference >= p {
        return Err(Error::dim("reference component", p, reference + 1));
    }
    let x0 = vec![0.0; p];
    let b = kcfg.resolve(&sample.x)?;
    let ys = sample.responses();
    let fit = local_linear(&sample.x, &ys, &x0, &b, kcfg.kernel)?.remove(0);
    let (rows, w) = window(&sample.x, &x0, &b, kcfg.kernel);
    let zs: Vec<Vec<f64>> = rows.iter().map(|&i| design_row(&sample.x[i], &x0)).collect();
    let n = sample.len();
    let frac = rows.len() as f64 / n as f64;
    let boots: Vec<Option<Vec<f64>>> = (0..BOOTSTRAP_RESAMPLES as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = CounterRng::stream(seed, "bootstrap", r);
            let m = Binomial::new(n as u64, frac).expect("valid fraction").sample(&mut rng);
            let pick: Vec<usize> = (0..m).map(|_| rng.random_range(0..rows.len())).collect();
            let obs = pick
                .iter()
                .map(|&t| (zs[t].as_slice(), w[t], ys[rows[t]].as_slice()));
            normal_equations(&x0, obs, p + 1, 1)
                .ok()
                .map(|(_, beta)| beta.column(0).iter().skip(1).copied().collect())
        })
        .collect();
    let good: Vec<&Vec<f64>> = boots.iter().flatten().collect();
    if good.len() < 2 {
        return Err(Error::SingularFit { x0 });
    }
    let sd = |f: &dyn Fn(&Vec<f64>) -> f64| -> f64 {
        let vals: Vec<f64> = good.iter().map(|s| f(s)).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
    };
    let slope_boot_se: Vec<f64> = (0..p).map(|c| sd(&|s: &Vec<f64>| s[c])).collect();
    let denom = fit.slope[reference];
    let stable = denom.abs() > 3.0 * slope_boot_se[reference];
    let ratios = (0..p)
        .map(|c| {
            if c == reference || !stable {
                return None;
            }
            let value = fit.slope[c] / denom;
            let se = sd(&|s: &Vec<f64>| s[c] / s[reference]);
            Some(RatioCi {
                value,
                se,
                lo: value - 1.959964 * se,
                hi: value + 1.959964 * se,
            })
        })
        .collect();
    Ok(RatioEstimate {
        fit,
        reference,
        slope_boot_se,
        ratios,
    })
}

/// Slopes in `X2` of `E[Y_j2 − Y_j1 | X1, X2]` at `X1 = X2 = x_diag`.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelDiagFit {
    /// `J × p` (one row for binary samples).
    pub slope: Vec<Vec<f64>>,
    pub slope_se: Vec<Vec<f64>>,
    /// Fitted `E[Y_j2 − Y_j1 | X]` at the diagonal point.
    pub intercept: Vec<f64>,
    pub intercept_se: Vec<f64>,
    pub n_eff: f64,
    pub bandwidth: Vec<f64>,
}

/// Local-linear regression of `Y_j2 − Y_j1` on the concatenated `(X1, X2)`
/// at `(x_diag, x_diag)`; returns the `X2` slope block.
pub fn panel_diag_estimator(
    sample: &PanelSample,
    x_diag: &[f64],
    kcfg: &KernelConfig,
) -> Result<PanelDiagFit> {
    let p = x_diag.len();
    if sample.x1.first().map_or(0, Vec::len) != p {
        return Err(Error::dim("x_diag", sample.x1.first().map_or(0, Vec::len), p));
    }
    let xs: Vec<Vec<f64>> = sample
        .x1
        .iter()
        .zip(&sample.x2)
        .map(|(a, b)| [a.as_slice(), b.as_slice()].concat())
        .collect();
    let ys: Vec<Vec<f64>> = sample
        .y1
        .iter()
        .zip(&sample.y2)
        .map(|(a, b)| {
            let i1 = indicators(sample.binary, sample.alternatives, *a);
            let i2 = indicators(sample.binary, sample.alternatives, *b);
            i2.iter().zip(&i1).map(|(u, v)| u - v).collect()
        })
        .collect();
    let x0 = [x_diag, x_diag].concat();
    let b = kcfg.resolve(&xs)?;
    let fits = local_linear(&xs, &ys, &x0, &b, kcfg.kernel)?;
    let n_eff = fits[0].n_eff;
    Ok(PanelDiagFit {
        slope: fits.iter().map(|f| f.slope[p..].to_vec()).collect(),
        slope_se: fits.iter().map(|f| f.slope_se[p..].to_vec()).collect(),
        intercept: fits.iter().map(|f| f.level).collect(),
        intercept_se: fits.iter().map(|f| f.level_se).collect(),
        n_eff,
        bandwidth: b,
    })
}

/// Direction of a coefficient vector from diagonal slopes stacked over grid
/// points (each slope row is proportional to it on the diagonal of a
/// linear-index panel).
pub fn panel_direction(fits: &[PanelDiagFit]) -> Option<Vec<f64>> {
    let rows: Vec<Vec<f64>> = fits.iter().flat_map(|f| f.slope.iter().cloned()).collect();
    dominant_direction(&rows)
}
