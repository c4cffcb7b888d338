//! Numerical building blocks: reproducible summation, weighted node sets,
//! Gauss–Hermite and Gauss–Legendre rules, and scalar special functions.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use statrs::function::erf::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Pairwise summation in a fixed order. The result depends only on the input
/// order, never on thread scheduling.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 64;
    if xs.len() <= LEAF {
        let mut s = 0.0;
        for x in xs {
            s += *x;
        }
        return s;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}

/// Logistic CDF, evaluated without overflow for large |t|.
pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Logistic density Λ'(t) = Λ(t)(1 − Λ(t)).
pub fn logistic_pdf(t: f64) -> f64 {
    let e = (-t.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

/// Λ''(t) = Λ'(t)(1 − 2Λ(t)).
pub fn logistic_pdf_deriv(t: f64) -> f64 {
    logistic_pdf(t) * (1.0 - 2.0 * logistic(t))
}

/// A point estimate with its Monte Carlo standard error (zero for
/// deterministic rules) and the number of nodes it was computed from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
    pub n: usize,
}

/// Componentwise estimate of a vector-valued expectation.
#[derive(Clone, Debug, PartialEq)]
pub struct VecEstimate {
    pub value: Vec<f64>,
    pub se: Vec<f64>,
    pub n: usize,
}

impl VecEstimate {
    pub fn exact(value: Vec<f64>) -> Self {
        let se = vec![0.0; value.len()];
        Self { value, se, n: 1 }
    }
}

/// A weighted set of integration nodes: either i.i.d. Monte Carlo draws
/// with equal weights, or a deterministic quadrature rule.
#[derive(Clone, Debug)]
pub struct NodeSet {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    stochastic: bool,
}

impl NodeSet {
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>, stochastic: bool) -> Self {
        assert_eq!(points.len(), dim * weights.len(), "node storage mismatch");
        Self {
            dim,
            points,
            weights,
            stochastic,
        }
    }

    /// Equal-weight Monte Carlo draws, stored row-major.
    pub fn monte_carlo(dim: usize, points: Vec<f64>) -> Self {
        let n = if dim == 0 { 1 } else { points.len() / dim };
        let w = 1.0 / n as f64;
        Self::new(dim, points, vec![w; n], true)
    }

    /// A single node of weight one (a degenerate law).
    pub fn point(p: Vec<f64>) -> Self {
        let dim = p.len();
        Self::new(dim, p, vec![1.0], false)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        (0..self.len()).map(move |i| (self.node(i), self.weights[i]))
    }

    /// Maps every node through `f`, keeping weights.
    pub fn map_points(&self, out_dim: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> NodeSet {
        let mut pts = Vec::with_capacity(out_dim * self.len());
        for i in 0..self.len() {
            let p = f(self.node(i));
            debug_assert_eq!(p.len(), out_dim);
            pts.extend_from_slice(&p);
        }
        NodeSet::new(out_dim, pts, self.weights.clone(), self.stochastic)
    }

    /// Concatenates weighted node sets; weights are scaled by `mix[i]`.
    pub fn mixture(parts: &[(f64, NodeSet)]) -> NodeSet {
        let dim = parts.first().map(|p| p.1.dim).unwrap_or(0);
        let mut pts = Vec::new();
        let mut ws = Vec::new();
        let mut stochastic = false;
        for (w, set) in parts {
            assert_eq!(set.dim, dim);
            if *w == 0.0 {
                continue;
            }
            pts.extend_from_slice(&set.points);
            ws.extend(set.weights.iter().map(|x| x * w));
            stochastic |= set.stochastic;
        }
        NodeSet::new(dim, pts, ws, stochastic)
    }

    /// Cartesian product: each node of `self` paired with each node of `other`.
    pub fn product(&self, other: &NodeSet) -> NodeSet {
        let dim = self.dim + other.dim;
        let mut pts = Vec::with_capacity(dim * self.len() * other.len());
        let mut ws = Vec::with_capacity(self.len() * other.len());
        for (a, wa) in self.iter() {
            for (b, wb) in other.iter() {
                pts.extend_from_slice(a);
                pts.extend_from_slice(b);
                ws.push(wa * wb);
            }
        }
        NodeSet::new(dim, pts, ws, self.stochastic || other.stochastic)
    }

    /// Weighted expectation of a scalar integrand; per-node values are
    /// evaluated in parallel and reduced in fixed order.
    pub fn expect<F>(&self, f: F) -> Estimate
    where
        F: Fn(&[f64]) -> f64 + Sync + Send,
    {
        let e = self.expect_vec(1, |p| vec![f(p)]);
        Estimate {
            value: e.value[0],
            se: e.se[0],
            n: e.n,
        }
    }

    /// Componentwise weighted expectation of a vector integrand of length `k`.
    ///
    /// Nodes are processed in chunks of fixed size; each chunk is accumulated
    /// sequentially and chunks are merged in index order, so the result is
    /// bitwise independent of the number of worker threads.
    pub fn expect_vec<F>(&self, k: usize, f: F) -> VecEstimate
    where
        F: Fn(&[f64]) -> Vec<f64> + Sync + Send,
    {
        const CHUNK: usize = 2048;
        let n = self.len();
        let chunks = n.div_ceil(CHUNK);
        let parts: Vec<Vec<Accum>> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut acc = vec![Accum::default(); k];
                for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    let vals = f(self.node(i));
                    debug_assert_eq!(vals.len(), k);
                    let w = self.weights[i];
                    for (a, v) in acc.iter_mut().zip(&vals) {
                        a.push(*v, w);
                    }
                }
                acc
            })
            .collect();
        let mut total = vec![Accum::default(); k];
        for part in &parts {
            for (t, p) in total.iter_mut().zip(part) {
                t.merge(p);
            }
        }
        VecEstimate {
            value: total.iter().map(|a| a.weighted).collect(),
            se: total
                .iter()
                .map(|a| if self.stochastic { a.se() } else { 0.0 })
                .collect(),
            n,
        }
    }

    /// Reduces per-node values (same order as the nodes) to an estimate.
    pub fn reduce(&self, vals: &[f64]) -> Estimate {
        assert_eq!(vals.len(), self.len());
        let weighted: Vec<f64> = vals.iter().zip(&self.weights).map(|(v, w)| v * w).collect();
        let value = pairwise_sum(&weighted);
        let se = if self.stochastic && self.len() > 1 {
            let n = self.len() as f64;
            let dev: Vec<f64> = vals.iter().map(|v| (v - value) * (v - value)).collect();
            (pairwise_sum(&dev) / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        Estimate {
            value,
            se,
            n: self.len(),
        }
    }
}

/// Streaming accumulator: weighted sum plus Welford moments of the raw values.
#[derive(Clone, Copy, Debug, Default)]
struct Accum {
    n: f64,
    weighted: f64,
    mean: f64,
    m2: f64,
}

impl Accum {
    fn push(&mut self, v: f64, w: f64) {
        self.n += 1.0;
        self.weighted += w * v;
        let d = v - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (v - self.mean);
    }

    fn merge(&mut self, o: &Accum) {
        if o.n == 0.0 {
            return;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        self.mean += d * o.n / n;
        self.m2 += o.m2 + d * d * self.n * o.n / n;
        self.weighted += o.weighted;
        self.n = n;
    }

    fn se(&self) -> f64 {
        if self.n < 2.0 {
            return 0.0;
        }
        (self.m2 / (self.n - 1.0) / self.n).sqrt()
    }
}

/// Gauss–Hermite rule for the standard normal: `E[g(Z)] ≈ Σ w_i g(z_i)`,
/// weights summing to one. Computed by Golub–Welsch.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let b = (i as f64).sqrt();
        jac[(i, i - 1)] = b;
        jac[(i - 1, i)] = b;
    }
    golub_welsch(jac, 1.0)
}

/// Gauss–Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let k = i as f64;
        let b = k / (4.0 * k * k - 1.0).sqrt();
        jac[(i, i - 1)] = b;
        jac[(i - 1, i)] = b;
    }
    golub_welsch(jac, 2.0)
}

fn golub_welsch(jac: DMatrix<f64>, mass: f64) -> (Vec<f64>, Vec<f64>) {
    let n = jac.nrows();
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], mass * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Symmetrize: the rules are symmetric about zero.
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (pairs[j].0 - pairs[i].0);
        let w = 0.5 * (pairs[i].1 + pairs[j].1);
        pairs[i] = (-x, w);
        pairs[j] = (x, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    (
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1 * mass / total).collect(),
    )
}

/// Tensor-product Gauss–Hermite nodes for `N(0, I_dim)`.
pub fn gauss_hermite_tensor(dim: usize, per_dim: usize) -> NodeSet {
    let (x, w) = gauss_hermite(per_dim);
    let total = per_dim.pow(dim as u32);
    let mut pts = Vec::with_capacity(total * dim);
    let mut ws = Vec::with_capacity(total);
    for mut idx in 0..total {
        let mut weight = 1.0;
        for _ in 0..dim {
            let k = idx % per_dim;
            idx /= per_dim;
            pts.push(x[k]);
            weight *= w[k];
        }
        ws.push(weight);
    }
    NodeSet::new(dim, pts, ws, false)
}

/// Composite Gauss–Legendre quadrature of `f` over `[a, b]`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize, order: usize) -> f64 {
    let (x, w) = gauss_legendre(order);
    let h = (b - a) / panels as f64;
    let mut parts = Vec::with_capacity(panels);
    for p in 0..panels {
        let lo = a + p as f64 * h;
        let mid = lo + 0.5 * h;
        let mut s = 0.0;
        for (xi, wi) in x.iter().zip(&w) {
            s += wi * f(mid + 0.5 * h * xi);
        }
        parts.push(0.5 * h * s);
    }
    pairwise_sum(&parts)
}

/// Symmetric positive semidefinite square root factor `L` with `L Lᵀ = Σ`.
/// Returns `None` if Σ is not symmetric or has a materially negative eigenvalue.
pub fn psd_factor(sigma: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = sigma.nrows();
    if sigma.ncols() != n {
        return None;
    }
    let scale = sigma.amax().max(1.0);
    for i in 0..n {
        for j in 0..i {
            if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-10 * scale {
                return None;
            }
        }
    }
    if n == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    if let Some(ch) = sigma.clone().cholesky() {
        return Some(ch.l());
    }
    let eig = SymmetricEigen::new(sigma.clone());
    let mut l = eig.eigenvectors.clone();
    for (j, lam) in eig.eigenvalues.iter().enumerate() {
        if *lam < -1e-10 * scale {
            return None;
        }
        let s = lam.max(0.0).sqrt();
        for i in 0..n {
            l[(i, j)] *= s;
        }
    }
    Some(l)
}

/// Angle in radians between two directions, ignoring sign.
pub fn unsigned_angle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return f64::NAN;
    }
    let c = (dot.abs() / (na * nb)).min(1.0);
    // acos loses precision near 1; use the cross-norm form.
    let sin2 = (1.0 - c * c).max(0.0);
    sin2.sqrt().atan2(c)
}

/// Dominant right singular vector of a row-stacked matrix, normalized to unit
/// length with its largest-magnitude component positive.
pub fn dominant_direction(rows: &[Vec<f64>]) -> Option<Vec<f64>> {
    let d = rows.first()?.len();
    let m = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    let gram = m.transpose() * &m;
    let eig = SymmetricEigen::new(gram);
    let (k, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))?;
    let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
    let (imax, _) = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))?;
    if v[imax] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    Some(v.into_iter().map(|x| x / norm).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_rule_reproduces_normal_moments() {
        let (x, w) = gauss_hermite(20);
        let m = |k: i32| -> f64 { x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum() };
        assert!((m(0) - 1.0).abs() < 1e-13);
        assert!(m(1).abs() < 1e-13);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-11);
        assert!((m(6) - 15.0).abs() < 1e-10);
    }

    #[test]
    fn legendre_rule_integrates_polynomials() {
        let v = integrate(|x| x * x * x - 2.0 * x + 1.0, 0.0, 2.0, 3, 4);
        assert!((v - 2.0).abs() < 1e-13);
        let e = integrate(f64::exp, 0.0, 1.0, 4, 8);
        assert!((e - (1f64.exp() - 1.0)).abs() < 1e-14);
    }

    #[test]
    fn pairwise_sum_matches_naive_on_small_input() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 499_500.0);
    }

    #[test]
    fn logistic_identities() {
        assert_eq!(logistic(0.0), 0.5);
        assert_eq!(logistic_pdf(0.0), 0.25);
        assert_eq!(logistic_pdf_deriv(0.0), 0.0);
        assert!((logistic(800.0) - 1.0).abs() < 1e-15);
        assert!(logistic(-800.0) >= 0.0);
    }

    #[test]
    fn psd_factor_handles_singular_covariance() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = psd_factor(&s).unwrap();
        let back = &l * l.transpose();
        assert!((back - s).amax() < 1e-12);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(psd_factor(&bad).is_none());
    }

    #[test]
    fn angles_ignore_sign() {
        assert!(unsigned_angle(&[1.0, 0.0], &[-2.0, 0.0]).abs() < 1e-15);
        let a = unsigned_angle(&[1.0, 0.0], &[1.0, 1.0]);
        assert!((a - std::f64::consts::FRAC_PI_4).abs() < 1e-14);
    }

    #[test]
    fn dominant_direction_of_rank_one_rows() {
        let b = [2.0, 1.0, -1.0];
        let rows: Vec<Vec<f64>> = [0.3, -0.7, 1.1]
            .iter()
            .map(|s| b.iter().map(|x| x * s).collect())
            .collect();
        let d = dominant_direction(&rows).unwrap();
        assert!(unsigned_angle(&d, &b) < 1e-12);
    }
}
