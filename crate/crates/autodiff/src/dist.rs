//! Categorical and bivariate-Gaussian distributions, both as plain values and
//! as differentiable graph expressions.

use std::f64::consts::PI;

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq)]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    /// Validates `probs >= 0` and `sum == 1 +- 1e-9`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(AutodiffError::Domain("empty categorical".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(AutodiffError::Domain(format!(
                "categorical probabilities must be finite and non-negative: {probs:?}"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(AutodiffError::Domain(format!(
                "categorical probabilities sum to {total}"
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        Self {
            probs: e.into_iter().map(|v| v / s).collect(),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability; ties go to the smaller index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// `KL(q || p) = sum_k q_k (ln q_k - ln p_k)`, with `0 ln 0 = 0`.
pub fn categorical_kl(q: &Categorical, p: &Categorical) -> Result<f64> {
    if q.len() != p.len() {
        return Err(AutodiffError::Domain(format!(
            "KL between categoricals of size {} and {}",
            q.len(),
            p.len()
        )));
    }
    let mut kl = 0.0;
    for (index, (&qk, &pk)) in q.probs.iter().zip(&p.probs).enumerate() {
        if qk == 0.0 {
            continue;
        }
        if pk == 0.0 {
            return Err(AutodiffError::InfiniteKl { index });
        }
        kl += qk * (qk.ln() - pk.ln());
    }
    Ok(kl)
}

/// 2-D Gaussian with full covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct BivariateGaussian {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

impl BivariateGaussian {
    pub fn new(mean: [f64; 2], cov: [[f64; 2]; 2]) -> Result<Self> {
        let g = Self { mean, cov };
        g.validate()?;
        Ok(g)
    }

    /// Covariance from standard deviations and correlation.
    pub fn from_params(mean: [f64; 2], sigma: [f64; 2], rho: f64) -> Result<Self> {
        let c = rho * sigma[0] * sigma[1];
        Self::new(mean, [[sigma[0] * sigma[0], c], [c, sigma[1] * sigma[1]]])
    }

    pub fn det(&self) -> f64 {
        self.cov[0][0] * self.cov[1][1] - self.cov[0][1] * self.cov[1][0]
    }

    pub fn correlation(&self) -> f64 {
        self.cov[0][1] / (self.cov[0][0] * self.cov[1][1]).sqrt()
    }

    fn validate(&self) -> Result<()> {
        let c = &self.cov;
        let finite = self.mean.iter().chain(c.iter().flatten()).all(|v| v.is_finite());
        if !finite || c[0][1] != c[1][0] || c[0][0] <= 0.0 || self.det() <= 0.0 {
            return Err(AutodiffError::Domain(format!(
                "covariance is not symmetric positive definite: {c:?}"
            )));
        }
        Ok(())
    }
}

/// `-ln N(y; mu, Sigma) = 1/2 (y-mu)^T Sigma^-1 (y-mu) + 1/2 ln det Sigma + ln 2 pi`
pub fn bvn_nll(y: [f64; 2], g: &BivariateGaussian) -> Result<f64> {
    g.validate()?;
    let det = g.det();
    let d = [y[0] - g.mean[0], y[1] - g.mean[1]];
    let c = &g.cov;
    // inverse of [[a, b], [b, d]] is [[d, -b], [-b, a]] / det
    let quad = (c[1][1] * d[0] * d[0] - 2.0 * c[0][1] * d[0] * d[1] + c[0][0] * d[1] * d[1]) / det;
    Ok(0.5 * quad + 0.5 * det.ln() + (2.0 * PI).ln())
}

/// Row-wise bivariate-Gaussian negative log-likelihood on the graph.
///
/// Shapes: `y, mean, log_sigma: [R, 2]`, `rho: [R, 1]` with `|rho| < 1`.
/// Returns `[R, 1]`.
pub fn bvn_nll_rows(g: &mut Graph<'_>, y: Var, mean: Var, log_sigma: Var, rho: Var) -> Var {
    let diff = g.sub(y, mean);
    let sigma = g.exp(log_sigma);
    let n = g.div(diff, sigma);
    let nx = g.slice_last(n, 0, 1);
    let ny = g.slice_last(n, 1, 1);
    let nx2 = g.square(nx);
    let ny2 = g.square(ny);
    let cross = g.mul(nx, ny);
    let rho_cross = g.mul(rho, cross);
    let rho_cross2 = g.scale(rho_cross, -2.0);
    let quad = g.add(nx2, ny2);
    let quad = g.add(quad, rho_cross2);
    let rho2 = g.square(rho);
    let neg = g.scale(rho2, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let denom = g.scale(one_minus, 2.0);
    let maha = g.div(quad, denom);
    let log_det_half_rho = g.ln(one_minus);
    let log_det_half_rho = g.scale(log_det_half_rho, 0.5);
    let log_sig_sum = g.sum_last(log_sigma);
    let rows = g.shape(log_sigma)[0];
    let log_sig_sum = g.reshape(log_sig_sum, &[rows, 1]);
    let acc = g.add(maha, log_det_half_rho);
    let acc = g.add(acc, log_sig_sum);
    g.add_scalar(acc, LN_2PI)
}

/// Row-wise `KL(q || p)` from log-probabilities `[R, K]`; returns `[R]`.
pub fn categorical_kl_rows(g: &mut Graph<'_>, log_q: Var, log_p: Var) -> Var {
    let q = g.exp(log_q);
    let diff = g.sub(log_q, log_p);
    let prod = g.mul(q, diff);
    g.sum_last(prod)
}
