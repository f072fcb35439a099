//! Exact isotropic Gaussian-mixture targets.
//!
//! A mixture pushed through the variance-preserving forward process stays a
//! mixture, so the score, Hessian and MAP denoiser (proximal operator of
//! `-lambda ln p_t`) of every forward marginal are available to arbitrary
//! precision.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedIndex, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::OracleError;
use crate::schedule::ScheduleSpec;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `sum_i w_i N(mu_i, sigma_i^2 I_d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureRepr", into = "MixtureRepr")]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    /// Component means, row-major `k x d`.
    means: Vec<f64>,
    variances: Vec<f64>,
    log_weights: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureRepr {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

impl TryFrom<MixtureRepr> for GaussianMixture {
    type Error = OracleError;

    fn try_from(r: MixtureRepr) -> Result<Self, Self::Error> {
        GaussianMixture::new(r.weights, r.means, r.variances)
    }
}

impl From<GaussianMixture> for MixtureRepr {
    fn from(gm: GaussianMixture) -> Self {
        MixtureRepr {
            means: (0..gm.components()).map(|i| gm.mean(i).to_vec()).collect(),
            weights: gm.weights,
            variances: gm.variances,
        }
    }
}

impl GaussianMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<f64>,
    ) -> Result<Self, OracleError> {
        let k = weights.len();
        if k == 0 {
            return Err(OracleError::InvalidMixture("no components".into()));
        }
        if means.len() != k || variances.len() != k {
            return Err(OracleError::InvalidMixture(format!(
                "{} weights, {} means, {} variances",
                k,
                means.len(),
                variances.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(OracleError::InvalidMixture("zero-dimensional means".into()));
        }
        if let Some(m) = means.iter().find(|m| m.len() != dim) {
            return Err(OracleError::DimensionMismatch {
                expected: dim,
                got: m.len(),
            });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(OracleError::InvalidMixture("weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(OracleError::InvalidMixture(format!(
                "weights sum to {total}, not 1"
            )));
        }
        if variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(OracleError::InvalidMixture("variances must be positive".into()));
        }
        if means.iter().flatten().any(|m| !m.is_finite()) {
            return Err(OracleError::InvalidMixture("non-finite mean".into()));
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            dim,
            weights,
            means: means.into_iter().flatten().collect(),
            variances,
            log_weights,
        })
    }

    /// `N(mean, variance I)`.
    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Result<Self, OracleError> {
        Self::new(vec![1.0], vec![mean], vec![variance])
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::gaussian(vec![0.0; dim], 1.0).expect("valid standard normal")
    }

    /// Equal-weight mixture with one narrow component per point.
    pub fn point_cloud(points: &Array2<f64>, variance: f64) -> Result<Self, OracleError> {
        let n = points.nrows();
        if n == 0 {
            return Err(OracleError::InvalidMixture("empty point cloud".into()));
        }
        let means = points.rows().into_iter().map(|r| r.to_vec()).collect();
        Self::new(vec![1.0 / n as f64; n], means, vec![variance; n])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn mean(&self, i: usize) -> &[f64] {
        &self.means[i * self.dim..(i + 1) * self.dim]
    }

    /// `Some((mean, variance))` when the mixture has a single component.
    pub fn as_gaussian(&self) -> Option<(&[f64], f64)> {
        (self.components() == 1).then(|| (self.mean(0), self.variances[0]))
    }

    /// `E ||X||^2`.
    pub fn second_moment(&self) -> f64 {
        (0..self.components())
            .map(|i| {
                let m2: f64 = self.mean(i).iter().map(|m| m * m).sum();
                self.weights[i] * (m2 + self.dim as f64 * self.variances[i])
            })
            .sum()
    }

    /// `E X`.
    pub fn overall_mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for i in 0..self.components() {
            for (o, m) in out.iter_mut().zip(self.mean(i)) {
                *o += self.weights[i] * m;
            }
        }
        out
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), OracleError> {
        if x.len() != self.dim {
            return Err(OracleError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Affine image `a X + noise` with `noise ~ N(0, c I)` for every component.
    fn transformed(&self, scale: f64, added_variance: f64, variance_scale: f64) -> Self {
        let means = self.means.iter().map(|m| scale * m).collect();
        let variances: Vec<f64> = self
            .variances
            .iter()
            .map(|v| variance_scale * v + added_variance)
            .collect();
        Self {
            dim: self.dim,
            weights: self.weights.clone(),
            means,
            variances,
            log_weights: self.log_weights.clone(),
        }
    }

    /// Per-component log terms `ln w_i + ln N(x; mu_i, sigma_i^2 I)`.
    fn component_logs(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let half_d = 0.5 * self.dim as f64;
        for i in 0..self.components() {
            let v = self.variances[i];
            let sq: f64 = self
                .mean(i)
                .iter()
                .zip(x)
                .map(|(m, xi)| (xi - m) * (xi - m))
                .sum();
            out.push(self.log_weights[i] - half_d * (LN_2PI + v.ln()) - 0.5 * sq / v);
        }
    }

    /// Log-sum-exp of the component terms, leaving normalized
    /// responsibilities in `logs`.
    fn log_and_responsibilities(&self, x: &[f64], logs: &mut Vec<f64>) -> f64 {
        self.component_logs(x, logs);
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for l in logs.iter_mut() {
            *l = (*l - max).exp();
            sum += *l;
        }
        for l in logs.iter_mut() {
            *l /= sum;
        }
        max + sum.ln()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64, OracleError> {
        self.check_dim(x)?;
        let mut logs = Vec::with_capacity(self.components());
        Ok(self.log_and_responsibilities(x, &mut logs))
    }

    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>, OracleError> {
        self.check_dim(x)?;
        let mut logs = Vec::with_capacity(self.components());
        self.log_and_responsibilities(x, &mut logs);
        let mut s = vec![0.0; self.dim];
        for (i, r) in logs.iter().enumerate() {
            if *r == 0.0 {
                continue;
            }
            let inv_v = 1.0 / self.variances[i];
            for ((sj, xj), mj) in s.iter_mut().zip(x).zip(self.mean(i)) {
                *sj -= r * (xj - mj) * inv_v;
            }
        }
        Ok(s)
    }

    pub fn hessian_log_density(&self, x: &[f64]) -> Result<DMatrix<f64>, OracleError> {
        self.check_dim(x)?;
        Ok(self.local_quadratic(x).hessian)
    }

    /// Log-density, score and Hessian in one pass.
    ///
    /// The Hessian uses the covariance-of-responsibilities form
    /// `sum_i r_i (g_i - s)(g_i - s)^T - (sum_i r_i / sigma_i^2) I`, with
    /// `g_i` the component scores, which is symmetric by construction.
    pub fn local_quadratic(&self, x: &[f64]) -> LocalQuadratic {
        let d = self.dim;
        let mut resp = Vec::with_capacity(self.components());
        let log_density = self.log_and_responsibilities(x, &mut resp);
        let mut score = vec![0.0; d];
        for (i, r) in resp.iter().enumerate() {
            if *r == 0.0 {
                continue;
            }
            let inv_v = 1.0 / self.variances[i];
            for ((sj, xj), mj) in score.iter_mut().zip(x).zip(self.mean(i)) {
                *sj -= r * (xj - mj) * inv_v;
            }
        }
        let mut hessian = DMatrix::zeros(d, d);
        let mut diag = 0.0;
        let mut centered = vec![0.0; d];
        for (i, r) in resp.iter().enumerate() {
            if *r == 0.0 {
                continue;
            }
            let inv_v = 1.0 / self.variances[i];
            diag += r * inv_v;
            for (j, c) in centered.iter_mut().enumerate() {
                *c = -(x[j] - self.mean(i)[j]) * inv_v - score[j];
            }
            for a in 0..d {
                let ra = r * centered[a];
                for b in a..d {
                    hessian[(a, b)] += ra * centered[b];
                }
            }
        }
        for a in 0..d {
            hessian[(a, a)] -= diag;
            for b in 0..a {
                hessian[(a, b)] = hessian[(b, a)];
            }
        }
        LocalQuadratic {
            log_density,
            score,
            hessian,
        }
    }

    /// `n x d` i.i.d. draws: component by weight, then the Gaussian.
    pub fn sample(&self, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(n, &mut rng)
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let picker = WeightedIndex::new(&self.weights).expect("weights validated");
        let mut out = Array2::zeros((n, self.dim));
        for mut row in out.rows_mut() {
            let i = picker.sample(rng);
            let sd = self.variances[i].sqrt();
            for (o, m) in row.iter_mut().zip(self.mean(i)) {
                let z: f64 = StandardNormal.sample(rng);
                *o = m + sd * z;
            }
        }
        out
    }
}

/// Derivatives of `ln p` at a point.
#[derive(Debug, Clone)]
pub struct LocalQuadratic {
    pub log_density: f64,
    pub score: Vec<f64>,
    pub hessian: DMatrix<f64>,
}

/// Marginal at time `t` of the variance-preserving process started at
/// `base`: means `sqrt(abar) mu_i`, variances `abar sigma_i^2 + 1 - abar`.
pub fn marginal_at(
    base: &GaussianMixture,
    spec: &ScheduleSpec,
    t: f64,
) -> Result<GaussianMixture, OracleError> {
    let abar = spec.alpha_bar(t)?;
    let one_minus = spec.one_minus_alpha_bar(t)?;
    Ok(base.transformed(abar.sqrt(), one_minus, abar))
}

/// Marginal at time `t` of the variance-exploding process `dX = dW`.
pub fn ve_marginal_at(base: &GaussianMixture, t: f64) -> Result<GaussianMixture, OracleError> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(OracleError::InvalidArgument(format!("negative time {t}")));
    }
    Ok(base.transformed(1.0, t, 1.0))
}

pub fn log_density(gm: &GaussianMixture, x: &[f64]) -> Result<f64, OracleError> {
    gm.log_density(x)
}

pub fn score(gm: &GaussianMixture, x: &[f64]) -> Result<Vec<f64>, OracleError> {
    gm.score(x)
}

pub fn hessian_log_density(gm: &GaussianMixture, x: &[f64]) -> Result<DMatrix<f64>, OracleError> {
    gm.hessian_log_density(x)
}

/// Tweedie denoiser `x + sigma2 * score(x)`.
pub fn mmse_denoise(gm: &GaussianMixture, x: &[f64], sigma2: f64) -> Result<Vec<f64>, OracleError> {
    if !(sigma2 >= 0.0) {
        return Err(OracleError::InvalidArgument(format!(
            "sigma2 must be >= 0, got {sigma2}"
        )));
    }
    let s = gm.score(x)?;
    Ok(x.iter().zip(&s).map(|(xi, si)| xi + sigma2 * si).collect())
}

pub fn sample_target(gm: &GaussianMixture, n: usize, seed: u64) -> Array2<f64> {
    gm.sample(n, seed)
}

/// Query for `prox_{-lambda ln p}(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxQuery<'a> {
    pub lambda: f64,
    pub x: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxSettings {
    /// Tolerance on the gradient norm of the prox objective.
    pub tol: f64,
    /// Newton iterations per start.
    pub max_iter: usize,
}

impl Default for ProxSettings {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxResult {
    pub point: Vec<f64>,
    pub objective: f64,
    pub grad_residual_norm: f64,
    /// Newton iterations summed over all starts.
    pub iterations: usize,
    /// Index of the winning start among those tried, in the order anchor,
    /// MMSE point, component prox points.
    pub multistart_winner: usize,
}

/// `-lambda ln p(u) + 0.5 ||u - x||^2`.
pub fn prox_objective(gm: &GaussianMixture, lambda: f64, x: &[f64], u: &[f64]) -> f64 {
    let mut logs = Vec::with_capacity(gm.components());
    gm.check_dim(u).expect("dimension checked by caller");
    let lp = gm.log_and_responsibilities(u, &mut logs);
    -lambda * lp + 0.5 * sq_dist(u, x)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

struct NewtonOutcome {
    point: Vec<f64>,
    objective: f64,
    residual: f64,
    iterations: usize,
    converged: bool,
}

/// Smallest curvature admitted after the eigenvalue modification.
const MIN_CURVATURE: f64 = 1e-8;

/// Damped Newton on the prox objective with an eigenvalue-modified Hessian
/// and Armijo backtracking.
fn damped_newton(
    gm: &GaussianMixture,
    lambda: f64,
    x: &[f64],
    start: Vec<f64>,
    settings: &ProxSettings,
) -> NewtonOutcome {
    let d = gm.dim();
    let mut u = start;
    let evaluate = |u: &[f64]| {
        let q = gm.local_quadratic(u);
        let objective = -lambda * q.log_density + 0.5 * sq_dist(u, x);
        let grad: Vec<f64> = (0..d)
            .map(|j| -lambda * q.score[j] + (u[j] - x[j]))
            .collect();
        (q, objective, grad)
    };
    let (mut quad, mut objective, mut grad) = evaluate(&u);
    let mut residual = norm(&grad);
    let mut iterations = 0;
    while iterations < settings.max_iter && objective.is_finite() {
        if residual <= settings.tol {
            break;
        }
        iterations += 1;

        let mut curvature = DMatrix::<f64>::identity(d, d) - quad.hessian.scale(lambda);
        // Entries can be huge for very narrow components; rescale before
        // the eigendecomposition and undo afterwards.
        let scale = curvature.amax().max(1.0);
        curvature /= scale;
        let eig = SymmetricEigen::new(curvature);
        let g = DVector::from_column_slice(&grad);
        let coeffs = eig.eigenvectors.transpose() * &g;
        let mut step = DVector::zeros(d);
        for (i, c) in coeffs.iter().enumerate() {
            let e = (eig.eigenvalues[i].abs() * scale).max(MIN_CURVATURE);
            step -= eig.eigenvectors.column(i) * (c / e);
        }
        let slope: f64 = step.iter().zip(&grad).map(|(s, g)| s * g).sum();

        let slack = 64.0 * f64::EPSILON * (1.0 + objective.abs());
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-16 {
            let trial: Vec<f64> = u.iter().zip(step.iter()).map(|(a, s)| a + alpha * s).collect();
            let t_obj = prox_objective(gm, lambda, x, &trial);
            if t_obj.is_finite() && t_obj <= objective + 1e-4 * alpha * slope + slack {
                accepted = Some(trial);
                break;
            }
            alpha *= 0.5;
        }
        let Some(next) = accepted else {
            break;
        };
        if next == u {
            break;
        }
        u = next;
        (quad, objective, grad) = evaluate(&u);
        residual = norm(&grad);
    }
    NewtonOutcome {
        converged: residual <= settings.tol,
        point: u,
        objective,
        residual,
        iterations,
    }
}

/// `argmin_u -lambda ln p(u) + 0.5 ||u - x||^2`.
///
/// The objective is nonconvex for mixtures. Damped Newton runs from the
/// anchor `x`, from the Tweedie point `mmse_denoise(gm, x, lambda)` and,
/// for mixtures, from single-component prox points (see
/// [`component_starts`]); the converged candidate with the lowest objective
/// wins.
pub fn prox_log_density(
    gm: &GaussianMixture,
    q: &ProxQuery<'_>,
    settings: &ProxSettings,
) -> Result<ProxResult, OracleError> {
    gm.check_dim(q.x)?;
    if !(q.lambda.is_finite() && q.lambda > 0.0) {
        return Err(OracleError::InvalidArgument(format!(
            "lambda must be positive, got {}",
            q.lambda
        )));
    }
    if !(settings.tol > 0.0) {
        return Err(OracleError::InvalidArgument("tol must be positive".into()));
    }
    if q.x.iter().any(|v| !v.is_finite()) {
        return Err(OracleError::InvalidArgument("non-finite anchor".into()));
    }

    let mut starts = vec![q.x.to_vec()];
    let mmse = mmse_denoise(gm, q.x, q.lambda)?;
    if mmse.iter().all(|v| v.is_finite()) && mmse != q.x {
        starts.push(mmse);
    }
    if gm.components() > 1 {
        for c in component_starts(gm, q.lambda, q.x) {
            let u = gaussian_prox(gm.mean(c), gm.variances()[c], q.lambda, q.x);
            if u.iter().all(|v| v.is_finite()) && !starts.contains(&u) {
                starts.push(u);
            }
        }
    }

    let mut total_iterations = 0;
    let mut best: Option<(usize, NewtonOutcome)> = None;
    let mut best_residual = f64::INFINITY;
    for (idx, start) in starts.into_iter().enumerate() {
        let out = damped_newton(gm, q.lambda, q.x, start, settings);
        total_iterations += out.iterations;
        best_residual = best_residual.min(out.residual);
        if !out.converged {
            continue;
        }
        let better = match &best {
            None => true,
            Some((_, b)) => out.objective < b.objective,
        };
        if better {
            best = Some((idx, out));
        }
    }
    match best {
        Some((idx, out)) => Ok(ProxResult {
            point: out.point,
            objective: out.objective,
            grad_residual_norm: out.residual,
            iterations: total_iterations,
            multistart_winner: idx,
        }),
        None => Err(OracleError::SolverFailed {
            best_residual,
            iterations: total_iterations,
        }),
    }
}

/// Mixtures up to this size start Newton from every component.
const ALL_COMPONENT_STARTS: usize = 16;

/// Components whose single-component prox seeds a Newton run: all of them
/// for small mixtures, otherwise the two with the lowest envelope
/// `min_u -lambda ln(w_i N(u; mu_i, v_i I)) + 0.5 ||u - x||^2`, an upper
/// bound on the objective that is tight for well-separated components.
fn component_starts(gm: &GaussianMixture, lambda: f64, x: &[f64]) -> Vec<usize> {
    let k = gm.components();
    if k <= ALL_COMPONENT_STARTS {
        return (0..k).collect();
    }
    let d = gm.dim() as f64;
    let envelope = |i: usize| {
        let v = gm.variances()[i];
        -lambda * gm.weights()[i].ln()
            + 0.5 * lambda * d * (2.0 * std::f64::consts::PI * v).ln()
            + 0.5 * lambda / (v + lambda) * sq_dist(x, gm.mean(i))
    };
    let mut scored: Vec<(usize, f64)> = (0..k).map(|i| (i, envelope(i))).collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1));
    scored.into_iter().take(2).map(|(i, _)| i).collect()
}

/// Closed-form prox of `-lambda ln N(mu, v I)`: `(x + (lambda/v) mu) / (1 + lambda/v)`.
pub fn gaussian_prox(mean: &[f64], variance: f64, lambda: f64, x: &[f64]) -> Vec<f64> {
    let r = lambda / variance;
    x.iter()
        .zip(mean)
        .map(|(xi, mi)| (xi + r * mi) / (1.0 + r))
        .collect()
}
