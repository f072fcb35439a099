//! Exact empirical W2, closed-form Gaussian KL, and exact propagation of
//! Gaussian laws through sampler updates.

use ndarray::{Array2, Axis};

use crate::error::MetricsError;
use crate::oracle::GaussianMixture;
use crate::samplers::{Method, SamplerConfig};
use crate::schedule::{ScheduleSpec, TimeGrid};

/// Largest sample count the cubic assignment solver accepts.
pub const MAX_EXACT_W2: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct W2Report {
    pub value: f64,
    pub n: usize,
    /// FNV-1a hash of the optimal permutation.
    pub assignment_checksum: u64,
}

/// Minimum-cost perfect matching on a dense `n x n` cost matrix (row-major),
/// by shortest augmenting paths with dual potentials. Returns the column
/// assigned to each row.
pub fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    // 1-based arrays with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0usize; n];
    for j in 1..=n {
        col_of_row[row_of[j] - 1] = j - 1;
    }
    col_of_row
}

fn permutation_checksum(perm: &[usize]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in perm {
        for b in (*p as u64).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// W2 between two equal-size empirical measures with uniform weights:
/// `W2^2 = (1/n) min_pi sum_i ||a_i - b_pi(i)||^2`.
pub fn wasserstein2(a: &Array2<f64>, b: &Array2<f64>) -> Result<W2Report, MetricsError> {
    let n = a.nrows();
    if n != b.nrows() {
        return Err(MetricsError::UnsupportedSize(format!(
            "sample counts differ ({} vs {})",
            n,
            b.nrows()
        )));
    }
    if n == 0 {
        return Err(MetricsError::InvalidInput("empty samples".into()));
    }
    if n > MAX_EXACT_W2 {
        return Err(MetricsError::UnsupportedSize(format!(
            "n = {n} exceeds the exact-assignment limit {MAX_EXACT_W2}"
        )));
    }
    if a.ncols() != b.ncols() {
        return Err(MetricsError::InvalidInput(format!(
            "dimensions differ ({} vs {})",
            a.ncols(),
            b.ncols()
        )));
    }
    let mut cost = Vec::with_capacity(n * n);
    for ra in a.rows() {
        for rb in b.rows() {
            cost.push(ra.iter().zip(rb.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
        }
    }
    let perm = solve_assignment(&cost, n);
    let total: f64 = perm.iter().enumerate().map(|(i, j)| cost[i * n + j]).sum();
    Ok(W2Report {
        value: (total / n as f64).max(0.0).sqrt(),
        n,
        assignment_checksum: permutation_checksum(&perm),
    })
}

/// Isotropic Gaussian law `N(mean, cov_scale I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGaussianState {
    pub mean: Vec<f64>,
    pub cov_scale: f64,
}

impl AffineGaussianState {
    pub fn new(mean: Vec<f64>, cov_scale: f64) -> Self {
        Self { mean, cov_scale }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Law of `a X + b + sqrt(noise) z`.
    fn push(&self, a: f64, b: &[f64], noise: f64) -> Self {
        Self {
            mean: self.mean.iter().zip(b).map(|(m, bi)| a * m + bi).collect(),
            cov_scale: a * a * self.cov_scale + noise,
        }
    }
}

/// `KL(N(m1, c1 I) || N(m2, c2 I))` in `d` dimensions.
pub fn gaussian_kl(p: &AffineGaussianState, q: &AffineGaussianState, d: usize) -> f64 {
    let ratio = p.cov_scale / q.cov_scale;
    let dm: f64 = p
        .mean
        .iter()
        .zip(&q.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    // ratio - 1 - ln(ratio), accurate near ratio = 1.
    let x = ratio - 1.0;
    let trace_term = if x.abs() < 1e-4 {
        x * x * (0.5 - x / 3.0 + x * x / 4.0)
    } else {
        x - x.ln_1p()
    };
    (0.5 * (d as f64 * trace_term + dm / q.cov_scale)).max(0.0)
}

/// Exact output law of a sampler for a single isotropic Gaussian target,
/// where every score or prox call is affine in its argument.
pub fn pushforward_exact(
    method: &Method,
    schedule: &ScheduleSpec,
    grid: &TimeGrid,
    target: &GaussianMixture,
) -> Result<AffineGaussianState, MetricsError> {
    let (m0, s2) = target.as_gaussian().ok_or_else(|| {
        MetricsError::NotAffine(format!(
            "{} on a {}-component mixture",
            method.name(),
            target.components()
        ))
    })?;
    let cfg = SamplerConfig::new(*method, *schedule, grid.clone(), 1, 0)
        .map_err(|e| MetricsError::InvalidInput(e.to_string()))?;
    let d = target.dim();
    let marginal = |t: f64| -> Result<(Vec<f64>, f64), MetricsError> {
        if method.is_variance_exploding() {
            Ok((m0.to_vec(), s2 + t))
        } else {
            let abar = schedule.alpha_bar(t)?;
            let sa = abar.sqrt();
            Ok((
                m0.iter().map(|m| sa * m).collect(),
                abar * s2 + schedule.one_minus_alpha_bar(t)?,
            ))
        }
    };

    let init = cfg.init_scale();
    let mut state = AffineGaussianState::new(vec![0.0; d], init * init);
    let knots = grid.knots();
    for k in (1..=grid.steps()).rev() {
        let gamma = cfg.gammas()[k - 1];
        state = match method {
            Method::ScoreSde | Method::ScoreSdeFinalDenoise { .. } | Method::ScoreOde => {
                let (m, v) = marginal(knots[k])?;
                // score(x) = -(x - m) / v
                let drift = if matches!(method, Method::ScoreOde) { 0.5 } else { 1.0 };
                let a = 1.0 + 0.5 * gamma - drift * gamma / v;
                let b: Vec<f64> = m.iter().map(|mi| drift * gamma * mi / v).collect();
                let noise = if matches!(method, Method::ScoreOde) { 0.0 } else { gamma };
                state.push(a, &b, noise)
            }
            _ => {
                let (m, v) = marginal(knots[k - 1])?;
                let lambda = method.prox_strength(gamma).expect("proximal method");
                // prox(y) = rho y + (1 - rho) m
                let rho = v / (v + lambda);
                let b: Vec<f64> = m.iter().map(|mi| (1.0 - rho) * mi).collect();
                let (a, noise) = match method {
                    Method::PdaBackward => {
                        let kappa = 2.0 / (2.0 - gamma);
                        (rho * kappa, (rho * kappa).powi(2) * gamma)
                    }
                    Method::PdaHybrid => (rho * (1.0 + 0.5 * gamma), rho * rho * gamma),
                    Method::PfOdeProx => (rho * 2.0 / (2.0 - gamma), 0.0),
                    Method::VeProx => (rho, rho * rho * gamma),
                    _ => unreachable!(),
                };
                state.push(a, &b, noise)
            }
        };
    }
    if let (Some(t_eps), true) = (cfg.final_denoise_time(), grid.steps() > 0) {
        let (m, v) = marginal(t_eps)?;
        let var = schedule.one_minus_alpha_bar(t_eps)?;
        let b: Vec<f64> = m.iter().map(|mi| var * mi / v).collect();
        state = state.push(1.0 - var / v, &b, 0.0);
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceFit {
    /// `(h, KL)` pairs as supplied.
    pub points: Vec<(f64, f64)>,
    /// KL value subtracted before fitting (0 when no floor is used).
    pub floor: f64,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least-squares line through `(ln h, ln KL)`.
///
/// With `subtract_floor`, the KL at the finest `h` is taken as the
/// `h`-independent bias and subtracted from the others; the finest point
/// itself then drops out of the fit.
pub fn fit_convergence(points: &[(f64, f64)], subtract_floor: bool) -> Result<ConvergenceFit, MetricsError> {
    if points.len() < 3 {
        return Err(MetricsError::InvalidInput(format!(
            "need at least 3 points, got {}",
            points.len()
        )));
    }
    if let Some((h, kl)) = points.iter().find(|(h, kl)| !(*kl > 0.0) || !(*h > 0.0)) {
        return Err(MetricsError::InvalidInput(format!(
            "non-positive point (h = {h}, KL = {kl})"
        )));
    }
    let (floor, fit_points): (f64, Vec<(f64, f64)>) = if subtract_floor {
        let finest = points
            .iter()
            .copied()
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("non-empty");
        let rest: Vec<_> = points
            .iter()
            .filter(|p| p.0 > finest.0)
            .map(|(h, kl)| (*h, kl - finest.1))
            .collect();
        if rest.iter().any(|(_, kl)| !(*kl > 0.0)) {
            return Err(MetricsError::InvalidInput(
                "KL does not exceed the finest-step floor".into(),
            ));
        }
        (finest.1, rest)
    } else {
        (0.0, points.to_vec())
    };
    if fit_points.len() < 2 {
        return Err(MetricsError::InvalidInput("too few distinct step sizes".into()));
    }
    let xs: Vec<f64> = fit_points.iter().map(|(h, _)| h.ln()).collect();
    let ys: Vec<f64> = fit_points.iter().map(|(_, kl)| kl.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(MetricsError::InvalidInput("all step sizes equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(ConvergenceFit {
        points: points.to_vec(),
        floor,
        slope,
        intercept,
        r_squared,
    })
}

/// Sample mean and unbiased per-coordinate variance.
pub fn empirical_moments(samples: &Array2<f64>) -> Result<(Vec<f64>, Vec<f64>), MetricsError> {
    let n = samples.nrows();
    if n < 2 {
        return Err(MetricsError::InvalidInput(format!(
            "need at least 2 samples, got {n}"
        )));
    }
    let mean = samples.mean_axis(Axis(0)).expect("non-empty");
    let var = samples.var_axis(Axis(0), 1.0);
    Ok((mean.to_vec(), var.to_vec()))
}
