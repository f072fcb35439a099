//! Noise schedules for the variance-preserving forward process, time grids,
//! and the scalar quantities derived from `beta(t)`.
//!
//! All integrals of `beta` are evaluated with exact antiderivatives, so the
//! per-step weights carry no quadrature error.

use serde::{Deserialize, Serialize};

use crate::error::ScheduleError;

/// Functional form of `beta(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BetaKind {
    /// `beta(t) = beta_min + (beta_max - beta_min) * t`.
    Linear { beta_min: f64, beta_max: f64 },
    /// `beta(t) = beta`.
    Constant { beta: f64 },
}

/// A noise schedule on `[0, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub beta: BetaKind,
    pub horizon: f64,
}

impl ScheduleSpec {
    pub fn new(beta: BetaKind, horizon: f64) -> Result<Self, ScheduleError> {
        let spec = Self { beta, horizon };
        spec.validate()?;
        Ok(spec)
    }

    pub fn linear(beta_min: f64, beta_max: f64, horizon: f64) -> Result<Self, ScheduleError> {
        Self::new(BetaKind::Linear { beta_min, beta_max }, horizon)
    }

    pub fn constant(beta: f64, horizon: f64) -> Result<Self, ScheduleError> {
        Self::new(BetaKind::Constant { beta }, horizon)
    }

    /// The OU setting used by the convergence theory: `beta == 2`.
    pub fn ornstein_uhlenbeck(horizon: f64) -> Result<Self, ScheduleError> {
        Self::constant(2.0, horizon)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(ScheduleError::InvalidSpec(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        match self.beta {
            BetaKind::Linear { beta_min, beta_max } => {
                if !(beta_min.is_finite() && beta_min > 0.0) {
                    return Err(ScheduleError::InvalidSpec(format!(
                        "beta_min must be positive, got {beta_min}"
                    )));
                }
                if !(beta_max.is_finite() && beta_max >= beta_min) {
                    return Err(ScheduleError::InvalidSpec(format!(
                        "beta_max must be >= beta_min, got {beta_max} < {beta_min}"
                    )));
                }
            }
            BetaKind::Constant { beta } => {
                if !(beta.is_finite() && beta > 0.0) {
                    return Err(ScheduleError::InvalidSpec(format!(
                        "beta must be positive, got {beta}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_time(&self, t: f64) -> Result<(), ScheduleError> {
        // Allow a few ulps of slack at the right end so grid knots computed
        // as k * T / N never trip the check.
        let slack = 4.0 * f64::EPSILON * self.horizon.max(1.0);
        if t.is_nan() || t < 0.0 || t > self.horizon + slack {
            return Err(ScheduleError::TimeOutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        Ok(())
    }

    /// `beta(t)`.
    pub fn beta_at(&self, t: f64) -> Result<f64, ScheduleError> {
        self.check_time(t)?;
        Ok(self.beta_unchecked(t))
    }

    fn beta_unchecked(&self, t: f64) -> f64 {
        match self.beta {
            BetaKind::Linear { beta_min, beta_max } => beta_min + (beta_max - beta_min) * t,
            BetaKind::Constant { beta } => beta,
        }
    }

    /// Antiderivative of `beta` with value 0 at `t = 0`.
    fn beta_integral_from_zero(&self, t: f64) -> f64 {
        match self.beta {
            BetaKind::Linear { beta_min, beta_max } => {
                beta_min * t + 0.5 * (beta_max - beta_min) * t * t
            }
            BetaKind::Constant { beta } => beta * t,
        }
    }

    /// `\int_a^b beta(s) ds`, evaluated in a form that avoids cancellation
    /// for short intervals.
    pub fn integrated_beta(&self, a: f64, b: f64) -> Result<f64, ScheduleError> {
        self.check_time(a)?;
        self.check_time(b)?;
        Ok(match self.beta {
            BetaKind::Linear { beta_min, beta_max } => {
                let dt = b - a;
                beta_min * dt + 0.5 * (beta_max - beta_min) * dt * (a + b)
            }
            BetaKind::Constant { beta } => beta * (b - a),
        })
    }

    /// `exp(-\int_0^t beta(s) ds)`.
    pub fn alpha_bar(&self, t: f64) -> Result<f64, ScheduleError> {
        self.check_time(t)?;
        Ok((-self.beta_integral_from_zero(t)).exp())
    }

    /// `1 - alpha_bar(t)` without cancellation for small `t`.
    pub fn one_minus_alpha_bar(&self, t: f64) -> Result<f64, ScheduleError> {
        self.check_time(t)?;
        Ok(-(-self.beta_integral_from_zero(t)).exp_m1())
    }

    /// Exact per-interval weights `gamma_k = \int_{t_{k-1}}^{t_k} beta`.
    pub fn step_weights(&self, grid: &TimeGrid) -> Result<StepWeights, ScheduleError> {
        let horizon_gap = (grid.horizon() - self.horizon).abs();
        if horizon_gap > 1e-12 * self.horizon.max(1.0) {
            return Err(ScheduleError::GridMismatch {
                grid: grid.horizon(),
                horizon: self.horizon,
            });
        }
        let gamma = grid
            .knots
            .windows(2)
            .map(|w| self.integrated_beta(w[0], w[1]))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(StepWeights { gamma })
    }
}

/// Strictly increasing knots `0 = t_0 < t_1 < ... < t_N = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid {
    knots: Vec<f64>,
}

impl TimeGrid {
    /// Accepts arbitrary (possibly non-uniform) knots.
    pub fn from_knots(knots: Vec<f64>) -> Result<Self, ScheduleError> {
        if knots.is_empty() {
            return Err(ScheduleError::InvalidGrid("grid needs at least one knot".into()));
        }
        if knots[0] != 0.0 {
            return Err(ScheduleError::InvalidGrid(format!(
                "first knot must be 0, got {}",
                knots[0]
            )));
        }
        if knots.iter().any(|t| !t.is_finite()) {
            return Err(ScheduleError::InvalidGrid("non-finite knot".into()));
        }
        if let Some(w) = knots.windows(2).find(|w| w[1] <= w[0]) {
            return Err(ScheduleError::InvalidGrid(format!(
                "knots must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self { knots })
    }

    /// `t_k = k T / N` for `k = 0..=N`.
    pub fn uniform(horizon: f64, n: usize) -> Result<Self, ScheduleError> {
        if n == 0 {
            return Err(ScheduleError::InvalidGrid("step count must be >= 1".into()));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(ScheduleError::InvalidGrid(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        let mut knots: Vec<f64> = (0..=n).map(|k| k as f64 * horizon / n as f64).collect();
        knots[n] = horizon;
        Ok(Self { knots })
    }

    /// A degenerate grid `{0}` with no steps; the sampler then returns its
    /// initialization unchanged.
    pub fn empty() -> Self {
        Self { knots: vec![0.0] }
    }

    /// Number of steps `N`.
    pub fn steps(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn horizon(&self) -> f64 {
        *self.knots.last().expect("grid is never empty")
    }

    /// Differences `t_k - t_{k-1}` for `k = 1..=N`; the step weights of the
    /// variance-exploding process.
    pub fn increments(&self) -> Vec<f64> {
        self.knots.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = ScheduleError;

    fn try_from(knots: Vec<f64>) -> Result<Self, Self::Error> {
        Self::from_knots(knots)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(grid: TimeGrid) -> Self {
        grid.knots
    }
}

/// `gamma[k - 1]` holds the weight of the step from `t_k` down to `t_{k-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepWeights {
    pub gamma: Vec<f64>,
}

impl StepWeights {
    pub fn total(&self) -> f64 {
        self.gamma.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.gamma.iter().copied().fold(0.0, f64::max)
    }
}

pub fn make_uniform_grid(horizon: f64, n: usize) -> Result<TimeGrid, ScheduleError> {
    TimeGrid::uniform(horizon, n)
}
