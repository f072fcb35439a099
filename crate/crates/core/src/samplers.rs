//! Reverse-time samplers: forward (score) discretizations and backward
//! (proximal) discretizations of the reverse SDE and probability-flow ODE.
//!
//! Iteration runs `k = N..1`, producing `X_{k-1}` from `X_k`. Traces store
//! states in forward index order, so `states[N]` is the Gaussian
//! initialization and `states[0]` the returned sample set.

use serde::{Deserialize, Serialize};

use crate::error::{OracleError, SamplerError, StepError};
use crate::oracle::{
    marginal_at, prox_log_density, ve_marginal_at, GaussianMixture, ProxQuery, ProxSettings,
};
use crate::rng::{self, Domain};
use crate::schedule::{ScheduleSpec, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleSource {
    Exact,
    LearnedPm,
}

impl OracleSource {
    pub fn name(self) -> &'static str {
        match self {
            OracleSource::Exact => "exact",
            OracleSource::LearnedPm => "learned",
        }
    }
}

/// Access to `grad ln p_t` and `prox_{-lambda ln p_t}`.
pub trait Oracle: Sync {
    fn dim(&self) -> usize;
    fn source(&self) -> OracleSource;
    fn provides_score(&self) -> bool {
        true
    }
    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>, OracleError>;
    fn prox(&self, x: &[f64], t: f64, lambda: f64) -> Result<Vec<f64>, OracleError>;
    /// `1 - alpha_bar(t)`, the Tweedie noise variance of `p_t`.
    fn noise_variance(&self, t: f64) -> Result<f64, OracleError>;
}

/// Forward noising process whose marginals an exact oracle serves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForwardProcess {
    VariancePreserving(ScheduleSpec),
    VarianceExploding,
}

/// Exact oracle over the forward marginals of a Gaussian mixture.
#[derive(Debug, Clone)]
pub struct ExactOracle {
    pub base: GaussianMixture,
    pub process: ForwardProcess,
    pub settings: ProxSettings,
}

impl ExactOracle {
    pub fn new(base: GaussianMixture, process: ForwardProcess) -> Self {
        Self {
            base,
            process,
            settings: ProxSettings::default(),
        }
    }

    /// Oracle matching the process a method discretizes.
    pub fn for_method(base: GaussianMixture, schedule: ScheduleSpec, method: &Method) -> Self {
        let process = if method.is_variance_exploding() {
            ForwardProcess::VarianceExploding
        } else {
            ForwardProcess::VariancePreserving(schedule)
        };
        Self::new(base, process)
    }

    pub fn marginal(&self, t: f64) -> Result<GaussianMixture, OracleError> {
        match &self.process {
            ForwardProcess::VariancePreserving(spec) => marginal_at(&self.base, spec, t),
            ForwardProcess::VarianceExploding => ve_marginal_at(&self.base, t),
        }
    }
}

impl Oracle for ExactOracle {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn source(&self) -> OracleSource {
        OracleSource::Exact
    }

    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>, OracleError> {
        self.marginal(t)?.score(x)
    }

    fn prox(&self, x: &[f64], t: f64, lambda: f64) -> Result<Vec<f64>, OracleError> {
        let gm = self.marginal(t)?;
        Ok(prox_log_density(&gm, &ProxQuery { lambda, x }, &self.settings)?.point)
    }

    fn noise_variance(&self, t: f64) -> Result<f64, OracleError> {
        match &self.process {
            ForwardProcess::VariancePreserving(spec) => Ok(spec.one_minus_alpha_bar(t)?),
            ForwardProcess::VarianceExploding => Ok(t),
        }
    }
}

/// Sampler discretization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    /// Euler-Maruyama on the reverse SDE.
    ScoreSde,
    /// Euler-Maruyama followed by one Tweedie step evaluated at `eps_last`
    /// (the first positive grid knot when unset).
    ScoreSdeFinalDenoise {
        #[serde(default)]
        eps_last: Option<f64>,
    },
    /// Forward Euler on the probability-flow ODE.
    ScoreOde,
    /// Fully backward proximal update; needs every `gamma_k < 2`.
    PdaBackward,
    /// Forward-backward proximal update.
    PdaHybrid,
    /// Backward discretization of the variance-exploding reverse SDE.
    VeProx,
    /// Backward discretization of the probability-flow ODE.
    PfOdeProx,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::ScoreSde => "score_sde",
            Method::ScoreSdeFinalDenoise { .. } => "score_sde_final_denoise",
            Method::ScoreOde => "score_ode",
            Method::PdaBackward => "pda_backward",
            Method::PdaHybrid => "pda_hybrid",
            Method::VeProx => "ve_prox",
            Method::PfOdeProx => "pf_ode_prox",
        }
    }

    pub fn uses_score(&self) -> bool {
        matches!(
            self,
            Method::ScoreSde | Method::ScoreSdeFinalDenoise { .. } | Method::ScoreOde
        )
    }

    pub fn is_variance_exploding(&self) -> bool {
        matches!(self, Method::VeProx)
    }

    /// Methods whose prox strength involves `2 - gamma`.
    pub fn requires_small_steps(&self) -> bool {
        matches!(self, Method::PdaBackward | Method::PfOdeProx)
    }

    pub fn is_stochastic(&self) -> bool {
        !matches!(self, Method::ScoreOde | Method::PfOdeProx)
    }

    /// Step weights this method uses on `grid`.
    ///
    /// Score methods use `beta(t_k) (t_k - t_{k-1})`, proximal VP methods the
    /// exact integral of `beta` over the step, and the VE sampler the plain
    /// time increments.
    pub fn gammas(&self, schedule: &ScheduleSpec, grid: &TimeGrid) -> Result<Vec<f64>, SamplerError> {
        if self.is_variance_exploding() || grid.steps() == 0 {
            return Ok(grid.increments());
        }
        if self.uses_score() {
            let knots = grid.knots();
            return knots
                .windows(2)
                .map(|w| Ok(schedule.beta_at(w[1])? * (w[1] - w[0])))
                .collect();
        }
        Ok(schedule.step_weights(grid)?.gamma)
    }

    /// Regularization strength passed to the prox at step weight `gamma`.
    pub fn prox_strength(&self, gamma: f64) -> Option<f64> {
        match self {
            Method::PdaBackward => Some(2.0 * gamma / (2.0 - gamma)),
            Method::PdaHybrid | Method::VeProx => Some(gamma),
            Method::PfOdeProx => Some(gamma / (2.0 - gamma)),
            _ => None,
        }
    }
}

/// A validated sampler run description.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub method: Method,
    pub schedule: ScheduleSpec,
    pub grid: TimeGrid,
    pub n_chains: usize,
    pub seed: u64,
    gammas: Vec<f64>,
}

impl SamplerConfig {
    /// Fails eagerly when a method that needs `gamma_k < 2` meets a grid
    /// with some `gamma_k >= 2`.
    pub fn new(
        method: Method,
        schedule: ScheduleSpec,
        grid: TimeGrid,
        n_chains: usize,
        seed: u64,
    ) -> Result<Self, SamplerError> {
        if n_chains == 0 {
            return Err(SamplerError::Config("n_chains must be >= 1".into()));
        }
        let gap = (grid.horizon() - schedule.horizon).abs();
        if grid.steps() > 0 && gap > 1e-12 * schedule.horizon.max(1.0) {
            return Err(SamplerError::Config(format!(
                "grid ends at {} but schedule horizon is {}",
                grid.horizon(),
                schedule.horizon
            )));
        }
        let gammas = method.gammas(&schedule, &grid)?;
        if method.requires_small_steps() {
            if let Some((i, g)) = gammas.iter().enumerate().find(|(_, g)| **g >= 2.0) {
                return Err(SamplerError::StepSize {
                    step: i + 1,
                    gamma: *g,
                });
            }
        }
        if let Method::ScoreSdeFinalDenoise { eps_last: Some(eps) } = method {
            if !(eps > 0.0 && eps <= schedule.horizon) {
                return Err(SamplerError::Config(format!(
                    "eps_last must lie in (0, T], got {eps}"
                )));
            }
        }
        Ok(Self {
            method,
            schedule,
            grid,
            n_chains,
            seed,
            gammas,
        })
    }

    /// `gamma_k` for `k = 1..=N` (index `k - 1`).
    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    /// Time at which the final Tweedie step is evaluated, if any.
    pub fn final_denoise_time(&self) -> Option<f64> {
        match self.method {
            Method::ScoreSdeFinalDenoise { eps_last } => {
                Some(eps_last.unwrap_or_else(|| self.grid.knots().get(1).copied().unwrap_or(0.0)))
            }
            _ => None,
        }
    }

    /// Standard deviation of the initial draw: 1 for VP processes and
    /// `sqrt(T)` for the variance-exploding prior.
    pub fn init_scale(&self) -> f64 {
        if self.method.is_variance_exploding() {
            self.grid.horizon().sqrt()
        } else {
            1.0
        }
    }
}

/// All iterates of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerTrace {
    pub steps: usize,
    pub n_chains: usize,
    pub dim: usize,
    /// `(N + 1) x n_chains x d`, row-major.
    pub states: Vec<f64>,
    pub gammas: Vec<f64>,
    /// Wall time of each step in seconds, index `k - 1`; zero where no
    /// clock is available.
    pub step_seconds: Vec<f64>,
}

impl SamplerTrace {
    fn stride(&self) -> usize {
        self.n_chains * self.dim
    }

    /// States `X_k` of all chains, `n_chains x d` row-major.
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.stride()..(k + 1) * self.stride()]
    }

    pub fn output(&self) -> &[f64] {
        self.state(0)
    }

    pub fn output_matrix(&self) -> ndarray::Array2<f64> {
        ndarray::Array2::from_shape_vec((self.n_chains, self.dim), self.output().to_vec())
            .expect("trace shape")
    }

    pub fn chain_state(&self, k: usize, chain: usize) -> &[f64] {
        let off = k * self.stride() + chain * self.dim;
        &self.states[off..off + self.dim]
    }
}

/// Euler-Maruyama: `x + gamma (x / 2 + score) + sqrt(gamma) z`.
pub fn em_step(x: &[f64], gamma: f64, score: &[f64], z: &[f64]) -> Vec<f64> {
    let sg = gamma.sqrt();
    x.iter()
        .zip(score)
        .zip(z)
        .map(|((xi, si), zi)| xi + gamma * (0.5 * xi + si) + sg * zi)
        .collect()
}

/// `prox_{-(2g/(2-g)) ln p_{t_prev}}[(2/(2-g)) (x + sqrt(g) z)]`.
pub fn pda_backward_step<P>(
    x: &[f64],
    gamma: f64,
    prox: P,
    t_prev: f64,
    z: &[f64],
) -> Result<Vec<f64>, StepError>
where
    P: Fn(&[f64], f64, f64) -> Result<Vec<f64>, OracleError>,
{
    if !(gamma > 0.0 && gamma < 2.0) {
        return Err(StepError::StepSize(gamma));
    }
    let scale = 2.0 / (2.0 - gamma);
    let sg = gamma.sqrt();
    let anchor: Vec<f64> = x.iter().zip(z).map(|(xi, zi)| scale * (xi + sg * zi)).collect();
    Ok(prox(&anchor, t_prev, 2.0 * gamma / (2.0 - gamma))?)
}

/// `prox_{-g ln p_{t_prev}}[(1 + g/2) x + sqrt(g) z]`.
pub fn pda_hybrid_step<P>(
    x: &[f64],
    gamma: f64,
    prox: P,
    t_prev: f64,
    z: &[f64],
) -> Result<Vec<f64>, StepError>
where
    P: Fn(&[f64], f64, f64) -> Result<Vec<f64>, OracleError>,
{
    if !(gamma > 0.0) {
        return Err(StepError::StepSize(gamma));
    }
    let sg = gamma.sqrt();
    let anchor: Vec<f64> = x
        .iter()
        .zip(z)
        .map(|(xi, zi)| (1.0 + 0.5 * gamma) * xi + sg * zi)
        .collect();
    Ok(prox(&anchor, t_prev, gamma)?)
}

/// Forward Euler on the probability-flow ODE: `x + (gamma / 2)(x + score)`.
pub fn score_ode_step(x: &[f64], gamma: f64, score: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(score)
        .map(|(xi, si)| xi + 0.5 * gamma * (xi + si))
        .collect()
}

/// `prox_{-(g/(2-g)) ln p_{t_prev}}[(2/(2-g)) x]`; deterministic.
pub fn pf_ode_prox_step<P>(x: &[f64], gamma: f64, prox: P, t_prev: f64) -> Result<Vec<f64>, StepError>
where
    P: Fn(&[f64], f64, f64) -> Result<Vec<f64>, OracleError>,
{
    if !(gamma > 0.0 && gamma < 2.0) {
        return Err(StepError::StepSize(gamma));
    }
    let scale = 2.0 / (2.0 - gamma);
    let anchor: Vec<f64> = x.iter().map(|xi| scale * xi).collect();
    Ok(prox(&anchor, t_prev, gamma / (2.0 - gamma))?)
}

/// `prox_{-g ln p_{t_prev}}(x + sqrt(g) z)` for the variance-exploding SDE.
pub fn ve_prox_step<P>(
    x: &[f64],
    gamma: f64,
    prox: P,
    t_prev: f64,
    z: &[f64],
) -> Result<Vec<f64>, StepError>
where
    P: Fn(&[f64], f64, f64) -> Result<Vec<f64>, OracleError>,
{
    if !(gamma > 0.0) {
        return Err(StepError::StepSize(gamma));
    }
    let sg = gamma.sqrt();
    let anchor: Vec<f64> = x.iter().zip(z).map(|(xi, zi)| xi + sg * zi).collect();
    Ok(prox(&anchor, t_prev, gamma)?)
}

/// Tweedie step `x + (1 - alpha_bar(t_eps)) score(x, t_eps)`.
pub fn final_denoise<S>(x: &[f64], score: S, noise_variance: f64, t_eps: f64) -> Result<Vec<f64>, OracleError>
where
    S: Fn(&[f64], f64) -> Result<Vec<f64>, OracleError>,
{
    if !(t_eps > 0.0) {
        return Err(OracleError::InvalidArgument(format!(
            "t_eps must be positive, got {t_eps}"
        )));
    }
    let s = score(x, t_eps)?;
    Ok(x.iter().zip(&s).map(|(xi, si)| xi + noise_variance * si).collect())
}

/// One update of `method` for a single chain at step `k`.
fn apply_step<O: Oracle + ?Sized>(
    method: &Method,
    oracle: &O,
    x: &[f64],
    gamma: f64,
    t_k: f64,
    t_prev: f64,
    z: &[f64],
) -> Result<Vec<f64>, StepError> {
    let prox = |a: &[f64], t: f64, l: f64| oracle.prox(a, t, l);
    match method {
        Method::ScoreSde | Method::ScoreSdeFinalDenoise { .. } => {
            let s = oracle.score(x, t_k)?;
            Ok(em_step(x, gamma, &s, z))
        }
        Method::ScoreOde => {
            let s = oracle.score(x, t_k)?;
            Ok(score_ode_step(x, gamma, &s))
        }
        Method::PdaBackward => pda_backward_step(x, gamma, prox, t_prev, z),
        Method::PdaHybrid => pda_hybrid_step(x, gamma, prox, t_prev, z),
        Method::VeProx => ve_prox_step(x, gamma, prox, t_prev, z),
        Method::PfOdeProx => pf_ode_prox_step(x, gamma, prox, t_prev),
    }
}

#[cfg(feature = "parallel")]
fn for_each_chain<E, F>(out: &mut [f64], d: usize, f: F) -> Vec<Result<(), E>>
where
    E: Send,
    F: Fn(usize, &mut [f64]) -> Result<(), E> + Sync + Send,
{
    use rayon::prelude::*;
    out.par_chunks_mut(d)
        .enumerate()
        .map(|(c, dst)| f(c, dst))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn for_each_chain<E, F>(out: &mut [f64], d: usize, f: F) -> Vec<Result<(), E>>
where
    F: Fn(usize, &mut [f64]) -> Result<(), E>,
{
    out.chunks_mut(d).enumerate().map(|(c, dst)| f(c, dst)).collect()
}

/// First error by chain index, so failures are reported identically under
/// any thread schedule.
fn first_error<E>(results: Vec<Result<(), E>>) -> Result<(), (usize, E)> {
    for (c, r) in results.into_iter().enumerate() {
        if let Err(e) = r {
            return Err((c, e));
        }
    }
    Ok(())
}

struct Stopwatch(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Stopwatch {
    fn start() -> Self {
        Self(
            #[cfg(not(target_arch = "wasm32"))]
            std::time::Instant::now(),
        )
    }

    fn seconds(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        {
            self.0.elapsed().as_secs_f64()
        }
        #[cfg(target_arch = "wasm32")]
        {
            0.0
        }
    }
}

/// Runs `cfg.n_chains` independent chains from `N(0, I)` (scaled for VE)
/// down the grid.
pub fn run_sampler<O: Oracle + ?Sized>(cfg: &SamplerConfig, oracle: &O) -> Result<SamplerTrace, SamplerError> {
    if cfg.method.uses_score() && !oracle.provides_score() {
        return Err(SamplerError::Config(format!(
            "method {} needs a score but the {} oracle has none",
            cfg.method.name(),
            oracle.source().name()
        )));
    }
    let n = cfg.grid.steps();
    let d = oracle.dim();
    let stride = cfg.n_chains * d;
    let mut states = vec![0.0; (n + 1) * stride];

    let init_scale = cfg.init_scale();
    {
        let init = &mut states[n * stride..];
        for_each_chain::<(), _>(init, d, |c, dst| {
            let mut r = rng::stream(cfg.seed, c as u64, n as u64, Domain::Init);
            rng::fill_standard_normal(&mut r, dst);
            dst.iter_mut().for_each(|v| *v *= init_scale);
            Ok(())
        });
    }

    let knots = cfg.grid.knots();
    let mut step_seconds = vec![0.0; n];
    for k in (1..=n).rev() {
        let watch = Stopwatch::start();
        let gamma = cfg.gammas[k - 1];
        let (lower, upper) = states.split_at_mut(k * stride);
        let prev = &upper[..stride];
        let out = &mut lower[(k - 1) * stride..];
        let results = for_each_chain(out, d, |c, dst| {
            let x = &prev[c * d..(c + 1) * d];
            let z = if cfg.method.is_stochastic() {
                rng::normal_vector(cfg.seed, c as u64, k as u64, Domain::StepNoise, d)
            } else {
                vec![0.0; d]
            };
            let next = apply_step(&cfg.method, oracle, x, gamma, knots[k], knots[k - 1], &z)?;
            dst.copy_from_slice(&next);
            Ok::<(), StepError>(())
        });
        first_error(results).map_err(|(chain, e)| match e {
            StepError::StepSize(gamma) => SamplerError::StepSize { step: k, gamma },
            StepError::Oracle(source) => SamplerError::Oracle {
                step: k,
                chain,
                source,
            },
        })?;
        step_seconds[k - 1] = watch.seconds();
    }

    if let Some(t_eps) = cfg.final_denoise_time() {
        if n > 0 {
            let noise_variance = oracle
                .noise_variance(t_eps)
                .map_err(|source| SamplerError::Oracle { step: 0, chain: 0, source })?;
            let out = &mut states[..stride];
            let results = for_each_chain(out, d, |_, dst| {
                let y = final_denoise(dst, |x, t| oracle.score(x, t), noise_variance, t_eps)?;
                dst.copy_from_slice(&y);
                Ok::<(), OracleError>(())
            });
            first_error(results)
                .map_err(|(chain, source)| SamplerError::Oracle { step: 0, chain, source })?;
        }
    }

    Ok(SamplerTrace {
        steps: n,
        n_chains: cfg.n_chains,
        dim: d,
        states,
        gammas: cfg.gammas.clone(),
        step_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::gaussian_prox;
    use approx::assert_abs_diff_eq;

    fn std_prox(x: &[f64], _t: f64, l: f64) -> Result<Vec<f64>, OracleError> {
        Ok(gaussian_prox(&vec![0.0; x.len()], 1.0, l, x))
    }

    fn identity_prox(x: &[f64], _t: f64, _l: f64) -> Result<Vec<f64>, OracleError> {
        Ok(x.to_vec())
    }

    #[test]
    fn em_step_examples() {
        assert_eq!(em_step(&[0.0, 0.0], 0.5, &[0.0, 0.0], &[0.0, 0.0]), vec![0.0, 0.0]);
        let y = em_step(&[2.0, 0.0], 0.02, &[-2.0, 0.0], &[0.0, 0.0]);
        assert_abs_diff_eq!(y[0], 1.98, epsilon = 1e-15);
        assert_eq!(em_step(&[0.0, 0.0], 1.0, &[0.0, 0.0], &[1.0, 0.0]), vec![1.0, 0.0]);
    }

    #[test]
    fn backward_step_examples() {
        let y = pda_backward_step(&[3.0, 0.0], 1.0, std_prox, 0.0, &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(y[0], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(y[1], 0.0);

        let gamma = 1e-7;
        let y = pda_backward_step(&[1.5, -0.5], gamma, std_prox, 0.0, &[0.0, 0.0]).unwrap();
        assert!((y[0] - 1.5).abs() < 10.0 * gamma);

        assert!(pda_backward_step(&[1.0], 1.999, std_prox, 0.0, &[0.0]).is_ok());
        assert_eq!(
            pda_backward_step(&[1.0], 2.0, std_prox, 0.0, &[0.0]),
            Err(StepError::StepSize(2.0))
        );
    }

    #[test]
    fn hybrid_step_examples() {
        let y = pda_hybrid_step(&[2.0, 0.0], 1.0, std_prox, 0.0, &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(y[0], 1.5, epsilon = 1e-15);
        assert!(pda_hybrid_step(&[2.0], 10.0, std_prox, 0.0, &[0.0]).is_ok());
        let gamma = 1e-7;
        let y = pda_hybrid_step(&[1.5], gamma, std_prox, 0.0, &[0.0]).unwrap();
        assert!((y[0] - 1.5).abs() < 10.0 * gamma);
    }

    #[test]
    fn backward_and_hybrid_agree_for_tiny_steps() {
        let gamma = 1e-6;
        let x = [1.3, -0.7];
        let z = [0.4, 1.1];
        let a = pda_backward_step(&x, gamma, std_prox, 0.0, &z).unwrap();
        let b = pda_hybrid_step(&x, gamma, std_prox, 0.0, &z).unwrap();
        for j in 0..2 {
            assert!((a[j] - b[j]).abs() <= 1e-9, "{} vs {}", a[j], b[j]);
        }
    }

    #[test]
    fn score_ode_step_examples() {
        assert_eq!(score_ode_step(&[1.5, -2.0], 0.3, &[-1.5, 2.0]), vec![1.5, -2.0]);
        let y = score_ode_step(&[2.0, 0.0], 0.02, &[-1.0, 0.0]);
        assert_abs_diff_eq!(y[0], 2.01, epsilon = 1e-15);
        assert_eq!(score_ode_step(&[2.0, 1.0], 0.0, &[5.0, 5.0]), vec![2.0, 1.0]);
    }

    #[test]
    fn pf_ode_prox_examples() {
        let y = pf_ode_prox_step(&[2.0, 0.0], 1.0, std_prox, 0.0).unwrap();
        assert_abs_diff_eq!(y[0], 2.0, epsilon = 1e-15);
        let y = pf_ode_prox_step(&[2.0, 0.0], 1e-8, std_prox, 0.0).unwrap();
        assert!((y[0] - 2.0).abs() < 1e-7);
        assert_eq!(
            pf_ode_prox_step(&[0.3], 0.7, std_prox, 0.0),
            pf_ode_prox_step(&[0.3], 0.7, std_prox, 0.0)
        );
        assert!(pf_ode_prox_step(&[0.3], 2.5, std_prox, 0.0).is_err());
    }

    #[test]
    fn ve_prox_examples() {
        let y = ve_prox_step(&[2.0, 0.0], 1e-12, std_prox, 0.0, &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(y[0], 2.0, epsilon = 1e-9);
        let y = ve_prox_step(&[2.0, 0.0], 1.0, std_prox, 0.0, &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(y[0], 1.0, epsilon = 1e-15);
        let y = ve_prox_step(&[1.0, -1.0], 4.0, std_prox, 0.0, &[1.0, 1.0]).unwrap();
        let expected = gaussian_prox(&[0.0, 0.0], 1.0, 4.0, &[3.0, 1.0]);
        assert_eq!(y, expected);
    }

    #[test]
    fn final_denoise_examples() {
        let score = |x: &[f64], _t: f64| Ok(x.iter().map(|v| -v).collect::<Vec<_>>());
        assert_eq!(final_denoise(&[2.0, 0.0], score, 0.0, 1e-9).unwrap(), vec![2.0, 0.0]);
        let once = final_denoise(&[2.0, 0.0], score, 0.5, 0.1).unwrap();
        assert_eq!(once, vec![1.0, 0.0]);
        let twice = final_denoise(&once, score, 0.5, 0.1).unwrap();
        assert_eq!(twice, vec![0.5, 0.0]);
        assert!(final_denoise(&[1.0], score, 0.5, 0.0).is_err());
    }

    #[test]
    fn noise_is_injected_before_prox_and_after_drift() {
        let x = [0.8, -0.3];
        let z = [0.5, 2.0];
        let gamma = 0.36;
        let pda = pda_backward_step(&x, gamma, identity_prox, 0.0, &z).unwrap();
        let scale = 2.0 / (2.0 - gamma);
        for j in 0..2 {
            assert_abs_diff_eq!(pda[j], scale * (x[j] + 0.6 * z[j]), epsilon = 1e-15);
        }
        let em = em_step(&x, gamma, &[-0.5 * x[0], -0.5 * x[1]], &z);
        for j in 0..2 {
            assert_abs_diff_eq!(em[j], x[j] + 0.6 * z[j], epsilon = 1e-15);
        }
    }

    fn stationary_oracle(schedule: ScheduleSpec, d: usize) -> ExactOracle {
        ExactOracle::new(
            GaussianMixture::standard_normal(d),
            ForwardProcess::VariancePreserving(schedule),
        )
    }

    #[test]
    fn empty_grid_returns_initialization() {
        let schedule = ScheduleSpec::constant(2.0, 1.0).unwrap();
        let cfg = SamplerConfig::new(Method::PdaHybrid, schedule, TimeGrid::empty(), 5, 9).unwrap();
        let trace = run_sampler(&cfg, &stationary_oracle(schedule, 2)).unwrap();
        assert_eq!(trace.steps, 0);
        assert_eq!(trace.states.len(), 10);
        assert_eq!(trace.output(), trace.state(0));
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let schedule = ScheduleSpec::linear(0.1, 20.0, 1.0).unwrap();
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let gm = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec![-1.0, 0.0], vec![1.0, 0.5]],
            vec![0.1, 0.2],
        )
        .unwrap();
        let oracle = ExactOracle::new(gm, ForwardProcess::VariancePreserving(schedule));
        for method in [Method::PdaHybrid, Method::ScoreSde, Method::PdaBackward] {
            let cfg = SamplerConfig::new(method, schedule, grid.clone(), 64, 11).unwrap();
            let a = run_sampler(&cfg, &oracle).unwrap();
            let b = run_sampler(&cfg, &oracle).unwrap();
            assert_eq!(a.states, b.states);
        }
    }

    #[test]
    fn backward_rejects_large_steps_eagerly() {
        let schedule = ScheduleSpec::linear(0.1, 20.0, 1.0).unwrap();
        let grid = TimeGrid::uniform(1.0, 5).unwrap();
        let err = SamplerConfig::new(Method::PdaBackward, schedule, grid.clone(), 10, 0).unwrap_err();
        assert!(matches!(err, SamplerError::StepSize { gamma, .. } if gamma >= 2.0));
        assert!(SamplerConfig::new(Method::PdaHybrid, schedule, grid, 10, 0).is_ok());
    }

    #[test]
    fn final_denoise_run_equals_em_plus_one_tweedie_step() {
        let schedule = ScheduleSpec::linear(0.1, 20.0, 1.0).unwrap();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let gm = GaussianMixture::new(
            vec![0.25, 0.75],
            vec![vec![-2.0, 0.0], vec![1.0, 1.0]],
            vec![0.05, 0.3],
        )
        .unwrap();
        let oracle = ExactOracle::new(gm, ForwardProcess::VariancePreserving(schedule));
        let plain = run_sampler(
            &SamplerConfig::new(Method::ScoreSde, schedule, grid.clone(), 32, 4).unwrap(),
            &oracle,
        )
        .unwrap();
        let denoised_cfg = SamplerConfig::new(
            Method::ScoreSdeFinalDenoise { eps_last: None },
            schedule,
            grid,
            32,
            4,
        )
        .unwrap();
        let t_eps = denoised_cfg.final_denoise_time().unwrap();
        assert_abs_diff_eq!(t_eps, 0.125);
        let denoised = run_sampler(&denoised_cfg, &oracle).unwrap();
        let var = schedule.one_minus_alpha_bar(t_eps).unwrap();
        for c in 0..32 {
            let expected =
                final_denoise(plain.chain_state(0, c), |x, t| oracle.score(x, t), var, t_eps).unwrap();
            assert_eq!(denoised.chain_state(0, c), expected.as_slice());
        }
        assert_eq!(plain.state(1), denoised.state(1));
    }

    #[test]
    fn stationary_outputs_are_centered() {
        let schedule = ScheduleSpec::constant(2.0, 1.0).unwrap();
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let oracle = stationary_oracle(schedule, 2);
        let n = 10_000;
        for method in [
            Method::ScoreSde,
            Method::ScoreOde,
            Method::PdaBackward,
            Method::PdaHybrid,
            Method::PfOdeProx,
        ] {
            let cfg = SamplerConfig::new(method, schedule, grid.clone(), n, 21).unwrap();
            let out = run_sampler(&cfg, &oracle).unwrap().output_matrix();
            let mean = out.mean_axis(ndarray::Axis(0)).unwrap();
            for m in mean.iter() {
                assert!(m.abs() <= 4.0 / (n as f64).sqrt(), "{}: mean {m}", method.name());
            }
        }
    }

    #[test]
    fn method_serde_names() {
        let m: Method = serde_json::from_str("\"pda_hybrid\"").unwrap();
        assert_eq!(m, Method::PdaHybrid);
        let m: Method =
            serde_json::from_str(r#"{"score_sde_final_denoise":{"eps_last":0.01}}"#).unwrap();
        assert_eq!(m, Method::ScoreSdeFinalDenoise { eps_last: Some(0.01) });
        assert!(serde_json::from_str::<Method>("\"pda\"").is_err());
    }
}
