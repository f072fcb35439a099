//! Proximal matching: learning `prox_{-lambda ln p_t}` from samples.
//!
//! The network predicts the residual `eps_theta(y; t, lambda)` and the
//! proximal map is `f_theta(y) = y - sqrt(lambda) * eps_theta(y)`. Training
//! draws `(t, lambda)` from a step-count heuristic, forms `X_t` from data,
//! perturbs it by `sqrt(lambda) * eps`, and regresses `eps_theta` onto `eps`
//! under the proximal-matching loss.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{FormatError, OracleError, TrainError};
use crate::oracle::{marginal_at, prox_log_density, GaussianMixture, ProxQuery, ProxSettings};
use crate::rng::{self, Domain};
use crate::samplers::{Oracle, OracleSource};
use crate::schedule::{ScheduleSpec, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PMLossParams {
    pub zeta: f64,
    pub dim: usize,
}

impl PMLossParams {
    pub fn new(zeta: f64, dim: usize) -> Result<Self, TrainError> {
        if !(zeta > 0.0 && zeta.is_finite()) || dim == 0 {
            return Err(TrainError::Config(format!(
                "proximal matching needs zeta > 0 and d > 0 (got zeta = {zeta}, d = {dim})"
            )));
        }
        Ok(Self { zeta, dim })
    }

    fn scale(&self) -> f64 {
        self.dim as f64 * self.zeta * self.zeta
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `1 - exp(-|pred - target|^2 / (d zeta^2))`.
pub fn pm_loss(pred: &[f64], target: &[f64], p: &PMLossParams) -> f64 {
    -(-sq_dist(pred, target) / p.scale()).exp_m1()
}

/// Gradient of [`pm_loss`] with respect to `pred`.
pub fn pm_loss_grad(pred: &[f64], target: &[f64], p: &PMLossParams) -> Vec<f64> {
    let s = p.scale();
    let c = 2.0 / s * (-sq_dist(pred, target) / s).exp();
    pred.iter().zip(target).map(|(x, y)| c * (x - y)).collect()
}

/// Which sampler the learned prox will serve; fixes how `lambda` follows from `gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeMethod {
    Hybrid,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CandidateWeighting {
    /// Weight `ln N`.
    #[default]
    Log,
    /// Weight `N^(1/3)`.
    CubeRoot,
}

impl CandidateWeighting {
    fn weight(self, n: usize) -> f64 {
        match self {
            CandidateWeighting::Log => (n as f64).ln(),
            CandidateWeighting::CubeRoot => (n as f64).cbrt(),
        }
    }
}

pub const DEFAULT_CANDIDATES: [usize; 6] = [5, 10, 20, 50, 100, 1000];

/// Distribution over `(t, lambda)` pairs: pick a step count `N` by weight,
/// then one of its `N` uniform-grid steps uniformly.
#[derive(Debug, Clone)]
pub struct TLambdaScheme {
    schedule: ScheduleSpec,
    method: SchemeMethod,
    candidates: Vec<usize>,
    weights: Vec<f64>,
    excluded: Vec<usize>,
    pairs: Vec<Vec<(f64, f64)>>,
    index: WeightedIndex<f64>,
}

impl TLambdaScheme {
    pub fn new(
        schedule: ScheduleSpec,
        method: SchemeMethod,
        candidates: &[usize],
        weighting: CandidateWeighting,
    ) -> Result<Self, TrainError> {
        let weights: Vec<f64> = candidates.iter().map(|&n| weighting.weight(n)).collect();
        Self::with_weights(schedule, method, candidates, &weights)
    }

    /// Backward candidates with any `gamma_k >= 2` are dropped and listed in
    /// [`excluded`](Self::excluded).
    pub fn with_weights(
        schedule: ScheduleSpec,
        method: SchemeMethod,
        candidates: &[usize],
        weights: &[f64],
    ) -> Result<Self, TrainError> {
        if candidates.is_empty() || candidates.len() != weights.len() {
            return Err(TrainError::Config(
                "need one weight per candidate step count and at least one candidate".into(),
            ));
        }
        let mut kept = Vec::new();
        let mut kept_w = Vec::new();
        let mut excluded = Vec::new();
        let mut pairs = Vec::new();
        for (&n, &w) in candidates.iter().zip(weights) {
            if n == 0 {
                return Err(TrainError::Config("candidate step count must be positive".into()));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(TrainError::Config(format!(
                    "candidate N = {n} has non-positive weight {w}"
                )));
            }
            let grid = TimeGrid::uniform(schedule.horizon, n)?;
            let gammas = schedule.step_weights(&grid)?.gamma;
            if method == SchemeMethod::Backward && gammas.iter().any(|&g| g >= 2.0) {
                excluded.push(n);
                continue;
            }
            let knots = grid.knots();
            let table = gammas
                .iter()
                .enumerate()
                .map(|(i, &g)| {
                    let lambda = match method {
                        SchemeMethod::Hybrid => g,
                        SchemeMethod::Backward => 2.0 * g / (2.0 - g),
                    };
                    (knots[i], lambda)
                })
                .collect();
            kept.push(n);
            kept_w.push(w);
            pairs.push(table);
        }
        if kept.is_empty() {
            return Err(TrainError::Config(format!(
                "every candidate step count was excluded ({excluded:?} have gamma >= 2)"
            )));
        }
        let index = WeightedIndex::new(&kept_w)
            .map_err(|e| TrainError::Config(format!("candidate weights: {e}")))?;
        Ok(Self {
            schedule,
            method,
            candidates: kept,
            weights: kept_w,
            excluded,
            pairs,
            index,
        })
    }

    pub fn default_for(schedule: ScheduleSpec, method: SchemeMethod) -> Result<Self, TrainError> {
        Self::new(schedule, method, &DEFAULT_CANDIDATES, CandidateWeighting::Log)
    }

    pub fn schedule(&self) -> &ScheduleSpec {
        &self.schedule
    }

    pub fn method(&self) -> SchemeMethod {
        self.method
    }

    pub fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn excluded(&self) -> &[usize] {
        &self.excluded
    }

    /// `(t_{k-1}, lambda_k)` for `k = 1..N` of the `i`-th retained candidate.
    pub fn pairs(&self, i: usize) -> &[(f64, f64)] {
        &self.pairs[i]
    }
}

pub fn sample_t_lambda<R: Rng + ?Sized>(scheme: &TLambdaScheme, rng: &mut R) -> (f64, f64) {
    let table = &scheme.pairs[scheme.index.sample(rng)];
    table[rng.random_range(0..table.len())]
}

/// Sinusoidal features per conditioning scalar.
pub const FEATURES_PER_SCALAR: usize = 8;
const CONDITIONING: usize = 2 * FEATURES_PER_SCALAR;
pub const DEFAULT_HIDDEN: [usize; 3] = [128, 128, 128];

/// MLP `eps_theta(x; t, lambda)` with SiLU hidden activations.
///
/// Parameters live in one flat vector; layer `l` stores its `in x out`
/// weight matrix row-major followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct PMModel {
    dim: usize,
    horizon: f64,
    dims: Vec<usize>,
    params: Vec<f64>,
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

fn silu_prime(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

struct Cache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
}

impl PMModel {
    /// Glorot-uniform weights, zero biases.
    pub fn new(dim: usize, hidden: &[usize], horizon: f64, seed: u64) -> Result<Self, TrainError> {
        if dim == 0 || hidden.contains(&0) || !(horizon > 0.0 && horizon.is_finite()) {
            return Err(TrainError::Config(format!(
                "invalid model shape: d = {dim}, hidden = {hidden:?}, horizon = {horizon}"
            )));
        }
        let mut dims = vec![dim + CONDITIONING];
        dims.extend_from_slice(hidden);
        dims.push(dim);
        let count = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let mut params = Vec::with_capacity(count);
        let mut r = rng::stream(seed, 0, 0, Domain::ModelInit);
        for w in dims.windows(2) {
            let a = (6.0 / (w[0] + w[1]) as f64).sqrt();
            params.extend((0..w[0] * w[1]).map(|_| r.random_range(-a..a)));
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Ok(Self {
            dim,
            horizon,
            dims,
            params,
        })
    }

    pub fn with_default_arch(dim: usize, horizon: f64, seed: u64) -> Result<Self, TrainError> {
        Self::new(dim, &DEFAULT_HIDDEN, horizon, seed)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// (weight offset, bias offset) of layer `l`.
    fn offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for w in self.dims.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        (off, off + self.dims[l] * self.dims[l + 1])
    }

    fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let (w, b) = self.offsets(l);
        ArrayView2::from_shape((self.dims[l], self.dims[l + 1]), &self.params[w..b]).expect("layout")
    }

    fn bias(&self, l: usize) -> &[f64] {
        let (_, b) = self.offsets(l);
        &self.params[b..b + self.dims[l + 1]]
    }

    /// Writes `[x, features(t), features(ln lambda)]` into `row`.
    fn write_input(&self, x: &[f64], t: f64, lambda: f64, row: &mut [f64]) {
        let d = self.dim;
        row[..d].copy_from_slice(x);
        let s = t / self.horizon;
        let u = lambda.ln();
        let half = FEATURES_PER_SCALAR / 2;
        for j in 0..half {
            let wt = std::f64::consts::FRAC_PI_2 * (1 << j) as f64;
            let wl = 0.25 * (1 << j) as f64;
            row[d + 2 * j] = (wt * s).sin();
            row[d + 2 * j + 1] = (wt * s).cos();
            row[d + FEATURES_PER_SCALAR + 2 * j] = (wl * u).sin();
            row[d + FEATURES_PER_SCALAR + 2 * j + 1] = (wl * u).cos();
        }
    }

    fn inputs(&self, y: &Array2<f64>, t: &[f64], lambda: &[f64]) -> Array2<f64> {
        let mut input = Array2::zeros((y.nrows(), self.dims[0]));
        for (i, mut row) in input.rows_mut().into_iter().enumerate() {
            let x = y.row(i);
            self.write_input(
                x.as_slice().expect("contiguous row"),
                t[i],
                lambda[i],
                row.as_slice_mut().expect("contiguous row"),
            );
        }
        input
    }

    fn forward(&self, input: Array2<f64>) -> (Array2<f64>, Cache) {
        let mut inputs = Vec::with_capacity(self.layers());
        let mut pre = Vec::with_capacity(self.layers() - 1);
        let mut a = input;
        for l in 0..self.layers() {
            let mut z = a.dot(&self.weight(l));
            let b = self.bias(l);
            for mut row in z.rows_mut() {
                row.iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
            }
            inputs.push(a);
            if l + 1 == self.layers() {
                return (z, Cache { inputs, pre });
            }
            a = z.mapv(silu);
            pre.push(z);
        }
        unreachable!("model has at least one layer")
    }

    /// Accumulates `d(sum <grad_out, output>)/d(params)` into `grads`.
    fn backward(&self, cache: &Cache, grad_out: Array2<f64>, grads: &mut [f64]) {
        let mut g = grad_out;
        for l in (0..self.layers()).rev() {
            let (wo, bo) = self.offsets(l);
            let gw = cache.inputs[l].t().dot(&g);
            for (dst, v) in grads[wo..bo].iter_mut().zip(gw.iter()) {
                *dst += v;
            }
            let gb = g.sum_axis(Axis(0));
            for (dst, v) in grads[bo..bo + self.dims[l + 1]].iter_mut().zip(gb.iter()) {
                *dst += v;
            }
            if l > 0 {
                let mut next = g.dot(&self.weight(l).t());
                next.zip_mut_with(&cache.pre[l - 1], |v, &z| *v *= silu_prime(z));
                g = next;
            }
        }
    }

    fn check_query(&self, x: &[f64], lambda: f64) -> Result<(), OracleError> {
        if x.len() != self.dim {
            return Err(OracleError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(OracleError::InvalidArgument(format!(
                "prox strength must be positive, got {lambda}"
            )));
        }
        Ok(())
    }

    /// Network output `eps_theta(x; t, lambda)`.
    pub fn epsilon(&self, x: &[f64], t: f64, lambda: f64) -> Result<Vec<f64>, OracleError> {
        self.check_query(x, lambda)?;
        let mut input = Array2::zeros((1, self.dims[0]));
        self.write_input(x, t, lambda, input.as_slice_mut().expect("contiguous"));
        let (out, _) = self.forward(input);
        Ok(out.into_raw_vec_and_offset().0)
    }

    /// Learned proximal map `f_theta(x; t, lambda) = x - sqrt(lambda) eps_theta`.
    pub fn apply(&self, x: &[f64], t: f64, lambda: f64) -> Result<Vec<f64>, OracleError> {
        let eps = self.epsilon(x, t, lambda)?;
        let s = lambda.sqrt();
        Ok(x.iter().zip(&eps).map(|(xi, ei)| xi - s * ei).collect())
    }

    /// `eps_theta` on a batch of rows.
    pub fn epsilon_batch(&self, y: &Array2<f64>, t: &[f64], lambda: &[f64]) -> Array2<f64> {
        self.forward(self.inputs(y, t, lambda)).0
    }
}

impl Oracle for PMModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn source(&self) -> OracleSource {
        OracleSource::LearnedPm
    }

    fn provides_score(&self) -> bool {
        false
    }

    fn score(&self, _x: &[f64], _t: f64) -> Result<Vec<f64>, OracleError> {
        Err(OracleError::ScoreUnavailable("learned proximal"))
    }

    fn prox(&self, x: &[f64], t: f64, lambda: f64) -> Result<Vec<f64>, OracleError> {
        self.apply(x, t, lambda)
    }

    fn noise_variance(&self, _t: f64) -> Result<f64, OracleError> {
        Err(OracleError::Unsupported(
            "a learned proximal oracle carries no schedule".into(),
        ))
    }
}

/// Random quantities behind one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchDraws {
    pub t: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Clean forward-process samples `X_t`.
    pub x_t: Array2<f64>,
    /// Proximal-matching noise; the network input is `X_t + sqrt(lambda) eps`.
    pub eps: Array2<f64>,
}

impl BatchDraws {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn noisy_inputs(&self) -> Array2<f64> {
        let mut y = self.x_t.clone();
        for (i, mut row) in y.rows_mut().into_iter().enumerate() {
            let s = self.lambda[i].sqrt();
            row.zip_mut_with(&self.eps.row(i), |v, e| *v += s * e);
        }
        y
    }
}

/// Draws `(t, lambda)`, the forward noise and the matching noise for each
/// row of `x0`, in row order.
pub fn draw_batch<R: Rng + ?Sized>(
    x0: &Array2<f64>,
    scheme: &TLambdaScheme,
    rng: &mut R,
) -> Result<BatchDraws, TrainError> {
    let (b, d) = x0.dim();
    let mut t = Vec::with_capacity(b);
    let mut lambda = Vec::with_capacity(b);
    let mut x_t = Array2::zeros((b, d));
    let mut eps = Array2::zeros((b, d));
    let mut noise = vec![0.0; d];
    for i in 0..b {
        let (ti, li) = sample_t_lambda(scheme, rng);
        let a = scheme.schedule.alpha_bar(ti)?.sqrt();
        let s = scheme.schedule.one_minus_alpha_bar(ti)?.sqrt();
        rng::fill_standard_normal(rng, &mut noise);
        for j in 0..d {
            x_t[[i, j]] = a * x0[[i, j]] + s * noise[j];
        }
        rng::fill_standard_normal(rng, &mut noise);
        eps.row_mut(i).iter_mut().zip(&noise).for_each(|(e, n)| *e = *n);
        t.push(ti);
        lambda.push(li);
    }
    Ok(BatchDraws { t, lambda, x_t, eps })
}

/// Loss of a training phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhaseLoss {
    /// Mean absolute error between `f_theta(Y)` and `X_t`.
    L1,
    Pm(PMLossParams),
}

/// Weighted mean loss over the batch and its parameter gradient.
///
/// Weights default to uniform; the loss is `sum w_i l_i / sum w_i`.
pub fn batch_objective(
    model: &PMModel,
    draws: &BatchDraws,
    loss: PhaseLoss,
    weights: Option<&[f64]>,
) -> Result<(f64, Vec<f64>), TrainError> {
    let b = draws.len();
    if b == 0 {
        return Err(TrainError::Config("empty batch".into()));
    }
    if let Some(w) = weights {
        if w.len() != b || w.iter().any(|v| !(*v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(TrainError::Config("sample weights must be non-negative with positive sum".into()));
        }
    }
    let d = model.dim;
    let y = draws.noisy_inputs();
    let (out, cache) = model.forward(model.inputs(&y, &draws.t, &draws.lambda));
    let total_w = weights.map_or(b as f64, |w| w.iter().sum());
    let mut grad_out = Array2::zeros((b, d));
    let mut total = 0.0;
    for i in 0..b {
        let w = weights.map_or(1.0, |w| w[i]) / total_w;
        let pred = out.row(i);
        let pred = pred.as_slice().expect("contiguous");
        let (li, gi) = match loss {
            PhaseLoss::Pm(p) => {
                let target = draws.eps.row(i);
                let target = target.as_slice().expect("contiguous");
                (pm_loss(pred, target, &p), pm_loss_grad(pred, target, &p))
            }
            PhaseLoss::L1 => {
                let s = draws.lambda[i].sqrt();
                let mut l = 0.0;
                let mut g = vec![0.0; d];
                for j in 0..d {
                    let r = y[[i, j]] - s * pred[j] - draws.x_t[[i, j]];
                    l += r.abs();
                    g[j] = -s * r.signum() / d as f64;
                }
                (l / d as f64, g)
            }
        };
        total += w * li;
        grad_out.row_mut(i).iter_mut().zip(&gi).for_each(|(dst, v)| *dst = w * v);
    }
    let mut grads = vec![0.0; model.param_count()];
    model.backward(&cache, grad_out, &mut grads);
    Ok((total, grads))
}

/// Proximal-matching objective in the residual form `l(eps_theta(X_t + sqrt(lambda) eps), eps)`.
pub fn train_batch_objective<R: Rng + ?Sized>(
    model: &PMModel,
    x0: &Array2<f64>,
    scheme: &TLambdaScheme,
    p: &PMLossParams,
    rng: &mut R,
) -> Result<(f64, Vec<f64>), TrainError> {
    let draws = draw_batch(x0, scheme, rng)?;
    batch_objective(model, &draws, PhaseLoss::Pm(*p), None)
}

/// The same objective written on the learned map itself:
/// `l((Y - f_theta(Y)) / sqrt(lambda), (Y - X_t) / sqrt(lambda))`.
pub fn transformed_objective(model: &PMModel, draws: &BatchDraws, p: &PMLossParams) -> f64 {
    let y = draws.noisy_inputs();
    let mut total = 0.0;
    for i in 0..draws.len() {
        let yi = y.row(i).to_vec();
        let s = draws.lambda[i].sqrt();
        let f = model
            .apply(&yi, draws.t[i], draws.lambda[i])
            .expect("draws are valid queries");
        let pred: Vec<f64> = yi.iter().zip(&f).map(|(a, b)| (a - b) / s).collect();
        let target: Vec<f64> = yi
            .iter()
            .zip(draws.x_t.row(i))
            .map(|(a, b)| (a - b) / s)
            .collect();
        total += pm_loss(&pred, &target, p);
    }
    total / draws.len() as f64
}

/// One training phase. `learning_rate` overrides the config-wide rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "loss", rename_all = "snake_case", deny_unknown_fields)]
pub enum Phase {
    L1 {
        iterations: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        learning_rate: Option<f64>,
    },
    Pm {
        zeta: f64,
        iterations: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        learning_rate: Option<f64>,
    },
}

impl Phase {
    pub fn l1(iterations: usize) -> Self {
        Phase::L1 {
            iterations,
            learning_rate: None,
        }
    }

    pub fn pm(zeta: f64, iterations: usize) -> Self {
        Phase::Pm {
            zeta,
            iterations,
            learning_rate: None,
        }
    }

    pub fn with_learning_rate(self, lr: f64) -> Self {
        match self {
            Phase::L1 { iterations, .. } => Phase::L1 {
                iterations,
                learning_rate: Some(lr),
            },
            Phase::Pm { zeta, iterations, .. } => Phase::Pm {
                zeta,
                iterations,
                learning_rate: Some(lr),
            },
        }
    }

    pub fn iterations(&self) -> usize {
        match *self {
            Phase::L1 { iterations, .. } | Phase::Pm { iterations, .. } => iterations,
        }
    }

    pub fn learning_rate(&self) -> Option<f64> {
        match *self {
            Phase::L1 { learning_rate, .. } | Phase::Pm { learning_rate, .. } => learning_rate,
        }
    }

    pub fn zeta(&self) -> Option<f64> {
        match *self {
            Phase::L1 { .. } => None,
            Phase::Pm { zeta, .. } => Some(zeta),
        }
    }
}

fn default_momentum() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phases: Vec<Phase>,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.phases.is_empty() {
            return Err(TrainError::Config("at least one phase is required".into()));
        }
        for (i, ph) in self.phases.iter().enumerate() {
            if ph.iterations() == 0 {
                return Err(TrainError::Config(format!("phase {i} has zero iterations")));
            }
            if let Some(z) = ph.zeta() {
                if !(z > 0.0 && z.is_finite()) {
                    return Err(TrainError::Config(format!("phase {i}: zeta must be positive")));
                }
            }
            if let Some(lr) = ph.learning_rate() {
                if !(lr > 0.0 && lr.is_finite()) {
                    return Err(TrainError::Config(format!("phase {i}: learning_rate must be positive")));
                }
            }
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.phases.iter().map(Phase::iterations).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub phase: usize,
    pub zeta: Option<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PMModel,
    pub curve: Vec<LossRecord>,
}

/// SGD with momentum through the phases in order. Batch rows are drawn
/// uniformly with replacement from `data`; iteration `i` uses its own
/// random stream, so the run is a pure function of the seed.
pub fn train(
    mut model: PMModel,
    data: &Array2<f64>,
    cfg: &TrainConfig,
    scheme: &TLambdaScheme,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.nrows() == 0 {
        return Err(TrainError::Config("training data is empty".into()));
    }
    if data.ncols() != model.dim {
        return Err(TrainError::Config(format!(
            "data has {} columns but the model expects {}",
            data.ncols(),
            model.dim
        )));
    }
    let mut curve = Vec::with_capacity(cfg.total_iterations());
    let mut velocity = vec![0.0; model.param_count()];
    let mut iteration = 0;
    for (phase, ph) in cfg.phases.iter().enumerate() {
        let loss = match ph.zeta() {
            None => PhaseLoss::L1,
            Some(z) => PhaseLoss::Pm(PMLossParams::new(z, model.dim)?),
        };
        let lr = ph.learning_rate().unwrap_or(cfg.learning_rate);
        velocity.iter_mut().for_each(|v| *v = 0.0);
        for _ in 0..ph.iterations() {
            let mut r = rng::stream(cfg.seed, 0, iteration as u64, Domain::Training);
            let rows: Vec<usize> = (0..cfg.batch_size)
                .map(|_| r.random_range(0..data.nrows()))
                .collect();
            let x0 = data.select(Axis(0), &rows);
            let draws = draw_batch(&x0, scheme, &mut r)?;
            let (value, grads) = batch_objective(&model, &draws, loss, None)?;
            if !value.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite { iteration, phase });
            }
            for ((p, v), g) in model.params.iter_mut().zip(&mut velocity).zip(&grads) {
                *v = cfg.momentum * *v + g;
                *p -= lr * *v;
            }
            curve.push(LossRecord {
                iteration,
                phase,
                zeta: ph.zeta(),
                loss: value,
            });
            iteration += 1;
        }
    }
    Ok(TrainOutcome { model, curve })
}

/// Distance between the learned and exact proximal maps over random probes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleErrorReport {
    pub probes: usize,
    pub evaluated: usize,
    /// Probes where the exact solver failed; excluded from the statistics.
    pub solver_failures: usize,
    pub mean_error: Option<f64>,
    pub max_error: Option<f64>,
}

/// Probe `i` draws `X_0 ~ base`, `(t, lambda)` from the scheme and
/// `Y = X_t + sqrt(lambda) eps`, then compares `f_theta(Y)` with the exact
/// `prox_{-lambda ln p_t}(Y)`.
pub fn eval_against_oracle(
    model: &PMModel,
    base: &GaussianMixture,
    scheme: &TLambdaScheme,
    m: usize,
    seed: u64,
) -> Result<OracleErrorReport, TrainError> {
    if base.dim() != model.dim {
        return Err(TrainError::Config(format!(
            "target dimension {} does not match model dimension {}",
            base.dim(),
            model.dim
        )));
    }
    let settings = ProxSettings::default();
    let mut errors = Vec::with_capacity(m);
    let mut failures = 0;
    for i in 0..m {
        let mut r = rng::stream(seed, i as u64, 0, Domain::Reference);
        let x0 = base.sample_with(1, &mut r);
        let draws = draw_batch(&x0, scheme, &mut r)?;
        let y = draws.noisy_inputs().row(0).to_vec();
        let (t, lambda) = (draws.t[0], draws.lambda[0]);
        let pt = marginal_at(base, &scheme.schedule, t)?;
        let exact = match prox_log_density(&pt, &ProxQuery { lambda, x: &y }, &settings) {
            Ok(res) => res.point,
            Err(OracleError::SolverFailed { .. }) => {
                failures += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let learned = model.apply(&y, t, lambda)?;
        errors.push(sq_dist(&learned, &exact).sqrt());
    }
    let evaluated = errors.len();
    let (mean_error, max_error) = if evaluated == 0 {
        (None, None)
    } else {
        (
            Some(errors.iter().sum::<f64>() / evaluated as f64),
            Some(errors.iter().copied().fold(0.0, f64::max)),
        )
    };
    Ok(OracleErrorReport {
        probes: m,
        evaluated,
        solver_failures: failures,
        mean_error,
        max_error,
    })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"PDMM";
const CHECKPOINT_VERSION: u32 = 1;

/// Layout: magic, version (u32), d (u32), horizon (f64), layer count L
/// (u32), L+1 layer widths (u32), then all parameters (f64); little-endian.
pub fn write_checkpoint<W: Write>(model: &PMModel, mut w: W) -> Result<(), FormatError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(model.dim as u32).to_le_bytes())?;
    w.write_all(&model.horizon.to_le_bytes())?;
    w.write_all(&(model.layers() as u32).to_le_bytes())?;
    for &n in &model.dims {
        w.write_all(&(n as u32).to_le_bytes())?;
    }
    for p in &model.params {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(w.flush()?)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, FormatError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, FormatError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<PMModel, FormatError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic { expected: "PDMM" });
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::Version(version));
    }
    let dim = read_u32(&mut r)? as usize;
    let horizon = read_f64(&mut r)?;
    let layers = read_u32(&mut r)? as usize;
    if layers == 0 || layers > 64 {
        return Err(FormatError::Malformed(format!("layer count {layers}")));
    }
    let dims = (0..=layers)
        .map(|_| read_u32(&mut r).map(|v| v as usize))
        .collect::<Result<Vec<_>, _>>()?;
    if dim == 0 || dims[0] != dim + CONDITIONING || dims[layers] != dim || dims.contains(&0) {
        return Err(FormatError::Malformed(format!(
            "layer widths {dims:?} do not fit dimension {dim}"
        )));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(FormatError::Malformed(format!("horizon {horizon}")));
    }
    let count: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let params = (0..count)
        .map(|_| read_f64(&mut r))
        .collect::<Result<Vec<_>, _>>()?;
    if params.iter().any(|p| !p.is_finite()) {
        return Err(FormatError::Malformed("non-finite parameter".into()));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(FormatError::Malformed(format!("{} trailing bytes", rest.len())));
    }
    Ok(PMModel {
        dim,
        horizon,
        dims,
        params,
    })
}
