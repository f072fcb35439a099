//! Numerical checks of the convergence lemmas that have directly
//! checkable content: spectral bounds on the interpolating diffusion
//! matrix, the second-moment bound and the initialization KL bound.
//!
//! Everything runs under the Ornstein-Uhlenbeck schedule `beta = 2`, where
//! `p_s` is the forward marginal at time `s`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::datasets;
use crate::error::TheoryError;
use crate::metrics::{gaussian_kl, AffineGaussianState};
use crate::oracle::{marginal_at, GaussianMixture};
use crate::rng::{self, Domain};
use crate::schedule::ScheduleSpec;

pub const DEFAULT_PROBES: usize = 10_000;
pub const DEFAULT_HORIZON: f64 = 2.0;
/// Slack for rounding when a bound is met with equality (e.g. `t = 0`).
const TOLERANCE: f64 = 1e-12;

/// Largest step size the theorem admits for smoothness `l`.
pub fn max_step(l: f64) -> f64 {
    1.0 / (8.0 * l + 4.0)
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .fold(0.0, |a, v| a.max(v.abs()))
}

/// A point `x ~ p_s` at which the diffusion-matrix bounds are checked.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub s: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TheoryFixture {
    pub name: String,
    pub target: GaussianMixture,
    pub spec: ScheduleSpec,
    pub h: f64,
    /// Smoothness constant used by the bounds: `max(1, l_empirical)`.
    pub l: f64,
    /// Largest `|eig(Hessian of ln p_s)|` seen over the probes; a lower
    /// bound on the true constant.
    pub l_empirical: f64,
    pub m2: f64,
    pub probes: Vec<Probe>,
}

impl TheoryFixture {
    /// Draws `n_probes` pairs `(s, x)` with `s ~ U[0, T]` and `x ~ p_s`,
    /// estimates `L` over them, and takes the largest `h = T / N` inside
    /// the regime `h <= 1/(8L + 4)`.
    pub fn new(
        name: &str,
        target: GaussianMixture,
        horizon: f64,
        n_probes: usize,
        seed: u64,
    ) -> Result<Self, TheoryError> {
        let spec = ScheduleSpec::ornstein_uhlenbeck(horizon)?;
        let d = target.dim();
        let mut times = Vec::with_capacity(n_probes);
        let mut xs = Vec::with_capacity(n_probes);
        let mut l_emp: f64 = 0.0;
        for i in 0..n_probes {
            let mut r = rng::stream(seed, i as u64, 0, Domain::Reference);
            let s = horizon * rand::Rng::random::<f64>(&mut r);
            let ps = marginal_at(&target, &spec, s)?;
            let x = ps.sample_with(1, &mut r).row(0).to_vec();
            l_emp = l_emp.max(spectral_norm(&ps.hessian_log_density(&x)?));
            times.push(s);
            xs.push(x);
        }
        let l = l_emp.max(1.0);
        let steps = (horizon / max_step(l) * (1.0 - TOLERANCE)).ceil().max(1.0);
        let h = horizon / steps;
        let probes = times
            .into_iter()
            .zip(xs)
            .map(|(s, x)| Probe { s, x })
            .collect();
        if d == 0 {
            return Err(TheoryError::InvalidFixture("zero-dimensional target".into()));
        }
        Ok(Self {
            name: name.to_string(),
            m2: target.second_moment(),
            target,
            spec,
            h,
            l,
            l_empirical: l_emp,
            probes,
        })
    }

    /// `stationary` (N(0, I)), `shifted` (N((2, 0), I)) or `gmm8`, all in 2D.
    pub fn builtin(name: &str, n_probes: usize, seed: u64) -> Result<Self, TheoryError> {
        let target = match name {
            "stationary" => GaussianMixture::standard_normal(2),
            "shifted" => GaussianMixture::gaussian(vec![2.0, 0.0], 1.0)?,
            "gmm8" => datasets::eight_mode_gmm(),
            other => {
                return Err(TheoryError::InvalidFixture(format!(
                    "unknown fixture {other:?} (expected stationary, shifted or gmm8)"
                )))
            }
        };
        Self::new(name, target, DEFAULT_HORIZON, n_probes, seed)
    }

    /// Replaces the step size, possibly leaving the theorem's regime.
    pub fn with_step(mut self, h: f64) -> Self {
        self.h = h;
        self
    }

    pub fn steps(&self) -> usize {
        (self.spec.horizon / self.h).round().max(1.0) as usize
    }

    /// `(k, t)` with `s = T - k h - t` and `t` in `[0, h]`.
    pub fn locate(&self, s: f64) -> (usize, f64) {
        let back = self.spec.horizon - s;
        let k = ((back / self.h).floor().max(0.0) as usize).min(self.steps() - 1);
        (k, (back - k as f64 * self.h).clamp(0.0, self.h))
    }

    pub fn in_regime(&self) -> bool {
        self.h <= max_step(self.l) * (1.0 + TOLERANCE) && self.spec.horizon >= 0.25
    }

    pub fn dim(&self) -> usize {
        self.target.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
    OutOfRegime,
}

impl CheckStatus {
    pub fn name(self) -> &'static str {
        match self {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "fail",
            CheckStatus::Skipped => "skipped",
            CheckStatus::OutOfRegime => "out_of_regime",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Backward,
    Hybrid,
}

impl Variant {
    /// Bounds `(lo, hi)` on `G` and `(lo, hi)` on `sqrt(G)` as multiples of `tL`.
    fn bound_coefficients(self) -> ([f64; 2], [f64; 2]) {
        match self {
            Variant::Backward => ([4.0, 18.0], [2.0, 6.0]),
            Variant::Hybrid => ([4.0, 12.0], [2.0, 4.0]),
        }
    }
}

/// Diffusion matrix `G` of the interpolating process at one probe.
#[derive(Debug, Clone, PartialEq)]
pub struct GkEvaluation {
    pub t: f64,
    /// Marginal time `T - k h - t`.
    pub s: f64,
    pub g: DMatrix<f64>,
    pub eig_min: f64,
    pub eig_max: f64,
    pub sqrt_min: f64,
    pub sqrt_max: f64,
}

/// `G = [a I - 2 t H]^{-2}` with `a = 1 - t` (backward) or `a = 1` (hybrid).
///
/// Returns `None` when `a I - 2 t H` is not positive definite, where the
/// square root in the interpolating SDE stops being `[...]^{-1}`.
pub fn diffusion_matrix(
    variant: Variant,
    hessian: &DMatrix<f64>,
    t: f64,
    s: f64,
) -> Option<GkEvaluation> {
    let d = hessian.nrows();
    let a = match variant {
        Variant::Backward => 1.0 - t,
        Variant::Hybrid => 1.0,
    };
    let m = DMatrix::identity(d, d) * a - hessian * (2.0 * t);
    let eig = SymmetricEigen::new(m);
    if eig.eigenvalues.iter().any(|&v| v <= 0.0) {
        return None;
    }
    let inv_sq = eig.eigenvalues.map(|v| v.powi(-2));
    let g = &eig.eigenvectors * DMatrix::from_diagonal(&inv_sq) * eig.eigenvectors.transpose();
    let sqrt: Vec<f64> = eig.eigenvalues.iter().map(|v| 1.0 / v).collect();
    let (mut smin, mut smax) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in sqrt {
        smin = smin.min(v);
        smax = smax.max(v);
    }
    Some(GkEvaluation {
        t,
        s,
        g,
        eig_min: smin * smin,
        eig_max: smax * smax,
        sqrt_min: smin,
        sqrt_max: smax,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GBoundCheck {
    pub status: CheckStatus,
    /// Smallest slack over the four inequalities; negative means violated.
    pub margin: f64,
    pub evaluation: Option<GkEvaluation>,
}

fn check_g_bounds(
    variant: Variant,
    fx: &TheoryFixture,
    k: usize,
    t: f64,
    x: &[f64],
) -> Result<GBoundCheck, TheoryError> {
    let s = fx.spec.horizon - k as f64 * fx.h - t;
    if !(0.0..=fx.h * (1.0 + TOLERANCE)).contains(&t) || s < -TOLERANCE * fx.spec.horizon {
        return Err(TheoryError::InvalidFixture(format!(
            "probe k = {k}, t = {t} outside [0, h] x [0, T] (h = {})",
            fx.h
        )));
    }
    let out_of_regime = GBoundCheck {
        status: CheckStatus::OutOfRegime,
        margin: f64::NAN,
        evaluation: None,
    };
    if !fx.in_regime() {
        return Ok(out_of_regime);
    }
    let ps = marginal_at(&fx.target, &fx.spec, s.max(0.0))?;
    let hess = ps.hessian_log_density(x)?;
    let Some(ev) = diffusion_matrix(variant, &hess, t, s) else {
        return Ok(out_of_regime);
    };
    let tl = t * fx.l;
    let ([glo, ghi], [slo, shi]) = variant.bound_coefficients();
    let margin = (ev.eig_min - (1.0 - glo * tl))
        .min(1.0 + ghi * tl - ev.eig_max)
        .min(ev.sqrt_min - (1.0 - slo * tl))
        .min(1.0 + shi * tl - ev.sqrt_max);
    let status = if margin >= -TOLERANCE {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    Ok(GBoundCheck {
        status,
        margin,
        evaluation: Some(ev),
    })
}

/// `(1-4tL) I <= G <= (1+18tL) I` and `(1-2tL) I <= sqrt(G) <= (1+6tL) I`.
pub fn check_g_bounds_backward(
    fx: &TheoryFixture,
    k: usize,
    t: f64,
    x: &[f64],
) -> Result<GBoundCheck, TheoryError> {
    check_g_bounds(Variant::Backward, fx, k, t, x)
}

/// `(1-4tL) I <= G <= (1+12tL) I` and `(1-2tL) I <= sqrt(G) <= (1+4tL) I`.
pub fn check_g_bounds_hybrid(
    fx: &TheoryFixture,
    k: usize,
    t: f64,
    x: &[f64],
) -> Result<GBoundCheck, TheoryError> {
    check_g_bounds(Variant::Hybrid, fx, k, t, x)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalarCheck {
    pub status: CheckStatus,
    pub value: f64,
    pub bound: f64,
    pub margin: f64,
}

impl ScalarCheck {
    fn upper(value: f64, bound: f64) -> Self {
        let margin = bound - value;
        Self {
            status: if margin >= -TOLERANCE * bound.abs().max(1.0) {
                CheckStatus::Pass
            } else {
                CheckStatus::Fail
            },
            value,
            bound,
            margin,
        }
    }
}

/// Times `0, 0.1, ..., T` at which moments are checked.
fn moment_times(horizon: f64) -> Vec<f64> {
    let n = (horizon / 0.1).round() as usize;
    let mut ts: Vec<f64> = (0..=n).map(|i| (i as f64 * 0.1).min(horizon)).collect();
    if *ts.last().expect("non-empty") < horizon {
        ts.push(horizon);
    }
    ts
}

/// `max_t E_{p_t} |x|^2 <= 2 (d + M2)`, with moments in closed form.
pub fn check_second_moment(fx: &TheoryFixture) -> Result<ScalarCheck, TheoryError> {
    let mut worst: f64 = 0.0;
    for t in moment_times(fx.spec.horizon) {
        worst = worst.max(marginal_at(&fx.target, &fx.spec, t)?.second_moment());
    }
    Ok(ScalarCheck::upper(worst, 2.0 * (fx.dim() as f64 + fx.m2)))
}

/// `KL(p_T || N(0, I)) <= 2 (d + M2) e^{-2T}` for single-Gaussian targets.
pub fn check_init_kl(fx: &TheoryFixture) -> Result<ScalarCheck, TheoryError> {
    let d = fx.dim();
    let horizon = fx.spec.horizon;
    let bound = 2.0 * (d as f64 + fx.m2) * (-2.0 * horizon).exp();
    let Some((mean, var)) = fx.target.as_gaussian() else {
        return Ok(ScalarCheck {
            status: CheckStatus::Skipped,
            value: f64::NAN,
            bound,
            margin: f64::NAN,
        });
    };
    let a = fx.spec.alpha_bar(horizon)?;
    let p_t = AffineGaussianState::new(
        mean.iter().map(|m| a.sqrt() * m).collect(),
        a * var + fx.spec.one_minus_alpha_bar(horizon)?,
    );
    let kl = gaussian_kl(&p_t, &AffineGaussianState::new(vec![0.0; d], 1.0), d);
    let mut out = ScalarCheck::upper(kl, bound);
    if horizon < 0.25 {
        out.status = CheckStatus::OutOfRegime;
    }
    Ok(out)
}

/// One row of the theory report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRecord {
    pub check: &'static str,
    pub fixture: String,
    pub status: CheckStatus,
    pub margin: f64,
    /// Number of probes behind the row (1 for scalar checks).
    pub evaluations: usize,
}

impl CheckRecord {
    pub fn passed(&self) -> bool {
        self.status == CheckStatus::Pass
    }
}

fn sweep(
    name: &'static str,
    fx: &TheoryFixture,
    check: fn(&TheoryFixture, usize, f64, &[f64]) -> Result<GBoundCheck, TheoryError>,
) -> Result<CheckRecord, TheoryError> {
    let mut status = CheckStatus::Pass;
    let mut margin = f64::INFINITY;
    for p in &fx.probes {
        let (k, t) = fx.locate(p.s);
        let c = check(fx, k, t, &p.x)?;
        match c.status {
            CheckStatus::OutOfRegime => {
                status = CheckStatus::OutOfRegime;
                margin = f64::NAN;
                break;
            }
            CheckStatus::Fail => status = CheckStatus::Fail,
            _ => {}
        }
        margin = margin.min(c.margin);
    }
    Ok(CheckRecord {
        check: name,
        fixture: fx.name.clone(),
        status,
        margin,
        evaluations: fx.probes.len(),
    })
}

fn scalar(name: &'static str, fx: &TheoryFixture, c: ScalarCheck) -> CheckRecord {
    CheckRecord {
        check: name,
        fixture: fx.name.clone(),
        status: c.status,
        margin: c.margin,
        evaluations: 1,
    }
}

/// All four checks on one fixture; the matrix bounds run over every probe
/// and report the worst margin.
pub fn run_checks(fx: &TheoryFixture) -> Result<Vec<CheckRecord>, TheoryError> {
    Ok(vec![
        sweep("g_bounds_backward", fx, check_g_bounds_backward)?,
        sweep("g_bounds_hybrid", fx, check_g_bounds_hybrid)?,
        scalar("second_moment", fx, check_second_moment(fx)?),
        scalar("init_kl", fx, check_init_kl(fx)?),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small(name: &str) -> TheoryFixture {
        TheoryFixture::builtin(name, 500, 1).unwrap()
    }

    #[test]
    fn gaussian_fixtures_have_unit_smoothness() {
        for name in ["stationary", "shifted"] {
            let fx = small(name);
            assert_abs_diff_eq!(fx.l_empirical, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(fx.l, 1.0, epsilon = 1e-12);
            assert_eq!(fx.steps(), 24);
            assert!(fx.h <= 1.0 / 12.0 && fx.in_regime());
            assert_abs_diff_eq!(fx.h, 2.0 / 24.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(small("shifted").m2, 6.0, epsilon = 1e-12);
        assert!(TheoryFixture::builtin("nope", 1, 1).is_err());
    }

    #[test]
    fn stationary_g_examples() {
        let fx = small("stationary");
        let t = 1.0 / 12.0;
        let x = [0.3, -0.2];
        let b = check_g_bounds_backward(&fx, 3, t, &x).unwrap();
        let ev = b.evaluation.unwrap();
        assert_abs_diff_eq!(ev.eig_min, (1.0 + t).powi(-2), epsilon = 1e-12);
        assert_abs_diff_eq!(ev.eig_max, 0.852071, epsilon = 1e-6);
        assert_eq!(b.status, CheckStatus::Pass);
        let hy = check_g_bounds_hybrid(&fx, 3, t, &x).unwrap();
        assert_abs_diff_eq!(hy.evaluation.unwrap().eig_max, 0.734694, epsilon = 1e-6);
        assert_eq!(hy.status, CheckStatus::Pass);

        let zero = check_g_bounds_backward(&fx, 2, 0.0, &x).unwrap();
        let g = zero.evaluation.unwrap().g;
        assert_abs_diff_eq!((g - DMatrix::identity(2, 2)).abs().max(), 0.0, epsilon = 1e-15);
        assert_eq!(zero.status, CheckStatus::Pass);
        assert!(check_g_bounds_backward(&fx, 0, 2.0 * fx.h, &x).is_err());
    }

    #[test]
    fn g_converges_to_identity_linearly() {
        let fx = small("gmm8");
        let x = [1.1, 0.4];
        for variant in [Variant::Backward, Variant::Hybrid] {
            let hess = marginal_at(&fx.target, &fx.spec, 1.0).unwrap().hessian_log_density(&x).unwrap();
            let err = |t: f64| {
                let g = diffusion_matrix(variant, &hess, t, 1.0).unwrap().g;
                (g - DMatrix::identity(2, 2)).abs().max()
            };
            let (e1, e2) = (err(1e-4), err(1e-5));
            assert!(e1 < 1e-4 * 50.0 * fx.l);
            // halving-by-ten in t shrinks the error by ~10
            assert_abs_diff_eq!(e1 / e2, 10.0, epsilon = 0.1);
        }
    }

    #[test]
    fn two_component_sweep() {
        let gm = GaussianMixture::new(vec![0.3, 0.7], vec![vec![-1.0, 0.5], vec![1.5, 0.0]], vec![0.2, 0.4]).unwrap();
        let fx = TheoryFixture::new("pair", gm, 2.0, 100, 4).unwrap();
        for p in &fx.probes {
            let (k, t) = fx.locate(p.s);
            assert_eq!(check_g_bounds_backward(&fx, k, t, &p.x).unwrap().status, CheckStatus::Pass);
            assert_eq!(check_g_bounds_hybrid(&fx, k, t, &p.x).unwrap().status, CheckStatus::Pass);
        }
    }

    #[test]
    fn moment_and_kl_examples() {
        let st = small("stationary");
        let c = check_second_moment(&st).unwrap();
        assert_abs_diff_eq!(c.value, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.bound, 8.0, epsilon = 1e-12);
        assert_eq!(check_init_kl(&st).unwrap().value, 0.0);

        let sh = small("shifted");
        let c = check_second_moment(&sh).unwrap();
        assert_abs_diff_eq!(c.value, 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.bound, 16.0, epsilon = 1e-12);
        let kl = check_init_kl(&sh).unwrap();
        assert_abs_diff_eq!(kl.value, 0.5 * (2.0 * (-2.0f64).exp()).powi(2), epsilon = 1e-12);
        assert_abs_diff_eq!(kl.value, 0.03663, epsilon = 1e-5);
        assert_abs_diff_eq!(kl.bound, 16.0 * (-4.0f64).exp(), epsilon = 1e-12);
        assert_eq!(kl.status, CheckStatus::Pass);

        assert_eq!(check_init_kl(&small("gmm8")).unwrap().status, CheckStatus::Skipped);
    }

    #[test]
    fn init_kl_holds_for_short_horizons_and_large_shifts() {
        for (i, &shift) in [0.5, 2.0, 5.0, 20.0].iter().enumerate() {
            for &t in &[0.25, 0.26, 0.5, 1.0] {
                let gm = GaussianMixture::gaussian(vec![shift, -shift], 1.0 + i as f64).unwrap();
                let fx = TheoryFixture::new("sweep", gm, t, 1, 0).unwrap();
                let c = check_init_kl(&fx).unwrap();
                assert_eq!(c.status, CheckStatus::Pass, "shift {shift}, T {t}: {c:?}");
            }
        }
    }

    #[test]
    fn out_of_regime_is_not_a_failure() {
        let fx = small("stationary").with_step(0.2);
        assert!(!fx.in_regime());
        let recs = run_checks(&fx).unwrap();
        assert_eq!(recs[0].status, CheckStatus::OutOfRegime);
        assert_eq!(recs[1].status, CheckStatus::OutOfRegime);
    }

    #[test]
    fn gmm_fixture_passes() {
        let fx = small("gmm8");
        assert!(fx.l > 1.0 && fx.in_regime());
        for r in run_checks(&fx).unwrap() {
            assert!(matches!(r.status, CheckStatus::Pass | CheckStatus::Skipped), "{r:?}");
        }
    }
}
