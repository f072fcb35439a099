//! Browser bindings: sample a 2D target, trace exact KL against step count,
//! and draw the 1D proximal map of a two-mode density.

use proxdm::datasets;
use proxdm::metrics::{gaussian_kl, pushforward_exact, AffineGaussianState};
use proxdm::oracle::{prox_log_density, ProxQuery, ProxSettings};
use proxdm::samplers::run_sampler;
use proxdm::{ExactOracle, GaussianMixture, Method, ScheduleSpec, SamplerConfig, TimeGrid};
use wasm_bindgen::prelude::*;

fn method_from(name: &str) -> Result<Method, String> {
    Ok(match name {
        "score_sde" => Method::ScoreSde,
        "score_sde_final_denoise" => Method::ScoreSdeFinalDenoise { eps_last: None },
        "score_ode" => Method::ScoreOde,
        "pda_backward" => Method::PdaBackward,
        "pda_hybrid" => Method::PdaHybrid,
        "pf_ode_prox" => Method::PfOdeProx,
        other => return Err(format!("unknown method {other:?}")),
    })
}

fn target_from(name: &str) -> Result<GaussianMixture, String> {
    match name {
        "face" => Ok(datasets::face_point_cloud()),
        "gmm8" => Ok(datasets::eight_mode_gmm()),
        other => Err(format!("unknown target {other:?}")),
    }
}

/// Final samples as interleaved `x, y` pairs.
pub fn sample_points(target: &str, method: &str, steps: usize, chains: usize, seed: u64) -> Result<Vec<f64>, String> {
    let gm = target_from(target)?;
    let method = method_from(method)?;
    let schedule = ScheduleSpec::linear(0.1, 20.0, 1.0).map_err(|e| e.to_string())?;
    let grid = TimeGrid::uniform(1.0, steps).map_err(|e| e.to_string())?;
    let cfg = SamplerConfig::new(method, schedule, grid, chains, seed).map_err(|e| e.to_string())?;
    let oracle = ExactOracle::for_method(gm, schedule, &method);
    let trace = run_sampler(&cfg, &oracle).map_err(|e| e.to_string())?;
    Ok(trace.output().to_vec())
}

/// Exact `KL(p_0 || q)` for a 2D Gaussian target under the OU schedule on
/// `[0, 5]`, one value per entry of `steps` (NaN where the method cannot run).
pub fn kl_curve(method: &str, mean: f64, variance: f64, steps: &[u32]) -> Result<Vec<f64>, String> {
    let method = method_from(method)?;
    let target = GaussianMixture::gaussian(vec![mean, mean], variance).map_err(|e| e.to_string())?;
    let schedule = ScheduleSpec::ornstein_uhlenbeck(5.0).map_err(|e| e.to_string())?;
    let p0 = AffineGaussianState::new(vec![mean, mean], variance);
    Ok(steps
        .iter()
        .map(|&n| {
            TimeGrid::uniform(5.0, n as usize)
                .map_err(|e| e.to_string())
                .and_then(|g| pushforward_exact(&method, &schedule, &g, &target).map_err(|e| e.to_string()))
                .map(|q| gaussian_kl(&p0, &q, 2))
                .unwrap_or(f64::NAN)
        })
        .collect())
}

/// `prox_{-lambda ln p}(x)` on a grid of anchors for
/// `p = 0.5 N(-sep, var) + 0.5 N(sep, var)`.
pub fn prox_map(lambda: f64, sep: f64, var: f64, anchors: &[f64]) -> Result<Vec<f64>, String> {
    let gm = GaussianMixture::new(vec![0.5, 0.5], vec![vec![-sep], vec![sep]], vec![var, var])
        .map_err(|e| e.to_string())?;
    let settings = ProxSettings::default();
    anchors
        .iter()
        .map(|&x| {
            let q = ProxQuery { lambda, x: &[x] };
            prox_log_density(&gm, &q, &settings)
                .map(|r| r.point[0])
                .map_err(|e| e.to_string())
        })
        .collect()
}

#[wasm_bindgen]
pub fn sample(target: &str, method: &str, steps: u32, chains: u32, seed: u32) -> Result<Vec<f64>, JsError> {
    sample_points(target, method, steps as usize, chains as usize, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = klCurve)]
pub fn kl_curve_js(method: &str, mean: f64, variance: f64, steps: Vec<u32>) -> Result<Vec<f64>, JsError> {
    kl_curve(method, mean, variance, &steps).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = proxMap)]
pub fn prox_map_js(lambda: f64, sep: f64, var: f64, anchors: Vec<f64>) -> Result<Vec<f64>, JsError> {
    prox_map(lambda, sep, var, &anchors).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_shape_and_determinism() {
        let a = sample_points("gmm8", "pda_hybrid", 5, 50, 1).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, sample_points("gmm8", "pda_hybrid", 5, 50, 1).unwrap());
        assert!(sample_points("gmm8", "pda_backward", 5, 50, 1).is_err());
        assert!(sample_points("nope", "pda_hybrid", 5, 50, 1).is_err());
    }

    #[test]
    fn kl_decreases_with_steps() {
        let kl = kl_curve("pda_hybrid", 3.0, 0.25, &[10, 40, 160]).unwrap();
        assert!(kl[0] > kl[1] && kl[1] > kl[2], "{kl:?}");
    }

    #[test]
    fn prox_map_is_odd_and_contracts_to_modes() {
        let xs = [-4.0, -1.0, 1.0, 4.0];
        let p = prox_map(0.5, 3.0, 0.25, &xs).unwrap();
        assert!((p[0] + p[3]).abs() < 1e-9 && (p[1] + p[2]).abs() < 1e-9);
        assert!(p[3] > 2.5 && p[3] < 4.0, "{p:?}");
    }
}
