//! Browser demo: three small experiments exposed to JavaScript as JSON.
//!
//! The plain functions are usable (and tested) natively; the `wasm_bindgen`
//! wrappers only serialize their results.

use heatsmooth::certify::{lbound_from_probs, normal_quantile};
use heatsmooth::data::{gen_1d_outlier, Dataset};
use heatsmooth::heat_oracle::{gaussian_convolve_quadrature, GridFunction, GridSmoothedClassifier};
use heatsmooth::model::{Activation, MlpModel};
use heatsmooth::smoothing::{train_heatsmooth, train_supervised, SupervisedConfig, SmoothingConfig};
use heatsmooth::{ProbabilityModel, Result, Tensor};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Sampled curve before and after Gaussian smoothing.
#[derive(Debug, Serialize)]
pub struct Profile {
    pub x: Vec<f64>,
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
}

/// Exact Gaussian smoothing of a named 1D profile on `[-2, 2]`.
///
/// Profiles: `step`, `spike` (a step with a narrow opposite-class bump) and `sine`.
/// The convolution runs on a grid eight times finer than the `n` returned points.
pub fn heat_profile(kind: &str, sigma: f64, n: usize) -> Result<Profile> {
    let f: fn(f64) -> f64 = match kind {
        "step" => |x| if x >= 0.0 { 1.0 } else { 0.0 },
        "spike" => |x| if x >= 0.0 || (x + 1.0).abs() < 0.08 { 1.0 } else { 0.0 },
        "sine" => |x| (4.0 * x).sin(),
        other => {
            return Err(heatsmooth::Error::config(
                "profile",
                format!("unknown profile {other:?}"),
            ))
        }
    };
    let pad = 6.0 * sigma.max(0.0);
    let grid = GridFunction::sample_1d(-2.0, 2.0, pad, 8 * n, f)?;
    let smoothed = gaussian_convolve_quadrature(&grid, sigma)?;
    let x: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * i as f64 / (n.max(2) - 1) as f64).collect();
    Ok(Profile {
        raw: x.iter().map(|&v| f(v)).collect(),
        smoothed: x.iter().map(|&v| smoothed.interpolate(&[v])).collect(),
        x,
    })
}

/// Certified radius against the top-class probability of a binary smoothed classifier.
#[derive(Debug, Serialize)]
pub struct RadiusCurve {
    pub p_top: Vec<f64>,
    /// `σ Φ⁻¹(p)`, the sampling-based certificate with exact probabilities.
    pub quantile: Vec<f64>,
    /// `σ √(π/2) (p − (1 − p))`, the Lipschitz certificate.
    pub lipschitz: Vec<f64>,
}

pub fn radius_curve(sigma: f64, points: usize) -> Result<RadiusCurve> {
    let mut curve = RadiusCurve {
        p_top: vec![],
        quantile: vec![],
        lipschitz: vec![],
    };
    for i in 0..points {
        let p = 0.5 + 0.499 * i as f64 / (points.max(2) - 1) as f64;
        curve.p_top.push(p);
        curve.quantile.push((sigma * normal_quantile(p)?).max(0.0));
        curve.lipschitz.push(lbound_from_probs(&[p, 1.0 - p], sigma, 1)?);
    }
    Ok(curve)
}

/// The 1D outlier toy: a teacher that memorizes the outlier, its exact
/// Gaussian smoothing, and the network distilled by heat smoothing.
#[derive(Debug, Serialize)]
pub struct Toy {
    pub train_x: Vec<f64>,
    pub train_y: Vec<usize>,
    pub x: Vec<f64>,
    /// Class-1 probability along `x` for each model.
    pub teacher: Vec<f64>,
    pub exact: Vec<f64>,
    pub student: Vec<f64>,
    pub losses: Vec<f64>,
}

/// Times the outlier appears in the toy training set, so that a short
/// full-batch run already memorizes it.
const OUTLIER_COPIES: usize = 8;

pub fn toy_1d(outlier_x: f64, sigma: f64, seed: u64) -> Result<Toy> {
    let base = gen_1d_outlier(40, outlier_x, seed)?;
    let mut xs = base.inputs().data().to_vec();
    let mut ys = base.labels().unwrap_or_default().to_vec();
    for _ in 1..OUTLIER_COPIES {
        xs.push(outlier_x);
        ys.push(1);
    }
    let n = xs.len();
    let ds = Dataset::new(Tensor::matrix(n, 1, xs)?, Some(ys), 2, base.meta.clone())?;
    let f0 = MlpModel::new_random(&[1, 32, 32, 2], Activation::Relu, seed)?;
    let sup = SupervisedConfig {
        epochs: 3000,
        lr: 0.2,
        batch_size: ds.len(),
        seed,
        ..SupervisedConfig::default()
    };
    let (teacher, _) = train_supervised(&f0, ds.labeled("toy")?, &sup)?;
    let exact = GridSmoothedClassifier::from_model(&teacher, -1.5, 1.5, 1024, sigma)?;
    let cfg = SmoothingConfig {
        sigma,
        epochs_per_timestep: 40,
        lr: 0.05,
        seed,
        ..SmoothingConfig::default()
    };
    let (student, report) = train_heatsmooth(&teacher, ds.inputs(), &cfg)?;
    let x: Vec<f64> = (0..201).map(|i| -1.5 + 3.0 * i as f64 / 200.0).collect();
    let p1 = |m: &dyn ProbabilityModel| -> Result<Vec<f64>> {
        x.iter().map(|&v| Ok(m.probabilities(&[v])?[1])).collect()
    };
    Ok(Toy {
        train_x: base.inputs().data().to_vec(),
        train_y: base.labels().unwrap_or_default().to_vec(),
        teacher: p1(&teacher)?,
        exact: p1(&exact)?,
        student: p1(&student)?,
        losses: report.epoch_losses,
        x,
    })
}

fn to_js<T: Serialize>(value: Result<T>) -> std::result::Result<String, JsError> {
    let value = value.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = heatProfile)]
pub fn heat_profile_js(kind: &str, sigma: f64) -> std::result::Result<String, JsError> {
    to_js(heat_profile(kind, sigma, 401))
}

#[wasm_bindgen(js_name = radiusCurve)]
pub fn radius_curve_js(sigma: f64) -> std::result::Result<String, JsError> {
    to_js(radius_curve(sigma, 101))
}

#[wasm_bindgen(js_name = toy1d)]
pub fn toy_1d_js(outlier_x: f64, sigma: f64, seed: u32) -> std::result::Result<String, JsError> {
    to_js(toy_1d(outlier_x, sigma, seed as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothed_step_is_the_normal_cdf() {
        let p = heat_profile("step", 0.3, 401).unwrap();
        assert_eq!(p.x.len(), p.smoothed.len());
        for (x, s) in p.x.iter().zip(&p.smoothed) {
            let want = heatsmooth::certify::normal_cdf(x / 0.3);
            assert!((s - want).abs() < 5e-3, "x={x}: {s} vs {want}");
        }
        assert!(heat_profile("square", 0.3, 101).is_err());
    }

    #[test]
    fn lipschitz_radius_never_exceeds_the_quantile_radius() {
        let c = radius_curve(0.5, 51).unwrap();
        assert_eq!(c.quantile[0], 0.0);
        for (q, l) in c.quantile.iter().zip(&c.lipschitz) {
            assert!(*l <= q + 1e-12);
        }
    }

    #[test]
    fn toy_student_forgets_the_outlier() {
        let toy = toy_1d(-0.5, 0.3, 4).unwrap();
        let i = (0..toy.x.len())
            .min_by(|&a, &b| (toy.x[a] + 0.5).abs().total_cmp(&(toy.x[b] + 0.5).abs()))
            .unwrap();
        assert!(toy.teacher[i] > 0.5, "teacher fits the outlier");
        assert!(toy.exact[i] < 0.5 && toy.student[i] < 0.5);
        assert!(toy.losses.iter().all(|l| l.is_finite()));
        assert!(serde_json::to_string(&toy).unwrap().contains("\"student\""));
    }
}
