//! Certified radii and certified-accuracy curves.
//!
//! Three modes:
//! - `stochastic_mc`: pick the top class by majority vote over `n0` noisy
//!   predictions, then lower-bound its probability from `n` fresh votes.
//! - `deterministic_fixed_class`: the top class comes from one forward pass of
//!   a smoothed model; the probability bound still uses `n` noisy votes.
//! - `lbound`: no sampling at all; the radius is
//!   `σ√(π/2)·(p₍₁₎ − p₍₂₎)` on the model's softmax outputs, valid when the model
//!   is a Gaussian convolution with standard deviation σ.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::model::{argmax, ranking};
use crate::tensor::Tensor;
use crate::ProbabilityModel;

/// Largest number of noisy inputs evaluated in one batch.
const SAMPLE_CHUNK: usize = 1000;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal quantile, by bisection on [`normal_cdf`] to an interval
/// width of 1e-12. Returns ±∞ at the endpoints.
pub fn normal_quantile(q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::config("q", format!("quantile level {q} outside [0, 1]")));
    }
    if q == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    if q == 1.0 {
        return Ok(f64::INFINITY);
    }
    let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
        if mid == lo && mid == hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One-sided `1 − alpha` Clopper–Pearson lower bound on a binomial
/// proportion after `successes` hits in `n` trials.
///
/// Solves `P(Binomial(n, p) ≥ successes) = alpha` for `p`, using
/// `P(X ≥ k) = I_p(k, n − k + 1)`.
pub fn clopper_pearson_lower(successes: u64, n: u64, alpha: f64) -> Result<f64> {
    if n == 0 || successes > n {
        return Err(Error::config(
            "successes",
            format!("need 0 <= successes <= n and n >= 1, got {successes} of {n}"),
        ));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config("alpha", format!("confidence level {alpha} outside (0, 1)")));
    }
    if successes == 0 {
        return Ok(0.0);
    }
    let a = successes as f64;
    let b = (n - successes + 1) as f64;
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if beta_reg(a, b, mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertifyMode {
    StochasticMc,
    DeterministicFixedClass,
    Lbound,
}

impl CertifyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CertifyMode::StochasticMc => "stochastic_mc",
            CertifyMode::DeterministicFixedClass => "deterministic_fixed_class",
            CertifyMode::Lbound => "lbound",
        }
    }
}

impl std::str::FromStr for CertifyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic_mc" => Ok(CertifyMode::StochasticMc),
            "deterministic_fixed_class" => Ok(CertifyMode::DeterministicFixedClass),
            "lbound" => Ok(CertifyMode::Lbound),
            other => Err(Error::config("certify.mode", format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyConfig {
    pub sigma: f64,
    /// Selection samples.
    pub n0: usize,
    /// Estimation samples.
    pub n: usize,
    pub alpha_conf: f64,
    pub mode: CertifyMode,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        CertifyConfig {
            sigma: 0.25,
            n0: 25,
            n: 1000,
            alpha_conf: 0.001,
            mode: CertifyMode::StochasticMc,
        }
    }
}

impl CertifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("certify.sigma", "must be positive"));
        }
        if self.n0 == 0 {
            return Err(Error::config("certify.n0", "must be at least 1"));
        }
        if self.n < self.n0 {
            return Err(Error::config("certify.n", "must be at least n0"));
        }
        if !(self.alpha_conf > 0.0 && self.alpha_conf < 1.0) {
            return Err(Error::config("certify.alpha_conf", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Largest radius any sampled certificate can report: all `n` votes agree.
    pub fn radius_ceiling(&self) -> f64 {
        let p = self.alpha_conf.powf(1.0 / self.n as f64);
        self.sigma * normal_quantile(p).unwrap_or(f64::INFINITY)
    }

    fn require(&self, mode: CertifyMode) -> Result<()> {
        if self.mode != mode {
            return Err(Error::config(
                "certify.mode",
                format!("expected {}, got {}", mode.as_str(), self.mode.as_str()),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prediction {
    Class(usize),
    Abstain,
}

impl Prediction {
    pub fn class(self) -> Option<usize> {
        match self {
            Prediction::Class(c) => Some(c),
            Prediction::Abstain => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificationRecord {
    pub example_id: usize,
    pub prediction: Prediction,
    /// Certified ℓ2 radius; 0 when abstaining.
    pub radius: f64,
    pub mode: CertifyMode,
    pub pa_lower: Option<f64>,
}

fn noisy_predictions<M, R>(
    model: &M,
    x: &[f64],
    sigma: f64,
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>>
where
    M: ProbabilityModel + ?Sized,
    R: Rng + ?Sized,
{
    let d = x.len();
    let mut out = Vec::with_capacity(count);
    let mut left = count;
    while left > 0 {
        let m = left.min(SAMPLE_CHUNK);
        let mut rows = Vec::with_capacity(m * d);
        for _ in 0..m {
            rows.extend(x.iter().map(|&v| v + sigma * rng.sample::<f64, _>(StandardNormal)));
        }
        out.extend(model.predict_batch(&Tensor::from_raw(vec![m, d], rows))?);
        left -= m;
    }
    Ok(out)
}

fn vote_counts(preds: &[usize], n_classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; n_classes];
    for &p in preds {
        counts[p] += 1;
    }
    counts
}

fn check_input<M: ProbabilityModel + ?Sized>(model: &M, x: &[f64]) -> Result<()> {
    if x.len() != model.input_dim() {
        return Err(Error::Shape {
            expected: vec![model.input_dim()],
            actual: vec![x.len()],
            context: "certification input",
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("certification input"));
    }
    Ok(())
}

/// Estimates `pA` for the fixed class `top` from `cfg.n` noisy votes and
/// turns it into a record.
fn estimate_radius<M, R>(
    model: &M,
    x: &[f64],
    top: usize,
    cfg: &CertifyConfig,
    rng: &mut R,
) -> Result<CertificationRecord>
where
    M: ProbabilityModel + ?Sized,
    R: Rng + ?Sized,
{
    let preds = noisy_predictions(model, x, cfg.sigma, cfg.n, rng)?;
    let hits = preds.iter().filter(|&&p| p == top).count() as u64;
    let pa_lower = clopper_pearson_lower(hits, cfg.n as u64, cfg.alpha_conf)?;
    let (prediction, radius) = if pa_lower <= 0.5 {
        (Prediction::Abstain, 0.0)
    } else {
        (Prediction::Class(top), cfg.sigma * normal_quantile(pa_lower)?)
    };
    Ok(CertificationRecord {
        example_id: 0,
        prediction,
        radius,
        mode: cfg.mode,
        pa_lower: Some(pa_lower),
    })
}

/// Monte Carlo certification of the Gaussian-noise majority vote of `model`.
pub fn certify_stochastic<M, R>(
    model: &M,
    x: &[f64],
    cfg: &CertifyConfig,
    rng: &mut R,
) -> Result<CertificationRecord>
where
    M: ProbabilityModel + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    cfg.require(CertifyMode::StochasticMc)?;
    check_input(model, x)?;
    let selection = noisy_predictions(model, x, cfg.sigma, cfg.n0, rng)?;
    let top = argmax_counts(&vote_counts(&selection, model.n_classes()));
    estimate_radius(model, x, top, cfg, rng)
}

/// Certification with the top class fixed by one clean forward pass.
pub fn certify_deterministic<M, R>(
    model: &M,
    x: &[f64],
    cfg: &CertifyConfig,
    rng: &mut R,
) -> Result<CertificationRecord>
where
    M: ProbabilityModel + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    cfg.require(CertifyMode::DeterministicFixedClass)?;
    check_input(model, x)?;
    let top = argmax(&model.probabilities(x)?);
    estimate_radius(model, x, top, cfg, rng)
}

fn argmax_counts(counts: &[u64]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// `σ√(π/2)·(p₍k₎ − p₍k+1₎)` for probabilities `probs`, ranks counted from 1.
pub fn lbound_from_probs(probs: &[f64], sigma: f64, k: usize) -> Result<f64> {
    if k == 0 || k >= probs.len() {
        return Err(Error::config(
            "k",
            format!("rank {k} must lie in [1, {})", probs.len()),
        ));
    }
    let order = ranking(probs);
    let gap = probs[order[k - 1]] - probs[order[k]];
    Ok(sigma * (PI / 2.0).sqrt() * gap.max(0.0))
}

/// Lipschitz radius within which no perturbation can change which classes
/// occupy the top `k` ranks of a Gaussian-smoothed model.
pub fn lbound_radius<M: ProbabilityModel + ?Sized>(
    model: &M,
    x: &[f64],
    sigma: f64,
    k: usize,
) -> Result<f64> {
    check_input(model, x)?;
    lbound_from_probs(&model.probabilities(x)?, sigma, k)
}

/// Sample-free certificate from [`lbound_radius`] with `k = 1`.
pub fn certify_lbound<M: ProbabilityModel + ?Sized>(
    model: &M,
    x: &[f64],
    cfg: &CertifyConfig,
) -> Result<CertificationRecord> {
    cfg.validate()?;
    cfg.require(CertifyMode::Lbound)?;
    check_input(model, x)?;
    let probs = model.probabilities(x)?;
    Ok(CertificationRecord {
        example_id: 0,
        prediction: Prediction::Class(argmax(&probs)),
        radius: lbound_from_probs(&probs, cfg.sigma, 1)?,
        mode: CertifyMode::Lbound,
        pa_lower: None,
    })
}

/// Dispatches on `cfg.mode`.
pub fn certify<M, R>(
    model: &M,
    x: &[f64],
    example_id: usize,
    cfg: &CertifyConfig,
    rng: &mut R,
) -> Result<CertificationRecord>
where
    M: ProbabilityModel + ?Sized,
    R: Rng + ?Sized,
{
    let mut rec = match cfg.mode {
        CertifyMode::StochasticMc => certify_stochastic(model, x, cfg, rng)?,
        CertifyMode::DeterministicFixedClass => certify_deterministic(model, x, cfg, rng)?,
        CertifyMode::Lbound => certify_lbound(model, x, cfg)?,
    };
    rec.example_id = example_id;
    Ok(rec)
}

/// Certified accuracy at each radius of `radii`: the fraction of examples
/// predicted correctly (not abstaining) with radius at least `r`.
///
/// `radii` must be sorted ascending; the result is non-increasing.
pub fn certified_accuracy_curve(
    records: &[CertificationRecord],
    labels: &[usize],
    radii: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if records.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: records.len(),
            right: labels.len(),
            context: "certification records vs labels",
        });
    }
    if records.is_empty() {
        return Err(Error::Empty("certification records"));
    }
    if radii.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::config("radii", "radius grid must be sorted ascending"));
    }
    let mut certified: Vec<f64> = records
        .iter()
        .zip(labels)
        .filter(|(r, &y)| r.prediction == Prediction::Class(y))
        .map(|(r, _)| r.radius)
        .collect();
    certified.sort_by(f64::total_cmp);
    let n = records.len() as f64;
    Ok(radii
        .iter()
        .map(|&r| {
            let below = certified.partition_point(|&c| c < r);
            (r, (certified.len() - below) as f64 / n)
        })
        .collect())
}

/// Evenly spaced grid `0, step, 2·step, …` up to and including `max`.
pub fn radius_grid(max: f64, points: usize) -> Vec<f64> {
    if points < 2 {
        return vec![0.0];
    }
    (0..points)
        .map(|i| max * i as f64 / (points - 1) as f64)
        .collect()
}

/// One CSV row of a certification records file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificationRow {
    pub example_id: usize,
    pub mode: CertifyMode,
    pub predicted: Option<usize>,
    pub abstain: bool,
    #[serde(rename = "pA_lower")]
    pub pa_lower: Option<f64>,
    pub radius: f64,
}

impl From<&CertificationRecord> for CertificationRow {
    fn from(r: &CertificationRecord) -> Self {
        CertificationRow {
            example_id: r.example_id,
            mode: r.mode,
            predicted: r.prediction.class(),
            abstain: r.prediction == Prediction::Abstain,
            pa_lower: r.pa_lower,
            radius: r.radius,
        }
    }
}

impl TryFrom<CertificationRow> for CertificationRecord {
    type Error = Error;

    fn try_from(row: CertificationRow) -> Result<Self> {
        let prediction = match (row.abstain, row.predicted) {
            (true, None) => Prediction::Abstain,
            (false, Some(c)) => Prediction::Class(c),
            _ => {
                return Err(Error::CorruptPayload(format!(
                    "example {}: abstain flag disagrees with predicted class",
                    row.example_id
                )))
            }
        };
        if prediction == Prediction::Abstain && row.radius != 0.0 {
            return Err(Error::CorruptPayload(format!(
                "example {}: abstained with nonzero radius",
                row.example_id
            )));
        }
        Ok(CertificationRecord {
            example_id: row.example_id,
            prediction,
            radius: row.radius,
            mode: row.mode,
            pa_lower: row.pa_lower,
        })
    }
}

pub fn write_records_csv(records: &[CertificationRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in records {
        w.serialize(CertificationRow::from(r)).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records_csv(path: &Path) -> Result<Vec<CertificationRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize::<CertificationRow>() {
        out.push(row.map_err(|e| csv_error(path, e))?.try_into()?);
    }
    Ok(out)
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::Csv {
        path: path.to_path_buf(),
        line,
        reason: e.to_string(),
    }
}

/// Writes `(x, y)` pairs with the given column names.
pub fn write_curve_csv(curve: &[(f64, f64)], header: [&str; 2], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for (a, b) in curve {
        w.write_record([a.to_string(), b.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
