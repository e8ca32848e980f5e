//! ℓ2 PGD and DDN attacks.
//!
//! Both attacks ascend the cross-entropy loss of the target. Against a
//! deterministic model the gradient is taken at `x + δ`; against a
//! stochastically averaged model (`n_noise > 0`) the gradients at
//! `x + δ + η_i`, `η_i ~ N(0, σ²I)`, are summed before normalizing, and
//! success is decided by a majority vote over fresh noisy predictions.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::certify::{csv_error, lbound_radius};
use crate::error::{Error, Result};
use crate::jl::ZERO_GRADIENT_TOL;
use crate::model::{argmax, ranking, softmax, MlpModel};
use crate::tensor::{norm, Tensor};
use crate::ProbabilityModel;

/// A model whose class scores can be differentiated with respect to inputs.
///
/// Scores are logits: softmax of the scores gives class probabilities.
pub trait AttackTarget {
    fn n_classes(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// Scores for every row of `xs`, shape `[N, Nc]`.
    fn scores_batch(&self, xs: &Tensor) -> Result<Tensor>;
    /// Row `i` is `∇_x (ws[i] · scores(xs[i]))`.
    fn scores_grad_batch(&self, xs: &Tensor, ws: &Tensor) -> Result<Tensor>;
}

impl AttackTarget for MlpModel {
    fn n_classes(&self) -> usize {
        MlpModel::n_classes(self)
    }

    fn input_dim(&self) -> usize {
        self.d_in()
    }

    fn scores_batch(&self, xs: &Tensor) -> Result<Tensor> {
        self.forward_batch(xs)
    }

    fn scores_grad_batch(&self, xs: &Tensor, ws: &Tensor) -> Result<Tensor> {
        self.input_grad_projected_batch(xs, ws)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SuccessCriterion {
    /// The true label is no longer the top prediction.
    Top1,
    /// The true label drops out of the top `k` predictions.
    Topk { k: usize },
}

impl SuccessCriterion {
    fn k(self) -> usize {
        match self {
            SuccessCriterion::Top1 => 1,
            SuccessCriterion::Topk { k } => k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLoss {
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Pgd,
    Ddn,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Pgd => "pgd",
            AttackKind::Ddn => "ddn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdnConfig {
    /// Multiplicative radius adjustment per iteration.
    pub gamma: f64,
    pub init_radius: f64,
    /// Final step size as a fraction of `alpha_step` (cosine schedule).
    pub min_step_fraction: f64,
}

impl Default for DdnConfig {
    fn default() -> Self {
        DdnConfig {
            gamma: 0.05,
            init_radius: 1.0,
            min_step_fraction: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub alpha_step: f64,
    pub epsilon: f64,
    pub max_steps: usize,
    /// Noise samples per gradient; 0 attacks the deterministic model.
    pub n_noise: usize,
    pub sigma: f64,
    pub success_criterion: SuccessCriterion,
    pub loss: AttackLoss,
    pub ddn: DdnConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            alpha_step: 0.5,
            epsilon: 4.0,
            max_steps: 20,
            n_noise: 0,
            sigma: 0.0,
            success_criterion: SuccessCriterion::Top1,
            loss: AttackLoss::CrossEntropy,
            ddn: DdnConfig::default(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_step > 0.0 && self.alpha_step.is_finite()) {
            return Err(Error::config("attack.alpha_step", "must be positive"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("attack.epsilon", "must be positive"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("attack.max_steps", "must be at least 1"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("attack.sigma", "must be nonnegative"));
        }
        if self.n_noise == 0 && self.sigma > 0.0 {
            return Err(Error::config(
                "attack.n_noise",
                "sigma > 0 needs n_noise >= 1 (n_noise = 0 is the deterministic mode)",
            ));
        }
        if let SuccessCriterion::Topk { k } = self.success_criterion {
            if k == 0 {
                return Err(Error::config("attack.success_criterion", "k must be at least 1"));
            }
        }
        let d = &self.ddn;
        if !(0.0..1.0).contains(&d.gamma) {
            return Err(Error::config("attack.ddn.gamma", "must lie in [0, 1)"));
        }
        if !(d.init_radius > 0.0 && d.init_radius.is_finite()) {
            return Err(Error::config("attack.ddn.init_radius", "must be positive"));
        }
        if !(0.0..=1.0).contains(&d.min_step_fraction) {
            return Err(Error::config("attack.ddn.min_step_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }

    fn stochastic(&self) -> bool {
        self.n_noise > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub example_id: usize,
    pub attack: AttackKind,
    pub success: bool,
    /// Smallest successful perturbation norm, or the final norm on failure.
    pub norm: f64,
    pub steps: usize,
    /// The loss gradient vanished and the attack stopped moving.
    pub stationary: bool,
}

/// Result of a single PGD step.
#[derive(Clone, Debug, PartialEq)]
pub struct PgdStep {
    pub delta: Vec<f64>,
    pub stationary: bool,
}

fn check_example<M: AttackTarget + ?Sized>(model: &M, x: &[f64], y: usize) -> Result<()> {
    if x.len() != model.input_dim() {
        return Err(Error::Shape {
            expected: vec![model.input_dim()],
            actual: vec![x.len()],
            context: "attack input",
        });
    }
    if y >= model.n_classes() {
        return Err(Error::LabelOutOfRange {
            label: y,
            n_classes: model.n_classes(),
        });
    }
    Ok(())
}

/// Rows `x + δ + σ·η_i`, or the single row `x + δ` in deterministic mode.
fn query_points<R: Rng + ?Sized>(x: &[f64], delta: &[f64], cfg: &AttackConfig, rng: &mut R) -> Tensor {
    let d = x.len();
    let rows = cfg.n_noise.max(1);
    let mut data = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        for (a, b) in x.iter().zip(delta) {
            let base = a + b;
            data.push(if cfg.stochastic() {
                base + cfg.sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                base
            });
        }
    }
    Tensor::from_raw(vec![rows, d], data)
}

/// Summed cross-entropy input gradient over the query points.
fn loss_gradient<M, R>(
    model: &M,
    x: &[f64],
    delta: &[f64],
    y: usize,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    M: AttackTarget + ?Sized,
    R: Rng + ?Sized,
{
    let pts = query_points(x, delta, cfg, rng);
    let scores = model.scores_batch(&pts)?;
    let nc = scores.cols();
    let mut ws = Vec::with_capacity(pts.rows() * nc);
    for i in 0..pts.rows() {
        let mut w = softmax(scores.row(i));
        w[y] -= 1.0;
        ws.extend(w);
    }
    let grads = model.scores_grad_batch(&pts, &Tensor::from_raw(vec![pts.rows(), nc], ws))?;
    let d = x.len();
    let mut total = vec![0.0; d];
    for i in 0..grads.rows() {
        for (t, g) in total.iter_mut().zip(grads.row(i)) {
            *t += g;
        }
    }
    Ok(total)
}

/// Whether `x + δ` is misclassified under the success criterion.
pub fn is_adversarial<M, R>(
    model: &M,
    x: &[f64],
    delta: &[f64],
    y: usize,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<bool>
where
    M: AttackTarget + ?Sized,
    R: Rng + ?Sized,
{
    let k = cfg.success_criterion.k().min(model.n_classes());
    let pts = query_points(x, delta, cfg, rng);
    let scores = model.scores_batch(&pts)?;
    let ranked = if cfg.stochastic() {
        let mut votes = vec![0.0; model.n_classes()];
        for i in 0..scores.rows() {
            votes[argmax(scores.row(i))] += 1.0;
        }
        ranking(&votes)
    } else {
        ranking(scores.row(0))
    };
    Ok(!ranked[..k].contains(&y))
}

fn project(delta: &mut [f64], radius: f64) {
    let n = norm(delta);
    if n > radius {
        let s = radius / n;
        delta.iter_mut().for_each(|v| *v *= s);
    }
}

/// One normalized-gradient ascent step of length `alpha_step`, projected
/// onto the ε-ball. A vanishing gradient leaves `delta` unchanged.
pub fn pgd_step<M, R>(
    model: &M,
    x: &[f64],
    delta: &[f64],
    y: usize,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<PgdStep>
where
    M: AttackTarget + ?Sized,
    R: Rng + ?Sized,
{
    check_example(model, x, y)?;
    if delta.len() != x.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: delta.len(),
            context: "input vs perturbation",
        });
    }
    let g = loss_gradient(model, x, delta, y, cfg, rng)?;
    let gn = norm(&g);
    if !(gn >= ZERO_GRADIENT_TOL) {
        return Ok(PgdStep {
            delta: delta.to_vec(),
            stationary: true,
        });
    }
    let mut next: Vec<f64> = delta
        .iter()
        .zip(&g)
        .map(|(d, gi)| d + cfg.alpha_step * gi / gn)
        .collect();
    project(&mut next, cfg.epsilon);
    Ok(PgdStep {
        delta: next,
        stationary: false,
    })
}

/// PGD until the success criterion holds or `max_steps` steps are taken.
pub fn pgd_attack<M, R>(
    model: &M,
    x: &[f64],
    y: usize,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<AttackRecord>
where
    M: AttackTarget + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    check_example(model, x, y)?;
    let mut delta = vec![0.0; x.len()];
    let mut record = AttackRecord {
        example_id: 0,
        attack: AttackKind::Pgd,
        success: false,
        norm: 0.0,
        steps: 0,
        stationary: false,
    };
    if is_adversarial(model, x, &delta, y, cfg, rng)? {
        record.success = true;
        return Ok(record);
    }
    for step in 1..=cfg.max_steps {
        let next = pgd_step(model, x, &delta, y, cfg, rng)?;
        record.steps = step;
        if next.stationary {
            record.stationary = true;
            break;
        }
        delta = next.delta;
        if is_adversarial(model, x, &delta, y, cfg, rng)? {
            record.success = true;
            break;
        }
    }
    record.norm = norm(&delta);
    Ok(record)
}

/// Decoupled direction and norm: a gradient step sets the direction, and the
/// perturbation is rescaled to a radius that shrinks by `1 − γ` after an
/// adversarial iterate and grows by `1 + γ` otherwise.
pub fn ddn_attack<M, R>(
    model: &M,
    x: &[f64],
    y: usize,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<AttackRecord>
where
    M: AttackTarget + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    check_example(model, x, y)?;
    let ddn = &cfg.ddn;
    let mut delta = vec![0.0; x.len()];
    let mut radius = ddn.init_radius.min(cfg.epsilon);
    let mut best: Option<f64> = None;
    let mut record = AttackRecord {
        example_id: 0,
        attack: AttackKind::Ddn,
        success: false,
        norm: 0.0,
        steps: 0,
        stationary: false,
    };
    if is_adversarial(model, x, &delta, y, cfg, rng)? {
        record.success = true;
        return Ok(record);
    }
    let alpha_min = cfg.alpha_step * ddn.min_step_fraction;
    for step in 0..cfg.max_steps {
        let adversarial = step > 0 && is_adversarial(model, x, &delta, y, cfg, rng)?;
        if adversarial {
            let n = norm(&delta);
            best = Some(best.map_or(n, |b: f64| b.min(n)));
        }
        let g = loss_gradient(model, x, &delta, y, cfg, rng)?;
        let gn = norm(&g);
        record.steps = step + 1;
        if !(gn >= ZERO_GRADIENT_TOL) {
            record.stationary = true;
            break;
        }
        let phase = PI * step as f64 / cfg.max_steps as f64;
        let alpha = alpha_min + (cfg.alpha_step - alpha_min) * 0.5 * (1.0 + phase.cos());
        let moved: Vec<f64> = delta.iter().zip(&g).map(|(d, gi)| d + alpha * gi / gn).collect();
        radius = if adversarial {
            radius * (1.0 - ddn.gamma)
        } else {
            radius * (1.0 + ddn.gamma)
        }
        .min(cfg.epsilon);
        let mn = norm(&moved);
        delta = moved.iter().map(|v| v * radius / mn).collect();
    }
    if !record.stationary && is_adversarial(model, x, &delta, y, cfg, rng)? {
        let n = norm(&delta);
        best = Some(best.map_or(n, |b| b.min(n)));
    }
    match best {
        Some(n) => {
            record.success = true;
            record.norm = n;
        }
        None => record.norm = norm(&delta),
    }
    Ok(record)
}

/// Runs the chosen attack and stamps the example id.
pub fn attack<M, R>(
    kind: AttackKind,
    model: &M,
    x: &[f64],
    y: usize,
    example_id: usize,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<AttackRecord>
where
    M: AttackTarget + ?Sized,
    R: Rng + ?Sized,
{
    let mut rec = match kind {
        AttackKind::Pgd => pgd_attack(model, x, y, cfg, rng)?,
        AttackKind::Ddn => ddn_attack(model, x, y, cfg, rng)?,
    };
    rec.example_id = example_id;
    Ok(rec)
}

/// Fraction of records attacked successfully at a norm no larger than each
/// threshold of `norms`. Non-decreasing for a sorted grid.
pub fn attack_curve(records: &[AttackRecord], norms: &[f64]) -> Result<Vec<(f64, f64)>> {
    if records.is_empty() {
        return Err(Error::Empty("attack records"));
    }
    if norms.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::config("norms", "norm grid must be sorted ascending"));
    }
    let mut hit: Vec<f64> = records.iter().filter(|r| r.success).map(|r| r.norm).collect();
    hit.sort_by(f64::total_cmp);
    let n = records.len() as f64;
    Ok(norms
        .iter()
        .map(|&t| (t, hit.partition_point(|&h| h <= t) as f64 / n))
        .collect())
}

/// Median and mean of a list of distances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceSummary {
    pub count: usize,
    pub median: f64,
    pub mean: f64,
}

impl DistanceSummary {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("distance list"));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Ok(DistanceSummary {
            count: n,
            median,
            mean: v.iter().sum::<f64>() / n as f64,
        })
    }
}

/// Summary of successful attack norms, with the success rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub attack: AttackKind,
    pub attempted: usize,
    pub success_rate: f64,
    /// `None` when no attack succeeded.
    pub distances: Option<DistanceSummary>,
}

pub fn summarize(kind: AttackKind, records: &[AttackRecord]) -> AttackSummary {
    let wins: Vec<f64> = records
        .iter()
        .filter(|r| r.attack == kind && r.success)
        .map(|r| r.norm)
        .collect();
    let attempted = records.iter().filter(|r| r.attack == kind).count();
    AttackSummary {
        attack: kind,
        attempted,
        success_rate: if attempted == 0 {
            0.0
        } else {
            wins.len() as f64 / attempted as f64
        },
        distances: DistanceSummary::from_values(&wins).ok(),
    }
}

/// Per-example rank-`k` L-bound radii over the rows of `inputs`, reduced to
/// median and mean.
pub fn lbound_table<M: ProbabilityModel + ?Sized>(
    model: &M,
    inputs: &Tensor,
    sigma: f64,
    k: usize,
) -> Result<(DistanceSummary, Vec<f64>)> {
    if inputs.rows() == 0 {
        return Err(Error::Empty("dataset"));
    }
    let radii = (0..inputs.rows())
        .map(|i| lbound_radius(model, inputs.row(i), sigma, k))
        .collect::<Result<Vec<_>>>()?;
    Ok((DistanceSummary::from_values(&radii)?, radii))
}

/// CSV row of an attack records file.
#[derive(Debug, Serialize, Deserialize)]
struct AttackRow {
    example_id: usize,
    attack: AttackKind,
    success: bool,
    norm: f64,
    steps: usize,
}

pub fn write_records_csv(records: &[AttackRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in records {
        w.serialize(AttackRow {
            example_id: r.example_id,
            attack: r.attack,
            success: r.success,
            norm: r.norm,
            steps: r.steps,
        })
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records_csv(path: &Path) -> Result<Vec<AttackRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize::<AttackRow>() {
        let row = row.map_err(|e| csv_error(path, e))?;
        out.push(AttackRecord {
            example_id: row.example_id,
            attack: row.attack,
            success: row.success,
            norm: row.norm,
            steps: row.steps,
            stationary: false,
        });
    }
    Ok(out)
}
