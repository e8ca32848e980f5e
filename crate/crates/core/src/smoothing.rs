//! Training smoothed models.
//!
//! Heat smoothing retrains a student `v` against a frozen teacher `f^k`,
//! minimizing
//!
//! ```text
//! E_x [ ½‖S(v(x)) − S(f^k(x))‖² + (hσ²/2) ‖∇_x v(x)‖²_F ]
//! ```
//!
//! where `S` is softmax (or the identity in raw mode) and the Jacobian norm is
//! the JL finite-difference estimate with detached directions. One minimization
//! is one implicit time step of length `h` of the heat equation
//! `∂_t f = (σ²/2) Δf`; `n_T` steps with `h = 1/n_T` reach `t = 1`, i.e.
//! Gaussian convolution with variance `σ²`. With `h = 1` and a single step
//! this is the plain single-pass loss with weight `σ²/2`.
//!
//! Heat smoothing never reads labels: its trainers take input matrices only.


use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::data::Labeled;
use crate::error::{Error, Result};
use crate::jl::{normalize_or_zero, sample_w, JlConfig};
use crate::model::{softmax, Mode, MlpModel, ParamVars};
use crate::rng;
use crate::tensor::Tensor;

/// Losses above this are treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Multi-timestep heat smoothing on clean inputs.
    HeatsmoothingEq3,
    /// Single pass with Gaussian noise on a fraction of the student inputs.
    ImagenetEq9,
    /// Supervised cross-entropy on noise-augmented inputs.
    NoiseBaseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    Softmax,
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    Fixed,
    /// Multiply the rate by `factor` every `every` epochs.
    Step { every: usize, factor: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Fixed => base,
            LrSchedule::Step { every, factor } => base * factor.powi((epoch / every.max(1)) as i32),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingConfig {
    pub sigma: f64,
    pub n_timesteps: usize,
    /// Time step; defaults to `1 / n_timesteps` (heat smoothing) or 1 (noisy variant).
    pub h: Option<f64>,
    pub epochs_per_timestep: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub jl: JlConfig,
    pub variant: Variant,
    pub noise_fraction: f64,
    pub distance: DistanceMode,
    pub seed: u64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig {
            sigma: 0.1,
            n_timesteps: 5,
            h: None,
            epochs_per_timestep: 20,
            lr: 0.01,
            lr_schedule: LrSchedule::Fixed,
            batch_size: 32,
            jl: JlConfig::default(),
            variant: Variant::HeatsmoothingEq3,
            noise_fraction: 0.5,
            distance: DistanceMode::Softmax,
            seed: 0,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        let sigma_ok = match self.variant {
            Variant::NoiseBaseline => self.sigma >= 0.0,
            _ => self.sigma > 0.0,
        };
        if !sigma_ok || !self.sigma.is_finite() {
            return Err(Error::config("smoothing.sigma", format!("invalid value {}", self.sigma)));
        }
        if self.n_timesteps == 0 {
            return Err(Error::config("smoothing.n_timesteps", "must be at least 1"));
        }
        if let Some(h) = self.h {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::config("smoothing.h", "must be positive"));
            }
        }
        if self.epochs_per_timestep == 0 {
            return Err(Error::config("smoothing.epochs_per_timestep", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("smoothing.lr", "must be positive"));
        }
        if let LrSchedule::Step { every, factor } = self.lr_schedule {
            if every == 0 || !(factor > 0.0) {
                return Err(Error::config("smoothing.lr_schedule", "need every >= 1, factor > 0"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("smoothing.batch_size", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            return Err(Error::config("smoothing.noise_fraction", "must lie in [0, 1]"));
        }
        self.jl.validate()
    }

    /// Time step used inside heat smoothing.
    pub fn step_h(&self) -> f64 {
        self.h.unwrap_or(1.0 / self.n_timesteps as f64)
    }

    fn require(&self, variant: Variant) -> Result<()> {
        if self.variant != variant {
            return Err(Error::config(
                "smoothing.variant",
                format!("expected {variant:?}, got {:?}", self.variant),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepReport {
    pub timestep: usize,
    /// Full-dataset loss of the student at the start of the timestep.
    pub initial_loss: f64,
    /// Full-dataset loss after the last epoch (same noise draws as `initial_loss`).
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub timesteps: Vec<TimestepReport>,
    /// Wall-clock seconds per epoch; not serialized so reports stay reproducible.
    #[serde(skip)]
    pub epoch_seconds: Vec<f64>,
    pub config: SmoothingConfig,
}

impl TrainReport {
    fn new(config: &SmoothingConfig) -> Self {
        TrainReport {
            epoch_losses: Vec::new(),
            timesteps: Vec::new(),
            epoch_seconds: Vec::new(),
            config: config.clone(),
        }
    }
}

/// Recorded minibatch objective, ready for a backward pass.
pub struct MinibatchLoss {
    pub tape: Tape,
    pub loss: Var,
    pub params: ParamVars,
    /// Mean distance term.
    pub distance: f64,
    /// Mean weighted gradient penalty.
    pub penalty: f64,
}

impl MinibatchLoss {
    pub fn value(&self) -> f64 {
        self.tape.value(self.loss).data()[0]
    }
}

struct LossSpec<'a> {
    penalty_weight: f64,
    distance: DistanceMode,
    jl: &'a JlConfig,
}

/// Records the smoothing objective for a batch whose student inputs are
/// `xs` and whose (already transformed) teacher targets are `targets`.
fn record_smoothing_loss<R: Rng + ?Sized>(
    student: &MlpModel,
    xs: &Tensor,
    targets: &Tensor,
    spec: &LossSpec<'_>,
    rng: &mut R,
) -> Result<MinibatchLoss> {
    let nb = xs.rows();
    let nc = student.n_classes();
    let k = spec.jl.resolve_proj_dim(nc)?;
    let delta = spec.jl.delta_fd;

    let mut tape = Tape::new();
    let params = student.register(&mut tape);
    let xv = tape.constant(xs.clone());
    let out = student.forward_on(&mut tape, &params, xv)?;
    let compared = match spec.distance {
        DistanceMode::Softmax => tape.softmax_rows(out)?,
        DistanceMode::Raw => out,
    };
    let tv = tape.constant(targets.clone());
    let diff = tape.sub(compared, tv)?;
    let dist = tape.sum_squares(diff)?;
    let dist = tape.scale(dist, 0.5 / nb as f64)?;

    let mut shifted = xs.clone();
    let mut penalty_terms = Vec::with_capacity(spec.jl.kappa);
    for _ in 0..spec.jl.kappa {
        let ws: Vec<f64> = (0..nb).flat_map(|_| sample_w(k, rng).into_data()).collect();
        let ws = Tensor::from_raw(vec![nb, k], ws);
        // direction from the current weights, detached from the tape
        let mut dirs = student.input_grad_projected_batch(xs, &ws)?;
        let d = xs.cols();
        for row in dirs.data_mut().chunks_mut(d) {
            normalize_or_zero(row);
        }
        for ((s, &x), &g) in shifted.data_mut().iter_mut().zip(xs.data()).zip(dirs.data()) {
            *s = x + delta * g;
        }
        let sv = tape.constant(shifted.clone());
        let moved = student.forward_on(&mut tape, &params, sv)?;
        let change = tape.sub(moved, out)?;
        let wv = tape.constant(ws);
        let proj = tape.row_dot(change, wv)?;
        penalty_terms.push(tape.sum_squares(proj)?);
    }
    let mut pen = penalty_terms[0];
    for &p in &penalty_terms[1..] {
        pen = tape.add(pen, p)?;
    }
    let coef = spec.penalty_weight * spec.jl.normalization(k) / (delta * delta * nb as f64);
    let pen = tape.scale(pen, coef)?;
    let loss = tape.add(dist, pen)?;

    let distance = tape.value(dist).data()[0];
    let penalty = tape.value(pen).data()[0];
    Ok(MinibatchLoss {
        tape,
        loss,
        params,
        distance,
        penalty,
    })
}

fn teacher_targets(teacher: &MlpModel, xs: &Tensor, distance: DistanceMode) -> Result<Tensor> {
    let logits = teacher.forward_batch(xs)?;
    Ok(match distance {
        DistanceMode::Raw => logits,
        DistanceMode::Softmax => {
            let c = logits.cols();
            let data = logits.data().chunks(c).flat_map(softmax).collect();
            Tensor::from_raw(logits.shape().to_vec(), data)
        }
    })
}

/// Single-pass heat-smoothing objective on a minibatch, with penalty weight
/// `σ²/2` (a single time step of length 1). The teacher must be frozen.
pub fn heatsmoothing_minibatch_loss<R: Rng + ?Sized>(
    student: &MlpModel,
    teacher: &MlpModel,
    batch: &Tensor,
    cfg: &SmoothingConfig,
    rng: &mut R,
) -> Result<MinibatchLoss> {
    if teacher.mode() != Mode::Eval {
        return Err(Error::config("teacher", "teacher model must be frozen (eval mode)"));
    }
    if teacher.layer_dims().first() != student.layer_dims().first()
        || teacher.n_classes() != student.n_classes()
    {
        return Err(Error::Shape {
            expected: vec![student.d_in(), student.n_classes()],
            actual: vec![teacher.d_in(), teacher.n_classes()],
            context: "teacher vs student",
        });
    }
    cfg.jl.validate()?;
    let targets = teacher_targets(teacher, batch, cfg.distance)?;
    let spec = LossSpec {
        penalty_weight: cfg.sigma * cfg.sigma / 2.0,
        distance: cfg.distance,
        jl: &cfg.jl,
    };
    record_smoothing_loss(student, batch, &targets, &spec, rng)
}

fn gather_rows(src: &Tensor, idx: &[usize]) -> Tensor {
    let c = src.cols();
    let data = idx.iter().flat_map(|&i| src.row(i).iter().copied()).collect();
    Tensor::from_raw(vec![idx.len(), c], data)
}

fn divergence(err: Error, timestep: usize, epoch: usize) -> Error {
    match err {
        Error::Autodiff(AutodiffError::NonFinite { .. }) | Error::NonFinite(_) => Error::Diverged {
            timestep,
            epoch,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Starts a wall-clock timer; wasm32 has no clock, so epochs report zero there.
#[cfg(not(target_arch = "wasm32"))]
fn epoch_clock() -> impl FnOnce() -> f64 {
    let start = std::time::Instant::now();
    move || start.elapsed().as_secs_f64()
}

#[cfg(target_arch = "wasm32")]
fn epoch_clock() -> impl FnOnce() -> f64 {
    || 0.0
}

fn check_loss(loss: f64, timestep: usize, epoch: usize) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
        return Err(Error::Diverged {
            timestep,
            epoch,
            loss,
        });
    }
    Ok(())
}

const TAG_PERM: u64 = 1;
const TAG_BATCH: u64 = 2;
const TAG_EVAL: u64 = 3;

/// One smoothing stage: starts the student at the teacher's weights and runs
/// minibatch SGD on the objective for `cfg.epochs_per_timestep` epochs.
struct Stage<'a> {
    cfg: &'a SmoothingConfig,
    timestep: usize,
    penalty_weight: f64,
    /// Fraction of rows whose student input gets Gaussian noise.
    noise_fraction: f64,
}

impl Stage<'_> {
    fn batch_inputs<R: Rng + ?Sized>(&self, inputs: &Tensor, idx: &[usize], rng: &mut R) -> Tensor {
        let mut xs = gather_rows(inputs, idx);
        if self.noise_fraction > 0.0 {
            let d = xs.cols();
            for row in xs.data_mut().chunks_mut(d) {
                if rng.random::<f64>() < self.noise_fraction {
                    for v in row {
                        *v += self.cfg.sigma * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
        }
        xs
    }

    fn spec(&self) -> LossSpec<'_> {
        LossSpec {
            penalty_weight: self.penalty_weight,
            distance: self.cfg.distance,
            jl: &self.cfg.jl,
        }
    }

    /// Mean loss over the whole dataset in fixed batch order, without updates.
    fn evaluate(&self, student: &MlpModel, inputs: &Tensor, targets: &Tensor) -> Result<f64> {
        let n = inputs.rows();
        let order: Vec<usize> = (0..n).collect();
        let mut total = 0.0;
        for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let mut r = rng::stream(self.cfg.seed, &[TAG_EVAL, self.timestep as u64, b as u64]);
            let xs = self.batch_inputs(inputs, idx, &mut r);
            let ts = gather_rows(targets, idx);
            let loss = record_smoothing_loss(student, &xs, &ts, &self.spec(), &mut r)
                .map_err(|e| divergence(e, self.timestep, 0))?;
            total += loss.value() * idx.len() as f64;
        }
        Ok(total / n as f64)
    }

    fn run(
        &self,
        teacher: &MlpModel,
        inputs: &Tensor,
        report: &mut TrainReport,
    ) -> Result<MlpModel> {
        let cfg = self.cfg;
        let teacher = teacher.frozen();
        let targets = teacher_targets(&teacher, inputs, cfg.distance)?;
        let mut student = teacher.clone();
        student.set_mode(Mode::Train);

        let initial_loss = self.evaluate(&student, inputs, &targets)?;
        let n = inputs.rows();
        let ts = self.timestep as u64;
        for epoch in 0..cfg.epochs_per_timestep {
            let elapsed = epoch_clock();
            let lr = cfg.lr_schedule.rate(cfg.lr, epoch);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::stream(cfg.seed, &[TAG_PERM, ts, epoch as u64]));
            let mut total = 0.0;
            for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
                let mut r = rng::stream(cfg.seed, &[TAG_BATCH, ts, epoch as u64, b as u64]);
                let xs = self.batch_inputs(inputs, idx, &mut r);
                let tb = gather_rows(&targets, idx);
                let mut loss = record_smoothing_loss(&student, &xs, &tb, &self.spec(), &mut r)
                    .map_err(|e| divergence(e, self.timestep, epoch))?;
                let value = loss.value();
                check_loss(value, self.timestep, epoch)?;
                let grads = loss.tape.backward(loss.loss)?;
                student.sgd_step(&grads, &loss.params, lr);
                total += value * idx.len() as f64;
            }
            if !student.is_finite() {
                return Err(Error::Diverged {
                    timestep: self.timestep,
                    epoch,
                    loss: f64::NAN,
                });
            }
            report.epoch_losses.push(total / n as f64);
            report.epoch_seconds.push(elapsed());
        }
        let final_loss = self.evaluate(&student, inputs, &targets)?;
        report.timesteps.push(TimestepReport {
            timestep: self.timestep,
            initial_loss,
            final_loss,
        });
        student.set_sigma(Some(cfg.sigma));
        Ok(student)
    }
}

/// One variational step: returns `argmin_v E[½‖v − f_k‖² + (hσ²/2)‖∇v‖²]`
/// approximated by SGD started from `f_k`.
pub fn train_timestep(
    f_k: &MlpModel,
    inputs: &Tensor,
    cfg: &SmoothingConfig,
) -> Result<(MlpModel, TrainReport)> {
    cfg.validate()?;
    let mut report = TrainReport::new(cfg);
    let stage = Stage {
        cfg,
        timestep: 0,
        penalty_weight: cfg.step_h() * cfg.sigma * cfg.sigma / 2.0,
        noise_fraction: 0.0,
    };
    let model = stage.run(f_k, inputs, &mut report)?;
    Ok((model, report))
}

/// Chains `n_T` timesteps, re-freezing the teacher before each one.
pub fn train_heatsmooth(
    f0: &MlpModel,
    inputs: &Tensor,
    cfg: &SmoothingConfig,
) -> Result<(MlpModel, TrainReport)> {
    cfg.validate()?;
    cfg.require(Variant::HeatsmoothingEq3)?;
    let mut report = TrainReport::new(cfg);
    let mut current = f0.frozen();
    for timestep in 0..cfg.n_timesteps {
        let stage = Stage {
            cfg,
            timestep,
            penalty_weight: cfg.step_h() * cfg.sigma * cfg.sigma / 2.0,
            noise_fraction: 0.0,
        };
        current = stage.run(&current, inputs, &mut report)?;
    }
    current.set_mode(Mode::Eval);
    Ok((current, report))
}

/// Single-stage variant: the student sees `x + η` for a `noise_fraction` of
/// the examples while the teacher always sees clean `x`. The time step
/// defaults to 1.
pub fn train_imagenet_variant(
    f0: &MlpModel,
    inputs: &Tensor,
    cfg: &SmoothingConfig,
) -> Result<(MlpModel, TrainReport)> {
    cfg.validate()?;
    cfg.require(Variant::ImagenetEq9)?;
    let mut report = TrainReport::new(cfg);
    let stage = Stage {
        cfg,
        timestep: 0,
        penalty_weight: cfg.h.unwrap_or(1.0) * cfg.sigma * cfg.sigma / 2.0,
        noise_fraction: cfg.noise_fraction,
    };
    let mut model = stage.run(f0, inputs, &mut report)?;
    model.set_mode(Mode::Eval);
    Ok((model, report))
}

/// Hyperparameters for supervised (cross-entropy) training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    /// Standard deviation of the Gaussian noise added to every input (0 = clean).
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            epochs: 200,
            lr: 0.01,
            lr_schedule: LrSchedule::Fixed,
            batch_size: 32,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("train.noise_sigma", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Mean cross-entropy of `model` on a labeled batch, recorded on a fresh tape.
fn record_cross_entropy(model: &MlpModel, xs: &Tensor, ys: &[usize]) -> Result<(Tape, Var, ParamVars)> {
    let mut tape = Tape::new();
    let params = model.register(&mut tape);
    let xv = tape.constant(xs.clone());
    let logits = model.forward_on(&mut tape, &params, xv)?;
    let logp = tape.log_softmax_rows(logits)?;
    let picked = tape.pick(logp, ys)?;
    let total = tape.sum(picked)?;
    let loss = tape.scale(total, -1.0 / ys.len() as f64)?;
    Ok((tape, loss, params))
}

/// Cross-entropy training with `N(0, noise_sigma²)` noise on every input.
pub fn train_supervised(
    f0: &MlpModel,
    data: Labeled<'_>,
    cfg: &SupervisedConfig,
) -> Result<(MlpModel, Vec<f64>)> {
    cfg.validate()?;
    if data.n_classes != f0.n_classes() {
        return Err(Error::Shape {
            expected: vec![f0.n_classes()],
            actual: vec![data.n_classes],
            context: "dataset classes vs model outputs",
        });
    }
    let mut model = f0.clone();
    model.set_mode(Mode::Train);
    let n = data.inputs.rows();
    let d = data.inputs.cols();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_schedule.rate(cfg.lr, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[TAG_PERM, epoch as u64]));
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut xs = gather_rows(data.inputs, idx);
            if cfg.noise_sigma > 0.0 {
                let mut r = rng::stream(cfg.seed, &[TAG_BATCH, epoch as u64, b as u64]);
                for v in xs.data_mut() {
                    *v += cfg.noise_sigma * r.sample::<f64, _>(StandardNormal);
                }
            }
            debug_assert_eq!(xs.cols(), d);
            let ys: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let (mut tape, loss, params) =
                record_cross_entropy(&model, &xs, &ys).map_err(|e| divergence(e, 0, epoch))?;
            let value = tape.value(loss).data()[0];
            check_loss(value, 0, epoch)?;
            let grads = tape.backward(loss)?;
            model.sgd_step(&grads, &params, lr);
            total += value * idx.len() as f64;
        }
        losses.push(total / n as f64);
    }
    model.set_mode(Mode::Eval);
    Ok((model, losses))
}

/// Noise-augmentation baseline: supervised training with `σ = cfg.sigma`
/// noise, `cfg.epochs_per_timestep` epochs.
pub fn train_noise_baseline(
    f0: &MlpModel,
    data: Labeled<'_>,
    cfg: &SmoothingConfig,
) -> Result<(MlpModel, TrainReport)> {
    cfg.validate()?;
    cfg.require(Variant::NoiseBaseline)?;
    let sup = SupervisedConfig {
        epochs: cfg.epochs_per_timestep,
        lr: cfg.lr,
        lr_schedule: cfg.lr_schedule,
        batch_size: cfg.batch_size,
        noise_sigma: cfg.sigma,
        seed: cfg.seed,
    };
    let (mut model, losses) = train_supervised(f0, data, &sup)?;
    model.set_sigma(Some(cfg.sigma));
    let mut report = TrainReport::new(cfg);
    report.epoch_losses = losses;
    Ok((model, report))
}

/// Monte Carlo check of the small-noise expansion
/// `E_η ‖f(x+η) − f(x)‖² = σ² ‖∇f(x)‖²_F + O(σ⁴)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaylorCheck {
    /// Estimate of `E ‖f(x+η) − f(x)‖²`.
    pub mc_mean: f64,
    /// `σ² ‖∇f(x)‖²_F`.
    pub taylor: f64,
    /// `mc_mean − taylor`.
    pub residual: f64,
    pub std_err: f64,
}

/// Estimates [`TaylorCheck`] from `n_samples` noisy evaluations.
///
/// Samples come in antithetic pairs `±η`, and `‖∇f(x) η‖²` (whose mean is
/// exactly the Taylor term) is used as a control variate, so the standard
/// error scales like `σ⁴` rather than `σ²`.
pub fn noise_taylor_residual<R: Rng + ?Sized>(
    model: &MlpModel,
    x: &[f64],
    sigma: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<TaylorCheck> {
    let jac = model.jacobian(x)?;
    let nc = model.n_classes();
    let d = model.d_in();
    let taylor = sigma * sigma * jac.data().iter().map(|v| v * v).sum::<f64>();
    let base = model.logits(x)?;

    let pairs = (n_samples / 2).max(2);
    let chunk = 2048;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut done = 0;
    while done < pairs {
        let m = chunk.min(pairs - done);
        let mut etas = Vec::with_capacity(m * d);
        for _ in 0..m * d {
            etas.push(sigma * rng.sample::<f64, _>(StandardNormal));
        }
        let mut rows = Vec::with_capacity(2 * m * d);
        for eta in etas.chunks(d) {
            rows.extend(x.iter().zip(eta).map(|(a, e)| a + e));
            rows.extend(x.iter().zip(eta).map(|(a, e)| a - e));
        }
        let out = model.forward_batch(&Tensor::from_raw(vec![2 * m, d], rows))?;
        for (p, eta) in etas.chunks(d).enumerate() {
            let lin_sq: f64 = (0..nc)
                .map(|c| crate::tensor::dot(jac.row(c), eta).powi(2))
                .sum();
            let diff_sq = |row: &[f64]| -> f64 {
                row.iter().zip(&base).map(|(a, b)| (a - b).powi(2)).sum()
            };
            let plus = diff_sq(out.row(2 * p)) - lin_sq;
            let minus = diff_sq(out.row(2 * p + 1)) - lin_sq;
            let v = 0.5 * (plus + minus);
            sum += v;
            sum_sq += v * v;
        }
        done += m;
    }
    let n = pairs as f64;
    let residual = sum / n;
    let var = (sum_sq / n - residual * residual).max(0.0) * n / (n - 1.0);
    Ok(TaylorCheck {
        mc_mean: taylor + residual,
        taylor,
        residual,
        std_err: (var / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_1d_outlier;
    use crate::model::Activation;

    fn diag34() -> MlpModel {
        let a = Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, 4.0]).unwrap();
        MlpModel::linear(&a, &[0.0, 0.0]).unwrap()
    }

    #[test]
    fn zero_models_have_zero_loss() {
        let z = MlpModel::zeros(&[2, 4, 3], Activation::Relu).unwrap();
        let batch = Tensor::matrix(3, 2, vec![0.1, 0.2, -0.3, 0.4, 1.0, -1.0]).unwrap();
        let loss = heatsmoothing_minibatch_loss(
            &z,
            &z.frozen(),
            &batch,
            &SmoothingConfig::default(),
            &mut rng::stream(0, &[]),
        )
        .unwrap();
        assert_eq!(loss.value(), 0.0);
    }

    #[test]
    fn identical_student_leaves_only_the_penalty() {
        let m = MlpModel::new_random(&[2, 6, 2], Activation::Relu, 3).unwrap();
        let batch = Tensor::matrix(2, 2, vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let loss = heatsmoothing_minibatch_loss(
            &m,
            &m.frozen(),
            &batch,
            &SmoothingConfig::default(),
            &mut rng::stream(0, &[]),
        )
        .unwrap();
        assert_eq!(loss.distance, 0.0);
        assert!(loss.penalty > 0.0);
        assert_eq!(loss.value(), loss.penalty);
    }

    #[test]
    fn teacher_must_be_frozen() {
        let m = MlpModel::zeros(&[1, 2], Activation::Relu).unwrap();
        let batch = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let r = heatsmoothing_minibatch_loss(
            &m,
            &m,
            &batch,
            &SmoothingConfig::default(),
            &mut rng::stream(0, &[]),
        );
        assert!(matches!(r, Err(Error::Config { .. })));
    }

    #[test]
    fn linear_student_penalty_expectation() {
        // v(x) = diag(3,4) x, zero teacher, x = 0, sigma = 0.1:
        // E[penalty] = (sigma^2 / 2) * ||A||_F^2 = 0.125, distance = 0.
        let student = diag34();
        let teacher = MlpModel::zeros(&[2, 2], Activation::Relu).unwrap().frozen();
        let batch = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let cfg = SmoothingConfig {
            sigma: 0.1,
            ..SmoothingConfig::default()
        };
        let mut r = rng::stream(42, &[]);
        let trials = 1000;
        let mut mean = 0.0;
        for _ in 0..trials {
            let l = heatsmoothing_minibatch_loss(&student, &teacher, &batch, &cfg, &mut r).unwrap();
            assert_eq!(l.distance, 0.0);
            mean += l.penalty / trials as f64;
        }
        // 1000 trials x kappa = 10 draws gives ~1.5% standard error
        assert!((mean - 0.125).abs() < 0.125 * 0.05, "mean penalty {mean}");
    }

    #[test]
    fn constant_teacher_is_approached() {
        // teacher: constant logits; student: random net warm-started at teacher
        // would be trivial, so start from a perturbed copy via one timestep with
        // a nonconstant f_k and check the loss decreases.
        let f0 = MlpModel::new_random(&[1, 16, 2], Activation::Tanh, 9).unwrap();
        let inputs = Tensor::matrix(64, 1, (0..64).map(|i| -1.0 + i as f64 / 32.0).collect()).unwrap();
        let cfg = SmoothingConfig {
            sigma: 0.3,
            n_timesteps: 1,
            epochs_per_timestep: 30,
            lr: 0.05,
            distance: DistanceMode::Raw,
            ..SmoothingConfig::default()
        };
        let (_, report) = train_timestep(&f0, &inputs, &cfg).unwrap();
        let ts = &report.timesteps[0];
        assert!(ts.final_loss < ts.initial_loss, "{ts:?}");
    }

    #[test]
    fn single_timestep_uses_unit_step() {
        let cfg = SmoothingConfig {
            n_timesteps: 1,
            ..SmoothingConfig::default()
        };
        assert_eq!(cfg.step_h(), 1.0);
        assert_eq!(SmoothingConfig::default().step_h(), 0.2);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = gen_1d_outlier(20, -0.5, 1).unwrap();
        let f0 = MlpModel::new_random(&[1, 8, 2], Activation::Relu, 1).unwrap();
        let cfg = SmoothingConfig {
            n_timesteps: 2,
            epochs_per_timestep: 2,
            ..SmoothingConfig::default()
        };
        let (a, ra) = train_heatsmooth(&f0, ds.inputs(), &cfg).unwrap();
        let (b, rb) = train_heatsmooth(&f0, ds.inputs(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.epoch_losses, rb.epoch_losses);
        assert_eq!(ra.timesteps.len(), 2);
    }

    #[test]
    fn noisy_variant_without_noise_matches_single_pass_objective() {
        let ds = gen_1d_outlier(16, -0.5, 2).unwrap();
        let f0 = MlpModel::new_random(&[1, 8, 2], Activation::Relu, 2).unwrap();
        let cfg = SmoothingConfig {
            variant: Variant::ImagenetEq9,
            noise_fraction: 0.0,
            n_timesteps: 1,
            epochs_per_timestep: 1,
            batch_size: 16,
            ..SmoothingConfig::default()
        };
        let (_, report) = train_imagenet_variant(&f0, ds.inputs(), &cfg).unwrap();
        // student starts at the teacher: initial loss is the penalty of the
        // single-pass objective on the whole (single) batch, same noise draws
        // as the public minibatch loss would use with the eval stream
        let mut r = rng::stream(cfg.seed, &[TAG_EVAL, 0, 0]);
        let xs = ds.inputs().clone();
        let direct = heatsmoothing_minibatch_loss(&f0, &f0.frozen(), &xs, &cfg, &mut r).unwrap();
        assert!((report.timesteps[0].initial_loss - direct.value()).abs() < 1e-12);
    }

    #[test]
    fn noise_baseline_requires_and_uses_labels() {
        let ds = gen_1d_outlier(40, -0.5, 3).unwrap();
        let f0 = MlpModel::new_random(&[1, 16, 2], Activation::Relu, 3).unwrap();
        let cfg = SmoothingConfig {
            variant: Variant::NoiseBaseline,
            sigma: 0.0,
            epochs_per_timestep: 40,
            lr: 0.1,
            ..SmoothingConfig::default()
        };
        let unlabeled = ds.without_labels();
        assert!(unlabeled.labeled("noise baseline").is_err());
        let (_, report) = train_noise_baseline(&f0, ds.labeled("test").unwrap(), &cfg).unwrap();
        let l = &report.epoch_losses;
        assert!(l.last().unwrap() < l.first().unwrap());
    }

    #[test]
    fn invalid_sigma_rejected() {
        let cfg = SmoothingConfig {
            sigma: -0.1,
            ..SmoothingConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "smoothing.sigma"),
            other => panic!("{other:?}"),
        }
    }
}
