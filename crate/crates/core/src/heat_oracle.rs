//! Ground truth for Gaussian smoothing on 1D and 2D grids.
//!
//! Three independent ways to smooth an initial function `f0` with variance
//! `σ²`:
//! 1. Monte Carlo averages `E f0(x + η)`, `η ~ N(0, σ²I)`;
//! 2. discrete convolution with a sampled Gaussian kernel;
//! 3. explicit finite differences for `∂_t u = (σ²/2) Δu` up to `t = 1`.
//!
//! Grids carry a pad: the outer band of width `pad` on each side is only
//! there to keep boundary effects away from the interior, where all
//! comparisons are made.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attacks::AttackTarget;
use crate::error::{Error, Result};
use crate::model::argmax;
use crate::tensor::Tensor;
use crate::ProbabilityModel;

/// Required pad in units of σ.
pub const PAD_SIGMAS: f64 = 6.0;

/// Samples of a function on a uniform 1D or 2D grid, row-major with the last
/// axis fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    bounds: Vec<(f64, f64)>,
    resolution: Vec<usize>,
    pad: f64,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(bounds: Vec<(f64, f64)>, resolution: Vec<usize>, pad: f64, values: Vec<f64>) -> Result<Self> {
        if bounds.is_empty() || bounds.len() > 2 || bounds.len() != resolution.len() {
            return Err(Error::config("grid", "need 1 or 2 axes with matching resolution"));
        }
        for (&(lo, hi), &n) in bounds.iter().zip(&resolution) {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::config("grid.bounds", format!("invalid axis [{lo}, {hi}]")));
            }
            if n < 3 {
                return Err(Error::config("grid.resolution", "need at least 3 points per axis"));
            }
            if !(pad >= 0.0) || 2.0 * pad >= hi - lo {
                return Err(Error::config("grid.pad", "pad must leave a nonempty interior"));
            }
        }
        let total: usize = resolution.iter().product();
        if values.len() != total {
            return Err(Error::Shape {
                expected: resolution.clone(),
                actual: vec![values.len()],
                context: "grid values",
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid values"));
        }
        Ok(GridFunction {
            bounds,
            resolution,
            pad,
            values,
        })
    }

    /// Samples `f` on `[lo − pad, hi + pad]` with `n` points.
    pub fn sample_1d(lo: f64, hi: f64, pad: f64, n: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let (a, b) = (lo - pad, hi + pad);
        let step = (b - a) / (n.max(2) - 1) as f64;
        let values = (0..n).map(|i| f(a + i as f64 * step)).collect();
        Self::new(vec![(a, b)], vec![n], pad, values)
    }

    /// Samples `f` on the padded square `[lo, hi]²` with `n × n` points.
    pub fn sample_2d(lo: f64, hi: f64, pad: f64, n: usize, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let (a, b) = (lo - pad, hi + pad);
        let step = (b - a) / (n.max(2) - 1) as f64;
        let mut values = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                values.push(f(a + i as f64 * step, a + j as f64 * step));
            }
        }
        Self::new(vec![(a, b); 2], vec![n, n], pad, values)
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    pub fn pad(&self) -> f64 {
        self.pad
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        let (lo, hi) = self.bounds[axis];
        (hi - lo) / (self.resolution[axis] - 1) as f64
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        self.bounds[axis].0 + i as f64 * self.spacing(axis)
    }

    /// Coordinates of flat index `idx`.
    pub fn point(&self, idx: usize) -> Vec<f64> {
        match self.dim() {
            1 => vec![self.coord(0, idx)],
            _ => {
                let n1 = self.resolution[1];
                vec![self.coord(0, idx / n1), self.coord(1, idx % n1)]
            }
        }
    }

    /// Whether a point lies inside the unpadded region.
    pub fn is_interior(&self, p: &[f64]) -> bool {
        p.iter().zip(&self.bounds).all(|(&x, &(lo, hi))| {
            x >= lo + self.pad - 1e-12 && x <= hi - self.pad + 1e-12
        })
    }

    fn with_values(&self, values: Vec<f64>) -> GridFunction {
        GridFunction {
            values,
            ..self.clone()
        }
    }

    /// Cell index and fractional position along `axis`, clamped to the grid.
    fn locate(&self, axis: usize, x: f64) -> (usize, f64) {
        let (lo, hi) = self.bounds[axis];
        let n = self.resolution[axis];
        let t = ((x.clamp(lo, hi) - lo) / self.spacing(axis)).min((n - 1) as f64);
        let i = (t.floor() as usize).min(n - 2);
        (i, t - i as f64)
    }

    /// Piecewise (bi)linear interpolation; constant extension outside the grid.
    pub fn interpolate(&self, p: &[f64]) -> f64 {
        match self.dim() {
            1 => {
                let (i, s) = self.locate(0, p[0]);
                self.values[i] * (1.0 - s) + self.values[i + 1] * s
            }
            _ => {
                let (i, s) = self.locate(0, p[0]);
                let (j, t) = self.locate(1, p[1]);
                let n1 = self.resolution[1];
                let v = |a: usize, b: usize| self.values[a * n1 + b];
                (1.0 - s) * ((1.0 - t) * v(i, j) + t * v(i, j + 1))
                    + s * ((1.0 - t) * v(i + 1, j) + t * v(i + 1, j + 1))
            }
        }
    }

    /// Derivative of the 1D interpolant (slope of the containing cell).
    pub fn slope_1d(&self, x: f64) -> f64 {
        let (lo, hi) = self.bounds[0];
        if x < lo || x > hi {
            return 0.0;
        }
        let (i, _) = self.locate(0, x);
        (self.values[i + 1] - self.values[i]) / self.spacing(0)
    }

    fn check_pad(&self, sigma: f64) -> Result<()> {
        let required = PAD_SIGMAS * sigma;
        if self.pad < required - 1e-12 {
            return Err(Error::InsufficientPadding {
                required,
                actual: self.pad,
            });
        }
        Ok(())
    }
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
}

/// `E f(x + η)` for `η ~ N(0, σ²I)` from `n_samples` draws.
pub fn gaussian_convolve_mc<F, R>(f: F, x: &[f64], sigma: f64, n_samples: usize, rng: &mut R) -> Result<McEstimate>
where
    F: Fn(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    if n_samples == 0 {
        return Err(Error::config("n_samples", "must be at least 1"));
    }
    if !(sigma > 0.0) {
        return Err(Error::config("sigma", "must be positive"));
    }
    let mut p = vec![0.0; x.len()];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_samples {
        for (pi, &xi) in p.iter_mut().zip(x) {
            *pi = xi + sigma * rng.sample::<f64, _>(StandardNormal);
        }
        let v = f(&p);
        sum += v;
        sum_sq += v * v;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = if n_samples > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(McEstimate {
        mean,
        std_err: (var / n).sqrt(),
    })
}

/// Discrete Gaussian kernel on offsets `−m..=m` (spacing `dx`) with
/// trapezoidal end weights, normalized to unit sum.
fn gaussian_kernel(sigma: f64, dx: f64) -> Vec<f64> {
    let m = (PAD_SIGMAS * sigma / dx).ceil() as isize;
    let mut k: Vec<f64> = (-m..=m)
        .map(|j| {
            let x = j as f64 * dx;
            let w = if j.abs() == m { 0.5 } else { 1.0 };
            w * (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Convolves a strided line in place, extending it by its end values.
fn convolve_line(values: &mut [f64], start: usize, stride: usize, len: usize, kernel: &[f64], buf: &mut Vec<f64>) {
    let m = (kernel.len() / 2) as isize;
    buf.clear();
    buf.extend((0..len).map(|i| values[start + i * stride]));
    for i in 0..len as isize {
        let mut acc = 0.0;
        for (j, &w) in kernel.iter().enumerate() {
            let idx = (i + j as isize - m).clamp(0, len as isize - 1) as usize;
            acc += w * buf[idx];
        }
        values[start + i as usize * stride] = acc;
    }
}

/// Convolution of `f` with the `N(0, σ²I)` density, separably along each axis.
/// Values in the pad are only approximate; the pad must be at least `6σ`.
pub fn gaussian_convolve_quadrature(f: &GridFunction, sigma: f64) -> Result<GridFunction> {
    if !(sigma > 0.0) {
        return Err(Error::config("sigma", "must be positive"));
    }
    f.check_pad(sigma)?;
    let mut values = f.values.clone();
    let mut buf = Vec::new();
    match f.dim() {
        1 => {
            let k = gaussian_kernel(sigma, f.spacing(0));
            convolve_line(&mut values, 0, 1, f.resolution[0], &k, &mut buf);
        }
        _ => {
            let (n0, n1) = (f.resolution[0], f.resolution[1]);
            let k1 = gaussian_kernel(sigma, f.spacing(1));
            for i in 0..n0 {
                convolve_line(&mut values, i * n1, 1, n1, &k1, &mut buf);
            }
            let k0 = gaussian_kernel(sigma, f.spacing(0));
            for j in 0..n1 {
                convolve_line(&mut values, j, n1, n0, &k0, &mut buf);
            }
        }
    }
    Ok(f.with_values(values))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Edge values held fixed at their initial values.
    Dirichlet,
    /// First and last grid points identified; period is the grid width.
    Periodic,
}

/// Smallest step count keeping `Σ_axes (σ²/2)·dt/dx² ≤ ½` at time `t_final`.
pub fn min_stable_steps(f0: &GridFunction, sigma: f64, t_final: f64) -> usize {
    let inv: f64 = (0..f0.dim()).map(|a| 1.0 / f0.spacing(a).powi(2)).sum();
    (sigma * sigma * t_final * inv).ceil().max(1.0) as usize
}

/// Explicit Euler / central-difference solution of `∂_t u = (σ²/2) Δu` at
/// `t_final` from `u(·, 0) = f0`, with Dirichlet edges.
pub fn heat_solve_fd(f0: &GridFunction, sigma: f64, t_final: f64, n_steps: usize) -> Result<GridFunction> {
    heat_solve_fd_with(f0, sigma, t_final, n_steps, Boundary::Dirichlet)
}

pub fn heat_solve_fd_with(
    f0: &GridFunction,
    sigma: f64,
    t_final: f64,
    n_steps: usize,
    boundary: Boundary,
) -> Result<GridFunction> {
    if !(sigma > 0.0) || !(t_final > 0.0) {
        return Err(Error::config("sigma", "sigma and t_final must be positive"));
    }
    if boundary == Boundary::Dirichlet {
        f0.check_pad(sigma * t_final.sqrt())?;
    }
    let min_steps = min_stable_steps(f0, sigma, t_final);
    if n_steps < min_steps {
        return Err(Error::Unstable { n_steps, min_steps });
    }
    let dt = t_final / n_steps as f64;
    let r: Vec<f64> = (0..f0.dim())
        .map(|a| 0.5 * sigma * sigma * dt / f0.spacing(a).powi(2))
        .collect();
    let mut u = f0.values.clone();
    let mut next = u.clone();
    match f0.dim() {
        1 => {
            let n = f0.resolution[0];
            for _ in 0..n_steps {
                step_line(&u, &mut next, 0, 1, n, r[0], boundary, false);
                std::mem::swap(&mut u, &mut next);
            }
        }
        _ => {
            let (n0, n1) = (f0.resolution[0], f0.resolution[1]);
            for _ in 0..n_steps {
                next.copy_from_slice(&u);
                for i in 0..n0 {
                    step_line(&u, &mut next, i * n1, 1, n1, r[1], boundary, false);
                }
                for j in 0..n1 {
                    step_line(&u, &mut next, j, n1, n0, r[0], boundary, true);
                }
                if boundary == Boundary::Dirichlet {
                    for (idx, v) in next.iter_mut().enumerate() {
                        let (i, j) = (idx / n1, idx % n1);
                        if i == 0 || j == 0 || i == n0 - 1 || j == n1 - 1 {
                            *v = f0.values[idx];
                        }
                    }
                }
                std::mem::swap(&mut u, &mut next);
            }
        }
    }
    Ok(f0.with_values(u))
}

/// Adds `r·(u[i−1] − 2u[i] + u[i+1])` along one line of `u` into `out`.
/// With `accumulate` the increment is added to `out`, otherwise `out` is
/// overwritten with `u + increment`.
#[allow(clippy::too_many_arguments)]
fn step_line(u: &[f64], out: &mut [f64], start: usize, stride: usize, len: usize, r: f64, boundary: Boundary, accumulate: bool) {
    let at = |i: usize| start + i * stride;
    let period = len - 1;
    for i in 0..len {
        let (left, right) = match boundary {
            Boundary::Dirichlet => {
                if i == 0 || i == len - 1 {
                    if !accumulate {
                        out[at(i)] = u[at(i)];
                    }
                    continue;
                }
                (i - 1, i + 1)
            }
            Boundary::Periodic => {
                let c = i % period;
                ((c + period - 1) % period, (c + 1) % period)
            }
        };
        let inc = r * (u[at(left)] - 2.0 * u[at(i)] + u[at(right)]);
        if accumulate {
            out[at(i)] += inc;
        } else {
            out[at(i)] = u[at(i)] + inc;
        }
    }
}

/// Sup-norm and mean absolute difference over interior grid points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub sup: f64,
    pub mean_abs: f64,
}

/// Interior discrepancy between two grids of the same shape.
pub fn interior_gap(a: &GridFunction, b: &GridFunction) -> Result<Gap> {
    if a.resolution != b.resolution || a.bounds != b.bounds {
        return Err(Error::Shape {
            expected: a.resolution.clone(),
            actual: b.resolution.clone(),
            context: "grid comparison",
        });
    }
    interior_gap_with(a, |p, i| {
        let _ = p;
        b.values[i]
    })
}

/// Interior discrepancy between a grid and values produced per point.
pub fn interior_gap_with(a: &GridFunction, other: impl Fn(&[f64], usize) -> f64) -> Result<Gap> {
    let (mut sup, mut total, mut count) = (0.0_f64, 0.0, 0usize);
    for (i, &v) in a.values.iter().enumerate() {
        let p = a.point(i);
        if a.is_interior(&p) {
            let d = (v - other(&p, i)).abs();
            sup = sup.max(d);
            total += d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("grid interior"));
    }
    Ok(Gap {
        sup,
        mean_abs: total / count as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquivalenceConfig {
    /// Target diffusion number `Σ (σ²/2) dt/dx²` used to choose the step count.
    pub diffusion_number: f64,
    pub mc_samples: usize,
    pub mc_points: usize,
    /// Sup-norm tolerance between deterministic methods.
    pub tolerance: f64,
    /// MC agreement threshold in standard errors.
    pub mc_z: f64,
    pub seed: u64,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        EquivalenceConfig {
            diffusion_number: 0.4,
            mc_samples: 100_000,
            mc_points: 10,
            tolerance: 1e-3,
            mc_z: 3.0,
            seed: 0,
        }
    }
}

impl EquivalenceConfig {
    pub fn steps_for(&self, f0: &GridFunction, sigma: f64) -> usize {
        let inv: f64 = (0..f0.dim()).map(|a| 1.0 / f0.spacing(a).powi(2)).sum();
        (0.5 * sigma * sigma * inv / self.diffusion_number).ceil().max(1.0) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub pair: String,
    pub gap: Gap,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub x: Vec<f64>,
    pub estimate: McEstimate,
    pub reference: f64,
    /// `|estimate − reference| / std_err`.
    pub z: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub name: String,
    pub sigma: f64,
    pub resolution: Vec<usize>,
    pub n_steps: usize,
    pub gaps: Vec<GapRow>,
    pub mc: Vec<McRow>,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.gaps.iter().all(|g| g.pass) && self.mc.iter().all(|m| m.pass)
    }
}

impl fmt::Display for EquivalenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "== {} (sigma={}, grid={:?}, fd steps={}) ==",
            self.name, self.sigma, self.resolution, self.n_steps
        )?;
        writeln!(f, "{:<28} {:>12} {:>12}  result", "pair", "sup", "mean_abs")?;
        for g in &self.gaps {
            writeln!(
                f,
                "{:<28} {:>12.3e} {:>12.3e}  {}",
                g.pair,
                g.gap.sup,
                g.gap.mean_abs,
                if g.pass { "PASS" } else { "FAIL" }
            )?;
        }
        for m in &self.mc {
            writeln!(
                f,
                "mc at {:<22} {:>12.6} ±{:.2e} ref {:.6} z={:.2}  {}",
                format!("{:.3?}", m.x),
                m.estimate.mean,
                m.estimate.std_err,
                m.reference,
                m.z,
                if m.pass { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Compares the three smoothing routes on `f0`'s interior: finite
/// differences vs quadrature (and each vs `exact`, when given), and Monte
/// Carlo averages of `f` at evenly spread interior points vs quadrature.
pub fn equivalence_report<F, E>(
    name: &str,
    f: F,
    f0: &GridFunction,
    sigma: f64,
    exact: Option<E>,
    cfg: &EquivalenceConfig,
) -> Result<EquivalenceReport>
where
    F: Fn(&[f64]) -> f64,
    E: Fn(&[f64]) -> f64,
{
    let n_steps = cfg.steps_for(f0, sigma);
    let fd = heat_solve_fd(f0, sigma, 1.0, n_steps)?;
    let quad = gaussian_convolve_quadrature(f0, sigma)?;
    let row = |pair: &str, gap: Gap| GapRow {
        pair: pair.to_string(),
        gap,
        pass: gap.sup <= cfg.tolerance,
    };
    let mut gaps = vec![row("fd vs quadrature", interior_gap(&fd, &quad)?)];
    if let Some(exact) = &exact {
        gaps.push(row("fd vs exact", interior_gap_with(&fd, |p, _| exact(p))?));
        gaps.push(row("quadrature vs exact", interior_gap_with(&quad, |p, _| exact(p))?));
    }

    let mut rng = crate::rng::stream(cfg.seed, &[0x4ea7]);
    let mut mc = Vec::with_capacity(cfg.mc_points);
    for k in 0..cfg.mc_points {
        let frac = (k as f64 + 0.5) / cfg.mc_points as f64;
        let x: Vec<f64> = f0
            .bounds
            .iter()
            .map(|&(lo, hi)| {
                let (a, b) = (lo + f0.pad, hi - f0.pad);
                a + frac * (b - a)
            })
            .collect();
        let estimate = gaussian_convolve_mc(&f, &x, sigma, cfg.mc_samples, &mut rng)?;
        let reference = quad.interpolate(&x);
        let z = if estimate.std_err > 0.0 {
            (estimate.mean - reference).abs() / estimate.std_err
        } else if (estimate.mean - reference).abs() <= 1e-12 {
            0.0
        } else {
            f64::INFINITY
        };
        mc.push(McRow {
            x,
            estimate,
            reference,
            z,
            pass: z <= cfg.mc_z,
        });
    }
    Ok(EquivalenceReport {
        name: name.to_string(),
        sigma,
        resolution: f0.resolution.clone(),
        n_steps,
        gaps,
        mc,
    })
}

/// Errors of the periodic finite-difference solution against an exact
/// solution on successively doubled grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub resolutions: Vec<usize>,
    pub errors: Vec<f64>,
    /// `errors[i] / errors[i + 1]`; about 4 for a second-order scheme.
    pub ratios: Vec<f64>,
}

impl ConvergenceReport {
    /// All ratios lie in `[lo, hi]`.
    pub fn within(&self, lo: f64, hi: f64) -> bool {
        self.ratios.iter().all(|r| (lo..=hi).contains(r))
    }
}

/// Runs the periodic solver on `[lo, hi]` (one period of `f0`) at each
/// resolution of `cells` (cell counts, each a multiple of the first),
/// measuring the sup-norm error against `exact`.
///
/// The step count on the coarsest grid is the smallest one with diffusion
/// number at most `diffusion_number`; finer grids scale it by the squared
/// refinement factor so the diffusion number is identical on every grid.
pub fn convergence_study(
    f0: impl Fn(f64) -> f64,
    exact: impl Fn(f64) -> f64,
    (lo, hi): (f64, f64),
    sigma: f64,
    cells: &[usize],
    diffusion_number: f64,
) -> Result<ConvergenceReport> {
    let Some(&base) = cells.first() else {
        return Err(Error::Empty("convergence resolutions"));
    };
    if cells.iter().any(|&c| c == 0 || c % base != 0) {
        return Err(Error::config("cells", "every resolution must be a multiple of the first"));
    }
    let dx0 = (hi - lo) / base as f64;
    let base_steps = (0.5 * sigma * sigma / (dx0 * dx0 * diffusion_number)).ceil().max(1.0) as usize;
    let mut errors = Vec::with_capacity(cells.len());
    for &c in cells {
        let g = GridFunction::sample_1d(lo, hi, 0.0, c + 1, &f0)?;
        let n_steps = base_steps * (c / base).pow(2);
        let u = heat_solve_fd_with(&g, sigma, 1.0, n_steps, Boundary::Periodic)?;
        let err = (0..=c)
            .map(|i| (u.values[i] - exact(g.coord(0, i))).abs())
            .fold(0.0, f64::max);
        errors.push(err);
    }
    let ratios = errors.windows(2).map(|w| w[0] / w[1]).collect();
    Ok(ConvergenceReport {
        resolutions: cells.to_vec(),
        errors,
        ratios,
    })
}

/// A 1D classifier whose class probabilities are Gaussian convolutions of a
/// base model's probabilities, tabulated on a grid and linearly interpolated.
///
/// Each class curve is `√(2/π)/σ`-Lipschitz, as is its interpolant, so the
/// model satisfies the hypotheses of the L-bound exactly.
#[derive(Clone, Debug)]
pub struct GridSmoothedClassifier {
    classes: Vec<GridFunction>,
    sigma: f64,
}

impl GridSmoothedClassifier {
    /// Tabulates `base` on `[lo, hi]` padded by `6σ` with `n` points and
    /// convolves each class probability with `N(0, σ²)`.
    pub fn from_model<M: ProbabilityModel + ?Sized>(base: &M, lo: f64, hi: f64, n: usize, sigma: f64) -> Result<Self> {
        if base.input_dim() != 1 {
            return Err(Error::Shape {
                expected: vec![1],
                actual: vec![base.input_dim()],
                context: "grid-smoothed classifier input",
            });
        }
        let pad = PAD_SIGMAS * sigma;
        let probe = GridFunction::sample_1d(lo, hi, pad, n, |_| 0.0)?;
        let probs = (0..n)
            .map(|i| base.probabilities(&[probe.coord(0, i)]))
            .collect::<Result<Vec<_>>>()?;
        let classes = (0..base.n_classes())
            .map(|c| {
                let g = probe.with_values(probs.iter().map(|p| p[c]).collect());
                gaussian_convolve_quadrature(&g, sigma)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GridSmoothedClassifier { classes, sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Smoothed probability curve of class `c`.
    pub fn class_grid(&self, c: usize) -> &GridFunction {
        &self.classes[c]
    }
}

impl ProbabilityModel for GridSmoothedClassifier {
    fn n_classes(&self) -> usize {
        self.classes.len()
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != 1 || !x[0].is_finite() {
            return Err(Error::Shape {
                expected: vec![1],
                actual: vec![x.len()],
                context: "grid-smoothed classifier input",
            });
        }
        Ok(self.classes.iter().map(|g| g.interpolate(x)).collect())
    }
}

/// Scores are log-probabilities, so the attack loss sees the smoothed
/// probabilities themselves.
impl AttackTarget for GridSmoothedClassifier {
    fn n_classes(&self) -> usize {
        self.classes.len()
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn scores_batch(&self, xs: &Tensor) -> Result<Tensor> {
        let nc = self.classes.len();
        let mut out = Vec::with_capacity(xs.rows() * nc);
        for i in 0..xs.rows() {
            let p = self.probabilities(xs.row(i))?;
            out.extend(p.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()));
        }
        Ok(Tensor::from_raw(vec![xs.rows(), nc], out))
    }

    fn scores_grad_batch(&self, xs: &Tensor, ws: &Tensor) -> Result<Tensor> {
        let mut out = Vec::with_capacity(xs.rows());
        for i in 0..xs.rows() {
            let x = xs.row(i)[0];
            let g: f64 = self
                .classes
                .iter()
                .zip(ws.row(i))
                .map(|(c, w)| w * c.slope_1d(x) / c.interpolate(&[x]).max(f64::MIN_POSITIVE))
                .sum();
            out.push(g);
        }
        Ok(Tensor::from_raw(vec![xs.rows(), 1], out))
    }
}

impl GridSmoothedClassifier {
    pub fn predict(&self, x: f64) -> usize {
        argmax(&self.classes.iter().map(|g| g.interpolate(&[x])).collect::<Vec<_>>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use std::f64::consts::PI;

    const SIGMA: f64 = 0.2;

    fn cos3(x: f64) -> f64 {
        (3.0 * x).cos()
    }

    #[test]
    fn mc_examples() {
        let mut r = rng::stream(0, &[]);
        let sq = gaussian_convolve_mc(|p| p[0] * p[0], &[0.7], 0.3, 100_000, &mut r).unwrap();
        assert!((sq.mean - (0.49 + 0.09)).abs() < 3.0 * sq.std_err);
        let c = gaussian_convolve_mc(|_| 2.5, &[0.1, 0.2], 0.3, 1000, &mut r).unwrap();
        assert_eq!((c.mean, c.std_err), (2.5, 0.0));
        let cs = gaussian_convolve_mc(|p| cos3(p[0]), &[0.0], SIGMA, 100_000, &mut r).unwrap();
        assert!((cs.mean - (-0.18f64).exp()).abs() < 3.0 * cs.std_err);
        assert!(((-0.18f64).exp() - 0.83527).abs() < 1e-5);
    }

    #[test]
    fn quadrature_of_a_quadratic() {
        let g = GridFunction::sample_1d(-1.0, 1.0, 6.0 * SIGMA, 801, |x| x * x).unwrap();
        let c = gaussian_convolve_quadrature(&g, SIGMA).unwrap();
        let gap = interior_gap_with(&c, |p, _| p[0] * p[0] + SIGMA * SIGMA).unwrap();
        assert!(gap.sup < 1e-4, "{gap:?}");
    }

    #[test]
    fn spike_becomes_the_kernel() {
        let n = 401;
        let g = GridFunction::sample_1d(-1.0, 1.0, 1.2, n, |_| 0.0).unwrap();
        let mid = n / 2;
        let mut v = vec![0.0; n];
        v[mid] = 1.0;
        let spike = g.with_values(v);
        let c = gaussian_convolve_quadrature(&spike, SIGMA).unwrap();
        let dx = g.spacing(0);
        let peak = c.values()[mid];
        for off in [1usize, 5, 20] {
            let x = off as f64 * dx;
            let expect = peak * (-x * x / (2.0 * SIGMA * SIGMA)).exp();
            assert!((c.values()[mid + off] - expect).abs() < 1e-12);
            assert_eq!(c.values()[mid + off], c.values()[mid - off]);
        }
        assert!((c.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quadrature_needs_a_pad() {
        let g = GridFunction::sample_1d(-1.0, 1.0, 0.5, 101, cos3).unwrap();
        match gaussian_convolve_quadrature(&g, SIGMA) {
            Err(Error::InsufficientPadding { required, .. }) => assert!((required - 1.2).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semigroup() {
        let g = GridFunction::sample_1d(-1.0, 1.0, 1.8, 1201, |x| (x * 4.0).sin() + (x > 0.2) as u8 as f64).unwrap();
        let twice = gaussian_convolve_quadrature(&gaussian_convolve_quadrature(&g, 0.1).unwrap(), 0.2).unwrap();
        let once = gaussian_convolve_quadrature(&g, (0.05f64).sqrt()).unwrap();
        assert!(interior_gap(&twice, &once).unwrap().sup < 1e-3);
    }

    #[test]
    fn fd_constant_is_unchanged() {
        let g = GridFunction::sample_1d(-1.0, 1.0, 1.2, 101, |_| 3.0).unwrap();
        let u = heat_solve_fd(&g, SIGMA, 1.0, 100).unwrap();
        assert!(u.values().iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn fd_matches_the_heat_kernel_solution() {
        let g = GridFunction::sample_1d(-PI, PI, 6.0 * SIGMA, 1025, cos3).unwrap();
        let cfg = EquivalenceConfig::default();
        let u = heat_solve_fd(&g, SIGMA, 1.0, cfg.steps_for(&g, SIGMA)).unwrap();
        let decay = (-0.18f64).exp();
        let gap = interior_gap_with(&u, |p, _| decay * cos3(p[0])).unwrap();
        assert!(gap.sup < 1e-3, "{gap:?}");
    }

    #[test]
    fn fd_rejects_unstable_steps() {
        let g = GridFunction::sample_1d(-1.0, 1.0, 1.2, 201, cos3).unwrap();
        let min = min_stable_steps(&g, SIGMA, 1.0);
        match heat_solve_fd(&g, SIGMA, 1.0, min - 1) {
            Err(Error::Unstable { min_steps, .. }) => assert_eq!(min_steps, min),
            other => panic!("{other:?}"),
        }
        assert!(heat_solve_fd(&g, SIGMA, 1.0, min).is_ok());
    }

    #[test]
    fn maximum_principle() {
        let g = GridFunction::sample_1d(-1.0, 1.0, 1.2, 201, |x| if x.abs() < 0.3 { 1.0 } else { -0.5 }).unwrap();
        let u = heat_solve_fd(&g, SIGMA, 1.0, min_stable_steps(&g, SIGMA, 1.0)).unwrap();
        assert!(u.values().iter().all(|&v| (-0.5 - 1e-12..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn periodic_mean_is_conserved() {
        let g = GridFunction::sample_1d(-PI, PI, 0.0, 129, |x| (x.sin() + 0.3 * (2.0 * x).cos()).exp()).unwrap();
        let u = heat_solve_fd_with(&g, 0.5, 1.0, 400, Boundary::Periodic).unwrap();
        let mean = |v: &[f64]| v[..v.len() - 1].iter().sum::<f64>() / (v.len() - 1) as f64;
        assert!((mean(u.values()) - mean(g.values())).abs() < 1e-10);
    }

    #[test]
    fn second_order_convergence() {
        let decay = (-0.5 * SIGMA * SIGMA * 9.0f64).exp();
        let rep = convergence_study(cos3, |x| decay * cos3(x), (-PI, PI), SIGMA, &[64, 128, 256], 0.4).unwrap();
        assert!(rep.within(3.0, 5.0), "{rep:?}");
    }

    #[test]
    fn two_dimensional_agreement() {
        let f = |x: f64, y: f64| (2.0 * x).cos() * (1.5 * y).sin();
        let g = GridFunction::sample_2d(-1.0, 1.0, 1.2, 121, f).unwrap();
        let decay = (-0.5 * SIGMA * SIGMA * (4.0 + 2.25f64)).exp();
        let q = gaussian_convolve_quadrature(&g, SIGMA).unwrap();
        let exact = |p: &[f64]| decay * f(p[0], p[1]);
        assert!(interior_gap_with(&q, |p, _| exact(p)).unwrap().sup < 1e-3);
        let u = heat_solve_fd(&g, SIGMA, 1.0, EquivalenceConfig::default().steps_for(&g, SIGMA)).unwrap();
        assert!(interior_gap_with(&u, |p, _| exact(p)).unwrap().sup < 1e-3);
    }

    #[test]
    fn constant_equivalence_is_exact() {
        let g = GridFunction::sample_1d(-1.0, 1.0, 1.2, 101, |_| 0.7).unwrap();
        let cfg = EquivalenceConfig {
            mc_samples: 100,
            ..EquivalenceConfig::default()
        };
        let rep = equivalence_report("constant", |_: &[f64]| 0.7, &g, SIGMA, Some(|_: &[f64]| 0.7), &cfg).unwrap();
        assert!(rep.gaps.iter().all(|r| r.gap.sup <= 1e-12), "{rep}");
        assert!(rep.passed());
    }

    #[test]
    fn smoothed_classifier_is_lipschitz() {
        let step = crate::MlpModel::linear(&Tensor::matrix(2, 1, vec![-50.0, 50.0]).unwrap(), &[0.0, 0.0]).unwrap();
        let m = GridSmoothedClassifier::from_model(&step, -1.0, 1.0, 2001, SIGMA).unwrap();
        let bound = (2.0 / PI).sqrt() / SIGMA;
        let g = m.class_grid(1);
        let max_slope = (0..g.values().len() - 1)
            .map(|i| ((g.values()[i + 1] - g.values()[i]) / g.spacing(0)).abs())
            .fold(0.0, f64::max);
        assert!(max_slope <= bound * 1.001, "{max_slope} vs {bound}");
        let p = m.probabilities(&[0.3]).unwrap();
        assert!((p[0] + p[1] - 1.0).abs() < 1e-9);
        assert_eq!(m.predict(0.3), 1);
    }
}
