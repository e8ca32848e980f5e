//! Command implementations. Each returns a short human-readable summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use heatsmooth::attacks::{self, AttackSummary, DistanceSummary};
use heatsmooth::certify::{self, CertifyConfig, CertifyMode, Prediction};
use heatsmooth::data::{self, Dataset};
use heatsmooth::heat_oracle::{
    self, ConvergenceReport, EquivalenceReport, GridFunction, PAD_SIGMAS,
};
use heatsmooth::model::{argmax, MlpModel};
use heatsmooth::smoothing::{self, TrainReport, Variant};
use heatsmooth::{rng, ProbabilityModel, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::parallel::map_indexed;
use crate::run::{sha256_file, Manifest, RunDir};
use crate::Common;

const TAG_CERTIFY: u64 = 0xce27;
const TAG_ATTACK: u64 = 0xa77c;
const TAG_BENCH: u64 = 0xbe4c;

/// Resolved config, run directory and worker count for one command.
pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub workers: usize,
    pub command: &'static str,
}

impl Ctx {
    pub fn new(common: &Common, command: &'static str) -> Result<Self> {
        let cfg = ExperimentConfig::load(common.config.as_deref(), &common.overrides)?;
        let out = common
            .out
            .clone()
            .unwrap_or_else(|| cfg.output_dir.join(command));
        Ok(Ctx {
            cfg,
            out,
            workers: common.workers.max(1),
            command,
        })
    }

    fn run_dir(&self) -> Result<RunDir> {
        RunDir::create(&self.out, self.command, &self.cfg)
    }
}

fn load_model(run: &mut RunDir, path: &Path) -> Result<MlpModel> {
    let model = MlpModel::load(path).with_context(|| format!("loading model {}", path.display()))?;
    run.input(path)?;
    Ok(model)
}

fn check_compatible(model: &MlpModel, ds: &Dataset) -> Result<()> {
    if model.d_in() != ds.dim() || model.n_classes() != ds.n_classes() {
        bail!(heatsmooth::Error::config(
            "data",
            format!(
                "model maps {} -> {} but the dataset has {} features and {} classes",
                model.d_in(),
                model.n_classes(),
                ds.dim(),
                ds.n_classes()
            ),
        ));
    }
    Ok(())
}

fn accuracy(model: &MlpModel, ds: &Dataset) -> Result<Option<f64>> {
    let Some(labels) = ds.labels() else {
        return Ok(None);
    };
    let preds = model.predict_batch(ds.inputs())?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(Some(hits as f64 / labels.len() as f64))
}

/// Report of a supervised training run.
#[derive(Debug, Serialize, Deserialize)]
pub struct SupervisedReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub noise_sigma: f64,
}

pub fn cmd_train(ctx: &Ctx) -> Result<String> {
    let cfg = &ctx.cfg;
    let mut run = ctx.run_dir()?;
    let (train, test) = cfg.datasets()?;
    data::save_csv(&train, &run.path("train.csv"))?;
    run.artifact("train.csv")?;
    data::save_csv(&test, &run.path("test.csv"))?;
    run.artifact("test.csv")?;

    let dims = cfg.layer_dims(train.dim(), train.n_classes());
    let f0 = MlpModel::new_random(&dims, cfg.model.activation, cfg.seed)?;
    let (mut model, losses) = smoothing::train_supervised(&f0, train.labeled("train")?, &cfg.train)?;
    if cfg.train.noise_sigma > 0.0 {
        model.set_sigma(Some(cfg.train.noise_sigma));
    }
    model.save(&run.path("model.json"))?;
    run.artifact("model.json")?;
    let report = SupervisedReport {
        train_accuracy: accuracy(&model, &train)?,
        test_accuracy: accuracy(&model, &test)?,
        noise_sigma: cfg.train.noise_sigma,
        epoch_losses: losses,
    };
    run.write_json("train_report.json", &report)?;
    run.finish()?;
    let first = report.epoch_losses.first().copied().unwrap_or(f64::NAN);
    let last = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
    Ok(format!(
        "trained {dims:?}: loss {first:.4} -> {last:.4}, test accuracy {}\nwrote {}\n",
        fmt_opt(report.test_accuracy),
        ctx.out.display()
    ))
}

pub fn cmd_smooth(ctx: &Ctx, model_path: &Path) -> Result<String> {
    let cfg = &ctx.cfg;
    let mut run = ctx.run_dir()?;
    let base = load_model(&mut run, model_path)?;
    let (train, test) = cfg.datasets()?;
    check_compatible(&base, &train)?;
    let unlabeled = train.without_labels();
    let (model, report): (MlpModel, TrainReport) = match cfg.smoothing.variant {
        Variant::HeatsmoothingEq3 => {
            smoothing::train_heatsmooth(&base, unlabeled.inputs(), &cfg.smoothing)?
        }
        Variant::ImagenetEq9 => {
            smoothing::train_imagenet_variant(&base, unlabeled.inputs(), &cfg.smoothing)?
        }
        Variant::NoiseBaseline => {
            smoothing::train_noise_baseline(&base, train.labeled("noise baseline")?, &cfg.smoothing)?
        }
    };
    model.save(&run.path("model.json"))?;
    run.artifact("model.json")?;
    run.write_json("train_report.json", &report)?;
    run.finish()?;
    let mut text = format!("smoothed with {:?}, sigma {}\n", cfg.smoothing.variant, cfg.smoothing.sigma);
    for t in &report.timesteps {
        writeln!(
            text,
            "  timestep {}: loss {:.5} -> {:.5}",
            t.timestep, t.initial_loss, t.final_loss
        )?;
    }
    writeln!(
        text,
        "test accuracy {} -> {}\nwrote {}",
        fmt_opt(accuracy(&base, &test)?),
        fmt_opt(accuracy(&model, &test)?),
        ctx.out.display()
    )?;
    Ok(text)
}

/// Per-mode certification summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: CertifyMode,
    pub n_examples: usize,
    pub abstained: usize,
    /// Fraction predicted correctly (certified accuracy at radius 0).
    pub clean_accuracy: f64,
    /// Mean radius over correctly predicted examples.
    pub mean_correct_radius: f64,
    pub curve: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertifySummary {
    pub model_sha256: String,
    pub sigma: f64,
    /// Noise level the model was trained or smoothed with, if recorded.
    pub model_sigma: Option<f64>,
    pub modes: Vec<ModeSummary>,
}

pub fn cmd_certify(ctx: &Ctx, model_path: &Path) -> Result<String> {
    let cfg = &ctx.cfg;
    let mut run = ctx.run_dir()?;
    let model = load_model(&mut run, model_path)?;
    let (_, test) = cfg.datasets()?;
    check_compatible(&model, &test)?;
    let labels = test.labeled("certify")?.labels;
    let radii = certify::radius_grid(cfg.eval.radius_max, cfg.eval.radius_points);
    let mut summary = CertifySummary {
        model_sha256: sha256_file(model_path)?,
        sigma: cfg.certify.sigma,
        model_sigma: model.sigma(),
        modes: Vec::new(),
    };
    for (m, &mode) in cfg.eval.certify_modes.iter().enumerate() {
        let ccfg = CertifyConfig {
            mode,
            ..cfg.certify.clone()
        };
        let records = map_indexed(test.len(), ctx.workers, |i| {
            let mut r = rng::stream(cfg.seed, &[TAG_CERTIFY, m as u64, i as u64]);
            certify::certify(&model, test.inputs().row(i), i, &ccfg, &mut r)
        })?;
        let name = mode.as_str();
        certify::write_records_csv(&records, &run.path(&format!("records_{name}.csv")))?;
        run.artifact(&format!("records_{name}.csv"))?;
        let curve = certify::certified_accuracy_curve(&records, labels, &radii)?;
        certify::write_curve_csv(&curve, ["radius", "certified_accuracy"], &run.path(&format!("curve_{name}.csv")))?;
        run.artifact(&format!("curve_{name}.csv"))?;
        let correct: Vec<f64> = records
            .iter()
            .zip(labels)
            .filter(|(r, &y)| r.prediction == Prediction::Class(y))
            .map(|(r, _)| r.radius)
            .collect();
        summary.modes.push(ModeSummary {
            mode,
            n_examples: records.len(),
            abstained: records.iter().filter(|r| r.prediction == Prediction::Abstain).count(),
            clean_accuracy: correct.len() as f64 / records.len() as f64,
            mean_correct_radius: mean(&correct),
            curve,
        });
    }
    run.write_json("summary.json", &summary)?;
    run.finish()?;
    let mut text = format!("certified {} examples at sigma {}\n", test.len(), summary.sigma);
    for s in &summary.modes {
        writeln!(
            text,
            "  {:<26} accuracy {:.3}, abstained {}, mean radius {:.4}",
            s.mode.as_str(),
            s.clean_accuracy,
            s.abstained,
            s.mean_correct_radius
        )?;
    }
    writeln!(text, "wrote {}", ctx.out.display())?;
    Ok(text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LboundSummary {
    pub sigma: f64,
    pub distances: DistanceSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRunSummary {
    pub model_sha256: String,
    pub attacks: Vec<AttackSummary>,
    /// Sample-free lower bounds at `certify.sigma`, for comparison.
    pub lbound: LboundSummary,
}

pub fn cmd_attack(ctx: &Ctx, model_path: &Path) -> Result<String> {
    let cfg = &ctx.cfg;
    let mut run = ctx.run_dir()?;
    let model = load_model(&mut run, model_path)?;
    let (_, test) = cfg.datasets()?;
    check_compatible(&model, &test)?;
    let labels = test.labeled("attack")?.labels;
    let norms = certify::radius_grid(cfg.attack.epsilon, cfg.eval.norm_points);
    let mut all = Vec::new();
    let mut summaries = Vec::new();
    for &kind in &cfg.eval.attacks {
        let records = map_indexed(test.len(), ctx.workers, |i| {
            let mut r = rng::stream(cfg.seed, &[TAG_ATTACK, kind as u64, i as u64]);
            attacks::attack(kind, &model, test.inputs().row(i), labels[i], i, &cfg.attack, &mut r)
        })?;
        let curve = attacks::attack_curve(&records, &norms)?;
        let name = kind.as_str();
        certify::write_curve_csv(&curve, ["norm", "attack_success"], &run.path(&format!("curve_{name}.csv")))?;
        run.artifact(&format!("curve_{name}.csv"))?;
        summaries.push(attacks::summarize(kind, &records));
        all.extend(records);
    }
    attacks::write_records_csv(&all, &run.path("records.csv"))?;
    run.artifact("records.csv")?;
    let (distances, _) = attacks::lbound_table(&model, test.inputs(), cfg.certify.sigma, 1)?;
    let summary = AttackRunSummary {
        model_sha256: sha256_file(model_path)?,
        attacks: summaries,
        lbound: LboundSummary {
            sigma: cfg.certify.sigma,
            distances,
        },
    };
    run.write_json("summary.json", &summary)?;
    run.finish()?;
    let mut text = format!("attacked {} examples\n", test.len());
    for s in &summary.attacks {
        writeln!(
            text,
            "  {:<4} success {:.3}, {}",
            s.attack.as_str(),
            s.success_rate,
            fmt_distances(s.distances.as_ref())
        )?;
    }
    writeln!(
        text,
        "  lbound (sigma {}) {}\nwrote {}",
        summary.lbound.sigma,
        fmt_distances(Some(&summary.lbound.distances)),
        ctx.out.display()
    )?;
    Ok(text)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceSection {
    pub report: ConvergenceReport,
    /// Observed-order and accuracy warnings; empty when the study is clean.
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OracleReport {
    pub equivalence: Vec<EquivalenceReport>,
    pub convergence: ConvergenceSection,
    pub passed: bool,
}

/// Flags a convergence study whose ratios are far from second order or
/// whose finest error exceeds `tolerance`.
pub fn convergence_flags(report: &ConvergenceReport, tolerance: f64) -> Vec<String> {
    let mut flags = Vec::new();
    if !report.within(3.0, 5.0) {
        flags.push(format!(
            "reduced accuracy: error ratios {:.2?} are outside [3, 5] (second order gives 4)",
            report.ratios
        ));
    }
    if let Some(&last) = report.errors.last() {
        if last > tolerance {
            flags.push(format!(
                "reduced accuracy: finest-grid error {last:.3e} exceeds tolerance {tolerance:.1e}"
            ));
        }
    }
    flags
}

pub fn oracle_report(cfg: &ExperimentConfig) -> Result<OracleReport> {
    use std::f64::consts::PI;
    let o = &cfg.oracle;
    let sigma = o.sigma;
    let s2 = sigma * sigma;
    let pad = PAD_SIGMAS * sigma;
    let eq = &o.equivalence;
    let n1 = o.resolution_1d;
    let mut equivalence = Vec::new();

    let cos3 = |p: &[f64]| (3.0 * p[0]).cos();
    let g = GridFunction::sample_1d(-PI, PI, pad, n1, |x| cos3(&[x]))?;
    let decay = (-4.5 * s2).exp();
    equivalence.push(heat_oracle::equivalence_report(
        "cos(3x)",
        cos3,
        &g,
        sigma,
        Some(|p: &[f64]| decay * (3.0 * p[0]).cos()),
        eq,
    )?);

    let bump = |p: &[f64]| (-p[0] * p[0]).exp();
    let g = GridFunction::sample_1d(-2.0, 2.0, pad, n1, |x| bump(&[x]))?;
    let widen = 1.0 + 2.0 * s2;
    equivalence.push(heat_oracle::equivalence_report(
        "exp(-x^2)",
        bump,
        &g,
        sigma,
        Some(|p: &[f64]| (-p[0] * p[0] / widen).exp() / widen.sqrt()),
        eq,
    )?);

    let ramp = |p: &[f64]| (8.0 * p[0]).tanh();
    let g = GridFunction::sample_1d(-1.0, 1.0, pad, n1, |x| ramp(&[x]))?;
    equivalence.push(heat_oracle::equivalence_report(
        "tanh(8x)",
        ramp,
        &g,
        sigma,
        None::<fn(&[f64]) -> f64>,
        eq,
    )?);

    let wave = |p: &[f64]| p[0].sin() * (2.0 * p[1]).cos();
    let g = GridFunction::sample_2d(-PI, PI, pad, o.resolution_2d, |x, y| wave(&[x, y]))?;
    let decay2 = (-2.5 * s2).exp();
    equivalence.push(heat_oracle::equivalence_report(
        "sin(x)cos(2y)",
        wave,
        &g,
        sigma,
        Some(|p: &[f64]| decay2 * p[0].sin() * (2.0 * p[1]).cos()),
        eq,
    )?);

    let report = heat_oracle::convergence_study(
        |x| (3.0 * x).cos(),
        |x| decay * (3.0 * x).cos(),
        (-PI, PI),
        sigma,
        &o.convergence_cells,
        eq.diffusion_number,
    )?;
    let flags = convergence_flags(&report, eq.tolerance);
    let passed = equivalence.iter().all(|r| r.passed()) && flags.is_empty();
    Ok(OracleReport {
        equivalence,
        convergence: ConvergenceSection { report, flags },
        passed,
    })
}

fn render_oracle(report: &OracleReport) -> String {
    let mut text = String::new();
    for r in &report.equivalence {
        text.push_str(&r.to_string());
        text.push('\n');
    }
    let c = &report.convergence;
    text.push_str("== convergence order (periodic cos(3x)) ==\n");
    text.push_str(&format!("{:>8} {:>12} {:>8}\n", "cells", "sup error", "ratio"));
    for (i, (n, e)) in c.report.resolutions.iter().zip(&c.report.errors).enumerate() {
        let ratio = if i == 0 {
            String::from("-")
        } else {
            format!("{:.2}", c.report.ratios[i - 1])
        };
        text.push_str(&format!("{n:>8} {e:>12.3e} {ratio:>8}\n"));
    }
    if c.flags.is_empty() {
        text.push_str("order ok\n");
    }
    for f in &c.flags {
        text.push_str(&format!("FLAG {f}\n"));
    }
    text.push_str(&format!(
        "\noverall: {}\n",
        if report.passed { "PASS" } else { "FAIL" }
    ));
    text
}

pub fn cmd_oracle_check(ctx: &Ctx) -> Result<String> {
    let mut run = ctx.run_dir()?;
    let report = oracle_report(&ctx.cfg)?;
    let text = render_oracle(&report);
    run.write_text("oracle_report.txt", &text)?;
    run.write_json("oracle_report.json", &report)?;
    run.finish()?;
    Ok(format!("{text}wrote {}\n", ctx.out.display()))
}

/// One row of the timing JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: String,
    pub n_samples: usize,
    /// Mean wall time per example (best of the repeats).
    pub mean_seconds: f64,
    /// `mean_seconds` over the deterministic row's `mean_seconds`.
    pub ratio: f64,
}

fn time_per_example(n: usize, repeats: usize, mut f: impl FnMut(usize) -> Result<usize>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats {
        let start = Instant::now();
        for i in 0..n {
            std::hint::black_box(f(i)?);
        }
        best = best.min(start.elapsed().as_secs_f64() / n as f64);
    }
    Ok(best)
}

/// Times one forward pass per example against majority votes over `n`
/// noisy forward passes, on the test inputs.
pub fn bench_rows(cfg: &ExperimentConfig, model: &MlpModel, inputs: &Tensor) -> Result<Vec<BenchRow>> {
    let b = &cfg.bench;
    let n = inputs.rows();
    let d = inputs.cols();
    // both modes go through the same batched forward pass
    let det = time_per_example(n, b.repeats, |i| {
        let x = Tensor::matrix(1, d, inputs.row(i).to_vec())?;
        Ok(model.predict_batch(&x)?[0])
    })?;
    let mut rows = vec![BenchRow {
        mode: "deterministic".into(),
        n_samples: 1,
        mean_seconds: det,
        ratio: 1.0,
    }];
    for &size in &b.ensemble_sizes {
        let mut r = rng::stream(cfg.seed, &[TAG_BENCH, size as u64]);
        let secs = time_per_example(n, b.repeats, |i| {
            let x = inputs.row(i);
            let mut noisy = Vec::with_capacity(size * d);
            for _ in 0..size {
                noisy.extend(x.iter().map(|&v| v + b.sigma * r.sample::<f64, _>(StandardNormal)));
            }
            let preds = model.predict_batch(&Tensor::matrix(size, d, noisy)?)?;
            let mut votes = vec![0.0; model.n_classes()];
            for p in preds {
                votes[p] += 1.0;
            }
            Ok(argmax(&votes))
        })?;
        rows.push(BenchRow {
            mode: "ensemble".into(),
            n_samples: size,
            mean_seconds: secs,
            ratio: secs / det,
        });
    }
    Ok(rows)
}

pub fn cmd_bench(ctx: &Ctx, model_path: &Path) -> Result<String> {
    let mut run = ctx.run_dir()?;
    let model = load_model(&mut run, model_path)?;
    let (_, test) = ctx.cfg.datasets()?;
    check_compatible(&model, &test)?;
    let rows = bench_rows(&ctx.cfg, &model, test.inputs())?;
    run.write_json("bench.json", &rows)?;
    run.finish()?;
    let mut text = String::new();
    for r in &rows {
        writeln!(
            text,
            "{:<13} n={:<5} {:.3e} s/example  ratio {:.2}",
            r.mode, r.n_samples, r.mean_seconds, r.ratio
        )?;
    }
    writeln!(text, "wrote {}", ctx.out.display())?;
    Ok(text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertifyRow {
    pub run: String,
    pub mode: CertifyMode,
    pub sigma: f64,
    pub clean_accuracy: f64,
    pub abstained: usize,
    /// Certified accuracy at a few radii of the curve.
    pub at_radius: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub run: String,
    pub method: String,
    pub success_rate: Option<f64>,
    pub median: Option<f64>,
    pub mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub certify: Vec<CertifyRow>,
    pub attacks: Vec<AttackRow>,
}

fn run_label(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn render_report(report: &ExperimentReport) -> String {
    let mut md = String::from("# Experiment report\n\n## Certified accuracy\n\n");
    if let Some(first) = report.certify.first() {
        md.push_str("| run | mode | sigma | accuracy | abstained |");
        for (r, _) in &first.at_radius {
            md.push_str(&format!(" r={r:.2} |"));
        }
        md.push_str("\n|---|---|---|---|---|");
        md.push_str(&"---|".repeat(first.at_radius.len()));
        md.push('\n');
    }
    for c in &report.certify {
        md.push_str(&format!(
            "| {} | {} | {} | {:.3} | {} |",
            c.run,
            c.mode.as_str(),
            c.sigma,
            c.clean_accuracy,
            c.abstained
        ));
        for (_, a) in &c.at_radius {
            md.push_str(&format!(" {a:.3} |"));
        }
        md.push('\n');
    }
    md.push_str("\n## Adversarial distance (l2)\n\n| run | method | success | median | mean |\n|---|---|---|---|---|\n");
    let cell = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    for a in &report.attacks {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            a.run,
            a.method,
            cell(a.success_rate),
            cell(a.median),
            cell(a.mean)
        ));
    }
    md
}

/// Picks `k` evenly spaced points of a curve, including both ends.
fn sample_curve(curve: &[(f64, f64)], k: usize) -> Vec<(f64, f64)> {
    if curve.len() <= k {
        return curve.to_vec();
    }
    (0..k).map(|i| curve[i * (curve.len() - 1) / (k - 1)]).collect()
}

pub fn cmd_report(ctx: &Ctx, runs: &[PathBuf]) -> Result<String> {
    let mut run = ctx.run_dir()?;
    let mut report = ExperimentReport {
        certify: Vec::new(),
        attacks: Vec::new(),
    };
    for dir in runs {
        let manifest = Manifest::load(dir)?;
        let label = run_label(dir);
        let summary_path = dir.join("summary.json");
        match manifest.command.as_str() {
            "certify" => {
                run.input(&summary_path)?;
                let s: CertifySummary = read_json(&summary_path)?;
                for m in s.modes {
                    report.certify.push(CertifyRow {
                        run: label.clone(),
                        mode: m.mode,
                        sigma: s.sigma,
                        clean_accuracy: m.clean_accuracy,
                        abstained: m.abstained,
                        at_radius: sample_curve(&m.curve, 5),
                    });
                }
            }
            "attack" => {
                run.input(&summary_path)?;
                let s: AttackRunSummary = read_json(&summary_path)?;
                for a in s.attacks {
                    report.attacks.push(AttackRow {
                        run: label.clone(),
                        method: a.attack.as_str().to_string(),
                        success_rate: Some(a.success_rate),
                        median: a.distances.as_ref().map(|d| d.median),
                        mean: a.distances.as_ref().map(|d| d.mean),
                    });
                }
                report.attacks.push(AttackRow {
                    run: label,
                    method: format!("lbound (sigma {})", s.lbound.sigma),
                    success_rate: None,
                    median: Some(s.lbound.distances.median),
                    mean: Some(s.lbound.distances.mean),
                });
            }
            other => bail!(heatsmooth::Error::config(
                "runs",
                format!("{} is a `{other}` run; report reads certify and attack runs", dir.display()),
            )),
        }
    }
    let md = render_report(&report);
    run.write_text("report.md", &md)?;
    run.write_json("report.json", &report)?;
    run.finish()?;
    Ok(format!("{md}\nwrote {}\n", ctx.out.display()))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into())
}

fn fmt_distances(d: Option<&DistanceSummary>) -> String {
    match d {
        Some(d) => format!("median {:.4}, mean {:.4} over {}", d.median, d.mean, d.count),
        None => "no successes".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_curve_keeps_ends() {
        let curve: Vec<(f64, f64)> = (0..41).map(|i| (i as f64, 1.0)).collect();
        let s = sample_curve(&curve, 5);
        assert_eq!(s.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0.0, 10.0, 20.0, 30.0, 40.0]);
        assert_eq!(sample_curve(&curve[..3], 5).len(), 3);
    }

    #[test]
    fn clean_second_order_study_has_no_flags() {
        let r = ConvergenceReport {
            resolutions: vec![64, 128],
            errors: vec![4e-4, 1e-4],
            ratios: vec![4.0],
        };
        assert!(convergence_flags(&r, 1e-3).is_empty());
        let coarse = ConvergenceReport {
            resolutions: vec![4, 8],
            errors: vec![0.5, 0.2],
            ratios: vec![2.5],
        };
        assert_eq!(convergence_flags(&coarse, 1e-3).len(), 2);
    }
}
