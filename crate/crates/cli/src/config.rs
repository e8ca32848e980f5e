//! Experiment configuration: one TOML file plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use heatsmooth::attacks::{AttackConfig, AttackKind};
use heatsmooth::certify::{CertifyConfig, CertifyMode};
use heatsmooth::data::{self, Dataset};
use heatsmooth::heat_oracle::EquivalenceConfig;
use heatsmooth::model::Activation;
use heatsmooth::smoothing::{SmoothingConfig, SupervisedConfig};
use heatsmooth::Error;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    #[serde(rename = "clusters_2d")]
    Clusters2d,
    #[serde(rename = "outlier_1d")]
    Outlier1d,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub kind: DataKind,
    pub n_train: usize,
    pub n_test: usize,
    /// Gap between the two clusters (`clusters_2d`).
    pub margin: f64,
    /// Location of the planted outlier (`outlier_1d`).
    pub outlier_x: f64,
    /// Training CSV (`csv`).
    pub train_path: Option<PathBuf>,
    /// Test CSV (`csv`); defaults to the training file.
    pub test_path: Option<PathBuf>,
    /// Class count for CSV files; inferred from the labels when absent.
    pub n_classes: Option<usize>,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            kind: DataKind::Clusters2d,
            n_train: 200,
            n_test: 100,
            margin: 1.0,
            outlier_x: -0.5,
            train_path: None,
            test_path: None,
            n_classes: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// Hidden layer widths; input and output sizes come from the data.
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            hidden: vec![32, 32],
            activation: Activation::Relu,
        }
    }
}

/// Which evaluations `certify` and `attack` run, and the curve grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub certify_modes: Vec<CertifyMode>,
    pub attacks: Vec<AttackKind>,
    pub radius_max: f64,
    pub radius_points: usize,
    /// Points on the attack-curve norm grid, which spans `[0, attack.epsilon]`.
    pub norm_points: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            certify_modes: vec![
                CertifyMode::StochasticMc,
                CertifyMode::DeterministicFixedClass,
                CertifyMode::Lbound,
            ],
            attacks: vec![AttackKind::Pgd, AttackKind::Ddn],
            radius_max: 1.0,
            radius_points: 41,
            norm_points: 41,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    /// Ensemble sizes compared against one deterministic pass.
    pub ensemble_sizes: Vec<usize>,
    /// Noise level of the ensemble.
    pub sigma: f64,
    pub repeats: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            ensemble_sizes: vec![1, 100],
            sigma: 0.25,
            repeats: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSpec {
    pub sigma: f64,
    /// Grid points per axis for 1D test functions.
    pub resolution_1d: usize,
    /// Grid points per axis for 2D test functions.
    pub resolution_2d: usize,
    /// Cell counts of the convergence-order study.
    pub convergence_cells: Vec<usize>,
    pub equivalence: EquivalenceConfig,
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec {
            sigma: 0.2,
            resolution_1d: 2048,
            resolution_2d: 256,
            convergence_cells: vec![64, 128, 256],
            equivalence: EquivalenceConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives every random stream; copied into the component seeds.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSpec,
    pub model: ModelSpec,
    pub train: SupervisedConfig,
    pub smoothing: SmoothingConfig,
    pub certify: CertifyConfig,
    pub attack: AttackConfig,
    pub eval: EvalSpec,
    pub bench: BenchSpec,
    pub oracle: OracleSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            data: DataSpec::default(),
            model: ModelSpec::default(),
            train: SupervisedConfig::default(),
            smoothing: SmoothingConfig::default(),
            certify: CertifyConfig::default(),
            attack: AttackConfig::default(),
            eval: EvalSpec::default(),
            bench: BenchSpec::default(),
            oracle: OracleSpec::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults), applies `overrides` and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<Table>()
                    .map_err(|e| Error::config("<file>", e.to_string()))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: ExperimentConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<config>", e.message().to_string()))?;
        cfg.resolve_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_seeds(&mut self) {
        self.train.seed = self.seed;
        self.smoothing.seed = self.seed;
        self.oracle.equivalence.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.smoothing.validate()?;
        self.certify.validate()?;
        self.attack.validate()?;
        let d = &self.data;
        if d.kind != DataKind::Csv && (d.n_train < 10 || d.n_test < 10) {
            return Err(Error::config("data.n_train", "generators need at least 10 points").into());
        }
        if d.kind == DataKind::Csv && d.train_path.is_none() {
            return Err(Error::config("data.train_path", "required when data.kind = \"csv\"").into());
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "layer widths must be positive").into());
        }
        let e = &self.eval;
        if !(e.radius_max > 0.0 && e.radius_max.is_finite()) {
            return Err(Error::config("eval.radius_max", "must be positive").into());
        }
        if e.radius_points < 2 || e.norm_points < 2 {
            return Err(Error::config("eval.radius_points", "curve grids need at least 2 points").into());
        }
        let b = &self.bench;
        if b.ensemble_sizes.is_empty() || b.ensemble_sizes.contains(&0) {
            return Err(Error::config("bench.ensemble_sizes", "need positive sizes").into());
        }
        if !(b.sigma >= 0.0 && b.sigma.is_finite()) {
            return Err(Error::config("bench.sigma", "must be nonnegative").into());
        }
        if b.repeats == 0 {
            return Err(Error::config("bench.repeats", "must be at least 1").into());
        }
        let o = &self.oracle;
        if !(o.sigma > 0.0 && o.sigma.is_finite()) {
            return Err(Error::config("oracle.sigma", "must be positive").into());
        }
        if o.resolution_1d < 8 || o.resolution_2d < 8 {
            return Err(Error::config("oracle.resolution_1d", "need at least 8 points").into());
        }
        if o.convergence_cells.len() < 2 {
            return Err(Error::config("oracle.convergence_cells", "need at least two grids").into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Training and test sets.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        Ok(match d.kind {
            DataKind::Clusters2d => (
                data::gen_2d_clusters(d.n_train, d.margin, self.seed)?,
                data::gen_2d_clusters(d.n_test, d.margin, self.seed.wrapping_add(1))?,
            ),
            DataKind::Outlier1d => (
                data::gen_1d_outlier(d.n_train, d.outlier_x, self.seed)?,
                data::gen_1d_outlier(d.n_test, d.outlier_x, self.seed.wrapping_add(1))?,
            ),
            DataKind::Csv => {
                let train_path = d.train_path.as_ref().expect("validated");
                let train = data::load_csv(train_path, d.n_classes)?;
                let test = match &d.test_path {
                    Some(p) => data::load_csv(p, Some(train.n_classes()))?,
                    None => train.clone(),
                };
                (train, test)
            }
        })
    }

    /// Full layer list for a dataset of input size `d_in` with `n_classes`.
    pub fn layer_dims(&self, d_in: usize, n_classes: usize) -> Vec<usize> {
        let mut dims = vec![d_in];
        dims.extend(&self.model.hidden);
        dims.push(n_classes);
        dims
    }
}

/// Sets `a.b.c = value` inside `table`. The value is parsed as a TOML value
/// and falls back to a plain string.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!(Error::config(spec, "override must look like key=value"));
    };
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!(Error::config(key, "empty key segment"));
    }
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut node = table;
    for (i, p) in path.iter().enumerate() {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = match entry {
            Value::Table(t) => t,
            _ => bail!(Error::config(parts[..=i].join("."), "is not a table")),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_parse_typed_values() {
        let cfg = ExperimentConfig::load(
            None,
            &[
                "smoothing.sigma=0.3".into(),
                "model.hidden=[8, 8]".into(),
                "data.kind=outlier_1d".into(),
                "seed = 9".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.smoothing.sigma, 0.3);
        assert_eq!(cfg.model.hidden, vec![8, 8]);
        assert_eq!(cfg.data.kind, DataKind::Outlier1d);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.smoothing.seed, 9);
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = ExperimentConfig::load(None, &["smoothing.sigma=-1".into()]).unwrap_err();
        assert!(err.to_string().contains("smoothing.sigma"), "{err}");
        let err = ExperimentConfig::load(None, &["train.noise_sigma=-0.5".into()]).unwrap_err();
        assert!(err.to_string().contains("train.noise_sigma"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::load(None, &["smoothing.sigmaa=0.1".into()]).unwrap_err();
        assert!(err.to_string().contains("sigmaa"), "{err}");
    }

    #[test]
    fn override_through_a_scalar_fails() {
        let mut t = Table::new();
        apply_override(&mut t, "a=1").unwrap();
        assert!(apply_override(&mut t, "a.b=2").is_err());
        assert!(apply_override(&mut t, "novalue").is_err());
    }
}
