//! Toy datasets and CSV ingestion.
//!
//! CSV layout: a header `x_0,...,x_{d-1}` optionally followed by `label`,
//! then one example per row. A JSON sidecar (`<file>.meta.json`) carries the
//! dataset name, class count, seed and generation parameters.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub seed: Option<u64>,
    pub params: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Option<Vec<usize>>,
    n_classes: usize,
    pub meta: DatasetMeta,
}

/// Borrowed view of a dataset that is known to carry labels.
#[derive(Clone, Copy)]
pub struct Labeled<'a> {
    pub inputs: &'a Tensor,
    pub labels: &'a [usize],
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(
        inputs: Tensor,
        labels: Option<Vec<usize>>,
        n_classes: usize,
        meta: DatasetMeta,
    ) -> Result<Self> {
        if inputs.shape().len() != 2 {
            return Err(Error::Shape {
                expected: vec![0, 0],
                actual: inputs.shape().to_vec(),
                context: "dataset inputs must be [N, d]",
            });
        }
        if let Some(labels) = &labels {
            if labels.len() != inputs.rows() {
                return Err(Error::LengthMismatch {
                    left: labels.len(),
                    right: inputs.rows(),
                    context: "labels vs inputs",
                });
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    n_classes,
                });
            }
        }
        Ok(Dataset {
            inputs,
            labels,
            n_classes,
            meta,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Labeled view, or an error naming the operation that needed labels.
    pub fn labeled(&self, op: &'static str) -> Result<Labeled<'_>> {
        let labels = self.labels.as_deref().ok_or(Error::MissingLabels(op))?;
        Ok(Labeled {
            inputs: &self.inputs,
            labels,
            n_classes: self.n_classes,
        })
    }

    /// Copy of the dataset with labels dropped.
    pub fn without_labels(&self) -> Dataset {
        Dataset {
            labels: None,
            ..self.clone()
        }
    }
}

/// 1D binary toy problem: class 0 on `[-1, -0.2]`, class 1 on `[0.2, 1]`,
/// plus one class-1 outlier at `outlier_x` inside the class-0 band.
pub fn gen_1d_outlier(n_points: usize, outlier_x: f64, seed: u64) -> Result<Dataset> {
    if n_points < 10 {
        return Err(Error::config("dataset.n_points", "need at least 10 points"));
    }
    let mut r = rng::stream(seed, &[0xd1]);
    let regular = n_points - 1;
    let n0 = regular.div_ceil(2);
    let mut xs = Vec::with_capacity(n_points);
    let mut labels = Vec::with_capacity(n_points);
    for i in 0..regular {
        let (lo, hi, label) = if i < n0 { (-1.0, -0.2, 0) } else { (0.2, 1.0, 1) };
        xs.push(r.random_range(lo..=hi));
        labels.push(label);
    }
    xs.push(outlier_x);
    labels.push(1);
    let mut params = BTreeMap::new();
    params.insert("n_points".into(), n_points as f64);
    params.insert("outlier_x".into(), outlier_x);
    Dataset::new(
        Tensor::matrix(n_points, 1, xs)?,
        Some(labels),
        2,
        DatasetMeta {
            name: "1d_outlier".into(),
            seed: Some(seed),
            params,
        },
    )
}

/// Two 2D Gaussian blobs (std 0.5) centered at `(∓(margin/2 + 1), 0)`,
/// truncated so that class 0 lies in `x_0 ≤ -margin/2` and class 1 in
/// `x_0 ≥ margin/2`, plus one class-1 outlier planted at the class-0 center.
///
/// Class 0 gets `n_points / 2` points, class 1 the rest (outlier included).
pub fn gen_2d_clusters(n_points: usize, margin: f64, seed: u64) -> Result<Dataset> {
    if n_points < 10 {
        return Err(Error::config("dataset.n_points", "need at least 10 points"));
    }
    if !(margin >= 0.0) {
        return Err(Error::config("dataset.margin", "must be nonnegative"));
    }
    let mut r = rng::stream(seed, &[0xd2]);
    let n0 = n_points / 2;
    let half = margin / 2.0;
    let center = half + 1.0;
    let std = 0.5;
    let mut data = Vec::with_capacity(2 * n_points);
    let mut labels = Vec::with_capacity(n_points);
    for i in 0..n_points - 1 {
        let label = usize::from(i >= n0);
        let sign = if label == 0 { -1.0 } else { 1.0 };
        let (x0, x1) = loop {
            let x0 = sign * center + std * r.sample::<f64, _>(StandardNormal);
            let x1 = std * r.sample::<f64, _>(StandardNormal);
            if sign * x0 >= half {
                break (x0, x1);
            }
        };
        data.extend([x0, x1]);
        labels.push(label);
    }
    data.extend([-center, 0.0]);
    labels.push(1);
    let mut params = BTreeMap::new();
    params.insert("n_points".into(), n_points as f64);
    params.insert("margin".into(), margin);
    Dataset::new(
        Tensor::matrix(n_points, 2, data)?,
        Some(labels),
        2,
        DatasetMeta {
            name: "2d_clusters".into(),
            seed: Some(seed),
            params,
        },
    )
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    n_classes: usize,
    #[serde(flatten)]
    meta: DatasetMeta,
}

pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, 0, e))?;
    let d = dataset.dim();
    let mut header: Vec<String> = (0..d).map(|i| format!("x_{i}")).collect();
    if dataset.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(|e| csv_err(path, 1, e))?;
    for i in 0..dataset.len() {
        let mut row: Vec<String> = dataset.inputs.row(i).iter().map(f64::to_string).collect();
        if let Some(labels) = &dataset.labels {
            row.push(labels[i].to_string());
        }
        w.write_record(&row).map_err(|e| csv_err(path, i as u64 + 2, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let sidecar = Sidecar {
        n_classes: dataset.n_classes,
        meta: dataset.meta.clone(),
    };
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_string_pretty(&sidecar).expect("serializes"))
        .map_err(|e| Error::io(side, e))
}

fn csv_err(path: &Path, line: u64, e: impl std::fmt::Display) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        line,
        reason: e.to_string(),
    }
}

/// Loads a dataset. The class count comes from `n_classes` if given, else
/// from the sidecar, else from the largest label.
pub fn load_csv(path: &Path, n_classes: Option<usize>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, 0, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, 1, e))?.clone();
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    let has_label = cols.last() == Some(&"label");
    let d = cols.len() - usize::from(has_label);
    if d == 0 {
        return Err(csv_err(path, 1, "no feature columns"));
    }
    for (i, c) in cols[..d].iter().enumerate() {
        if *c != format!("x_{i}") {
            return Err(csv_err(path, 1, format!("expected column x_{i}, found {c:?}")));
        }
    }

    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_err(path, line, e)
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != cols.len() {
            return Err(csv_err(
                path,
                line,
                format!("expected {} fields, found {}", cols.len(), rec.len()),
            ));
        }
        for field in rec.iter().take(d) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| csv_err(path, line, format!("bad number {field:?}")))?;
            if !v.is_finite() {
                return Err(csv_err(path, line, "non-finite value"));
            }
            inputs.push(v);
        }
        if has_label {
            let field = &rec[d];
            let l: usize = field
                .trim()
                .parse()
                .map_err(|_| csv_err(path, line, format!("bad label {field:?}")))?;
            labels.push(l);
        }
    }
    let n = inputs.len() / d;
    if n == 0 {
        return Err(Error::Empty("csv dataset"));
    }

    let sidecar: Option<Sidecar> = std::fs::read_to_string(sidecar_path(path))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let n_classes = n_classes
        .or(sidecar.as_ref().map(|s| s.n_classes))
        .unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    let meta = sidecar.map(|s| s.meta).unwrap_or_else(|| DatasetMeta {
        name: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        ..DatasetMeta::default()
    });
    Dataset::new(
        Tensor::matrix(n, d, inputs)?,
        has_label.then_some(labels),
        n_classes,
        meta,
    )
}

/// Per-feature affine map `x ↦ (x - mean) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Affine {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }
}

pub struct Normalized {
    pub dataset: Dataset,
    pub transform: Affine,
    pub warnings: Vec<String>,
}

/// Standardizes every feature to zero mean and unit (population) variance.
/// Constant features keep scale 1 and produce a warning.
pub fn normalize(dataset: &Dataset) -> Result<Normalized> {
    if dataset.is_empty() {
        return Err(Error::Empty("normalize"));
    }
    let (n, d) = (dataset.len(), dataset.dim());
    let x = dataset.inputs();
    let mut mean = vec![0.0; d];
    let mut scale = vec![0.0; d];
    let mut warnings = Vec::new();
    for j in 0..d {
        let m = (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x.get(i, j) - m).powi(2)).sum::<f64>() / n as f64;
        mean[j] = m;
        scale[j] = if var.sqrt() < 1e-12 {
            warnings.push(format!("feature x_{j} has zero variance; scale clamped to 1"));
            1.0
        } else {
            var.sqrt()
        };
    }
    let transform = Affine { mean, scale };
    let data = (0..n).flat_map(|i| transform.apply(x.row(i))).collect();
    let dataset = Dataset {
        inputs: Tensor::matrix(n, d, data)?,
        ..dataset.clone()
    };
    Ok(Normalized {
        dataset,
        transform,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_outlier_layout() {
        let ds = gen_1d_outlier(101, -0.5, 3).unwrap();
        let labels = ds.labels().unwrap();
        let x = ds.inputs().data();
        let in_band_ones: Vec<f64> = x
            .iter()
            .zip(labels)
            .filter(|(&v, &l)| l == 1 && v < 0.0)
            .map(|(&v, _)| v)
            .collect();
        assert_eq!(in_band_ones, vec![-0.5]);
        let ones = labels.iter().filter(|&&l| l == 1).count() - 1;
        let zeros = labels.iter().filter(|&&l| l == 0).count();
        assert!(ones.abs_diff(zeros) <= 1);
        assert_eq!(ds, gen_1d_outlier(101, -0.5, 3).unwrap());
        assert!(gen_1d_outlier(5, -0.5, 3).is_err());
    }

    #[test]
    fn clusters_counts_and_separability() {
        let ds = gen_2d_clusters(51, 2.0, 9).unwrap();
        let labels = ds.labels().unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 25);
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 26);
        // separable by x_0 = 0 except the planted outlier (last row)
        for (i, &label) in labels.iter().enumerate().take(ds.len() - 1) {
            let x0 = ds.inputs().get(i, 0);
            assert_eq!(label == 1, x0 > 0.0);
            assert!(x0.abs() >= 1.0);
        }
        assert!(ds.inputs().get(ds.len() - 1, 0) < 0.0);
        assert_eq!(ds, gen_2d_clusters(51, 2.0, 9).unwrap());
    }

    #[test]
    fn csv_round_trip_and_unlabeled() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let ds = gen_2d_clusters(20, 1.0, 1).unwrap();
        let p = dir.join("d.csv");
        save_csv(&ds, &p).unwrap();
        let back = load_csv(&p, None).unwrap();
        assert_eq!(back, ds);

        let unl = ds.without_labels();
        let p2 = dir.join("u.csv");
        save_csv(&unl, &p2).unwrap();
        let back = load_csv(&p2, None).unwrap();
        assert!(back.labels().is_none());
        assert!(matches!(back.labeled("attack"), Err(Error::MissingLabels("attack"))));
    }

    #[test]
    fn csv_errors_cite_line() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let p = dir.join("bad.csv");
        let mut text = String::from("x_0,x_1,label\n");
        for i in 0..5 {
            text.push_str(&format!("{i}.0,1.0,0\n"));
        }
        text.push_str("0.5,oops,1\n");
        std::fs::write(&p, text).unwrap();
        match load_csv(&p, Some(2)) {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 7),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "x_0,label\n0.1,0\n0.2,5\n").unwrap();
        assert!(matches!(
            load_csv(&p, Some(2)),
            Err(Error::LabelOutOfRange { label: 5, .. })
        ));
    }

    #[test]
    fn normalization() {
        let ds = gen_2d_clusters(40, 1.0, 2).unwrap();
        let norm = normalize(&ds).unwrap();
        assert!(norm.warnings.is_empty());
        let again = normalize(&norm.dataset).unwrap();
        for (m, s) in again.transform.mean.iter().zip(&again.transform.scale) {
            assert!(m.abs() < 1e-12 && (s - 1.0).abs() < 1e-12);
        }
        for i in 0..ds.len() {
            let back = norm.transform.invert(norm.dataset.inputs().row(i));
            for (a, b) in back.iter().zip(ds.inputs().row(i)) {
                assert!((a - b).abs() < 1e-10);
            }
        }

        let constant = Dataset::new(
            Tensor::matrix(3, 2, vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap(),
            None,
            2,
            DatasetMeta::default(),
        )
        .unwrap();
        let n = normalize(&constant).unwrap();
        assert_eq!(n.transform.scale[1], 1.0);
        assert_eq!(n.warnings.len(), 1);
    }
}
