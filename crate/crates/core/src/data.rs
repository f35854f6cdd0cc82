//! Paired two-modality datasets: synthesis from class Gaussians, the
//! labelled/unlabelled split, CSV feature files and feature-space views.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{random_spd, sample_mvn, Matrix, RngSeed};
use crate::theory::{build_fused, sphere_point, GaussianClassModel, R_MAX};

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Ground truth; kept for evaluation even when the sample is unlabelled.
    pub label: Option<usize>,
    pub is_labeled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalDataset {
    pub samples: Vec<PairedSample>,
    pub num_old: usize,
    pub num_new: usize,
    pub dims: (usize, usize),
}

impl MultimodalDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_old + self.num_new
    }

    pub fn old_set(&self) -> Vec<usize> {
        (0..self.num_old).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.x.len() != self.dims.0 || s.y.len() != self.dims.1 {
                return Err(Error::DimensionMismatch(format!(
                    "sample {i} has dims ({}, {}), dataset declares {:?}",
                    s.x.len(),
                    s.y.len(),
                    self.dims
                )));
            }
            if s.is_labeled && !matches!(s.label, Some(l) if l < self.num_old) {
                return Err(Error::InvalidSpec(format!(
                    "sample {i} is labelled with {:?}, outside the {} old classes",
                    s.label, self.num_old
                )));
            }
        }
        Ok(())
    }

    fn matrix(&self, idx: &[usize], pick: impl Fn(&PairedSample) -> &[f64], d: usize) -> Matrix {
        let mut m = Matrix::zeros(idx.len(), d);
        for (r, &i) in idx.iter().enumerate() {
            for (c, v) in pick(&self.samples[i]).iter().enumerate() {
                m[(r, c)] = *v;
            }
        }
        m
    }

    pub fn x_rows(&self, idx: &[usize]) -> Matrix {
        self.matrix(idx, |s| &s.x, self.dims.0)
    }

    pub fn y_rows(&self, idx: &[usize]) -> Matrix {
        self.matrix(idx, |s| &s.y, self.dims.1)
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| !self.samples[i].is_labeled)
            .collect()
    }

    /// `[x | y]` for every sample.
    pub fn fused_matrix(&self) -> Matrix {
        let (dx, dy) = self.dims;
        Matrix::from_fn(self.len(), dx + dy, |i, j| {
            let s = &self.samples[i];
            if j < dx {
                s.x[j]
            } else {
                s.y[j - dx]
            }
        })
    }

    /// Labels visible to training: `Some` only on labelled samples.
    pub fn visible_labels(&self) -> Vec<Option<usize>> {
        self.samples
            .iter()
            .map(|s| if s.is_labeled { s.label } else { None })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub k_total: usize,
    pub k_old: usize,
    pub d: usize,
    pub n_per_class: usize,
    /// Class-mean radius in units of `√d` average standard deviations.
    pub mean_separation: f64,
    pub r_range: (f64, f64),
    pub labeled_fraction: f64,
    /// Eigenvalue ratio cap of each class covariance.
    pub cov_condition: f64,
    pub seed: RngSeed,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidSpec(m));
        if self.k_total == 0 || self.d == 0 || self.n_per_class == 0 {
            return fail("k_total, d and n_per_class must be positive".into());
        }
        if self.k_old > self.k_total {
            return fail(format!("k_old {} exceeds k_total {}", self.k_old, self.k_total));
        }
        if !(self.mean_separation >= 0.0 && self.mean_separation.is_finite()) {
            return fail(format!("mean_separation {} must be >= 0", self.mean_separation));
        }
        let (lo, hi) = self.r_range;
        if !(0.0 <= lo && lo <= hi && hi <= R_MAX) {
            return fail(format!("r_range ({lo}, {hi}) must satisfy 0 <= lo <= hi <= {R_MAX}"));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return fail(format!("labeled_fraction {} outside (0, 1]", self.labeled_fraction));
        }
        if self.cov_condition.is_nan() || self.cov_condition < 1.0 {
            return fail(format!("cov_condition {} must be >= 1", self.cov_condition));
        }
        Ok(())
    }
}

fn unit_trace_spd(d: usize, cond: f64, seed: RngSeed) -> Result<crate::numerics::SpdMatrix> {
    let m = random_spd(d, cond, seed)?;
    let scale = d as f64 / m.as_matrix().trace();
    m.scaled(scale)
}

/// Draws one Gaussian class model per class and samples each class from its
/// fused Gaussian. Covariances have unit average variance, so the mean radius
/// is `mean_separation·√d`.
pub fn generate(spec: &DatasetSpec) -> Result<(MultimodalDataset, Vec<GaussianClassModel>)> {
    spec.validate()?;
    let d = spec.d;
    let radius = spec.mean_separation * (d as f64).sqrt();
    let mut geometry = spec.seed.derive(1).rng();
    let (lo, hi) = spec.r_range;

    let mut models = Vec::with_capacity(spec.k_total);
    let mut samples = Vec::with_capacity(spec.k_total * spec.n_per_class);
    for k in 0..spec.k_total {
        let class_seed = spec.seed.derive(100 + k as u64);
        let mu_x = sphere_point(d, radius, &mut geometry);
        let mu_y = sphere_point(d, radius, &mut geometry);
        let r = (0..d)
            .map(|_| if hi > lo { geometry.random_range(lo..=hi) } else { lo })
            .collect();
        let model = GaussianClassModel::new(
            k,
            mu_x,
            unit_trace_spd(d, spec.cov_condition, class_seed.derive(1))?,
            mu_y,
            unit_trace_spd(d, spec.cov_condition, class_seed.derive(2))?,
            r,
        )?;
        let fused = build_fused(&model)?;
        let draws = sample_mvn(&fused.mu_f, &fused.cov_f, spec.n_per_class, class_seed.derive(3))?;
        for row in draws.row_iter() {
            let v: Vec<f64> = row.iter().copied().collect();
            samples.push(PairedSample {
                x: v[..d].to_vec(),
                y: v[d..].to_vec(),
                label: Some(k),
                is_labeled: false,
            });
        }
        models.push(model);
    }
    let ds = MultimodalDataset {
        samples,
        num_old: spec.k_old,
        num_new: spec.k_total - spec.k_old,
        dims: (d, d),
    };
    Ok((split_gcd(ds, spec.labeled_fraction, spec.seed.derive(2)), models))
}

/// Marks `round(fraction·n_k)` samples of every old class as labelled, chosen
/// by a per-class shuffle of the seed. New-class samples are never labelled.
pub fn split_gcd(mut ds: MultimodalDataset, labeled_fraction: f64, seed: RngSeed) -> MultimodalDataset {
    for s in ds.samples.iter_mut() {
        s.is_labeled = false;
    }
    for class in 0..ds.num_old {
        let mut members: Vec<usize> = ds
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == Some(class))
            .map(|(i, _)| i)
            .collect();
        members.shuffle(&mut seed.derive(class as u64).rng());
        let take = (labeled_fraction * members.len() as f64).round() as usize;
        for &i in members.iter().take(take) {
            ds.samples[i].is_labeled = true;
        }
    }
    ds
}

fn read_feature_file(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let row = rec
            .iter()
            .map(|cell| {
                cell.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    Error::format(path, format!("row {i}: non-numeric cell {cell:?}"))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::format(
                    path,
                    format!("row {i} has {} columns, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(path, e.to_string())
    }
}

pub const LABELS_HEADER: [&str; 3] = ["index", "label", "is_labeled"];

/// Reads a dataset written in the feature/label CSV layout. The old-class
/// count is taken from the largest labelled label.
pub fn load_features(x_path: &Path, y_path: &Path, labels_path: &Path) -> Result<MultimodalDataset> {
    load_features_with(x_path, y_path, labels_path, None)
}

/// As [`load_features`], with an explicit old-class count.
pub fn load_features_with(
    x_path: &Path,
    y_path: &Path,
    labels_path: &Path,
    num_old: Option<usize>,
) -> Result<MultimodalDataset> {
    let xs = read_feature_file(x_path)?;
    let ys = read_feature_file(y_path)?;
    if xs.len() != ys.len() {
        return Err(Error::format(
            y_path,
            format!("{} rows, but {} has {}", ys.len(), x_path.display(), xs.len()),
        ));
    }

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(labels_path)
        .map_err(|e| csv_error(labels_path, e))?;
    let header = rdr.headers().map_err(|e| csv_error(labels_path, e))?.clone();
    if header.iter().map(str::trim).ne(LABELS_HEADER) {
        return Err(Error::format(
            labels_path,
            format!("unknown header {:?}, expected index,label,is_labeled", header.iter().collect::<Vec<_>>()),
        ));
    }
    let mut meta = Vec::with_capacity(xs.len());
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(labels_path, e))?;
        let cell = |c: usize| rec.get(c).map(str::trim).unwrap_or("");
        let bad = |what: &str| Error::format(labels_path, format!("row {i}: {what}"));
        let index: usize = cell(0).parse().map_err(|_| bad("non-numeric index"))?;
        if index != i {
            return Err(bad(&format!("index {index} out of order")));
        }
        let label: i64 = cell(1).parse().map_err(|_| bad("non-numeric label"))?;
        let label = match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            _ => return Err(bad("label must be a non-negative integer or -1")),
        };
        let is_labeled = match cell(2) {
            "0" => false,
            "1" => true,
            _ => return Err(bad("is_labeled must be 0 or 1")),
        };
        if is_labeled && label.is_none() {
            return Err(bad("labelled sample without a label"));
        }
        meta.push((label, is_labeled));
    }
    if meta.len() != xs.len() {
        return Err(Error::format(
            labels_path,
            format!("{} label rows for {} feature rows", meta.len(), xs.len()),
        ));
    }

    let dims = (
        xs.first().map_or(0, Vec::len),
        ys.first().map_or(0, Vec::len),
    );
    let num_old = num_old.unwrap_or_else(|| {
        meta.iter()
            .filter(|m| m.1)
            .filter_map(|m| m.0)
            .max()
            .map_or(0, |m| m + 1)
    });
    let num_classes = meta
        .iter()
        .filter_map(|m| m.0)
        .max()
        .map_or(0, |m| m + 1)
        .max(num_old);
    let samples = xs
        .into_iter()
        .zip(ys)
        .zip(meta)
        .map(|((x, y), (label, is_labeled))| PairedSample {
            x,
            y,
            label,
            is_labeled,
        })
        .collect();
    let ds = MultimodalDataset {
        samples,
        num_old,
        num_new: num_classes - num_old,
        dims,
    };
    ds.validate().map_err(|e| Error::format(labels_path, e.to_string()))?;
    Ok(ds)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_rows<'a>(path: &Path, rows: impl Iterator<Item = &'a [f64]>) -> Result<()> {
    let mut w = create(path)?;
    for row in rows {
        let line = row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the three CSV files. Floats use shortest round-trip formatting, so
/// reading them back is lossless.
pub fn write_features(ds: &MultimodalDataset, x_path: &Path, y_path: &Path, labels_path: &Path) -> Result<()> {
    write_rows(x_path, ds.samples.iter().map(|s| s.x.as_slice()))?;
    write_rows(y_path, ds.samples.iter().map(|s| s.y.as_slice()))?;
    let mut w = create(labels_path)?;
    let io = |e| Error::io(labels_path, e);
    writeln!(w, "{}", LABELS_HEADER.join(",")).map_err(io)?;
    for (i, s) in ds.samples.iter().enumerate() {
        let label = s.label.map_or(-1, |l| l as i64);
        writeln!(w, "{i},{label},{}", s.is_labeled as u8).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Additive Gaussian noise followed by inverted coordinate dropout.
pub fn augment(v: &[f64], noise_sigma: f64, drop_rate: f64, seed: RngSeed) -> Vec<f64> {
    augment_with(v, noise_sigma, drop_rate, &mut seed.rng())
}

pub fn augment_with(v: &[f64], noise_sigma: f64, drop_rate: f64, rng: &mut impl Rng) -> Vec<f64> {
    let keep = 1.0 - drop_rate;
    v.iter()
        .map(|&a| {
            let mut out = a;
            if noise_sigma > 0.0 {
                out += noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
            if drop_rate > 0.0 {
                out = if rng.random::<f64>() < drop_rate { 0.0 } else { out / keep };
            }
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{sample_covariance, sqrt_spd};

    pub(crate) fn spec(k_total: usize, k_old: usize, d: usize, n: usize) -> DatasetSpec {
        DatasetSpec {
            k_total,
            k_old,
            d,
            n_per_class: n,
            mean_separation: 1.0,
            r_range: (0.5, 0.5),
            labeled_fraction: 0.5,
            cov_condition: 4.0,
            seed: RngSeed(7),
        }
    }

    #[test]
    fn single_class() {
        let (ds, models) = generate(&spec(1, 1, 3, 10)).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(models.len(), 1);
        assert!(ds.samples.iter().all(|s| s.label == Some(0)));
        assert_eq!(ds.samples.iter().filter(|s| s.is_labeled).count(), 5);
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec(3, 4, 2, 5);
        assert!(matches!(generate(&s), Err(Error::InvalidSpec(_))));
        s.k_old = 2;
        s.r_range = (0.5, 1.0);
        assert!(generate(&s).is_err());
        s.r_range = (0.0, 0.0);
        s.labeled_fraction = 0.0;
        assert!(generate(&s).is_err());
    }

    /// Correlation of whitened coordinates `S_x^{-1/2}(x − μ_x)`,
    /// `S_y^{-1/2}(y − μ_y)` per class, averaged over coordinates.
    fn whitened_corr(ds: &MultimodalDataset, models: &[GaussianClassModel], class: usize) -> Vec<f64> {
        let m = &models[class];
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.samples[i].label == Some(class)).collect();
        let wx = sqrt_spd(&m.cov_x).unwrap().as_matrix().clone().try_inverse().unwrap();
        let wy = sqrt_spd(&m.cov_y).unwrap().as_matrix().clone().try_inverse().unwrap();
        let d = m.dim();
        let mut joint = Matrix::zeros(idx.len(), 2 * d);
        for (r, &i) in idx.iter().enumerate() {
            let s = &ds.samples[i];
            let cx = nalgebra::DVector::from_iterator(d, s.x.iter().zip(&m.mu_x).map(|(a, b)| a - b));
            let cy = nalgebra::DVector::from_iterator(d, s.y.iter().zip(&m.mu_y).map(|(a, b)| a - b));
            let (u, v) = (&wx * cx, &wy * cy);
            for j in 0..d {
                joint[(r, j)] = u[j];
                joint[(r, d + j)] = v[j];
            }
        }
        let c = sample_covariance(&joint);
        (0..d)
            .map(|j| c[(j, d + j)] / (c[(j, j)] * c[(d + j, d + j)]).sqrt())
            .collect()
    }

    #[test]
    fn acceptance_like_spec_has_target_correlation() {
        let mut s = spec(10, 5, 32, 200);
        s.r_range = (0.9, 0.9);
        let (ds, models) = generate(&s).unwrap();
        for class in 0..10 {
            let corr = whitened_corr(&ds, &models, class);
            let mean = corr.iter().sum::<f64>() / corr.len() as f64;
            assert!((mean - 0.9).abs() < 0.05, "class {class}: {mean}");
        }
    }

    #[test]
    fn zero_correlation_spec() {
        let mut s = spec(2, 1, 4, 5000);
        s.r_range = (0.0, 0.0);
        let (ds, models) = generate(&s).unwrap();
        for class in 0..2 {
            for c in whitened_corr(&ds, &models, class) {
                assert!(c.abs() < 0.05, "{c}");
            }
        }
    }

    #[test]
    fn split_stratifies_old_classes_only() {
        let (ds, _) = generate(&spec(4, 2, 2, 10)).unwrap();
        for class in 0..4 {
            let labelled = ds
                .samples
                .iter()
                .filter(|s| s.label == Some(class) && s.is_labeled)
                .count();
            assert_eq!(labelled, if class < 2 { 5 } else { 0 });
        }
        let all = split_gcd(ds.clone(), 1.0, RngSeed(0));
        assert_eq!(all.samples.iter().filter(|s| s.is_labeled).count(), 20);
        assert_eq!(split_gcd(ds.clone(), 0.5, RngSeed(3)), split_gcd(ds, 0.5, RngSeed(3)));
    }

    #[test]
    fn split_all_old_fully_labelled() {
        let (ds, _) = generate(&spec(3, 3, 2, 4)).unwrap();
        let ds = split_gcd(ds, 1.0, RngSeed(1));
        assert!(ds.samples.iter().all(|s| s.is_labeled));
    }

    #[test]
    fn food101_protocol_counts() {
        let ds = MultimodalDataset {
            samples: (0..101 * 600)
                .map(|i| PairedSample {
                    x: vec![],
                    y: vec![],
                    label: Some(i / 600),
                    is_labeled: false,
                })
                .collect(),
            num_old: 50,
            num_new: 51,
            dims: (0, 0),
        };
        let ds = split_gcd(ds, 0.5, RngSeed(0));
        let labelled = ds.samples.iter().filter(|s| s.is_labeled).count();
        assert_eq!(labelled, 15_000);
        assert_eq!(ds.len() - labelled, 45_600);
    }

    #[test]
    fn augment_identity_and_moments() {
        let v = vec![1.0, -2.0, 3.5];
        assert_eq!(augment(&v, 0.0, 0.0, RngSeed(1)), v);

        let mut rng = RngSeed(2).rng();
        let n = 100_000;
        let sigma = 0.3;
        let mut sq = 0.0;
        let mut mean = [0.0; 3];
        for _ in 0..n {
            let a = augment_with(&v, sigma, 0.0, &mut rng);
            sq += a.iter().zip(&v).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
        let per_coord = sq / (3 * n) as f64;
        assert!((per_coord - sigma * sigma).abs() < 0.02 * sigma * sigma);

        for _ in 0..n {
            let a = augment_with(&v, 0.1, 0.2, &mut rng);
            for (m, x) in mean.iter_mut().zip(a) {
                *m += x / n as f64;
            }
        }
        for (m, want) in mean.iter().zip(&v) {
            assert!((m - want).abs() < 0.03, "{m} vs {want}");
        }
    }
}
