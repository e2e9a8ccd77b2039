//! Datasets: synthetic mixtures inside a planted low-dimensional subspace, and
//! a plain CSV format for small tabular data.
//!
//! Synthetic samples are drawn in `k` latent coordinates and mapped into `ℝ^d`
//! through a random orthonormal `k x d` basis, so the input subspace of the
//! first layer is known exactly. Labels depend only on the latent
//! coordinates.
//!
//! CSV layout: UTF-8, no header, comma separated. Column 0 is the integer
//! label; columns `1..=d` are the features.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{read_file, write_file, Error, Result};
use crate::linalg::{self, Matrix};
use crate::rng::{self, Rng};

/// Standard deviation of each class cluster in latent coordinates.
const CLASS_SPREAD: f64 = 0.5;
/// Standard deviation of class means in latent coordinates.
const MEAN_SCALE: f64 = 2.0;
/// Class means closer than this are redrawn.
const MIN_MEAN_SEPARATION: f64 = 3.0;
const MAX_MEAN_DRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub ambient_dim: usize,
    pub intrinsic_rank: usize,
    pub classes: usize,
    pub samples_per_class: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.intrinsic_rank == 0 || self.intrinsic_rank > self.ambient_dim {
            return Err(Error::Range(format!(
                "intrinsic rank {} must be in [1, ambient dim {}]",
                self.intrinsic_rank, self.ambient_dim
            )));
        }
        if self.classes < 2 {
            return Err(Error::Range(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Range("samples_per_class must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Range(format!("noise sigma {} must be finite and >= 0", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Feature matrix with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(x: Matrix, labels: Vec<usize>) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::Format("dataset has no samples".into()));
        }
        if labels.len() != x.rows() {
            return Err(Error::Dimension(format!(
                "{} labels for {} samples",
                labels.len(),
                x.rows()
            )));
        }
        Ok(Self { x, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// One more than the largest label present.
    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Samples a dataset from `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    generate_with_basis(spec).map(|(data, _)| data)
}

/// Like [`generate`], also returning the planted `k x d` orthonormal basis.
///
/// Draw order from the seeded generator: basis, class means, then samples
/// class by class (latent offset followed by ambient noise).
pub fn generate_with_basis(spec: &SyntheticSpec) -> Result<(Dataset, Matrix)> {
    spec.validate()?;
    let (d, k) = (spec.ambient_dim, spec.intrinsic_rank);
    let mut rng = rng::seeded(spec.seed);
    let basis = planted_basis(k, d, &mut rng)?;
    let means = class_means(spec.classes, k, &mut rng)?;

    let n = spec.classes * spec.samples_per_class;
    let mut latent = Matrix::zeros(n, k);
    let mut noise = Matrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.classes {
        for s in 0..spec.samples_per_class {
            let row = c * spec.samples_per_class + s;
            let offset = rng::gaussian_matrix(1, k, CLASS_SPREAD, &mut rng);
            for j in 0..k {
                latent[(row, j)] = means[(c, j)] + offset[(0, j)];
            }
            if spec.noise_sigma > 0.0 {
                noise.row_mut(row).copy_from_slice(rng::gaussian_matrix(1, d, spec.noise_sigma, &mut rng).data());
            }
            labels.push(c);
        }
    }
    let mut x = latent.matmul(&basis)?;
    if spec.noise_sigma > 0.0 {
        x = x.add(&noise)?;
    }
    Ok((Dataset::new(x, labels)?, basis))
}

fn planted_basis(k: usize, d: usize, rng: &mut Rng) -> Result<Matrix> {
    let mut rows = rng::gaussian_matrix(k, d, 1.0, rng).to_rows();
    linalg::orthonormalize(&mut rows);
    Matrix::from_rows(&rows)
}

fn class_means(classes: usize, k: usize, rng: &mut Rng) -> Result<Matrix> {
    // With k = 1 many classes cannot all be well separated; keep the best draw.
    let mut best: Option<(f64, Matrix)> = None;
    for _ in 0..MAX_MEAN_DRAWS {
        let means = rng::gaussian_matrix(classes, k, MEAN_SCALE, rng);
        let sep = min_pairwise_distance(&means);
        if sep >= MIN_MEAN_SEPARATION {
            return Ok(means);
        }
        if best.as_ref().is_none_or(|(b, _)| sep > *b) {
            best = Some((sep, means));
        }
    }
    match best {
        Some((sep, means)) if sep > 0.0 => Ok(means),
        _ => Err(Error::Degenerate("could not draw distinct class means".into())),
    }
}

fn min_pairwise_distance(means: &Matrix) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..means.rows() {
        for j in (i + 1)..means.rows() {
            let d: f64 = means.row(i).iter().zip(means.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.min(d.sqrt());
        }
    }
    best
}

/// Deterministic shuffled split into `(train, validation)`.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Range(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let n = dataset.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Range(format!(
            "train fraction {train_fraction} of {n} samples leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed));
    Ok((dataset.subset(&order[..n_train]), dataset.subset(&order[n_train..])))
}

pub fn to_csv_string(dataset: &Dataset) -> String {
    let mut out = String::new();
    for (row, label) in dataset.x.row_iter().zip(&dataset.labels) {
        write!(out, "{label}").expect("writing to a String");
        for v in row {
            write!(out, ",{v:.16e}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

pub fn write_csv(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    write_file(path.as_ref(), &to_csv_string(dataset))?;
    Ok(())
}

pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut width: Option<usize> = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() < 2 {
            return Err(Error::Format(format!("line {line}: need a label and at least one feature")));
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Format(format!(
                    "line {line}: {} columns, expected {w}",
                    record.len()
                )))
            }
            _ => {}
        }
        let label = record[0].parse::<usize>().map_err(|e| Error::Parse {
            line,
            message: format!("label {:?}: {e}", &record[0]),
        })?;
        labels.push(label);
        for field in record.iter().skip(1) {
            let v = field.parse::<f64>().map_err(|e| Error::Parse {
                line,
                message: format!("value {field:?}: {e}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, message: format!("non-finite value {field:?}") });
            }
            data.push(v);
        }
    }
    let Some(width) = width else {
        return Err(Error::Format("no rows".into()));
    };
    let x = Matrix::new(labels.len(), width - 1, data)?;
    Dataset::new(x, labels)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_csv(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subspace::Spectrum;
    use crate::transform::numerical_rank;

    fn spec(d: usize, k: usize, noise: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            ambient_dim: d,
            intrinsic_rank: k,
            classes: 4,
            samples_per_class: 50,
            noise_sigma: noise,
            seed,
        }
    }

    #[test]
    fn noise_free_data_has_planted_rank() {
        let (data, basis) = generate_with_basis(&spec(16, 3, 0.0, 1)).unwrap();
        assert_eq!(data.len(), 200);
        assert_eq!(numerical_rank(&data.x).unwrap(), 3);
        // Eigenvalue oracle: exactly three nonzero Gram eigenvalues.
        let sp = Spectrum::of_gram(&data.x.gram()).unwrap();
        assert_eq!(sp.rank(), 3);
        // Projection onto the planted basis loses nothing.
        let p = basis.transpose().matmul(&basis).unwrap();
        let residual = data.x.sub(&data.x.matmul(&p).unwrap()).unwrap().frobenius_sq();
        assert!(residual < 1e-10 * data.x.frobenius_sq());
    }

    #[test]
    fn full_rank_when_k_equals_d() {
        let data = generate(&spec(6, 6, 0.0, 2)).unwrap();
        let sp = Spectrum::of_gram(&data.x.gram()).unwrap();
        assert_eq!(sp.rank(), 6);
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(10, 4, 0.1, 3);
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        assert_ne!(generate(&s).unwrap(), generate(&SyntheticSpec { seed: 4, ..s }).unwrap());
    }

    #[test]
    fn class_means_are_distinct() {
        let mut rng = rng::seeded(5);
        let means = class_means(6, 3, &mut rng).unwrap();
        assert!(min_pairwise_distance(&means) >= MIN_MEAN_SEPARATION);
    }

    #[test]
    fn invalid_specs_rejected() {
        for bad in [
            SyntheticSpec { intrinsic_rank: 0, ..spec(4, 1, 0.0, 0) },
            SyntheticSpec { intrinsic_rank: 5, ..spec(4, 1, 0.0, 0) },
            SyntheticSpec { classes: 1, ..spec(4, 1, 0.0, 0) },
            SyntheticSpec { noise_sigma: -1.0, ..spec(4, 1, 0.0, 0) },
        ] {
            assert!(matches!(generate(&bad), Err(Error::Range(_))), "{bad:?}");
        }
    }

    #[test]
    fn csv_examples() {
        let d = parse_csv("1,0.5,0.25\n0,1.0,2.0").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.dim(), 2);
        assert_eq!(d.labels, vec![1, 0]);
        assert_eq!(d.x.row(0), &[0.5, 0.25]);

        assert!(matches!(parse_csv(""), Err(Error::Format(_))));
        assert!(matches!(parse_csv("1,0.5\n0,1.0,2.0"), Err(Error::Format(_))));
        match parse_csv("1,0.5\n0,abc\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_csv("x,0.5\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let data = generate(&spec(7, 3, 0.3, 9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_csv(&path, &data).unwrap();
        assert_eq!(load_csv(&path).unwrap(), data);
    }

    #[test]
    fn split_examples() {
        let x = Matrix::from_fn(10, 2, |i, j| (i * 2 + j) as f64);
        let data = Dataset::new(x, (0..10).map(|i| i % 2).collect()).unwrap();
        let (a, b) = split(&data, 0.5, 7).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        let mut rows: Vec<Vec<f64>> = a.x.to_rows();
        rows.extend(b.x.to_rows());
        rows.sort_by(|p, q| p[0].total_cmp(&q[0]));
        assert_eq!(rows, data.x.to_rows());
        assert_eq!(split(&data, 0.5, 7).unwrap(), (a, b));
        assert!(matches!(split(&data, 0.01, 7), Err(Error::Range(_))));
        assert!(matches!(split(&data, 1.0, 7), Err(Error::Range(_))));
    }
}
