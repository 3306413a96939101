//! Datasets for semi-supervised training.

pub mod idx;
pub mod split;
pub mod synthetic;

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::{FatError, Result};
use crate::matrix::DenseMatrix;
use crate::scalar::Scalar;

pub use idx::{encode_idx_images, encode_idx_labels, load_idx, load_mnist, parse_idx_images, parse_idx_labels, IdxImages};
pub use split::ssl_split;
pub use synthetic::{make_clusters, ClusterSpec, Layout};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet<T> {
    pub x: DenseMatrix<T>,
    pub y: Vec<usize>,
}

impl<T: Scalar> LabeledSet<T> {
    pub fn empty(dim: usize) -> Self {
        Self {
            x: DenseMatrix::zeros(0, dim),
            y: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Per-feature affine map from raw values: `x = (raw - shift) / scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn uniform(dim: usize, shift: f64, scale: f64) -> Self {
        Self {
            shift: vec![shift; dim],
            scale: vec![scale; dim],
        }
    }

    pub fn apply<T: Scalar>(&self, raw: &[f64]) -> Vec<T> {
        raw.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(&r, (&s, &c))| T::lit((r - s) / c))
            .collect()
    }

    pub fn invert<T: Scalar>(&self, x: &[T]) -> Vec<f64> {
        x.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(&v, (&s, &c))| v.to_f64_lossy() * c + s)
            .collect()
    }
}

/// Which source rows went where. Test data comes from a separate source and
/// is not tracked here.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitRecord {
    pub source_len: usize,
    pub labeled: Vec<usize>,
    pub validation: Vec<usize>,
    pub unlabeled: Vec<usize>,
    /// Rows dropped (e.g. by capping the unlabeled pool).
    pub discarded: Vec<usize>,
}

impl SplitRecord {
    /// Pairwise disjoint and exhaustive over `0..source_len`.
    pub fn is_partition(&self) -> bool {
        let mut seen = HashSet::with_capacity(self.source_len);
        let all = self
            .labeled
            .iter()
            .chain(&self.validation)
            .chain(&self.unlabeled)
            .chain(&self.discarded);
        for &i in all {
            if i >= self.source_len || !seen.insert(i) {
                return false;
            }
        }
        seen.len() == self.source_len
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SslDataset<T> {
    pub labeled: LabeledSet<T>,
    pub unlabeled: DenseMatrix<T>,
    /// Hidden labels of the unlabeled pool; diagnostics only, never trained on.
    pub unlabeled_truth: Option<Vec<usize>>,
    pub validation: LabeledSet<T>,
    pub test: LabeledSet<T>,
    pub class_count: usize,
    pub input_dim: usize,
    pub normalization: Normalization,
    pub record: SplitRecord,
    /// Human-readable provenance, e.g. `moons(n=1000, seed=3)`.
    pub descriptor: String,
}

impl<T: Scalar> SslDataset<T> {
    pub fn validate(&self) -> Result<()> {
        let k = self.class_count;
        if k < 2 {
            return Err(FatError::Config(format!("need at least two classes, got {k}")));
        }
        let sets = [
            ("labeled", &self.labeled),
            ("validation", &self.validation),
            ("test", &self.test),
        ];
        for (name, s) in sets {
            if s.x.rows() != s.y.len() || s.x.cols() != self.input_dim {
                return Err(FatError::shape("SslDataset split", name, format!("{}x{}", s.x.rows(), s.x.cols())));
            }
            if let Some(&bad) = s.y.iter().find(|&&y| y >= k) {
                return Err(FatError::Config(format!("{name} label {bad} outside 0..{k}")));
            }
        }
        if self.unlabeled.cols() != self.input_dim {
            return Err(FatError::shape("SslDataset unlabeled", self.input_dim, self.unlabeled.cols()));
        }
        if self.labeled.is_empty() {
            return Err(FatError::Config("labeled set is empty".into()));
        }
        if self.unlabeled.rows() == 0 {
            return Err(FatError::Config("unlabeled set is empty".into()));
        }
        if !self.record.is_partition() {
            return Err(FatError::Config("split record is not a partition of the source".into()));
        }
        Ok(())
    }

    /// Keeps the first `max` unlabeled rows and records the rest as discarded.
    pub fn cap_unlabeled(&mut self, max: usize) {
        let n = self.unlabeled.rows();
        if max >= n {
            return;
        }
        let keep: Vec<usize> = (0..max).collect();
        self.unlabeled = self.unlabeled.select_rows(&keep);
        if let Some(t) = &mut self.unlabeled_truth {
            t.truncate(max);
        }
        let dropped = self.record.unlabeled.split_off(max.min(self.record.unlabeled.len()));
        self.record.discarded.extend(dropped);
    }

    /// Largest pairwise distance between a few spread-out rows of the unlabeled
    /// pool; a cheap scale estimate for probe sizes.
    pub fn diameter_estimate(&self) -> f64 {
        let x = &self.unlabeled;
        let n = x.rows();
        if n < 2 {
            return 1.0;
        }
        let stride = (n / 64).max(1);
        let rows: Vec<usize> = (0..n).step_by(stride).take(64).collect();
        let mut best = 0.0f64;
        for (a, &i) in rows.iter().enumerate() {
            for &j in &rows[a + 1..] {
                let d: f64 = x
                    .row(i)
                    .iter()
                    .zip(x.row(j))
                    .map(|(&p, &q)| (p - q).to_f64_lossy().powi(2))
                    .sum::<f64>()
                    .sqrt();
                best = best.max(d);
            }
        }
        if best > 0.0 {
            best
        } else {
            1.0
        }
    }
}

/// `x1,x2,label` rows: labeled points with their class, unlabeled points
/// with `-1`.
pub fn to_csv_2d<T: Scalar>(data: &SslDataset<T>) -> Result<String> {
    if data.input_dim != 2 {
        return Err(FatError::Unsupported(format!(
            "CSV export is 2D only, dataset has {} features",
            data.input_dim
        )));
    }
    let mut out = String::from("x1,x2,label\n");
    for (row, &y) in data.labeled.x.iter_rows().zip(&data.labeled.y) {
        let _ = writeln!(out, "{},{},{}", row[0], row[1], y);
    }
    for row in data.unlabeled.iter_rows() {
        let _ = writeln!(out, "{},{},-1", row[0], row[1]);
    }
    Ok(out)
}
