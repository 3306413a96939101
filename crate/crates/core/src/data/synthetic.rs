//! Two-dimensional toy problems that satisfy the cluster assumption.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{LabeledSet, Normalization, SplitRecord, SslDataset};
use crate::error::{FatError, Result};
use crate::matrix::DenseMatrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Two interleaving half circles; two classes only.
    TwoMoons,
    /// Concentric rings of radius 1, 2, ..., K.
    GaussianRing,
    /// Isotropic blobs centred on a circle of radius 3.
    GaussianBlobs,
}

impl Layout {
    pub fn name(self) -> &'static str {
        match self {
            Layout::TwoMoons => "two_moons",
            Layout::GaussianRing => "gaussian_ring",
            Layout::GaussianBlobs => "gaussian_blobs",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSpec {
    pub layout: Layout,
    pub classes: usize,
    pub n_unlabeled: usize,
    pub labeled_per_class: usize,
    /// Gaussian noise standard deviation.
    pub spread: f64,
    pub n_validation: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl ClusterSpec {
    /// Two moons with 1000 unlabeled points and 4 labels per class.
    pub fn moons(seed: u64) -> Self {
        Self {
            layout: Layout::TwoMoons,
            classes: 2,
            n_unlabeled: 1000,
            labeled_per_class: 4,
            spread: 0.1,
            n_validation: 200,
            n_test: 1000,
            seed,
        }
    }
}

fn sample_point(layout: Layout, classes: usize, class: usize, spread: f64, rng: &mut ChaCha8Rng) -> [f64; 2] {
    let mut noise = || -> f64 {
        let z: f64 = StandardNormal.sample(&mut *rng);
        z * spread
    };
    let (nx, ny) = (noise(), noise());
    match layout {
        Layout::TwoMoons => {
            let t = rng.random::<f64>() * PI;
            if class == 0 {
                [t.cos() + nx, t.sin() + ny]
            } else {
                [1.0 - t.cos() + nx, 0.5 - t.sin() + ny]
            }
        }
        Layout::GaussianRing => {
            let t = rng.random::<f64>() * 2.0 * PI;
            let r = (class + 1) as f64 + nx;
            [r * t.cos(), r * t.sin()]
        }
        Layout::GaussianBlobs => {
            let a = 2.0 * PI * class as f64 / classes as f64 + PI / 2.0;
            [3.0 * a.cos() + nx, 3.0 * a.sin() + ny]
        }
    }
}

/// `n` points split as evenly as possible over the classes, shuffled.
fn balanced_sample(
    spec: &ClusterSpec,
    n: usize,
    extra_per_class: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<[f64; 2]>, Vec<usize>) {
    let k = spec.classes;
    let mut labels = Vec::with_capacity(n + k * extra_per_class);
    for c in 0..k {
        let count = n / k + usize::from(c < n % k) + extra_per_class;
        labels.extend(std::iter::repeat_n(c, count));
    }
    labels.shuffle(rng);
    let points = labels
        .iter()
        .map(|&c| sample_point(spec.layout, k, c, spec.spread, rng))
        .collect();
    (points, labels)
}

fn to_matrix<T: Scalar>(points: &[[f64; 2]], idx: &[usize]) -> DenseMatrix<T> {
    DenseMatrix::from_fn(idx.len(), 2, |i, j| T::lit(points[idx[i]][j]))
}

fn labeled<T: Scalar>(points: &[[f64; 2]], labels: &[usize]) -> LabeledSet<T> {
    let all: Vec<usize> = (0..points.len()).collect();
    LabeledSet {
        x: to_matrix(points, &all),
        y: labels.to_vec(),
    }
}

/// Seeded 2D dataset. The training source holds `n_unlabeled` points plus
/// `labeled_per_class` extra points per class; the labeled set is drawn from it
/// per class and the remaining `n_unlabeled` points form the unlabeled pool.
/// Validation and test sets are drawn independently from the same distribution.
pub fn make_clusters<T: Scalar>(spec: &ClusterSpec) -> Result<SslDataset<T>> {
    let k = spec.classes;
    if k < 2 {
        return Err(FatError::Config(format!("need at least two classes, got {k}")));
    }
    if spec.layout == Layout::TwoMoons && k != 2 {
        return Err(FatError::Config("two_moons has exactly two classes".into()));
    }
    if spec.n_unlabeled == 0 || spec.labeled_per_class == 0 {
        return Err(FatError::Config("unlabeled and labeled counts must be positive".into()));
    }
    if !(spec.spread > 0.0 && spec.spread.is_finite()) {
        return Err(FatError::Config(format!("spread must be > 0, got {}", spec.spread)));
    }
    if spec.labeled_per_class * k > spec.n_unlabeled {
        return Err(FatError::Config(format!(
            "{} labeled points per class x {k} classes exceeds {} unlabeled points",
            spec.labeled_per_class, spec.n_unlabeled
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (points, labels) = balanced_sample(spec, spec.n_unlabeled, spec.labeled_per_class, &mut rng);
    let mut taken = vec![0usize; k];
    let mut lab_idx = Vec::new();
    let mut unl_idx = Vec::new();
    for (i, &c) in labels.iter().enumerate() {
        if taken[c] < spec.labeled_per_class {
            taken[c] += 1;
            lab_idx.push(i);
        } else {
            unl_idx.push(i);
        }
    }
    let (vpoints, vlabels) = balanced_sample(spec, spec.n_validation, 0, &mut rng);
    let (tpoints, tlabels) = balanced_sample(spec, spec.n_test, 0, &mut rng);

    let data = SslDataset {
        labeled: LabeledSet {
            x: to_matrix(&points, &lab_idx),
            y: lab_idx.iter().map(|&i| labels[i]).collect(),
        },
        unlabeled: to_matrix(&points, &unl_idx),
        unlabeled_truth: Some(unl_idx.iter().map(|&i| labels[i]).collect()),
        validation: labeled(&vpoints, &vlabels),
        test: labeled(&tpoints, &tlabels),
        class_count: k,
        input_dim: 2,
        normalization: Normalization::identity(2),
        record: SplitRecord {
            source_len: points.len(),
            labeled: lab_idx,
            validation: Vec::new(),
            unlabeled: unl_idx,
            discarded: Vec::new(),
        },
        descriptor: format!(
            "{}(classes={k}, unlabeled={}, labeled_per_class={}, spread={}, seed={})",
            spec.layout.name(),
            spec.n_unlabeled,
            spec.labeled_per_class,
            spec.spread,
            spec.seed
        ),
    };
    data.validate()?;
    Ok(data)
}
