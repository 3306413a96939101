//! Bad samples placed along adversarial directions, and the two losses that
//! treat them as an implicit extra class.
//!
//! Both losses use the `K + 1` class model whose extra "fake" logit is pinned
//! at zero: `q_k = exp(g_k) / (1 + Σ exp(g_k'))`.

use std::fmt::Write as _;

use crate::data::Normalization;
use crate::error::{FatError, Result};
use crate::matrix::DenseMatrix;
use crate::nn::{logsumexp, softmax, MlpModel};
use crate::scalar::Scalar;
use crate::vat::{adversarial_directions, DirectionBatch, VatHyper};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BadGenHyper {
    /// Displacement radius `C`.
    pub capital_c: f64,
    /// Candidates whose snapshot confidence exceeds `1 - alpha` are dropped.
    pub alpha: f64,
}

impl Default for BadGenHyper {
    fn default() -> Self {
        Self {
            capital_c: 2.0,
            alpha: 0.01,
        }
    }
}

impl BadGenHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.capital_c > 0.0 && self.capital_c.is_finite()) {
            return Err(FatError::Config(format!("capital_c must be > 0, got {}", self.capital_c)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(FatError::Config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        Ok(())
    }

    /// Whether a candidate with this snapshot confidence is kept.
    pub fn keeps<T: Scalar>(&self, confidence: T) -> bool {
        confidence <= T::lit(1.0 - self.alpha)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exclusion {
    /// The snapshot is too confident at the candidate.
    Confident,
    /// No adversarial direction exists at the origin.
    Degenerate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BadSample<T> {
    pub origin: Vec<T>,
    /// `origin + C * direction`; equal to `origin` for degenerate candidates.
    pub point: Vec<T>,
    /// Largest snapshot class probability at `point`.
    pub confidence: T,
    pub kept: bool,
    pub excluded: Option<Exclusion>,
}

/// Places one candidate per row of `xs` along the already computed directions
/// and applies the confidence filter with the same snapshot.
pub fn bad_samples_from_directions<T: Scalar>(
    snapshot: &MlpModel<T>,
    xs: &DenseMatrix<T>,
    dirs: &DirectionBatch<T>,
    hyper: &BadGenHyper,
) -> Result<Vec<BadSample<T>>> {
    hyper.validate()?;
    if dirs.directions.len() != xs.rows() {
        return Err(FatError::shape("bad_samples_from_directions", xs.rows(), dirs.directions.len()));
    }
    let c = T::lit(hyper.capital_c);
    let mut points = xs.clone();
    for (i, d) in dirs.directions.iter().enumerate() {
        if let Some(d) = d {
            for (p, &v) in points.row_mut(i).iter_mut().zip(&d.direction) {
                *p += c * v;
            }
        }
    }
    let logits = snapshot.predict(&points)?;
    Ok((0..xs.rows())
        .map(|i| {
            let confidence = softmax(logits.row(i))
                .into_iter()
                .fold(T::zero(), T::max);
            let excluded = if dirs.directions[i].is_none() {
                Some(Exclusion::Degenerate)
            } else if !hyper.keeps(confidence) {
                Some(Exclusion::Confident)
            } else {
                None
            };
            BadSample {
                origin: xs.row(i).to_vec(),
                point: points.row(i).to_vec(),
                confidence,
                kept: excluded.is_none(),
                excluded,
            }
        })
        .collect())
}

pub fn generate_bad_samples<T: Scalar>(
    snapshot: &MlpModel<T>,
    xs: &DenseMatrix<T>,
    vat_hyper: &VatHyper,
    hyper: &BadGenHyper,
    seeds: &[u64],
) -> Result<Vec<BadSample<T>>> {
    let dirs = adversarial_directions(snapshot, xs, vat_hyper, seeds)?;
    bad_samples_from_directions(snapshot, xs, &dirs, hyper)
}

pub fn generate_bad_sample<T: Scalar>(
    snapshot: &MlpModel<T>,
    x: &[T],
    vat_hyper: &VatHyper,
    hyper: &BadGenHyper,
    seed: u64,
) -> Result<BadSample<T>> {
    let mut v = generate_bad_samples(snapshot, &DenseMatrix::row_vector(x), vat_hyper, hyper, &[seed])?;
    Ok(v.remove(0))
}

/// One CSV row per candidate: `origin_0..`, `point_0..`, `confidence`, `kept`.
pub fn bad_samples_csv<T: Scalar>(samples: &[BadSample<T>]) -> String {
    let d = samples.first().map_or(0, |s| s.origin.len());
    let mut out = String::new();
    let cols: Vec<String> = (0..d)
        .map(|j| format!("origin_{j}"))
        .chain((0..d).map(|j| format!("point_{j}")))
        .chain(["confidence".to_string(), "kept".to_string()])
        .collect();
    out.push_str(&cols.join(","));
    out.push('\n');
    for s in samples {
        for v in s.origin.iter().chain(&s.point) {
            let _ = write!(out, "{},", v.to_f64_lossy());
        }
        let _ = writeln!(out, "{},{}", s.confidence.to_f64_lossy(), u8::from(s.kept));
    }
    out
}

/// The first 100 kept samples as a 10x10 grid of square grayscale tiles in
/// binary PGM (`P5`). Points are mapped back to raw units with
/// `normalization` and clamped to `0..=255`; missing tiles stay black.
pub fn bad_samples_pgm<T: Scalar>(samples: &[BadSample<T>], normalization: &Normalization) -> Result<Vec<u8>> {
    const GRID: usize = 10;
    let d = normalization.shift.len();
    let side = (d as f64).sqrt().round() as usize;
    if side * side != d || d == 0 {
        return Err(FatError::Unsupported(format!("a {d}-dimensional input is not a square image")));
    }
    let width = GRID * side;
    let mut pixels = vec![0u8; width * width];
    for (t, s) in samples.iter().filter(|s| s.kept).take(GRID * GRID).enumerate() {
        if s.point.len() != d {
            return Err(FatError::shape("bad sample dimension", d, s.point.len()));
        }
        let raw = normalization.invert(&s.point);
        let (ty, tx) = (t / GRID, t % GRID);
        for (k, v) in raw.iter().enumerate() {
            let (y, x) = (ty * side + k / side, tx * side + k % side);
            pixels[y * width + x] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    let mut out = format!("P5\n{width} {width}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

/// Log-probabilities of the real classes and of the pinned fake class.
fn extended_log_probs<T: Scalar>(g: &[T]) -> (Vec<T>, T) {
    let mut ext = Vec::with_capacity(g.len() + 1);
    ext.push(T::zero());
    ext.extend_from_slice(g);
    let lse = logsumexp(&ext);
    (g.iter().map(|&x| x - lse).collect(), -lse)
}

/// Entropy of the real-class part of the `K + 1` distribution, and its
/// gradient with respect to `g`.
pub fn l_true<T: Scalar>(g: &[T]) -> (T, Vec<T>) {
    let (logq, log_fake) = extended_log_probs(g);
    let q: Vec<T> = logq.iter().map(|&l| l.exp()).collect();
    let value: T = q
        .iter()
        .zip(&logq)
        .map(|(&qk, &lk)| if qk > T::zero() { -qk * lk } else { T::zero() })
        .sum();
    let q_fake = log_fake.exp();
    // d/dg_j = q_j * (-ln q_j - value - q_fake)
    let grad = q
        .iter()
        .zip(&logq)
        .map(|(&qj, &lj)| if qj > T::zero() { qj * (-lj - value - q_fake) } else { T::zero() })
        .collect();
    (value, grad)
}

/// Negative log-probability of the fake class, `ln(1 + Σ exp(g_k))`, and its
/// gradient (the real-class probabilities).
pub fn l_fake<T: Scalar>(g: &[T]) -> (T, Vec<T>) {
    let (logq, log_fake) = extended_log_probs(g);
    (-log_fake, logq.into_iter().map(|l| l.exp()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Layer};
    use crate::vat::AdvDirection;

    fn logistic(w: &[f64], b: f64) -> MlpModel<f64> {
        let weight = DenseMatrix::from_fn(w.len(), 2, |i, j| if j == 1 { w[i] } else { 0.0 });
        MlpModel::new(vec![Layer::dense(weight, vec![0.0, b], Activation::Identity)]).unwrap()
    }

    fn fixed_direction(d: Vec<f64>) -> DirectionBatch<f64> {
        let batch = adversarial_directions(
            &logistic(&[1.0, 0.0], 0.0),
            &DenseMatrix::row_vector(&[1.0, 0.0]),
            &VatHyper::default(),
            &[0],
        )
        .unwrap();
        DirectionBatch {
            directions: vec![Some(AdvDirection {
                direction: d,
                kl_value: 0.0,
                iterations_used: 1,
                flipped: false,
            })],
            ..batch
        }
    }

    #[test]
    fn point_is_origin_plus_c_direction() {
        let m = logistic(&[1.0, 1.0], 0.0);
        let dirs = fixed_direction(vec![0.6, 0.8]);
        let hyper = BadGenHyper {
            capital_c: 2.0,
            alpha: 0.01,
        };
        let s = bad_samples_from_directions(&m, &DenseMatrix::row_vector(&[0.0, 0.0]), &dirs, &hyper).unwrap();
        assert!((s[0].point[0] - 1.2).abs() < 1e-15 && (s[0].point[1] - 1.6).abs() < 1e-15);
    }

    #[test]
    fn alpha_one_excludes_everything() {
        let m = logistic(&[1.0, -0.5], 0.1);
        let xs = DenseMatrix::from_fn(20, 2, |i, j| (i as f64 - 10.0) * 0.3 + j as f64);
        let seeds: Vec<u64> = (0..20).collect();
        let hyper = BadGenHyper {
            capital_c: 1.0,
            alpha: 1.0,
        };
        let out = generate_bad_samples(&m, &xs, &VatHyper::default(), &hyper, &seeds).unwrap();
        assert!(out.iter().all(|s| !s.kept));
    }

    #[test]
    fn threshold_is_inclusive_at_one_minus_alpha() {
        let h = BadGenHyper {
            capital_c: 1.0,
            alpha: 0.01,
        };
        assert!(!h.keeps(0.995f64));
        assert!(h.keeps(0.7f64));
        assert!(h.keeps(1.0f64 - 0.01));
    }

    #[test]
    fn degenerate_origin_is_not_kept() {
        let weight = DenseMatrix::zeros(2, 2);
        let m = MlpModel::new(vec![Layer::dense(weight, vec![0.0, 0.0], Activation::Identity)]).unwrap();
        let s = generate_bad_sample(&m, &[1.0, 2.0], &VatHyper::default(), &BadGenHyper::default(), 4).unwrap();
        assert!(!s.kept);
        assert_eq!(s.excluded, Some(Exclusion::Degenerate));
        assert_eq!(s.point, s.origin);
    }

    #[test]
    fn hyper_validation() {
        assert!(BadGenHyper { capital_c: 0.0, alpha: 0.5 }.validate().is_err());
        assert!(BadGenHyper { capital_c: 1.0, alpha: 0.0 }.validate().is_err());
        assert!(BadGenHyper { capital_c: 1.0, alpha: 1.5 }.validate().is_err());
        assert!(BadGenHyper { capital_c: 1.0, alpha: 1.0 }.validate().is_ok());
    }

    #[test]
    fn loss_values_at_zero_logits() {
        let (t, _) = l_true(&[0.0f64; 10]);
        assert!((t - 10.0 / 11.0 * 11f64.ln()).abs() < 1e-12);
        let (f, g) = l_fake(&[0.0f64; 10]);
        assert!((f - 11f64.ln()).abs() < 1e-12);
        assert!(g.iter().all(|&q| (q - 1.0 / 11.0).abs() < 1e-15));
    }

    #[test]
    fn loss_asymptotes() {
        let mut g = vec![0.0f64; 10];
        g[0] = 50.0;
        assert!(l_true(&g).0 < 1e-18);
        let low = vec![-50.0f64; 10];
        assert!(l_true(&low).0 < 1e-18);
        assert!(l_fake(&low).0 < 1e-20);
        let mut spike = vec![-50.0f64; 10];
        spike[3] = 30.0;
        assert!((l_fake(&spike).0 - 30.0).abs() < 1e-12);
        assert!(l_fake(&[1000.0f64, 0.0]).0.is_finite());
    }

    fn sample(origin: Vec<f64>, point: Vec<f64>, kept: bool) -> BadSample<f64> {
        BadSample {
            origin,
            point,
            confidence: 0.5,
            kept,
            excluded: (!kept).then_some(Exclusion::Confident),
        }
    }

    #[test]
    fn csv_dump_columns() {
        let csv = bad_samples_csv(&[sample(vec![1.0, 2.0], vec![1.5, 2.5], true)]);
        assert_eq!(csv, "origin_0,origin_1,point_0,point_1,confidence,kept\n1,2,1.5,2.5,0.5,1\n");
    }

    #[test]
    fn pgm_grid_places_kept_tiles() {
        let norm = Normalization::uniform(4, 0.0, 255.0);
        let s = vec![
            sample(vec![0.0; 4], vec![0.0; 4], false),
            sample(vec![0.0; 4], vec![1.0, 0.5, 2.0, -1.0], true),
        ];
        let pgm = bad_samples_pgm(&s, &norm).unwrap();
        let header = b"P5\n20 20\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        let px = &pgm[header.len()..];
        assert_eq!(px.len(), 400);
        // first tile holds the kept sample, clamped; the rest is black
        assert_eq!((px[0], px[1], px[20], px[21]), (255, 128, 255, 0));
        assert_eq!(px.iter().map(|&v| v as u32).sum::<u32>(), 255 + 128 + 255);
        assert!(bad_samples_pgm(&s, &Normalization::identity(3)).is_err());
    }
}
