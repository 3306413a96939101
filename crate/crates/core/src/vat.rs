//! Adversarial directions and the virtual adversarial consistency loss.
//!
//! The direction search works on a frozen snapshot `θ̂` of the classifier. It
//! estimates the dominant eigenvector of the Hessian of
//! `r -> KL(p(.|x; θ̂) || p(.|x + r; θ̂))` at `r = 0` by power iteration, where
//! each Hessian-vector product is a finite difference of the KL gradient
//! evaluated at `r = xi * d` (the gradient at `r = 0` vanishes). The eigenvector
//! is only defined up to sign, so the final step evaluates the KL at `x ± ε v`
//! and keeps the larger one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{FatError, Result};
use crate::matrix::{norm, DenseMatrix};
use crate::nn::{log_softmax, softmax, MlpModel, Mode, ParamGrads};
use crate::scalar::Scalar;

/// Gradients with a smaller Euclidean norm count as identically zero.
pub const DEGENERATE_GRAD_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VatHyper {
    /// Radius of the perturbation ball, in input units.
    pub epsilon: f64,
    /// Probe scale of the finite-difference Hessian-vector product.
    pub xi: f64,
    pub power_iters: usize,
}

impl Default for VatHyper {
    fn default() -> Self {
        Self {
            epsilon: 1.5,
            xi: 1e-6,
            power_iters: 1,
        }
    }
}

impl VatHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(FatError::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(FatError::Config(format!("xi must be > 0, got {}", self.xi)));
        }
        if self.power_iters < 1 {
            return Err(FatError::Config("power_iters must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvDirection<T> {
    /// Unit-norm perturbation direction.
    pub direction: Vec<T>,
    /// KL between the clean prediction and the prediction at `x + ε·direction`.
    pub kl_value: T,
    pub iterations_used: usize,
    /// Whether sign correction negated the power-iteration estimate.
    pub flipped: bool,
}

/// `KL(p || q)` with `0 ln 0 = 0`.
pub fn kl_divergence<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(FatError::shape("kl_divergence", p.len(), q.len()));
    }
    if let Some(bad) = q.iter().find(|&&v| !(v > T::zero())) {
        return Err(FatError::Domain(format!("q must be strictly positive, found {bad}")));
    }
    let mut kl = T::zero();
    for (&pk, &qk) in p.iter().zip(q) {
        if pk > T::zero() {
            kl += pk * (pk / qk).ln();
        }
    }
    Ok(kl.max(T::zero()))
}

/// `KL(softmax(a) || softmax(b))` computed in log space.
pub fn kl_from_logits<T: Scalar>(a: &[T], b: &[T]) -> T {
    let la = log_softmax(a);
    let lb = log_softmax(b);
    let kl: T = la
        .iter()
        .zip(&lb)
        .map(|(&x, &y)| if x == T::neg_infinity() { T::zero() } else { x.exp() * (x - y) })
        .sum();
    kl.max(T::zero())
}

/// Row `i` of the result is `x_i + scale_i * d_i`.
fn offset_rows<T: Scalar>(x: &DenseMatrix<T>, dirs: &DenseMatrix<T>, scale: &[T]) -> DenseMatrix<T> {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let s = scale[i];
        for (o, &d) in out.row_mut(i).iter_mut().zip(dirs.row(i)) {
            *o += s * d;
        }
    }
    out
}

fn random_unit<T: Scalar>(dim: usize, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| T::lit(x / n)).collect();
        }
    }
}

/// Result of a batched direction search.
#[derive(Clone, Debug)]
pub struct DirectionBatch<T> {
    /// Snapshot logits at the clean inputs.
    pub clean_logits: DenseMatrix<T>,
    /// `None` where the classifier is locally constant.
    pub directions: Vec<Option<AdvDirection<T>>>,
    pub(crate) input_dim: usize,
}

impl<T: Scalar> DirectionBatch<T> {
    /// Directions stacked as rows; degenerate rows are zero.
    pub fn direction_matrix(&self) -> DenseMatrix<T> {
        let mut m = DenseMatrix::zeros(self.directions.len(), self.input_dim);
        for (i, a) in self.directions.iter().enumerate() {
            if let Some(a) = a {
                m.row_mut(i).copy_from_slice(&a.direction);
            }
        }
        m
    }
}

/// Sign-corrected power-iteration directions for every row of `xs`. Row `i`
/// starts from a random unit vector seeded by `seeds[i]`, so each row's
/// result does not depend on the rest of the batch.
pub fn adversarial_directions<T: Scalar>(
    snapshot: &MlpModel<T>,
    xs: &DenseMatrix<T>,
    hyper: &VatHyper,
    seeds: &[u64],
) -> Result<DirectionBatch<T>> {
    hyper.validate()?;
    if snapshot.output_dim() < 2 {
        return Err(FatError::Config("direction search needs at least two classes".into()));
    }
    if xs.cols() != snapshot.input_dim() {
        return Err(FatError::shape("adversarial_directions input", snapshot.input_dim(), xs.cols()));
    }
    if seeds.len() != xs.rows() {
        return Err(FatError::shape("adversarial_directions seeds", xs.rows(), seeds.len()));
    }
    if !xs.is_finite() {
        return Err(FatError::Domain("inputs must be finite".into()));
    }
    let n = xs.rows();
    let dim = xs.cols();
    let clean_logits = snapshot.predict(xs)?;
    let clean_probs: Vec<Vec<T>> = clean_logits.iter_rows().map(softmax).collect();

    let mut dirs = DenseMatrix::zeros(n, dim);
    for (i, &s) in seeds.iter().enumerate() {
        dirs.row_mut(i).copy_from_slice(&random_unit::<T>(dim, s));
    }
    let mut alive = vec![true; n];
    let xi = vec![T::lit(hyper.xi); n];
    for _ in 0..hyper.power_iters {
        let probe = offset_rows(xs, &dirs, &xi);
        let fwd = snapshot.forward(&probe, Mode::Eval)?;
        // d/db KL(p || softmax(b)) = softmax(b) - p
        let mut g_logits = fwd.logits.clone();
        for i in 0..n {
            let q = softmax(fwd.logits.row(i));
            for (k, gk) in g_logits.row_mut(i).iter_mut().enumerate() {
                *gk = q[k] - clean_probs[i][k];
            }
        }
        let (_, grad_x) = snapshot.backprop_partial(&fwd.cache, &g_logits, false, true)?;
        let grad_x = grad_x.expect("input gradient requested");
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            let g = grad_x.row(i);
            let gn = norm(g);
            if !(gn >= T::lit(DEGENERATE_GRAD_NORM)) {
                alive[i] = false;
                continue;
            }
            for (d, &gj) in dirs.row_mut(i).iter_mut().zip(g) {
                *d = gj / gn;
            }
        }
    }

    let eps = T::lit(hyper.epsilon);
    let plus = offset_rows(xs, &dirs, &vec![eps; n]);
    let minus = offset_rows(xs, &dirs, &vec![-eps; n]);
    let lp = snapshot.predict(&plus)?;
    let lm = snapshot.predict(&minus)?;
    let directions = (0..n)
        .map(|i| {
            if !alive[i] {
                return None;
            }
            let kl_plus = kl_from_logits(clean_logits.row(i), lp.row(i));
            let kl_minus = kl_from_logits(clean_logits.row(i), lm.row(i));
            let flipped = kl_minus > kl_plus;
            let mut direction = dirs.row(i).to_vec();
            if flipped {
                direction.iter_mut().for_each(|d| *d = -*d);
            }
            Some(AdvDirection {
                direction,
                kl_value: if flipped { kl_minus } else { kl_plus },
                iterations_used: hyper.power_iters,
                flipped,
            })
        })
        .collect();
    Ok(DirectionBatch {
        clean_logits,
        directions,
        input_dim: dim,
    })
}

/// Adversarial direction at a single input. A locally constant classifier
/// yields [`FatError::Degenerate`].
pub fn adversarial_direction<T: Scalar>(
    snapshot: &MlpModel<T>,
    x: &[T],
    hyper: &VatHyper,
    seed: u64,
) -> Result<AdvDirection<T>> {
    let batch = adversarial_directions(snapshot, &DenseMatrix::row_vector(x), hyper, &[seed])?;
    batch
        .directions
        .into_iter()
        .next()
        .flatten()
        .ok_or_else(|| FatError::Degenerate("KL gradient vanishes at this input".into()))
}

/// Value and θ-gradient of the consistency loss.
#[derive(Clone, Debug)]
pub struct VatLoss<T> {
    /// Weighted KL between snapshot and current predictions.
    pub loss: T,
    pub grads: ParamGrads<T>,
    /// Weighted `-Σ p̂ ln q`; equals `loss` plus `snapshot_entropy`.
    pub cross_entropy: T,
    /// Weighted entropy of the snapshot prediction (constant in θ).
    pub snapshot_entropy: T,
}

/// Weighted consistency loss `Σ_i w_i KL(softmax(snapshot_logits_i) || p(.|x_adv_i; θ))`.
/// The snapshot side is a constant; the gradient flows only through `model`.
pub fn vat_loss_batch<T: Scalar>(
    snapshot_logits: &DenseMatrix<T>,
    model: &MlpModel<T>,
    x_adv: &DenseMatrix<T>,
    weights: &[T],
) -> Result<VatLoss<T>> {
    if snapshot_logits.shape() != (x_adv.rows(), model.output_dim()) || weights.len() != x_adv.rows() {
        return Err(FatError::shape(
            "vat_loss_batch",
            format!("{} rows of {} logits and weights", x_adv.rows(), model.output_dim()),
            format!(
                "{}x{} logits, {} weights",
                snapshot_logits.rows(),
                snapshot_logits.cols(),
                weights.len()
            ),
        ));
    }
    let fwd = model.forward(x_adv, Mode::Eval)?;
    let mut g = fwd.logits.clone();
    let mut loss = T::zero();
    let mut ce = T::zero();
    let mut ent = T::zero();
    for i in 0..x_adv.rows() {
        let w = weights[i];
        let lp = log_softmax(snapshot_logits.row(i));
        let lq = log_softmax(fwd.logits.row(i));
        let row = g.row_mut(i);
        if w == T::zero() {
            row.iter_mut().for_each(|v| *v = T::zero());
            continue;
        }
        let mut ce_i = T::zero();
        let mut ent_i = T::zero();
        for k in 0..row.len() {
            let p = lp[k].exp();
            if p > T::zero() {
                ent_i -= p * lp[k];
            }
            ce_i -= p * lq[k];
            row[k] = w * (lq[k].exp() - p);
        }
        ce += w * ce_i;
        ent += w * ent_i;
        loss += w * kl_from_logits(snapshot_logits.row(i), fwd.logits.row(i));
    }
    let (grads, _) = model.backprop_partial(&fwd.cache, &g, true, false)?;
    Ok(VatLoss {
        loss,
        grads: grads.expect("parameter gradient requested"),
        cross_entropy: ce,
        snapshot_entropy: ent,
    })
}

/// Single-sample consistency loss `KL(p(.|x; θ̂) || p(.|x + r_adv; θ))`.
pub fn vat_loss<T: Scalar>(
    snapshot: &MlpModel<T>,
    model: &MlpModel<T>,
    x: &[T],
    r_adv: &[T],
) -> Result<VatLoss<T>> {
    if r_adv.len() != x.len() {
        return Err(FatError::shape("vat_loss perturbation", x.len(), r_adv.len()));
    }
    let clean = snapshot.predict(&DenseMatrix::row_vector(x))?;
    let shifted: Vec<T> = x.iter().zip(r_adv).map(|(&a, &b)| a + b).collect();
    vat_loss_batch(&clean, model, &DenseMatrix::row_vector(&shifted), &[T::one()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{he_init, Activation, Layer};

    fn logistic(w: &[f64], b: f64) -> MlpModel<f64> {
        let weight = DenseMatrix::from_fn(w.len(), 2, |i, j| if j == 1 { w[i] } else { 0.0 });
        MlpModel::new(vec![Layer::dense(weight, vec![0.0, b], Activation::Identity)]).unwrap()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let v = kl_divergence(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!((v - 0.5 * (25.0f64 / 9.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_errors() {
        assert!(matches!(kl_divergence(&[1.0], &[0.5, 0.5]), Err(FatError::Shape { .. })));
        assert!(matches!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]), Err(FatError::Domain(_))));
    }

    #[test]
    fn kl_from_logits_matches_probabilities() {
        let a = [0.3f64, -1.2, 2.0];
        let b = [1.0, 0.5, -0.7];
        let direct = kl_divergence(&softmax(&a), &softmax(&b)).unwrap();
        assert!((kl_from_logits(&a, &b) - direct).abs() < 1e-14);
    }

    #[test]
    fn linear_logistic_direction_points_at_boundary() {
        let m = logistic(&[1.0, 0.0], 0.0);
        let hyper = VatHyper {
            epsilon: 0.1,
            ..Default::default()
        };
        let a = adversarial_direction(&m, &[2.0, 0.0], &hyper, 3).unwrap();
        assert!((a.direction[0] + 1.0).abs() < 1e-12 && a.direction[1].abs() < 1e-12);
        let a = adversarial_direction(&m, &[-2.0, 0.0], &hyper, 3).unwrap();
        assert!((a.direction[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_classifier_is_degenerate() {
        let weight = DenseMatrix::zeros(2, 2);
        let m = MlpModel::new(vec![Layer::dense(weight, vec![1.0, 0.0], Activation::Identity)]).unwrap();
        let r = adversarial_direction(&m, &[0.3, 0.4], &VatHyper::default(), 1);
        assert!(matches!(r, Err(FatError::Degenerate(_))));
    }

    #[test]
    fn rejects_single_class_models_and_bad_hyper() {
        let m: MlpModel<f64> = he_init(&[2, 3, 1], Activation::Relu, 0).unwrap();
        assert!(adversarial_direction(&m, &[0.0, 0.0], &VatHyper::default(), 0).is_err());
        let m: MlpModel<f64> = he_init(&[2, 3, 2], Activation::Relu, 0).unwrap();
        let bad = VatHyper {
            power_iters: 0,
            ..Default::default()
        };
        assert!(adversarial_direction(&m, &[0.0, 0.0], &bad, 0).is_err());
    }

    #[test]
    fn batch_rows_match_single_calls() {
        let m: MlpModel<f64> = he_init(&[3, 8, 3], Activation::Relu, 5).unwrap();
        let xs = DenseMatrix::from_fn(4, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.4 - 0.8);
        let seeds = [11, 12, 13, 14];
        let hyper = VatHyper {
            epsilon: 0.3,
            ..Default::default()
        };
        let batch = adversarial_directions(&m, &xs, &hyper, &seeds).unwrap();
        for i in 0..4 {
            let single = adversarial_direction(&m, xs.row(i), &hyper, seeds[i]).unwrap();
            let b = batch.directions[i].as_ref().unwrap();
            for (x, y) in single.direction.iter().zip(&b.direction) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vat_loss_zero_at_snapshot() {
        let m: MlpModel<f64> = he_init(&[3, 6, 3], Activation::Relu, 2).unwrap();
        let l = vat_loss(&m, &m, &[0.1, 0.2, -0.3], &[0.0; 3]).unwrap();
        assert!(l.loss.abs() < 1e-15);
        assert!(l.grads.max_abs() < 1e-15);
        assert!((l.cross_entropy - l.snapshot_entropy - l.loss).abs() < 1e-14);
    }

    #[test]
    fn vat_loss_matches_independent_kl() {
        let snap: MlpModel<f64> = he_init(&[3, 6, 3], Activation::Relu, 2).unwrap();
        let model: MlpModel<f64> = he_init(&[3, 6, 3], Activation::Relu, 8).unwrap();
        let x = [0.1, 0.2, -0.3];
        let r = [0.05, -0.1, 0.2];
        let l = vat_loss(&snap, &model, &x, &r).unwrap();
        let p = softmax(snap.predict(&DenseMatrix::row_vector(&x)).unwrap().row(0));
        let xr: Vec<f64> = x.iter().zip(&r).map(|(a, b)| a + b).collect();
        let q = softmax(model.predict(&DenseMatrix::row_vector(&xr)).unwrap().row(0));
        assert!((l.loss - kl_divergence(&p, &q).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn direction_is_insensitive_to_probe_scale() {
        let model = he_init::<f64>(&[3, 6, 4], Activation::Identity, 9).unwrap();
        let xs = DenseMatrix::from_rows(&[[0.3, -0.7, 1.1], [2.0, 0.1, -0.4]]).unwrap();
        let at = |xi: f64| {
            let h = VatHyper { epsilon: 0.5, xi, power_iters: 1 };
            adversarial_directions(&model, &xs, &h, &[4, 5]).unwrap().direction_matrix()
        };
        // the finite-difference bias is O(xi); at the default scale it is far below 1e-6
        let (a, b) = (at(1e-6), at(1e-7));
        assert!(a.max_abs_diff(&b) < 1e-6, "{}", a.max_abs_diff(&b));
    }
}
