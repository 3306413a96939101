//! Geometric oracles: closed-form adversarial directions for linear logistic
//! models, brute-force direction search in 2D, boundary distances, the normal
//! region check for piecewise-linear nets, and an invariance estimate.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{FatError, Result};
use crate::matrix::{dot, norm, DenseMatrix};
use crate::nn::{argmax, Activation, Layer, MlpModel, Mode};
use crate::scalar::Scalar;
use crate::vat::{adversarial_direction, adversarial_directions, kl_from_logits, VatHyper};

/// Two-class logistic regression `p(y = 1 | x) = σ(w·x + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLogistic<T> {
    pub w: Vec<T>,
    pub b: T,
}

impl<T: Scalar> LinearLogistic<T> {
    pub fn new(w: Vec<T>, b: T) -> Result<Self> {
        if w.is_empty() || w.iter().all(|&v| v == T::zero()) {
            return Err(FatError::Config("linear logistic weight must not be all zero".into()));
        }
        if !w.iter().all(|v| v.is_finite()) || !b.is_finite() {
            return Err(FatError::Domain("linear logistic parameters must be finite".into()));
        }
        Ok(Self { w, b })
    }

    /// `w·x + b`.
    pub fn margin(&self, x: &[T]) -> T {
        dot(&self.w, x) + self.b
    }

    /// The same classifier as a one-layer model with logits `(0, w·x + b)`.
    pub fn to_model(&self) -> MlpModel<T> {
        let weight = DenseMatrix::from_fn(self.w.len(), 2, |i, j| if j == 1 { self.w[i] } else { T::zero() });
        MlpModel::new(vec![Layer::dense(weight, vec![T::zero(), self.b], Activation::Identity)])
            .expect("single identity layer is always valid")
    }
}

/// `|w·x + b| / ‖w‖`.
pub fn boundary_distance_linear<T: Scalar>(m: &LinearLogistic<T>, x: &[T]) -> T {
    m.margin(x).abs() / norm(&m.w)
}

/// `-sign(w·x + b) · w / ‖w‖`: the unit direction towards the decision
/// boundary, which is the adversarial direction for small enough `epsilon`.
pub fn logistic_adv_direction_closed_form<T: Scalar>(m: &LinearLogistic<T>, x: &[T], epsilon: f64) -> Result<Vec<T>> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(FatError::Config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if x.len() != m.w.len() {
        return Err(FatError::shape("logistic_adv_direction_closed_form", m.w.len(), x.len()));
    }
    let s = m.margin(x);
    if s == T::zero() {
        return Err(FatError::Degenerate("input lies on the decision boundary".into()));
    }
    let scale = -s.signum() / norm(&m.w);
    Ok(m.w.iter().map(|&v| v * scale).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridDirection<T> {
    pub best_direction: Vec<T>,
    pub best_kl: T,
    pub best_index: usize,
}

/// Evaluates `KL(p(.|x) || p(.|x + ε u))` over `n_grid` evenly spaced unit
/// directions `u = (cos 2πj/n, sin 2πj/n)` and returns the maximizer (lowest
/// index on ties).
pub fn grid_direction_oracle<T: Scalar>(
    model: &MlpModel<T>,
    x: &[T],
    epsilon: f64,
    n_grid: usize,
) -> Result<GridDirection<T>> {
    if model.input_dim() != 2 || x.len() != 2 {
        return Err(FatError::Unsupported(format!(
            "grid direction oracle is 2D only, input has {} features",
            x.len()
        )));
    }
    if n_grid == 0 {
        return Err(FatError::Config("n_grid must be >= 1".into()));
    }
    let dirs: Vec<[T; 2]> = (0..n_grid)
        .map(|j| {
            let a = 2.0 * std::f64::consts::PI * j as f64 / n_grid as f64;
            [T::lit(a.cos()), T::lit(a.sin())]
        })
        .collect();
    let eps = T::lit(epsilon);
    let probes = DenseMatrix::from_fn(n_grid, 2, |j, k| x[k] + eps * dirs[j][k]);
    let clean = model.predict(&DenseMatrix::row_vector(x))?;
    let logits = model.predict(&probes)?;
    let mut best = (0, T::neg_infinity());
    for j in 0..n_grid {
        let kl = kl_from_logits(clean.row(0), logits.row(j));
        if kl > best.1 {
            best = (j, kl);
        }
    }
    Ok(GridDirection {
        best_direction: dirs[best.0].to_vec(),
        best_kl: best.1,
        best_index: best.0,
    })
}

/// How `prop2_check` obtains the adversarial direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DirectionSource {
    ClosedForm,
    /// Sign-corrected power iteration on [`LinearLogistic::to_model`]; sample
    /// `i` uses seed `seed + i` and the sample's own `ε` for the sign test.
    PowerIteration { xi: f64, power_iters: usize, seed: u64 },
}

/// Perturbation radius used by `prop2_check_with`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Radius {
    Fixed(f64),
    /// `ε_i = factor · boundary_distance(x_i)`.
    RelativeToDistance(f64),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoundaryReport {
    pub before: Vec<f64>,
    pub after: Vec<f64>,
    pub fraction_decreased: f64,
    /// Largest `1 - cos` between the used direction and the closed form
    /// (power-iteration source only).
    pub max_cosine_distance: Option<f64>,
    /// Fraction of probed points that are normal (ReLU region checks only).
    pub fraction_normal: Option<f64>,
}

impl BoundaryReport {
    /// `index,before,after,decreased` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,before,after,decreased\n");
        for (i, (b, a)) in self.before.iter().zip(&self.after).enumerate() {
            let _ = writeln!(out, "{i},{b},{a},{}", u8::from(a < b));
        }
        out
    }

    /// Index of the first sample whose distance did not decrease.
    pub fn first_counterexample(&self) -> Option<usize> {
        self.before.iter().zip(&self.after).position(|(b, a)| !(a < b))
    }
}

/// Checks that moving each sample by `ε` along the closed-form adversarial
/// direction strictly reduces its distance to the boundary.
pub fn prop2_check<T: Scalar>(m: &LinearLogistic<T>, samples: &DenseMatrix<T>, epsilon: f64) -> Result<BoundaryReport> {
    prop2_check_with(m, samples, Radius::Fixed(epsilon), DirectionSource::ClosedForm)
}

pub fn prop2_check_with<T: Scalar>(
    m: &LinearLogistic<T>,
    samples: &DenseMatrix<T>,
    radius: Radius,
    source: DirectionSource,
) -> Result<BoundaryReport> {
    if samples.cols() != m.w.len() {
        return Err(FatError::shape("prop2_check samples", m.w.len(), samples.cols()));
    }
    let model = m.to_model();
    let n = samples.rows();
    let mut report = BoundaryReport {
        before: Vec::with_capacity(n),
        after: Vec::with_capacity(n),
        ..Default::default()
    };
    let mut max_cos = 0.0f64;
    let mut decreased = 0usize;
    for (i, x) in samples.iter_rows().enumerate() {
        let d0 = boundary_distance_linear(m, x);
        let eps = match radius {
            Radius::Fixed(e) => e,
            Radius::RelativeToDistance(f) => f * d0.to_f64_lossy(),
        };
        let closed = logistic_adv_direction_closed_form(m, x, eps)?;
        let dir = match source {
            DirectionSource::ClosedForm => closed,
            DirectionSource::PowerIteration { xi, power_iters, seed } => {
                let hyper = VatHyper {
                    epsilon: eps,
                    xi,
                    power_iters,
                };
                let v = adversarial_direction(&model, x, &hyper, seed.wrapping_add(i as u64))?.direction;
                let cos = dot(&v, &closed).to_f64_lossy();
                max_cos = max_cos.max(1.0 - cos);
                v
            }
        };
        let e = T::lit(eps);
        let moved: Vec<T> = x.iter().zip(&dir).map(|(&a, &d)| a + e * d).collect();
        let d1 = boundary_distance_linear(m, &moved);
        if d1 < d0 {
            decreased += 1;
        }
        report.before.push(d0.to_f64_lossy());
        report.after.push(d1.to_f64_lossy());
    }
    report.fraction_decreased = if n == 0 { 0.0 } else { decreased as f64 / n as f64 };
    if matches!(source, DirectionSource::PowerIteration { .. }) {
        report.max_cosine_distance = Some(max_cos);
    }
    Ok(report)
}

/// `g(x) = g_1(x) - g_0(x)` for two-logit models, or `g_0(x)` for a single
/// output, with its input gradient.
fn binary_score<T: Scalar>(model: &MlpModel<T>, x: &[T]) -> Result<(T, Vec<T>)> {
    let k = model.output_dim();
    if k > 2 {
        return Err(FatError::Unsupported(format!("binary score needs 1 or 2 outputs, model has {k}")));
    }
    let fwd = model.forward(&DenseMatrix::row_vector(x), Mode::Eval)?;
    let l = fwd.logits.row(0);
    let (g, up) = if k == 2 {
        (l[1] - l[0], vec![-T::one(), T::one()])
    } else {
        (l[0], vec![T::one()])
    };
    let (_, gx) = model.backprop_partial(&fwd.cache, &DenseMatrix::row_vector(&up), false, true)?;
    Ok((g, gx.expect("input gradient requested").row(0).to_vec()))
}

/// Whether marching from `x` along `-sign(g(x)) ∇g(x)` reaches the decision
/// boundary (a sign change of `g`) within `max_ray`, probing `n_steps`
/// evenly spaced points. A vanishing gradient yields [`FatError::Degenerate`].
pub fn normal_region_check<T: Scalar>(model: &MlpModel<T>, x: &[T], max_ray: f64, n_steps: usize) -> Result<bool> {
    if n_steps == 0 || !(max_ray > 0.0) {
        return Err(FatError::Config("normal_region_check needs n_steps >= 1 and max_ray > 0".into()));
    }
    let (g0, grad) = binary_score(model, x)?;
    let gn = norm(&grad);
    if !(gn >= T::lit(crate::vat::DEGENERATE_GRAD_NORM)) {
        return Err(FatError::Degenerate("score gradient vanishes at x".into()));
    }
    if g0 == T::zero() {
        return Ok(true);
    }
    let s = -g0.signum() / gn;
    let dir: Vec<T> = grad.iter().map(|&v| v * s).collect();
    let pts = DenseMatrix::from_fn(n_steps, x.len(), |i, j| {
        let t = T::lit(max_ray * (i + 1) as f64 / n_steps as f64);
        x[j] + t * dir[j]
    });
    let logits = model.predict(&pts)?;
    let crossed = logits.iter_rows().any(|l| {
        let g = if l.len() == 2 { l[1] - l[0] } else { l[0] };
        g.signum() != g0.signum() || g == T::zero()
    });
    Ok(crossed)
}

fn predicted_class<T: Scalar>(model: &MlpModel<T>, x: &[T]) -> Result<usize> {
    Ok(argmax(model.predict(&DenseMatrix::row_vector(x))?.row(0)))
}

/// Signed offset `t` with the smallest `|t|` such that the predicted class at
/// `point + t·dir` differs from the class at `point`, searching both ways up
/// to `max_t` with `n_steps` coarse steps per side, then bisecting to
/// `tol`. `None` when the class never changes within range.
pub fn ray_boundary_crossing<T: Scalar>(
    model: &MlpModel<T>,
    point: &[T],
    dir: &[T],
    max_t: f64,
    n_steps: usize,
    tol: f64,
) -> Result<Option<T>> {
    if point.len() != dir.len() {
        return Err(FatError::shape("ray_boundary_crossing", point.len(), dir.len()));
    }
    if n_steps == 0 || !(max_t > 0.0) || !(tol > 0.0) {
        return Err(FatError::Config("ray search needs n_steps >= 1, max_t > 0, tol > 0".into()));
    }
    let at = |t: f64| -> Vec<T> { point.iter().zip(dir).map(|(&p, &d)| p + T::lit(t) * d).collect() };
    let c0 = predicted_class(model, point)?;
    // coarse march over both sides at once, nearest first
    let ts: Vec<f64> = (1..=n_steps)
        .flat_map(|i| {
            let t = max_t * i as f64 / n_steps as f64;
            [t, -t]
        })
        .collect();
    let probes = DenseMatrix::from_fn(ts.len(), point.len(), |i, j| point[j] + T::lit(ts[i]) * dir[j]);
    let logits = model.predict(&probes)?;
    let Some(hit) = (0..ts.len()).find(|&i| argmax(logits.row(i)) != c0) else {
        return Ok(None);
    };
    let mut outside = ts[hit];
    let mut inside = outside - outside.signum() * max_t / n_steps as f64;
    while (outside - inside).abs() > tol {
        let mid = 0.5 * (inside + outside);
        if predicted_class(model, &at(mid))? == c0 {
            inside = mid;
        } else {
            outside = mid;
        }
    }
    Ok(Some(T::lit(0.5 * (inside + outside))))
}

/// Euclidean distance from `point` to the nearest class change, estimated by
/// ray searches along `n_dirs` evenly spaced directions (2D only).
pub fn boundary_distance_2d<T: Scalar>(
    model: &MlpModel<T>,
    point: &[T],
    max_r: f64,
    n_dirs: usize,
    n_steps: usize,
) -> Result<Option<T>> {
    if point.len() != 2 {
        return Err(FatError::Unsupported(format!("boundary_distance_2d needs 2 features, got {}", point.len())));
    }
    let mut best: Option<T> = None;
    // opposite rays are covered by the two-sided search
    for j in 0..n_dirs.div_ceil(2) {
        let a = 2.0 * std::f64::consts::PI * j as f64 / n_dirs as f64;
        let dir = [T::lit(a.cos()), T::lit(a.sin())];
        if let Some(t) = ray_boundary_crossing(model, point, &dir, max_r, n_steps, 1e-12 * max_r)? {
            let d = t.abs();
            best = Some(best.map_or(d, |b| b.min(d)));
        }
    }
    Ok(best)
}

/// Uniform sample from the unit ball in `dim` dimensions.
fn unit_ball_point(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            let r = rng.random::<f64>().powf(1.0 / dim as f64);
            return v.into_iter().map(|x| x / n * r).collect();
        }
    }
}

/// Fraction of samples for which some probed perturbation of norm at most `ε`
/// changes the predicted class.
///
/// Sample `i` is probed at `ε·z_ij` for `n_probe` points `z_ij` drawn
/// uniformly from the unit ball (a function of `seed` and `i` only, so probe
/// sets for different `ε` are rescalings of each other), plus at `ε·v_i` for
/// the sign-corrected adversarial direction `v_i`. Locally constant samples
/// get no adversarial probe.
pub fn invariance_measure<T: Scalar>(
    model: &MlpModel<T>,
    samples: &DenseMatrix<T>,
    epsilon: f64,
    n_probe: usize,
    seed: u64,
) -> Result<f64> {
    if n_probe == 0 {
        return Err(FatError::Config("n_probe must be >= 1".into()));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(FatError::Config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let n = samples.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let d = samples.cols();
    let classes: Vec<usize> = model.predict(samples)?.iter_rows().map(argmax).collect();
    let adv = if epsilon > 0.0 && model.output_dim() >= 2 {
        let hyper = VatHyper {
            epsilon,
            ..VatHyper::default()
        };
        let seeds: Vec<u64> = (0..n as u64).map(|i| seed ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15)).collect();
        Some(adversarial_directions(model, samples, &hyper, &seeds)?)
    } else {
        None
    };
    let eps = T::lit(epsilon);
    let mut flipped = 0usize;
    for i in 0..n {
        let x = samples.row(i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((i as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)));
        let mut probes: Vec<Vec<T>> = (0..n_probe)
            .map(|_| unit_ball_point(d, &mut rng).into_iter().map(T::lit).collect())
            .collect();
        if let Some(Some(a)) = adv.as_ref().map(|b| &b.directions[i]) {
            probes.push(a.direction.clone());
        }
        let pts = DenseMatrix::from_fn(probes.len(), d, |j, k| x[k] + eps * probes[j][k]);
        if model.predict(&pts)?.iter_rows().any(|l| argmax(l) != classes[i]) {
            flipped += 1;
        }
    }
    Ok(flipped as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lin(w: &[f64], b: f64) -> LinearLogistic<f64> {
        LinearLogistic::new(w.to_vec(), b).unwrap()
    }

    #[test]
    fn distance_examples() {
        assert!((boundary_distance_linear(&lin(&[3.0, 4.0], 0.0), &[1.0, 1.0]) - 1.4).abs() < 1e-15);
        assert_eq!(boundary_distance_linear(&lin(&[1.0, 1.0], -2.0), &[1.0, 1.0]), 0.0);
        assert_eq!(boundary_distance_linear(&lin(&[1.0, 0.0], -2.0), &[5.0, 9.0]), 3.0);
    }

    #[test]
    fn closed_form_examples() {
        let m = lin(&[1.0, 0.0], 0.0);
        assert_eq!(logistic_adv_direction_closed_form(&m, &[2.0, 0.0], 0.1).unwrap(), vec![-1.0, 0.0]);
        assert_eq!(logistic_adv_direction_closed_form(&m, &[-2.0, 0.0], 0.1).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(
            logistic_adv_direction_closed_form(&m, &[0.0, 3.0], 0.1),
            Err(FatError::Degenerate(_))
        ));
        assert!(LinearLogistic::new(vec![0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn to_model_margin_is_logit_difference() {
        let m = lin(&[0.5, -2.0], 0.25);
        let l = m.to_model().predict(&DenseMatrix::row_vector(&[1.0, 3.0])).unwrap();
        assert!((l.get(0, 1) - l.get(0, 0) - m.margin(&[1.0, 3.0])).abs() < 1e-15);
    }

    #[test]
    fn grid_oracle_on_linear_model() {
        let m = lin(&[1.0, 1.0], -0.5);
        let g = grid_direction_oracle(&m.to_model(), &[1.0, 1.0], 0.1, 720).unwrap();
        let want = logistic_adv_direction_closed_form(&m, &[1.0, 1.0], 0.1).unwrap();
        let cos = g.best_direction[0] * want[0] + g.best_direction[1] * want[1];
        assert!(cos.acos() <= 2.0 * std::f64::consts::PI / 720.0 + 1e-12);
    }

    #[test]
    fn grid_oracle_constant_model_and_dims() {
        let c = MlpModel::new(vec![Layer::dense(DenseMatrix::zeros(2, 2), vec![1.0, 0.0], Activation::Identity)]).unwrap();
        assert_eq!(grid_direction_oracle(&c, &[0.3, 0.1], 1.0, 16).unwrap().best_kl, 0.0);
        let m3 = lin(&[1.0, 0.0, 0.0], 0.0).to_model();
        assert!(matches!(grid_direction_oracle(&m3, &[0.0; 3], 1.0, 16), Err(FatError::Unsupported(_))));
    }

    #[test]
    fn prop2_small_and_zero_epsilon() {
        let m = lin(&[2.0, -1.0], 0.3);
        let xs = DenseMatrix::from_rows(&[[1.0, 0.0], [-1.0, 2.0], [0.5, 4.0]]).unwrap();
        let min_d = xs
            .iter_rows()
            .map(|r| boundary_distance_linear(&m, r))
            .fold(f64::INFINITY, f64::min);
        assert_eq!(prop2_check(&m, &xs, 0.01 * min_d).unwrap().fraction_decreased, 1.0);
        let zero = prop2_check(&m, &xs, 0.0).unwrap();
        assert_eq!(zero.fraction_decreased, 0.0);
        assert_eq!(zero.before, zero.after);
        assert_eq!(zero.first_counterexample(), Some(0));
    }

    #[test]
    fn prop2_power_iteration_matches_closed_form() {
        let m = lin(&[0.3, 1.2], -0.4);
        let xs = DenseMatrix::from_rows(&[[3.0, 1.0], [-2.0, -1.0]]).unwrap();
        let src = DirectionSource::PowerIteration {
            xi: 1e-6,
            power_iters: 1,
            seed: 5,
        };
        let r = prop2_check_with(&m, &xs, Radius::RelativeToDistance(0.1), src).unwrap();
        assert_eq!(r.fraction_decreased, 1.0);
        assert!(r.max_cosine_distance.unwrap() < 1e-6);
        assert!(r.to_csv().starts_with("index,before,after,decreased\n0,"));
    }

    #[test]
    fn normal_regions_linear_and_boundaryless() {
        let m = lin(&[1.0, 2.0], -1.0).to_model();
        assert!(normal_region_check(&m, &[3.0, 3.0], 10.0, 100).unwrap());
        assert!(!normal_region_check(&m, &[3.0, 3.0], 1.0, 100).unwrap());
        // g = 5 + x1: positive for x1 > -5, gradient points away from no boundary in range
        let pos = lin(&[1.0, 0.0], 5.0).to_model();
        assert!(!normal_region_check(&pos, &[10.0, 0.0], 1.0, 50).unwrap());
        let flat = MlpModel::new(vec![Layer::dense(DenseMatrix::zeros(2, 2), vec![0.0, 1.0], Activation::Identity)]).unwrap();
        assert!(matches!(normal_region_check(&flat, &[0.0, 0.0], 1.0, 10), Err(FatError::Degenerate(_))));
    }

    #[test]
    fn ray_crossing_bisects_to_the_line() {
        let m = lin(&[1.0, 0.0], -1.0).to_model();
        let t = ray_boundary_crossing(&m, &[3.0, 0.5], &[1.0, 0.0], 5.0, 10, 1e-12).unwrap().unwrap();
        assert!((t + 2.0).abs() < 1e-9);
        assert!(ray_boundary_crossing(&m, &[3.0, 0.5], &[0.0, 1.0], 5.0, 10, 1e-12).unwrap().is_none());
        let d = boundary_distance_2d(&m, &[3.0, 0.5], 5.0, 360, 50).unwrap().unwrap();
        assert!((d - 2.0).abs() < 1e-9);
    }

    #[test]
    fn invariance_examples() {
        let c = MlpModel::new(vec![Layer::dense(DenseMatrix::zeros(2, 2), vec![1.0, 0.0], Activation::Identity)]).unwrap();
        let xs = DenseMatrix::from_rows(&[[0.0, 0.0], [1.0, 1.0]]).unwrap();
        assert_eq!(invariance_measure(&c, &xs, 1.0, 20, 0).unwrap(), 0.0);

        let m = lin(&[1.0, 0.0], 0.0).to_model();
        let far = DenseMatrix::from_rows(&[[2.0, 0.0], [-3.0, 1.0]]).unwrap();
        assert_eq!(invariance_measure(&m, &far, 1.0, 50, 0).unwrap(), 0.0);
        let near = DenseMatrix::from_rows(&[[0.5, 0.0]]).unwrap();
        assert_eq!(invariance_measure(&m, &near, 1.0, 1, 0).unwrap(), 1.0);
    }
}
