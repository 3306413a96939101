//! The training objective and loop.
//!
//! One optimizer step reads the model once as the frozen snapshot θ̂ (direction
//! search, bad-sample filter, first argument of the KL) and once as the
//! differentiable θ; both are the same values because every term is computed
//! from `&MlpModel` before the Adam update touches it. The step objective is
//!
//! ```text
//! CE(labeled) + mean VAT(unlabeled) + λ · (mean L^true(unlabeled) + mean L^fake(kept bad samples))
//! ```
//!
//! with the VAT term dropped for the supervised baseline and the bad-sample
//! terms dropped for plain VAT.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::badgen::{bad_samples_from_directions, l_fake, l_true, BadGenHyper};
use crate::data::SslDataset;
use crate::error::{FatError, Result};
use crate::matrix::DenseMatrix;
use crate::nn::{
    adam_step, argmax, checkpoint, he_init_with, log_softmax, softmax, Activation, AdamConfig, AdamState,
    ForwardCache, MlpModel, Mode, ParamGrads,
};
use crate::scalar::Scalar;
use crate::vat::{adversarial_directions, vat_loss_batch, VatHyper};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Labeled cross-entropy only.
    Supervised,
    /// Cross-entropy plus the consistency loss.
    Vat,
    /// VAT plus the bad-sample losses.
    Fat,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Supervised => "supervised",
            Method::Vat => "vat",
            Method::Fat => "fat",
        }
    }
}

impl FromStr for Method {
    type Err = FatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Method::Supervised),
            "vat" => Ok(Method::Vat),
            "fat" => Ok(Method::Fat),
            other => Err(FatError::Config(format!(
                "unknown method {other:?} (expected supervised, vat or fat)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FatConfig {
    pub method: Method,
    pub vat: VatHyper,
    pub badgen: BadGenHyper,
    pub lambda_max: f64,
    /// Increase of λ per completed epoch.
    pub lambda_step: f64,
    pub epochs: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Hidden layer widths; input and output widths come from the dataset.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub batch_norm: bool,
    /// Record real elapsed time in the metrics; off keeps them reproducible.
    pub record_wall_clock: bool,
}

impl Default for FatConfig {
    fn default() -> Self {
        Self {
            method: Method::Fat,
            vat: VatHyper::default(),
            badgen: BadGenHyper::default(),
            lambda_max: 1.0,
            lambda_step: 0.1,
            epochs: 10,
            labeled_batch: 32,
            unlabeled_batch: 100,
            adam: AdamConfig::default(),
            seed: 0,
            hidden: vec![100, 100],
            activation: Activation::Relu,
            batch_norm: false,
            record_wall_clock: false,
        }
    }
}

impl FatConfig {
    pub fn validate(&self) -> Result<()> {
        self.vat.validate()?;
        self.badgen.validate()?;
        let finite_nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(FatError::Config(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        finite_nonneg("lambda_max", self.lambda_max)?;
        finite_nonneg("lambda_step", self.lambda_step)?;
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 {
            return Err(FatError::Config("batch sizes must be >= 1".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) || !(a.eps > 0.0) {
            return Err(FatError::Config("Adam lr and eps must be > 0".into()));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(FatError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.hidden.contains(&0) {
            return Err(FatError::Config("hidden widths must be >= 1".into()));
        }
        if let Activation::LeakyRelu(s) = self.activation {
            if !s.is_finite() {
                return Err(FatError::Config("leaky ReLU slope must be finite".into()));
            }
        }
        Ok(())
    }

    /// Layer widths for a dataset with `input_dim` features and `classes` classes.
    pub fn layer_dims(&self, input_dim: usize, classes: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(classes);
        dims
    }
}

/// `min(lambda_max, epoch · lambda_step)`, rounded to 12 decimal places so
/// decimal steps such as 0.1 land exactly on decimal values.
pub fn warmup_lambda(epoch: usize, cfg: &FatConfig) -> f64 {
    let raw = epoch as f64 * cfg.lambda_step;
    let snapped = (raw * 1e12).round() / 1e12;
    let v = if snapped.is_finite() { snapped } else { raw };
    v.min(cfg.lambda_max)
}

/// Fraction of rows whose argmax logit matches the label.
pub fn evaluate<T: Scalar>(model: &MlpModel<T>, x: &DenseMatrix<T>, y: &[usize]) -> Result<f64> {
    if x.rows() != y.len() {
        return Err(FatError::shape("evaluate", x.rows(), y.len()));
    }
    if y.is_empty() {
        return Err(FatError::Undefined("accuracy of an empty set".into()));
    }
    let logits = model.predict(x)?;
    let correct = logits.iter_rows().zip(y).filter(|(l, &c)| argmax(l) == c).count();
    Ok(correct as f64 / y.len() as f64)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the random starting vector for row `row` of global step `step`.
pub fn direction_seed(run_seed: u64, step: u64, row: usize) -> u64 {
    splitmix(splitmix(splitmix(run_seed ^ 0xD1CE) ^ step) ^ row as u64)
}

/// One minibatch worth of inputs for a step.
#[derive(Clone, Copy, Debug)]
pub struct StepBatch<'a, T> {
    pub labeled_x: &'a DenseMatrix<T>,
    pub labeled_y: &'a [usize],
    pub unlabeled_x: &'a DenseMatrix<T>,
    /// One direction-search seed per unlabeled row.
    pub seeds: &'a [u64],
}

/// A loss value and its parameter gradient.
#[derive(Clone, Debug)]
pub struct Term<T> {
    pub value: T,
    pub grads: ParamGrads<T>,
}

/// Every term of one step, computed from the same (unchanged) model.
#[derive(Clone, Debug)]
pub struct StepTerms<T> {
    pub lambda: T,
    pub ce: Term<T>,
    pub vat: Option<Term<T>>,
    pub l_true: Option<Term<T>>,
    pub l_fake: Option<Term<T>>,
    /// `ce + vat + λ (l_true + l_fake)`.
    pub loss: T,
    pub grads: ParamGrads<T>,
    pub bad_candidates: usize,
    pub bad_kept: usize,
    /// Unlabeled rows with no adversarial direction (zero VAT weight).
    pub degenerate: usize,
    labeled_cache: ForwardCache<T>,
}

/// Mean cross-entropy over the labeled batch and its gradient, plus the
/// train-mode cache used for running statistics.
pub fn cross_entropy<T: Scalar>(
    model: &MlpModel<T>,
    x: &DenseMatrix<T>,
    y: &[usize],
) -> Result<(Term<T>, ForwardCache<T>)> {
    let k = model.output_dim();
    if let Some(&bad) = y.iter().find(|&&c| c >= k) {
        return Err(FatError::Config(format!("label {bad} outside 0..{k}")));
    }
    let fwd = model.forward(x, Mode::Train)?;
    let n = T::lit(y.len() as f64);
    let mut g = fwd.logits.clone();
    let mut loss = T::zero();
    for (i, &c) in y.iter().enumerate() {
        let row = fwd.logits.row(i);
        loss -= log_softmax(row)[c];
        let p = softmax(row);
        for (j, gj) in g.row_mut(i).iter_mut().enumerate() {
            let target = if j == c { T::one() } else { T::zero() };
            *gj = (p[j] - target) / n;
        }
    }
    let (grads, _) = model.backprop_partial(&fwd.cache, &g, true, false)?;
    Ok((
        Term {
            value: loss / n,
            grads: grads.expect("parameter gradient requested"),
        },
        fwd.cache,
    ))
}

/// Mean of a per-row logit loss over `x`, differentiated through `model`.
pub fn mean_logit_loss<T: Scalar>(
    model: &MlpModel<T>,
    x: &DenseMatrix<T>,
    mode: Mode,
    f: fn(&[T]) -> (T, Vec<T>),
) -> Result<Term<T>> {
    if x.rows() == 0 {
        return Ok(Term {
            value: T::zero(),
            grads: ParamGrads::zeros_like(model),
        });
    }
    let fwd = model.forward(x, mode)?;
    let n = T::lit(x.rows() as f64);
    let mut g = fwd.logits.clone();
    let mut total = T::zero();
    for i in 0..x.rows() {
        let (v, grad) = f(fwd.logits.row(i));
        total += v;
        for (gj, dj) in g.row_mut(i).iter_mut().zip(grad) {
            *gj = dj / n;
        }
    }
    let (grads, _) = model.backprop_partial(&fwd.cache, &g, true, false)?;
    Ok(Term {
        value: total / n,
        grads: grads.expect("parameter gradient requested"),
    })
}

/// Computes every loss term of one step without modifying `model`.
pub fn step_terms<T: Scalar>(
    model: &MlpModel<T>,
    batch: StepBatch<'_, T>,
    lambda: f64,
    cfg: &FatConfig,
) -> Result<StepTerms<T>> {
    if batch.labeled_x.rows() == 0 || batch.labeled_x.rows() != batch.labeled_y.len() {
        return Err(FatError::shape(
            "step labeled batch",
            "non-empty rows matching labels",
            format!("{} rows, {} labels", batch.labeled_x.rows(), batch.labeled_y.len()),
        ));
    }
    let (ce, labeled_cache) = cross_entropy(model, batch.labeled_x, batch.labeled_y)?;
    let lam = T::lit(lambda);
    let mut out = StepTerms {
        lambda: lam,
        loss: ce.value,
        grads: ce.grads.clone(),
        ce,
        vat: None,
        l_true: None,
        l_fake: None,
        bad_candidates: 0,
        bad_kept: 0,
        degenerate: 0,
        labeled_cache,
    };
    if cfg.method == Method::Supervised {
        return Ok(out);
    }

    let xu = batch.unlabeled_x;
    let n = xu.rows();
    if n == 0 {
        return Err(FatError::Config("unlabeled batch is empty".into()));
    }
    let dirs = adversarial_directions(model, xu, &cfg.vat, batch.seeds)?;
    let eps = T::lit(cfg.vat.epsilon);
    let mut x_adv = xu.clone();
    let mut weights = vec![T::zero(); n];
    let w = T::one() / T::lit(n as f64);
    for (i, d) in dirs.directions.iter().enumerate() {
        match d {
            Some(d) => {
                weights[i] = w;
                for (x, &v) in x_adv.row_mut(i).iter_mut().zip(&d.direction) {
                    *x += eps * v;
                }
            }
            None => out.degenerate += 1,
        }
    }
    let vat = vat_loss_batch(&dirs.clean_logits, model, &x_adv, &weights)?;
    out.loss += vat.loss;
    out.grads.add_scaled(T::one(), &vat.grads)?;
    out.vat = Some(Term {
        value: vat.loss,
        grads: vat.grads,
    });
    if cfg.method == Method::Vat {
        return Ok(out);
    }

    let t = mean_logit_loss(model, xu, Mode::Train, l_true)?;
    let bad = bad_samples_from_directions(model, xu, &dirs, &cfg.badgen)?;
    let kept: Vec<usize> = (0..n).filter(|&i| bad[i].kept).collect();
    let points = DenseMatrix::from_fn(kept.len(), xu.cols(), |r, c| bad[kept[r]].point[c]);
    let f = mean_logit_loss(model, &points, Mode::Eval, l_fake)?;
    out.bad_candidates = n;
    out.bad_kept = kept.len();
    out.loss += lam * (t.value + f.value);
    out.grads.add_scaled(lam, &t.grads)?;
    out.grads.add_scaled(lam, &f.grads)?;
    out.l_true = Some(t);
    out.l_fake = Some(f);
    Ok(out)
}

/// Losses of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub ce: f64,
    pub vat: f64,
    pub l_true: f64,
    pub l_fake: f64,
    pub bad_candidates: usize,
    pub bad_kept: usize,
}

/// One optimizer step on the full objective. `epoch` and `step` only label a
/// divergence error.
pub fn fat_step<T: Scalar>(
    model: &mut MlpModel<T>,
    state: &mut AdamState<T>,
    batch: StepBatch<'_, T>,
    lambda: f64,
    cfg: &FatConfig,
    (epoch, step): (usize, usize),
) -> Result<StepLosses> {
    let terms = step_terms(model, batch, lambda, cfg)?;
    let val = |t: &Option<Term<T>>| t.as_ref().map_or(0.0, |t| t.value.to_f64_lossy());
    let losses = StepLosses {
        total: terms.loss.to_f64_lossy(),
        ce: terms.ce.value.to_f64_lossy(),
        vat: val(&terms.vat),
        l_true: val(&terms.l_true),
        l_fake: val(&terms.l_fake),
        bad_candidates: terms.bad_candidates,
        bad_kept: terms.bad_kept,
    };
    let finite = [losses.total, losses.ce, losses.vat, losses.l_true, losses.l_fake]
        .iter()
        .all(|v| v.is_finite());
    if !finite || !terms.grads.is_finite() {
        return Err(FatError::Divergence {
            epoch,
            step,
            detail: format!(
                "non-finite loss or gradient (ce {}, vat {}, true {}, fake {})",
                losses.ce, losses.vat, losses.l_true, losses.l_fake
            ),
            snapshot: checkpoint::encode(model),
        });
    }
    if model.layers().iter().any(|l| l.norm.is_some()) {
        model.update_running_stats(&terms.labeled_cache)?;
    }
    adam_step(model, &terms.grads, state)?;
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// Zero-based epoch index; `lambda` is the weight used during it.
    pub epoch: usize,
    pub lambda: f64,
    pub loss_ce: f64,
    pub loss_vat: f64,
    pub loss_true: f64,
    pub loss_fake: f64,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    /// Kept bad samples over candidates for this epoch (0 without candidates).
    pub bad_kept_frac: f64,
    /// Elapsed seconds, or 0 unless wall-clock recording is on.
    pub seconds: f64,
    /// Accuracy on the unlabeled pool's hidden labels (diagnostic only).
    pub unlabeled_acc: Option<f64>,
}

pub const METRICS_HEADER: &str =
    "epoch,lambda,loss_ce,loss_vat,loss_true,loss_fake,val_acc,test_acc,bad_kept_frac,seconds";

/// The metrics table; missing accuracies are empty fields.
pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            m.epoch,
            m.lambda,
            m.loss_ce,
            m.loss_vat,
            m.loss_true,
            m.loss_fake,
            opt(m.val_acc),
            opt(m.test_acc),
            m.bad_kept_frac,
            m.seconds
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Model after the epoch with the best validation accuracy (earliest on
    /// ties); the last model when there is no validation set.
    pub best: MlpModel<T>,
    pub best_epoch: Option<usize>,
    pub last: MlpModel<T>,
    pub metrics: Vec<EpochMetrics>,
    /// Real elapsed seconds per epoch, whatever `record_wall_clock` says.
    pub elapsed: Vec<f64>,
}

/// Draws labeled minibatches from a reshuffled cyclic order.
struct LabeledCycler {
    order: Vec<usize>,
    pos: usize,
}

impl LabeledCycler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn next(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Trains a freshly initialized model.
pub fn train<T: Scalar>(cfg: &FatConfig, data: &SslDataset<T>) -> Result<TrainOutcome<T>> {
    train_with(cfg, data, |_, _| Ok(()))
}

/// [`train`] with a callback after every epoch, given the model at the end of
/// the epoch and that epoch's metrics.
pub fn train_with<T: Scalar>(
    cfg: &FatConfig,
    data: &SslDataset<T>,
    mut on_epoch: impl FnMut(&MlpModel<T>, &EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    data.validate()?;
    let dims = cfg.layer_dims(data.input_dim, data.class_count);
    let model: MlpModel<T> = he_init_with(&dims, cfg.activation, cfg.batch_norm, cfg.seed)?;
    train_from(cfg, data, model, &mut on_epoch)
}

/// Trains starting from `model`.
pub fn train_from<T: Scalar>(
    cfg: &FatConfig,
    data: &SslDataset<T>,
    mut model: MlpModel<T>,
    on_epoch: &mut dyn FnMut(&MlpModel<T>, &EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    data.validate()?;
    if model.input_dim() != data.input_dim || model.output_dim() != data.class_count {
        return Err(FatError::shape(
            "train model",
            format!("{} -> {}", data.input_dim, data.class_count),
            format!("{} -> {}", model.input_dim(), model.output_dim()),
        ));
    }
    let mut state = AdamState::new(&model, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ 0x5EED));
    let mut cycler = LabeledCycler::new(data.labeled.len(), &mut rng);
    let n_unl = data.unlabeled.rows();
    let mut order: Vec<usize> = (0..n_unl).collect();

    let mut best: Option<(f64, usize, MlpModel<T>)> = None;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut elapsed = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0u64;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lambda = warmup_lambda(epoch, cfg);
        order.shuffle(&mut rng);
        let mut sums = StepLosses::default();
        let mut steps = 0usize;
        for (s, chunk) in order.chunks(cfg.unlabeled_batch).enumerate() {
            let xu = data.unlabeled.select_rows(chunk);
            let lab = cycler.next(cfg.labeled_batch, &mut rng);
            let xl = data.labeled.x.select_rows(&lab);
            let yl: Vec<usize> = lab.iter().map(|&i| data.labeled.y[i]).collect();
            let seeds: Vec<u64> = (0..chunk.len())
                .map(|r| direction_seed(cfg.seed, global_step, r))
                .collect();
            let batch = StepBatch {
                labeled_x: &xl,
                labeled_y: &yl,
                unlabeled_x: &xu,
                seeds: &seeds,
            };
            let l = fat_step(&mut model, &mut state, batch, lambda, cfg, (epoch, s))?;
            sums.ce += l.ce;
            sums.vat += l.vat;
            sums.l_true += l.l_true;
            sums.l_fake += l.l_fake;
            sums.bad_candidates += l.bad_candidates;
            sums.bad_kept += l.bad_kept;
            steps += 1;
            global_step += 1;
        }
        let mean = |v: f64| if steps == 0 { 0.0 } else { v / steps as f64 };
        let acc = |set: &crate::data::LabeledSet<T>| -> Result<Option<f64>> {
            if set.is_empty() {
                Ok(None)
            } else {
                evaluate(&model, &set.x, &set.y).map(Some)
            }
        };
        let val_acc = acc(&data.validation)?;
        let test_acc = acc(&data.test)?;
        let unlabeled_acc = match &data.unlabeled_truth {
            Some(t) => Some(evaluate(&model, &data.unlabeled, t)?),
            None => None,
        };
        let secs = started.elapsed().as_secs_f64();
        let m = EpochMetrics {
            epoch,
            lambda,
            loss_ce: mean(sums.ce),
            loss_vat: mean(sums.vat),
            loss_true: mean(sums.l_true),
            loss_fake: mean(sums.l_fake),
            val_acc,
            test_acc,
            bad_kept_frac: if sums.bad_candidates == 0 {
                0.0
            } else {
                sums.bad_kept as f64 / sums.bad_candidates as f64
            },
            seconds: if cfg.record_wall_clock { secs } else { 0.0 },
            unlabeled_acc,
        };
        if let Some(v) = val_acc {
            if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                best = Some((v, epoch, model.clone()));
            }
        }
        on_epoch(&model, &m)?;
        metrics.push(m);
        elapsed.push(secs);
    }
    let (best_model, best_epoch) = match best {
        Some((_, e, m)) => (m, Some(e)),
        None => (model.clone(), None),
    };
    Ok(TrainOutcome {
        best: best_model,
        best_epoch,
        last: model,
        metrics,
        elapsed,
    })
}
