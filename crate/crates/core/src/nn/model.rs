use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{FatError, Result};
use crate::matrix::DenseMatrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::lit(slope)
                }
            }
            Activation::Identity => x,
        }
    }

    /// Derivative at `x`; kinks take the left-hand slope.
    #[inline]
    fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::lit(slope)
                }
            }
            Activation::Identity => T::one(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for normalization layers.
    Train,
    /// Frozen running statistics.
    Eval,
}

/// Per-feature batch normalization applied between the affine map and the
/// activation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: vec![T::one(); width],
            beta: vec![T::zero(); width],
            running_mean: vec![T::zero(); width],
            running_var: vec![T::one(); width],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    /// `fan_in x fan_out`; a row of inputs times this gives the pre-activation.
    pub weight: DenseMatrix<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
    pub norm: Option<BatchNorm<T>>,
}

impl<T: Scalar> Layer<T> {
    pub fn dense(weight: DenseMatrix<T>, bias: Vec<T>, activation: Activation) -> Self {
        Self {
            weight,
            bias,
            activation,
            norm: None,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    fn param_slices(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = vec![self.weight.as_slice(), &self.bias];
        if let Some(n) = &self.norm {
            v.push(&n.gamma);
            v.push(&n.beta);
        }
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = vec![self.weight.as_mut_slice(), &mut self.bias];
        if let Some(n) = &mut self.norm {
            v.push(&mut n.gamma);
            v.push(&mut n.beta);
        }
        v
    }
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Multi-layer perceptron producing the pre-softmax vector `g(x)`.
///
/// Every mutation gives the model a new stamp; forward caches remember the
/// stamp they were produced under so that backprop can reject stale caches.
/// Clones share the stamp, which is sound because their parameters are equal.
#[derive(Clone, Debug)]
pub struct MlpModel<T> {
    layers: Vec<Layer<T>>,
    stamp: u64,
}

impl<T: Scalar> PartialEq for MlpModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl<T: Scalar> MlpModel<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(FatError::Config("model needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.fan_in() == 0 || l.fan_out() == 0 {
                return Err(FatError::Config(format!("layer {i} has a zero dimension")));
            }
            if l.bias.len() != l.fan_out() {
                return Err(FatError::shape("MlpModel::new bias", l.fan_out(), l.bias.len()));
            }
            if let Some(n) = &l.norm {
                let w = l.fan_out();
                if [n.gamma.len(), n.beta.len(), n.running_mean.len(), n.running_var.len()]
                    .iter()
                    .any(|&len| len != w)
                {
                    return Err(FatError::shape("MlpModel::new norm", w, "mismatched norm vectors"));
                }
            }
            if i + 1 < layers.len() && l.fan_out() != layers[i + 1].fan_in() {
                return Err(FatError::shape(
                    "MlpModel::new chain",
                    format!("layer {} fan_in {}", i + 1, l.fan_out()),
                    layers[i + 1].fan_in(),
                ));
            }
        }
        if layers.last().map(|l| l.activation) != Some(Activation::Identity) {
            return Err(FatError::Config("last layer must use the identity activation".into()));
        }
        Ok(Self {
            layers,
            stamp: fresh_stamp(),
        })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Mutable access to the layers; invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        self.stamp = fresh_stamp();
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.fan_out()));
        d
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.param_slices())
            .map(|s| s.len())
            .sum()
    }

    /// All trainable parameters in a fixed order: per layer weight, bias, then
    /// normalization scale and shift.
    pub fn params_flat(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.param_slices())
            .flat_map(|s| s.iter().copied())
            .collect()
    }

    pub fn set_params_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(FatError::shape("set_params_flat", self.param_count(), values.len()));
        }
        let mut offset = 0;
        for s in self.layers_mut().iter_mut().flat_map(|l| l.param_slices_mut()) {
            s.copy_from_slice(&values[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(())
    }

    pub(crate) fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.stamp = fresh_stamp();
        self.layers
            .iter_mut()
            .flat_map(|l| l.param_slices_mut())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .flat_map(|l| l.param_slices())
            .all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub fn forward(&self, batch: &DenseMatrix<T>, mode: Mode) -> Result<Forward<T>> {
        if batch.cols() != self.input_dim() {
            return Err(FatError::shape("forward input", self.input_dim(), batch.cols()));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut input = batch.clone();
        for layer in &self.layers {
            let mut z = input.matmul(&layer.weight)?;
            z.add_row_broadcast(&layer.bias);
            let (pre, norm_cache) = match &layer.norm {
                None => (z, None),
                Some(bn) => {
                    let (y, c) = bn_forward(bn, &z, mode);
                    (y, Some(c))
                }
            };
            let out = pre.map(|x| layer.activation.apply(x));
            caches.push(LayerCache {
                input,
                pre_act: pre,
                norm: norm_cache,
            });
            input = out;
        }
        Ok(Forward {
            logits: input,
            cache: ForwardCache {
                stamp: self.stamp,
                mode,
                rows: batch.rows(),
                layers: caches,
            },
        })
    }

    /// Eval-mode logits without retaining a cache.
    pub fn predict(&self, batch: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        if batch.cols() != self.input_dim() {
            return Err(FatError::shape("predict input", self.input_dim(), batch.cols()));
        }
        let mut a = batch.clone();
        for layer in &self.layers {
            let mut z = a.matmul(&layer.weight)?;
            z.add_row_broadcast(&layer.bias);
            if let Some(bn) = &layer.norm {
                z = bn_forward(bn, &z, Mode::Eval).0;
            }
            a = z.map(|x| layer.activation.apply(x));
        }
        Ok(a)
    }

    /// Gradients of a scalar loss with respect to every parameter and the
    /// input batch, given the loss gradient at the logits.
    pub fn backprop(
        &self,
        cache: &ForwardCache<T>,
        loss_grad_at_logits: &DenseMatrix<T>,
    ) -> Result<Gradients<T>> {
        let (params, input) = self.backprop_partial(cache, loss_grad_at_logits, true, true)?;
        Ok(Gradients {
            params: params.expect("requested"),
            input: input.expect("requested"),
        })
    }

    /// Like [`MlpModel::backprop`] but skips whichever half is not needed.
    pub fn backprop_partial(
        &self,
        cache: &ForwardCache<T>,
        loss_grad_at_logits: &DenseMatrix<T>,
        want_params: bool,
        want_input: bool,
    ) -> Result<(Option<ParamGrads<T>>, Option<DenseMatrix<T>>)> {
        if cache.stamp != self.stamp || cache.layers.len() != self.layers.len() {
            return Err(FatError::Contract(
                "forward cache was produced by a different or since-modified model".into(),
            ));
        }
        if loss_grad_at_logits.shape() != (cache.rows, self.output_dim()) {
            return Err(FatError::shape(
                "backprop loss gradient",
                format!("{}x{}", cache.rows, self.output_dim()),
                format!("{}x{}", loss_grad_at_logits.rows(), loss_grad_at_logits.cols()),
            ));
        }
        let mut grads: Vec<LayerGrads<T>> = Vec::with_capacity(self.layers.len());
        let mut upstream = loss_grad_at_logits.clone();
        for (idx, (layer, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let mut d_pre = upstream;
            if layer.activation != Activation::Identity {
                for (g, &x) in d_pre.as_mut_slice().iter_mut().zip(lc.pre_act.as_slice()) {
                    *g *= layer.activation.derivative(x);
                }
            }
            let (d_z, norm_grads) = match (&layer.norm, &lc.norm) {
                (Some(bn), Some(nc)) => {
                    let (dz, dg, db) = bn_backward(bn, nc, &d_pre, cache.mode);
                    (dz, Some((dg, db)))
                }
                (None, None) => (d_pre, None),
                _ => return Err(FatError::Contract("normalization layout changed".into())),
            };
            if want_params {
                let weight = lc.input.matmul_tn(&d_z)?;
                let bias = d_z.col_sums();
                let (gamma, beta) = match norm_grads {
                    Some((g, b)) => (Some(g), Some(b)),
                    None => (None, None),
                };
                grads.push(LayerGrads {
                    weight,
                    bias,
                    gamma,
                    beta,
                });
            }
            if idx == 0 && !want_input {
                upstream = DenseMatrix::zeros(0, 0);
                break;
            }
            upstream = d_z.matmul_nt(&layer.weight)?;
        }
        let params = want_params.then(|| {
            grads.reverse();
            ParamGrads { layers: grads }
        });
        Ok((params, want_input.then_some(upstream)))
    }

    /// Folds the batch statistics of a train-mode forward into the running
    /// statistics of every normalization layer.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) -> Result<()> {
        if cache.stamp != self.stamp || cache.mode != Mode::Train {
            return Err(FatError::Contract(
                "running statistics need a train-mode cache from this model".into(),
            ));
        }
        let n = cache.rows;
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers) {
            if let (Some(bn), Some(nc)) = (&mut layer.norm, &lc.norm) {
                let m = T::lit(bn.momentum);
                let unbias = if n > 1 {
                    T::lit(n as f64 / (n as f64 - 1.0))
                } else {
                    T::one()
                };
                for j in 0..bn.running_mean.len() {
                    bn.running_mean[j] = (T::one() - m) * bn.running_mean[j] + m * nc.mean[j];
                    bn.running_var[j] = (T::one() - m) * bn.running_var[j] + m * nc.var[j] * unbias;
                }
            }
        }
        self.stamp = fresh_stamp();
        Ok(())
    }
}

/// He-initialized model: hidden layers use `activation`, the last layer is
/// linear. Weights are `N(0, 2 / fan_in)`, biases zero.
pub fn he_init<T: Scalar>(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<MlpModel<T>> {
    he_init_with(layer_dims, activation, false, seed)
}

/// [`he_init`] with optional batch normalization on every hidden layer.
pub fn he_init_with<T: Scalar>(
    layer_dims: &[usize],
    activation: Activation,
    batch_norm: bool,
    seed: u64,
) -> Result<MlpModel<T>> {
    if layer_dims.len() < 2 {
        return Err(FatError::Config(format!(
            "need at least input and output dims, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(FatError::Config(format!("zero-width layer in {layer_dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = layer_dims.len() - 1;
    let mut layers = Vec::with_capacity(n_layers);
    for (i, pair) in layer_dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = DenseMatrix::from_fn(fan_in, fan_out, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::lit(z * std)
        });
        let last = i + 1 == n_layers;
        layers.push(Layer {
            weight,
            bias: vec![T::zero(); fan_out],
            activation: if last { Activation::Identity } else { activation },
            norm: (batch_norm && !last).then(|| BatchNorm::new(fan_out)),
        });
    }
    MlpModel::new(layers)
}

/// Output of [`MlpModel::forward`].
#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub logits: DenseMatrix<T>,
    pub cache: ForwardCache<T>,
}

/// Activation record of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    stamp: u64,
    mode: Mode,
    rows: usize,
    layers: Vec<LayerCache<T>>,
}

impl<T> ForwardCache<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

#[derive(Clone, Debug)]
struct LayerCache<T> {
    input: DenseMatrix<T>,
    pre_act: DenseMatrix<T>,
    norm: Option<NormCache<T>>,
}

#[derive(Clone, Debug)]
struct NormCache<T> {
    xhat: DenseMatrix<T>,
    inv_std: Vec<T>,
    mean: Vec<T>,
    var: Vec<T>,
}

fn bn_forward<T: Scalar>(bn: &BatchNorm<T>, z: &DenseMatrix<T>, mode: Mode) -> (DenseMatrix<T>, NormCache<T>) {
    let (n, w) = z.shape();
    let eps = T::lit(bn.eps);
    let (mean, var) = match mode {
        Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
        Mode::Train => {
            let inv_n = T::one() / T::lit(n.max(1) as f64);
            let mean: Vec<T> = z.col_sums().into_iter().map(|s| s * inv_n).collect();
            let mut var = vec![T::zero(); w];
            for row in z.iter_rows() {
                for j in 0..w {
                    let d = row[j] - mean[j];
                    var[j] += d * d;
                }
            }
            for v in &mut var {
                *v *= inv_n;
            }
            (mean, var)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = z.clone();
    let mut y = z.clone();
    for i in 0..n {
        for j in 0..w {
            let h = (z.get(i, j) - mean[j]) * inv_std[j];
            xhat.set(i, j, h);
            y.set(i, j, bn.gamma[j] * h + bn.beta[j]);
        }
    }
    (
        y,
        NormCache {
            xhat,
            inv_std,
            mean,
            var,
        },
    )
}

fn bn_backward<T: Scalar>(
    bn: &BatchNorm<T>,
    nc: &NormCache<T>,
    dy: &DenseMatrix<T>,
    mode: Mode,
) -> (DenseMatrix<T>, Vec<T>, Vec<T>) {
    let (n, w) = dy.shape();
    let mut dgamma = vec![T::zero(); w];
    let mut dbeta = vec![T::zero(); w];
    for i in 0..n {
        for j in 0..w {
            let g = dy.get(i, j);
            dgamma[j] += g * nc.xhat.get(i, j);
            dbeta[j] += g;
        }
    }
    let mut dz = dy.clone();
    match mode {
        Mode::Eval => {
            for i in 0..n {
                for j in 0..w {
                    dz.set(i, j, dy.get(i, j) * bn.gamma[j] * nc.inv_std[j]);
                }
            }
        }
        Mode::Train => {
            // dz = inv_std / n * (n * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
            let nn = T::lit(n as f64);
            let mut sum_dxhat = vec![T::zero(); w];
            let mut sum_dxhat_xhat = vec![T::zero(); w];
            for i in 0..n {
                for j in 0..w {
                    let dxh = dy.get(i, j) * bn.gamma[j];
                    sum_dxhat[j] += dxh;
                    sum_dxhat_xhat[j] += dxh * nc.xhat.get(i, j);
                }
            }
            for i in 0..n {
                for j in 0..w {
                    let dxh = dy.get(i, j) * bn.gamma[j];
                    let v = nc.inv_std[j] / nn
                        * (nn * dxh - sum_dxhat[j] - nc.xhat.get(i, j) * sum_dxhat_xhat[j]);
                    dz.set(i, j, v);
                }
            }
        }
    }
    (dz, dgamma, dbeta)
}

/// Parameter and input gradients from [`MlpModel::backprop`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub params: ParamGrads<T>,
    pub input: DenseMatrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads<T> {
    pub weight: DenseMatrix<T>,
    pub bias: Vec<T>,
    pub gamma: Option<Vec<T>>,
    pub beta: Option<Vec<T>>,
}

impl<T: Scalar> LayerGrads<T> {
    fn slices(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = vec![self.weight.as_slice(), &self.bias];
        v.extend(self.gamma.as_deref());
        v.extend(self.beta.as_deref());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = vec![self.weight.as_mut_slice(), &mut self.bias];
        v.extend(self.gamma.as_deref_mut());
        v.extend(self.beta.as_deref_mut());
        v
    }
}

/// Gradient (or any other tensor) shaped like a model's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T> {
    pub layers: Vec<LayerGrads<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(model: &MlpModel<T>) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|l| {
                let w = l.fan_out();
                LayerGrads {
                    weight: DenseMatrix::zeros(l.fan_in(), w),
                    bias: vec![T::zero(); w],
                    gamma: l.norm.as_ref().map(|_| vec![T::zero(); w]),
                    beta: l.norm.as_ref().map(|_| vec![T::zero(); w]),
                }
            })
            .collect();
        Self { layers }
    }

    pub(crate) fn slices(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| l.slices()).collect()
    }

    pub(crate) fn slices_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(|l| l.slices_mut()).collect()
    }

    /// Flattened in the same order as [`MlpModel::params_flat`].
    pub fn flat(&self) -> Vec<T> {
        self.slices().into_iter().flat_map(|s| s.iter().copied()).collect()
    }

    pub fn matches(&self, model: &MlpModel<T>) -> bool {
        let mine: Vec<usize> = self.slices().iter().map(|s| s.len()).collect();
        let theirs: Vec<usize> = model
            .layers()
            .iter()
            .flat_map(|l| l.param_slices())
            .map(|s| s.len())
            .collect();
        mine == theirs
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: T, other: &Self) -> Result<()> {
        let lens: Vec<usize> = other.slices().iter().map(|s| s.len()).collect();
        if self.slices().iter().map(|s| s.len()).ne(lens.iter().copied()) {
            return Err(FatError::shape("ParamGrads::add_scaled", "matching layout", "different layout"));
        }
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: T) {
        for s in self.slices_mut() {
            for x in s {
                *x *= alpha;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub fn max_abs(&self) -> T {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(T::zero(), |m, x| m.max(x.abs()))
    }
}
