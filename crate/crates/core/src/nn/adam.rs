use crate::error::{FatError, Result};
use crate::nn::model::{MlpModel, ParamGrads};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    m: ParamGrads<T>,
    v: ParamGrads<T>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(model: &MlpModel<T>, config: AdamConfig) -> Self {
        Self {
            config,
            m: ParamGrads::zeros_like(model),
            v: ParamGrads::zeros_like(model),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &ParamGrads<T> {
        &self.m
    }

    pub fn second_moment(&self) -> &ParamGrads<T> {
        &self.v
    }
}

/// One bias-corrected Adam update of `model` in place.
pub fn adam_step<T: Scalar>(
    model: &mut MlpModel<T>,
    grads: &ParamGrads<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    if !grads.matches(model) || !state.m.matches(model) {
        return Err(FatError::shape(
            "adam_step",
            "gradients and moments shaped like the model",
            "mismatched layout",
        ));
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let b1 = T::lit(c.beta1);
    let b2 = T::lit(c.beta2);
    let one = T::one();
    let bc1 = one - T::lit(c.beta1.powi(t));
    let bc2 = one - T::lit(c.beta2.powi(t));
    let lr = T::lit(c.lr);
    let eps = T::lit(c.eps);

    let params = model.param_slices_mut();
    let g = grads.slices();
    let m = state.m.slices_mut();
    let v = state.v.slices_mut();
    for (((p, g), m), v) in params.into_iter().zip(g).zip(m).zip(v) {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::DenseMatrix;
    use crate::nn::model::{he_init, Activation, Layer};

    fn scalar_model(w: f64) -> MlpModel<f64> {
        let weight = DenseMatrix::new(1, 1, vec![w]).unwrap();
        MlpModel::new(vec![Layer::dense(weight, vec![0.0], Activation::Identity)]).unwrap()
    }

    fn grads_for(model: &MlpModel<f64>, g: f64) -> ParamGrads<f64> {
        let mut grads = ParamGrads::zeros_like(model);
        grads.layers[0].weight.set(0, 0, g);
        grads
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut m: MlpModel<f64> = he_init(&[3, 4, 2], Activation::Relu, 1).unwrap();
        let before = m.params_flat();
        let mut st = AdamState::new(&m, AdamConfig::default());
        let zero = ParamGrads::zeros_like(&m);
        for _ in 0..3 {
            adam_step(&mut m, &zero, &mut st).unwrap();
        }
        assert_eq!(m.params_flat(), before);
        assert_eq!(st.step(), 3);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
        let mut m = scalar_model(0.5);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&m, cfg);
        let g = grads_for(&m, 1.0);
        adam_step(&mut m, &g, &mut st).unwrap();
        let w = m.layers()[0].weight.get(0, 0);
        assert!((w - (0.5 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15, "{w}");
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn identical_runs_are_identical() {
        let run = || {
            let mut m = scalar_model(0.0);
            let mut st = AdamState::new(&m, AdamConfig::default());
            let mut trace = Vec::new();
            for k in 0..20 {
                let g = grads_for(&m, (k as f64 * 0.7).sin());
                adam_step(&mut m, &g, &mut st).unwrap();
                trace.push(m.params_flat()[0].to_bits());
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_mismatched_gradients() {
        let mut m = scalar_model(0.0);
        let other: MlpModel<f64> = he_init(&[2, 2], Activation::Relu, 0).unwrap();
        let mut st = AdamState::new(&m, AdamConfig::default());
        let g = ParamGrads::zeros_like(&other);
        assert!(adam_step(&mut m, &g, &mut st).is_err());
        assert_eq!(st.step(), 0);
    }
}
