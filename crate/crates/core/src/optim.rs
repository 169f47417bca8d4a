//! Plain gradient descent and Adam over a [`ParamSet`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Gradients, ParamSet};

/// Fails unless `grads` has a same-shaped tensor for every parameter and
/// nothing else. Checked before any parameter is touched.
fn check_coverage(params: &ParamSet, grads: &Gradients) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads.get(name).ok_or_else(|| Error::MissingGradient(name.to_string()))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "optimizer step",
                name.to_string(),
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    if let Some(extra) = grads.names().find(|n| params.get(n).is_none()) {
        return Err(Error::InvalidArgument(format!("gradient for unknown parameter `{extra}`")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdState {
    pub learning_rate: f64,
}

impl SgdState {
    pub fn new(learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!("SGD learning rate must be > 0, got {learning_rate}")));
        }
        Ok(Self { learning_rate })
    }
}

/// `θ ← θ − α·g` for every parameter.
pub fn sgd_step(params: &mut ParamSet, grads: &Gradients, state: &SgdState) -> Result<()> {
    check_coverage(params, grads)?;
    params.axpy(-state.learning_rate, grads)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Adam with bias correction. Moment buffers are allocated on the first step.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    first_moment: Option<ParamSet>,
    second_moment: Option<ParamSet>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step_count: 0,
            first_moment: None,
            second_moment: None,
        })
    }

    pub fn first_moment(&self) -> Option<&ParamSet> {
        self.first_moment.as_ref()
    }

    pub fn second_moment(&self) -> Option<&ParamSet> {
        self.second_moment.as_ref()
    }
}

pub fn adam_step(params: &mut ParamSet, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    check_coverage(params, grads)?;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let m = state.first_moment.get_or_insert_with(|| params.zeros_like());
    let v = state.second_moment.get_or_insert_with(|| params.zeros_like());
    if !m.same_layout(params) {
        return Err(Error::InvalidArgument("Adam moments do not match parameter layout".into()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let correction1 = 1.0 - beta1.powi(t);
    let correction2 = 1.0 - beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("coverage checked");
        let m = m.get_mut(name).expect("layout checked").data_mut();
        let v = v.get_mut(name).expect("layout checked").data_mut();
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            let gi = g.data()[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let m_hat = m[i] / correction1;
            let v_hat = v[i] / correction2;
            *x -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Either stepper behind one interface.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd(SgdState),
    Adam(AdamState),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        Ok(match kind {
            OptimizerKind::Sgd => Optimizer::Sgd(SgdState::new(learning_rate)?),
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(AdamConfig::with_lr(learning_rate))?),
        })
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        match self {
            Optimizer::Sgd(s) => sgd_step(params, grads, s),
            Optimizer::Adam(s) => adam_step(params, grads, s),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn scalar_set(name: &str, v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::scalar(v)).unwrap();
        p
    }

    fn value(p: &ParamSet) -> f64 {
        p.get("theta").unwrap().item()
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = scalar_set("theta", 1.0);
        sgd_step(&mut p, &scalar_set("theta", 0.5), &SgdState::new(0.1).unwrap()).unwrap();
        assert!((value(&p) - 0.95).abs() < 1e-15);

        let mut p = scalar_set("theta", 1.0);
        sgd_step(&mut p, &scalar_set("theta", 0.0), &SgdState::new(0.1).unwrap()).unwrap();
        assert_eq!(value(&p).to_bits(), 1.0f64.to_bits());

        let mut p = scalar_set("theta", 0.0);
        let s = SgdState::new(0.1).unwrap();
        sgd_step(&mut p, &scalar_set("theta", 1.0), &s).unwrap();
        sgd_step(&mut p, &scalar_set("theta", 1.0), &s).unwrap();
        assert!((value(&p) + 0.2).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_error_and_leaves_params_untouched() {
        let mut p = scalar_set("theta", 1.0);
        p.insert("other", Tensor::scalar(2.0)).unwrap();
        let before = p.clone();
        let err = sgd_step(&mut p, &scalar_set("theta", 1.0), &SgdState::new(0.1).unwrap()).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(ref n) if n == "other"));
        assert!(p.bitwise_eq(&before));
        let mut adam = AdamState::new(AdamConfig::default()).unwrap();
        assert!(adam_step(&mut p, &scalar_set("theta", 1.0), &mut adam).is_err());
        assert!(p.bitwise_eq(&before));
        assert_eq!(adam.step_count, 0);
    }

    #[test]
    fn zero_gradient_entries_stay_bitwise_unchanged() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::new(&[3], vec![0.1, -0.0, 3.0]).unwrap()).unwrap();
        p.insert("b", Tensor::scalar(-7.25)).unwrap();
        let mut g = p.zeros_like();
        g.get_mut("a").unwrap().data_mut()[2] = 1.0;
        let before = p.clone();
        sgd_step(&mut p, &g, &SgdState::new(0.5).unwrap()).unwrap();
        assert!(p.get("b").unwrap().bitwise_eq(before.get("b").unwrap()));
        assert_eq!(p.get("a").unwrap().data()[0].to_bits(), 0.1f64.to_bits());
        assert_eq!(p.get("a").unwrap().data()[2], 2.5);
    }

    #[test]
    fn adam_defaults() {
        let c = AdamConfig::default();
        assert_eq!((c.beta1, c.beta2, c.epsilon), (0.9, 0.999, 1e-8));
    }

    #[test]
    fn adam_first_step_hand_trace() {
        let (g, lr, b1, b2, eps) = (0.5f64, 0.1, 0.9, 0.999, 1e-8);
        // m1 = (1-b1) g, v1 = (1-b2) g^2, corrected by (1-b^1).
        let m_hat = ((1.0 - b1) * g) / (1.0 - b1);
        let v_hat = ((1.0 - b2) * g * g) / (1.0 - b2);
        let want = 0.0 - lr * m_hat / (v_hat.sqrt() + eps);
        assert!((want + 0.1).abs() < 1e-8);

        let mut p = scalar_set("theta", 0.0);
        let mut s = AdamState::new(AdamConfig::with_lr(lr)).unwrap();
        adam_step(&mut p, &scalar_set("theta", g), &mut s).unwrap();
        assert!((value(&p) - want).abs() < 1e-15);
        assert_eq!(s.step_count, 1);

        // Second step, same gradient.
        let m2 = b1 * (1.0 - b1) * g + (1.0 - b1) * g;
        let v2 = b2 * (1.0 - b2) * g * g + (1.0 - b2) * g * g;
        let want2 = want - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        adam_step(&mut p, &scalar_set("theta", g), &mut s).unwrap();
        assert!((value(&p) - want2).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_fresh_state_is_noop() {
        let mut p = scalar_set("theta", 0.3);
        let mut s = AdamState::new(AdamConfig::with_lr(0.1)).unwrap();
        adam_step(&mut p, &scalar_set("theta", 0.0), &mut s).unwrap();
        assert_eq!(value(&p).to_bits(), 0.3f64.to_bits());
    }

    #[test]
    fn invalid_settings_rejected() {
        assert!(SgdState::new(0.0).is_err());
        assert!(AdamState::new(AdamConfig { beta1: 1.0, ..AdamConfig::default() }).is_err());
        assert!(AdamState::new(AdamConfig { epsilon: 0.0, ..AdamConfig::default() }).is_err());
    }

    proptest! {
        #[test]
        fn sgd_is_linear_in_gradient(theta in -10.0f64..10.0, g1 in -5.0f64..5.0, g2 in -5.0f64..5.0, lr in 1e-6f64..1.0) {
            let s = SgdState::new(lr).unwrap();
            let mut joint = scalar_set("theta", theta);
            sgd_step(&mut joint, &scalar_set("theta", g1 + g2), &s).unwrap();
            let mut seq = scalar_set("theta", theta);
            sgd_step(&mut seq, &scalar_set("theta", g1), &s).unwrap();
            sgd_step(&mut seq, &scalar_set("theta", g2), &s).unwrap();
            prop_assert!((value(&joint) - value(&seq)).abs() < 1e-12);
        }

        #[test]
        fn adam_first_step_bounded_by_lr(g in prop_oneof![-1e6f64..-1e-6, 1e-6f64..1e6], lr in 1e-6f64..1.0) {
            let mut p = scalar_set("theta", 0.0);
            let mut s = AdamState::new(AdamConfig::with_lr(lr)).unwrap();
            adam_step(&mut p, &scalar_set("theta", g), &mut s).unwrap();
            prop_assert!(value(&p).abs() <= lr * (1.0 + 1e-9));
        }
    }
}
