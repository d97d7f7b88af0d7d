use crate::error::{Error, Result};

use super::{Parameter, Scalar, Tensor};

/// Adam hyperparameters. Rates are kept in `f64` and cast at use so the same
/// configuration drives both precisions identically.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

struct Slot<E> {
    m: Tensor<E>,
    v: Tensor<E>,
}

/// Per-parameter first/second moment estimates plus the shared step counter.
pub struct AdamState<E> {
    cfg: AdamConfig,
    t: u64,
    slots: Vec<Slot<E>>,
}

impl<E: Scalar> AdamState<E> {
    /// Builds moment slots matching `params`. The slot order is positional;
    /// `step` must be called with the same parameter order.
    pub fn new(cfg: AdamConfig, params: &[&Parameter<E>]) -> Result<Self> {
        if !(cfg.lr > 0.0) {
            return Err(Error::invalid("adam", format!("learning rate {} must be positive", cfg.lr)));
        }
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return Err(Error::invalid("adam", "betas must lie in [0,1)"));
        }
        let slots = params
            .iter()
            .map(|p| Slot {
                m: Tensor::zeros(p.value().shape().to_vec()),
                v: Tensor::zeros(p.value().shape().to_vec()),
            })
            .collect();
        Ok(AdamState { cfg, t: 0, slots })
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// One bias-corrected update from the gradients currently stored in
    /// `params`. Frozen parameters keep their values but still advance
    /// their moment slots' shapes (they are simply skipped).
    pub fn step(&mut self, params: &mut [&mut Parameter<E>]) -> Result<()> {
        if params.len() != self.slots.len() {
            return Err(Error::invalid(
                "adam",
                format!("{} params vs {} state slots", params.len(), self.slots.len()),
            ));
        }
        self.t += 1;
        let b1 = E::from_f64(self.cfg.beta1);
        let b2 = E::from_f64(self.cfg.beta2);
        let one_m_b1 = E::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = E::from_f64(1.0 - self.cfg.beta2);
        let bc1 = E::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2 = E::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        let lr = E::from_f64(self.cfg.lr);
        let eps = E::from_f64(self.cfg.epsilon);

        for (p, slot) in params.iter_mut().zip(self.slots.iter_mut()) {
            if p.grad().shape() != slot.m.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("param {:?} vs state {:?}", p.grad().shape(), slot.m.shape()),
                ));
            }
            if !p.trainable() {
                continue;
            }
            let g = p.grad().data().to_vec();
            let md = slot.m.data_mut();
            let vd = slot.v.data_mut();
            let pd = p.value_mut().data_mut();
            for i in 0..g.len() {
                md[i] = b1 * md[i] + one_m_b1 * g[i];
                vd[i] = b2 * vd[i] + one_m_b2 * g[i] * g[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] = pd[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64) -> Parameter<f64> {
        Parameter::new("w", Tensor::scalar(v))
    }

    #[test]
    fn rejects_nonpositive_lr() {
        let p = param(1.0);
        assert!(AdamState::new(AdamConfig::with_lr(0.0), &[&p]).is_err());
        assert!(AdamState::new(AdamConfig::with_lr(-1.0), &[&p]).is_err());
    }

    #[test]
    fn zero_gradient_leaves_value_unchanged() {
        let mut p = param(1.25);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &[&p]).unwrap();
        p.zero_grad();
        adam.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value().data(), &[1.25]);
    }

    #[test]
    fn step_counter_increments_by_one() {
        let mut p = param(0.0);
        let mut adam = AdamState::new(AdamConfig::default(), &[&p]).unwrap();
        for expected in 1..=5 {
            adam.step(&mut [&mut p]).unwrap();
            assert_eq!(adam.t(), expected);
        }
    }

    #[test]
    fn first_step_moves_by_lr_sign() {
        for g in [0.5, -3.0, 1e-3] {
            let mut p = param(2.0);
            p.set_grad(Some(&Tensor::scalar(g)));
            let lr = 0.01;
            let mut adam = AdamState::new(AdamConfig::with_lr(lr), &[&p]).unwrap();
            adam.step(&mut [&mut p]).unwrap();
            let delta: f64 = p.value().data()[0] - 2.0;
            // m̂/√v̂ = sign(g) at t=1, up to epsilon
            assert!((delta + lr * g.signum()).abs() < 1e-6, "g={g} delta={delta}");
        }
    }

    #[test]
    fn constant_gradient_matches_recurrence_oracle() {
        let g = 0.7;
        let lr = 0.05;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let steps = 300;

        let mut p = param(1.0);
        let mut adam = AdamState::new(
            AdamConfig { lr, beta1: b1, beta2: b2, epsilon: eps },
            &[&p],
        )
        .unwrap();
        let mut last_delta = 0.0;
        for _ in 0..steps {
            let before = p.value().data()[0];
            p.set_grad(Some(&Tensor::scalar(g)));
            adam.step(&mut [&mut p]).unwrap();
            last_delta = p.value().data()[0] - before;
        }

        // independent recurrence evaluation
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 1.0f64);
        for t in 1..=steps {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        assert!((p.value().data()[0] - w).abs() < 1e-12);
        // late-step update magnitude approaches lr
        assert!((last_delta.abs() - lr).abs() < lr * 0.05, "delta {last_delta}");
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut p = Parameter::frozen("w", Tensor::scalar(3.0f64));
        p.set_grad(Some(&Tensor::scalar(10.0)));
        let mut adam = AdamState::new(AdamConfig::with_lr(0.5), &[&p]).unwrap();
        adam.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value().data(), &[3.0]);
    }
}
