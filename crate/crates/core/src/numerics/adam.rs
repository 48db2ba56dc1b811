use std::collections::BTreeMap;

use super::{NumericsError, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment estimates for every parameter plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| {
            p.iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect()
        };
        AdamState { config, t: 0, m: zeros(params), v: zeros(params) }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.v.get(name)
    }

    /// One bias-corrected Adam update of every parameter in `params`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<(), NumericsError> {
        let AdamConfig { lr, beta1, beta2, epsilon } = self.config;
        if !(lr > 0.0) {
            return Err(NumericsError::Contract(format!("learning rate must be positive, got {lr}")));
        }
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(NumericsError::Contract("adam: parameter set mismatch".into()));
        }
        for (name, p) in params.iter() {
            let g = grads.get(name).ok_or_else(|| {
                NumericsError::Contract(format!("adam: no gradient for `{name}`"))
            })?;
            let m = self.m.get(name).ok_or_else(|| {
                NumericsError::Contract(format!("adam: no state for `{name}`"))
            })?;
            if g.shape() != p.shape() || m.shape() != p.shape() {
                return Err(NumericsError::Contract(format!("adam: shape mismatch for `{name}`")));
            }
        }

        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let g = grads.get(&name).expect("checked above");
            let m = self.m.get_mut(&name).expect("checked above");
            let v = self.v.get_mut(&name).expect("checked above");
            let p = params.get_mut(&name).expect("checked above");
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(x));
        s
    }

    /// Hand evaluation of the first Adam step: m̂ = g, v̂ = g², Δ = lr·g/(|g| + ε).
    fn first_step_oracle(g: f64, lr: f64, eps: f64) -> f64 {
        lr * g / (g.abs() + eps)
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params = scalar_store(1.5);
        let mut state = AdamState::new(AdamConfig::with_lr(1e-3), &params);
        state.t = 1;
        state.step(&mut params, &scalar_store(0.0)).unwrap();
        assert_eq!(params.get("w").unwrap().item(), 1.5);
        assert_eq!(state.t, 2);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        for g in [10.0, 0.01] {
            let mut params = scalar_store(0.0);
            let mut state = AdamState::new(AdamConfig::with_lr(1e-3), &params);
            state.step(&mut params, &scalar_store(g)).unwrap();
            let moved = -params.get("w").unwrap().item();
            assert!((moved - first_step_oracle(g, 1e-3, 1e-8)).abs() < 1e-15);
            assert!((moved - 1e-3).abs() < 1e-6, "g={g}: moved {moved}");
            assert_eq!(state.t, 1);
        }
    }

    #[test]
    fn displacement_scales_with_learning_rate() {
        let grads = {
            let mut s = ParamStore::new();
            s.insert("w", Tensor::vector(vec![0.3, -2.0, 5e-4]));
            s
        };
        let run = |lr: f64| {
            let mut p = ParamStore::new();
            p.insert("w", Tensor::vector(vec![0.0; 3]));
            let mut st = AdamState::new(AdamConfig::with_lr(lr), &p);
            st.step(&mut p, &grads).unwrap();
            p.get("w").unwrap().clone()
        };
        let a = run(1e-3);
        let b = run(2e-3);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((2.0 * x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = scalar_store(0.0);
        let mut state = AdamState::new(AdamConfig::with_lr(1e-3), &params);
        let mut bad = ParamStore::new();
        bad.insert("w", Tensor::vector(vec![1.0, 2.0]));
        assert!(state.step(&mut params, &bad).is_err());
    }

    #[test]
    fn non_positive_learning_rate_is_rejected() {
        let mut params = scalar_store(0.0);
        let mut state = AdamState::new(AdamConfig::with_lr(0.0), &params);
        assert!(state.step(&mut params, &scalar_store(1.0)).is_err());
    }
}
