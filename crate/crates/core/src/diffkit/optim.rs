use serde::{Deserialize, Serialize};

use super::{DiffError, Gradients, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates for every parameter of one store.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self { config, t: 0, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts the step
/// before any parameter is touched.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut OptimState) -> Result<(), DiffError> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(DiffError::GradientLayout { params: store.len(), grads: grads.len() });
    }
    for (idx, g) in grads.iter().enumerate() {
        let p = store.by_index(idx);
        if g.len() != p.data.len() {
            return Err(DiffError::GradientLayout { params: p.data.len(), grads: g.len() });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(DiffError::NonFinite { param: p.id.clone() });
        }
    }
    state.t += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (idx, g) in grads.iter().enumerate() {
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let data = &mut store.by_index_mut(idx).data;
        for k in 0..g.len() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            data[k] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    store.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("theta", vec![1], vec![v]).unwrap();
        s
    }

    fn grad_of(store: &ParamStore, g: f64) -> Gradients {
        let mut grads = Gradients::zeros_like(store);
        grads.get_mut(0)[0] = g;
        grads
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_store(1.25);
        let mut st = OptimState::new(&s, AdamConfig::default());
        for _ in 0..5 {
            { let g = grad_of(&s, 0.0); adam_step(&mut s, &g, &mut st) }.unwrap();
        }
        assert_eq!(s.get("theta").unwrap().data[0], 1.25);
        assert_eq!(s.step, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = scalar_store(0.0);
        let mut st = OptimState::new(&s, AdamConfig::default());
        { let g = grad_of(&s, 1.0); adam_step(&mut s, &g, &mut st) }.unwrap();
        let delta = s.get("theta").unwrap().data[0];
        assert!((delta + 0.001).abs() < 1e-10, "{delta}");
    }

    #[test]
    fn converges_on_convex_scalar() {
        // f(θ) = (θ - 3)^2, default Adam with lr raised so 200 steps suffice.
        let mut s = scalar_store(0.0);
        let mut st = OptimState::new(&s, AdamConfig { lr: 0.1, ..AdamConfig::default() });
        for _ in 0..200 {
            let theta = s.get("theta").unwrap().data[0];
            { let g = grad_of(&s, 2.0 * (theta - 3.0)); adam_step(&mut s, &g, &mut st) }.unwrap();
        }
        let theta = s.get("theta").unwrap().data[0];
        assert!((theta - 3.0).abs() < 0.1, "{theta}");
    }

    #[test]
    fn nan_gradient_aborts_step() {
        let mut s = scalar_store(2.0);
        let mut st = OptimState::new(&s, AdamConfig::default());
        let err = { let g = grad_of(&s, f64::NAN); adam_step(&mut s, &g, &mut st) }.unwrap_err();
        assert!(matches!(err, DiffError::NonFinite { ref param } if param == "theta"));
        assert_eq!(s.get("theta").unwrap().data[0], 2.0);
        assert_eq!(st.t, 0);
        assert_eq!(s.step, 0);
    }
}
