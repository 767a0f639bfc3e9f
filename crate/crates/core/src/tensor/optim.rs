use super::ParameterStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update from the accumulated gradients, which are
/// cleared afterwards. Updated values are rounded to `f32` precision.
pub fn adam_step(store: &mut ParameterStore, cfg: &AdamConfig) {
    store.step += 1;
    let t = store.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for p in &mut store.params {
        let n = p.value.len();
        let (value, grad, m, v) = (p.value.data_mut(), p.grad.data_mut(), p.m.data_mut(), p.v.data_mut());
        for i in 0..n {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            value[i] = (value[i] - cfg.lr * mhat / (vhat.sqrt() + cfg.eps)) as f32 as f64;
            grad[i] = 0.0;
        }
    }
}
