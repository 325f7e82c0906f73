//! AdamW with decoupled weight decay, plus the cosine schedule helper.

/// Cosine decay from `base` at epoch 0 to zero at `total` epochs.
/// Applied at epoch granularity: the rate is constant within an epoch.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (epoch.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Decoupled-decay Adam. Moment buffers are indexed parallel to the slice
/// list handed to [`AdamW::step`], which must keep a stable order across
/// steps (the parameter store guarantees creation order).
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub(crate) step_count: u64,
    pub(crate) m: Vec<Vec<f64>>,
    pub(crate) v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(param_sizes: &[usize], lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update. `params[i]` and `grads[i]` must match the sizes given at
    /// construction. Weight decay multiplies parameters by `1 - lr*wd`
    /// independently of the gradient direction (decoupled form).
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len(), "optimizer wired to a different parameter list");
        assert_eq!(grads.len(), self.m.len());
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let p = &mut *params[i];
            let g = grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            assert_eq!(p.len(), m.len());
            assert_eq!(g.len(), m.len());
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.lr * self.weight_decay * p[j];
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
