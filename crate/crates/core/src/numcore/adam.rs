use super::{ParamSet, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// First/second moment buffers aligned with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Bias-corrected Adam update from the parameters' gradient slots, then
    /// clears the slots. Frozen tensors are skipped.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<(), TensorError> {
        if params.len() != self.m.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![self.m.len()],
                rhs: vec![params.len()],
            });
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (k, p) in params.tensors_mut().iter_mut().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            if self.m[k].len() != p.numel() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: vec![self.m[k].len()],
                    rhs: p.shape().to_vec(),
                });
            }
            let Some(g) = p.grad().map(<[f64]>::to_vec) else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}
