use super::{NnError, ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = || params.ids().map(|id| vec![0.0; params.value(id).numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Bias-corrected Adam update from the gradients currently stored in
    /// `params`. Gradients are left untouched.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<(), NnError> {
        if self.m.len() != params.len() {
            return Err(NnError::Shape(format!(
                "optimizer tracks {} parameters, set has {}",
                self.m.len(),
                params.len()
            )));
        }
        for id in params.ids() {
            if params.grad(id).iter().any(|g| !g.is_finite()) {
                return Err(NnError::NonFinite(format!("gradient of {}", params.name(id))));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - (beta1 as f64).powi(t);
        let c2 = 1.0 - (beta2 as f64).powi(t);
        for id in params.ids() {
            let i = id.0;
            let grad = params.grad(id).to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let value = params.value_mut(id).data_mut();
            for k in 0..grad.len() {
                let g = grad[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let m_hat = m[k] as f64 / c1;
                let v_hat = v[k] as f64 / c2;
                value[k] -= (lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
            }
        }
        Ok(())
    }

    /// Moment tensors named after their parameters, for checkpointing.
    pub fn named_moments(&self, params: &ParamSet) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * params.len());
        for id in params.ids() {
            let shape = params.value(id).shape().to_vec();
            let name = params.name(id);
            out.push((format!("m/{name}"), Tensor::new(shape.clone(), self.m[id.0].clone()).expect("moment shape")));
            out.push((format!("v/{name}"), Tensor::new(shape, self.v[id.0].clone()).expect("moment shape")));
        }
        out
    }

    /// Restores moments saved by [`AdamState::named_moments`].
    pub fn restore(params: &ParamSet, config: AdamConfig, step: u64, tensors: &[(String, Tensor)]) -> Result<Self, NnError> {
        let mut state = Self::new(params, config);
        state.step = step;
        for (name, t) in tensors {
            let (slot, pname) = name
                .split_once('/')
                .ok_or_else(|| NnError::Checkpoint(format!("bad optimizer tensor name {name}")))?;
            let id = params
                .id(pname)
                .ok_or_else(|| NnError::Checkpoint(format!("optimizer tensor for unknown parameter {pname}")))?;
            if t.numel() != params.value(id).numel() {
                return Err(NnError::Checkpoint(format!("optimizer tensor {name} has wrong size")));
            }
            match slot {
                "m" => state.m[id.0] = t.data().to_vec(),
                "v" => state.v[id.0] = t.data().to_vec(),
                _ => return Err(NnError::Checkpoint(format!("bad optimizer tensor name {name}"))),
            }
        }
        Ok(state)
    }
}
