use crate::{ParamStore, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// First-order optimizer over one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub method: Method,
    pub learning_rate: f64,
    /// Global gradient-norm clip, applied before the update when set.
    pub clip_norm: Option<f64>,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn sgd(learning_rate: f64) -> Self {
        Self::with_method(Method::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::with_method(
            Method::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            learning_rate,
        )
    }

    pub fn with_method(method: Method, learning_rate: f64) -> Self {
        Optimizer {
            method,
            learning_rate,
            clip_norm: None,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn with_clip(mut self, norm: f64) -> Self {
        self.clip_norm = Some(norm);
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.is_frozen() {
            return Err(TensorError::Frozen);
        }
        if let Some(p) = store.params().iter().find(|p| p.grad.is_none()) {
            return Err(TensorError::MissingGrad(p.name.clone()));
        }
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = store
                    .params()
                    .iter()
                    .flat_map(|p| p.grad.as_deref().unwrap_or(&[]))
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let lr = self.learning_rate;
        match self.method {
            Method::Sgd => {
                for p in store.params_mut() {
                    let g = p.grad.as_mut().expect("checked above");
                    for (w, gv) in p.value.data_mut().iter_mut().zip(g.iter_mut()) {
                        *w -= lr * scale * *gv;
                        *gv = 0.0;
                    }
                }
            }
            Method::Adam { beta1, beta2, eps } => {
                if self.first.len() != store.len() {
                    self.first = store
                        .params()
                        .iter()
                        .map(|p| vec![0.0; p.value.len()])
                        .collect();
                    self.second = self.first.clone();
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for ((p, m), v) in store
                    .params_mut()
                    .iter_mut()
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let g = p.grad.as_mut().expect("checked above");
                    for (((w, gv), mi), vi) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(g.iter_mut())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        let gs = *gv * scale;
                        *mi = beta1 * *mi + (1.0 - beta1) * gs;
                        *vi = beta2 * *vi + (1.0 - beta2) * gs * gs;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                        *gv = 0.0;
                    }
                }
            }
        }
        Ok(())
    }
}
