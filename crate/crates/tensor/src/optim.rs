use crate::{ParamStore, Result, Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients so their global norm does not exceed this.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// Adaptive moment estimation over the trainable parameters of a store.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |_| Vec::new();
        Self {
            config,
            step: 0,
            first: (0..store.len()).map(zeros).collect(),
            second: (0..store.len()).map(zeros).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> f64 {
        let norm = store.grad_norm();
        let clip = match self.config.clip_norm {
            Some(max) if norm > max && norm > 0.0 => T::from_f64(max / norm),
            _ => T::one(),
        };
        self.step += 1;
        let c = &self.config;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::from_f64(c.lr);
        let eps = T::from_f64(c.eps);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let n = p.shape.iter().product::<usize>();
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            if m.len() != n {
                m.resize(n, T::zero());
                v.resize(n, T::zero());
            }
            let grads: Vec<T> = p.grad().iter().map(|&g| g * clip).collect();
            let values = p.value_mut();
            for j in 0..n {
                let g = grads[j];
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                values[j] = values[j] - lr * mhat / (vhat.sqrt() + eps);
            }
            p.grad_mut().iter_mut().for_each(|g| *g = T::zero());
        }
        norm
    }

    /// Moment buffers as `(param index, first, second)` for every parameter
    /// that has been updated at least once.
    pub fn export_state(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>, Tensor<T>)> {
        store
            .iter()
            .filter(|(id, _)| !self.first[id.index()].is_empty())
            .map(|(id, p)| {
                let i = id.index();
                (
                    p.name.clone(),
                    Tensor::new(p.shape.clone(), self.first[i].clone()).expect("moment shape"),
                    Tensor::new(p.shape.clone(), self.second[i].clone()).expect("moment shape"),
                )
            })
            .collect()
    }

    pub fn import_state(
        &mut self,
        store: &ParamStore<T>,
        step: u64,
        moments: Vec<(String, Tensor<T>, Tensor<T>)>,
    ) -> Result<()> {
        self.step = step;
        for (name, m, v) in moments {
            let id = store
                .id(&name)
                .ok_or_else(|| TensorError::Contract(format!("optimizer state for unknown parameter {name}")))?;
            let p = store.get(id);
            if m.shape() != p.shape.as_slice() || v.shape() != p.shape.as_slice() {
                return Err(TensorError::Shape {
                    op: "import_state",
                    lhs: p.shape.clone(),
                    rhs: m.shape().to_vec(),
                });
            }
            self.first[id.index()] = m.into_data();
            self.second[id.index()] = v.into_data();
        }
        Ok(())
    }
}
