use super::params::{ParamGrads, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Parameters without a gradient in a step are
/// left untouched and their moments are not decayed.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: Vec<u64>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Adam {
            config,
            step: vec![0; store.len()],
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        for id in store.ids() {
            let Some(g) = grads.get(id) else { continue };
            let k = id.index();
            self.step[k] += 1;
            let t = self.step[k] as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = store.get_mut(id).data_mut();
            for (((p, m), v), &g) in p
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(g.data())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Flattened state for checkpointing: `(step counts, first moments, second moments)`.
    pub fn state(&self) -> (&[u64], &[Tensor], &[Tensor]) {
        (&self.step, &self.m, &self.v)
    }

    pub fn restore(&mut self, step: Vec<u64>, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        let ok = step.len() == self.step.len()
            && m.len() == self.m.len()
            && v.len() == self.v.len()
            && m.iter().zip(&self.m).all(|(a, b)| a.shape() == b.shape())
            && v.iter().zip(&self.v).all(|(a, b)| a.shape() == b.shape());
        if !ok {
            return Err(Error::Integrity("optimizer state layout mismatch".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamId;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        let mut adam = Adam::new(&store, AdamConfig::default());
        let mut grads = ParamGrads::new();
        grads.accumulate(id, &Tensor::from_vec(&[2], vec![0.3, -5.0]).unwrap());
        adam.step(&mut store, &grads, 0.1);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn missing_gradient_leaves_parameter_alone() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_vec(&[1], vec![2.0]).unwrap());
        let b = store.add("b", Tensor::from_vec(&[1], vec![3.0]).unwrap());
        let mut adam = Adam::new(&store, AdamConfig::default());
        let mut grads = ParamGrads::new();
        grads.accumulate(b, &Tensor::from_vec(&[1], vec![1.0]).unwrap());
        adam.step(&mut store, &grads, 0.5);
        assert_eq!(store.get(a).data(), &[2.0]);
        assert_eq!(adam.state().0, &[0, 1]);
        let _ = ParamId(0);
    }
}
