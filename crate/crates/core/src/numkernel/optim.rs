use super::tape::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update from the accumulated `grad` of every parameter, then
    /// clear the gradients. Parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            let Some(grad) = p.grad.take() else { continue };
            let n = p.value.numel();
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let mut next = p.value.data().to_vec();
            for i in 0..n {
                let g = grad.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                next[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.value = Tensor::from_parts(p.value.shape().to_vec(), next);
        }
    }
}
