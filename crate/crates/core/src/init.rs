use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numkernel::{ParamId, ParamStore, Tensor};

/// Deterministic parameter factory: registers named tensors in a store,
/// drawing random values from one seeded stream in registration order.
pub struct Init<'s> {
    pub store: &'s mut ParamStore,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'s> Init<'s> {
    pub fn new(store: &'s mut ParamStore, seed: u64) -> Self {
        Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    /// Run `f` with `scope` appended to the parameter name prefix.
    pub fn scoped<T>(&mut self, scope: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.prefix.push(scope.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.add(full, value)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.tensor(name, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64) -> Result<ParamId> {
        let t = Tensor::uniform(shape, lo, hi, &mut self.rng);
        self.tensor(name, t)
    }

    pub fn full(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        self.tensor(name, Tensor::full(shape, v))
    }

    /// Fan-in scaled Gaussian (He-style, gain 1).
    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        self.normal(name, shape, (1.0 / fan_in.max(1) as f64).sqrt())
    }
}
