use std::collections::HashMap;

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named trainable tensor plus its Adam moment buffers.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    m: Vec<T>,
    v: Vec<T>,
}

/// Ordered parameter list of one model; each name is registered once.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn register(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        let id = ParamId(self.params.len());
        let n = tensor.len();
        self.params.push(Parameter {
            name: name.to_string(),
            tensor: tensor.with_grad(),
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Copies of every parameter value, in registration order.
    pub fn snapshot(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| p.tensor.data().to_vec()).collect()
    }

    pub fn restore(&mut self, snap: &[Vec<T>]) -> Result<()> {
        if snap.len() != self.params.len() {
            return Err(Error::Contract("snapshot has a different parameter count".into()));
        }
        for (p, s) in self.params.iter_mut().zip(snap) {
            if s.len() != p.tensor.len() {
                return Err(Error::Contract(format!("snapshot size mismatch for {}", p.name)));
            }
            p.tensor.data_mut().copy_from_slice(s);
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter, then clears gradients.
    ///
    /// Fails without touching anything if some parameter holds no gradient.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some(p) = store.params.iter().find(|p| p.tensor.grad.is_none()) {
            return Err(Error::Contract(format!("parameter {} has no gradient", p.name)));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let one = T::one();
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        let lr = T::from_f64_lossy(self.lr);
        let eps = T::from_f64_lossy(self.eps);
        for p in store.params.iter_mut() {
            let g = p.tensor.grad.take().expect("checked above");
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                p.m[i] = b1 * p.m[i] + (one - b1) * g[i];
                p.v[i] = b2 * p.v[i] + (one - b2) * g[i] * g[i];
                let mh = p.m[i] / c1;
                let vh = p.v[i] / c2;
                data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One Adam update over `store` at learning rate `lr`.
pub fn optimizer_step<T: Scalar>(store: &mut ParamStore<T>, opt: &mut Adam, lr: f64) -> Result<()> {
    opt.lr = lr;
    opt.step(store)
}
