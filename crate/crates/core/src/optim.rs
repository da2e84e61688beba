//! Trainable parameter storage and the Adam update rule.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

pub struct Slot<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Flat, deterministically ordered store of trainable tensors.
pub struct ParamStore<T> {
    slots: Vec<Slot<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { slots: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let dims = value.dims().to_vec();
        self.slots.push(Slot {
            name: name.into(),
            value,
            grad: Tensor::zeros(&dims),
            m: Tensor::zeros(&dims),
            v: Tensor::zeros(&dims),
        });
        ParamId(self.slots.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.slots[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<T>) -> Result<()> {
        self.slots[id.0].grad.add_assign(g)
    }

    pub fn zero_grads(&mut self) {
        for s in self.slots.iter_mut() {
            s.grad.data_mut().fill(T::zero());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Slot<T>)> {
        self.slots.iter().enumerate().map(|(i, s)| (ParamId(i), s))
    }

    /// Snapshot of all parameter values, for best-checkpoint bookkeeping.
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.slots.iter().map(|s| s.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor<T>]) -> Result<()> {
        if snapshot.len() != self.slots.len() {
            return Err(Error::config("parameter snapshot does not match store"));
        }
        for (s, v) in self.slots.iter_mut().zip(snapshot) {
            s.value = v.clone();
        }
        Ok(())
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Bias-corrected Adam applied to one parameter tensor in place.
pub fn adam_step<T: Scalar>(
    value: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
) {
    let one = T::one();
    let bc1 = one - beta1.powi(step as i32);
    let bc2 = one - beta2.powi(step as i32);
    for i in 0..value.len() {
        let g = grad[i];
        m[i] = beta1 * m[i] + (one - beta1) * g;
        v[i] = beta2 * v[i] + (one - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        value[i] = value[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One optimizer step over every slot; clears gradients afterwards.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let (lr, b1, b2, eps) = (
            T::from_f64(self.lr),
            T::from_f64(self.beta1),
            T::from_f64(self.beta2),
            T::from_f64(self.eps),
        );
        for slot in store.slots.iter_mut() {
            let Slot {
                value, grad, m, v, ..
            } = slot;
            adam_step(
                value.data_mut(),
                grad.data(),
                m.data_mut(),
                v.data_mut(),
                self.step,
                lr,
                b1,
                b2,
                eps,
            );
            grad.data_mut().fill(T::zero());
        }
    }
}
