//! Adam and plain gradient descent over a group of parameters.

use super::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Method {
    pub const ADAM: Method = Method::Adam { beta1: 0.5, beta2: 0.999, eps: 1e-8 };
}

/// Update rule bound to a fixed parameter group. Moments are kept per
/// parameter in the element type of the store.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    method: Method,
    group: Vec<ParamId>,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Real> Optimizer<T> {
    pub fn new(method: Method, group: Vec<ParamId>, store: &ParamStore<T>) -> Self {
        let zeros = |on: bool| -> Vec<Vec<T>> {
            group.iter().map(|&id| if on { vec![T::zero(); store.entry(id).len()] } else { Vec::new() }).collect()
        };
        let adam = matches!(method, Method::Adam { .. });
        Optimizer { method, first: zeros(adam), second: zeros(adam), group, steps: 0 }
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn group(&self) -> &[ParamId] {
        &self.group
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the gradients accumulated in `store`, then
    /// zeroes those gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (slot, &id) in self.group.iter().enumerate() {
            let entry = store.entry_mut(id);
            let (value, grad) = entry.value_and_grad_mut();
            if grad.len() != value.len() {
                return Err(Error::shape("gradient and parameter lengths differ"));
            }
            match self.method {
                Method::Sgd => {
                    let lr = T::of(lr);
                    value.iter_mut().zip(grad).for_each(|(p, &g)| *p -= lr * g);
                }
                Method::Adam { beta1, beta2, eps } => {
                    let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((p, &g), mi), vi) in value.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = T::of(beta1) * *mi + T::of(1.0 - beta1) * g;
                        *vi = T::of(beta2) * *vi + T::of(1.0 - beta2) * g * g;
                        let mhat = mi.f64() / c1;
                        let vhat = vi.f64() / c2;
                        *p -= T::of(lr * mhat / (vhat.sqrt() + eps));
                    }
                }
            }
            store.zero_grad_of(id);
        }
        Ok(())
    }

    /// Moment buffers in group order, empty for SGD.
    pub fn moments(&self) -> impl Iterator<Item = (ParamId, &[T], &[T])> {
        self.group
            .iter()
            .zip(self.first.iter().zip(&self.second))
            .map(|(&id, (m, v))| (id, m.as_slice(), v.as_slice()))
    }

    pub fn restore(&mut self, steps: u64, moments: Vec<(Vec<T>, Vec<T>)>) -> Result<()> {
        if moments.len() != self.group.len() {
            return Err(Error::shape(format!("{} moment pairs for {} parameters", moments.len(), self.group.len())));
        }
        for (slot, (m, v)) in moments.into_iter().enumerate() {
            if m.len() != self.first[slot].len() || v.len() != self.second[slot].len() {
                return Err(Error::shape("optimizer moment length mismatch"));
            }
            self.first[slot] = m;
            self.second[slot] = v;
        }
        self.steps = steps;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", [1, 1, 1, 3], vec![1.0, -2.0, 3.0]).unwrap();
        for method in [Method::ADAM, Method::Sgd] {
            let mut opt = Optimizer::new(method, vec![id], &store);
            opt.step(&mut store, 0.1).unwrap();
            assert_eq!(store.entry(id).value(), &[1.0, -2.0, 3.0]);
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", [1, 1, 1, 1], vec![0.0]).unwrap();
        store.add_to_grad(id, &[1.0]);
        let mut opt = Optimizer::new(Method::ADAM, vec![id], &store);
        opt.step(&mut store, 0.1).unwrap();
        // m_hat = 1, v_hat = 1
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((store.entry(id).value()[0] - expected).abs() < 1e-15);
        assert_eq!(store.entry(id).grad(), &[0.0]);
    }

    #[test]
    fn sgd_is_plain_descent() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", [1, 1, 1, 2], vec![1.0, 1.0]).unwrap();
        store.add_to_grad(id, &[2.0, -4.0]);
        let mut opt = Optimizer::new(Method::Sgd, vec![id], &store);
        opt.step(&mut store, 0.25).unwrap();
        assert_eq!(store.entry(id).value(), &[0.5, 2.0]);
    }

    #[test]
    fn only_group_is_updated() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", [1, 1, 1, 1], vec![1.0]).unwrap();
        let b = store.add("b", [1, 1, 1, 1], vec![1.0]).unwrap();
        store.add_to_grad(a, &[1.0]);
        store.add_to_grad(b, &[1.0]);
        Optimizer::new(Method::Sgd, vec![a], &store).step(&mut store, 1.0).unwrap();
        assert_eq!(store.entry(a).value(), &[0.0]);
        assert_eq!(store.entry(b).value(), &[1.0]);
        assert_eq!(store.entry(b).grad(), &[1.0]);
    }

    #[test]
    fn rejects_bad_rate() {
        let store = ParamStore::<f64>::new();
        let mut s = store.clone();
        assert!(Optimizer::new(Method::Sgd, vec![], &store).step(&mut s, 0.0).is_err());
    }
}
