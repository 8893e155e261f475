use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::Deref;
use std::sync::Arc;

use crate::{Graph, Result, Scalar, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named parameter tensor with its gradient buffer.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    value: Arc<Vec<T>>,
    grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn value(&self) -> &[T] {
        &self.value
    }

    pub fn grad(&self) -> &[T] {
        &self.grad
    }

    pub fn tensor(&self) -> Tensor<T> {
        Tensor::new(self.shape.clone(), self.value.as_ref().clone()).expect("param shape is consistent")
    }

    /// Mutable access to the values. Copies if a graph still shares them.
    pub fn value_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.value).as_mut_slice()
    }

    pub(crate) fn grad_mut(&mut self) -> &mut [T] {
        &mut self.grad
    }
}

/// Ordered collection of named parameters. Insertion order is stable and
/// defines checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let (shape, data) = value.into_parts();
        let grad = vec![T::zero(); data.len()];
        self.params.push(Param {
            name: name.clone(),
            shape,
            trainable,
            value: Arc::new(data),
            grad,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Replaces a parameter's values; the shape must match exactly.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.shape() != p.shape.as_slice() {
            return Err(TensorError::Shape {
                op: "set_value",
                lhs: p.shape.clone(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = Arc::new(value.into_data());
        Ok(())
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds per-parameter gradient contributions, in the given order.
    pub fn accumulate_grads(&mut self, grads: &[(ParamId, Vec<T>)]) {
        for (id, g) in grads {
            let dst = &mut self.params[id.0].grad;
            dst.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
        }
    }

    pub fn scale_grads(&mut self, factor: T) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = *g * factor);
        }
    }

    /// Euclidean norm of all trainable gradients, accumulated in `f64`.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Same parameters converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    trainable: p.trainable,
                    value: Arc::new(p.value.iter().map(|&v| U::from_f64(v.as_f64())).collect()),
                    grad: vec![U::zero(); p.grad.len()],
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }
}

/// A fresh [`Graph`] plus lazy bindings of store parameters as leaves.
///
/// Each parameter is bound at most once per session and shares its storage
/// with the store (no copy). Trainable parameters become gradient-tracking
/// leaves; frozen ones become constants.
pub struct Session<'a, T: Scalar> {
    graph: Graph<T>,
    store: &'a ParamStore<T>,
    bound: RefCell<Vec<Option<Var>>>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let p = &self.store.params[id.0];
        let v = self
            .graph
            .shared_leaf(p.shape.clone(), Arc::clone(&p.value), p.trainable);
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Gradients accumulated on the bound parameters, in parameter order.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<T>)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| self.graph.take_grad(v)).map(|g| (ParamId(i), g)))
            .collect()
    }
}

impl<T: Scalar> Deref for Session<'_, T> {
    type Target = Graph<T>;

    fn deref(&self) -> &Graph<T> {
        &self.graph
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_binds_once_and_collects_grads() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::new([2], vec![1.0, 2.0]).unwrap(), true).unwrap();
        let frozen = store.add("f", Tensor::new([2], vec![3.0, 4.0]).unwrap(), false).unwrap();
        assert!(store.add("w", Tensor::zeros([1]), true).is_err());
        let grads = {
            let s = Session::new(&store);
            let a = s.param(w);
            assert_eq!(a, s.param(w));
            let b = s.param(frozen);
            let y = s.mul(a, b).unwrap();
            let l = s.sum(y);
            s.backward(l).unwrap();
            s.param_grads()
        };
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].1, vec![3.0, 4.0]);
        store.accumulate_grads(&grads);
        assert_eq!(store.get(w).grad(), &[3.0, 4.0]);
        assert!((store.grad_norm() - 5.0).abs() < 1e-12);
    }
}
