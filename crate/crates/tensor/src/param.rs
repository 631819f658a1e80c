//! Named trainable parameters, non-trainable buffers, and the store that
//! owns them.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::{Grads, Tensor};

/// Initial values of a freshly registered parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the default for conv kernels
    /// and biases in common frameworks.
    FanInUniform { fan_in: usize },
    Uniform(f64),
    Const(f64),
}

pub struct Param<T: Element> {
    name: String,
    shape: Vec<usize>,
    data: RefCell<Rc<Vec<T>>>,
    leaf: RefCell<Option<Tensor<T>>>,
    frozen: Rc<Cell<bool>>,
}

impl<T: Element> Param<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.borrow().len()
    }

    /// Leaf tensor for use in a forward pass. It requires a gradient unless
    /// the owning store is frozen. Repeated calls return the same leaf until
    /// the data changes, so gradients of shared uses accumulate.
    pub fn tensor(&self) -> Tensor<T> {
        let trainable = !self.frozen.get();
        let mut leaf = self.leaf.borrow_mut();
        if let Some(t) = leaf.as_ref() {
            if t.requires_grad() == trainable {
                return t.clone();
            }
        }
        let t = Tensor::leaf(Rc::clone(&self.data.borrow()), self.shape.clone(), trainable);
        *leaf = Some(t.clone());
        t
    }

    pub fn values(&self) -> Rc<Vec<T>> {
        Rc::clone(&self.data.borrow())
    }

    pub fn set_values(&self, values: Vec<T>) -> Result<()> {
        if values.len() != self.numel() {
            return Err(TensorError::DataLength {
                shape: self.shape.clone(),
                len: values.len(),
            });
        }
        *self.data.borrow_mut() = Rc::new(values);
        *self.leaf.borrow_mut() = None;
        Ok(())
    }

    /// Gradient of this parameter from a sweep over a graph that used it.
    pub fn grad<'g>(&self, grads: &'g Grads<T>) -> Option<&'g [T]> {
        self.leaf.borrow().as_ref().and_then(|t| grads.get(t))
    }
}

/// Non-trainable state saved with the model (batch-norm running statistics).
pub struct Buffer<T: Element> {
    name: String,
    values: RefCell<Vec<T>>,
}

impl<T: Element> Buffer<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn values(&self) -> std::cell::Ref<'_, Vec<T>> {
        self.values.borrow()
    }

    pub fn set_values(&self, v: Vec<T>) -> Result<()> {
        if v.len() != self.values.borrow().len() {
            return Err(TensorError::Mismatch(format!(
                "buffer {} expects {} values, got {}",
                self.name,
                self.values.borrow().len(),
                v.len()
            )));
        }
        *self.values.borrow_mut() = v;
        Ok(())
    }

    pub fn update(&self, f: impl FnOnce(&mut Vec<T>)) {
        f(&mut self.values.borrow_mut());
    }
}

struct StoreInner<T: Element> {
    params: RefCell<Vec<Rc<Param<T>>>>,
    buffers: RefCell<Vec<Rc<Buffer<T>>>>,
    frozen: Rc<Cell<bool>>,
    rng: RefCell<ChaCha8Rng>,
}

/// Owner of every parameter and buffer of one network, in registration
/// order. Cloning shares the same store.
pub struct ParamStore<T: Element>(Rc<StoreInner<T>>);

impl<T: Element> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        ParamStore(Rc::clone(&self.0))
    }
}

/// Named tensor snapshot used for checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedValues<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Element> ParamStore<T> {
    /// New empty store whose initializers draw from a seeded stream.
    pub fn new(seed: u64) -> Self {
        ParamStore(Rc::new(StoreInner {
            params: RefCell::new(Vec::new()),
            buffers: RefCell::new(Vec::new()),
            frozen: Rc::new(Cell::new(false)),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }))
    }

    pub fn root(&self) -> Scope<T> {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    /// While frozen, [`Param::tensor`] hands out leaves that do not require
    /// gradients, so no parameter gradient is computed or applied.
    pub fn set_frozen(&self, frozen: bool) {
        self.0.frozen.set(frozen);
    }

    pub fn is_frozen(&self) -> bool {
        self.0.frozen.get()
    }

    pub fn params(&self) -> Vec<Rc<Param<T>>> {
        self.0.params.borrow().clone()
    }

    pub fn buffers(&self) -> Vec<Rc<Buffer<T>>> {
        self.0.buffers.borrow().clone()
    }

    pub fn num_scalars(&self) -> usize {
        self.0.params.borrow().iter().map(|p| p.numel()).sum()
    }

    pub fn snapshot_params(&self) -> Vec<NamedValues<T>> {
        self.0
            .params
            .borrow()
            .iter()
            .map(|p| NamedValues {
                name: p.name.clone(),
                shape: p.shape.clone(),
                values: p.values().as_ref().clone(),
            })
            .collect()
    }

    pub fn snapshot_buffers(&self) -> Vec<NamedValues<T>> {
        self.0
            .buffers
            .borrow()
            .iter()
            .map(|b| {
                let v = b.values().clone();
                NamedValues {
                    name: b.name.clone(),
                    shape: vec![v.len()],
                    values: v,
                }
            })
            .collect()
    }

    /// Restores parameters and buffers by name. Every entry of the store
    /// must be present with a matching size.
    pub fn load(&self, params: &[NamedValues<T>], buffers: &[NamedValues<T>]) -> Result<()> {
        for p in self.0.params.borrow().iter() {
            let src = params
                .iter()
                .find(|n| n.name == p.name)
                .ok_or_else(|| TensorError::Invalid(format!("missing parameter {}", p.name)))?;
            if src.shape != p.shape {
                return Err(TensorError::Mismatch(format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    p.name, p.shape, src.shape
                )));
            }
            p.set_values(src.values.clone())?;
        }
        for b in self.0.buffers.borrow().iter() {
            let src = buffers
                .iter()
                .find(|n| n.name == b.name)
                .ok_or_else(|| TensorError::Invalid(format!("missing buffer {}", b.name)))?;
            b.set_values(src.values.clone())?;
        }
        Ok(())
    }

    /// Copies every value from another store with identical layout.
    pub fn copy_from(&self, other: &ParamStore<T>) -> Result<()> {
        self.load(&other.snapshot_params(), &other.snapshot_buffers())
    }
}

/// Hierarchical naming handle used while building a network.
#[derive(Clone)]
pub struct Scope<T: Element> {
    store: ParamStore<T>,
    prefix: String,
}

impl<T: Element> Scope<T> {
    pub fn sub(&self, name: impl AsRef<str>) -> Scope<T> {
        Scope {
            store: self.store.clone(),
            prefix: self.qualify(name.as_ref()),
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Rc<Param<T>> {
        let full = self.qualify(name);
        let inner = &self.store.0;
        assert!(
            inner.params.borrow().iter().all(|p| p.name != full),
            "duplicate parameter name {full}"
        );
        let n: usize = shape.iter().product();
        let values: Vec<T> = {
            let mut rng = inner.rng.borrow_mut();
            match init {
                Init::FanInUniform { fan_in } => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect()
                }
                Init::Uniform(bound) => (0..n)
                    .map(|_| T::from_f64(if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 }))
                    .collect(),
                Init::Const(v) => vec![T::from_f64(v); n],
            }
        };
        let p = Rc::new(Param {
            name: full,
            shape: shape.to_vec(),
            data: RefCell::new(Rc::new(values)),
            leaf: RefCell::new(None),
            frozen: Rc::clone(&inner.frozen),
        });
        inner.params.borrow_mut().push(Rc::clone(&p));
        p
    }

    pub fn buffer(&self, name: &str, values: Vec<T>) -> Rc<Buffer<T>> {
        let full = self.qualify(name);
        let inner = &self.store.0;
        assert!(
            inner.buffers.borrow().iter().all(|b| b.name != full),
            "duplicate buffer name {full}"
        );
        let b = Rc::new(Buffer {
            name: full,
            values: RefCell::new(values),
        });
        inner.buffers.borrow_mut().push(Rc::clone(&b));
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_param_gradients_accumulate() {
        let store = ParamStore::<f64>::new(0);
        let w = store.root().param("w", &[1], Init::Const(3.0));
        let y = w.tensor().mul(&w.tensor()).unwrap().sum_all();
        let g = y.backward();
        assert_eq!(w.grad(&g).unwrap(), &[6.0]);
    }

    #[test]
    fn frozen_store_yields_no_gradients() {
        let store = ParamStore::<f64>::new(0);
        let w = store.root().sub("layer").param("w", &[2], Init::Const(1.0));
        assert_eq!(w.name(), "layer.w");
        store.set_frozen(true);
        let x = Tensor::<f64>::ones(&[2]).requires_grad_leaf();
        let g = x.mul(&w.tensor()).unwrap().sum_all().backward();
        assert!(w.grad(&g).is_none());
        assert_eq!(g.get(&x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = ParamStore::<f32>::new(9);
        let b = ParamStore::<f32>::new(9);
        let pa = a.root().param("w", &[16], Init::FanInUniform { fan_in: 4 });
        let pb = b.root().param("w", &[16], Init::FanInUniform { fan_in: 4 });
        assert_eq!(pa.values(), pb.values());
        assert!(pa.values().iter().all(|v| v.abs() <= 0.5));
    }
}
