use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::element::Element;
use crate::error::{Result, TensorError};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Local derivative rule of one recorded operation.
///
/// `backward` receives the parents in the order they were recorded, the
/// forward output and the upstream gradient, and returns one entry per
/// parent (`None` for parents that do not require a gradient).
pub(crate) trait Backward<T: Element> {
    fn backward(&self, parents: &[Tensor<T>], out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>>;
}

struct GradFn<T: Element> {
    parents: Vec<Tensor<T>>,
    op: Box<dyn Backward<T>>,
}

struct Node<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// Reference-counted n-dimensional array that records the operations used
/// to build it so gradients can be propagated back to its leaves.
///
/// Cloning is cheap (one `Rc` bump). Image batches use NCHW layout.
pub struct Tensor<T: Element>(Rc<Node<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self::leaf(Rc::new(data), shape.to_vec(), false))
    }

    pub(crate) fn leaf(data: Rc<Vec<T>>, shape: Vec<usize>, requires_grad: bool) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad_fn: None,
        }))
    }

    /// Builds the output of a recorded operation. The graph edge is kept only
    /// when some parent requires a gradient.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        op: impl Backward<T> + 'static,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn {
            parents,
            op: Box::new(op),
        });
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: Rc::new(data),
            requires_grad,
            grad_fn,
        }))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::ZERO)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::ONE)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::leaf(Rc::new(vec![value; n]), shape.to_vec(), false)
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    /// Returns a leaf sharing this tensor's storage that requires a gradient.
    pub fn requires_grad_leaf(&self) -> Self {
        Self::leaf(Rc::clone(&self.0.data), self.0.shape.clone(), true)
    }

    /// Returns a leaf sharing this tensor's storage with no graph history.
    pub fn detach(&self) -> Self {
        Self::leaf(Rc::clone(&self.0.data), self.0.shape.clone(), false)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub(crate) fn storage(&self) -> &Rc<Vec<T>> {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.as_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// First element; intended for scalar losses.
    pub fn item(&self) -> T {
        self.0.data[0]
    }

    /// `(batch, channels, height, width)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.0.shape.as_slice() {
            &[b, c, h, w] => Ok((b, c, h, w)),
            s => Err(TensorError::Rank {
                expected: 4,
                shape: s.to_vec(),
            }),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from this tensor. The seed gradient is all ones,
    /// so for a scalar loss the result holds `d loss / d leaf` for every
    /// leaf that requires a gradient. Intermediate gradients are released
    /// as soon as they have been propagated.
    pub fn backward(&self) -> Grads<T> {
        let mut grads = Grads {
            map: HashMap::new(),
        };
        if !self.requires_grad() {
            return grads;
        }

        // Ids increase monotonically with creation time, and every parent is
        // created before its child, so descending id order is a valid
        // reverse topological order.
        let mut nodes: Vec<Tensor<T>> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(gf) = &t.0.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && !seen.contains(&p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            nodes.push(t);
        }
        nodes.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));

        grads.map.insert(self.id(), vec![T::ONE; self.numel()]);
        for node in &nodes {
            let Some(gf) = &node.0.grad_fn else {
                continue;
            };
            let Some(g) = grads.map.remove(&node.id()) else {
                continue;
            };
            let parent_grads = gf.op.backward(&gf.parents, node.data(), &g);
            debug_assert_eq!(parent_grads.len(), gf.parents.len());
            for (p, pg) in gf.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), p.numel());
                match grads.map.get_mut(&p.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                    None => {
                        grads.map.insert(p.id(), pg);
                    }
                }
            }
        }
        grads
    }
}

/// Gradients of a backward sweep keyed by leaf tensor.
pub struct Grads<T: Element> {
    map: HashMap<u64, Vec<T>>,
}

impl<T: Element> Grads<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.map.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn tensor(&self, t: &Tensor<T>) -> Option<Tensor<T>> {
        self.get(t)
            .map(|g| Tensor::leaf(Rc::new(g.to_vec()), t.shape().to_vec(), false))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
