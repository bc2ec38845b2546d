use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

struct Inner<T: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<T>>>,
}

/// A shared handle to an n-dimensional array of floats.
///
/// Values are row-major. Once created, `data` is only mutated by the
/// optimizer; gradients accumulate with `+=` semantics and are zeroed
/// explicitly.
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(false),
                grad: RefCell::new(None),
            }),
        })
    }

    /// A trainable leaf.
    pub fn param(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        t.inner.requires_grad.set(true);
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(vec![T::zero(); numel]),
                requires_grad: Cell::new(false),
                grad: RefCell::new(None),
            }),
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::new(vec![1], vec![v]).expect("scalar shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn rows(&self) -> usize {
        self.inner.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.inner.shape.len() >= 2 {
            self.inner.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value; panics on non-scalar tensors.
    pub fn value(&self) -> T {
        assert_eq!(self.numel(), 1, "value() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, v: bool) {
        self.inner.requires_grad.set(v);
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    /// Accumulate into the gradient buffer, materializing it on first use.
    pub fn accum_grad(&self, g: &[T]) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, &gi) in buf.iter_mut().zip(g) {
                    *b = *b + gi;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&self) {
        let mut slot = self.inner.grad.borrow_mut();
        if let Some(buf) = slot.as_mut() {
            for b in buf.iter_mut() {
                *b = T::zero();
            }
        }
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// In-place data update (optimizer use only).
    pub fn apply_update(&self, f: impl Fn(usize, T) -> T) {
        let mut data = self.inner.data.borrow_mut();
        for (i, v) in data.iter_mut().enumerate() {
            *v = f(i, *v);
        }
    }

    pub fn set_data(&self, values: &[T]) {
        let mut data = self.inner.data.borrow_mut();
        assert_eq!(data.len(), values.len());
        data.copy_from_slice(values);
    }

    /// Stable identity for this handle (pointer-based).
    pub fn id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    /// A detached copy sharing no storage and carrying no gradient.
    pub fn detached(&self) -> Self {
        Self::new(self.inner.shape.clone(), self.to_vec()).expect("detached copy")
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    /// Elementwise L2 norm of the data.
    pub fn norm(&self) -> f64 {
        self.inner
            .data
            .borrow()
            .iter()
            .map(|v| v.into_f64() * v.into_f64())
            .sum::<f64>()
            .sqrt()
    }
}
