//! Reverse-mode tape. Every primitive in [`crate::ops`] records its output
//! value together with a closure that maps the output gradient back onto
//! its inputs.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) type BackwardFn<F> = Box<dyn Fn(&[Tensor<F>], &[F], &mut GradSink<'_, F>) + Send + Sync>;

/// Write access to the gradient buffers of nodes recorded before the one
/// currently being differentiated.
pub struct GradSink<'a, F: Scalar> {
    grads: &'a mut [Option<Vec<F>>],
    requires: &'a [bool],
    values: &'a [Tensor<F>],
}

impl<F: Scalar> GradSink<'_, F> {
    pub fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient accumulator of `v`, zero-initialised on first access.
    pub fn buf(&mut self, v: Var) -> &mut [F] {
        let n = self.values[v.0].len();
        self.grads[v.0].get_or_insert_with(|| vec![F::zero(); n])
    }

    /// Accumulator only when `v` participates in differentiation.
    pub fn get(&mut self, v: Var) -> Option<&mut [F]> {
        if self.requires[v.0] {
            Some(self.buf(v))
        } else {
            None
        }
    }
}

pub struct Tape<F: Scalar> {
    values: Vec<Tensor<F>>,
    requires: Vec<bool>,
    backward: Vec<Option<BackwardFn<F>>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            requires: Vec::new(),
            backward: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Records an input. `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.values.push(value);
        self.requires.push(requires_grad);
        self.backward.push(None);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub(crate) fn push<B>(&mut self, value: Tensor<F>, parents: &[Var], backward: B) -> Var
    where
        B: Fn(&[Tensor<F>], &[F], &mut GradSink<'_, F>) + Send + Sync + 'static,
    {
        if cfg!(debug_assertions)
            && !value.is_finite()
            && parents.iter().all(|p| self.values[p.0].is_finite())
        {
            panic!(
                "non-finite output of shape {:?} from finite inputs",
                value.shape()
            );
        }
        let requires = parents.iter().any(|p| self.requires[p.0]);
        self.values.push(value);
        self.requires.push(requires);
        self.backward.push(if requires {
            Some(Box::new(backward))
        } else {
            None
        });
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// Back-propagates from a scalar node. Gradients accumulate, so call
    /// [`Tape::zero_grads`] before a second pass over the same tape.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.values[root.0].len() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                lhs: self.values[root.0].shape().to_vec(),
                rhs: vec![1],
            });
        }
        self.backward_with(root, vec![F::one()])
    }

    /// Back-propagates a caller-supplied output gradient from `root`.
    pub fn backward_with(&mut self, root: Var, seed: Vec<F>) -> Result<()> {
        if seed.len() != self.values[root.0].len() {
            return Err(Error::Dimension {
                op: "backward",
                lhs: self.values[root.0].shape().to_vec(),
                rhs: vec![seed.len()],
            });
        }
        match self.grads[root.0].as_mut() {
            Some(g) => g.iter_mut().zip(&seed).for_each(|(a, b)| *a += *b),
            None => self.grads[root.0] = Some(seed),
        }
        for i in (0..=root.0).rev() {
            if !self.requires[i] {
                continue;
            }
            let Some(f) = self.backward[i].as_ref() else {
                continue;
            };
            let Some(out_grad) = self.grads[i].take() else {
                continue;
            };
            let (before, _) = self.grads.split_at_mut(i);
            let mut sink = GradSink {
                grads: before,
                requires: &self.requires[..i],
                values: &self.values[..i],
            };
            f(&self.values, &out_grad, &mut sink);
            self.grads[i] = Some(out_grad);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads[v.0].take()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }
}
