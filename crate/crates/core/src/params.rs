//! Named parameters, seeded initialisation and tape registration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{sc, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<F: Scalar = f32> {
    pub name: String,
    pub tensor: Tensor<F>,
    pub trainable: bool,
}

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Glorot { fan_in: usize, fan_out: usize },
    Uniform(f64),
    Constant(f64),
}

/// Ordered collection of parameters. Order is part of the checkpoint format
/// and of the deterministic gradient reduction.
#[derive(Debug, Clone)]
pub struct ParamStore<F: Scalar = f32> {
    params: Vec<Parameter<F>>,
    rng: ChaCha8Rng,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<F> = match init {
            Init::Zeros => vec![F::zero(); n],
            Init::Ones => vec![F::one(); n],
            Init::Constant(c) => vec![sc(c); n],
            Init::Glorot { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
                (0..n)
                    .map(|_| sc(self.rng.gen_range(-limit..=limit)))
                    .collect()
            }
            Init::Uniform(limit) => (0..n)
                .map(|_| sc(self.rng.gen_range(-limit..=limit)))
                .collect(),
        };
        self.params.push(Parameter {
            name: name.to_string(),
            tensor: Tensor::from_parts(shape.to_vec(), data),
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    /// Registers an already-built tensor.
    pub fn insert(&mut self, name: &str, tensor: Tensor<F>, trainable: bool) -> ParamId {
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Copies values from `other` by name and shape.
    pub fn load_from(&mut self, other: &[Parameter<F>]) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model expects {}",
                other.len(),
                self.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(other) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::Format(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    dst.name,
                    dst.tensor.shape(),
                    src.name,
                    src.tensor.shape()
                )));
            }
            dst.tensor = src.tensor.clone();
            dst.trainable = src.trainable;
        }
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            rng: self.rng.clone(),
        }
    }

    /// Records every parameter on `tape`. Frozen parameters are constants.
    pub fn bind(&self, tape: &mut Tape<F>) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| tape.leaf(p.tensor.clone(), p.trainable))
                .collect(),
        )
    }

    /// Copies of the trainable tensors, in store order.
    pub fn trainable_tensors(&self) -> Vec<Tensor<F>> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.clone())
            .collect()
    }

    /// Binds trainable parameters to caller-provided nodes (one per
    /// trainable parameter, in store order) and frozen ones as constants.
    pub fn bind_from(&self, tape: &mut Tape<F>, trainable: &[Var]) -> Result<Bound> {
        let mut it = trainable.iter();
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            if p.trainable {
                let v = *it.next().ok_or(Error::Length {
                    expected: self.params.iter().filter(|p| p.trainable).count(),
                    found: trainable.len(),
                })?;
                if tape.shape(v) != p.tensor.shape() {
                    return Err(Error::Dimension {
                        op: "bind_from",
                        lhs: p.tensor.shape().to_vec(),
                        rhs: tape.shape(v).to_vec(),
                    });
                }
                vars.push(v);
            } else {
                vars.push(tape.constant(p.tensor.clone()));
            }
        }
        Ok(Bound(vars))
    }

    /// Records every parameter as a constant, for inference.
    pub fn bind_constants(&self, tape: &mut Tape<F>) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| tape.constant(p.tensor.clone()))
                .collect(),
        )
    }

    /// Gradient of every parameter after `tape.backward`, zeros where absent.
    pub fn collect_grads(&self, tape: &Tape<F>, bound: &Bound) -> Vec<Vec<F>> {
        self.params
            .iter()
            .zip(&bound.0)
            .map(|(p, v)| {
                tape.grad(*v)
                    .filter(|_| p.trainable)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![F::zero(); p.tensor.len()])
            })
            .collect()
    }
}

/// Tape variables of a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_bounds_and_seeded() {
        let mut a = ParamStore::<f32>::new(7);
        let mut b = ParamStore::<f32>::new(7);
        let ia = a.add("w", &[8, 4], Init::Glorot { fan_in: 8, fan_out: 4 }, true);
        let ib = b.add("w", &[8, 4], Init::Glorot { fan_in: 8, fan_out: 4 }, true);
        let limit = (6.0f32 / 12.0).sqrt();
        assert!(a.get(ia).tensor.data().iter().all(|v| v.abs() <= limit));
        assert_eq!(a.get(ia).tensor, b.get(ib).tensor);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::<f64>::new(1);
        let w = store.add("w", &[2], Init::Ones, false);
        let v = store.add("v", &[2], Init::Ones, true);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let prod = tape.mul(bound.var(w), bound.var(v)).unwrap();
        let s = tape.sum_all(prod);
        tape.backward(s).unwrap();
        let grads = store.collect_grads(&tape, &bound);
        assert_eq!(grads[0], vec![0.0, 0.0]);
        assert_eq!(grads[1], vec![1.0, 1.0]);
    }
}
