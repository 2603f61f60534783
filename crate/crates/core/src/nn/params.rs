//! Flat, named parameter storage shared by every network in the pipeline.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]; gradients live in a
//! [`Grads`] buffer with the identical layout, which keeps the optimizer,
//! the EMA shadow, checkpointing and finite-difference checks uniform.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    data: Vec<Vec<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            shapes: Vec::new(),
            data: Vec::new(),
        }
    }
}

/// How a freshly registered tensor is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Normal with std `sqrt(2 / fan_in)`.
    He {
        fan_in: usize,
    },
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Const(v) => vec![T::of(v); n],
            Init::He { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                (0..n).map(|_| T::of(std * rng.normal())).collect()
            }
        };
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.data.push(data);
        ParamId(self.data.len() - 1)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.data[id.0]
    }
    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.data[id.0]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }
    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.data.len()).map(ParamId)
    }
    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }

    pub fn tensors(&self) -> &[Vec<T>] {
        &self.data
    }
    pub fn tensors_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.data
    }

    /// Scalar at a flat position across all tensors (for gradient checks).
    pub fn flat_locate(&self, mut k: usize) -> (ParamId, usize) {
        for (i, t) in self.data.iter().enumerate() {
            if k < t.len() {
                return (ParamId(i), k);
            }
            k -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.data {
            t.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn zeros_like(&self) -> Grads<T> {
        Grads {
            data: self.data.iter().map(|t| vec![T::zero(); t.len()]).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            data: self
                .data
                .iter()
                .map(|t| t.iter().map(|&v| U::of(v.f64())).collect())
                .collect(),
        }
    }

    /// Overwrites values from another store with identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        self.check_layout(&other.names, &other.shapes)?;
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            d.copy_from_slice(s);
        }
        Ok(())
    }

    pub fn check_layout(&self, names: &[String], shapes: &[Vec<usize>]) -> Result<()> {
        if names.len() != self.names.len() {
            return Err(shape_err!(
                "expected {} parameter tensors, found {}",
                self.names.len(),
                names.len()
            ));
        }
        for (i, (n, s)) in names.iter().zip(shapes).enumerate() {
            if *n != self.names[i] || *s != self.shapes[i] {
                return Err(shape_err!(
                    "parameter {} has shape {:?}, expected {} with shape {:?}",
                    n,
                    s,
                    self.names[i],
                    self.shapes[i]
                ));
            }
        }
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }
}

/// Gradient accumulator laid out like its [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    data: Vec<Vec<T>>,
}

impl<T: Real> Grads<T> {
    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.data[id.0]
    }
    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.data[id.0]
    }
    pub fn tensors(&self) -> &[Vec<T>] {
        &self.data
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.data {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn flat(&self, (id, k): (ParamId, usize)) -> T {
        self.data[id.0][k]
    }

    pub fn first_non_finite(&self) -> Option<(ParamId, usize)> {
        self.data.iter().enumerate().find_map(|(i, t)| {
            t.iter()
                .position(|v| !v.is_finite())
                .map(|k| (ParamId(i), k))
        })
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|t| t.iter().all(|v| *v == T::zero()))
    }
}
