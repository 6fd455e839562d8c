//! Named parameter storage and the builders that define its layout.
//!
//! Model structures are written once, generically over a [`ParamSource`].
//! Running the same builder against an [`Initializer`] creates a fresh
//! [`ParamSet`], against a [`Binder`] it maps an existing set onto a tape, and
//! against a [`ShapeCollector`] it only enumerates names and shapes. The
//! builder's call order is therefore the canonical parameter order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in ±√(6/(fan_in+fan_out)).
    XavierUniform { fan_in: usize, fan_out: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
}

pub trait ParamSource {
    type Out;

    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Self::Out>;
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F: Scalar> {
    entries: Vec<(String, Tensor<F>)>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn from_entries(entries: Vec<(String, Tensor<F>)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<F>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Replaces the tensor at `index`; the shape must not change.
    pub fn set(&mut self, index: usize, value: Tensor<F>) -> Result<()> {
        let (name, slot) = &mut self.entries[index];
        if slot.shape() != value.shape() {
            return Err(Error::Params(format!(
                "`{name}` has shape {:?}, cannot assign {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Replaces a tensor by name.
    pub fn set_named(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let index = self
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Params(format!("no parameter named `{name}`")))?;
        self.set(index, value)
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    pub fn into_entries(self) -> Vec<(String, Tensor<F>)> {
        self.entries
    }
}

/// Creates freshly initialized parameters.
pub struct Initializer<'r, F: Scalar> {
    rng: &'r mut ChaCha8Rng,
    entries: Vec<(String, Tensor<F>)>,
}

impl<'r, F: Scalar> Initializer<'r, F> {
    pub fn new(rng: &'r mut ChaCha8Rng) -> Self {
        Self {
            rng,
            entries: Vec::new(),
        }
    }

    pub fn finish(self) -> ParamSet<F> {
        ParamSet {
            entries: self.entries,
        }
    }
}

impl<F: Scalar> ParamSource for Initializer<'_, F> {
    type Out = ();

    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        let n: usize = shape.iter().product();
        let data: Vec<F> = match init {
            Init::XavierUniform { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n)
                    .map(|_| F::from_f64_lossy(self.rng.random_range(-bound..bound)))
                    .collect()
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| F::from_f64_lossy(dist.sample(self.rng))).collect()
            }
            Init::Zeros => vec![F::zero(); n],
            Init::Ones => vec![F::one(); n],
        };
        self.entries.push((name.to_string(), Tensor::new(shape.to_vec(), data)?));
        Ok(())
    }
}

/// Places an existing [`ParamSet`] on a tape as differentiable leaves,
/// checking names and shapes against the builder's layout.
pub struct Binder<'t, 's, F: Scalar> {
    tape: &'t Tape<F>,
    set: &'s ParamSet<F>,
    cursor: usize,
    vars: Vec<Var<'t, F>>,
}

impl<'t, 's, F: Scalar> Binder<'t, 's, F> {
    pub fn new(tape: &'t Tape<F>, set: &'s ParamSet<F>) -> Self {
        Self {
            tape,
            set,
            cursor: 0,
            vars: Vec::with_capacity(set.len()),
        }
    }

    /// Checks that every stored parameter was consumed and returns the leaves
    /// in canonical order.
    pub fn finish(self) -> Result<Vec<Var<'t, F>>> {
        if self.cursor != self.set.len() {
            return Err(Error::Params(format!(
                "layout consumed {} of {} stored parameters",
                self.cursor,
                self.set.len()
            )));
        }
        Ok(self.vars)
    }
}

impl<'t, F: Scalar> ParamSource for Binder<'t, '_, F> {
    type Out = Var<'t, F>;

    fn param(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<Var<'t, F>> {
        let Some((stored_name, tensor)) = self.set.entries.get(self.cursor) else {
            return Err(Error::Params(format!("missing parameter `{name}`")));
        };
        if stored_name != name || tensor.shape() != shape {
            return Err(Error::Params(format!(
                "expected `{name}` {shape:?} at position {}, found `{stored_name}` {:?}",
                self.cursor,
                tensor.shape()
            )));
        }
        self.cursor += 1;
        let v = self.tape.leaf(tensor.clone());
        self.vars.push(v);
        Ok(v)
    }
}

/// Hands out caller-provided tape variables in canonical order, checking
/// only their shapes. Used to run a model on substituted parameters.
pub struct VarSource<'v, 't, F: Scalar> {
    vars: &'v [Var<'t, F>],
    cursor: usize,
}

impl<'v, 't, F: Scalar> VarSource<'v, 't, F> {
    pub fn new(vars: &'v [Var<'t, F>]) -> Self {
        Self { vars, cursor: 0 }
    }

    pub fn finish(self) -> Result<()> {
        if self.cursor != self.vars.len() {
            return Err(Error::Params(format!(
                "layout consumed {} of {} variables",
                self.cursor,
                self.vars.len()
            )));
        }
        Ok(())
    }
}

impl<'t, F: Scalar> ParamSource for VarSource<'_, 't, F> {
    type Out = Var<'t, F>;

    fn param(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<Var<'t, F>> {
        let Some(&v) = self.vars.get(self.cursor) else {
            return Err(Error::Params(format!("no variable left for `{name}`")));
        };
        if v.shape() != shape {
            return Err(Error::Params(format!(
                "`{name}` expects {shape:?}, variable {} has {:?}",
                self.cursor,
                v.shape()
            )));
        }
        self.cursor += 1;
        Ok(v)
    }
}

/// Records names and shapes without allocating tensors.
#[derive(Debug, Default)]
pub struct ShapeCollector {
    pub entries: Vec<(String, Vec<usize>)>,
}

impl ParamSource for ShapeCollector {
    type Out = ();

    fn param(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<()> {
        self.entries.push((name.to_string(), shape.to_vec()));
        Ok(())
    }
}

/// Xavier init for a `[fan_in, fan_out]` projection.
pub(crate) fn xavier(fan_in: usize, fan_out: usize) -> Init {
    Init::XavierUniform { fan_in, fan_out }
}
