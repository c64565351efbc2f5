//! Parameter containers and the small layers shared by every model.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Named, shaped parameters in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    entries: Vec<(String, Tensor<T>)>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = *self.index.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if self.entries[i].1.shape() != value.shape() {
            return Err(Error::shape("param_set", format!("`{name}`: {:?} -> {:?}", self.entries[i].1.shape(), value.shape())));
        }
        self.entries[i].1 = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Order-sensitive checksum of names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (n, t) in &self.entries {
            h ^= crate::rng::hash_str(n);
            h = h.wrapping_mul(0x0000_0100_0000_01b3) ^ t.checksum();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    /// Registers every parameter on `tape`, tracked or constant.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| {
                let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (n.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Xavier-uniform initialized weight of the given shape; `fan_in` and
    /// `fan_out` are supplied by the layer.
    pub fn xavier(rng: &mut Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
        let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.gen_range(-limit..limit))).collect();
        Tensor::new(shape.to_vec(), data).expect("xavier shape")
    }

    /// Adds a `d_in -> d_out` affine layer named `{prefix}.w` / `{prefix}.b`.
    pub fn add_linear(&mut self, rng: &mut Rng, prefix: &str, d_in: usize, d_out: usize) -> Result<()> {
        self.insert(format!("{prefix}.w"), Self::xavier(rng, &[d_in, d_out], d_in, d_out))?;
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[d_out]))
    }

    pub fn add_layer_norm(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.insert(format!("{prefix}.g"), Tensor::full(&[d], T::ONE))?;
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[d]))
    }
}

/// Parameters of one [`ParamStore`] registered on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<(String, Var)>,
}

impl Bound {
    /// Wraps externally created variables, e.g. inputs of a gradient check.
    pub fn from_pairs(vars: Vec<(String, Var)>) -> Self {
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().map(|(_, v)| *v)
    }

    /// Gradients aligned with the store order; missing gradients are zero.
    pub fn grads<T: Real>(&self, tape: &Tape<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|(_, v)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(tape.shape(*v))))
            .collect()
    }

    /// `x * W + b` for the layer stored under `prefix`.
    pub fn linear<T: Real>(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let w = self.get(&format!("{prefix}.w"))?;
        let b = self.get(&format!("{prefix}.b"))?;
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    pub fn layer_norm<T: Real>(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let g = self.get(&format!("{prefix}.g"))?;
        let b = self.get(&format!("{prefix}.b"))?;
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Forward-pass randomness: dropout rate and its generator. Evaluation
/// passes use [`Ctx::eval`].
pub struct Ctx<'a> {
    pub dropout: f64,
    pub rng: Option<&'a mut Rng>,
}

impl<'a> Ctx<'a> {
    pub fn eval() -> Self {
        Ctx { dropout: 0.0, rng: None }
    }

    pub fn train(dropout: f64, rng: &'a mut Rng) -> Self {
        Ctx { dropout, rng: Some(rng) }
    }

    pub fn apply_dropout<T: Real>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => {
                let n = tape.value(x).numel();
                let keep: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() >= self.dropout).collect();
                tape.dropout(x, self.dropout, &keep)
            }
            _ => Ok(x),
        }
    }
}
