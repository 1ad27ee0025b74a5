//! Learnable parameters and their binding onto a [`Tape`].
//!
//! Parameters live outside any tape in a plain [`ParamSet`]; each training
//! step copies their values onto a fresh tape as gradient-bearing leaves and
//! copies gradients back out after backward. Insertion order is stable and
//! defines checkpoint order.

use super::{Tape, Var};
use crate::{Error, Real, Result};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<Real>,
    pub grad: Vec<Real>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Stable handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<Real>) -> ParamId {
        let name = name.into();
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        let grad = vec![0.0; data.len()];
        self.params.push(Param { name, shape, data, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }
}

/// Tape leaves for every parameter of a set, in set order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl Tape {
    /// Copy every parameter onto this tape as a gradient-bearing leaf.
    pub fn bind(&mut self, params: &ParamSet) -> Bound {
        let vars = params
            .params
            .iter()
            .map(|p| self.leaf(p.data.clone(), p.shape.clone()))
            .collect();
        Bound { vars }
    }

    /// Copy parameters as constants (inference: no gradient bookkeeping).
    pub fn bind_frozen(&mut self, params: &ParamSet) -> Bound {
        let vars = params
            .params
            .iter()
            .map(|p| self.constant(p.data.clone(), p.shape.clone()))
            .collect();
        Bound { vars }
    }

    /// Accumulate tape leaf gradients back into `params.grad`.
    pub fn export_grads(&self, bound: &Bound, params: &mut ParamSet) {
        for (var, param) in bound.vars.iter().zip(params.params.iter_mut()) {
            if let Some(g) = self.grad(*var) {
                for (acc, &gv) in param.grad.iter_mut().zip(g) {
                    *acc += gv;
                }
            }
        }
    }
}

/// Weight initialization for linear and convolution layers.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
    UniformFanIn,
    /// All zeros; used for estimator output layers so training starts from
    /// the zero-offset degeneracy.
    Zero,
}

/// Fully connected layer with weight stored `[out×in]` and bias `[out]`.
#[derive(Debug, Clone, Copy)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = |n: usize| -> Vec<Real> {
            match init {
                Init::Zero => vec![0.0; n],
                Init::UniformFanIn => {
                    (0..n).map(|_| rng.gen_range(-bound..bound) as Real).collect()
                }
            }
        };
        let weight = params.add(format!("{name}.weight"), vec![out_dim, in_dim], draw(out_dim * in_dim));
        let bias = params.add(format!("{name}.bias"), vec![out_dim], draw(out_dim));
        LinearLayer { weight, bias, in_dim, out_dim }
    }

    /// `x [m×in] -> [m×out]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::shape(
                "linear",
                format!("input shape {shape:?} vs expected [_, {}]", self.in_dim),
            ));
        }
        let y = tape.matmul_nt(x, bound.var(self.weight))?;
        tape.add_rows(y, bound.var(self.bias))
    }
}
