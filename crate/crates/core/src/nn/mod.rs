//! Named parameter storage and the tape binding used by every layer.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::tensor::{numel, Tape, Tensor, Var};
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal { std: f64 },
    Values(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub tensor: Tensor<S>,
}

/// Ordered set of named parameter tensors.
///
/// Random initial values come from a generator keyed on `(seed, name)`, so a
/// parameter's initial value does not depend on which other parameters exist.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    seed: u64,
}

/// Maps every parameter to its leaf on one tape.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub(crate) fn keyed_rng(seed: u64, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(s)
}

impl<S: Scalar> ParamStore<S> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Panics on a duplicate name or an `Init::Values` of the wrong length.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        let n = numel(shape);
        let data: Vec<S> = match init {
            Init::Zeros => alloc::vec![S::zero(); n],
            Init::Const(c) => alloc::vec![S::lit(c); n],
            Init::Normal { std } => {
                let mut rng = keyed_rng(self.seed, &name);
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        S::lit(z * std)
                    })
                    .collect()
            }
            Init::Values(v) => {
                assert_eq!(v.len(), n, "init values for {name}");
                v.into_iter().map(S::lit).collect()
            }
        };
        let tensor = Tensor::new(shape, data)
            .expect("parameter shape")
            .with_requires_grad(true);
        self.params.push(Param { name, tensor });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<S>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn tensors(&self) -> Vec<Tensor<S>> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    /// Registers every parameter as a gradient leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<S>) -> Binding {
        Binding {
            vars: self.params.iter().map(|p| tape.param(&p.tensor)).collect(),
        }
    }

    /// Registers every parameter as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape<S>) -> Binding {
        Binding {
            vars: self.params.iter().map(|p| tape.constant(&p.tensor)).collect(),
        }
    }

    /// Adds the tape's leaf gradients into each parameter's grad buffer.
    /// Parameters the loss never reached receive zeros.
    pub fn accumulate_grads(&mut self, tape: &Tape<S>, binding: &Binding) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&binding.vars) {
            match tape.grad(v) {
                Some(g) => p.tensor.accumulate_grad(g)?,
                None => {
                    let z = alloc::vec![S::zero(); p.tensor.numel()];
                    p.tensor.accumulate_grad(&z)?;
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.clear_grad());
    }

    /// Overwrites values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore<S>) -> Result<()> {
        let mut diffs = Vec::new();
        for p in &self.params {
            match other.by_name(&p.name) {
                None => diffs.push(format!("{}: missing", p.name)),
                Some(o) if o.tensor.shape() != p.tensor.shape() => diffs.push(format!(
                    "{}: {:?} vs {:?}",
                    p.name,
                    p.tensor.shape(),
                    o.tensor.shape()
                )),
                _ => {}
            }
        }
        if other.len() != self.len() {
            diffs.push(format!("{} parameters vs {}", self.len(), other.len()));
        }
        if !diffs.is_empty() {
            return Err(Error::Checkpoint(diffs.join("; ")));
        }
        for p in &mut self.params {
            let src = other.by_name(&p.name).expect("checked above");
            p.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }
}

/// Affine map `x · W + b` over the last axis of a rank-2 or rank-3 input.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, in_dim: usize, out_dim: usize, bias: bool, init: Init) -> Self {
        let weight = store.add(format!("{name}.weight"), &[in_dim, out_dim], init);
        let bias = bias.then(|| store.add(format!("{name}.bias"), &[out_dim], Init::Zeros));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Binding, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let flat = if shape.len() == 2 { x } else { tape.reshape(x, &[rows, shape[shape.len() - 1]])? };
        let mut y = tape.matmul(flat, bind.var(self.weight))?;
        if let Some(b) = self.bias {
            y = tape.add(y, bind.var(b))?;
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().expect("rank >= 1") = self.out_dim;
            tape.reshape(y, &out_shape)
        }
    }

    pub fn numel(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}
