use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        debug_assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self.entries.iter().map(|(_, t)| tape.param(t.clone())).collect();
        self.bind_vars(vars)
    }

    /// Pairs already-registered vars (in parameter order) with their names.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Bound {
        let map = self.entries.iter().zip(&vars).map(|((n, _), &v)| (n.clone(), v)).collect();
        Bound { map, order: vars }
    }
}

/// Parameters registered on a tape, addressable by name.
pub struct Bound {
    map: HashMap<String, Var>,
    order: Vec<Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    /// Vars in parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.order
    }
}

/// Seeded parameter initializer.
pub(crate) struct Init {
    rng: ChaCha8Rng,
    pub params: ParamSet,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: ParamSet::new(),
        }
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.params.insert(name, Tensor::new(shape.to_vec(), data).expect("shape product"));
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) {
        self.params.insert(name, Tensor::full(shape, value));
    }

    /// Weight `[fan_in, fan_out]` from U(±1/√fan_in) and a zero bias.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.uniform(format!("{prefix}.weight"), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt());
        self.constant(format!("{prefix}.bias"), &[fan_out], 0.0);
    }

    pub fn norm(&mut self, prefix: &str, width: usize) {
        self.constant(format!("{prefix}.gain"), &[width], 1.0);
        self.constant(format!("{prefix}.bias"), &[width], 0.0);
    }
}
