//! Named parameter storage and the small set of layers both networks share.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered collection of named parameter arrays. Names use a dotted path
/// scheme, e.g. `enc.scale2.block1.conv1.weight`.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor<T>>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(Arc::new(t));
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            f(name, Arc::make_mut(t));
        }
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &*self.tensors[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter().map(|t| &**t))
    }

    /// Puts every parameter on the tape as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound(self.tensors.iter().map(|t| g.leaf_shared(Arc::clone(t), trainable)).collect())
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor<T>> {
        self.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    /// Replaces every array from `map`; names and shapes must match exactly.
    pub fn load_map(&mut self, map: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        if map.len() != self.names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} arrays, found {}",
                self.names.len(),
                map.len()
            )));
        }
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let t = map
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "array {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = Arc::new(t.clone());
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect(),
        }
    }
}

/// Graph variables for a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Builds parameters under a dotted name prefix.
pub struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng }
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in(&mut self, name: String, shape: [usize; 4], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(self.rng.random_range(-bound..bound))).collect();
        self.store.add(name, Tensor::from_vec(shape, data).unwrap())
    }

    pub fn normal(&mut self, name: String, shape: [usize; 4], std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                T::from_f64_lossy(z * std)
            })
            .collect();
        self.store.add(name, Tensor::from_vec(shape, data).unwrap())
    }

    pub fn constant(&mut self, name: String, shape: [usize; 4], v: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, T::from_f64_lossy(v)))
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = init.fan_in(format!("{name}.weight"), [cout, cin, k, k], fan_in);
        let bias = init.fan_in(format!("{name}.bias"), [cout, 1, 1, 1], fan_in);
        Self { weight, bias, stride, pad: k / 2 }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }

    /// Parameter count of a `k×k` convolution with bias.
    pub fn count(cin: usize, cout: usize, k: usize) -> usize {
        cin * cout * k * k + cout
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, channels: usize) -> Self {
        let gamma = init.constant(format!("{name}.weight"), [channels, 1, 1, 1], 1.0);
        let beta = init.constant(format!("{name}.bias"), [channels, 1, 1, 1], 0.0);
        Self { gamma, beta, groups: norm_groups(channels) }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.group_norm(x, p.var(self.gamma), p.var(self.beta), self.groups)
    }
}

/// Largest of 8, 4, 2, 1 dividing `channels`.
pub fn norm_groups(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap()
}
