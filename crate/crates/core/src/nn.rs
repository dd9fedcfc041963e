//! Named parameter storage and initialization.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Glorot uniform over the first and last extents.
    Xavier,
    Normal(f64),
    /// Four equal gate blocks `(i, f, g, o)`; the forget block is 1, the rest 0.
    LstmBias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Accumulates parameter specs under a dotted name prefix.
#[derive(Debug, Default)]
pub struct SpecBuilder {
    prefix: String,
    pub specs: Vec<ParamSpec>,
}

impl SpecBuilder {
    pub fn new(prefix: &str) -> Self {
        SpecBuilder {
            prefix: prefix.to_string(),
            specs: Vec::new(),
        }
    }

    fn full(&self, name: &str) -> String {
        join(&self.prefix, name)
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> &mut Self {
        let full = self.full(name);
        self.specs.push(ParamSpec::new(full, shape, init));
        self
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> &mut Self {
        self.add(&format!("{name}.w"), &[fan_in, fan_out], Init::Xavier);
        if bias {
            self.add(&format!("{name}.b"), &[fan_out], Init::Zeros);
        }
        self
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> &mut Self {
        self.add(&format!("{name}.g"), &[dim], Init::Ones);
        self.add(&format!("{name}.b"), &[dim], Init::Zeros)
    }

    /// Runs `f` with a nested prefix.
    pub fn scope(&mut self, name: &str, f: impl FnOnce(&mut SpecBuilder)) -> &mut Self {
        let mut inner = SpecBuilder::new(&self.full(name));
        f(&mut inner);
        self.specs.extend(inner.specs);
        self
    }

    pub fn finish(self) -> Vec<ParamSpec> {
        self.specs
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn count(specs: &[ParamSpec]) -> usize {
    specs.iter().map(ParamSpec::numel).sum()
}

/// Model parameters by name, in sorted order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn init<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Result<Self> {
        let mut map = BTreeMap::new();
        for s in specs {
            let t = match s.init {
                Init::Zeros => Tensor::zeros(&s.shape)?,
                Init::Ones => Tensor::full(&s.shape, 1.0)?,
                Init::Constant(v) => Tensor::full(&s.shape, v)?,
                Init::Normal(std) => Tensor::randn(&s.shape, std, rng)?,
                Init::LstmBias => {
                    let n = s.numel();
                    let q = n / 4;
                    let data = (0..n).map(|i| if (q..2 * q).contains(&i) { 1.0 } else { 0.0 }).collect();
                    Tensor::new(&s.shape, data)?
                }
                Init::Xavier => {
                    let fan_in = s.shape[0];
                    let fan_out = *s.shape.last().unwrap();
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Tensor::uniform(&s.shape, -a, a, rng)?
                }
            };
            if map.insert(s.name.clone(), t).is_some() {
                return Err(Error::Config(format!("duplicate parameter {}", s.name)));
            }
        }
        Ok(Params { map })
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Checks names and shapes against a spec list.
    pub fn matches(&self, specs: &[ParamSpec]) -> Result<()> {
        if specs.len() != self.map.len() {
            return Err(Error::State(format!(
                "expected {} parameters, found {}",
                specs.len(),
                self.map.len()
            )));
        }
        for s in specs {
            let t = self.get(&s.name).map_err(|e| Error::State(e.to_string()))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::State(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        Ok(())
    }

    /// Registers every parameter as a differentiable leaf of `g`.
    pub fn bind<'g>(&self, g: &'g Graph) -> Bound<'g> {
        let vars = self
            .map
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.clone())))
            .collect();
        Bound { vars }
    }

    /// Registers only the parameters under `prefix`.
    pub fn bind_prefix<'g>(&self, g: &'g Graph, prefix: &str) -> Bound<'g> {
        let vars = self
            .map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, t)| (k.clone(), g.leaf(t.clone())))
            .collect();
        Bound { vars }
    }
}

/// Parameters registered on a graph.
pub struct Bound<'g> {
    vars: HashMap<String, Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn scope(&self, prefix: &str) -> Scope<'_, 'g> {
        Scope {
            bound: self,
            prefix: prefix.to_string(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'g>)> {
        self.vars.iter()
    }
}

impl<'g> FromIterator<(String, Var<'g>)> for Bound<'g> {
    fn from_iter<I: IntoIterator<Item = (String, Var<'g>)>>(iter: I) -> Self {
        Bound { vars: iter.into_iter().collect() }
    }
}

/// A view of bound parameters under a name prefix.
#[derive(Clone)]
pub struct Scope<'a, 'g> {
    bound: &'a Bound<'g>,
    prefix: String,
}

impl<'a, 'g> Scope<'a, 'g> {
    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        self.bound.get(&join(&self.prefix, name))
    }

    pub fn sub(&self, name: &str) -> Scope<'a, 'g> {
        Scope {
            bound: self.bound,
            prefix: join(&self.prefix, name),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// `x · W + b` using `{name}.w` and, if present, `{name}.b`.
    pub fn linear(&self, name: &str, x: Var<'g>) -> Result<Var<'g>> {
        let w = self.get(&format!("{name}.w"))?;
        let b = self.get(&format!("{name}.b")).ok();
        x.linear(w, b)
    }

    pub fn layer_norm(&self, name: &str, x: Var<'g>, eps: f64) -> Result<Var<'g>> {
        x.layer_norm(self.get(&format!("{name}.g"))?, self.get(&format!("{name}.b"))?, eps)
    }
}
