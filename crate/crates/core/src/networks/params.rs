//! Named parameter storage and the two layer types everything is built from.

use std::collections::HashMap;
use std::ops::Index;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Padding, Rng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in store order.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Same names, same order, same shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Replace every tensor from `other`, which must share the layout.
    pub fn assign(&mut self, other: &ParamStore) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::InvalidArgument("parameter layouts differ".into()));
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }

    /// Put every tensor on a graph, tracked or constant.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Bound<'g> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        Bound { graph, vars }
    }
}

/// A parameter store placed on one graph.
pub struct Bound<'g> {
    graph: &'g Graph,
    vars: Vec<Var<'g>>,
}

impl<'g> Index<ParamId> for Bound<'g> {
    type Output = Var<'g>;

    fn index(&self, id: ParamId) -> &Var<'g> {
        &self.vars[id.0]
    }
}

impl<'g> Bound<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Gradients in store order; tensors the loss never reached get zeros.
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|v| self.graph.grad(*v).unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    }
}

/// Weight initialisation rule.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    /// Normal with standard deviation `gain / √fan_in`.
    Scaled(f64),
}

/// Registers parameters under a dotted prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A builder for the sub-namespace `name`.
    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], fan_in: usize, init: Init) -> Result<ParamId> {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Scaled(gain) => {
                let std = gain / (fan_in as f64).sqrt();
                Tensor::randn(shape, self.rng).scale(std)
            }
        };
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.insert(&full, t)
    }

    pub fn linear(&mut self, name: &str, fin: usize, fout: usize, init: Init) -> Result<Linear> {
        let mut b = self.sub(name);
        let w = b.tensor("weight", &[fout, fin], fin, init)?;
        let bias = b.tensor("bias", &[fout], fin, Init::Zeros)?;
        Ok(Linear { w, b: bias })
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, init: Init) -> Result<Conv> {
        let mut b = self.sub(name);
        let w = b.tensor("weight", &[cout, cin, k, k], cin * k * k, init)?;
        let bias = b.tensor("bias", &[cout], cin * k * k, Init::Zeros)?;
        Ok(Conv { w, b: bias })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.linear(p[self.w], Some(p[self.b]))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.conv2d(p[self.w], Some(p[self.b]), Padding::Zero)
    }
}
