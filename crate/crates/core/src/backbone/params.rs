use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Named parameters in a fixed, definition-ordered sequence.
///
/// Paths look like `blocks.<i>.<submodule>.<leaf>`; iteration order is the
/// insertion order and is what checkpoints serialize.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            tensors: IndexMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts (or replaces) a trainable tensor.
    pub fn insert(&mut self, path: impl Into<String>, mut tensor: Tensor<T>) {
        tensor.requires_grad = true;
        self.tensors.insert(path.into(), tensor);
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.tensors.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(path)
    }

    pub fn require(&self, path: &str) -> Result<&Tensor<T>> {
        self.tensors.get(path).ok_or_else(|| Error::Structural {
            message: format!("missing parameter {path}"),
            paths: vec![path.to_string()],
        })
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Element type conversion, keeping order.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (p, t) in &self.tensors {
            out.insert(p.clone(), t.cast());
        }
        out
    }

    /// Bitwise equality of paths, order and values (gradients ignored).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((pa, a), (pb, b))| pa == pb && a.bitwise_eq(b))
    }

    /// Places every parameter on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(p, t)| {
                let value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
                (p.clone(), g.leaf(value))
            })
            .collect();
        BoundParams { vars }
    }

    /// Adds the gradients found on `g` into each parameter's `grad`.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, bound: &BoundParams) -> Result<()> {
        for (path, &var) in &bound.vars {
            if let Some(grad) = g.grad(var) {
                let t = self.tensors.get_mut(path).ok_or_else(|| Error::Structural {
                    message: format!("bound parameter {path} no longer in store"),
                    paths: vec![path.clone()],
                })?;
                t.accumulate_grad(grad.data())?;
            }
        }
        Ok(())
    }
}

/// Parameter handles on one graph.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    /// Binds `path` to an arbitrary graph node.
    pub fn insert(&mut self, path: impl Into<String>, var: Var) {
        self.vars.insert(path.into(), var);
    }

    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars.get(path).copied().ok_or_else(|| Error::Structural {
            message: format!("missing parameter {path}"),
            paths: vec![path.to_string()],
        })
    }

    pub fn get_opt(&self, path: &str) -> Option<Var> {
        self.vars.get(path).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// Truncated normal with the given standard deviation.
    TruncNormal(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(path: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Self {
        ParamSpec {
            path: path.into(),
            shape: shape.into(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}
