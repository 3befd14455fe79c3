use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::graph::{Gradients, Graph, Var};

/// A stored parameter: 32-bit values, 2-D shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Param {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_f32(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("parameter data", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().iter().map(|&v| v as f32).collect(),
        }
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn uniform_fan_in<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound) as f32)
            .collect();
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("parameter shape is consistent")
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Append rows (e.g. a newly enrolled identity).
    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if self.rows > 0 && row.len() != self.cols {
            return Err(Error::dim("appended parameter row", self.cols, row.len()));
        }
        self.cols = row.len();
        self.rows += 1;
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn bits_eq(&self, other: &Param) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Named parameters, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    params: BTreeMap<String, Param>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, p: Param) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name, p);
        Ok(())
    }

    pub fn replace(&mut self, name: &str, p: Param) -> Result<()> {
        match self.params.get_mut(name) {
            Some(slot) => {
                *slot = p;
                Ok(())
            }
            None => Err(Error::Contract(format!("unknown parameter `{name}`"))),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Param::len).sum()
    }

    pub fn bits_eq(&self, other: &ParameterSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((na, a), (nb, b))| na == nb && a.bits_eq(b))
    }

    /// Place every parameter on the graph as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, true)
    }

    /// Place every parameter on the graph as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| {
                let t = p.to_tensor();
                let v = if trainable { g.param(t) } else { g.constant(t) };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handles for tensors already placed on a graph.
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` not bound")))
    }

    /// Gradients for every bound parameter that received one.
    pub fn collect(&self, grads: &mut Gradients) -> GradMap {
        let mut map = GradMap::new();
        for (name, v) in &self.vars {
            if let Some(t) = grads.take(*v) {
                map.insert(name.clone(), t);
            }
        }
        map
    }
}

/// Parameter name → gradient.
pub type GradMap = BTreeMap<String, Tensor>;
