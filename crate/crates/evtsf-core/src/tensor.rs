//! Dense row-major `f64` tensors and named parameter storage.
//!
//! [`Tensor`] is deliberately small: shape plus flat data, with accessors for
//! the 1-3 dimensional cases the models need. Hot loops borrow the flat slice
//! and index manually. [`ParamSet`] owns every learnable tensor of a model
//! under a stable name; gradients live in a parallel [`GradSet`] so backward
//! passes can read values while accumulating gradients.

use crate::rng::StreamRng;
use crate::{Error, Result};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// Dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// All-zero tensor with the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// Tensor filled with `value`.
    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Wraps existing data; the element count must match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(alloc::format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Tensor with i.i.d. normal entries of standard deviation `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut StreamRng) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: rng.normal_vec(n, std),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of dimension `i`.
    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Flat offset of `(r, c)` in a rank-2 tensor.
    #[inline]
    pub fn idx2(&self, r: usize, c: usize) -> usize {
        debug_assert_eq!(self.rank(), 2);
        r * self.shape[1] + c
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[self.idx2(r, c)]
    }

    #[inline]
    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let i = self.idx2(r, c);
        self.data[i] = v;
    }

    #[inline]
    pub fn at2_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        let i = self.idx2(r, c);
        &mut self.data[i]
    }

    /// Contiguous row `r` of a rank-2 tensor.
    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let w = self.shape[1];
        &self.data[r * w..(r + 1) * w]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        debug_assert_eq!(self.rank(), 2);
        let w = self.shape[1];
        &mut self.data[r * w..(r + 1) * w]
    }

    /// Flat offset of `(a, b, c)` in a rank-3 tensor.
    #[inline]
    pub fn idx3(&self, a: usize, b: usize, c: usize) -> usize {
        debug_assert_eq!(self.rank(), 3);
        (a * self.shape[1] + b) * self.shape[2] + c
    }

    #[inline]
    pub fn at3(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[self.idx3(a, b, c)]
    }

    /// Contiguous innermost slice `(a, b, ..)` of a rank-3 tensor.
    #[inline]
    pub fn lane(&self, a: usize, b: usize) -> &[f64] {
        let w = self.shape[2];
        let start = self.idx3(a, b, 0);
        &self.data[start..start + w]
    }

    #[inline]
    pub fn lane_mut(&mut self, a: usize, b: usize) -> &mut [f64] {
        let w = self.shape[2];
        let start = self.idx3(a, b, 0);
        &mut self.data[start..start + w]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    /// `self += scale * other`; shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
    }

    /// True when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute entry (0 for an empty tensor).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// `y += a * x` over flat slices.
#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += a * xi;
    }
}

/// Dot product of flat slices.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Handle to one tensor in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named collection of learnable tensors.
///
/// Names follow a dotted scheme (`"stfe.block1.layer2.filter"`) and are the
/// stable identity used by checkpoints and diagnostics.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Registers a tensor under `name` and returns its handle. Names must be
    /// unique; duplicates panic because they are construction bugs.
    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            self.find(name).is_none(),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Iterates `(name, tensor)` pairs in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    /// Gradient buffers shaped like every registered tensor.
    pub fn new_grads(&self) -> GradSet {
        GradSet {
            grads: self
                .values
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// Gradient buffers parallel to a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct GradSet {
    grads: Vec<Tensor>,
}

impl GradSet {
    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// First parameter with a non-finite gradient, if any.
    pub fn find_non_finite(&self, params: &ParamSet) -> Option<String> {
        for id in params.ids() {
            if !self.grad(id).all_finite() {
                return Some(params.name(id).to_string());
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::from_vec(&[2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(t.at2(0, 2), 2.0);
        assert_eq!(t.at2(1, 0), 3.0);
        assert_eq!(t.row(1), &[3.0, 4.0, 5.0]);

        let u = Tensor::from_vec(&[2, 2, 2], (0..8).map(|x| x as f64).collect()).unwrap();
        assert_eq!(u.at3(1, 0, 1), 5.0);
        assert_eq!(u.lane(0, 1), &[2.0, 3.0]);
    }

    #[test]
    fn param_set_round_trips_names() {
        let mut set = ParamSet::new();
        let a = set.add("graph.node_embed", Tensor::zeros(&[4, 2]));
        let b = set.add("head.w1", Tensor::zeros(&[3]));
        assert_eq!(set.name(a), "graph.node_embed");
        assert_eq!(set.find("head.w1"), Some(b));
        assert_eq!(set.find("missing"), None);
        assert_eq!(set.total_len(), 11);

        let mut grads = set.new_grads();
        assert_eq!(grads.grad(a).shape(), &[4, 2]);
        grads.grad_mut(b).data_mut()[0] = f64::NAN;
        assert_eq!(grads.find_non_finite(&set).as_deref(), Some("head.w1"));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_panic() {
        let mut set = ParamSet::new();
        set.add("x", Tensor::zeros(&[1]));
        set.add("x", Tensor::zeros(&[1]));
    }
}
