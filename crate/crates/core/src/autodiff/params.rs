use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tensor};
use crate::Scalar;

/// Flat view of a set of parameter tensors, used for perturbation geometry and
/// optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector<T>(Vec<T>);

impl<T: Scalar> ParamVector<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![T::zero(); len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }

    pub fn dot(&self, other: &Self) -> T {
        assert_eq!(self.len(), other.len(), "dot of vectors with different lengths");
        self.0.iter().zip(&other.0).map(|(&a, &b)| a * b).sum()
    }

    pub fn l2_norm(&self) -> T {
        self.dot(self).sqrt()
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: T, x: &Self) {
        assert_eq!(self.len(), x.len(), "axpy of vectors with different lengths");
        for (s, &v) in self.0.iter_mut().zip(&x.0) {
            *s = *s + alpha * v;
        }
    }

    pub fn scaled(&self, alpha: T) -> Self {
        Self(self.0.iter().map(|&v| v * alpha).collect())
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(T::one(), other);
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(-T::one(), other);
        out
    }

    /// Cosine similarity; zero when either vector is zero.
    pub fn cosine(&self, other: &Self) -> T {
        let denom = self.l2_norm() * other.l2_norm();
        if denom == T::zero() {
            T::zero()
        } else {
            self.dot(other) / denom
        }
    }

    pub fn max_abs(&self) -> T {
        self.0.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl<T> Index<usize> for ParamVector<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.0[i]
    }
}

impl<T> IndexMut<usize> for ParamVector<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.0[i]
    }
}

/// Ordered `(name, shape)` list fixing how tensors map onto a [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    entries: Vec<(String, Vec<usize>)>,
}

impl ParamLayout {
    pub fn new(entries: Vec<(String, Vec<usize>)>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[(String, Vec<usize>)] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Offset range of each entry inside the flat vector.
    pub fn ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut offset = 0;
        self.entries
            .iter()
            .map(|(_, s)| {
                let n: usize = s.iter().product();
                offset += n;
                offset - n..offset
            })
            .collect()
    }
}

/// Concatenate named tensors, in the order given, into one vector.
pub fn flatten_params<'a, T: Scalar>(
    params: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> (ParamLayout, ParamVector<T>) {
    let mut entries = Vec::new();
    let mut flat = Vec::new();
    for (name, t) in params {
        entries.push((name.to_string(), t.shape().to_vec()));
        flat.extend_from_slice(t.data());
    }
    (ParamLayout::new(entries), ParamVector::new(flat))
}

/// Inverse of [`flatten_params`].
pub fn unflatten_params<T: Scalar>(
    layout: &ParamLayout,
    flat: &ParamVector<T>,
) -> Result<Vec<(String, Tensor<T>)>, AutodiffError> {
    if layout.total_len() != flat.len() {
        return Err(AutodiffError::Layout(format!(
            "layout holds {} values, vector has {}",
            layout.total_len(),
            flat.len()
        )));
    }
    layout
        .entries()
        .iter()
        .zip(layout.ranges())
        .map(|((name, shape), range)| {
            Ok((name.clone(), Tensor::new(shape.clone(), flat.as_slice()[range].to_vec())?))
        })
        .collect()
}

/// Check that `actual` lists the same names and shapes, in the same order, as
/// `expected`.
pub fn check_layout(expected: &ParamLayout, actual: &ParamLayout) -> Result<(), AutodiffError> {
    if expected == actual {
        return Ok(());
    }
    let first_diff = expected
        .entries()
        .iter()
        .zip(actual.entries())
        .position(|(a, b)| a != b)
        .unwrap_or(expected.entries().len().min(actual.entries().len()));
    Err(AutodiffError::Layout(format!("parameter ordering differs at entry {first_diff}")))
}
