use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in parameter space. Local models, snapshots, gradients and noise
/// are all represented by this type.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelVector(Vec<f64>);

impl ModelVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        Self(vec![value; dim])
    }

    pub fn from_vec(coords: Vec<f64>) -> Self {
        Self(coords)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.0 {
            *a *= alpha;
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self(self.0.iter().map(|a| a * alpha).collect())
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &Self) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    /// Coordinate-wise mean of a non-empty set of equally sized vectors.
    pub fn mean(vectors: &[ModelVector]) -> Result<ModelVector> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::Shape("mean of an empty set".into()))?;
        let mut acc = ModelVector::zeros(first.dim());
        for v in vectors {
            if v.dim() != first.dim() {
                return Err(Error::Shape(format!(
                    "dimension {} does not match {}",
                    v.dim(),
                    first.dim()
                )));
            }
            acc.axpy(1.0, v);
        }
        acc.scale(1.0 / vectors.len() as f64);
        Ok(acc)
    }
}

impl Index<usize> for ModelVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ModelVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl From<Vec<f64>> for ModelVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_and_axpy() {
        let mut a = ModelVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(a.norm(), 5.0);
        a.axpy(-1.0, &ModelVector::from_vec(vec![3.0, 0.0]));
        assert_eq!(a.as_slice(), &[0.0, 4.0]);
    }

    #[test]
    fn mean_rejects_ragged_input() {
        let vs = vec![ModelVector::zeros(2), ModelVector::zeros(3)];
        assert!(matches!(ModelVector::mean(&vs), Err(Error::Shape(_))));
        assert!(ModelVector::mean(&[]).is_err());
    }
}
