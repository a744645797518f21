//! Feature sequences, distance measures and pairwise distance matrices.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::augment::Permutation;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Which modality a sequence came from. Informational only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    #[default]
    Clip,
    Caption,
}

/// An ordered, non-empty list of equal-dimension feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    items: Vec<Vec<f64>>,
    dim: usize,
    modality: Modality,
}

impl FeatureSequence {
    pub fn new(items: Vec<Vec<f64>>, modality: Modality) -> Result<Self> {
        let dim = match items.first() {
            Some(first) => first.len(),
            None => return Err(Error::Argument("feature sequence must be non-empty".into())),
        };
        if dim == 0 {
            return Err(Error::Argument("feature dimension must be at least 1".into()));
        }
        for item in &items {
            if item.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    actual: item.len(),
                });
            }
            if item.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite feature value".into()));
            }
        }
        Ok(FeatureSequence {
            items,
            dim,
            modality,
        })
    }

    /// Like [`FeatureSequence::new`] but additionally rejects zero-norm items,
    /// which cosine distance cannot handle.
    pub fn new_for(items: Vec<Vec<f64>>, modality: Modality, measure: DistanceMeasure) -> Result<Self> {
        let seq = Self::new(items, modality)?;
        seq.check_measure(measure)?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn items(&self) -> &[Vec<f64>] {
        &self.items
    }

    pub fn item(&self, i: usize) -> &[f64] {
        &self.items[i]
    }

    pub fn into_items(self) -> Vec<Vec<f64>> {
        self.items
    }

    pub fn check_measure(&self, measure: DistanceMeasure) -> Result<()> {
        if measure == DistanceMeasure::CosineDist {
            if let Some(index) = self.items.iter().position(|x| norm(x) == 0.0) {
                return Err(Error::DegenerateVector { index });
            }
        }
        Ok(())
    }
}

/// Distance between two feature vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMeasure {
    /// `1 - <x, y> / (|x| |y|)`, bounded in `[0, 2]`.
    #[default]
    CosineDist,
    /// `-<x, y>`.
    NegDot,
}

impl DistanceMeasure {
    pub fn distance(self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            DistanceMeasure::CosineDist => {
                let c = dot(x, y) / (norm(x) * norm(y));
                // rounding can push |c| marginally above 1
                1.0 - c.clamp(-1.0, 1.0)
            }
            DistanceMeasure::NegDot => -dot(x, y),
        }
    }

    /// Gradient of `distance(x, y)` with respect to `x`, accumulated as
    /// `out += scale * d distance / d x`.
    pub fn accumulate_grad_x(self, x: &[f64], y: &[f64], scale: f64, out: &mut [f64]) {
        match self {
            DistanceMeasure::CosineDist => {
                let nx = norm(x);
                let ny = norm(y);
                let xy = dot(x, y);
                let a = 1.0 / (nx * ny);
                let b = xy / (nx * nx * nx * ny);
                for k in 0..x.len() {
                    out[k] -= scale * (y[k] * a - x[k] * b);
                }
            }
            DistanceMeasure::NegDot => {
                for k in 0..x.len() {
                    out[k] -= scale * y[k];
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DistanceMeasure::CosineDist => "cosine_dist",
            DistanceMeasure::NegDot => "neg_dot",
        }
    }
}

impl std::str::FromStr for DistanceMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine_dist" | "cosine" => Ok(DistanceMeasure::CosineDist),
            "neg_dot" => Ok(DistanceMeasure::NegDot),
            other => Err(Error::Argument(format!("unknown distance measure '{other}'"))),
        }
    }
}

pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// An `n x m` matrix of pairwise distances tagged with the measure that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    values: Matrix,
    measure: Option<DistanceMeasure>,
}

impl DistanceMatrix {
    /// Wraps an arbitrary finite matrix (no measure tag).
    pub fn from_matrix(values: Matrix) -> Result<Self> {
        if let Some((i, j)) = values.find_nan() {
            return Err(Error::Numeric(format!("NaN distance at ({}, {})", i + 1, j + 1)));
        }
        if !values.all_finite() {
            return Err(Error::Numeric("distance matrix has non-finite entries".into()));
        }
        Ok(DistanceMatrix {
            values,
            measure: None,
        })
    }

    pub fn measure(&self) -> Option<DistanceMeasure> {
        self.measure
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_matrix(self) -> Matrix {
        self.values
    }
}

impl Deref for DistanceMatrix {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.values
    }
}

/// `result[i][j] = measure(x_i, y_j)`.
pub fn pairwise_distance(
    x: &FeatureSequence,
    y: &FeatureSequence,
    measure: DistanceMeasure,
) -> Result<DistanceMatrix> {
    if x.dim() != y.dim() {
        return Err(Error::Dimension {
            expected: x.dim(),
            actual: y.dim(),
        });
    }
    x.check_measure(measure)?;
    y.check_measure(measure)?;
    let values = Matrix::from_fn(x.len(), y.len(), |i, j| measure.distance(x.item(i), y.item(j)));
    Ok(DistanceMatrix {
        values,
        measure: Some(measure),
    })
}

/// `Δ(X, X)`: symmetric, zero diagonal under cosine distance.
pub fn self_similarity(x: &FeatureSequence, measure: DistanceMeasure) -> Result<DistanceMatrix> {
    x.check_measure(measure)?;
    let n = x.len();
    let mut values = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let d = if i == j && measure == DistanceMeasure::CosineDist {
                0.0
            } else {
                measure.distance(x.item(i), x.item(j))
            };
            values.set(i, j, d);
            values.set(j, i, d);
        }
    }
    Ok(DistanceMatrix {
        values,
        measure: Some(measure),
    })
}

/// `X_π = [x_{π(1)}, ..., x_{π(n)}]`.
pub fn apply_permutation(x: &FeatureSequence, perm: &Permutation) -> Result<FeatureSequence> {
    if perm.len() != x.len() {
        return Err(Error::Permutation(format!(
            "permutation of length {} applied to sequence of length {}",
            perm.len(),
            x.len()
        )));
    }
    let items = perm.indices().iter().map(|&k| x.items[k].clone()).collect();
    Ok(FeatureSequence {
        items,
        dim: x.dim,
        modality: x.modality,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(items: &[&[f64]]) -> FeatureSequence {
        FeatureSequence::new(items.iter().map(|v| v.to_vec()).collect(), Modality::Clip).unwrap()
    }

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn orthonormal_pairwise() {
        let x = seq(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let d = pairwise_distance(&x, &x, DistanceMeasure::CosineDist).unwrap();
        assert_eq!(d.to_rows(), vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
    }

    #[test]
    fn antipodal_is_two() {
        let x = seq(&[&[1.0, 0.0]]);
        let y = seq(&[&[-1.0, 0.0]]);
        let d = pairwise_distance(&x, &y, DistanceMeasure::CosineDist).unwrap();
        assert_eq!(d.get(0, 0), 2.0);
    }

    #[test]
    fn diagonal_vector_distance() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let x = seq(&[&[1.0, 0.0], &[s, s]]);
        let y = seq(&[&[0.0, 1.0]]);
        let d = pairwise_distance(&x, &y, DistanceMeasure::CosineDist).unwrap();
        assert_close(d.get(0, 0), 1.0, 1e-15);
        assert_close(d.get(1, 0), 0.292_893_218_813_452_4, 1e-12);
    }

    #[test]
    fn self_similarity_three_items() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let x = seq(&[&[1.0, 0.0], &[s, s], &[0.0, 1.0]]);
        let d = self_similarity(&x, DistanceMeasure::CosineDist).unwrap();
        let oracle = pairwise_distance(&x, &x, DistanceMeasure::CosineDist).unwrap();
        for i in 0..3 {
            assert_eq!(d.get(i, i), 0.0);
            for j in 0..3 {
                assert_eq!(d.get(i, j), d.get(j, i));
                assert_close(d.get(i, j), oracle.get(i, j), 1e-15);
            }
        }
        assert_close(d.get(0, 1), 1.0 - s, 1e-12);
        assert_close(d.get(0, 2), 1.0, 1e-15);
    }

    #[test]
    fn identical_items_zero_self_similarity() {
        let x = seq(&[&[0.3, 0.4], &[0.3, 0.4], &[0.3, 0.4]]);
        let d = self_similarity(&x, DistanceMeasure::CosineDist).unwrap();
        assert!(d.as_slice().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let x = seq(&[&[1.0, 0.0]]);
        let y = seq(&[&[1.0, 0.0, 0.0]]);
        assert!(matches!(
            pairwise_distance(&x, &y, DistanceMeasure::CosineDist),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_vector_rejected_under_cosine_only() {
        let x = seq(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert!(matches!(
            pairwise_distance(&x, &x, DistanceMeasure::CosineDist),
            Err(Error::DegenerateVector { index: 1 })
        ));
        assert!(pairwise_distance(&x, &x, DistanceMeasure::NegDot).is_ok());
        assert!(FeatureSequence::new_for(vec![vec![0.0]], Modality::Clip, DistanceMeasure::CosineDist).is_err());
    }

    #[test]
    fn empty_and_ragged_sequences_rejected() {
        assert!(FeatureSequence::new(vec![], Modality::Clip).is_err());
        assert!(FeatureSequence::new(vec![vec![1.0], vec![1.0, 2.0]], Modality::Clip).is_err());
    }

    #[test]
    fn swap_permutation() {
        let x = seq(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let p = Permutation::from_one_based(&[2, 1]).unwrap();
        let y = apply_permutation(&x, &p).unwrap();
        assert_eq!(y.item(0), &[0.0, 1.0]);
        assert_eq!(y.item(1), &[1.0, 0.0]);
        let id = apply_permutation(&x, &Permutation::identity(2)).unwrap();
        assert_eq!(id, x);
        assert!(matches!(
            apply_permutation(&x, &Permutation::identity(3)),
            Err(Error::Permutation(_))
        ));
    }

    #[test]
    fn cosine_gradient_matches_finite_difference() {
        let x = [0.3, -1.2, 0.7];
        let y = [1.1, 0.4, -0.5];
        for measure in [DistanceMeasure::CosineDist, DistanceMeasure::NegDot] {
            let mut g = [0.0; 3];
            measure.accumulate_grad_x(&x, &y, 1.0, &mut g);
            for k in 0..3 {
                let eps = 1e-6;
                let mut xp = x;
                let mut xm = x;
                xp[k] += eps;
                xm[k] -= eps;
                let fd = (measure.distance(&xp, &y) - measure.distance(&xm, &y)) / (2.0 * eps);
                assert_close(g[k], fd, 1e-8);
            }
        }
    }
}
