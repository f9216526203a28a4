//! Hypersphere geometry shared by every loss: row normalization, cosine
//! kernels, a clamped arccos and a max-shifted log-sum-exp.
//!
//! Everything here works in `f64`. Finite-difference gradient checks of the
//! losses need the extra precision.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Rows with an L2 norm at or below this are rejected as zero vectors.
pub const MIN_NORM: f64 = 1e-12;

/// Distance kept from ±1 before taking arccos.
pub const ARCCOS_CLAMP: f64 = 1e-7;

/// Anything that exposes its data as a set of row vectors.
pub trait RowVectors {
    fn rows_view(&self) -> ArrayView2<'_, f64>;
}

impl RowVectors for Array2<f64> {
    fn rows_view(&self) -> ArrayView2<'_, f64> {
        self.view()
    }
}

impl RowVectors for ArrayView2<'_, f64> {
    fn rows_view(&self) -> ArrayView2<'_, f64> {
        self.reborrow()
    }
}

/// N feature vectors together with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    vectors: Array2<f64>,
    labels: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(vectors: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        let (n, d) = vectors.dim();
        if n == 0 {
            return Err(Error::InvalidBatch("batch holds no vectors".into()));
        }
        if d < 2 {
            return Err(Error::InvalidBatch(format!("embedding dimension {d} < 2")));
        }
        if labels.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: labels.len(),
            });
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBatch("non-finite entry".into()));
        }
        Ok(Self { vectors, labels })
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Checks that every label indexes one of `classes` classes.
    pub fn check_labels(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&y| y >= classes) {
            Some(&label) => Err(Error::InvalidLabel { label, classes }),
            None => Ok(()),
        }
    }
}

impl RowVectors for EmbeddingBatch {
    fn rows_view(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }
}

/// One weight vector per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeightMatrix {
    weights: Array2<f64>,
}

impl ClassWeightMatrix {
    pub fn new(weights: Array2<f64>) -> Result<Self> {
        if weights.nrows() < 2 {
            return Err(Error::InvalidBatch(format!(
                "need at least 2 classes, got {}",
                weights.nrows()
            )));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBatch("non-finite class weight".into()));
        }
        for (row, w) in weights.outer_iter().enumerate() {
            let norm = l2_norm(w);
            if norm <= MIN_NORM {
                return Err(Error::ZeroVector { row, norm });
            }
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.weights
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }
}

impl RowVectors for ClassWeightMatrix {
    fn rows_view(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }
}

/// Pairwise cosine similarities of one batch against itself.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn from_batch(batch: &EmbeddingBatch) -> Result<Self> {
        Ok(Self {
            values: cosine_matrix(batch, batch)?,
        })
    }

    /// Wraps a precomputed matrix after checking squareness, symmetry,
    /// unit diagonal and range.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (n, m) = values.dim();
        if n != m {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: m,
            });
        }
        for i in 0..n {
            if (values[[i, i]] - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidBatch(format!("diagonal entry {i} is not 1")));
            }
            for j in 0..n {
                let v = values[[i, j]];
                if !(-1.0..=1.0).contains(&v) || (v - values[[j, i]]).abs() > 1e-12 {
                    return Err(Error::InvalidBatch(format!(
                        "entry ({i}, {j}) breaks symmetry or range"
                    )));
                }
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }
}

pub(crate) fn l2_norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Row L2 norms, rejecting any row at or below [`MIN_NORM`].
pub fn row_norms(m: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    m.outer_iter()
        .enumerate()
        .map(|(row, r)| {
            let norm = l2_norm(r);
            if norm > MIN_NORM {
                Ok(norm)
            } else {
                Err(Error::ZeroVector { row, norm })
            }
        })
        .collect()
}

/// Scales every row to unit L2 norm.
pub fn normalize_rows(m: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let norms = row_norms(m)?;
    let mut out = m.to_owned();
    for (mut row, norm) in out.outer_iter_mut().zip(norms) {
        row /= norm;
    }
    Ok(out)
}

/// Cosine of the angle between each row of `a` and each row of `b`,
/// clamped to [-1, 1].
pub fn cosine_matrix<A, B>(a: &A, b: &B) -> Result<Array2<f64>>
where
    A: RowVectors + ?Sized,
    B: RowVectors + ?Sized,
{
    let (a, b) = (a.rows_view(), b.rows_view());
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.ncols(),
            actual: b.ncols(),
        });
    }
    let an = normalize_rows(a)?;
    let bn = normalize_rows(b)?;
    Ok(an.dot(&bn.t()).mapv(|c| c.clamp(-1.0, 1.0)))
}

/// `arccos(clamp(c, -1 + δ, 1 - δ))` with δ = [`ARCCOS_CLAMP`].
pub fn safe_arccos(c: f64) -> f64 {
    c.clamp(-1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP).acos()
}

/// Derivative of [`safe_arccos`]; zero where the clamp is active.
pub(crate) fn safe_arccos_derivative(c: f64) -> f64 {
    if c <= -1.0 + ARCCOS_CLAMP || c >= 1.0 - ARCCOS_CLAMP {
        0.0
    } else {
        -1.0 / (1.0 - c * c).sqrt()
    }
}

/// `log Σ exp(v_i)` via the max-shift identity.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(lse(v.iter().copied()))
}

/// Log-sum-exp over a non-empty iterator. Callers guarantee non-emptiness.
pub(crate) fn lse<I>(values: I) -> f64
where
    I: IntoIterator<Item = f64>,
    I::IntoIter: Clone,
{
    let it = values.into_iter();
    let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    max + it.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax of one row of logits.
pub(crate) fn softmax_row(logits: ArrayView1<'_, f64>) -> Vec<f64> {
    let z = lse(logits.iter().copied());
    logits.iter().map(|&x| (x - z).exp()).collect()
}

/// Backpropagates a gradient through `x / ||x||` row by row.
///
/// `grad_unit` holds dL/dx̂; `raw` the unnormalized rows.
pub(crate) fn normalize_rows_backward(
    raw: ArrayView2<'_, f64>,
    grad_unit: &Array2<f64>,
) -> Result<Array2<f64>> {
    let norms = row_norms(raw)?;
    let mut out = Array2::zeros(raw.dim());
    for (i, norm) in norms.into_iter().enumerate() {
        let unit = raw.row(i).mapv(|v| v / norm);
        let g = grad_unit.row(i);
        let radial = g.dot(&unit);
        out.row_mut(i).assign(&((&g - &(unit * radial)) / norm));
    }
    Ok(out)
}
