//! PCA whitening fitted on a descriptor sample.
//!
//! A transform can be staged either before aggregation (applied to element
//! descriptors, which are then re-normalized) or after aggregation (applied
//! to set descriptors). Transforms are immutable after fitting and
//! application is pure.

use crate::error::{Error, Result};
use crate::linalg::{mean_and_covariance, sym_eigen_desc, Mat};
use crate::scalar::{from_f64, to_f64, Real};

/// Where a fitted transform is applied in the aggregation pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WhitenStage {
    BeforeAggregation,
    AfterAggregation,
}

impl WhitenStage {
    pub fn as_str(&self) -> &'static str {
        match self {
            WhitenStage::BeforeAggregation => "before",
            WhitenStage::AfterAggregation => "after",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "before" => WhitenStage::BeforeAggregation,
            "after" => WhitenStage::AfterAggregation,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown whitening stage {other:?}"
                )))
            }
        })
    }
}

/// Linear whitening transform `x -> M (x - mean)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenTransform<F> {
    pub mean: Vec<F>,
    pub matrix: Mat<F>,
    pub epsilon: F,
}

/// A transform plus the stage it was fitted for.
#[derive(Debug, Clone, PartialEq)]
pub struct StagedWhitening<F> {
    pub stage: WhitenStage,
    pub transform: WhitenTransform<F>,
}

/// Fit a whitening transform on a sample: `M = diag(eigenvalues + eps)^(-1/2) · Uᵀ`
/// from the eigendecomposition of the sample covariance, components ordered
/// by descending eigenvalue.
///
/// `epsilon = None` uses `1e-6 · trace(cov) / dim`.
pub fn fit_whitening<F: Real>(sample: &[Vec<F>], epsilon: Option<F>) -> Result<WhitenTransform<F>> {
    if sample.is_empty() {
        return Err(Error::InvalidArgument("empty whitening sample".into()));
    }
    let dim = sample[0].len();
    if sample.len() <= dim {
        return Err(Error::InvalidArgument(format!(
            "whitening needs more samples ({}) than dimensions ({dim})",
            sample.len()
        )));
    }
    if sample
        .iter()
        .any(|row| row.iter().any(|x| !x.is_finite()))
    {
        return Err(Error::InvalidArgument("non-finite values in whitening sample".into()));
    }
    let (mean, cov) = mean_and_covariance(sample)?;
    let trace: F = (0..dim).map(|i| cov.get(i, i)).sum();
    let epsilon = epsilon.unwrap_or_else(|| {
        from_f64::<F>(1e-6) * trace / from_f64::<F>(dim as f64)
    });
    let (eigvals, eigvecs) = sym_eigen_desc(&cov)?;
    let mut matrix = Mat::zeros(dim, dim);
    for i in 0..dim {
        let lam = to_f64(eigvals[i]).max(0.0) + to_f64(epsilon);
        let inv_sqrt = from_f64::<F>(1.0 / lam.sqrt());
        for j in 0..dim {
            matrix.set(i, j, inv_sqrt * eigvecs.get(i, j));
        }
    }
    Ok(WhitenTransform { mean, matrix, epsilon })
}

/// Apply a transform: `M (v - mean)`, optionally L2-normalized.
pub fn apply_whitening<F: Real>(
    v: &[F],
    t: &WhitenTransform<F>,
    renormalize: bool,
) -> Result<Vec<F>> {
    if v.len() != t.mean.len() {
        return Err(Error::InvalidArgument(format!(
            "whitening input dimension {} does not match transform ({})",
            v.len(),
            t.mean.len()
        )));
    }
    let centered: Vec<F> = v.iter().zip(&t.mean).map(|(x, m)| *x - *m).collect();
    let mut out = t.matrix.matvec(&centered);
    if renormalize {
        crate::linalg::normalize_in_place(&mut out, "whitened descriptor")?;
    }
    Ok(out)
}
