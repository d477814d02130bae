//! Entity-level global descriptors: pooling, power normalization and PCA
//! whitening.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::corpus::EntityId;
use crate::encoding::VladVector;
use crate::error::{Error, Result};
use crate::scalar::{dot, l2_norm, Scalar};

pub const DEFAULT_OUT_DIM: usize = 256;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor<T> {
    pub entity: EntityId,
    pub values: Vec<T>,
}

fn unit<T: Scalar>(mut v: Vec<T>) -> Result<Vec<T>> {
    let n = l2_norm(&v);
    if n == T::zero() || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    for x in v.iter_mut() {
        *x /= n;
    }
    Ok(v)
}

/// Sum of l2-normalized encodings. The normalized vectors are added in
/// lexicographic order of their values, so the input order does not matter.
pub fn pool_encodings<T: Scalar>(encodings: &[VladVector<T>]) -> Result<Vec<T>> {
    let first = encodings.first().ok_or(Error::EmptySet)?;
    let len = first.values.len();
    let mut normed = Vec::with_capacity(encodings.len());
    for e in encodings {
        if e.values.len() != len {
            return Err(Error::DimMismatch {
                expected: len,
                got: e.values.len(),
            });
        }
        normed.push(unit(e.values.clone())?);
    }
    normed.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.to_f64().unwrap_or(0.0).total_cmp(&y.to_f64().unwrap_or(0.0)))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut out = vec![T::zero(); len];
    for v in &normed {
        for (o, &x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    Ok(out)
}

/// `sign(x)·sqrt(|x|)` elementwise followed by l2 normalization.
pub fn power_normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    unit(v.iter().map(|&x| x.signum() * x.abs().sqrt()).collect())
}

/// Projects centered vectors onto the leading principal axes, each scaled by
/// `1 / sqrt(eigenvalue + epsilon)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub epsilon: f64,
    pub mean: Vec<T>,
    /// `out_dim × in_dim`, row-major.
    pub projection: Vec<T>,
    /// Eigenvalues of the kept axes, descending.
    pub eigenvalues: Vec<f64>,
}

impl<T: Scalar> WhiteningTransform<T> {
    pub fn identity(dim: usize) -> Self {
        let mut projection = vec![T::zero(); dim * dim];
        for i in 0..dim {
            projection[i * dim + i] = T::one();
        }
        Self {
            in_dim: dim,
            out_dim: dim,
            epsilon: 0.0,
            mean: vec![T::zero(); dim],
            projection,
            eigenvalues: vec![1.0; dim],
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.projection[i * self.in_dim..(i + 1) * self.in_dim]
    }

    /// `Proj · (v - mean)` without the final normalization.
    pub fn project_centered(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.in_dim {
            return Err(Error::DimMismatch {
                expected: self.in_dim,
                got: v.len(),
            });
        }
        let centered: Vec<T> = v.iter().zip(&self.mean).map(|(&a, &m)| a - m).collect();
        Ok((0..self.out_dim).map(|i| dot(self.row(i), &centered)).collect())
    }
}

/// Fits PCA whitening on row vectors with the `n - 1` covariance divisor.
///
/// When the dimension exceeds the sample count the eigenvectors are recovered
/// from the Gram matrix of the centered samples, which has the same nonzero
/// spectrum. Each eigenvector is flipped so its largest-magnitude entry is
/// positive.
pub fn fit_whitening<T: Scalar>(train: &[Vec<T>], out_dim: usize, epsilon: f64) -> Result<WhiteningTransform<T>> {
    let n = train.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let dim = train[0].len();
    if let Some(bad) = train.iter().find(|v| v.len() != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    let max = dim.min(n - 1);
    if out_dim == 0 || out_dim > max {
        return Err(Error::BadDim { out_dim, max });
    }
    let mut mean = vec![0.0f64; dim];
    for v in train {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x.to_f64().unwrap_or(f64::NAN);
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let x = DMatrix::from_fn(n, dim, |i, j| train[i][j].to_f64().unwrap_or(f64::NAN) - mean[j]);
    let denom = (n - 1) as f64;

    let (values, vectors): (Vec<f64>, Vec<Vec<f64>>) = if dim <= n {
        let cov = (x.transpose() * &x) / denom;
        let eig = SymmetricEigen::new(cov);
        let order = descending(eig.eigenvalues.as_slice());
        order
            .into_iter()
            .take(out_dim)
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).iter().copied().collect()))
            .unzip()
    } else {
        let gram = (&x * x.transpose()) / denom;
        let eig = SymmetricEigen::new(gram);
        let order = descending(eig.eigenvalues.as_slice());
        let keep: Vec<usize> = order.into_iter().take(out_dim).collect();
        let v = DMatrix::from_fn(n, keep.len(), |i, j| eig.eigenvectors[(i, keep[j])]);
        let u = x.transpose() * v;
        keep.iter()
            .enumerate()
            .map(|(j, &i)| {
                let lambda = eig.eigenvalues[i];
                let col: Vec<f64> = u.column(j).iter().copied().collect();
                let norm = col.iter().map(|c| c * c).sum::<f64>().sqrt();
                let col = if norm > 0.0 { col.iter().map(|c| c / norm).collect() } else { col };
                (lambda, col)
            })
            .unzip()
    };

    let mut projection = Vec::with_capacity(out_dim * dim);
    let mut eigenvalues = Vec::with_capacity(out_dim);
    for (lambda, mut u) in values.into_iter().zip(vectors) {
        let lambda = lambda.max(0.0);
        let mut big = 0;
        for (i, c) in u.iter().enumerate() {
            if c.abs() > u[big].abs() {
                big = i;
            }
        }
        if u[big] < 0.0 {
            u.iter_mut().for_each(|c| *c = -*c);
        }
        let s = 1.0 / (lambda + epsilon).sqrt();
        projection.extend(u.iter().map(|&c| T::lit(c * s)));
        eigenvalues.push(lambda);
    }
    Ok(WhiteningTransform {
        in_dim: dim,
        out_dim,
        epsilon,
        mean: mean.into_iter().map(T::lit).collect(),
        projection,
        eigenvalues,
    })
}

fn descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// `l2_normalize(Proj · (v - mean))`.
pub fn apply_whitening<T: Scalar>(v: &[T], t: &WhiteningTransform<T>) -> Result<Vec<T>> {
    unit(t.project_centered(v)?)
}

/// Pooled sum to retrieval vector: power normalization, l2, then optional
/// whitening and a final l2.
pub fn finalize<T: Scalar>(pooled: &[T], whitening: Option<&WhiteningTransform<T>>) -> Result<Vec<T>> {
    let v = power_normalize(pooled)?;
    match whitening {
        Some(t) => apply_whitening(&v, t),
        None => Ok(v),
    }
}
