use super::vlad::{check_set, Encoder, VladVector};
use crate::codebook::Codebook;
use crate::descriptors::LocalDescriptorSet;
use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};

/// Learnable soft-assignment VLAD parameters: centers `c_k`, assignment
/// weights `w_k` (both `n_clusters × dim`, row-major) and biases `b_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetVladParams<T> {
    pub n_clusters: usize,
    pub dim: usize,
    pub centers: Vec<T>,
    pub weights: Vec<T>,
    pub biases: Vec<T>,
}

impl<T: Scalar> NetVladParams<T> {
    pub fn zeros(n_clusters: usize, dim: usize) -> Self {
        Self {
            n_clusters,
            dim,
            centers: vec![T::zero(); n_clusters * dim],
            weights: vec![T::zero(); n_clusters * dim],
            biases: vec![T::zero(); n_clusters],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let kd = self.n_clusters * self.dim;
        if self.n_clusters == 0 || self.dim == 0 {
            return Err(Error::InvalidConfig("empty NetVLAD parameters".into()));
        }
        for (len, want) in [(self.centers.len(), kd), (self.weights.len(), kd), (self.biases.len(), self.n_clusters)] {
            if len != want {
                return Err(Error::DimMismatch { expected: want, got: len });
            }
        }
        if !self.is_finite() {
            return Err(Error::InvalidConfig("non-finite NetVLAD parameters".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.centers
            .iter()
            .chain(&self.weights)
            .chain(&self.biases)
            .all(|v| v.is_finite())
    }

    pub fn center(&self, k: usize) -> &[T] {
        &self.centers[k * self.dim..(k + 1) * self.dim]
    }

    pub fn weight(&self, k: usize) -> &[T] {
        &self.weights[k * self.dim..(k + 1) * self.dim]
    }

    /// Flat view over all parameters: centers, then weights, then biases.
    pub fn flat_len(&self) -> usize {
        self.centers.len() + self.weights.len() + self.biases.len()
    }

    pub fn flat_get(&self, i: usize) -> T {
        let (c, w) = (self.centers.len(), self.weights.len());
        if i < c {
            self.centers[i]
        } else if i < c + w {
            self.weights[i - c]
        } else {
            self.biases[i - c - w]
        }
    }

    pub fn flat_set(&mut self, i: usize, v: T) {
        let (c, w) = (self.centers.len(), self.weights.len());
        if i < c {
            self.centers[i] = v;
        } else if i < c + w {
            self.weights[i - c] = v;
        } else {
            self.biases[i - c - w] = v;
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, &b) in self
            .centers
            .iter_mut()
            .chain(self.weights.iter_mut())
            .chain(self.biases.iter_mut())
            .zip(other.centers.iter().chain(&other.weights).chain(&other.biases))
        {
            *a += scale * b;
        }
    }

    /// Softmax assignment of `x` over clusters, computed with the max logit
    /// subtracted.
    pub fn soft_assign_into(&self, x: &[T], out: &mut Vec<T>) {
        out.clear();
        out.extend((0..self.n_clusters).map(|k| dot(self.weight(k), x) + self.biases[k]));
        let max = out.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for z in out.iter_mut() {
            *z = (*z - max).exp();
            total += *z;
        }
        for z in out.iter_mut() {
            *z /= total;
        }
    }

    pub fn soft_assign(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let mut out = Vec::with_capacity(self.n_clusters);
        self.soft_assign_into(x, &mut out);
        Ok(out)
    }
}

/// Initializes from a codebook so that the softmax over `w_k·x + b_k` equals
/// the softmax over `-alpha·‖x - c_k‖²`.
pub fn netvlad_init<T: Scalar>(cb: &Codebook<T>, alpha: T) -> Result<NetVladParams<T>> {
    if !(alpha > T::zero()) || !alpha.is_finite() {
        return Err(Error::InvalidConfig("alpha must be positive".into()));
    }
    let two = T::lit(2.0);
    let centers = cb.centers().to_vec();
    let weights = centers.iter().map(|&c| two * alpha * c).collect();
    let biases = (0..cb.n_clusters())
        .map(|k| {
            let c = cb.center(k);
            -alpha * dot(c, c)
        })
        .collect();
    Ok(NetVladParams {
        n_clusters: cb.n_clusters(),
        dim: cb.dim(),
        centers,
        weights,
        biases,
    })
}

/// Soft-assignment residual sums `v_k = Σ_i a_k(x_i) (x_i - c_k)`.
pub fn netvlad_encode<T: Scalar>(xs: &LocalDescriptorSet<T>, params: &NetVladParams<T>) -> Result<VladVector<T>> {
    check_set(xs, params.dim)?;
    let dim = params.dim;
    let mut v = VladVector::zeros(params.n_clusters, dim);
    let mut a = Vec::with_capacity(params.n_clusters);
    for x in xs.rows() {
        params.soft_assign_into(x, &mut a);
        for (k, &ak) in a.iter().enumerate() {
            for ((acc, &xi), &ci) in v.values[k * dim..(k + 1) * dim].iter_mut().zip(x).zip(params.center(k)) {
                *acc += ak * (xi - ci);
            }
        }
    }
    Ok(v)
}

impl<T: Scalar> Encoder<T> for NetVladParams<T> {
    fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn accumulate_normalized(&self, x: &[T], acc: &mut [T], scratch: &mut Vec<T>) -> bool {
        if x.len() != self.dim {
            return false;
        }
        let dim = self.dim;
        let mut a = Vec::with_capacity(self.n_clusters);
        self.soft_assign_into(x, &mut a);
        scratch.clear();
        for (k, &ak) in a.iter().enumerate() {
            scratch.extend(x.iter().zip(self.center(k)).map(|(&xi, &ci)| ak * (xi - ci)));
        }
        if !crate::scalar::normalize_in_place(scratch) {
            return false;
        }
        for (a, &u) in acc.iter_mut().zip(scratch.iter()) {
            *a += u;
        }
        debug_assert_eq!(acc.len(), self.n_clusters * dim);
        true
    }
}
