use crate::codebook::Codebook;
use crate::descriptors::LocalDescriptorSet;
use crate::error::{Error, Result};
use crate::scalar::{normalize_in_place, Scalar};

/// Concatenated per-cluster residual sums, `n_clusters * dim` long.
#[derive(Debug, Clone, PartialEq)]
pub struct VladVector<T> {
    pub n_clusters: usize,
    pub dim: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> VladVector<T> {
    pub fn zeros(n_clusters: usize, dim: usize) -> Self {
        Self {
            n_clusters,
            dim,
            values: vec![T::zero(); n_clusters * dim],
        }
    }

    pub fn block(&self, k: usize) -> &[T] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn check_set<T: Scalar>(xs: &LocalDescriptorSet<T>, dim: usize) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::EmptySet);
    }
    if xs.dim() != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            got: xs.dim(),
        });
    }
    Ok(())
}

/// Hard-assignment VLAD: each descriptor adds its residual to the block of its
/// nearest center. No normalization.
pub fn vlad_encode<T: Scalar>(xs: &LocalDescriptorSet<T>, cb: &Codebook<T>) -> Result<VladVector<T>> {
    check_set(xs, cb.dim())?;
    let dim = cb.dim();
    let mut v = VladVector::zeros(cb.n_clusters(), dim);
    for x in xs.rows() {
        let k = cb.nearest(x)?;
        let c = cb.center(k);
        for ((acc, &xi), &ci) in v.values[k * dim..(k + 1) * dim].iter_mut().zip(x).zip(c) {
            *acc += xi - ci;
        }
    }
    Ok(v)
}

/// Per-descriptor encoders used for l2-normalized sum pooling.
pub trait Encoder<T: Scalar>: Sync {
    fn n_clusters(&self) -> usize;

    fn dim(&self) -> usize;

    fn output_len(&self) -> usize {
        self.n_clusters() * self.dim()
    }

    /// Adds the unit-normalized encoding of one descriptor to `acc`. Returns
    /// `false` and leaves `acc` unchanged when the encoding is zero.
    fn accumulate_normalized(&self, x: &[T], acc: &mut [T], scratch: &mut Vec<T>) -> bool;
}

impl<T: Scalar> Encoder<T> for Codebook<T> {
    fn n_clusters(&self) -> usize {
        Codebook::n_clusters(self)
    }

    fn dim(&self) -> usize {
        Codebook::dim(self)
    }

    fn accumulate_normalized(&self, x: &[T], acc: &mut [T], scratch: &mut Vec<T>) -> bool {
        let dim = Codebook::dim(self);
        let k = match self.nearest(x) {
            Ok(k) => k,
            Err(_) => return false,
        };
        scratch.clear();
        scratch.extend(x.iter().zip(self.center(k)).map(|(&a, &b)| a - b));
        if !normalize_in_place(scratch) {
            return false;
        }
        for (a, &r) in acc[k * dim..(k + 1) * dim].iter_mut().zip(scratch.iter()) {
            *a += r;
        }
        true
    }
}

/// Sum over descriptors of their l2-normalized encodings, in row order.
/// Descriptors with an all-zero encoding (exactly on a center) contribute
/// nothing. An empty set gives the zero vector.
pub fn pooled_sum<T: Scalar, E: Encoder<T> + ?Sized>(enc: &E, xs: &LocalDescriptorSet<T>) -> Result<Vec<T>> {
    if !xs.is_empty() && xs.dim() != enc.dim() {
        return Err(Error::DimMismatch {
            expected: enc.dim(),
            got: xs.dim(),
        });
    }
    let mut acc = vec![T::zero(); enc.output_len()];
    let mut scratch = Vec::with_capacity(enc.output_len());
    for x in xs.rows() {
        enc.accumulate_normalized(x, &mut acc, &mut scratch);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EntityId;
    use crate::sampling::Keypoint;
    use crate::scalar::squared_distance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(dim: usize, rows: &[Vec<f64>]) -> LocalDescriptorSet<f64> {
        let id: EntityId = "a-1".parse().unwrap();
        LocalDescriptorSet::from_rows(id, dim, rows.to_vec(), (0..rows.len() as u32).map(|i| Keypoint::new(i, 0)).collect()).unwrap()
    }

    /// Loops descriptors, scans all centers for the closest (first wins) and
    /// accumulates residuals.
    fn vlad_oracle(rows: &[Vec<f64>], centers: &[Vec<f64>]) -> Vec<f64> {
        let dim = centers[0].len();
        let mut out = vec![0.0; centers.len() * dim];
        for x in rows {
            let mut best = 0;
            for k in 1..centers.len() {
                if squared_distance(x, &centers[k]) < squared_distance(x, &centers[best]) {
                    best = k;
                }
            }
            for d in 0..dim {
                out[best * dim + d] += x[d] - centers[best][d];
            }
        }
        out
    }

    #[test]
    fn descriptor_on_center_gives_zero() {
        let cb = Codebook::from_centers(2, vec![0.0, 0.0, 3.0, 4.0], 0).unwrap();
        let v = vlad_encode(&set(2, &[vec![3.0, 4.0]]), &cb).unwrap();
        assert!(v.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn one_dimensional_hand_case() {
        let cb = Codebook::from_centers(1, vec![0.0, 10.0], 0).unwrap();
        let v = vlad_encode(&set(1, &[vec![1.0], vec![9.0], vec![11.0]]), &cb).unwrap();
        assert_eq!(v.values, vec![1.0, 0.0]);
    }

    #[test]
    fn errors() {
        let cb = Codebook::from_centers(1, vec![0.0, 10.0], 0).unwrap();
        assert!(matches!(vlad_encode(&set(1, &[]), &cb), Err(Error::EmptySet)));
        assert!(matches!(vlad_encode(&set(2, &[vec![1.0, 2.0]]), &cb), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn matches_oracle_and_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let dim = rng.random_range(1..=8);
            let k = rng.random_range(1..=5);
            let n = rng.random_range(1..=50);
            let centers: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let cb = Codebook::from_centers(dim, centers.concat(), 0).unwrap();
            let v = vlad_encode(&set(dim, &rows), &cb).unwrap();
            let o = vlad_oracle(&rows, &centers);
            let err = v.values.iter().zip(&o).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9);
            if n >= 2 {
                let cut = n / 2;
                let a = vlad_encode(&set(dim, &rows[..cut]), &cb).unwrap();
                let b = vlad_encode(&set(dim, &rows[cut..]), &cb).unwrap();
                for i in 0..v.values.len() {
                    assert!((a.values[i] + b.values[i] - v.values[i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pooled_sum_normalizes_each_descriptor() {
        let cb = Codebook::from_centers(1, vec![0.0, 10.0], 0).unwrap();
        let s = pooled_sum(&cb, &set(1, &[vec![1.0], vec![9.0], vec![13.0], vec![10.0]])).unwrap();
        // residuals 1, -1, 3 (and an exact hit, skipped) -> signs only
        assert_eq!(s, vec![1.0, 0.0]);
        assert_eq!(pooled_sum(&cb, &set(1, &[])).unwrap(), vec![0.0, 0.0]);
    }
}
