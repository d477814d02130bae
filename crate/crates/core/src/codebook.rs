//! k-means vocabulary (Lloyd iterations with k-means++ seeding).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::{squared_distance, Scalar};

pub const DEFAULT_CLUSTERS: usize = 100;

/// Cluster centers stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    dim: usize,
    centers: Vec<T>,
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub n_clusters: usize,
    pub max_iters: usize,
    /// Stop when the largest center shift relative to the RMS center norm
    /// falls below this value.
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            n_clusters: DEFAULT_CLUSTERS,
            max_iters: 100,
            tol: 1e-4,
            seed: 0,
        }
    }
}

/// Objective after each assignment step, for monitoring convergence.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansTrace {
    pub objective: Vec<f64>,
    pub iterations: usize,
}

impl<T: Scalar> Codebook<T> {
    pub fn from_centers(dim: usize, centers: Vec<T>, seed: u64) -> Result<Self> {
        if dim == 0 || centers.is_empty() || !centers.len().is_multiple_of(dim) {
            return Err(Error::DimMismatch {
                expected: dim,
                got: centers.len(),
            });
        }
        Ok(Self { dim, centers, seed })
    }

    pub fn n_clusters(&self) -> usize {
        self.centers.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn center(&self, k: usize) -> &[T] {
        &self.centers[k * self.dim..(k + 1) * self.dim]
    }

    pub fn centers(&self) -> &[T] {
        &self.centers
    }

    /// Index of the closest center; ties go to the smaller index.
    pub fn nearest(&self, x: &[T]) -> Result<usize> {
        if x.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(nearest_in(&self.centers, self.dim, x).0)
    }
}

/// Free-function form of [`Codebook::nearest`].
pub fn nearest_center<T: Scalar>(x: &[T], cb: &Codebook<T>) -> Result<usize> {
    cb.nearest(x)
}

fn nearest_in<T: Scalar>(centers: &[T], dim: usize, x: &[T]) -> (usize, T) {
    let mut best = (0usize, T::infinity());
    for (k, c) in centers.chunks_exact(dim).enumerate() {
        let d = squared_distance(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// k-means++ initial centers (row-major). Fails when the data holds fewer
/// distinct points than requested clusters.
pub fn kmeans_pp_init<T: Scalar>(data: &[T], dim: usize, n_clusters: usize, seed: u64) -> Result<Vec<T>> {
    let n = data.len() / dim;
    if n_clusters == 0 {
        return Err(Error::InvalidConfig("n_clusters must be at least 1".into()));
    }
    if n < n_clusters {
        return Err(Error::TooFewPoints {
            needed: n_clusters,
            got: n,
        });
    }
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(n_clusters * dim);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(row(first));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(row(i), row(first)).to_f64().unwrap_or(0.0))
        .collect();
    for k in 1..n_clusters {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::TooFewPoints {
                needed: n_clusters,
                got: k,
            });
        }
        let mut target = rng.random_range(0.0..total);
        let mut pick = n - 1;
        for (i, &d) in d2.iter().enumerate() {
            if target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        // floating remainder can land on a zero-weight tail entry
        if d2[pick] == 0.0 {
            pick = d2.iter().rposition(|&d| d > 0.0).expect("total > 0");
        }
        centers.extend_from_slice(row(pick));
        let c = row(pick);
        d2.par_iter_mut().enumerate().for_each(|(i, slot)| {
            let d = squared_distance(row(i), c).to_f64().unwrap_or(0.0);
            if d < *slot {
                *slot = d;
            }
        });
    }
    Ok(centers)
}

/// Lloyd iterations from the given initial centers. Returns the final centers
/// and the objective trace. Empty clusters are moved to the point farthest
/// from its assigned center.
pub fn lloyd<T: Scalar>(data: &[T], dim: usize, mut centers: Vec<T>, max_iters: usize, tol: f64) -> (Vec<T>, KMeansTrace) {
    let n = data.len() / dim;
    let k = centers.len() / dim;
    let mut trace = KMeansTrace {
        objective: Vec::new(),
        iterations: 0,
    };
    for _ in 0..max_iters {
        let assign: Vec<(usize, T)> = data
            .par_chunks_exact(dim)
            .map(|x| nearest_in(&centers, dim, x))
            .collect();
        let obj: f64 = assign.iter().map(|(_, d)| d.to_f64().unwrap_or(0.0)).sum();
        trace.objective.push(obj);
        trace.iterations += 1;

        let mut sums = vec![T::zero(); k * dim];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(&data[i * dim..(i + 1) * dim]) {
                *s += v;
            }
        }
        let mut new_centers = centers.clone();
        let mut taken = vec![false; n];
        for c in 0..k {
            let dst = &mut new_centers[c * dim..(c + 1) * dim];
            if counts[c] > 0 {
                let inv = T::one() / T::from_usize_lossy(counts[c]);
                for (d, &s) in dst.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *d = s * inv;
                }
            } else {
                // farthest point from its own center, not yet used for reseeding
                let far = assign
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken[*i])
                    .max_by(|a, b| a.1 .1.partial_cmp(&b.1 .1).unwrap_or(std::cmp::Ordering::Equal).then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                taken[far] = true;
                dst.copy_from_slice(&data[far * dim..(far + 1) * dim]);
            }
        }

        let shift = (0..k)
            .map(|c| {
                squared_distance(&centers[c * dim..(c + 1) * dim], &new_centers[c * dim..(c + 1) * dim])
                    .to_f64()
                    .unwrap_or(0.0)
            })
            .fold(0.0f64, f64::max)
            .sqrt();
        let rms = (new_centers.iter().map(|v| v.to_f64().unwrap_or(0.0).powi(2)).sum::<f64>() / k as f64).sqrt();
        centers = new_centers;
        if shift <= tol * rms.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    (centers, trace)
}

/// Trains a codebook on row-major `data`. Deterministic under `opts.seed`.
pub fn train_codebook<T: Scalar>(data: &[T], dim: usize, opts: &KMeansOptions) -> Result<(Codebook<T>, KMeansTrace)> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            got: data.len(),
        });
    }
    let init = kmeans_pp_init(data, dim, opts.n_clusters, opts.seed)?;
    let (centers, trace) = lloyd(data, dim, init, opts.max_iters, opts.tol);
    Ok((Codebook::from_centers(dim, centers, opts.seed)?, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn opts(k: usize) -> KMeansOptions {
        KMeansOptions {
            n_clusters: k,
            seed: 5,
            ..KMeansOptions::default()
        }
    }

    #[test]
    fn distinct_points_become_centers() {
        let data = [0.0f64, 0.0, 5.0, 1.0, -3.0, 2.0];
        let (cb, trace) = train_codebook(&data, 2, &opts(3)).unwrap();
        let mut got: Vec<(i64, i64)> = (0..3).map(|k| (cb.center(k)[0] as i64, cb.center(k)[1] as i64)).collect();
        got.sort();
        assert_eq!(got, vec![(-3, 2), (0, 0), (5, 1)]);
        assert_eq!(*trace.objective.last().unwrap(), 0.0);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let data = [1.0f64, 2.0, 3.0, 4.0, 5.0, 9.0];
        let (cb, _) = train_codebook(&data, 2, &opts(1)).unwrap();
        assert!((cb.center(0)[0] - 3.0).abs() < 1e-12);
        assert!((cb.center(0)[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(train_codebook(&[1.0f64, 2.0], 1, &opts(3)), Err(Error::TooFewPoints { .. })));
        // duplicates do not count as distinct points
        assert!(matches!(train_codebook(&[1.0f64, 1.0, 1.0], 1, &opts(2)), Err(Error::TooFewPoints { .. })));
    }

    /// Exhaustive 1-D optimum over contiguous partitions of the sorted data.
    fn best_1d_partition(sorted: &[f64], k: usize) -> (f64, Vec<f64>) {
        let sse = |s: &[f64]| {
            let m = s.iter().sum::<f64>() / s.len() as f64;
            (s.iter().map(|v| (v - m).powi(2)).sum::<f64>(), m)
        };
        assert_eq!(k, 3);
        let n = sorted.len();
        let mut best = (f64::INFINITY, vec![]);
        for a in 1..n - 1 {
            for b in a + 1..n {
                let (e0, m0) = sse(&sorted[..a]);
                let (e1, m1) = sse(&sorted[a..b]);
                let (e2, m2) = sse(&sorted[b..]);
                let e = e0 + e1 + e2;
                if e < best.0 {
                    best = (e, vec![m0, m1, m2]);
                }
            }
        }
        best
    }

    #[test]
    fn three_blobs_match_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut data = Vec::new();
        for center in [-10.0, 0.0, 12.0] {
            for _ in 0..20 {
                data.push(center + rng.random_range(-1.0..1.0));
            }
        }
        let (cb, _) = train_codebook(&data, 1, &opts(3)).unwrap();
        let mut got: Vec<f64> = cb.centers().to_vec();
        got.sort_by(f64::total_cmp);
        let mut sorted = data.clone();
        sorted.sort_by(f64::total_cmp);
        let (_, want) = best_1d_partition(&sorted, 3);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }
    }

    #[test]
    fn nearest_center_rules() {
        let cb = Codebook::from_centers(1, vec![0.0f64, 10.0], 0).unwrap();
        assert_eq!(nearest_center(&[4.0], &cb).unwrap(), 0);
        assert_eq!(nearest_center(&[6.0], &cb).unwrap(), 1);
        assert_eq!(nearest_center(&[5.0], &cb).unwrap(), 0);
        assert_eq!(nearest_center(&[10.0], &cb).unwrap(), 1);
        assert!(matches!(nearest_center(&[1.0, 2.0], &cb), Err(Error::DimMismatch { .. })));
        let cb3 = Codebook::from_centers(2, vec![0.0f64, 0.0, 1.0, 1.0, 3.0, 3.0], 0).unwrap();
        assert_eq!(cb3.nearest(&[3.0, 3.0]).unwrap(), 2);
    }

    #[test]
    fn deterministic_under_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f32> = (0..600).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = train_codebook(&data, 3, &opts(7)).unwrap().0;
        let b = train_codebook(&data, 3, &opts(7)).unwrap().0;
        assert_eq!(a.centers().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.centers().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn objective_never_increases_and_centers_stay_finite(
            data in proptest::collection::vec(-100.0f64..100.0, 40..200),
            k in 1usize..6,
            seed in any::<u64>(),
        ) {
            let dim = 2;
            let data = &data[..data.len() / dim * dim];
            let o = KMeansOptions { n_clusters: k, seed, max_iters: 50, tol: 0.0 };
            if let Ok((cb, trace)) = train_codebook(data, dim, &o) {
                for w in trace.objective.windows(2) {
                    prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{:?}", trace.objective);
                }
                prop_assert!(cb.centers().iter().all(|v| v.is_finite()));
            }
        }
    }
}
