use crate::error::{Error, Result};
use crate::scalar::{squared_distance, Scalar};

/// Hinge `max(0, d(a,p) - d(a,n) + m)` on Euclidean distances.
pub fn triplet_loss<T: Scalar>(anchor: &[T], positive: &[T], negative: &[T], margin: T) -> Result<T> {
    for v in [positive, negative] {
        if v.len() != anchor.len() {
            return Err(Error::DimMismatch {
                expected: anchor.len(),
                got: v.len(),
            });
        }
    }
    let dp = squared_distance(anchor, positive).sqrt();
    let dn = squared_distance(anchor, negative).sqrt();
    Ok((dp - dn + margin).max(T::zero()))
}

/// Index triple into a batch: anchor, positive, negative.
pub type Triplet = (usize, usize, usize);

/// Mines one negative per ordered same-label pair `(a, p)`.
///
/// The closest negative inside the band `d(a,p) < d(a,n) < d(a,p) + m` is
/// preferred. Without one, the farthest negative that is not beyond the
/// positive (`d(a,n) <= d(a,p)`) is used. Pairs with neither are skipped.
/// Distance ties pick the smaller index.
pub fn mine_semi_hard<T: Scalar, L: PartialEq>(vectors: &[Vec<T>], labels: &[L], margin: T) -> Result<Vec<Triplet>> {
    if vectors.len() != labels.len() {
        return Err(Error::DimMismatch {
            expected: vectors.len(),
            got: labels.len(),
        });
    }
    let n = vectors.len();
    if let Some(v) = vectors.first() {
        if let Some(bad) = vectors.iter().find(|w| w.len() != v.len()) {
            return Err(Error::DimMismatch {
                expected: v.len(),
                got: bad.len(),
            });
        }
    }
    let mut dist = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = squared_distance(&vectors[i], &vectors[j]).sqrt();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut out = Vec::new();
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            let dap = dist[a * n + p];
            let mut band: Option<(T, usize)> = None;
            let mut inner: Option<(T, usize)> = None;
            for (k, lab) in labels.iter().enumerate() {
                if *lab == labels[a] {
                    continue;
                }
                let dan = dist[a * n + k];
                if dan > dap && dan < dap + margin {
                    if band.is_none_or(|(d, _)| dan < d) {
                        band = Some((dan, k));
                    }
                } else if dan <= dap && inner.is_none_or(|(d, _)| dan > d) {
                    inner = Some((dan, k));
                }
            }
            if let Some((_, k)) = band.or(inner) {
                out.push((a, p, k));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::NoValidTriplets);
    }
    Ok(out)
}
