//! Contour keypoints, per-entity feature budgets and 32×32 patch extraction.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::corpus::{BinaryImage, EntityId};
use crate::error::Result;

pub const PATCH_SIDE: usize = 32;

/// Pixel position inside an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Keypoint {
    pub x: u32,
    pub y: u32,
}

impl Keypoint {
    pub fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }
}

/// A 32×32 ink window centered on a keypoint. Never blank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    center: Keypoint,
    mask: Vec<bool>,
}

impl Patch {
    pub fn center(&self) -> Keypoint {
        self.center
    }

    /// Row-major `PATCH_SIDE × PATCH_SIDE` mask.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.mask[y * PATCH_SIDE + x]
    }

    pub fn ink_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// Ink pixels with at least one non-ink 4-neighbour (outside counts as
/// non-ink), in row-major order.
pub fn contour_keypoints(img: &BinaryImage) -> Vec<Keypoint> {
    let mut out = Vec::new();
    for y in 0..img.height() {
        for x in 0..img.width() {
            if !img.get(x, y) {
                continue;
            }
            let (xi, yi) = (x as i64, y as i64);
            let interior = img.get_padded(xi - 1, yi)
                && img.get_padded(xi + 1, yi)
                && img.get_padded(xi, yi - 1)
                && img.get_padded(xi, yi + 1);
            if !interior {
                out.push(Keypoint::new(x as u32, y as u32));
            }
        }
    }
    out
}

/// Derives a per-entity RNG seed from the global seed and the entity id, so
/// subsampling does not depend on processing order.
pub fn entity_seed(seed: u64, id: &EntityId) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.to_string().as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Keeps all keypoints when they fit the budget, otherwise a uniform subset of
/// `max_count` without replacement. Relative order is preserved.
pub fn budget_keypoints(kps: &[Keypoint], max_count: usize, seed: u64) -> Vec<Keypoint> {
    budget_indices(kps.len(), max_count, seed)
        .into_iter()
        .map(|i| kps[i])
        .collect()
}

/// Index form of [`budget_keypoints`]: sorted indices of the kept items.
pub fn budget_indices(len: usize, max_count: usize, seed: u64) -> Vec<usize> {
    if len <= max_count {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, len, max_count).into_vec();
    idx.sort_unstable();
    idx
}

/// One zero-padded 32×32 patch per keypoint; blank patches are dropped. The
/// keypoint sits at offset (16, 16) of its patch.
pub fn extract_patches(img: &BinaryImage, kps: &[Keypoint]) -> Vec<Patch> {
    let half = (PATCH_SIDE / 2) as i64;
    kps.iter()
        .filter_map(|&kp| {
            let mut mask = vec![false; PATCH_SIDE * PATCH_SIDE];
            let mut any = false;
            for py in 0..PATCH_SIDE {
                for px in 0..PATCH_SIDE {
                    let v = img.get_padded(kp.x as i64 - half + px as i64, kp.y as i64 - half + py as i64);
                    mask[py * PATCH_SIDE + px] = v;
                    any |= v;
                }
            }
            any.then_some(Patch { center: kp, mask })
        })
        .collect()
}

/// Keypoint dump: one `entity_id x y` line per keypoint.
pub fn write_keypoints<W: Write>(mut w: W, id: &EntityId, kps: &[Keypoint]) -> Result<()> {
    for k in kps {
        writeln!(w, "{id} {} {}", k.x, k.y)?;
    }
    Ok(())
}
