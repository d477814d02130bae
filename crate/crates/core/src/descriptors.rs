//! Local descriptors: upright fixed-scale SIFT at contour keypoints with the
//! RootSIFT mapping, and a loader for externally computed embeddings.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use crate::corpus::{BinaryImage, DatasetManifest, EntityId};
use crate::error::{Error, Result};
use crate::sampling::Keypoint;
use crate::scalar::Scalar;
use crate::wrdesc::{RowLabel, WrDesc};

pub const SIFT_DIM: usize = 128;
const GRID: usize = 4;
const ORIENTATIONS: usize = 8;
/// Half window: samples cover offsets -8..=8 around the keypoint.
const RADIUS: i64 = 8;
const SIGMA: f64 = 8.0;
const PAD: i64 = RADIUS + 2;

/// Descriptors of one entity, one row per keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDescriptorSet<T> {
    pub entity: EntityId,
    dim: usize,
    data: Vec<T>,
    keypoints: Vec<Keypoint>,
}

impl<T: Scalar> LocalDescriptorSet<T> {
    pub fn new(entity: EntityId, dim: usize) -> Self {
        assert!(dim > 0);
        Self {
            entity,
            dim,
            data: Vec::new(),
            keypoints: Vec::new(),
        }
    }

    pub fn from_rows(entity: EntityId, dim: usize, rows: Vec<Vec<T>>, keypoints: Vec<Keypoint>) -> Result<Self> {
        if rows.len() != keypoints.len() {
            return Err(Error::DimMismatch {
                expected: rows.len(),
                got: keypoints.len(),
            });
        }
        let mut s = Self::new(entity, dim);
        for (r, k) in rows.into_iter().zip(keypoints) {
            s.push(&r, k)?;
        }
        Ok(s)
    }

    pub fn push(&mut self, row: &[T], kp: Keypoint) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        self.keypoints.push(kp);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// Flat row-major storage.
    pub fn as_flat(&self) -> &[T] {
        &self.data
    }

    pub fn keypoints(&self) -> &[Keypoint] {
        &self.keypoints
    }

    /// Rows at the given (sorted or unsorted) indices.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut s = Self::new(self.entity.clone(), self.dim);
        for &i in idx {
            s.data.extend_from_slice(self.row(i));
            s.keypoints.push(self.keypoints[i]);
        }
        s
    }

    /// Concatenation of several sets into one labelled `entity`.
    pub fn concat<'a>(entity: EntityId, dim: usize, parts: impl IntoIterator<Item = &'a Self>) -> Result<Self> {
        let mut s = Self::new(entity, dim);
        for p in parts {
            if p.dim != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: p.dim,
                });
            }
            s.data.extend_from_slice(&p.data);
            s.keypoints.extend_from_slice(&p.keypoints);
        }
        Ok(s)
    }
}

/// Gradient field of the box-smoothed ink mask, padded so that descriptor
/// windows near the border read well-defined (zero-ink) values.
pub struct GradientField {
    width: i64,
    height: i64,
    magnitude: Vec<f64>,
    orientation: Vec<f64>,
}

impl GradientField {
    pub fn new(img: &BinaryImage) -> Self {
        let (w, h) = (img.width() as i64, img.height() as i64);
        // smoothed field covers [-PAD-1, w+PAD] so centred differences fit
        let sw = w + 2 * PAD + 2;
        let sh = h + 2 * PAD + 2;
        let off = PAD + 1;
        let mut smooth = vec![0.0f64; (sw * sh) as usize];
        for sy in 0..sh {
            for sx in 0..sw {
                let (x, y) = (sx - off, sy - off);
                let mut acc = 0u32;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        acc += img.get_padded(x + dx, y + dy) as u32;
                    }
                }
                smooth[(sy * sw + sx) as usize] = acc as f64 / 9.0;
            }
        }
        let gw = w + 2 * PAD;
        let gh = h + 2 * PAD;
        let mut magnitude = vec![0.0; (gw * gh) as usize];
        let mut orientation = vec![0.0; (gw * gh) as usize];
        for gy in 0..gh {
            for gx in 0..gw {
                let (sx, sy) = (gx + 1, gy + 1);
                let s = |x: i64, y: i64| smooth[(y * sw + x) as usize];
                let dx = (s(sx + 1, sy) - s(sx - 1, sy)) / 2.0;
                let dy = (s(sx, sy + 1) - s(sx, sy - 1)) / 2.0;
                let i = (gy * gw + gx) as usize;
                magnitude[i] = (dx * dx + dy * dy).sqrt();
                orientation[i] = dy.atan2(dx);
            }
        }
        Self {
            width: w,
            height: h,
            magnitude,
            orientation,
        }
    }

    fn at(&self, x: i64, y: i64) -> (f64, f64) {
        let gw = self.width + 2 * PAD;
        let i = ((y + PAD) * gw + (x + PAD)) as usize;
        (self.magnitude[i], self.orientation[i])
    }

    /// Raw 4×4×8 histogram at `kp` (upright, fixed scale). Layout is
    /// `[(row * 4 + col) * 8 + orientation]`.
    pub fn raw_descriptor(&self, kp: Keypoint) -> Result<[f64; SIFT_DIM]> {
        let (kx, ky) = (kp.x as i64, kp.y as i64);
        if kx >= self.width || ky >= self.height {
            return Err(Error::Format(format!("keypoint ({kx}, {ky}) outside image")));
        }
        let mut hist = [0.0f64; SIFT_DIM];
        let cell = (2 * RADIUS) as f64 / GRID as f64;
        let bin_width = 2.0 * PI / ORIENTATIONS as f64;
        for dy in -RADIUS..=RADIUS {
            for dx in -RADIUS..=RADIUS {
                let (mag, theta) = self.at(kx + dx, ky + dy);
                if mag == 0.0 {
                    continue;
                }
                let weight = (-((dx * dx + dy * dy) as f64) / (2.0 * SIGMA * SIGMA)).exp();
                let v = mag * weight;
                // continuous cell coordinates: cell centres at 0..3
                let bx = dx as f64 / cell + (GRID as f64 - 1.0) / 2.0;
                let by = dy as f64 / cell + (GRID as f64 - 1.0) / 2.0;
                let mut bo = theta / bin_width;
                if bo < 0.0 {
                    bo += ORIENTATIONS as f64;
                }
                if bo >= ORIENTATIONS as f64 {
                    bo -= ORIENTATIONS as f64;
                }
                let (x0, y0, o0) = (bx.floor(), by.floor(), bo.floor());
                let (fx, fy, fo) = (bx - x0, by - y0, bo - o0);
                for (iy, wy) in [(y0 as i64, 1.0 - fy), (y0 as i64 + 1, fy)] {
                    if !(0..GRID as i64).contains(&iy) || wy == 0.0 {
                        continue;
                    }
                    for (ix, wx) in [(x0 as i64, 1.0 - fx), (x0 as i64 + 1, fx)] {
                        if !(0..GRID as i64).contains(&ix) || wx == 0.0 {
                            continue;
                        }
                        for (io, wo) in [(o0 as usize % ORIENTATIONS, 1.0 - fo), ((o0 as usize + 1) % ORIENTATIONS, fo)] {
                            let slot = (iy as usize * GRID + ix as usize) * ORIENTATIONS + io;
                            hist[slot] += v * wx * wy * wo;
                        }
                    }
                }
            }
        }
        if hist.iter().all(|&h| h == 0.0) {
            return Err(Error::EmptyDescriptor);
        }
        Ok(hist)
    }
}

/// Raw SIFT histogram at a fixed keypoint.
pub fn sift_descriptor<T: Scalar>(img: &BinaryImage, kp: Keypoint) -> Result<Vec<T>> {
    let raw = GradientField::new(img).raw_descriptor(kp)?;
    Ok(raw.iter().map(|&v| T::lit(v)).collect())
}

/// l1 normalization, elementwise square root, l2 normalization.
pub fn root_sift<T: Scalar>(raw: &[T]) -> Result<Vec<T>> {
    let l1: T = raw.iter().map(|x| x.abs()).sum();
    if l1 == T::zero() || !l1.is_finite() {
        return Err(Error::EmptyDescriptor);
    }
    let mut y: Vec<T> = raw.iter().map(|&x| (x.max(T::zero()) / l1).sqrt()).collect();
    if !crate::scalar::normalize_in_place(&mut y) {
        return Err(Error::EmptyDescriptor);
    }
    Ok(y)
}

/// RootSIFT descriptors at the given keypoints. Keypoints whose window has no
/// gradient are skipped.
pub fn describe<T: Scalar>(entity: &EntityId, img: &BinaryImage, kps: &[Keypoint]) -> LocalDescriptorSet<T> {
    let field = GradientField::new(img);
    let mut set = LocalDescriptorSet::new(entity.clone(), SIFT_DIM);
    for &kp in kps {
        let Ok(raw) = field.raw_descriptor(kp) else {
            continue;
        };
        let raw: Vec<T> = raw.iter().map(|&v| T::lit(v)).collect();
        if let Ok(d) = root_sift(&raw) {
            set.push(&d, kp).expect("fixed dim");
        }
    }
    set
}

/// Writes descriptor sets as one WRDESC file, rows grouped by entity.
pub fn to_wrdesc<T: Scalar>(sets: &BTreeMap<EntityId, LocalDescriptorSet<T>>, dim: usize) -> Result<WrDesc> {
    let mut out = WrDesc::new(dim);
    for (id, set) in sets {
        if set.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: set.dim(),
            });
        }
        let label = id.to_string();
        for (row, kp) in set.rows().zip(set.keypoints()) {
            let r: Vec<f32> = row.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
            out.push(&r, RowLabel::new(label.clone(), kp.x as i64, kp.y as i64))?;
        }
    }
    Ok(out)
}

/// Groups WRDESC rows per entity. Every label must be an entity of the
/// manifest; values are taken as-is.
pub fn group_wrdesc<T: Scalar>(
    file: &WrDesc,
    manifest: Option<&DatasetManifest>,
) -> Result<BTreeMap<EntityId, LocalDescriptorSet<T>>> {
    let known: Option<std::collections::HashSet<&EntityId>> =
        manifest.map(|m| m.entries().iter().map(|e| &e.id).collect());
    let mut out: BTreeMap<EntityId, LocalDescriptorSet<T>> = BTreeMap::new();
    for (i, l) in file.labels.iter().enumerate() {
        let id: EntityId = l
            .label
            .parse()
            .map_err(|_| Error::Format(format!("row {i}: label {:?} is not an entity id", l.label)))?;
        if let Some(k) = &known {
            if !k.contains(&id) {
                return Err(Error::UnknownEntity(id.to_string()));
            }
        }
        if l.x < 0 || l.y < 0 || l.x > u32::MAX as i64 || l.y > u32::MAX as i64 {
            return Err(Error::Format(format!("row {i}: keypoint ({}, {}) out of range", l.x, l.y)));
        }
        let row: Vec<T> = file.row(i).iter().map(|&v| T::from(v).unwrap_or_else(T::nan)).collect();
        out.entry(id.clone())
            .or_insert_with(|| LocalDescriptorSet::new(id, file.dim))
            .push(&row, Keypoint::new(l.x as u32, l.y as u32))?;
    }
    Ok(out)
}

/// Loads externally computed descriptors (e.g. CNN patch embeddings).
pub fn load_external_descriptors<T: Scalar>(
    path: &Path,
    manifest: &DatasetManifest,
) -> Result<BTreeMap<EntityId, LocalDescriptorSet<T>>> {
    group_wrdesc(&WrDesc::load(path)?, Some(manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::l2_norm;
    use proptest::prelude::*;

    fn block_image(w: usize, h: usize, ink: impl Fn(usize, usize) -> bool) -> BinaryImage {
        let mut b = BinaryImage::blank(w, h);
        for y in 0..h {
            for x in 0..w {
                b.set(x, y, ink(x, y));
            }
        }
        b
    }

    #[test]
    fn flat_window_is_empty() {
        let img = BinaryImage::blank(40, 40);
        assert!(matches!(sift_descriptor::<f64>(&img, Keypoint::new(20, 20)), Err(Error::EmptyDescriptor)));
        let full = block_image(60, 60, |_, _| true);
        assert!(matches!(sift_descriptor::<f64>(&full, Keypoint::new(30, 30)), Err(Error::EmptyDescriptor)));
    }

    #[test]
    fn vertical_edge_fills_horizontal_orientation_bins() {
        // ink on the left half: gradient points in -x (orientation bin 4)
        let img = block_image(41, 41, |x, _| x <= 20);
        let d: Vec<f64> = sift_descriptor(&img, Keypoint::new(20, 20)).unwrap();
        let total: f64 = d.iter().sum();
        let horizontal: f64 = d
            .iter()
            .enumerate()
            .filter(|(i, _)| i % 8 == 0 || i % 8 == 4)
            .map(|(_, v)| v)
            .sum();
        assert!(horizontal / total > 0.999, "{}", horizontal / total);
        // direct computation: every nonzero entry sits in bin 4 at cell columns 1 and 2
        for (i, v) in d.iter().enumerate() {
            if *v > 0.0 {
                assert_eq!(i % 8, 4);
                let col = (i / 8) % 4;
                assert!(col == 1 || col == 2, "col {col}");
            }
        }
    }

    #[test]
    fn rotation_by_90_degrees_shifts_orientation_by_two_bins() {
        let n = 41usize;
        let base = block_image(n, n, |x, y| {
            let (dx, dy) = (x as f64 - 20.0, y as f64 - 20.0);
            (dx * 0.8 + dy * 0.3 - 2.0).abs() < 2.5 || (dx - 4.0).powi(2) + (dy + 3.0).powi(2) < 9.0
        });
        // (x, y) -> (n-1-y, x): 90 degrees, y pointing down
        let rotated = block_image(n, n, |x, y| base.get(y, n - 1 - x));
        let kp = Keypoint::new(20, 20);
        let a: Vec<f64> = sift_descriptor(&base, kp).unwrap();
        let b: Vec<f64> = sift_descriptor(&rotated, Keypoint::new(20, 20)).unwrap();
        for row in 0..4 {
            for col in 0..4 {
                for o in 0..8 {
                    let src = a[(row * 4 + col) * 8 + o];
                    let (r2, c2, o2) = (col, 3 - row, (o + 2) % 8);
                    let dst = b[(r2 * 4 + c2) * 8 + o2];
                    assert!((src - dst).abs() < 1e-9, "cell ({row},{col}) bin {o}: {src} vs {dst}");
                }
            }
        }
    }

    #[test]
    fn translation_leaves_descriptor_unchanged() {
        let shape = |x: i64, y: i64| (x - 5).abs() + (y - 7).abs() < 4 || (y == 9 && x < 12);
        let a_img = block_image(40, 40, |x, y| shape(x as i64 - 10, y as i64 - 10));
        let b_img = block_image(50, 45, |x, y| shape(x as i64 - 23, y as i64 - 14));
        let a: Vec<f64> = sift_descriptor(&a_img, Keypoint::new(15, 17)).unwrap();
        let b: Vec<f64> = sift_descriptor(&b_img, Keypoint::new(28, 21)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn root_sift_examples() {
        let mut raw = vec![0.0f64; 128];
        raw[7] = 4.0;
        let y = root_sift(&raw).unwrap();
        assert_eq!(y[7], 1.0);
        assert_eq!(y.iter().filter(|v| **v != 0.0).count(), 1);

        let y = root_sift(&[2.5f64; 128]).unwrap();
        for v in &y {
            assert!((v - 1.0 / 128f64.sqrt()).abs() < 1e-12);
        }

        let mut raw = vec![0.0f64; 128];
        raw[0] = 3.0;
        raw[1] = 1.0;
        let y = root_sift(&raw).unwrap();
        assert!((y[0] - 0.75f64.sqrt()).abs() < 1e-12);
        assert!((y[1] - 0.25f64.sqrt()).abs() < 1e-12);
        assert!(matches!(root_sift(&[0.0f64; 128]), Err(Error::EmptyDescriptor)));
    }

    #[test]
    fn describe_yields_unit_nonnegative_rows() {
        let img = block_image(30, 30, |x, y| (x as i64 - 15).pow(2) + (y as i64 - 15).pow(2) < 40);
        let kps = crate::sampling::contour_keypoints(&img);
        let id: EntityId = "a-1-0".parse().unwrap();
        let set: LocalDescriptorSet<f64> = describe(&id, &img, &kps);
        assert_eq!(set.len(), kps.len());
        for r in set.rows() {
            assert!((l2_norm(r) - 1.0).abs() < 1e-9);
            assert!(r.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn external_loader_groups_and_validates() {
        let m = DatasetManifest::parse("a-1\tp.png\ttest\na-1-0\tl.png\ttest\n").unwrap();
        let mut f = WrDesc::new(3);
        f.push(&[1.0, 2.0, 3.0], RowLabel::new("a-1-0", 1, 2)).unwrap();
        f.push(&[4.0, 5.0, 6.0], RowLabel::new("a-1", 3, 4)).unwrap();
        f.push(&[7.0, 8.0, 9.0], RowLabel::new("a-1-0", 5, 6)).unwrap();
        let g: BTreeMap<_, LocalDescriptorSet<f64>> = group_wrdesc(&f, Some(&m)).unwrap();
        assert_eq!(g.len(), 2);
        let line = &g[&"a-1-0".parse().unwrap()];
        assert_eq!(line.len(), 2);
        assert_eq!(line.row(1), &[7.0, 8.0, 9.0]);
        assert_eq!(line.keypoints()[1], Keypoint::new(5, 6));

        let mut bad = f.clone();
        bad.push(&[0.0; 3], RowLabel::new("zz-9", 0, 0)).unwrap();
        assert!(matches!(group_wrdesc::<f64>(&bad, Some(&m)), Err(Error::UnknownEntity(_))));

        let empty = WrDesc::new(64);
        assert!(group_wrdesc::<f32>(&empty, Some(&m)).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn root_sift_is_unit_and_scale_invariant(
            raw in proptest::collection::vec(0.0f64..10.0, 128),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(raw.iter().any(|v| *v > 0.0));
            let y = root_sift(&raw).unwrap();
            prop_assert!((l2_norm(&y) - 1.0).abs() < 1e-9);
            prop_assert!(y.iter().all(|v| *v >= 0.0));
            let scaled: Vec<f64> = raw.iter().map(|v| v * c).collect();
            let z = root_sift(&scaled).unwrap();
            for (a, b) in y.iter().zip(&z) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
