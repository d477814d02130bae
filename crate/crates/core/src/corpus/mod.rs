//! Dataset ingestion: entity ids, manifests, binarization and the synthetic
//! corpus generator.

mod entity;
mod image;
mod manifest;
mod synth;

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

pub use self::entity::{EntityId, Level};
pub use self::image::{binarize, otsu_from_histogram, otsu_threshold, threshold_image, BinaryImage, GrayImage};
pub use self::manifest::{filter_words, Crop, DatasetManifest, ManifestEntry, Split};
pub use self::synth::{generate_synthetic_corpus, SynthConfig, SynthCorpus, WriterStyle, VOCABULARY};

use crate::error::{Error, Result};

/// A page and its line entities in line order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageUnits {
    pub id: EntityId,
    pub lines: Vec<EntityId>,
}

/// Binarized per-entity images plus the manifest they came from.
#[derive(Debug, Clone)]
pub struct Corpus {
    manifest: DatasetManifest,
    images: BTreeMap<EntityId, BinaryImage>,
}

/// Otsu binarization that maps a single-valued crop to an empty mask instead
/// of failing; such crops carry no handwriting.
fn binarize_lenient(img: &GrayImage) -> BinaryImage {
    binarize(img).unwrap_or_else(|_| BinaryImage::blank(img.width(), img.height()))
}

impl Corpus {
    /// Reads the manifest, loads every referenced image (applying crops) and
    /// binarizes each entity with Otsu's threshold.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        Self::load_with_root(manifest, root)
    }

    pub fn load_with_root(manifest: DatasetManifest, root: &Path) -> Result<Self> {
        for e in manifest.entries() {
            let p = root.join(&e.path);
            if !p.is_file() {
                return Err(Error::MissingImage(p));
            }
        }
        let images = manifest
            .entries()
            .par_iter()
            .map(|e| {
                let mut gray = GrayImage::load(&root.join(&e.path))?;
                if let Some(c) = e.crop {
                    gray = gray.crop(c.x, c.y, c.w, c.h)?;
                }
                Ok((e.id.clone(), binarize_lenient(&gray)))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Self { manifest, images })
    }

    /// Binarizes in-memory gray images. Every manifest entry needs an image.
    pub fn from_gray(manifest: DatasetManifest, gray: &BTreeMap<EntityId, GrayImage>) -> Result<Self> {
        let images = manifest
            .entries()
            .par_iter()
            .map(|e| {
                let g = gray.get(&e.id).ok_or_else(|| Error::UnknownEntity(e.id.to_string()))?;
                let g = match e.crop {
                    Some(c) => g.crop(c.x, c.y, c.w, c.h)?,
                    None => g.clone(),
                };
                Ok((e.id.clone(), binarize_lenient(&g)))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Self { manifest, images })
    }

    pub fn from_synth(s: &SynthCorpus) -> Result<Self> {
        Self::from_gray(s.manifest.clone(), &s.images)
    }

    /// Already-binarized images.
    pub fn from_binary(manifest: DatasetManifest, images: BTreeMap<EntityId, BinaryImage>) -> Result<Self> {
        for e in manifest.entries() {
            if !images.contains_key(&e.id) {
                return Err(Error::UnknownEntity(e.id.to_string()));
            }
        }
        Ok(Self { manifest, images })
    }

    /// Entity structure only, without images. Suits runs on external
    /// descriptors, where pixels are never read.
    pub fn manifest_only(manifest: DatasetManifest) -> Self {
        Self {
            manifest,
            images: BTreeMap::new(),
        }
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn image(&self, id: &EntityId) -> Option<&BinaryImage> {
        self.images.get(id)
    }

    pub fn split_of(&self, id: &EntityId) -> Option<Split> {
        self.manifest.split_of_writer(id.writer())
    }

    pub fn contains(&self, id: &EntityId) -> bool {
        self.images.contains_key(id)
    }

    /// Pages of a split with their line entities sorted by line number.
    /// Pages that only exist through their lines are included as well.
    pub fn pages(&self, split: Split) -> Vec<PageUnits> {
        let mut pages: BTreeMap<EntityId, Vec<EntityId>> = BTreeMap::new();
        for e in self.manifest.entries() {
            if e.split != split {
                continue;
            }
            match e.id.level() {
                Level::Page => {
                    pages.entry(e.id.clone()).or_default();
                }
                Level::Line => pages.entry(e.id.page_id()).or_default().push(e.id.clone()),
                Level::Word => {}
            }
        }
        pages
            .into_iter()
            .map(|(id, mut lines)| {
                lines.sort_by_key(|l| l.line());
                PageUnits { id, lines }
            })
            .collect()
    }

    /// Word entities of a split with their transcriptions, after removing
    /// punctuation-only words.
    pub fn words(&self, split: Split) -> Vec<(EntityId, Option<String>)> {
        self.manifest
            .filter_words()
            .entries()
            .iter()
            .filter(|e| e.split == split && e.id.level() == Level::Word)
            .map(|e| (e.id.clone(), e.transcription.clone()))
            .collect()
    }

    pub fn writers(&self, split: Split) -> Vec<String> {
        let mut w: Vec<String> = self
            .manifest
            .entries()
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id.writer().to_string())
            .collect();
        w.sort();
        w.dedup();
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_from_disk_matches_in_memory() {
        let cfg = SynthConfig {
            writers: 2,
            train_writers: 1,
            pages_per_writer: 1,
            lines_per_page: 2,
            words_per_line: 2,
            ..SynthConfig::default()
        };
        let s = generate_synthetic_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.write_to(dir.path()).unwrap();
        let disk = Corpus::load(&dir.path().join("manifest.tsv")).unwrap();
        let mem = Corpus::from_synth(&s).unwrap();
        assert_eq!(disk.manifest(), mem.manifest());
        for e in mem.manifest().entries() {
            assert_eq!(disk.image(&e.id), mem.image(&e.id));
        }
        let pages = mem.pages(Split::Test);
        assert_eq!(pages.len(), 2);
        assert_eq!(pages[0].lines.len(), 2);
        assert_eq!(mem.writers(Split::Train), vec!["T001".to_string()]);
    }

    #[test]
    fn missing_image_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.tsv");
        std::fs::write(&m, "a-1\tnope.png\ttest\n").unwrap();
        assert!(matches!(Corpus::load(&m), Err(Error::MissingImage(_))));
    }

    #[test]
    fn crops_are_applied() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = GrayImage::filled(20, 10, 250);
        for x in 5..9 {
            g.set(x, 4, 0);
        }
        g.save_png(&dir.path().join("p.png")).unwrap();
        std::fs::write(dir.path().join("m.tsv"), "a-1\tp.png\ttest\na-1-0\tp.png@4,2,8,5\ttest\n").unwrap();
        let c = Corpus::load(&dir.path().join("m.tsv")).unwrap();
        let line = c.image(&"a-1-0".parse().unwrap()).unwrap();
        assert_eq!((line.width(), line.height()), (8, 5));
        assert_eq!(line.ink_count(), 4);
        assert!(line.get(1, 2));
    }
}
