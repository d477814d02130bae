//! Tab-separated dataset manifest.
//!
//! One record per line: `entity_id<TAB>image_path<TAB>split[<TAB>transcription]`.
//! Lines starting with `#` are comments. The image path may carry a crop
//! suffix `@x,y,w,h`, in which case the entity is that rectangle of the image.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::entity::EntityId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Rectangle of a larger image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Crop {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: EntityId,
    /// Path relative to the manifest's directory.
    pub path: String,
    pub crop: Option<Crop>,
    pub split: Split,
    pub transcription: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Validates id uniqueness and that every writer carries a single split.
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut splits: BTreeMap<&str, Split> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            if !seen.insert(&e.id) {
                return Err(Error::Manifest {
                    line: i + 1,
                    msg: format!("duplicate entity {}", e.id),
                });
            }
            if let Some(s) = splits.insert(e.id.writer(), e.split) {
                if s != e.split {
                    return Err(Error::Manifest {
                        line: i + 1,
                        msg: format!("writer {} appears in both splits", e.id.writer()),
                    });
                }
            }
            if let Some(t) = &e.transcription {
                if t.contains(['\t', '\n', '\r']) {
                    return Err(Error::Manifest {
                        line: i + 1,
                        msg: "transcription contains a tab or newline".into(),
                    });
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &EntityId) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| &e.id == id)
    }

    pub fn split_of_writer(&self, writer: &str) -> Option<Split> {
        self.entries
            .iter()
            .find(|e| e.id.writer() == writer)
            .map(|e| e.split)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Manifest { line: i + 1, msg };
            let fields: Vec<&str> = line.split('\t').collect();
            if !(3..=4).contains(&fields.len()) {
                return Err(err(format!("expected 3 or 4 tab-separated fields, got {}", fields.len())));
            }
            let id: EntityId = fields[0].parse().map_err(|e: Error| err(e.to_string()))?;
            let (path, crop) = parse_path(fields[1]).map_err(err)?;
            let split: Split = fields[2].parse().map_err(err)?;
            let transcription = fields.get(3).map(|t| t.to_string());
            entries.push(ManifestEntry {
                id,
                path,
                crop,
                split,
                transcription,
            });
        }
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string())?;
        Ok(())
    }

    /// Drops word entries whose transcription has no letter or digit.
    /// Entries without a transcription are kept.
    pub fn filter_words(&self) -> DatasetManifest {
        let entries = self
            .entries
            .iter()
            .filter(|e| match &e.transcription {
                Some(t) if e.id.word().is_some() => t.chars().any(char::is_alphanumeric),
                _ => true,
            })
            .cloned()
            .collect();
        DatasetManifest { entries }
    }
}

/// Free-function form of [`DatasetManifest::filter_words`].
pub fn filter_words(manifest: &DatasetManifest) -> DatasetManifest {
    manifest.filter_words()
}

fn parse_path(field: &str) -> std::result::Result<(String, Option<Crop>), String> {
    let Some((path, rect)) = field.rsplit_once('@') else {
        return Ok((field.to_string(), None));
    };
    let nums: Vec<usize> = rect
        .split(',')
        .map(|n| n.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| format!("bad crop {rect:?}"))?;
    match nums[..] {
        [x, y, w, h] if w > 0 && h > 0 => Ok((path.to_string(), Some(Crop { x, y, w, h }))),
        _ => Err(format!("bad crop {rect:?}")),
    }
}

impl fmt::Display for DatasetManifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            write!(f, "{}\t{}", e.id, e.path)?;
            if let Some(c) = e.crop {
                write!(f, "@{},{},{},{}", c.x, c.y, c.w, c.h)?;
            }
            write!(f, "\t{}", e.split)?;
            if let Some(t) = &e.transcription {
                write!(f, "\t{t}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
