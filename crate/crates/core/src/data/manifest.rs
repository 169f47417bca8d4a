//! JSON dataset manifest: one entry per video, paths relative to the
//! manifest's own directory.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::format::{read_mask, read_video};
use super::Video;
use crate::error::{Error, Result};
use crate::metrics::LabelMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    BaselineTrain,
    MetaTrain,
    TestInside,
    TestOutside,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::BaselineTrain, Split::MetaTrain, Split::TestInside, Split::TestOutside];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::BaselineTrain => "baseline_train",
            Split::MetaTrain => "meta_train",
            Split::TestInside => "test_inside",
            Split::TestOutside => "test_outside",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub video_path: String,
    pub mask_paths: Vec<String>,
    /// Frame index annotated by each entry of `mask_paths`.
    pub mask_frames: Vec<usize>,
    pub category: String,
    pub split: Split,
}

/// Video ids partitioned into splits. Each entry names exactly one split, so
/// the partitions are disjoint once ids are unique.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    base_dir: PathBuf,
}

/// A video with its annotated frames.
#[derive(Clone, Debug)]
pub struct Sample {
    pub video: Video,
    pub category: String,
    /// (frame index, mask) in manifest order.
    pub masks: Vec<(usize, LabelMask)>,
}

impl Sample {
    pub fn mask_at(&self, frame: usize) -> Option<&LabelMask> {
        self.masks.iter().find(|(f, _)| *f == frame).map(|(_, m)| m)
    }
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            entries,
            base_dir: base_dir.into(),
        };
        m.validate_entries()?;
        Ok(m)
    }

    fn validate_entries(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Config(format!("manifest: duplicate id `{}`", e.id)));
            }
            if e.mask_paths.len() != e.mask_frames.len() {
                return Err(Error::Config(format!(
                    "manifest: `{}` has {} mask paths but {} mask frames",
                    e.id,
                    e.mask_paths.len(),
                    e.mask_frames.len()
                )));
            }
        }
        Ok(())
    }

    /// Reads and validates a manifest, including that every file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<ManifestEntry> =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::new(entries, base)?;
        for e in &m.entries {
            for rel in std::iter::once(&e.video_path).chain(&e.mask_paths) {
                let p = m.resolve(rel);
                if !p.is_file() {
                    return Err(Error::Config(format!("manifest: `{}` refers to missing file {}", e.id, p.display())));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.entries).map_err(|e| Error::Config(e.to_string()))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_sample(&self, entry: &ManifestEntry) -> Result<Sample> {
        let mut video = read_video(&self.resolve(&entry.video_path))?;
        video.id = entry.id.clone();
        let masks = entry
            .mask_frames
            .iter()
            .zip(&entry.mask_paths)
            .map(|(&f, p)| {
                if f >= video.len() {
                    return Err(Error::Config(format!(
                        "manifest: `{}` mask frame {f} beyond {} frames",
                        entry.id,
                        video.len()
                    )));
                }
                Ok((f, read_mask(&self.resolve(p))?))
            })
            .collect::<Result<_>>()?;
        Ok(Sample {
            video,
            category: entry.category.clone(),
            masks,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.split(split).map(|e| self.load_sample(e)).collect()
    }
}
