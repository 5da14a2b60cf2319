use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA: &str = "directcaps.manifest/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    /// Path relative to the manifest root.
    pub file: PathBuf,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    schema: String,
    num_classes: usize,
    channels: usize,
    hr_size: usize,
    vlr_size: usize,
    /// Labels CSVs relative to the manifest, keyed by split.
    train_labels: PathBuf,
    test_labels: PathBuf,
}

/// Dataset description: a TOML file pointing at one `file,label` CSV per
/// split, with image paths relative to the CSV's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub num_classes: usize,
    pub channels: usize,
    pub hr_size: usize,
    pub vlr_size: usize,
    pub entries: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    file: String,
    label: usize,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: ManifestFile = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if raw.schema != MANIFEST_SCHEMA {
            return Err(Error::Config(format!(
                "{}: unknown manifest schema {:?}, expected {MANIFEST_SCHEMA:?}",
                path.display(),
                raw.schema
            )));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut entries = Vec::new();
        for (split, rel) in [(Split::Train, &raw.train_labels), (Split::Test, &raw.test_labels)] {
            let csv_path = root.join(rel);
            let base = rel.parent().map(Path::to_path_buf).unwrap_or_default();
            let mut reader = csv::Reader::from_path(&csv_path).map_err(|e| Error::Config(format!("{}: {e}", csv_path.display())))?;
            for row in reader.deserialize::<LabelRow>() {
                let row = row.map_err(|e| Error::Config(format!("{}: {e}", csv_path.display())))?;
                entries.push(Entry {
                    file: base.join(row.file),
                    label: row.label,
                    split,
                });
            }
        }
        let m = DatasetManifest {
            root,
            num_classes: raw.num_classes,
            channels: raw.channels,
            hr_size: raw.hr_size,
            vlr_size: raw.vlr_size,
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    /// Checks labels, resolutions and file existence (not decodability; see
    /// [`DatasetManifest::load_split`]).
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.vlr_size == 0 || self.vlr_size >= self.hr_size {
            return Err(Error::Config(format!(
                "VLR size {} must be positive and below HR size {}",
                self.vlr_size, self.hr_size
            )));
        }
        for e in &self.entries {
            if e.label >= self.num_classes {
                return Err(Error::Config(format!(
                    "{}: label {} out of range for {} classes",
                    e.file.display(),
                    e.label,
                    self.num_classes
                )));
            }
            let p = self.root.join(&e.file);
            if !p.is_file() {
                return Err(Error::io(&p, std::io::Error::new(std::io::ErrorKind::NotFound, "referenced image is missing")));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Writes `manifest.toml` plus `train/labels.csv` and `test/labels.csv`
    /// under `root`. Entry paths must start with their split directory.
    pub fn save(&self) -> Result<PathBuf> {
        for split in [Split::Train, Split::Test] {
            let dir = self.root.join(split.as_str());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let csv_path = dir.join("labels.csv");
            let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Config(format!("{}: {e}", csv_path.display())))?;
            for e in self.split(split) {
                let file = e.file.strip_prefix(split.as_str()).map_err(|_| {
                    Error::InvalidArgument(format!("{} is not under {}/", e.file.display(), split.as_str()))
                })?;
                w.serialize(LabelRow {
                    file: file.to_string_lossy().into_owned(),
                    label: e.label,
                })
                .map_err(|e| Error::Config(format!("{}: {e}", csv_path.display())))?;
            }
            w.flush().map_err(|e| Error::io(&csv_path, e))?;
        }
        let raw = ManifestFile {
            schema: MANIFEST_SCHEMA.into(),
            num_classes: self.num_classes,
            channels: self.channels,
            hr_size: self.hr_size,
            vlr_size: self.vlr_size,
            train_labels: PathBuf::from("train/labels.csv"),
            test_labels: PathBuf::from("test/labels.csv"),
        };
        let path = self.root.join("manifest.toml");
        let text = toml::to_string(&raw).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Decodes every image of a split, checking geometry.
    pub fn load_split(&self, split: Split) -> Result<LoadedSplit> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut files = Vec::new();
        for e in self.split(split) {
            let path = self.root.join(&e.file);
            let img = Image::load_png(&path)?;
            if img.channels() != self.channels || img.height() != self.hr_size || img.width() != self.hr_size {
                return Err(Error::Image {
                    path,
                    detail: format!(
                        "expected {}x{}x{}, found {}x{}x{}",
                        self.channels,
                        self.hr_size,
                        self.hr_size,
                        img.channels(),
                        img.height(),
                        img.width()
                    ),
                });
            }
            images.push(img);
            labels.push(e.label);
            files.push(e.file.clone());
        }
        Ok(LoadedSplit { images, labels, files })
    }
}

/// Decoded HR images of one split.
#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub files: Vec<PathBuf>,
}

impl LoadedSplit {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}
