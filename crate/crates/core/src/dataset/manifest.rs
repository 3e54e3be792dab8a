use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MANIFEST_HEADER: [&str; 7] = [
    "sketch_id",
    "instance_id",
    "sketch_path",
    "image_path",
    "subset",
    "split",
    "text_label",
];

/// Difficulty tier of a sketch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Subset {
    Easy,
    Medium,
    Hard,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Easy, Subset::Medium, Subset::Hard];
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subset::Easy => "easy",
            Subset::Medium => "medium",
            Subset::Hard => "hard",
        })
    }
}

impl FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Subset::Easy),
            "medium" => Ok(Subset::Medium),
            "hard" => Ok(Subset::Hard),
            other => Err(Error::Manifest(format!("unknown subset tag {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split {other:?}"))),
        }
    }
}

/// One gallery logo. Paths are relative to the dataset root.
#[derive(Clone, Debug, PartialEq)]
pub struct LogoRecord {
    pub instance_id: String,
    pub image_path: PathBuf,
    pub text_label: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SketchRecord {
    pub sketch_id: String,
    pub instance_id: String,
    pub path: PathBuf,
    pub subset: Subset,
    pub split: Option<Split>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SubsetCounts {
    pub easy: usize,
    pub medium: usize,
    pub hard: usize,
}

impl SubsetCounts {
    pub fn total(&self) -> usize {
        self.easy + self.medium + self.hard
    }

    pub fn get(&self, s: Subset) -> usize {
        match s {
            Subset::Easy => self.easy,
            Subset::Medium => self.medium,
            Subset::Hard => self.hard,
        }
    }
}

/// Validated logo and sketch records of one dataset root.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    root: PathBuf,
    logos: Vec<LogoRecord>,
    sketches: Vec<SketchRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    sketch_id: String,
    instance_id: String,
    sketch_path: String,
    image_path: String,
    subset: String,
    split: String,
    text_label: String,
}

impl DatasetManifest {
    /// Builds a manifest from records, enforcing id uniqueness and that
    /// every sketch refers to a listed logo. Files are not touched.
    pub fn new(
        root: impl Into<PathBuf>,
        logos: Vec<LogoRecord>,
        sketches: Vec<SketchRecord>,
    ) -> Result<Self> {
        let mut ids = HashSet::new();
        for l in &logos {
            if !ids.insert(l.instance_id.as_str()) {
                return Err(Error::Manifest(format!(
                    "duplicate instance_id {}",
                    l.instance_id
                )));
            }
        }
        let mut seen = HashSet::new();
        for s in &sketches {
            if !seen.insert(s.sketch_id.as_str()) {
                return Err(Error::Manifest(format!(
                    "duplicate sketch_id {}",
                    s.sketch_id
                )));
            }
            if !ids.contains(s.instance_id.as_str()) {
                return Err(Error::DanglingInstance {
                    sketch_id: s.sketch_id.clone(),
                    instance_id: s.instance_id.clone(),
                });
            }
        }
        Ok(DatasetManifest {
            root: root.into(),
            logos,
            sketches,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn logos(&self) -> &[LogoRecord] {
        &self.logos
    }

    pub fn sketches(&self) -> &[SketchRecord] {
        &self.sketches
    }

    pub fn logo(&self, instance_id: &str) -> Option<&LogoRecord> {
        self.logos.iter().find(|l| l.instance_id == instance_id)
    }

    pub fn sketches_in(&self, split: Split) -> impl Iterator<Item = &SketchRecord> {
        self.sketches.iter().filter(move |s| s.split == Some(split))
    }

    pub fn counts(&self) -> SubsetCounts {
        let mut c = SubsetCounts::default();
        for s in &self.sketches {
            match s.subset {
                Subset::Easy => c.easy += 1,
                Subset::Medium => c.medium += 1,
                Subset::Hard => c.hard += 1,
            }
        }
        c
    }

    pub fn logo_path(&self, logo: &LogoRecord) -> PathBuf {
        self.root.join(&logo.image_path)
    }

    pub fn sketch_path(&self, sketch: &SketchRecord) -> PathBuf {
        self.root.join(&sketch.path)
    }

    pub(crate) fn with_sketches(&self, sketches: Vec<SketchRecord>) -> Self {
        DatasetManifest {
            root: self.root.clone(),
            logos: self.logos.clone(),
            sketches,
        }
    }

    /// Writes `manifest.csv` under the root.
    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        let logos: HashMap<&str, &LogoRecord> = self
            .logos
            .iter()
            .map(|l| (l.instance_id.as_str(), l))
            .collect();
        for s in &self.sketches {
            let logo = logos[s.instance_id.as_str()];
            w.serialize(Row {
                sketch_id: s.sketch_id.clone(),
                instance_id: s.instance_id.clone(),
                sketch_path: path_text(&s.path),
                image_path: path_text(&logo.image_path),
                subset: s.subset.to_string(),
                split: s.split.map(|x| x.to_string()).unwrap_or_default(),
                text_label: logo.text_label.clone().unwrap_or_default(),
            })
            .map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

fn path_text(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Manifest(format!("{}: {e}", path.display()))
}

/// Reads and validates `root/manifest.csv`.
///
/// Logos are listed in order of first appearance. Every referenced sketch
/// file must exist; a sketch whose instance has no image on disk is an
/// integrity error.
pub fn load_manifest(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let path = root.join(MANIFEST_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let header = reader.headers().map_err(|e| csv_err(&path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Manifest(format!(
            "{}: header must be {}",
            path.display(),
            MANIFEST_HEADER.join(",")
        )));
    }

    let mut logos: Vec<LogoRecord> = Vec::new();
    let mut logo_index: HashMap<String, usize> = HashMap::new();
    let mut sketches = Vec::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| csv_err(&path, e))?;
        let ctx = |msg: String| Error::Manifest(format!("{} line {line}: {msg}", path.display()));
        if row.sketch_id.is_empty() || row.instance_id.is_empty() {
            return Err(ctx("empty sketch_id or instance_id".into()));
        }
        let subset = row
            .subset
            .parse::<Subset>()
            .map_err(|e| ctx(e.to_string()))?;
        let split = match row.split.as_str() {
            "" => None,
            s => Some(s.parse::<Split>().map_err(|e| ctx(e.to_string()))?),
        };
        let sketch_path = PathBuf::from(&row.sketch_path);
        let full = root.join(&sketch_path);
        if !full.is_file() {
            return Err(Error::io(
                full,
                std::io::Error::new(std::io::ErrorKind::NotFound, "sketch file not found"),
            ));
        }
        if row.image_path.is_empty() || !root.join(&row.image_path).is_file() {
            return Err(Error::DanglingInstance {
                sketch_id: row.sketch_id,
                instance_id: row.instance_id,
            });
        }
        let label = (!row.text_label.is_empty()).then(|| row.text_label.clone());
        match logo_index.get(&row.instance_id) {
            Some(&idx) => {
                let existing = &logos[idx];
                if existing.image_path != Path::new(&row.image_path) || existing.text_label != label
                {
                    return Err(ctx(format!(
                        "instance {} listed with conflicting image_path or text_label",
                        row.instance_id
                    )));
                }
            }
            None => {
                logo_index.insert(row.instance_id.clone(), logos.len());
                logos.push(LogoRecord {
                    instance_id: row.instance_id.clone(),
                    image_path: PathBuf::from(&row.image_path),
                    text_label: label,
                });
            }
        }
        sketches.push(SketchRecord {
            sketch_id: row.sketch_id,
            instance_id: row.instance_id,
            path: sketch_path,
            subset,
            split,
        });
    }
    DatasetManifest::new(root, logos, sketches)
}
