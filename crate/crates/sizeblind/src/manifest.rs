//! Dataset manifests: CSV records binding sample ids, image paths, labels,
//! and splits, with per-split counts.

use std::collections::HashSet;
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{read_image, ImageBuffer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Malignant,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Malignant => "malignant",
        }
    }

    pub fn parse(s: &str) -> Result<Label> {
        match s {
            "benign" => Ok(Label::Benign),
            "malignant" => Ok(Label::Malignant),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }

    /// Class index used by the model: benign = 0, malignant = 1.
    pub fn class_index(&self) -> usize {
        match self {
            Label::Benign => 0,
            Label::Malignant => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::UnknownSplit(other.to_string())),
        }
    }
}

/// One manifest record. `path` is relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub path: String,
    pub label: Label,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn new(train: usize, validation: usize, test: usize) -> Self {
        SplitCounts { train, validation, test }
    }

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

/// Named split-count presets. `isic2018-counts` mirrors the 1686/210/213
/// train/validation/test sizes of the reference dataset.
pub fn preset_counts(name: &str) -> Option<SplitCounts> {
    match name {
        "isic2018-counts" => Some(SplitCounts::new(1686, 210, 213)),
        _ => None,
    }
}

const HEADER: [&str; 4] = ["id", "path", "label", "split"];

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    root: PathBuf,
    records: Vec<Sample>,
    counts: SplitCounts,
}

impl DatasetManifest {
    /// Builds a manifest from records, rejecting duplicate ids and computing
    /// counts. Does not touch the filesystem.
    pub fn new(root: impl Into<PathBuf>, records: Vec<Sample>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut counts = SplitCounts::default();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            match r.split {
                Split::Train => counts.train += 1,
                Split::Validation => counts.validation += 1,
                Split::Test => counts.test += 1,
            }
        }
        drop(seen);
        Ok(DatasetManifest {
            root: root.into(),
            records,
            counts,
        })
    }

    /// Loads a manifest CSV wholesale, verifying the header, labels, splits,
    /// id uniqueness, and that every referenced file exists under the
    /// manifest directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != HEADER {
            return Err(Error::ManifestHeader);
        }
        let mut records = Vec::new();
        for row in reader.records() {
            let row = row?;
            if row.len() != 4 {
                return Err(Error::ManifestHeader);
            }
            records.push(Sample {
                id: row[0].to_string(),
                path: row[1].to_string(),
                label: Label::parse(&row[2])?,
                split: Split::parse(&row[3])?,
            });
        }
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let manifest = DatasetManifest::new(root, records)?;
        for r in &manifest.records {
            let p = manifest.resolve(r);
            if !p.is_file() {
                return Err(Error::MissingFile {
                    id: r.id.clone(),
                    path: p,
                });
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(HEADER)?;
        for r in &self.records {
            writer.write_record([r.id.as_str(), r.path.as_str(), r.label.as_str(), r.split.as_str()])?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[Sample] {
        &self.records
    }

    pub fn counts(&self) -> SplitCounts {
        self.counts
    }

    pub fn resolve(&self, sample: &Sample) -> PathBuf {
        self.root.join(&sample.path)
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Reads every referenced image into memory.
    pub fn load_images(&self) -> Result<Vec<LoadedSample>> {
        self.records
            .iter()
            .map(|r| {
                let image = read_image(self.resolve(r))
                    .map_err(|e| Error::for_record(&r.id, e))?;
                Ok(LoadedSample {
                    id: r.id.clone(),
                    label: r.label,
                    split: r.split,
                    image,
                })
            })
            .collect()
    }
}

/// A manifest record with its image in memory.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub id: String,
    pub label: Label,
    pub split: Split,
    pub image: ImageBuffer,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn tmpdir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("sizeblind-manifest-tests").join(name);
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn touch_image(dir: &Path, name: &str) {
        let img = ImageBuffer::new(2, 2);
        crate::image::write_image(&img, dir.join(name)).unwrap();
    }

    #[test]
    fn three_row_manifest_counts_each_split_once() {
        let dir = tmpdir("counts");
        for n in ["a.ppm", "b.ppm", "c.ppm"] {
            touch_image(&dir, n);
        }
        fs::write(
            dir.join("manifest.csv"),
            "id,path,label,split\na,a.ppm,benign,train\nb,b.ppm,malignant,validation\nc,c.ppm,benign,test\n",
        )
        .unwrap();
        let m = DatasetManifest::load(dir.join("manifest.csv")).unwrap();
        assert_eq!(m.counts(), SplitCounts::new(1, 1, 1));
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let dir = tmpdir("dup");
        touch_image(&dir, "a.ppm");
        fs::write(
            dir.join("manifest.csv"),
            "id,path,label,split\na,a.ppm,benign,train\na,a.ppm,benign,test\n",
        )
        .unwrap();
        assert!(matches!(
            DatasetManifest::load(dir.join("manifest.csv")),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn unknown_label_and_split_are_rejected() {
        let dir = tmpdir("labels");
        touch_image(&dir, "a.ppm");
        fs::write(
            dir.join("m1.csv"),
            "id,path,label,split\na,a.ppm,weird,train\n",
        )
        .unwrap();
        assert!(matches!(
            DatasetManifest::load(dir.join("m1.csv")),
            Err(Error::UnknownLabel(_))
        ));
        fs::write(
            dir.join("m2.csv"),
            "id,path,label,split\na,a.ppm,benign,holdout\n",
        )
        .unwrap();
        assert!(matches!(
            DatasetManifest::load(dir.join("m2.csv")),
            Err(Error::UnknownSplit(_))
        ));
    }

    #[test]
    fn missing_file_is_reported_with_id() {
        let dir = tmpdir("missing");
        fs::write(
            dir.join("manifest.csv"),
            "id,path,label,split\nghost,nothere.ppm,benign,train\n",
        )
        .unwrap();
        match DatasetManifest::load(dir.join("manifest.csv")) {
            Err(Error::MissingFile { id, .. }) => assert_eq!(id, "ghost"),
            other => panic!("expected MissingFile, got {other:?}"),
        }
    }

    #[test]
    fn header_must_match_exactly() {
        let dir = tmpdir("header");
        fs::write(dir.join("manifest.csv"), "id,file,label,split\n").unwrap();
        assert!(matches!(
            DatasetManifest::load(dir.join("manifest.csv")),
            Err(Error::ManifestHeader)
        ));
    }

    #[test]
    fn save_load_round_trip_preserves_records() {
        let dir = tmpdir("roundtrip");
        for n in ["x.ppm", "y.ppm"] {
            touch_image(&dir, n);
        }
        let m = DatasetManifest::new(
            &dir,
            vec![
                Sample {
                    id: "x".into(),
                    path: "x.ppm".into(),
                    label: Label::Benign,
                    split: Split::Train,
                },
                Sample {
                    id: "y".into(),
                    path: "y.ppm".into(),
                    label: Label::Malignant,
                    split: Split::Test,
                },
            ],
        )
        .unwrap();
        m.save(dir.join("manifest.csv")).unwrap();
        let back = DatasetManifest::load(dir.join("manifest.csv")).unwrap();
        assert_eq!(m.records(), back.records());
        assert_eq!(m.counts(), back.counts());
    }

    #[test]
    fn isic2018_preset_counts() {
        let c = preset_counts("isic2018-counts").unwrap();
        assert_eq!(c.train, 1686);
        assert_eq!(c.test, 213);
        assert_eq!(c.validation, 210);
        assert!(preset_counts("nope").is_none());
    }
}
