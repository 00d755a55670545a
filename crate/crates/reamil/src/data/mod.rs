//! Bags, datasets, and where they live on disk.
//!
//! A bag is one slide: an `(N, d)` feature matrix, per-tile `(u, v)`
//! coordinates, a class label, and slide/patient identifiers. A dataset is
//! a manifest TSV that assigns every bag file to a train/val/test split;
//! splits are patient-disjoint by construction and that invariant is
//! re-checked whenever a manifest is loaded.

mod bagfile;
mod split;
pub(crate) mod synth;

pub use bagfile::{read_bag, write_bag};
pub use split::{split_patients, SplitEntry, SplitRatios};
pub use synth::{gen_synthetic, read_evidence_sidecar, SynthConfig};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::tensor::Array;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bag format error at byte {offset}: {what}")]
    BagFormat {
        path: PathBuf,
        offset: usize,
        what: String,
    },
    #[error("bag {slide_id:?}: {what}")]
    InvalidBag { slide_id: String, what: String },
    #[error("{path}:{line}: manifest error: {what}")]
    Manifest {
        path: PathBuf,
        line: usize,
        what: String,
    },
    #[error("{path}: feature dim mismatch at byte {offset}: manifest says {expected}, bag has {found}")]
    FeatureDimMismatch {
        path: PathBuf,
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("split ratios must be non-negative and sum to 1, got {ratios:?} (sum {sum})")]
    BadRatios { ratios: [f64; 3], sum: f64 },
    #[error("class {class} has {patients} patients, fewer than the {splits} splits")]
    TooFewPatients {
        class: usize,
        patients: usize,
        splits: usize,
    },
    #[error("patient {patient:?} appears in multiple splits")]
    PatientOverlap { patient: String },
    #[error("invalid synthesis config: {0}")]
    BadSynthConfig(String),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train|val|test)")),
        }
    }
}

/// One slide's worth of tiles.
#[derive(Clone, Debug)]
pub struct BagRecord {
    slide_id: String,
    patient_id: String,
    label: usize,
    features: Array<f32>,
    coords: Array<f32>,
}

impl BagRecord {
    pub fn new(
        slide_id: impl Into<String>,
        patient_id: impl Into<String>,
        label: usize,
        features: Array<f32>,
        coords: Array<f32>,
    ) -> Result<Self, DataError> {
        let slide_id = slide_id.into();
        let invalid = |what: String| DataError::InvalidBag {
            slide_id: slide_id.clone(),
            what,
        };
        if features.rank() != 2 || features.shape()[0] == 0 || features.shape()[1] == 0 {
            return Err(invalid(format!(
                "features must be a non-empty (N, d) matrix, got {:?}",
                features.shape()
            )));
        }
        let n = features.shape()[0];
        if coords.shape() != [n, 2] {
            return Err(invalid(format!(
                "coords must be ({n}, 2), got {:?}",
                coords.shape()
            )));
        }
        if !features.all_finite() || !coords.all_finite() {
            return Err(invalid("non-finite feature or coordinate values".into()));
        }
        Ok(BagRecord {
            slide_id,
            patient_id: patient_id.into(),
            label,
            features,
            coords,
        })
    }

    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }
    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }
    pub fn label(&self) -> usize {
        self.label
    }
    pub fn features(&self) -> &Array<f32> {
        &self.features
    }
    pub fn coords(&self) -> &Array<f32> {
        &self.coords
    }
    pub fn n_tiles(&self) -> usize {
        self.features.shape()[0]
    }
    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }
}

#[derive(Clone, Debug)]
pub struct ManifestRecord {
    pub slide_id: String,
    pub patient_id: String,
    pub label: usize,
    pub split: Split,
    /// Bag file path, relative to the manifest's directory.
    pub path: PathBuf,
}

/// The dataset index: every bag, its split, and the shared dimensions.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    records: Vec<ManifestRecord>,
    num_classes: usize,
    feature_dim: usize,
}

impl DatasetManifest {
    pub fn new(
        records: Vec<ManifestRecord>,
        num_classes: usize,
        feature_dim: usize,
    ) -> Result<Self, DataError> {
        let fail = |what: String| DataError::Manifest {
            path: PathBuf::from("<memory>"),
            line: 0,
            what,
        };
        if records.is_empty() {
            return Err(fail("manifest has no records".into()));
        }
        let mut slides = BTreeSet::new();
        for r in &records {
            if r.label >= num_classes {
                return Err(fail(format!(
                    "slide {:?} has label {} but num_classes={num_classes}",
                    r.slide_id, r.label
                )));
            }
            if !slides.insert(r.slide_id.clone()) {
                return Err(fail(format!("duplicate slide id {:?}", r.slide_id)));
            }
        }
        let m = DatasetManifest {
            records,
            num_classes,
            feature_dim,
        };
        m.check_patient_disjoint()?;
        Ok(m)
    }

    fn check_patient_disjoint(&self) -> Result<(), DataError> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for r in &self.records {
            match seen.get(r.patient_id.as_str()) {
                Some(&s) if s != r.split => {
                    return Err(DataError::PatientOverlap {
                        patient: r.patient_id.clone(),
                    })
                }
                _ => {
                    seen.insert(&r.patient_id, r.split);
                }
            }
        }
        Ok(())
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let mut out = String::new();
        out.push_str("#reamil-manifest v1\n");
        out.push_str(&format!("#num_classes={}\n", self.num_classes));
        out.push_str(&format!("#feature_dim={}\n", self.feature_dim));
        out.push_str("slide_id\tpatient_id\tlabel\tsplit\tpath\n");
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.slide_id,
                r.patient_id,
                r.label,
                r.split,
                r.path.display()
            ));
        }
        std::fs::write(path, out).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let fail = |line: usize, what: String| DataError::Manifest {
            path: path.to_path_buf(),
            line,
            what,
        };
        let mut num_classes = None;
        let mut feature_dim = None;
        let mut records = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(directive) = line.strip_prefix('#') {
                if let Some(v) = directive.strip_prefix("num_classes=") {
                    num_classes =
                        Some(v.parse::<usize>().map_err(|e| {
                            fail(lineno, format!("bad num_classes {v:?}: {e}"))
                        })?);
                } else if let Some(v) = directive.strip_prefix("feature_dim=") {
                    feature_dim =
                        Some(v.parse::<usize>().map_err(|e| {
                            fail(lineno, format!("bad feature_dim {v:?}: {e}"))
                        })?);
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields[0] == "slide_id" {
                continue; // column header
            }
            if fields.len() != 5 {
                return Err(fail(lineno, format!("expected 5 fields, got {}", fields.len())));
            }
            let label = fields[2]
                .parse::<usize>()
                .map_err(|e| fail(lineno, format!("bad label {:?}: {e}", fields[2])))?;
            let split = Split::from_str(fields[3]).map_err(|e| fail(lineno, e))?;
            records.push(ManifestRecord {
                slide_id: fields[0].to_string(),
                patient_id: fields[1].to_string(),
                label,
                split,
                path: PathBuf::from(fields[4]),
            });
        }
        let num_classes = num_classes
            .ok_or_else(|| fail(0, "missing #num_classes directive".into()))?;
        let feature_dim = feature_dim
            .ok_or_else(|| fail(0, "missing #feature_dim directive".into()))?;
        Self::new(records, num_classes, feature_dim)
    }

    /// Loads every bag of one split, in manifest order, validating that each
    /// file matches its manifest row (dims, label, slide id).
    pub fn load_split(&self, root: &Path, split: Split) -> Result<Vec<BagRecord>, DataError> {
        let mut bags = Vec::new();
        for r in self.split_records(split) {
            bags.push(self.load_record(root, r)?);
        }
        Ok(bags)
    }

    pub fn load_record(&self, root: &Path, r: &ManifestRecord) -> Result<BagRecord, DataError> {
        let path = root.join(&r.path);
        let bag = read_bag(&path)?;
        if bag.feature_dim() != self.feature_dim {
            return Err(DataError::FeatureDimMismatch {
                path,
                offset: bagfile::DIM_FIELD_OFFSET,
                expected: self.feature_dim,
                found: bag.feature_dim(),
            });
        }
        if bag.slide_id() != r.slide_id || bag.label() != r.label {
            return Err(DataError::InvalidBag {
                slide_id: r.slide_id.clone(),
                what: format!(
                    "bag file {:?} disagrees with manifest (slide {:?} label {}, file has slide {:?} label {})",
                    r.path, r.slide_id, r.label, bag.slide_id(), bag.label()
                ),
            });
        }
        Ok(bag)
    }

    /// Existence plus per-file consistency for the whole dataset.
    pub fn validate(&self, root: &Path) -> Result<(), DataError> {
        for r in &self.records {
            self.load_record(root, r)?;
        }
        Ok(())
    }

    pub fn find(&self, slide_id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.slide_id == slide_id)
    }
}
