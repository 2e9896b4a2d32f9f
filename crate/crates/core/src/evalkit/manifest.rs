//! Dataset manifests and stratified splitting.
//!
//! A manifest is a CSV file with header `image_id,path,label,category,split`.
//! Relative paths resolve against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Class;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "" | "unassigned" => Ok(Split::Unassigned),
            other => Err(Error::format("manifest", format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image_id: u64,
    pub path: PathBuf,
    pub label: Class,
    pub category: String,
    pub split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    image_id: u64,
    path: String,
    label: String,
    category: String,
    split: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    records: Vec<ManifestRecord>,
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.image_id) {
                return Err(Error::format("manifest", format!("duplicate image_id {}", r.image_id)));
            }
        }
        Ok(DatasetManifest {
            records,
            base_dir: base_dir.into(),
        })
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    /// Absolute (or base-relative) location of a record's image.
    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.base_dir.join(&record.path)
        }
    }

    pub fn get(&self, image_id: u64) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Records of `split`, or all records when the manifest carries no
    /// split assignment at all (external evaluation sets).
    pub fn eval_records(&self, split: Split) -> Vec<&ManifestRecord> {
        if self.records.iter().all(|r| r.split == Split::Unassigned) {
            self.records.iter().collect()
        } else {
            self.in_split(split).collect()
        }
    }

    pub fn read_csv(reader: impl std::io::Read, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::format("manifest", e))?.clone();
        let expected = ["image_id", "path", "label", "category", "split"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::format(
                "manifest",
                format!("header must be {}", expected.join(",")),
            ));
        }
        let mut records = Vec::new();
        for (line, row) in rdr.deserialize::<CsvRow>().enumerate() {
            let row = row.map_err(|e| Error::format("manifest", format!("row {}: {e}", line + 1)))?;
            records.push(ManifestRecord {
                image_id: row.image_id,
                path: PathBuf::from(row.path),
                label: row.label.parse()?,
                category: row.category,
                split: row.split.parse()?,
            });
        }
        DatasetManifest::new(records, base_dir)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        DatasetManifest::read_csv(file, base)
    }

    /// Labels are written as class indices.
    pub fn write_csv(&self, writer: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.records {
            w.serialize(CsvRow {
                image_id: r.image_id,
                path: r.path.to_string_lossy().into_owned(),
                label: r.label.index().to_string(),
                category: r.category.clone(),
                split: r.split.name().to_string(),
            })
            .map_err(|e| Error::format("manifest", e))?;
        }
        w.flush().map_err(|e| Error::format("manifest", e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }
}

/// Split proportions in percent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 60,
            val: 20,
            test: 20,
        }
    }
}

impl SplitRatios {
    /// Largest-remainder apportionment of `n` items; ties favour train,
    /// then val.
    pub fn apportion(&self, n: usize) -> [usize; 3] {
        let weights = [self.train, self.val, self.test];
        let total: u32 = weights.iter().sum();
        let quotas = weights.map(|w| n as f64 * w as f64 / total as f64);
        let mut counts = quotas.map(|q| q.floor() as usize);
        let mut left = n - counts.iter().sum::<usize>();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let fa = quotas[a] - quotas[a].floor();
            let fb = quotas[b] - quotas[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }
}

/// Result of [`split_dataset`].
#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub manifest: DatasetManifest,
    /// One message per stratum too small to split.
    pub warnings: Vec<String>,
}

/// Stratified split over (label, category) strata, deterministic for a seed.
///
/// Strata with fewer than three images go entirely to train.
pub fn split_dataset(m: &DatasetManifest, ratios: SplitRatios, seed: u64) -> Result<SplitOutcome> {
    if ratios.train + ratios.val + ratios.test == 0 {
        return Err(Error::Config("split ratios sum to zero".into()));
    }
    let mut strata: BTreeMap<(Class, &str), Vec<usize>> = BTreeMap::new();
    for (i, r) in m.records.iter().enumerate() {
        if r.split != Split::Unassigned {
            return Err(Error::Precondition(format!(
                "image {} is already assigned to {}",
                r.image_id, r.split
            )));
        }
        if r.category.is_empty() {
            return Err(Error::Precondition(format!("image {} has no category tag", r.image_id)));
        }
        strata.entry((r.label, r.category.as_str())).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = m.records.clone();
    let mut warnings = Vec::new();
    for ((label, category), mut members) in strata {
        members.sort_by_key(|&i| m.records[i].image_id);
        if members.len() < 3 {
            warnings.push(format!(
                "stratum {label}/{category} has {} image(s); assigned to train",
                members.len()
            ));
            for i in members {
                records[i].split = Split::Train;
            }
            continue;
        }
        members.shuffle(&mut rng);
        let [n_train, n_val, _] = ratios.apportion(members.len());
        for (k, i) in members.into_iter().enumerate() {
            records[i].split = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(SplitOutcome {
        manifest: DatasetManifest {
            records,
            base_dir: m.base_dir.clone(),
        },
        warnings,
    })
}
