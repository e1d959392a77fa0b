//! Dataset descriptors, sample manifests and manifest checks.
//!
//! The built-in catalog carries the nine training datasets with their
//! train/val image counts and original/projected class counts. Counts are
//! advisory: verification reports mismatches instead of failing, and the
//! caller decides whether a mismatch is fatal.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::label_space::LabelSpace;
use crate::mask::MaskImage;
use crate::par::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scene {
    Natural,
    Driving,
    Indoor,
    Artificial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Train, Split::Val];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub name: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    pub scene: Scene,
    pub train_count: u64,
    pub val_count: u64,
    /// Classes in the dataset's own label space.
    pub original_classes: usize,
    /// Distinct unified classes the dataset projects onto.
    pub projected_classes: usize,
    pub mapping_file: PathBuf,
    /// Image directory under the dataset root; `{split}` is substituted.
    pub image_dir: String,
    pub mask_dir: String,
    pub image_suffix: String,
    pub mask_suffix: String,
}

impl DatasetDescriptor {
    pub fn count(&self, split: Split) -> u64 {
        match split {
            Split::Train => self.train_count,
            Split::Val => self.val_count,
        }
    }

    fn dir(pattern: &str, split: Split) -> String {
        pattern.replace("{split}", split.as_str())
    }

    pub fn matches(&self, name: &str) -> bool {
        let key = normalize_name(name);
        normalize_name(&self.name) == key || self.aliases.iter().any(|a| normalize_name(a) == key)
    }
}

/// Lower-cased alphanumeric form used for loose name matching.
pub fn normalize_name(name: &str) -> String {
    name.chars()
        .filter(char::is_ascii_alphanumeric)
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub datasets: Vec<DatasetDescriptor>,
}

impl Catalog {
    pub fn new(datasets: Vec<DatasetDescriptor>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for d in &datasets {
            if d.train_count == 0 {
                return Err(Error::Config(format!("dataset {} has no training images", d.name)));
            }
            if !seen.insert(normalize_name(&d.name)) {
                return Err(Error::Config(format!("dataset {} listed twice", d.name)));
            }
        }
        Ok(Self { datasets })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Catalog = serde_json::from_str(text)?;
        Self::new(c.datasets)
    }

    pub fn get(&self, name: &str) -> Option<&DatasetDescriptor> {
        self.datasets.iter().find(|d| d.matches(name))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.datasets.iter().map(|d| d.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }
}

impl std::ops::Index<&str> for Catalog {
    type Output = DatasetDescriptor;

    fn index(&self, name: &str) -> &DatasetDescriptor {
        self.get(name)
            .unwrap_or_else(|| panic!("dataset {name} not in catalog"))
    }
}

/// The nine training datasets.
pub fn builtin_catalog() -> Catalog {
    // (name, aliases, scene, train, val, original classes, projected classes)
    type Row = (&'static str, &'static [&'static str], Scene, u64, u64, usize, usize);
    #[rustfmt::skip]
    let rows: [Row; 9] = [
        ("COCO", &[], Scene::Natural, 118_287, 5_000, 201, 133),
        ("ADE20K", &["ade"], Scene::Natural, 20_210, 2_000, 151, 146),
        ("Cityscapes", &[], Scene::Driving, 2_975, 500, 34, 31),
        ("Vistas", &["Mapillary", "Mapillary Vistas"], Scene::Driving, 18_000, 2_000, 66, 64),
        ("BDD", &["BDD100K"], Scene::Driving, 7_000, 1_000, 19, 19),
        ("IDD", &[], Scene::Driving, 6_993, 981, 39, 26),
        ("WildDash2", &["WildDash 2", "WildDash"], Scene::Driving, 3_413, 857, 34, 31),
        ("ScanNet", &[], Scene::Indoor, 19_466, 5_436, 41, 41),
        ("VIPER", &["playing for benchmarks"], Scene::Artificial, 13_367, 4_959, 32, 32),
    ];
    let datasets = rows
        .iter()
        .map(|&(name, aliases, scene, train, val, orig, proj)| DatasetDescriptor {
            name: name.to_string(),
            aliases: aliases.iter().map(|s| s.to_string()).collect(),
            scene,
            train_count: train,
            val_count: val,
            original_classes: orig,
            projected_classes: proj,
            mapping_file: PathBuf::from(format!("{}.csv", normalize_name(name))),
            image_dir: "images/{split}".to_string(),
            mask_dir: "masks/{split}".to_string(),
            image_suffix: ".jpg".to_string(),
            mask_suffix: ".png".to_string(),
        })
        .collect();
    Catalog { datasets }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleRecord {
    pub dataset: String,
    pub split: Split,
    #[serde(rename = "image")]
    pub image_path: PathBuf,
    #[serde(rename = "mask")]
    pub mask_path: PathBuf,
    pub width: Option<u32>,
    pub height: Option<u32>,
}

/// Sorted sample records; serialised as one JSON object per line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    records: Vec<SampleRecord>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SplitCounts {
    pub train: u64,
    pub val: u64,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> u64 {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
        }
    }
}

impl Manifest {
    pub fn from_records(mut records: Vec<SampleRecord>) -> Self {
        records.sort_by(|a, b| {
            (&a.dataset, a.split, &a.image_path).cmp(&(&b.dataset, b.split, &b.image_path))
        });
        Self { records }
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn concat(&self, other: &Manifest) -> Manifest {
        let mut all = self.records.clone();
        all.extend_from_slice(&other.records);
        Manifest::from_records(all)
    }

    pub fn counts(&self) -> BTreeMap<String, SplitCounts> {
        let mut out: BTreeMap<String, SplitCounts> = BTreeMap::new();
        for r in &self.records {
            let c = out.entry(r.dataset.clone()).or_default();
            match r.split {
                Split::Train => c.train += 1,
                Split::Val => c.val += 1,
            }
        }
        out
    }

    /// Records of one dataset split, in manifest order.
    pub fn select<'a>(&'a self, dataset: &'a str, split: Split) -> impl Iterator<Item = &'a SampleRecord> + 'a {
        self.records
            .iter()
            .filter(move |r| r.dataset == dataset && r.split == split)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serialises"));
            out.push('\n');
        }
        out
    }

    /// SHA-256 over the serialised byte stream, hex encoded.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: SampleRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                origin: "manifest".to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(r);
        }
        Ok(Self::from_records(records))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_jsonl(&fsutil::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_jsonl().as_bytes())
    }
}

#[derive(Debug, Clone, Default)]
pub struct ManifestOptions {
    /// Read image and mask headers and record their dimensions.
    pub probe_dims: bool,
}

#[derive(Debug, Clone)]
pub struct ManifestBuild {
    pub manifest: Manifest,
    /// Files without a counterpart of the other kind.
    pub orphans: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn collect_files(dir: &Path, suffix: &str) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            Error::io(path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(dir)
            .expect("walk stays under root")
            .to_string_lossy()
            .replace('\\', "/");
        if let Some(stem) = rel.strip_suffix(suffix) {
            out.insert(stem.to_string(), entry.path().to_path_buf());
        }
    }
    Ok(out)
}

fn probe(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Pair images and masks under `root` by shared relative stem.
pub fn build_manifest(
    desc: &DatasetDescriptor,
    root: &Path,
    opts: &ManifestOptions,
) -> Result<ManifestBuild> {
    std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut records = Vec::new();
    let mut orphans = Vec::new();
    let mut warnings = Vec::new();
    for split in Split::ALL {
        let img_dir = root.join(DatasetDescriptor::dir(&desc.image_dir, split));
        let mask_dir = root.join(DatasetDescriptor::dir(&desc.mask_dir, split));
        if !img_dir.is_dir() && !mask_dir.is_dir() {
            continue;
        }
        let images = if img_dir.is_dir() {
            collect_files(&img_dir, &desc.image_suffix)?
        } else {
            BTreeMap::new()
        };
        let masks = if mask_dir.is_dir() {
            collect_files(&mask_dir, &desc.mask_suffix)?
        } else {
            BTreeMap::new()
        };
        for (stem, image_path) in &images {
            let Some(mask_path) = masks.get(stem) else {
                warnings.push(format!("{}: no mask for {}", desc.name, image_path.display()));
                orphans.push(image_path.clone());
                continue;
            };
            let (width, height) = if opts.probe_dims {
                let a = probe(image_path)?;
                let b = probe(mask_path)?;
                if a != b {
                    return Err(Error::Data(format!(
                        "{} is {}x{} but {} is {}x{}",
                        image_path.display(),
                        a.0,
                        a.1,
                        mask_path.display(),
                        b.0,
                        b.1
                    )));
                }
                (Some(a.0), Some(a.1))
            } else {
                (None, None)
            };
            records.push(SampleRecord {
                dataset: desc.name.clone(),
                split,
                image_path: image_path.clone(),
                mask_path: mask_path.clone(),
                width,
                height,
            });
        }
        for (stem, mask_path) in &masks {
            if !images.contains_key(stem) {
                warnings.push(format!("{}: no image for {}", desc.name, mask_path.display()));
                orphans.push(mask_path.clone());
            }
        }
    }
    if records.is_empty() {
        warnings.push(format!("{}: no samples found under {}", desc.name, root.display()));
    }
    Ok(ManifestBuild {
        manifest: Manifest::from_records(records),
        orphans,
        warnings,
    })
}

/// Scan several dataset roots (one task each) and merge the results.
pub fn build_manifests(
    jobs: &[(DatasetDescriptor, PathBuf)],
    opts: &ManifestOptions,
    exec: Execution,
) -> Result<ManifestBuild> {
    let parts = exec.try_map(jobs, |(d, root)| build_manifest(d, root, opts))?;
    let mut records = Vec::new();
    let mut orphans = Vec::new();
    let mut warnings = Vec::new();
    for p in parts {
        records.extend(p.manifest.records);
        orphans.extend(p.orphans);
        warnings.extend(p.warnings);
    }
    Ok(ManifestBuild {
        manifest: Manifest::from_records(records),
        orphans,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CountMismatch {
    pub split: Split,
    pub expected: u64,
    pub actual: u64,
    pub delta: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub dataset: String,
    pub ok: bool,
    pub mismatches: Vec<CountMismatch>,
}

/// Compare per-split record counts with the descriptor's expected counts.
pub fn verify_manifest(m: &Manifest, desc: &DatasetDescriptor) -> VerifyReport {
    let counts = m.counts();
    let have = counts
        .iter()
        .find(|(k, _)| desc.matches(k))
        .map(|(_, c)| *c)
        .unwrap_or_default();
    let mismatches: Vec<CountMismatch> = Split::ALL
        .iter()
        .filter_map(|&split| {
            let expected = desc.count(split);
            let actual = have.get(split);
            (expected != actual).then(|| CountMismatch {
                split,
                expected,
                actual,
                delta: actual as i64 - expected as i64,
            })
        })
        .collect();
    VerifyReport {
        dataset: desc.name.clone(),
        ok: mismatches.is_empty(),
        mismatches,
    }
}

/// Per-class pixel counts over every mask of a manifest, void excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassHistogram {
    counts: Vec<u64>,
}

impl Default for ClassHistogram {
    fn default() -> Self {
        Self {
            counts: vec![0; 256],
        }
    }
}

impl ClassHistogram {
    pub fn add_mask(&mut self, mask: &MaskImage, space: &LabelSpace, context: &str) -> Result<()> {
        mask.check_valid(space, context)?;
        let void = space.void_id();
        for &v in mask.data() {
            if Some(v as u32) != void {
                self.counts[v as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(mut self, other: &ClassHistogram) -> Self {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self
    }

    pub fn get(&self, class: u32) -> u64 {
        self.counts.get(class as usize).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Non-zero entries keyed by class id.
    pub fn to_map(&self) -> BTreeMap<u32, u64> {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| (i as u32, c))
            .collect()
    }
}

pub fn class_histogram(m: &Manifest, space: &LabelSpace, exec: Execution) -> Result<ClassHistogram> {
    exec.try_fold(
        m.records(),
        ClassHistogram::default,
        |mut h, r| {
            let mask = MaskImage::read_png(&r.mask_path, space.name())?;
            h.add_mask(&mask, space, &r.mask_path.display().to_string())?;
            Ok(h)
        },
        |a, b| a.merge(&b),
    )
}
