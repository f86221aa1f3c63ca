//! On-disk feature stores.
//!
//! A store is a directory holding `manifest.json` plus one little-endian
//! binary file per split:
//!
//! ```text
//! offset  size         field
//! 0       4            magic "P3DC"
//! 4       4            u32 version (= 1)
//! 8       4            u32 dim
//! 12      8            u64 count
//! 20      count * rec  records: u32 class_id, dim x f32
//! ```
//!
//! There is no padding and nothing may follow the last record.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector;

pub const MAGIC: [u8; 4] = *b"P3DC";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Validation,
    Novel,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Base, Split::Validation, Split::Novel];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Base => "base",
            Split::Validation => "validation",
            Split::Novel => "novel",
        }
    }

    pub fn default_file_name(self) -> String {
        format!("{}.bin", self.as_str())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Split::Base),
            "validation" | "val" => Ok(Split::Validation),
            "novel" | "test" => Ok(Split::Novel),
            other => Err(Error::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

/// One split of labeled feature vectors, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    split: Split,
    dim: usize,
    labels: Vec<u32>,
    values: Vec<f32>,
    class_index: BTreeMap<u32, Vec<usize>>,
}

impl FeatureDataset {
    /// Builds a dataset from a flat row-major payload. Every value must be
    /// finite.
    pub fn new(split: Split, dim: usize, labels: Vec<u32>, values: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Schema("feature dimension must be positive".into()));
        }
        if values.len() != labels.len() * dim {
            return Err(Error::Schema(format!(
                "payload holds {} values, expected {} records x {} dims",
                values.len(),
                labels.len(),
                dim
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data {
                record: pos / dim,
                reason: format!(
                    "non-finite value {} at coordinate {}",
                    values[pos],
                    pos % dim
                ),
            });
        }
        let mut class_index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &c) in labels.iter().enumerate() {
            class_index.entry(c).or_default().push(i);
        }
        Ok(FeatureDataset {
            split,
            dim,
            labels,
            values,
            class_index,
        })
    }

    pub fn from_records<I, V>(split: Split, dim: usize, records: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u32, V)>,
        V: AsRef<[f32]>,
    {
        let mut labels = Vec::new();
        let mut values = Vec::new();
        for (i, (c, v)) in records.into_iter().enumerate() {
            let v = v.as_ref();
            if v.len() != dim {
                return Err(Error::Data {
                    record: i,
                    reason: format!("feature has length {}, expected {dim}", v.len()),
                });
            }
            labels.push(c);
            values.extend_from_slice(v);
        }
        Self::new(split, dim, labels, values)
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, record: usize) -> u32 {
        self.labels[record]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn feature(&self, record: usize) -> &[f32] {
        &self.values[record * self.dim..(record + 1) * self.dim]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn records(&self) -> impl Iterator<Item = (u32, &[f32])> + '_ {
        self.labels
            .iter()
            .copied()
            .zip(self.values.chunks_exact(self.dim))
    }

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    /// Class ids in ascending order.
    pub fn class_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.class_index.keys().copied()
    }

    /// Record indices of `class_id`, in file order.
    pub fn records_of(&self, class_id: u32) -> &[usize] {
        self.class_index
            .get(&class_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn class_index(&self) -> &BTreeMap<u32, Vec<usize>> {
        &self.class_index
    }

    pub fn first_negative(&self) -> Option<usize> {
        self.values
            .iter()
            .position(|&v| v < 0.0)
            .map(|p| p / self.dim)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub file: String,
    pub count: u64,
    pub num_classes: usize,
    pub nonneg: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dataset: String,
    pub dim: usize,
    pub splits: BTreeMap<String, SplitEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<BTreeMap<String, String>>,
}

impl Manifest {
    pub fn new(dataset: impl Into<String>, dim: usize) -> Self {
        Manifest {
            format_version: FORMAT_VERSION,
            dataset: dataset.into(),
            dim,
            splits: BTreeMap::new(),
            class_names: None,
        }
    }

    pub fn entry(&self, split: Split) -> Option<&SplitEntry> {
        self.splits.get(split.as_str())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// Parses and checks a manifest document.
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_str(text)
        .map_err(|e| Error::Schema(format!("malformed manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    if manifest.dim == 0 {
        return Err(Error::Schema("manifest dim must be positive".into()));
    }
    for (name, entry) in &manifest.splits {
        name.parse::<Split>()
            .map_err(|_| Error::Schema(format!("unknown split `{name}` in manifest")))?;
        let file = Path::new(&entry.file);
        let plain = file.components().count() == 1
            && matches!(
                file.components().next(),
                Some(std::path::Component::Normal(_))
            );
        if !plain {
            return Err(Error::Schema(format!(
                "split `{name}` file `{}` must be a plain file name inside the store",
                entry.file
            )));
        }
        if entry.num_classes as u64 > entry.count {
            return Err(Error::Schema(format!(
                "split `{name}` declares {} classes but only {} records",
                entry.num_classes, entry.count
            )));
        }
    }
    if let Some(names) = &manifest.class_names {
        if let Some(bad) = names.keys().find(|k| k.parse::<u32>().is_err()) {
            return Err(Error::Schema(format!(
                "class_names key `{bad}` is not a class id"
            )));
        }
    }
    Ok(manifest)
}

/// Raw contents of a split binary.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedSplit {
    pub dim: usize,
    pub labels: Vec<u32>,
    pub values: Vec<f32>,
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Decodes a split binary. Never panics on malformed input.
pub fn decode_split(bytes: &[u8]) -> Result<DecodedSplit> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            reason: format!("header truncated: {} of {HEADER_LEN} bytes", bytes.len()),
        });
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: format!("bad magic {:02x?}", &bytes[0..4]),
        });
    }
    let version = read_u32(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let dim = read_u32(bytes, 8) as usize;
    if dim == 0 {
        return Err(Error::Format {
            offset: 8,
            reason: "dim must be positive".into(),
        });
    }
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());

    let record_len = 4 + 4 * dim;
    let body = &bytes[HEADER_LEN..];
    let complete = body.len() / record_len;
    if (complete as u64) < count {
        let offset = HEADER_LEN + complete * record_len;
        return Err(Error::Format {
            offset: offset as u64,
            reason: format!(
                "truncated record {complete}: expected {record_len} bytes, found {} (header declares {count} records)",
                body.len() - complete * record_len
            ),
        });
    }
    let count = count as usize;
    let used = count * record_len;
    if body.len() > used {
        return Err(Error::Format {
            offset: (HEADER_LEN + used) as u64,
            reason: format!("{} trailing bytes after last record", body.len() - used),
        });
    }

    let mut labels = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count * dim);
    for (i, rec) in body.chunks_exact(record_len).enumerate() {
        labels.push(read_u32(rec, 0));
        for (j, chunk) in rec[4..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Data {
                    record: i,
                    reason: format!("non-finite value {v} at coordinate {j}"),
                });
            }
            values.push(v);
        }
    }
    Ok(DecodedSplit {
        dim,
        labels,
        values,
    })
}

pub fn encode_split(dataset: &FeatureDataset) -> Vec<u8> {
    let dim = dataset.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + dataset.len() * (4 + 4 * dim));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    for (c, feature) in dataset.records() {
        out.extend_from_slice(&c.to_le_bytes());
        for v in feature {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// An opened store directory.
#[derive(Clone, Debug)]
pub struct FeatureStore {
    root: PathBuf,
    manifest: Manifest,
}

impl FeatureStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = parse_manifest(&text)?;
        Ok(FeatureStore { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn splits(&self) -> Vec<Split> {
        Split::ALL
            .into_iter()
            .filter(|s| self.manifest.entry(*s).is_some())
            .collect()
    }

    pub fn class_name(&self, class_id: u32) -> Option<&str> {
        self.manifest
            .class_names
            .as_ref()?
            .get(&class_id.to_string())
            .map(String::as_str)
    }

    /// Loads and cross-checks one split against the manifest.
    pub fn load(&self, split: Split) -> Result<FeatureDataset> {
        let entry = self
            .manifest
            .entry(split)
            .ok_or_else(|| Error::Schema(format!("manifest has no `{split}` split")))?;
        let path = self.root.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let decoded = decode_split(&bytes)?;
        if decoded.dim != self.manifest.dim {
            return Err(Error::Schema(format!(
                "split `{split}`: manifest dim {} but binary header dim {}",
                self.manifest.dim, decoded.dim
            )));
        }
        if decoded.labels.len() as u64 != entry.count {
            return Err(Error::Schema(format!(
                "split `{split}`: manifest count {} but binary holds {} records",
                entry.count,
                decoded.labels.len()
            )));
        }
        let dataset = FeatureDataset::new(split, decoded.dim, decoded.labels, decoded.values)?;
        if dataset.num_classes() != entry.num_classes {
            return Err(Error::Schema(format!(
                "split `{split}`: manifest declares {} classes, binary holds {}",
                entry.num_classes,
                dataset.num_classes()
            )));
        }
        if entry.nonneg {
            if let Some(record) = dataset.first_negative() {
                return Err(Error::Data {
                    record,
                    reason: format!("negative entry in split `{split}` declared nonneg"),
                });
            }
        }
        Ok(dataset)
    }
}

pub fn load_dataset(root: impl AsRef<Path>, split: Split) -> Result<FeatureDataset> {
    FeatureStore::open(root)?.load(split)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn split_entry(dataset: &FeatureDataset) -> SplitEntry {
    SplitEntry {
        file: dataset.split().default_file_name(),
        count: dataset.len() as u64,
        num_classes: dataset.num_classes(),
        nonneg: dataset.first_negative().is_none(),
    }
}

/// Writes `dataset` into the store at `root`, creating the directory and
/// manifest if needed and replacing any existing split of the same name.
pub fn write_dataset(dataset: &FeatureDataset, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    let manifest_path = root.join(MANIFEST_FILE);
    let mut manifest = if manifest_path.exists() {
        let m = FeatureStore::open(root)?.manifest;
        if m.dim != dataset.dim() {
            return Err(Error::Schema(format!(
                "store dim {} does not match dataset dim {}",
                m.dim,
                dataset.dim()
            )));
        }
        m
    } else {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let name = root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "features".to_string());
        Manifest::new(name, dataset.dim())
    };
    let entry = split_entry(dataset);
    write_bytes(&root.join(&entry.file), &encode_split(dataset))?;
    manifest
        .splits
        .insert(dataset.split().as_str().to_string(), entry);
    write_bytes(&manifest_path, manifest.to_json().as_bytes())
}

/// Writes a complete store, replacing any existing manifest.
pub fn write_store(
    root: impl AsRef<Path>,
    name: &str,
    datasets: &[&FeatureDataset],
    class_names: Option<BTreeMap<String, String>>,
) -> Result<()> {
    let root = root.as_ref();
    let dim = datasets
        .first()
        .map(|d| d.dim())
        .ok_or_else(|| Error::Precondition("a store needs at least one split".into()))?;
    if let Some(d) = datasets.iter().find(|d| d.dim() != dim) {
        return Err(Error::Schema(format!(
            "split `{}` has dim {}, expected {dim}",
            d.split(),
            d.dim()
        )));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = Manifest::new(name, dim);
    manifest.class_names = class_names;
    for d in datasets {
        let entry = split_entry(d);
        write_bytes(&root.join(&entry.file), &encode_split(d))?;
        manifest
            .splits
            .insert(d.split().as_str().to_string(), entry);
    }
    write_bytes(&root.join(MANIFEST_FILE), manifest.to_json().as_bytes())
}

/// Per-class means of the base split plus the global base mean.
#[derive(Clone, Debug, PartialEq)]
pub struct BasePrototypeSet {
    dim: usize,
    class_ids: Vec<u32>,
    values: Vec<f32>,
    global_mean: Vec<f32>,
}

impl BasePrototypeSet {
    /// Assembles a prototype set from explicit vectors. Order is preserved.
    pub fn from_parts(
        dim: usize,
        prototypes: Vec<(u32, Vec<f32>)>,
        global_mean: Vec<f32>,
    ) -> Result<Self> {
        if prototypes.is_empty() {
            return Err(Error::Precondition(
                "prototype set must be non-empty".into(),
            ));
        }
        if dim == 0 {
            return Err(Error::Schema("prototype dim must be positive".into()));
        }
        if global_mean.len() != dim {
            return Err(Error::Schema(format!(
                "global mean has length {}, expected {dim}",
                global_mean.len()
            )));
        }
        if global_mean.iter().any(|x| !x.is_finite()) {
            return Err(Error::Schema("global mean is not finite".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut class_ids = Vec::with_capacity(prototypes.len());
        let mut values = Vec::with_capacity(prototypes.len() * dim);
        for (c, v) in prototypes {
            if v.len() != dim {
                return Err(Error::Schema(format!(
                    "prototype for class {c} has length {}, expected {dim}",
                    v.len()
                )));
            }
            if !seen.insert(c) {
                return Err(Error::Schema(format!("duplicate prototype for class {c}")));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Schema(format!(
                    "prototype for class {c} is not finite"
                )));
            }
            class_ids.push(c);
            values.extend(v);
        }
        Ok(BasePrototypeSet {
            dim,
            class_ids,
            values,
            global_mean,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn class_id(&self, index: usize) -> u32 {
        self.class_ids[index]
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn prototype(&self, index: usize) -> &[f32] {
        &self.values[index * self.dim..(index + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &[f32])> + '_ {
        self.class_ids
            .iter()
            .copied()
            .zip(self.values.chunks_exact(self.dim))
    }

    pub fn global_mean(&self) -> &[f32] {
        &self.global_mean
    }

    pub fn to_json(&self) -> String {
        let file = PrototypeFile {
            dim: self.dim,
            prototypes: self
                .iter()
                .map(|(class_id, v)| PrototypeEntry {
                    class_id,
                    vector: v.to_vec(),
                })
                .collect(),
            global_mean: self.global_mean.clone(),
        };
        let mut s = serde_json::to_string(&file).expect("prototype file serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PrototypeFile = serde_json::from_str(text)
            .map_err(|e| Error::Schema(format!("malformed prototype file: {e}")))?;
        Self::from_parts(
            file.dim,
            file.prototypes
                .into_iter()
                .map(|p| (p.class_id, p.vector))
                .collect(),
            file.global_mean,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct PrototypeEntry {
    class_id: u32,
    vector: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct PrototypeFile {
    dim: usize,
    prototypes: Vec<PrototypeEntry>,
    global_mean: Vec<f32>,
}

/// Means are accumulated in f64 over records in file order, then rounded.
pub fn compute_base_prototypes(base: &FeatureDataset) -> Result<BasePrototypeSet> {
    if base.is_empty() {
        return Err(Error::Precondition("base split is empty".into()));
    }
    let dim = base.dim();
    let mut global = vec![0.0f64; dim];
    for (_, f) in base.records() {
        vector::accumulate(&mut global, f, 1.0);
    }
    let global_mean = vector::scaled_to_f32(&global, 1.0 / base.len() as f64);

    let mut prototypes = Vec::with_capacity(base.num_classes());
    for (&class_id, records) in base.class_index() {
        let mut acc = vec![0.0f64; dim];
        for &r in records {
            vector::accumulate(&mut acc, base.feature(r), 1.0);
        }
        prototypes.push((
            class_id,
            vector::scaled_to_f32(&acc, 1.0 / records.len() as f64),
        ));
    }
    BasePrototypeSet::from_parts(dim, prototypes, global_mean)
}
