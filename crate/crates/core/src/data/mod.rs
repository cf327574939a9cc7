//! Image corpora: loading from the on-disk manifest layout, single-attribute
//! label views, and seeded mini-batching.
//!
//! Layout under a dataset root:
//!
//! ```text
//! <root>/<corpus>/corpus.json              corpus metadata (shape, class or attribute names)
//! <root>/<corpus>/<split>/manifest.jsonl   one JSON object per image
//! <root>/<corpus>/<split>/<relative path>  PNG files
//! ```
//!
//! A manifest record is `{"path": "...", "label": 3}` for class corpora or
//! `{"path": "...", "attributes": [0, 1, ...]}` for attribute corpora, with
//! an optional `"sha256"` hex digest of the file bytes.

pub mod synth;

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{validation, Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    All,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::All => "all",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => validation(format!("unknown split {other:?} (expected train, test or all)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preprocess {
    /// Files must already match the declared shape.
    #[default]
    None,
    /// Centered square crop, then resize to the declared shape.
    CenterCropResize,
}

/// Contents of `corpus.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attributes: Vec<String>,
    #[serde(default)]
    pub preprocess: Preprocess,
}

impl CorpusMeta {
    pub fn shape(&self) -> ImageShape {
        ImageShape::new(self.height, self.width, self.channels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Classes { ids: Vec<usize>, names: Vec<String> },
    Attributes { names: Vec<String>, bits: Array2<u8> },
    Binary { attribute: String, flags: Vec<usize> },
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes { ids, .. } => ids.len(),
            Labels::Attributes { bits, .. } => bits.nrows(),
            Labels::Binary { flags, .. } => flags.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Classes { ids, names } => Labels::Classes {
                ids: idx.iter().map(|&i| ids[i]).collect(),
                names: names.clone(),
            },
            Labels::Attributes { names, bits } => {
                Labels::Attributes { names: names.clone(), bits: bits.select(Axis(0), idx) }
            }
            Labels::Binary { attribute, flags } => Labels::Binary {
                attribute: attribute.clone(),
                flags: idx.iter().map(|&i| flags[i]).collect(),
            },
        }
    }

    fn concat(&self, other: &Labels) -> Result<Labels> {
        match (self, other) {
            (Labels::Classes { ids: a, names }, Labels::Classes { ids: b, .. }) => Ok(Labels::Classes {
                ids: a.iter().chain(b).copied().collect(),
                names: names.clone(),
            }),
            (Labels::Attributes { names, bits: a }, Labels::Attributes { bits: b, .. }) => {
                let bits = ndarray::concatenate(Axis(0), &[a.view(), b.view()])
                    .map_err(|e| Error::Format(e.to_string()))?;
                Ok(Labels::Attributes { names: names.clone(), bits })
            }
            _ => validation("cannot concatenate different label kinds"),
        }
    }
}

/// What the receiver-side task head predicts for a label set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Multiclass { classes: usize },
    BinaryAttribute,
}

/// An immutable image corpus split. Images are rows of NHWC pixels in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct LabeledImageSet {
    pub name: String,
    pub split: Split,
    pub shape: ImageShape,
    pub images: Array2<f32>,
    pub labels: Labels,
    /// Stable per-image identifiers, `<split>/<relative path>`.
    pub ids: Vec<String>,
}

impl LabeledImageSet {
    pub fn len(&self) -> usize {
        self.images.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Result<TaskKind> {
        match &self.labels {
            Labels::Classes { names, .. } => Ok(TaskKind::Multiclass { classes: names.len() }),
            Labels::Binary { .. } => Ok(TaskKind::BinaryAttribute),
            Labels::Attributes { .. } => {
                validation("attribute corpus needs a single-attribute view before training")
            }
        }
    }

    /// Integer targets for the task head (class ids or 0/1 flags).
    pub fn targets(&self) -> Result<&[usize]> {
        match &self.labels {
            Labels::Classes { ids, .. } => Ok(ids),
            Labels::Binary { flags, .. } => Ok(flags),
            Labels::Attributes { .. } => validation("attribute corpus has no single target"),
        }
    }

    pub fn select(&self, idx: &[usize]) -> LabeledImageSet {
        LabeledImageSet {
            name: self.name.clone(),
            split: self.split,
            shape: self.shape,
            images: self.images.select(Axis(0), idx),
            labels: self.labels.select(idx),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }

    /// Deterministic random subset of `n` items, kept in original order.
    pub fn subset(&self, n: usize, seed: u64) -> LabeledImageSet {
        if n >= self.len() {
            return self.clone();
        }
        let mut rng = rng::rng_for(seed, &[rng::tag("subset")]);
        let mut idx = rng::permutation(&mut rng, self.len());
        idx.truncate(n);
        idx.sort_unstable();
        self.select(&idx)
    }

    /// Images and targets for a batch of indices.
    pub fn gather(&self, idx: &[usize]) -> Result<(Array2<f32>, Vec<usize>)> {
        let t = self.targets()?;
        Ok((self.images.select(Axis(0), idx), idx.iter().map(|&i| t[i]).collect()))
    }
}

fn read_meta(dir: &Path) -> Result<CorpusMeta> {
    let path = dir.join("corpus.json");
    let text = fs::read_to_string(&path)
        .map_err(|_| Error::NotFound(format!("corpus metadata {}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Integrity { path, reason: e.to_string() })
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path).map_err(|_| Error::NotFound(format!("manifest {}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Integrity {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", lineno + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn decode_image(path: &Path, meta: &CorpusMeta, expect_sha: Option<&str>) -> Result<Vec<f32>> {
    let integrity = |reason: String| Error::Integrity { path: path.to_path_buf(), reason };
    let bytes = fs::read(path).map_err(|e| integrity(format!("unreadable: {e}")))?;
    if let Some(want) = expect_sha {
        let got = hex::encode(Sha256::digest(&bytes));
        if !got.eq_ignore_ascii_case(want) {
            return Err(integrity(format!("sha256 mismatch (manifest {want}, file {got})")));
        }
    }
    let mut img = image::load_from_memory(&bytes).map_err(|e| integrity(format!("decode failed: {e}")))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if (h, w) != (meta.height, meta.width) {
        match meta.preprocess {
            Preprocess::None => {
                return Err(integrity(format!("{w}×{h} image, corpus declares {}×{}", meta.width, meta.height)))
            }
            Preprocess::CenterCropResize => {
                let side = w.min(h) as u32;
                let x0 = (w as u32 - side) / 2;
                let y0 = (h as u32 - side) / 2;
                img = img.crop_imm(x0, y0, side, side).resize_exact(
                    meta.width as u32,
                    meta.height as u32,
                    FilterType::Triangle,
                );
            }
        }
    }
    let raw: Vec<u8> = match meta.channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        c => return Err(integrity(format!("unsupported channel count {c}"))),
    };
    Ok(raw.into_iter().map(|b| b as f32 / 255.0).collect())
}

fn load_split(dir: &Path, meta: &CorpusMeta, split: Split) -> Result<LabeledImageSet> {
    let split_dir = dir.join(split.as_str());
    let records = read_manifest(&split_dir.join("manifest.jsonl"))?;
    let shape = meta.shape();
    let mut pixels = Vec::with_capacity(records.len() * shape.len());
    let mut ids = Vec::with_capacity(records.len());
    let mut classes = Vec::new();
    let mut attrs: Vec<u8> = Vec::new();
    for rec in &records {
        let path = split_dir.join(&rec.path);
        let bad = |reason: String| Error::Integrity { path: path.clone(), reason };
        if !meta.classes.is_empty() {
            let l = rec.label.ok_or_else(|| bad("record has no label".into()))?;
            if l >= meta.classes.len() {
                return Err(bad(format!("label {l} outside {} classes", meta.classes.len())));
            }
            classes.push(l);
        } else {
            let a = rec.attributes.as_ref().ok_or_else(|| bad("record has no attributes".into()))?;
            if a.len() != meta.attributes.len() || a.iter().any(|&b| b > 1) {
                return Err(bad(format!("attribute vector must hold {} bits", meta.attributes.len())));
            }
            attrs.extend_from_slice(a);
        }
        pixels.extend(decode_image(&path, meta, rec.sha256.as_deref())?);
        ids.push(format!("{}/{}", split.as_str(), rec.path));
    }
    let n = records.len();
    let labels = if !meta.classes.is_empty() {
        Labels::Classes { ids: classes, names: meta.classes.clone() }
    } else {
        let bits = Array2::from_shape_vec((n, meta.attributes.len()), attrs)
            .map_err(|e| Error::Format(e.to_string()))?;
        Labels::Attributes { names: meta.attributes.clone(), bits }
    };
    let images = Array2::from_shape_vec((n, shape.len()), pixels).map_err(|e| Error::Format(e.to_string()))?;
    Ok(LabeledImageSet { name: meta.name.clone(), split, shape, images, labels, ids })
}

/// Loads one split of a corpus in manifest order. `Split::All` is the train
/// split followed by the test split.
pub fn load_dataset(name: &str, root: impl AsRef<Path>, split: Split) -> Result<LabeledImageSet> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::NotFound(format!("dataset root {}", root.display())));
    }
    let dir: PathBuf = root.join(name);
    if !dir.is_dir() {
        return Err(Error::NotFound(format!("corpus {name:?} under {}", root.display())));
    }
    let meta = read_meta(&dir)?;
    if meta.classes.is_empty() == meta.attributes.is_empty() {
        return Err(Error::Integrity {
            path: dir.join("corpus.json"),
            reason: "exactly one of `classes` or `attributes` must be non-empty".into(),
        });
    }
    match split {
        Split::All => {
            let train = load_split(&dir, &meta, Split::Train)?;
            let test = load_split(&dir, &meta, Split::Test)?;
            let images = ndarray::concatenate(Axis(0), &[train.images.view(), test.images.view()])
                .map_err(|e| Error::Format(e.to_string()))?;
            Ok(LabeledImageSet {
                labels: train.labels.concat(&test.labels)?,
                ids: train.ids.into_iter().chain(test.ids).collect(),
                images,
                split: Split::All,
                ..train
            })
        }
        s => load_split(&dir, &meta, s),
    }
}

/// Relabels an attribute corpus with the 0/1 flags of one attribute.
/// Images are shared unchanged; applying the same view twice is a no-op.
pub fn attribute_view(set: &LabeledImageSet, attribute: &str) -> Result<LabeledImageSet> {
    let labels = match &set.labels {
        Labels::Attributes { names, bits } => {
            let Some(col) = names.iter().position(|n| n == attribute) else {
                return validation(format!(
                    "unknown attribute {attribute:?}; valid names: {}",
                    names.join(", ")
                ));
            };
            Labels::Binary {
                attribute: attribute.to_string(),
                flags: bits.column(col).iter().map(|&b| b as usize).collect(),
            }
        }
        Labels::Binary { attribute: a, .. } if a == attribute => set.labels.clone(),
        Labels::Binary { attribute: a, .. } => {
            return validation(format!("set is already a view of {a:?}; reload to select {attribute:?}"))
        }
        Labels::Classes { .. } => return validation(format!("{} has no attribute annotations", set.name)),
    };
    Ok(LabeledImageSet { labels, ..set.clone() })
}

/// Shuffled index batches over `len` items; every batch holds `batch_size`
/// items except possibly the last. The order is a pure function of `seed`.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return validation("batch_size must be at least 1");
    }
    let mut rng = rng::rng_for(seed, &[rng::tag("batches")]);
    let order = rng::permutation(&mut rng, len);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn make_batches(set: &LabeledImageSet, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    batch_indices(set.len(), batch_size, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_arithmetic() {
        let b = batch_indices(60_000, 512, 1).unwrap();
        assert_eq!(b.len(), 118);
        assert_eq!(b.last().unwrap().len(), 96);
        assert!(b[..117].iter().all(|x| x.len() == 512));
        assert_eq!(batch_indices(77, 77, 3).unwrap().len(), 1);
        assert_eq!(batch_indices(100, 10, 5).unwrap(), batch_indices(100, 10, 5).unwrap());
        assert_ne!(batch_indices(100, 10, 5).unwrap(), batch_indices(100, 10, 6).unwrap());
        assert!(batch_indices(10, 0, 0).is_err());
    }

    #[test]
    fn batches_cover_every_index_once() {
        let mut all: Vec<usize> = batch_indices(1000, 64, 9).unwrap().concat();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn split_parsing() {
        assert_eq!("train".parse::<Split>().unwrap(), Split::Train);
        assert!("validation".parse::<Split>().is_err());
    }
}
