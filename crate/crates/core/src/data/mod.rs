//! Datasets, manifests, stratified splitting and on-disk layout.
//!
//! A dataset directory holds `manifest.tsv` (tab-separated `id`, `domain`,
//! `split`, one row per item in canonical order) plus `images/<id>.mseg`
//! and `masks/<id>.mseg`.

pub mod format;
pub mod synth;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use format::{decode_tensor, encode_tensor, load_tensor, save_tensor, write_atomic};
pub use synth::{synth_generate, synth_generate_with_blobs, Blob, BlobKind, DomainStyle};

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
            other => Err(Error::Parse(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub id: String,
    /// `(Cq,H,W)` with values in `[0,1]`.
    pub image: Tensor<f32>,
    /// `(1,H,W)` with values in `{0,1}`.
    pub mask: Tensor<f32>,
    pub domain: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub domain: String,
    pub split: Split,
}

/// Ordered `(id, domain, split)` rows; row order is the canonical dataset order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&format!("{}\t{}\t{}\n", r.id, r.domain, r.split));
        }
        s
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, domain, split] = cols.as_slice() else {
                return Err(Error::Parse(format!(
                    "manifest line {}: expected 3 tab-separated fields",
                    n + 1
                )));
            };
            rows.push(ManifestRow {
                id: id.to_string(),
                domain: domain.to_string(),
                split: split.parse()?,
            });
        }
        Ok(Manifest { rows })
    }
}

/// Stratified train/test assignment: within each domain, a seeded shuffle
/// puts `round(train_fraction · n_d)` items in the training split.
pub fn split_stratified(manifest: &Manifest, train_fraction: f64, seed: u64) -> Result<Manifest> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::config(format!("train fraction {train_fraction} outside [0,1]")));
    }
    let mut domains: Vec<&str> = Vec::new();
    let mut members: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, r) in manifest.rows.iter().enumerate() {
        let entry = members.entry(r.domain.as_str()).or_default();
        if entry.is_empty() {
            domains.push(r.domain.as_str());
        }
        entry.push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = manifest.clone();
    for d in domains {
        let mut idx = members[d].clone();
        if idx.len() < 2 {
            return Err(Error::config(format!(
                "domain `{d}` has {} item(s); stratified split needs at least 2",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_train = (train_fraction * idx.len() as f64).round() as usize;
        for (rank, &i) in idx.iter().enumerate() {
            out.rows[i].split = if rank < n_train { Split::Train } else { Split::Test };
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn new(items: Vec<DatasetItem>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for it in &items {
            if !seen.insert(it.id.as_str()) {
                return Err(Error::config(format!("duplicate dataset id `{}`", it.id)));
            }
            validate_item(it)?;
        }
        Ok(Dataset { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            rows: self
                .items
                .iter()
                .map(|it| ManifestRow {
                    id: it.id.clone(),
                    domain: it.domain.clone(),
                    split: it.split,
                })
                .collect(),
        }
    }

    /// Copies split assignments from a manifest with the same id order.
    pub fn with_manifest(mut self, manifest: &Manifest) -> Result<Self> {
        if manifest.rows.len() != self.items.len()
            || manifest.rows.iter().zip(&self.items).any(|(r, it)| r.id != it.id)
        {
            return Err(Error::config("manifest does not match dataset ids"));
        }
        for (it, r) in self.items.iter_mut().zip(&manifest.rows) {
            it.split = r.split;
        }
        Ok(self)
    }

    pub fn get(&self, id: &str) -> Option<&DatasetItem> {
        self.items.iter().find(|it| it.id == id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.items.iter().position(|it| it.id == id)
    }

    pub fn split_items(&self, split: Split) -> impl Iterator<Item = &DatasetItem> {
        self.items.iter().filter(move |it| it.split == split)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|it| it.id.as_str()).collect()
    }
}

fn validate_item(it: &DatasetItem) -> Result<()> {
    if it.id.is_empty() {
        return Err(Error::config("empty dataset id"));
    }
    let (is, ms) = (it.image.shape(), it.mask.shape());
    if is.len() != 3 || ms.len() != 3 || ms[0] != 1 || is[1..] != ms[1..] {
        return Err(Error::shape(format!(
            "item `{}`: image {is:?} and mask {ms:?} disagree",
            it.id
        )));
    }
    if it.mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::config(format!("item `{}`: mask is not binary", it.id)));
    }
    Ok(())
}

pub fn save_dataset(root: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let root = root.as_ref();
    for sub in ["images", "masks"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for it in &ds.items {
        save_tensor(root.join("images").join(format!("{}.mseg", it.id)), &it.image)?;
        save_tensor(root.join("masks").join(format!("{}.mseg", it.id)), &it.mask)?;
    }
    // Manifest last: its presence marks a complete dataset.
    write_atomic(root.join("manifest.tsv"), ds.manifest().to_tsv().as_bytes())
}

pub fn load_manifest(root: impl AsRef<Path>) -> Result<Manifest> {
    let path = root.as_ref().join("manifest.tsv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Manifest::parse_tsv(&text)
}

pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let manifest = load_manifest(root)?;
    let mut items = Vec::with_capacity(manifest.rows.len());
    for r in manifest.rows {
        let image = load_tensor(root.join("images").join(format!("{}.mseg", r.id)))?;
        let mask = load_tensor(root.join("masks").join(format!("{}.mseg", r.id)))?;
        items.push(DatasetItem {
            id: r.id,
            image,
            mask,
            domain: r.domain,
            split: r.split,
        });
    }
    Dataset::new(items)
}
