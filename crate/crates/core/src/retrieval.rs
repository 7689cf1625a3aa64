//! Support-set retrieval: embed every candidate image, rank the pool by
//! cosine similarity to the query and keep the top K.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::format::{put_f32s, put_str16, put_u32, write_atomic, ByteReader};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::kernels::bilinear_taps;
use crate::tensor::Tensor;

/// Output length of [`desk_embed`]: an 8×8 intensity grid plus 16
/// orientation bins.
pub const DESK_DIM: usize = 80;
const GRID: usize = 8;
const BINS: usize = 16;

pub const MEMB_MAGIC: &[u8; 4] = b"MEMB";
pub const MEMB_VERSION: u8 = 1;

const MIN_NORM: f64 = 1e-12;

/// Deterministic built-in image descriptor (version 1).
///
/// The channel-mean image contributes (a) its 8×8 bilinear downsample and
/// (b) a 16-bin histogram of gradient orientation over `[0, π)`, computed
/// from central differences at interior pixels, weighted by gradient
/// magnitude and divided by the interior pixel count. The 80 values are
/// L2-normalised. An all-zero image maps to the first basis vector.
pub fn desk_embed(image: &Tensor<f32>) -> Result<Vec<f32>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape(format!(
            "desk_embed expects (C,H,W), got {:?}",
            image.shape()
        )));
    };
    let plane = h * w;
    let mut mean = vec![0.0f64; plane];
    for ch in 0..c {
        for (m, &v) in mean.iter_mut().zip(&image.data()[ch * plane..(ch + 1) * plane]) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= c as f64);

    let mut feat = Vec::with_capacity(DESK_DIM);
    let ty = bilinear_taps(h, GRID);
    let tx = bilinear_taps(w, GRID);
    for a in &ty {
        for b in &tx {
            let p = |y: usize, x: usize| mean[y * w + x];
            let v = (1.0 - a.frac) * ((1.0 - b.frac) * p(a.i0, b.i0) + b.frac * p(a.i0, b.i1))
                + a.frac * ((1.0 - b.frac) * p(a.i1, b.i0) + b.frac * p(a.i1, b.i1));
            feat.push(v);
        }
    }

    let mut hist = [0.0f64; BINS];
    if h >= 3 && w >= 3 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let gx = (mean[y * w + x + 1] - mean[y * w + x - 1]) / 2.0;
                let gy = (mean[(y + 1) * w + x] - mean[(y - 1) * w + x]) / 2.0;
                let mag = gx.hypot(gy);
                if mag == 0.0 {
                    continue;
                }
                let mut theta = gy.atan2(gx);
                if theta < 0.0 {
                    theta += std::f64::consts::PI;
                }
                let bin = ((theta / std::f64::consts::PI * BINS as f64) as usize).min(BINS - 1);
                hist[bin] += mag;
            }
        }
        let interior = ((h - 2) * (w - 2)) as f64;
        hist.iter_mut().for_each(|v| *v /= interior);
    }
    feat.extend_from_slice(&hist);

    let norm = feat.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < MIN_NORM {
        let mut unit = vec![0.0f32; DESK_DIM];
        unit[0] = 1.0;
        return Ok(unit);
    }
    Ok(feat.iter().map(|v| (v / norm) as f32).collect())
}

fn norm64(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// `dot(a,b) / (‖a‖‖b‖)` accumulated in f64.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "cosine of vectors with dimensions {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm64(a), norm64(b));
    if na <= MIN_NORM || nb <= MIN_NORM {
        return Err(Error::DegenerateEmbedding("zero-norm vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityHit {
    pub id: String,
    pub score: f64,
}

/// Ordered `(id, vector)` records of a fixed dimension. Insertion order is
/// preserved and breaks score ties.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    dimension: usize,
    records: Vec<EmbeddingRecord>,
    provider_tag: String,
}

impl EmbeddingIndex {
    pub fn new(dimension: usize, provider_tag: impl Into<String>) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::config("embedding dimension must be positive"));
        }
        Ok(EmbeddingIndex {
            dimension,
            records: Vec::new(),
            provider_tag: provider_tag.into(),
        })
    }

    pub fn push(&mut self, id: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::config("empty embedding id"));
        }
        if vector.len() != self.dimension {
            return Err(Error::shape(format!(
                "record `{id}` has dimension {}, index has {}",
                vector.len(),
                self.dimension
            )));
        }
        if norm64(&vector) <= MIN_NORM {
            return Err(Error::DegenerateEmbedding(format!("record `{id}` is all-zero")));
        }
        if self.get(&id).is_some() {
            return Err(Error::config(format!("duplicate embedding id `{id}`")));
        }
        self.records.push(EmbeddingRecord { id, vector });
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn provider_tag(&self) -> &str {
        &self.provider_tag
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.records
            .iter()
            .find(|r| r.id == id)
            .map(|r| r.vector.as_slice())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(13 + self.records.len() * (2 + 8 + 4 * self.dimension));
        out.extend_from_slice(MEMB_MAGIC);
        out.push(MEMB_VERSION);
        put_u32(&mut out, self.records.len() as u32);
        put_u32(&mut out, self.dimension as u32);
        for r in &self.records {
            put_str16(&mut out, &r.id)?;
            put_f32s(&mut out, &r.vector);
        }
        put_str16(&mut out, &self.provider_tag)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(MEMB_MAGIC)?;
        r.version(MEMB_VERSION)?;
        let count = r.u32()? as usize;
        let offset = r.position();
        let dimension = r.u32()? as usize;
        if dimension == 0 {
            return Err(Error::Malformed {
                offset,
                reason: "zero embedding dimension".into(),
            });
        }
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let id = r.str16()?;
            let vector = r.f32s(dimension)?;
            records.push(EmbeddingRecord { id, vector });
        }
        let provider_tag = r.str16()?;
        r.finish()?;
        let mut index = EmbeddingIndex::new(dimension, provider_tag)?;
        for rec in records {
            index.push(rec.id, rec.vector)?;
        }
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Top-K records by cosine similarity to `query`, skipping `exclude`.
///
/// Hits are sorted by descending score; equal scores keep insertion order.
/// Returns `min(k, eligible)` hits.
pub fn select_top_k(
    query: &[f32],
    index: &EmbeddingIndex,
    k: usize,
    exclude: &HashSet<&str>,
) -> Result<Vec<SimilarityHit>> {
    if k == 0 {
        return Err(Error::config("K must be at least 1"));
    }
    if query.len() != index.dimension() {
        return Err(Error::shape(format!(
            "query dimension {} vs index dimension {}",
            query.len(),
            index.dimension()
        )));
    }
    let mut scored = Vec::with_capacity(index.len());
    for r in index.records() {
        if exclude.contains(r.id.as_str()) {
            continue;
        }
        scored.push((cosine_similarity(query, &r.vector)?, r.id.as_str()));
    }
    if scored.is_empty() {
        return Err(Error::EmptyPool(format!(
            "all {} records excluded",
            index.len()
        )));
    }
    // Stable sort: ties stay in insertion order.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(score, id)| SimilarityHit {
            id: id.to_string(),
            score,
        })
        .collect())
}

/// Where embedding vectors come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Provider {
    /// [`desk_embed`] computed on the fly.
    Desk,
    /// Precomputed vectors from a text file: one `id<TAB>v1<TAB>v2…` line
    /// per item, `#` comment lines allowed.
    File(PathBuf),
}

impl FromStr for Provider {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Provider::Desk),
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(Provider::File(PathBuf::from(p))),
                _ => Err(Error::Parse(format!(
                    "unknown provider `{s}` (expected `desk` or `file:PATH`)"
                ))),
            },
        }
    }
}

fn parse_vector_file(text: &str) -> Result<Vec<(String, Vec<f32>)>> {
    let mut out = Vec::new();
    let mut dim: Option<usize> = None;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or_default().to_string();
        let vector = fields
            .map(|f| {
                f.trim()
                    .parse::<f32>()
                    .map_err(|_| Error::Parse(format!("line {}: bad float `{f}`", n + 1)))
            })
            .collect::<Result<Vec<f32>>>()?;
        match dim {
            None => dim = Some(vector.len()),
            Some(d) if d != vector.len() => {
                return Err(Error::shape(format!(
                    "line {}: vector for `{id}` has {} values, earlier lines have {d}",
                    n + 1,
                    vector.len()
                )))
            }
            _ => {}
        }
        out.push((id, vector));
    }
    Ok(out)
}

/// One record per dataset item, in dataset order.
pub fn build_index(dataset: &Dataset, provider: &Provider) -> Result<EmbeddingIndex> {
    if dataset.is_empty() {
        return Err(Error::EmptyPool("cannot index an empty dataset".into()));
    }
    match provider {
        Provider::Desk => {
            let mut index = EmbeddingIndex::new(DESK_DIM, "desk")?;
            for it in &dataset.items {
                index.push(it.id.clone(), desk_embed(&it.image)?)?;
            }
            Ok(index)
        }
        Provider::File(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let vectors = parse_vector_file(&text)?;
            let missing: Vec<String> = dataset
                .items
                .iter()
                .filter(|it| !vectors.iter().any(|(id, _)| *id == it.id))
                .map(|it| it.id.clone())
                .collect();
            if !missing.is_empty() {
                return Err(Error::MissingIds(missing));
            }
            let dim = vectors.first().map(|(_, v)| v.len()).unwrap_or(0);
            let mut index = EmbeddingIndex::new(dim, "file")?;
            for it in &dataset.items {
                let (_, v) = vectors.iter().find(|(id, _)| *id == it.id).unwrap();
                index.push(it.id.clone(), v.clone())?;
            }
            Ok(index)
        }
    }
}
