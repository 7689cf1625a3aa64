//! Episodic training, evaluation and the selection-strategy comparison.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, DatasetItem, Split};
use crate::error::{Error, Result};
use crate::losses::{binarize, mean_metrics, total_loss_on_tape, Focal, LossWeights, MetricsRow};
use crate::retrieval::{select_top_k, EmbeddingIndex, SimilarityHit};
use crate::segnet::{forward_on_tape, init_params, predict_probs, Episode, ModelParams, NetworkConfig};
use crate::tensor::{Tape, Tensor};

/// Name of the generator behind every random stream. Changing it changes
/// every seeded result.
pub const RNG_ALGORITHM: &str = "chacha8";

/// Independent deterministic stream `stream` of `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Top-K by embedding similarity.
    Clip,
    /// Uniform sample without replacement.
    Random,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Clip => "clip",
            Strategy::Random => "random",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clip" => Ok(Strategy::Clip),
            "random" => Ok(Strategy::Random),
            other => Err(Error::Parse(format!("unknown strategy `{other}` (clip|random)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub support_k: usize,
    pub strategy: Strategy,
    pub image_size: usize,
    pub seed: u64,
    pub augment: bool,
    pub loss_weights: LossWeights,
    pub focal: Focal,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            steps: 1000,
            support_k: 8,
            strategy: Strategy::Clip,
            image_size: 32,
            seed: 0,
            augment: true,
            loss_weights: LossWeights::default(),
            focal: Focal::default(),
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} {b} outside [0,1)")));
            }
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("adam_eps must be > 0 and weight_decay >= 0"));
        }
        if self.support_k == 0 {
            return Err(Error::config("support_k must be at least 1"));
        }
        self.loss_weights.validate()?;
        self.focal.validate()?;
        self.network.validate()?;
        self.network.check_input_size(self.image_size, self.image_size)
    }
}

/// One concrete draw of the augmentation pipeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip_h: bool,
    pub flip_v: bool,
    pub angle_deg: f64,
    pub scale: f64,
    /// Crop window offset inside the scaled canvas, in pixels. Negative
    /// values pad with zeros.
    pub offset_x: f64,
    pub offset_y: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip_h: false,
        flip_v: false,
        angle_deg: 0.0,
        scale: 1.0,
        offset_x: 0.0,
        offset_y: 0.0,
    };

    /// Flips with p=0.5 each, rotation in ±30°, scale in [0.8,1.2], and a
    /// uniformly placed integer crop window.
    pub fn sample(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let flip_h = rng.random_bool(0.5);
        let flip_v = rng.random_bool(0.5);
        let angle_deg = rng.random_range(-30.0..=30.0);
        let scale = rng.random_range(0.8..=1.2);
        let mut offset = |side: usize| {
            let slack = (scale - 1.0) * side as f64;
            let (lo, hi) = (slack.min(0.0).round(), slack.max(0.0).round());
            if lo == hi {
                lo
            } else {
                rng.random_range(lo as i64..=hi as i64) as f64
            }
        };
        let offset_y = offset(h);
        let offset_x = offset(w);
        AugmentParams {
            flip_h,
            flip_v,
            angle_deg,
            scale,
            offset_x,
            offset_y,
        }
    }

    /// Centred crop for the given scale.
    pub fn centred(angle_deg: f64, scale: f64, h: usize, w: usize) -> Self {
        AugmentParams {
            angle_deg,
            scale,
            offset_x: ((scale - 1.0) * w as f64 / 2.0).round(),
            offset_y: ((scale - 1.0) * h as f64 / 2.0).round(),
            ..Self::IDENTITY
        }
    }

    /// Source coordinate (continuous, pixel centres at `i + 0.5`) read by
    /// output pixel `(x, y)`.
    fn source(&self, x: usize, y: usize, h: usize, w: usize) -> (f64, f64) {
        let (hf, wf) = (h as f64, w as f64);
        let u = x as f64 + 0.5 + self.offset_x - self.scale * wf / 2.0;
        let v = y as f64 + 0.5 + self.offset_y - self.scale * hf / 2.0;
        let (u, v) = (u / self.scale, v / self.scale);
        let (s, c) = (-self.angle_deg.to_radians()).sin_cos();
        let mut sx = u * c - v * s + wf / 2.0;
        let mut sy = u * s + v * c + hf / 2.0;
        if self.flip_h {
            sx = wf - sx;
        }
        if self.flip_v {
            sy = hf - sy;
        }
        (sx, sy)
    }

    /// Warps `(C,H,W)` image bilinearly and `(1,H,W)` mask by nearest
    /// neighbour. Outside the source both read zero.
    pub fn apply(&self, image: &Tensor<f32>, mask: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let &[c, h, w] = image.shape() else {
            return Err(Error::shape(format!("image must be (C,H,W), got {:?}", image.shape())));
        };
        if mask.shape() != [1, h, w] {
            return Err(Error::shape(format!("mask {:?} vs image {h}x{w}", mask.shape())));
        }
        let hw = h * w;
        let mut img = vec![0.0f32; c * hw];
        let mut msk = vec![0.0f32; hw];
        let at = |plane: &[f32], xi: i64, yi: i64| -> f64 {
            if xi < 0 || yi < 0 || xi >= w as i64 || yi >= h as i64 {
                0.0
            } else {
                plane[yi as usize * w + xi as usize] as f64
            }
        };
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.source(x, y, h, w);
                let (px, py) = (sx - 0.5, sy - 0.5);
                let (x0, y0) = (px.floor(), py.floor());
                let (fx, fy) = (px - x0, py - y0);
                let (x0, y0) = (x0 as i64, y0 as i64);
                for ch in 0..c {
                    let plane = &image.data()[ch * hw..(ch + 1) * hw];
                    let top = at(plane, x0, y0) * (1.0 - fx) + at(plane, x0 + 1, y0) * fx;
                    let bottom = at(plane, x0, y0 + 1) * (1.0 - fx) + at(plane, x0 + 1, y0 + 1) * fx;
                    img[ch * hw + y * w + x] = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0) as f32;
                }
                msk[y * w + x] = at(mask.data(), sx.floor() as i64, sy.floor() as i64) as f32;
            }
        }
        Ok((Tensor::new(vec![c, h, w], img)?, Tensor::new(vec![1, h, w], msk)?))
    }
}

/// Random flip/rotate/scale/crop, applied identically to an image and its mask.
pub fn augment(image: &Tensor<f32>, mask: &Tensor<f32>, rng: &mut ChaCha8Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("image must be (C,H,W), got {s:?}")));
    }
    AugmentParams::sample(rng, s[1], s[2]).apply(image, mask)
}

/// Resizes to `size × size` (bilinear image, nearest mask) and clamps the
/// image to `[0,1]`.
pub fn prepare_item(item: &DatasetItem, size: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let s = item.image.shape();
    let (mut image, mask) = if s[1] == size && s[2] == size {
        (item.image.clone(), item.mask.clone())
    } else {
        (item.image.resize_bilinear(size, size)?, item.mask.resize_nearest(size, size)?)
    };
    image.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok((image, mask))
}

/// Chooses `k` support ids for `query_id` from the training split, never
/// including the query itself.
pub fn select_supports(
    dataset: &Dataset,
    query_id: &str,
    index: Option<&EmbeddingIndex>,
    strategy: Strategy,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>> {
    if k == 0 {
        return Err(Error::config("support_k must be at least 1"));
    }
    let pool: Vec<&str> = dataset
        .split_items(Split::Train)
        .map(|it| it.id.as_str())
        .filter(|&id| id != query_id)
        .collect();
    if pool.len() < k {
        return Err(Error::PoolTooSmall {
            required: k,
            available: pool.len(),
        });
    }
    match strategy {
        Strategy::Random => Ok(rand::seq::index::sample(rng, pool.len(), k)
            .into_iter()
            .map(|i| pool[i].to_string())
            .collect()),
        Strategy::Clip => {
            let index = index.ok_or_else(|| Error::config("clip strategy needs an embedding index"))?;
            Ok(rank_supports(dataset, query_id, index, k)?.into_iter().map(|h| h.id).collect())
        }
    }
}

/// Top-`k` training-split items by embedding similarity to `query_id`,
/// excluding the query.
pub fn rank_supports(dataset: &Dataset, query_id: &str, index: &EmbeddingIndex, k: usize) -> Result<Vec<SimilarityHit>> {
    let query = index
        .get(query_id)
        .ok_or_else(|| Error::UnknownId(query_id.to_string()))?;
    let eligible: HashSet<&str> = dataset
        .split_items(Split::Train)
        .map(|it| it.id.as_str())
        .filter(|&id| id != query_id)
        .collect();
    let exclude: HashSet<&str> = index
        .records()
        .iter()
        .map(|r| r.id.as_str())
        .filter(|id| !eligible.contains(id))
        .collect();
    let hits = select_top_k(query, index, k, &exclude)?;
    if hits.len() < k {
        return Err(Error::PoolTooSmall {
            required: k,
            available: hits.len(),
        });
    }
    Ok(hits)
}

/// Builds an episode for `query_id` with supports from the training split.
pub fn build_episode(
    dataset: &Dataset,
    query_id: &str,
    index: Option<&EmbeddingIndex>,
    strategy: Strategy,
    k: usize,
    image_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let query = dataset
        .get(query_id)
        .ok_or_else(|| Error::UnknownId(query_id.to_string()))?;
    let support_ids = select_supports(dataset, query_id, index, strategy, k, rng)?;
    let (query_image, query_mask) = prepare_item(query, image_size)?;
    let supports = support_ids
        .iter()
        .map(|id| {
            let item = dataset.get(id).ok_or_else(|| Error::UnknownId(id.clone()))?;
            prepare_item(item, image_size)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Episode {
        query_id: query_id.to_string(),
        query_image,
        query_mask: Some(query_mask),
        support_ids,
        supports,
    })
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// Gradient buffers keyed by parameter name.
pub type Grads = BTreeMap<String, Vec<f32>>;

/// AdamW with decoupled weight decay:
/// `θ ← θ − lr·(m̂/(√v̂ + eps) + wd·θ)`.
pub fn adamw_step(params: &mut ModelParams, grads: &Grads, state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    for name in params.names() {
        match grads.get(name) {
            Some(g) if g.len() == params.get(name).map_or(0, Tensor::numel) => {}
            Some(_) => return Err(Error::shape(format!("gradient for `{name}` has the wrong length"))),
            None => return Err(Error::MissingGradient(name.clone())),
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (name, theta) in params.iter_mut() {
        let g = &grads[name];
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (i, p) in theta.data_mut().iter_mut().enumerate() {
            let gi = g[i] as f64;
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + config.adam_eps) + config.weight_decay * *p as f64;
            *p = (*p as f64 - config.learning_rate * update) as f32;
        }
    }
    Ok(())
}

/// Loss and gradients of one episode.
pub fn episode_loss_and_grads(
    params: &ModelParams,
    episode: &Episode,
    config: &TrainConfig,
) -> Result<(f64, Grads)> {
    episode.validate()?;
    let target = episode
        .query_mask
        .as_ref()
        .ok_or_else(|| Error::config("training episode needs a query mask"))?;
    let mut tape = Tape::<f32>::new();
    let ids = params.record(&mut tape, true);
    let q = tape.constant(episode.query_image.clone());
    let s = tape.constant(episode.support_tensor()?);
    let logits = forward_on_tape(&mut tape, &config.network, &ids, q, s)?;
    let probs = tape.sigmoid(logits);
    let loss = total_loss_on_tape(&mut tape, probs, target, config.loss_weights, config.focal)?.total;
    let value = tape.value(loss).item()? as f64;
    tape.backward(loss)?;
    let mut grads = Grads::new();
    for (name, id) in &ids.ids {
        let g = tape
            .grad(*id)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        grads.insert(name.clone(), g.to_vec());
    }
    Ok((value, grads))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Loss at each step, in order.
    pub losses: Vec<f64>,
}

/// Trains from a seeded initialization. `on_step(step, loss)` is called
/// after every optimizer step.
pub fn train_with(
    dataset: &Dataset,
    index: Option<&EmbeddingIndex>,
    config: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut params = init_params(&config.network, config.seed)?;
    let train_ids: Vec<&str> = dataset.split_items(Split::Train).map(|it| it.id.as_str()).collect();
    if config.steps > 0 && train_ids.is_empty() {
        return Err(Error::EmptyPool("training split is empty".into()));
    }
    let mut rng = rng_stream(config.seed, STREAM_TRAIN);
    let mut state = AdamState::default();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let query_id = train_ids[rng.random_range(0..train_ids.len())];
        let mut episode = build_episode(
            dataset,
            query_id,
            index,
            config.strategy,
            config.support_k,
            config.image_size,
            &mut rng,
        )?;
        if config.augment {
            let mask = episode.query_mask.take().expect("built with a mask");
            let (img, m) = augment(&episode.query_image, &mask, &mut rng)?;
            episode.query_image = img;
            episode.query_mask = Some(m);
            for pair in episode.supports.iter_mut() {
                *pair = augment(&pair.0, &pair.1, &mut rng)?;
            }
        }
        let (loss, grads) = episode_loss_and_grads(&params, &episode, config)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        adamw_step(&mut params, &grads, &mut state, config)?;
        on_step(step, loss);
        losses.push(loss);
    }
    Ok(TrainOutcome { params, losses })
}

pub fn train(dataset: &Dataset, index: Option<&EmbeddingIndex>, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, index, config, |_, _| {})
}

/// Tab-separated `step\tloss` lines.
pub fn format_loss_log(losses: &[f64]) -> String {
    let mut out = String::new();
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{i}\t{l:.6}");
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub strategy: Strategy,
    pub support_k: usize,
    pub repeats: usize,
    pub ensemble: bool,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            strategy: Strategy::Clip,
            support_k: 8,
            repeats: 1,
            ensemble: false,
            image_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// One row per test query, in manifest order. With `ensemble` the row
    /// scores the averaged probability map; otherwise it holds the mean of
    /// the per-repeat scores.
    pub rows: Vec<MetricsRow>,
    /// Scores of every individual repeat, per query.
    pub per_repeat: Vec<Vec<MetricsRow>>,
    /// Support ids used by every repeat, per query.
    pub supports: Vec<Vec<Vec<String>>>,
}

impl EvalReport {
    pub fn mean_dsc(&self) -> f64 {
        mean_metrics(&self.rows).0
    }

    /// Mean over queries of the per-repeat mean DSC.
    pub fn mean_individual_dsc(&self) -> f64 {
        let per_query: Vec<f64> = self
            .per_repeat
            .iter()
            .map(|r| r.iter().map(|m| m.dsc).sum::<f64>() / r.len() as f64)
            .collect();
        per_query.iter().sum::<f64>() / per_query.len().max(1) as f64
    }
}

/// Scores every test query. Clip selection is deterministic, so it always
/// runs a single repeat.
pub fn evaluate(
    params: &ModelParams,
    network: &NetworkConfig,
    dataset: &Dataset,
    index: Option<&EmbeddingIndex>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    if config.repeats == 0 {
        return Err(Error::config("repeats must be at least 1"));
    }
    let repeats = match config.strategy {
        Strategy::Clip => 1,
        Strategy::Random => config.repeats,
    };
    let mut report = EvalReport {
        rows: Vec::new(),
        per_repeat: Vec::new(),
        supports: Vec::new(),
    };
    for (qi, item) in dataset.items.iter().enumerate() {
        if item.split != Split::Test {
            continue;
        }
        let mut rng = rng_stream(config.seed, (STREAM_EVAL << 32) | qi as u64);
        let mut sum: Option<Vec<f32>> = None;
        let mut rows = Vec::with_capacity(repeats);
        let mut used = Vec::with_capacity(repeats);
        let mut target = None;
        for _ in 0..repeats {
            let ep = build_episode(
                dataset,
                &item.id,
                index,
                config.strategy,
                config.support_k,
                config.image_size,
                &mut rng,
            )?;
            let probs = predict_probs(&ep, params, network)?;
            let mask = ep.query_mask.clone().expect("built with a mask");
            rows.push(MetricsRow::score(&item.id, &binarize(&probs, 0.5), &mask)?);
            match &mut sum {
                Some(s) => s.iter_mut().zip(probs.data()).for_each(|(a, &b)| *a += b),
                None => sum = Some(probs.data().to_vec()),
            }
            used.push(ep.support_ids);
            target = Some(mask);
        }
        let target = target.expect("at least one repeat");
        let row = if config.ensemble {
            let inv = 1.0 / repeats as f32;
            let avg = Tensor::new(
                target.shape().to_vec(),
                sum.expect("at least one repeat").iter().map(|v| v * inv).collect(),
            )?;
            MetricsRow::score(&item.id, &binarize(&avg, 0.5), &target)?
        } else {
            let n = rows.len() as f64;
            MetricsRow {
                query_id: item.id.clone(),
                dsc: rows.iter().map(|r| r.dsc).sum::<f64>() / n,
                iou: rows.iter().map(|r| r.iou).sum::<f64>() / n,
            }
        };
        report.rows.push(row);
        report.per_repeat.push(rows);
        report.supports.push(used);
    }
    if report.rows.is_empty() {
        return Err(Error::EmptyPool("test split is empty".into()));
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub k: usize,
    pub mean_dsc: f64,
    pub std_dsc: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// For every K: random selection (per-repeat mean), random with ensemble,
/// and clip selection. Mean and population std are over test queries.
pub fn ablation_table(
    params: &ModelParams,
    network: &NetworkConfig,
    dataset: &Dataset,
    index: &EmbeddingIndex,
    k_list: &[usize],
    repeats: usize,
    image_size: usize,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    let mut out = Vec::new();
    for &k in k_list {
        let base = EvalConfig {
            strategy: Strategy::Random,
            support_k: k,
            repeats,
            ensemble: true,
            image_size,
            seed,
        };
        let random = evaluate(params, network, dataset, Some(index), &base)?;
        let individual: Vec<f64> = random
            .per_repeat
            .iter()
            .map(|r| r.iter().map(|m| m.dsc).sum::<f64>() / r.len() as f64)
            .collect();
        let ensemble: Vec<f64> = random.rows.iter().map(|r| r.dsc).collect();
        let clip = evaluate(
            params,
            network,
            dataset,
            Some(index),
            &EvalConfig {
                strategy: Strategy::Clip,
                ..base
            },
        )?;
        let clip: Vec<f64> = clip.rows.iter().map(|r| r.dsc).collect();
        for (label, v) in [("random", individual), ("random+ensemble", ensemble), ("clip", clip)] {
            let (mean_dsc, std_dsc) = mean_std(&v);
            out.push(AblationRow {
                label: label.to_string(),
                k,
                mean_dsc,
                std_dsc,
            });
        }
    }
    Ok(out)
}

/// `strategy\tk\tmean\tstd` rows under a header line.
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut out = String::from("strategy\tk\tmean_dsc\tstd_dsc\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{}\t{:.4}\t{:.4}", r.label, r.k, r.mean_dsc, r.std_dsc);
    }
    out
}
