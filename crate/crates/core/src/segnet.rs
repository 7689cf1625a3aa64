//! Query/support encoder-decoder.
//!
//! Stems lift the query image and each `[image ; mask]` support pair to the
//! first level's width. Every level applies a cross-convolution block and,
//! unless disabled, joint attention. Spatial size halves between encoder
//! levels and doubles between decoder levels via bilinear resampling; skips
//! are concatenated on channels for the query and for each support item.
//! A 1×1 head on the final query features yields single-channel logits.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{check_ratio, joint_attention_on_tape, AttentionIds};
use crate::data::format::{put_str16, put_u32, read_tensor, write_atomic, write_tensor, ByteReader};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, TensorId};

pub const MWTS_MAGIC: &[u8; 4] = b"MWTS";
pub const MWTS_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub levels: usize,
    pub channels: Vec<usize>,
    pub ratio: usize,
    pub in_channels_query: usize,
    pub leaky_slope: f64,
    /// When false, every joint attention module is an identity pass-through.
    pub attention: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            levels: 3,
            channels: vec![16, 32, 64],
            ratio: 2,
            in_channels_query: 1,
            leaky_slope: 0.01,
            attention: true,
        }
    }
}

impl NetworkConfig {
    pub fn in_channels_support(&self) -> usize {
        self.in_channels_query + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::config(format!("levels must be >= 2, got {}", self.levels)));
        }
        if self.channels.len() != self.levels {
            return Err(Error::config(format!(
                "{} channel widths given for {} levels",
                self.channels.len(),
                self.levels
            )));
        }
        if self.in_channels_query == 0 || self.channels.contains(&0) {
            return Err(Error::config("channel counts must be positive"));
        }
        for &c in &self.channels {
            check_ratio(c, self.ratio)?;
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config(format!("leaky slope {} outside (0,1)", self.leaky_slope)));
        }
        Ok(())
    }

    /// Spatial sides must be divisible by `2^(levels-1)`.
    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let factor = 1usize << (self.levels - 1);
        if h % factor != 0 || w % factor != 0 || h == 0 || w == 0 {
            return Err(Error::config(format!(
                "input {h}x{w}: height and width must be divisible by 2^(levels-1) = {factor}"
            )));
        }
        Ok(())
    }

    /// Name and shape of every weight tensor, in construction order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let ch = &self.channels;
        let mut out = Vec::new();
        let mut conv = |name: String, cout: usize, cin: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        conv("stem.query".into(), ch[0], self.in_channels_query, 3);
        conv("stem.support".into(), ch[0], self.in_channels_support(), 3);
        let attn = |conv: &mut dyn FnMut(String, usize, usize, usize), prefix: &str, c: usize| {
            if self.attention {
                let r = c / self.ratio;
                conv(format!("{prefix}.attn.query"), r, c, 1);
                conv(format!("{prefix}.attn.key"), r, c, 1);
                conv(format!("{prefix}.attn.residual"), c, c, 1);
            }
        };
        for l in 0..self.levels {
            let cin = if l == 0 { ch[0] } else { ch[l - 1] };
            conv(format!("enc{l}.cross"), ch[l], 2 * cin, 3);
            attn(&mut conv, &format!("enc{l}"), ch[l]);
        }
        for l in (0..self.levels - 1).rev() {
            conv(format!("dec{l}.cross"), ch[l], 2 * (ch[l + 1] + ch[l]), 3);
            attn(&mut conv, &format!("dec{l}"), ch[l]);
        }
        conv("head".into(), 1, ch[0], 1);
        out
    }
}

/// Named weight tensors of the full network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor<f32>>,
}

/// Uniform on `[-√(6/fan_in), √(6/fan_in)]`, i.e. variance `2/fan_in`.
pub fn he_uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound) as f32)
}

/// He-uniform convolution weights and zero biases, determined by `seed`.
pub fn init_params(config: &NetworkConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in config.param_shapes() {
        let t = if shape.len() == 4 {
            he_uniform(&shape, &mut rng)
        } else {
            Tensor::zeros(&shape)
        };
        tensors.insert(name, t);
    }
    Ok(ModelParams { tensors })
}

impl ModelParams {
    pub fn from_map(tensors: BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        for (name, t) in &tensors {
            if !t.is_finite() {
                return Err(Error::config(format!("tensor `{name}` has non-finite values")));
            }
        }
        Ok(ModelParams { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<f32>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Checks names and shapes against a configuration.
    pub fn check_against(&self, config: &NetworkConfig) -> Result<()> {
        let expected = config.param_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::config(format!(
                "configuration needs {} tensors, bundle has {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in expected {
            match self.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::shape(format!(
                        "`{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::config(format!("missing tensor `{name}`"))),
            }
        }
        Ok(())
    }

    /// Records every tensor on `tape`, cast to `T`.
    pub fn record<T: Element>(&self, tape: &mut Tape<T>, trainable: bool) -> ParamIds {
        let ids = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = t.cast::<T>();
                let id = if trainable { tape.param(v) } else { tape.constant(v) };
                (name.clone(), id)
            })
            .collect();
        ParamIds { ids }
    }

    /// MWTS weight bundle: magic, version, u32 count, then per tensor a
    /// u16-prefixed name and an inline MSEG tensor; finally a u32-prefixed
    /// JSON encoding of the network configuration.
    pub fn to_bytes(&self, config: &NetworkConfig) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MWTS_MAGIC);
        out.push(MWTS_VERSION);
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_str16(&mut out, name)?;
            write_tensor(&mut out, t)?;
        }
        let json = serde_json::to_string(config).map_err(|e| Error::Parse(e.to_string()))?;
        put_u32(&mut out, json.len() as u32);
        out.extend_from_slice(json.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(ModelParams, NetworkConfig)> {
        let mut r = ByteReader::new(bytes);
        r.magic(MWTS_MAGIC)?;
        r.version(MWTS_VERSION)?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let offset = r.position();
            let name = r.str16()?;
            let t = read_tensor(&mut r)?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Malformed {
                    offset,
                    reason: format!("duplicate tensor name `{name}`"),
                });
            }
        }
        let len = r.u32()? as usize;
        let offset = r.position();
        let raw = r.take(len)?;
        r.finish()?;
        let config: NetworkConfig = serde_json::from_slice(raw).map_err(|e| Error::Malformed {
            offset,
            reason: format!("config: {e}"),
        })?;
        config.validate()?;
        let params = ModelParams::from_map(tensors)?;
        params.check_against(&config)?;
        Ok((params, config))
    }

    pub fn save(&self, path: impl AsRef<Path>, config: &NetworkConfig) -> Result<()> {
        write_atomic(path, &self.to_bytes(config)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(ModelParams, NetworkConfig)> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Tape handles for a recorded [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamIds {
    pub ids: BTreeMap<String, TensorId>,
}

impl ParamIds {
    pub fn get(&self, name: &str) -> Result<TensorId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("missing tensor `{name}`")))
    }

    fn conv(&self, prefix: &str) -> Result<(TensorId, TensorId)> {
        Ok((self.get(&format!("{prefix}.weight"))?, self.get(&format!("{prefix}.bias"))?))
    }

    fn attention(&self, prefix: &str, ratio: usize) -> Result<AttentionIds> {
        let (qw, qb) = self.conv(&format!("{prefix}.attn.query"))?;
        let (kw, kb) = self.conv(&format!("{prefix}.attn.key"))?;
        let (rw, rb) = self.conv(&format!("{prefix}.attn.residual"))?;
        Ok(AttentionIds {
            query_weight: qw,
            query_bias: qb,
            key_weight: kw,
            key_bias: kb,
            residual_weight: rw,
            residual_bias: rb,
            ratio,
        })
    }
}

/// One query plus its K support pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub query_id: String,
    /// `(Cq,H,W)` in `[0,1]`.
    pub query_image: Tensor<f32>,
    /// `(1,H,W)` binary; present for training and scoring.
    pub query_mask: Option<Tensor<f32>>,
    pub support_ids: Vec<String>,
    /// `(image (Cq,H,W), mask (1,H,W))` pairs.
    pub supports: Vec<(Tensor<f32>, Tensor<f32>)>,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.supports.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.supports.is_empty() {
            return Err(Error::config("episode needs at least one support pair"));
        }
        let qs = self.query_image.shape();
        if qs.len() != 3 {
            return Err(Error::shape(format!("query image must be (C,H,W), got {qs:?}")));
        }
        let mask_shape = [1, qs[1], qs[2]];
        let binary = |m: &Tensor<f32>| m.data().iter().all(|&v| v == 0.0 || v == 1.0);
        if let Some(m) = &self.query_mask {
            if m.shape() != mask_shape || !binary(m) {
                return Err(Error::shape("query mask must be binary (1,H,W)"));
            }
        }
        for (i, (img, m)) in self.supports.iter().enumerate() {
            if img.shape() != qs {
                return Err(Error::shape(format!(
                    "support {i} image {:?} vs query {qs:?}",
                    img.shape()
                )));
            }
            if m.shape() != mask_shape || !binary(m) {
                return Err(Error::shape(format!("support {i} mask must be binary (1,H,W)")));
            }
        }
        Ok(())
    }

    /// Support pairs packed as `(k, Cq+1, H, W)` with the mask as last channel.
    pub fn support_tensor(&self) -> Result<Tensor<f32>> {
        let items = self
            .supports
            .iter()
            .map(|(img, m)| Tensor::concat0(&[img, m]))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&items)
    }

    /// Same episode with support order permuted: new position `i` holds old
    /// support `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Episode {
        let mut e = self.clone();
        e.supports = perm.iter().map(|&i| self.supports[i].clone()).collect();
        e.support_ids = perm.iter().map(|&i| self.support_ids[i].clone()).collect();
        e
    }
}

fn expect_shape<T: Element>(tape: &Tape<T>, id: TensorId, shape: &[usize], stage: &str) -> Result<()> {
    if tape.shape(id) != shape {
        return Err(Error::Contract(format!(
            "{stage}: produced {:?}, expected {shape:?}",
            tape.shape(id)
        )));
    }
    Ok(())
}

/// Cross-convolution block on tape: every support item is concatenated with
/// the query on channels and passed through one shared 3×3 convolution and
/// leaky ReLU. Returns `(S', Q')` with `Q'` the mean of `S'` over items.
pub fn cross_conv_block_on_tape<T: Element>(
    tape: &mut Tape<T>,
    support: TensorId,
    query: TensorId,
    weight: TensorId,
    bias: TensorId,
    slope: f64,
) -> Result<(TensorId, TensorId)> {
    let &[k, _, h, w] = tape.shape(support) else {
        return Err(Error::shape(format!(
            "support features must be (k,C,H,W), got {:?}",
            tape.shape(support)
        )));
    };
    let &[cq, qh, qw] = tape.shape(query) else {
        return Err(Error::shape(format!("query features must be (C,H,W), got {:?}", tape.shape(query))));
    };
    if (qh, qw) != (h, w) {
        return Err(Error::shape(format!("query {qh}x{qw} vs support {h}x{w}")));
    }
    let q = tape.reshape(query, &[1, cq, h, w])?;
    let q = tape.repeat(q, 0, k)?;
    let joined = tape.concat(&[q, support], 1)?;
    let z = tape.conv2d(joined, weight, bias)?;
    let s_out = tape.leaky_relu(z, slope);
    let q_out = tape.reduce_mean(s_out, 0)?;
    Ok((s_out, q_out))
}

/// Eager form of [`cross_conv_block_on_tape`].
pub fn cross_conv_block(
    support: &Tensor<f32>,
    query: &Tensor<f32>,
    weight: &Tensor<f32>,
    bias: &Tensor<f32>,
    slope: f64,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut tape = Tape::new();
    let s = tape.constant(support.clone());
    let q = tape.constant(query.clone());
    let w = tape.constant(weight.clone());
    let b = tape.constant(bias.clone());
    let (so, qo) = cross_conv_block_on_tape(&mut tape, s, q, w, b, slope)?;
    Ok((tape.value(so).clone(), tape.value(qo).clone()))
}

/// Records the full network. `query` is `(Cq,H,W)`, `supports` is
/// `(k, Cq+1, H, W)`; returns logits `(1,H,W)`.
pub fn forward_on_tape<T: Element>(
    tape: &mut Tape<T>,
    config: &NetworkConfig,
    params: &ParamIds,
    query: TensorId,
    supports: TensorId,
) -> Result<TensorId> {
    config.validate()?;
    let &[cq, h, w] = tape.shape(query) else {
        return Err(Error::shape(format!("query must be (C,H,W), got {:?}", tape.shape(query))));
    };
    let &[k, cs, sh, sw] = tape.shape(supports) else {
        return Err(Error::shape(format!(
            "supports must be (k,C,H,W), got {:?}",
            tape.shape(supports)
        )));
    };
    if cq != config.in_channels_query || cs != config.in_channels_support() || (sh, sw) != (h, w) {
        return Err(Error::shape(format!(
            "inputs ({cq},{h},{w}) / ({k},{cs},{sh},{sw}) do not fit the configured channels"
        )));
    }
    config.check_input_size(h, w)?;
    let ch = &config.channels;
    let slope = config.leaky_slope;

    let (wq, bq) = params.conv("stem.query")?;
    let (ws, bs) = params.conv("stem.support")?;
    let mut q = tape.conv2d(query, wq, bq)?;
    let mut s = tape.conv2d(supports, ws, bs)?;

    let mut skips = Vec::with_capacity(config.levels - 1);
    let (mut sz_h, mut sz_w) = (h, w);
    for l in 0..config.levels {
        let (cw, cb) = params.conv(&format!("enc{l}.cross"))?;
        let (s1, q1) = cross_conv_block_on_tape(tape, s, q, cw, cb, slope)?;
        (s, q) = (s1, q1);
        if config.attention {
            let a = params.attention(&format!("enc{l}"), config.ratio)?;
            let n = joint_attention_on_tape(tape, s, q, &a)?;
            (s, q) = (n.support_out, n.query_out);
        }
        expect_shape(tape, s, &[k, ch[l], sz_h, sz_w], "encoder support")?;
        expect_shape(tape, q, &[ch[l], sz_h, sz_w], "encoder query")?;
        if l + 1 < config.levels {
            skips.push((s, q));
            sz_h /= 2;
            sz_w /= 2;
            s = tape.bilinear_resize(s, sz_h, sz_w)?;
            q = tape.bilinear_resize(q, sz_h, sz_w)?;
        }
    }

    for l in (0..config.levels - 1).rev() {
        sz_h *= 2;
        sz_w *= 2;
        let s_up = tape.bilinear_resize(s, sz_h, sz_w)?;
        let q_up = tape.bilinear_resize(q, sz_h, sz_w)?;
        let (skip_s, skip_q) = skips[l];
        let s_cat = tape.concat(&[s_up, skip_s], 1)?;
        let q_cat = tape.concat(&[q_up, skip_q], 0)?;
        let (cw, cb) = params.conv(&format!("dec{l}.cross"))?;
        let (s1, q1) = cross_conv_block_on_tape(tape, s_cat, q_cat, cw, cb, slope)?;
        (s, q) = (s1, q1);
        if config.attention {
            let a = params.attention(&format!("dec{l}"), config.ratio)?;
            let n = joint_attention_on_tape(tape, s, q, &a)?;
            (s, q) = (n.support_out, n.query_out);
        }
        expect_shape(tape, s, &[k, ch[l], sz_h, sz_w], "decoder support")?;
        expect_shape(tape, q, &[ch[l], sz_h, sz_w], "decoder query")?;
    }

    let (hw, hb) = params.conv("head")?;
    let logits = tape.conv2d(q, hw, hb)?;
    expect_shape(tape, logits, &[1, h, w], "head")?;
    Ok(logits)
}

/// Logits `(1,H,W)` for an episode.
pub fn forward(episode: &Episode, params: &ModelParams, config: &NetworkConfig) -> Result<Tensor<f32>> {
    episode.validate()?;
    let mut tape = Tape::new();
    let ids = params.record(&mut tape, false);
    let q = tape.constant(episode.query_image.clone());
    let s = tape.constant(episode.support_tensor()?);
    let logits = forward_on_tape(&mut tape, config, &ids, q, s)?;
    Ok(tape.value(logits).clone())
}

/// Sigmoid probabilities `(1,H,W)` for an episode.
pub fn predict_probs(episode: &Episode, params: &ModelParams, config: &NetworkConfig) -> Result<Tensor<f32>> {
    let logits = forward(episode, params, config)?;
    let probs = logits
        .data()
        .iter()
        .map(|&z| if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { z.exp() / (1.0 + z.exp()) })
        .collect();
    Tensor::new(logits.shape().to_vec(), probs)
}
