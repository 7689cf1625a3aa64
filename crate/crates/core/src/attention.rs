//! Joint attention between query features and a stack of support features.
//!
//! Both inputs are first reduced from `C` to `C' = C / ratio` channels with
//! separate 1×1 convolutions. The reduced query is repeated once per support
//! item and both are flattened to `(HW, kC')` matrices (support index is the
//! outer grouping of the `kC'` axis). Their product, normalised by a
//! row-wise softmax, is an `(HW, HW)` attention map `A` shared by all support
//! items. Each item's `(HW, C)` value matrix is mixed by `A` and added to a
//! 1×1 residual projection of the item; the new query is the mean of the
//! updated support items.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::segnet::he_uniform;
use crate::tensor::{Element, Tape, Tensor, TensorId};

/// Weights of one attention module. Convolutions are 1×1 with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct JointAttentionParams<T: Element = f32> {
    pub query_weight: Tensor<T>,
    pub query_bias: Tensor<T>,
    pub key_weight: Tensor<T>,
    pub key_bias: Tensor<T>,
    pub residual_weight: Tensor<T>,
    pub residual_bias: Tensor<T>,
    pub ratio: usize,
}

pub fn check_ratio(channels: usize, ratio: usize) -> Result<usize> {
    if ratio == 0 || channels % ratio != 0 {
        return Err(Error::config(format!(
            "channel count {channels} is not divisible by attention ratio {ratio}"
        )));
    }
    Ok(channels / ratio)
}

impl<T: Element> JointAttentionParams<T> {
    /// He-uniform weights, zero biases.
    pub fn random(channels: usize, ratio: usize, seed: u64) -> Result<Self> {
        let reduced = check_ratio(channels, ratio)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cast = |t: Tensor<f32>| t.cast::<T>();
        Ok(JointAttentionParams {
            query_weight: cast(he_uniform(&[reduced, channels, 1, 1], &mut rng)),
            query_bias: Tensor::zeros(&[reduced]),
            key_weight: cast(he_uniform(&[reduced, channels, 1, 1], &mut rng)),
            key_bias: Tensor::zeros(&[reduced]),
            residual_weight: cast(he_uniform(&[channels, channels, 1, 1], &mut rng)),
            residual_bias: Tensor::zeros(&[channels]),
            ratio,
        })
    }

    pub fn channels(&self) -> usize {
        self.residual_weight.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        let reduced = check_ratio(c, self.ratio)?;
        let ok = self.query_weight.shape() == [reduced, c, 1, 1]
            && self.key_weight.shape() == [reduced, c, 1, 1]
            && self.residual_weight.shape() == [c, c, 1, 1]
            && self.query_bias.shape() == [reduced]
            && self.key_bias.shape() == [reduced]
            && self.residual_bias.shape() == [c];
        if !ok {
            return Err(Error::shape(format!(
                "attention weights inconsistent with C={c}, ratio={}",
                self.ratio
            )));
        }
        Ok(())
    }

    pub fn record(&self, tape: &mut Tape<T>, trainable: bool) -> AttentionIds {
        let mut put = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        AttentionIds {
            query_weight: put(&self.query_weight),
            query_bias: put(&self.query_bias),
            key_weight: put(&self.key_weight),
            key_bias: put(&self.key_bias),
            residual_weight: put(&self.residual_weight),
            residual_bias: put(&self.residual_bias),
            ratio: self.ratio,
        }
    }
}

/// Attention weights already recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionIds {
    pub query_weight: TensorId,
    pub query_bias: TensorId,
    pub key_weight: TensorId,
    pub key_bias: TensorId,
    pub residual_weight: TensorId,
    pub residual_bias: TensorId,
    pub ratio: usize,
}

/// Handles to the intermediate and final tensors of one attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttentionNodes {
    pub query_flat: TensorId,
    pub key_flat: TensorId,
    pub attention: TensorId,
    pub support_out: TensorId,
    pub query_out: TensorId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput<T: Element = f32> {
    /// `(k,C,H,W)`
    pub support_out: Tensor<T>,
    /// `(C,H,W)`
    pub query_out: Tensor<T>,
    /// `(HW,HW)`, rows sum to one.
    pub attention: Tensor<T>,
}

/// Records joint attention on `tape`. `support` is `(k,C,H,W)`, `query`
/// is `(C,H,W)`.
pub fn joint_attention_on_tape<T: Element>(
    tape: &mut Tape<T>,
    support: TensorId,
    query: TensorId,
    p: &AttentionIds,
) -> Result<AttentionNodes> {
    let &[k, c, h, w] = tape.shape(support) else {
        return Err(Error::shape(format!(
            "support features must be (k,C,H,W), got {:?}",
            tape.shape(support)
        )));
    };
    if tape.shape(query) != [c, h, w] {
        return Err(Error::shape(format!(
            "query features {:?} do not match support items ({c},{h},{w})",
            tape.shape(query)
        )));
    }
    let reduced = check_ratio(c, p.ratio)?;
    if tape.shape(p.query_weight) != [reduced, c, 1, 1] || tape.shape(p.key_weight) != [reduced, c, 1, 1] {
        return Err(Error::shape(format!(
            "reduction convs must be ({reduced},{c},1,1) for ratio {}",
            p.ratio
        )));
    }
    let hw = h * w;

    let q = tape.conv2d(query, p.query_weight, p.query_bias)?;
    let q = tape.reshape(q, &[reduced, hw])?;
    let key = tape.conv2d(support, p.key_weight, p.key_bias)?;

    // Q̂ and K̂ as laid out above, kept for inspection.
    let q_rep = tape.reshape(q, &[1, reduced, hw])?;
    let q_rep = tape.repeat(q_rep, 0, k)?;
    let q_rep = tape.reshape(q_rep, &[k * reduced, hw])?;
    let query_flat = tape.transpose2d(q_rep)?;
    let key_all = tape.reshape(key, &[k * reduced, hw])?;
    let key_flat = tape.transpose2d(key_all)?;

    // Q̂ repeats the same block for every item, so Q̂·K̂ᵀ = qᵀ·Σ_j key_j.
    let key_mean = tape.reduce_mean(key, 0)?;
    let key_sum = tape.scale(key_mean, k as f64);
    let key_sum = tape.reshape(key_sum, &[reduced, hw])?;
    let logits = tape.matmul_t(q, true, key_sum, false)?;
    let attention = tape.softmax(logits, 1)?;

    // (kC, HW)·Aᵀ stacks (A·V_j)ᵀ for every item j.
    let values = tape.reshape(support, &[k * c, hw])?;
    let mixed = tape.matmul_t(values, false, attention, true)?;
    let mixed = tape.reshape(mixed, &[k, c, h, w])?;

    let residual = tape.conv2d(support, p.residual_weight, p.residual_bias)?;
    let support_out = tape.add(residual, mixed)?;
    let query_out = tape.reduce_mean(support_out, 0)?;
    Ok(AttentionNodes {
        query_flat,
        key_flat,
        attention,
        support_out,
        query_out,
    })
}

/// Evaluates joint attention on a private tape.
pub fn joint_attention<T: Element>(
    support: &Tensor<T>,
    query: &Tensor<T>,
    params: &JointAttentionParams<T>,
) -> Result<AttentionOutput<T>> {
    params.validate()?;
    if support.rank() == 4 && support.shape()[0] == 0 {
        return Err(Error::config("joint attention needs at least one support item"));
    }
    let mut tape = Tape::new();
    let s = tape.constant(support.clone());
    let q = tape.constant(query.clone());
    let ids = params.record(&mut tape, false);
    let nodes = joint_attention_on_tape(&mut tape, s, q, &ids)?;
    Ok(AttentionOutput {
        support_out: tape.value(nodes.support_out).clone(),
        query_out: tape.value(nodes.query_out).clone(),
        attention: tape.value(nodes.attention).clone(),
    })
}
