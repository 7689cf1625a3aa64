//! Helpers shared by several test targets.
#![allow(dead_code)]

use std::collections::HashSet;

use matchseg::retrieval::EmbeddingIndex;
use matchseg::tensor::{Element, Tape, Tensor, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(lo..hi)))
}

/// `sum(op(x) * r)` with fixed random `r`, so every output element carries
/// a distinct, non-trivial cotangent.
pub fn weighted<T: Element>(t: &mut Tape<T>, y: TensorId, seed: u64) -> matchseg::Result<TensorId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = t.shape(y).to_vec();
    let r = Tensor::from_fn(&shape, |_| {
        let m = rng.random_range(0.5..1.5);
        T::of(if rng.random_bool(0.5) { m } else { -m })
    });
    let r = t.constant(r);
    let p = t.mul(y, r)?;
    Ok(t.sum(p))
}

// Every differentiable op through `sum(op(x) * r)`, in f64 and in f32.

pub type OpFn<T> = fn(&mut Tape<T>, TensorId) -> matchseg::Result<TensorId>;

pub fn op_suite<T: Element>() -> Vec<(&'static str, Vec<usize>, (f64, f64), OpFn<T>)> {
    fn conv<T: Element>(t: &mut Tape<T>, x: TensorId) -> matchseg::Result<TensorId> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = t.constant(rand_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0));
        let b = t.constant(rand_tensor(&mut rng, &[2], -1.0, 1.0));
        let y = t.conv2d(x, w, b)?;
        weighted(t, y, 1)
    }
    fn conv_weight<T: Element>(t: &mut Tape<T>, w: TensorId) -> matchseg::Result<TensorId> {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = t.constant(rand_tensor(&mut rng, &[2, 2, 4, 4], -1.0, 1.0));
        let b = t.constant(rand_tensor(&mut rng, &[3], -1.0, 1.0));
        let y = t.conv2d(x, w, b)?;
        weighted(t, y, 2)
    }
    fn conv_bias<T: Element>(t: &mut Tape<T>, b: TensorId) -> matchseg::Result<TensorId> {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = t.constant(rand_tensor(&mut rng, &[2, 3, 3], -1.0, 1.0));
        let w = t.constant(rand_tensor(&mut rng, &[4, 2, 1, 1], -1.0, 1.0));
        let y = t.conv2d(x, w, b)?;
        weighted(t, y, 3)
    }
    fn leaky<T: Element>(t: &mut Tape<T>, x: TensorId) -> matchseg::Result<TensorId> {
        let y = t.leaky_relu(x, 0.01);
        weighted(t, y, 4)
    }
    fn bilinear_up<T: Element>(t: &mut Tape<T>, x: TensorId) -> matchseg::Result<TensorId> {
        let y = t.bilinear_resize(x, 7, 5)?;
        weighted(t, y, 5)
    }
    fn bilinear_down<T: Element>(t: &mut Tape<T>, x: TensorId) -> matchseg::Result<TensorId> {
        let y = t.bilinear_resize(x, 2, 3)?;
        weighted(t, y, 6)
    }
    fn matmul_l<T: Element>(t: &mut Tape<T>, a: TensorId) -> matchseg::Result<TensorId> {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let b = t.constant(rand_tensor(&mut rng, &[4, 3], -1.0, 1.0));
        let y = t.matmul(a, b)?;
        weighted(t, y, 7)
    }
    fn matmul_r<T: Element>(t: &mut Tape<T>, b: TensorId) -> matchseg::Result<TensorId> {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let a = t.constant(rand_tensor(&mut rng, &[2, 5], -1.0, 1.0));
        let y = t.matmul(a, b)?;
        weighted(t, y, 8)
    }
    fn matmul_t_l<T: Element>(t: &mut Tape<T>, a: TensorId) -> matchseg::Result<TensorId> {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let b = t.constant(rand_tensor(&mut rng, &[3, 5], -1.0, 1.0));
        let y = t.matmul_t(a, true, b, true)?;
        weighted(t, y, 9)
    }
    fn matmul_t_r<T: Element>(t: &mut Tape<T>, b: TensorId) -> matchseg::Result<TensorId> {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = t.constant(rand_tensor(&mut rng, &[5, 2], -1.0, 1.0));
        let y = t.matmul_t(a, true, b, true)?;
        weighted(t, y, 10)
    }
    fn softmax<T: Element>(t: &mut Tape<T>, x: TensorId) -> matchseg::Result<TensorId> {
        let y = t.softmax(x, 1)?;
        weighted(t, y, 9)
    }
    fn softmax0<T: Element>(t: &mut Tape<T>, x: TensorId) -> matchseg::Result<TensorId> {
        let y = t.softmax(x, 0)?;
        weighted(t, y, 10)
    }
    fn mean<T: Element>(t: &mut Tape<T>, x: TensorId) -> matchseg::Result<TensorId> {
        let y = t.reduce_mean(x, 1)?;
        weighted(t, y, 11)
    }
    fn mul_self<T: Element>(t: &mut Tape<T>, x: TensorId) -> matchseg::Result<TensorId> {
        let y = t.mul(x, x)?;
        let z = t.add(y, x)?;
        let w = t.sub(z, y)?;
        let v = t.mul(w, y)?;
        weighted(t, v, 12)
    }
    fn sigmoid<T: Element>(t: &mut Tape<T>, x: TensorId) -> matchseg::Result<TensorId> {
        let y = t.sigmoid(x);
        weighted(t, y, 13)
    }
    fn log<T: Element>(t: &mut Tape<T>, x: TensorId) -> matchseg::Result<TensorId> {
        let y = t.log(x)?;
        weighted(t, y, 14)
    }
    fn power<T: Element>(t: &mut Tape<T>, x: TensorId) -> matchseg::Result<TensorId> {
        let y = t.power(x, 2.5);
        weighted(t, y, 15)
    }
    fn clamp<T: Element>(t: &mut Tape<T>, x: TensorId) -> matchseg::Result<TensorId> {
        let y = t.clamp(x, -0.5, 0.5);
        let z = t.add_scalar(y, 0.25);
        let s = t.scale(z, -1.5);
        weighted(t, s, 16)
    }
    fn structural<T: Element>(t: &mut Tape<T>, x: TensorId) -> matchseg::Result<TensorId> {
        let r = t.reshape(x, &[1, 3, 4])?;
        let rep = t.repeat(r, 0, 3)?;
        let cat = t.concat(&[rep, rep], 1)?;
        let flat = t.reshape(cat, &[18, 4])?;
        let tr = t.transpose2d(flat)?;
        weighted(t, tr, 17)
    }
    vec![
        ("conv2d/input", vec![2, 4, 3], (-1.0, 1.0), conv::<T>),
        ("conv2d/weight", vec![3, 2, 3, 3], (-1.0, 1.0), conv_weight::<T>),
        ("conv2d/bias", vec![4], (-1.0, 1.0), conv_bias::<T>),
        ("leaky_relu", vec![16], (0.05, 1.0), leaky::<T>),
        ("bilinear/up", vec![2, 3, 3], (-1.0, 1.0), bilinear_up::<T>),
        ("bilinear/down", vec![1, 4, 6], (-1.0, 1.0), bilinear_down::<T>),
        ("matmul/lhs", vec![5, 4], (-1.0, 1.0), matmul_l::<T>),
        ("matmul/rhs", vec![5, 3], (-1.0, 1.0), matmul_r::<T>),
        ("matmul_t/lhs", vec![5, 4], (-1.0, 1.0), matmul_t_l::<T>),
        ("matmul_t/rhs", vec![3, 5], (-1.0, 1.0), matmul_t_r::<T>),
        ("softmax/last", vec![3, 5], (-2.0, 2.0), softmax::<T>),
        ("softmax/first", vec![3, 5], (-2.0, 2.0), softmax0::<T>),
        ("reduce_mean", vec![2, 3, 4], (-1.0, 1.0), mean::<T>),
        ("add/sub/mul", vec![12], (0.2, 1.0), mul_self::<T>),
        ("sigmoid", vec![10], (-3.0, 3.0), sigmoid::<T>),
        ("log", vec![10], (0.5, 2.0), log::<T>),
        ("power", vec![10], (0.5, 2.0), power::<T>),
        ("clamp/add_scalar/scale", vec![10], (-0.45, 0.45), clamp::<T>),
        ("reshape/repeat/concat/transpose", vec![3, 4], (-1.0, 1.0), structural::<T>),
    ]
}

pub fn leaky_inputs_away_from_kink<T: Element>(x: Tensor<T>, name: &str) -> Tensor<T> {
    if name != "leaky_relu" {
        return x;
    }
    // Mix signs while staying clear of the kink at zero.
    let data: Vec<T> = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if i % 2 == 0 { v } else { -v })
        .collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

pub fn cos64(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn random_index(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmbeddingIndex {
    let mut idx = EmbeddingIndex::new(d, "test").unwrap();
    for i in 0..n {
        let v: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        idx.push(format!("r{i}"), v).unwrap();
    }
    idx
}

/// Full selection sort by (score desc, position asc).
pub fn brute_force(query: &[f32], idx: &EmbeddingIndex, k: usize, exclude: &HashSet<&str>) -> Vec<String> {
    let mut left: Vec<(usize, f64)> = idx
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| !exclude.contains(r.id.as_str()))
        .map(|(i, r)| (i, cos64(query, &r.vector)))
        .collect();
    let mut out = Vec::new();
    while !left.is_empty() && out.len() < k {
        let mut best = 0;
        for j in 1..left.len() {
            if left[j].1 > left[best].1 {
                best = j;
            }
        }
        out.push(idx.records()[left.remove(best).0].id.clone());
    }
    out
}
