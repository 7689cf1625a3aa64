//! Seeded multi-domain blob dataset.
//!
//! Each item is a single foreground blob (ellipse or rounded rectangle) on a
//! striped, noisy background. Domains differ in background band, stripe
//! orientation and period, noise level and foreground contrast sign, so
//! images cluster by domain in embedding space. The style table below is
//! part of the generator's versioned output; editing it changes every
//! generated file.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, DatasetItem, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GENERATOR_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainStyle {
    /// Centre of the per-image background level band (band half-width 0.05).
    pub background: f32,
    /// Signed foreground offset added inside the blob.
    pub contrast: f32,
    /// Gaussian pixel noise σ.
    pub noise: f32,
    pub stripe_amplitude: f32,
    pub stripe_angle_deg: f32,
    pub stripe_period: f32,
}

const STYLES: [DomainStyle; 6] = [
    DomainStyle {
        background: 0.22,
        contrast: 0.50,
        noise: 0.03,
        stripe_amplitude: 0.06,
        stripe_angle_deg: 0.0,
        stripe_period: 6.0,
    },
    DomainStyle {
        background: 0.75,
        contrast: -0.45,
        noise: 0.05,
        stripe_amplitude: 0.08,
        stripe_angle_deg: 60.0,
        stripe_period: 4.0,
    },
    DomainStyle {
        background: 0.48,
        contrast: 0.35,
        noise: 0.06,
        stripe_amplitude: 0.05,
        stripe_angle_deg: 120.0,
        stripe_period: 8.0,
    },
    DomainStyle {
        background: 0.62,
        contrast: -0.40,
        noise: 0.04,
        stripe_amplitude: 0.07,
        stripe_angle_deg: 30.0,
        stripe_period: 5.0,
    },
    DomainStyle {
        background: 0.32,
        contrast: 0.45,
        noise: 0.05,
        stripe_amplitude: 0.04,
        stripe_angle_deg: 90.0,
        stripe_period: 7.0,
    },
    DomainStyle {
        background: 0.85,
        contrast: -0.55,
        noise: 0.04,
        stripe_amplitude: 0.05,
        stripe_angle_deg: 150.0,
        stripe_period: 3.5,
    },
];

impl DomainStyle {
    /// Style of domain `d`. Past the table the stripe orientation is
    /// rotated per cycle so every domain stays distinct.
    pub fn for_domain(d: usize) -> DomainStyle {
        let mut s = STYLES[d % STYLES.len()];
        let cycle = d / STYLES.len();
        s.stripe_angle_deg = (s.stripe_angle_deg + 17.0 * cycle as f32) % 180.0;
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BlobKind {
    Ellipse,
    /// Rounded rectangle with the given corner radius.
    RoundedRect { radius: f64 },
}

/// Foreground shape in pixel coordinates (pixel centres at `i + 0.5`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub kind: BlobKind,
    pub cx: f64,
    pub cy: f64,
    /// Semi-axes (ellipse) or half-extents (rectangle).
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

impl Blob {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        match self.kind {
            BlobKind::Ellipse => (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0,
            BlobKind::RoundedRect { radius } => {
                let qx = u.abs() - (self.a - radius);
                let qy = v.abs() - (self.b - radius);
                let outside = qx.max(0.0).hypot(qy.max(0.0));
                outside + qx.max(qy).min(0.0) - radius <= 0.0
            }
        }
    }

    pub fn rasterize(&self, size: usize) -> Vec<f32> {
        let mut m = vec![0.0f32; size * size];
        for y in 0..size {
            for x in 0..size {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    m[y * size + x] = 1.0;
                }
            }
        }
        m
    }
}

fn sample_blob(rng: &mut ChaCha8Rng, size: usize) -> Blob {
    let s = size as f64;
    let a = rng.random_range(0.10..0.30) * s;
    let b = rng.random_range(0.10..0.30) * s;
    let kind = if rng.random_bool(0.5) {
        BlobKind::Ellipse
    } else {
        BlobKind::RoundedRect {
            radius: 0.35 * a.min(b),
        }
    };
    Blob {
        kind,
        cx: rng.random_range(0.3..0.7) * s,
        cy: rng.random_range(0.3..0.7) * s,
        a,
        b,
        angle: rng.random_range(0.0..std::f64::consts::PI),
    }
}

const MIN_AREA: f64 = 0.04;
const MAX_AREA: f64 = 0.40;

fn generate_item(rng: &mut ChaCha8Rng, style: &DomainStyle, size: usize) -> (Blob, Vec<f32>, Vec<f32>) {
    let n = (size * size) as f64;
    let (blob, mask) = loop {
        let blob = sample_blob(rng, size);
        let mask = blob.rasterize(size);
        let frac = mask.iter().filter(|&&v| v == 1.0).count() as f64 / n;
        if (MIN_AREA..=MAX_AREA).contains(&frac) {
            break (blob, mask);
        }
    };
    let level = style.background + rng.random_range(-0.05f32..0.05);
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let (sa, ca) = style.stripe_angle_deg.to_radians().sin_cos();
    let noise = Normal::new(0.0f32, style.noise).expect("noise sigma is positive");
    let mut image = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let t = (x as f32 * ca + y as f32 * sa) / style.stripe_period;
            let mut v = level
                + style.stripe_amplitude * (std::f32::consts::TAU * t + phase).sin()
                + noise.sample(rng);
            if mask[y * size + x] == 1.0 {
                v += style.contrast;
            }
            image[y * size + x] = v.clamp(0.0, 1.0);
        }
    }
    (blob, image, mask)
}

/// Generates `n` items over `domains` domains (round-robin: item `i` belongs
/// to domain `i mod domains`). Every item starts in the training split.
pub fn synth_generate(n: usize, domains: usize, size: usize, seed: u64) -> Result<Dataset> {
    Ok(synth_generate_with_blobs(n, domains, size, seed)?.0)
}

/// As [`synth_generate`], also returning the analytic blob behind each mask.
pub fn synth_generate_with_blobs(
    n: usize,
    domains: usize,
    size: usize,
    seed: u64,
) -> Result<(Dataset, Vec<Blob>)> {
    if domains == 0 || n < domains {
        return Err(Error::config(format!(
            "need n >= domains >= 1, got n={n}, domains={domains}"
        )));
    }
    if size < 16 {
        return Err(Error::config(format!("image size {size} below minimum 16")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n);
    let mut blobs = Vec::with_capacity(n);
    for i in 0..n {
        let d = i % domains;
        let (blob, image, mask) = generate_item(&mut rng, &DomainStyle::for_domain(d), size);
        items.push(DatasetItem {
            id: format!("img{i:04}"),
            image: Tensor::new(vec![1, size, size], image)?,
            mask: Tensor::new(vec![1, size, size], mask)?,
            domain: format!("domain{d}"),
            split: Split::Train,
        });
        blobs.push(blob);
    }
    Ok((Dataset::new(items)?, blobs))
}
