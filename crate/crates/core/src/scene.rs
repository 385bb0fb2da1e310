//! Procedural RGB-D scenes: a receding ground plane with fronto-parallel boxes.
//!
//! Depth grows linearly from `d_min` on the bottom row to `d_max` on the top
//! row. Each box stands on the ground at its own depth, so vertical position,
//! apparent size and shading (`albedo / depth`) all carry depth signal.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bins::{BinningScheme, DEFAULT_BINS};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Minimum number of populated default bins a generated depth map must hit.
pub const MIN_DISTINCT_BINS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub noise_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            d_min: 1.0,
            d_max: 10.0,
            min_objects: 2,
            max_objects: 6,
            noise_sigma: 0.05,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if self.height < 16 || self.width < 16 {
            return bad(format!(
                "scene must be at least 16x16, got {}x{}",
                self.height, self.width
            ));
        }
        if !(self.d_min > 0.0 && self.d_min < self.d_max && self.d_max.is_finite()) {
            return bad(format!(
                "need 0 < d_min < d_max, got [{}, {}]",
                self.d_min, self.d_max
            ));
        }
        if self.min_objects < 2 || self.max_objects > 8 || self.min_objects > self.max_objects {
            return bad(format!(
                "object count range must lie within 2..=8, got {}..={}",
                self.min_objects, self.max_objects
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise sigma must be non-negative, got {}",
                self.noise_sigma
            ));
        }
        Ok(())
    }

    /// Depth of the ground plane at row `y` (row 0 is the top).
    pub fn ground_depth(&self, y: usize) -> f64 {
        let t = y as f64 / (self.height - 1) as f64;
        self.d_max - (self.d_max - self.d_min) * t
    }

    fn ground_row(&self, depth: f64) -> usize {
        let t = (self.d_max - depth) / (self.d_max - self.d_min);
        Float::round(t * (self.height - 1) as f64).clamp(0.0, (self.height - 1) as f64) as usize
    }
}

/// Axis-aligned box in pixel coordinates (`x0..x1`, `y0..y1`, exclusive ends).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub depth: f64,
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub background_albedo: [f64; 3],
    pub rects: Vec<Rect>,
}

/// One RGB-D example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `1×3×H×W`, values in `[0, 1]` on the 8-bit grid.
    pub image: Tensor<f32>,
    /// `1×1×H×W`, meters.
    pub depth: Tensor<f32>,
    /// `1×1×H×W`, 1 where ground truth exists.
    pub valid: Tensor<f32>,
}

impl Sample {
    pub fn new(image: Tensor<f32>, depth: Tensor<f32>, valid: Tensor<f32>) -> Result<Self> {
        let (i, d, v) = (image.shape(), depth.shape(), valid.shape());
        if i.n != 1 || i.c != 3 || d != Shape::new(1, 1, i.h, i.w) || v != d {
            return Err(crate::error::shape_err(
                "sample",
                format!(
                    "image {:?}, depth {:?}, mask {:?}",
                    i.dims(),
                    d.dims(),
                    v.dims()
                ),
            ));
        }
        Ok(Sample {
            image,
            depth,
            valid,
        })
    }

    pub fn height(&self) -> usize {
        self.depth.shape().h
    }

    pub fn width(&self) -> usize {
        self.depth.shape().w
    }
}

fn albedo(rng: &mut ChaCha8Rng, scale: f64) -> [f64; 3] {
    let base = rng.random_range(0.55..1.0);
    core::array::from_fn(|_| scale * (base * rng.random_range(0.85..1.0)))
}

impl Scene {
    pub fn random(seed: u64, config: &SceneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let background_albedo = albedo(&mut rng, config.d_min);
        let count = rng.random_range(config.min_objects..=config.max_objects);
        let (h, w) = (config.height, config.width);
        let rects = (0..count)
            .map(|_| {
                let depth = rng.random_range(config.d_min..config.d_max);
                // apparent size shrinks with distance
                let scale = 2.0 * config.d_min / (depth + config.d_min);
                let bw = (Float::round(w as f64 * rng.random_range(0.2..0.5) * scale) as usize)
                    .clamp(3, w);
                let bh = (Float::round(h as f64 * rng.random_range(0.2..0.6) * scale) as usize)
                    .clamp(3, h);
                let x0 = rng.random_range(0..=w - bw);
                let y1 = (config.ground_row(depth) + 1).max(bh);
                Rect {
                    x0,
                    y0: y1 - bh,
                    x1: x0 + bw,
                    y1,
                    depth,
                    albedo: albedo(&mut rng, config.d_min),
                }
            })
            .collect();
        Ok(Scene {
            background_albedo,
            rects,
        })
    }

    /// Rasterize with a z-test, add texture noise drawn from `noise_seed` and
    /// quantize the image to 8 bits.
    pub fn render(&self, config: &SceneConfig, noise_seed: u64) -> Result<Sample> {
        config.validate()?;
        let (h, w) = (config.height, config.width);
        let mut depth = Vec::with_capacity(h * w);
        let mut owner: Vec<Option<usize>> = Vec::with_capacity(h * w);
        for y in 0..h {
            let ground = config.ground_depth(y);
            for x in 0..w {
                let mut best = (ground, None);
                for (i, r) in self.rects.iter().enumerate() {
                    if x >= r.x0 && x < r.x1 && y >= r.y0 && y < r.y1 && r.depth < best.0 {
                        best = (r.depth, Some(i));
                    }
                }
                depth.push(best.0.clamp(config.d_min, config.d_max));
                owner.push(best.1);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::Config(format!("noise: {e}")))?;
        let mut image = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for (i, &d) in depth.iter().enumerate() {
                let a = match owner[i] {
                    Some(r) => self.rects[r].albedo[c],
                    None => self.background_albedo[c],
                };
                let n = if config.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                let v = (a / d + n).clamp(0.0, 1.0);
                image.push((Float::round(v * 255.0) / 255.0) as f32);
            }
        }
        Sample::new(
            Tensor::from_vec(Shape::new(1, 3, h, w), image)?,
            Tensor::from_vec(
                Shape::new(1, 1, h, w),
                depth.into_iter().map(|d| d as f32).collect(),
            )?,
            Tensor::full(Shape::new(1, 1, h, w), 1.0),
        )
    }
}

/// Deterministic sample for `seed`. Scenes whose depth map populates fewer than
/// [`MIN_DISTINCT_BINS`] default bins are redrawn from a derived seed.
pub fn generate_sample(seed: u64, config: &SceneConfig) -> Result<Sample> {
    config.validate()?;
    let scheme = BinningScheme::sid(config.d_min, config.d_max, DEFAULT_BINS)?;
    let mut s = seed;
    for _ in 0..64 {
        let sample =
            Scene::random(s, config)?.render(config, s.rotate_left(17) ^ 0x9e37_79b9_7f4a_7c15)?;
        if scheme
            .discretize(&sample.depth, Some(&sample.valid))?
            .distinct_bins()
            >= MIN_DISTINCT_BINS
        {
            return Ok(sample);
        }
        s = s
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
    }
    Err(Error::Config(
        "could not draw a scene covering enough depth bins; widen the depth range".into(),
    ))
}

/// Samples `seed ^ i` for `i in 0..n`.
pub fn generate_samples(seed: u64, n: usize, config: &SceneConfig) -> Result<Vec<Sample>> {
    (0..n as u64)
        .map(|i| generate_sample(seed ^ i, config))
        .collect()
}
