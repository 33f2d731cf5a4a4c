//! Seeded synthetic property-risk scenes: textured backgrounds with
//! class-coloured rectangles, Zipf-distributed classes and low-contrast
//! "subtle" classes.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::geometry::CenterBox;

use super::{ClassTable, DataError, Dataset, GroundTruthBox, Image, Sample};

/// SplitMix64 generator.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.next_f64() * (hi - lo + 1) as f64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.range(0, i);
            xs.swap(i, j);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub classes: usize,
    pub skew: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side lengths as fractions of the image side.
    pub min_extent: f64,
    pub max_extent: f64,
    /// Blend factor toward the palette colour for subtle classes.
    pub subtle_contrast: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 96,
            classes: 6,
            skew: 1.2,
            min_objects: 1,
            max_objects: 4,
            min_extent: 0.12,
            max_extent: 0.35,
            subtle_contrast: 0.35,
            noise: 0.08,
            seed: 0,
        }
    }
}

const PLACEMENT_RETRIES: usize = 50;

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if self.image_size < 32 {
            return bad("image_size must be at least 32");
        }
        if self.classes == 0 {
            return bad("classes must be at least 1");
        }
        if self.min_objects < 1 || self.max_objects < self.min_objects {
            return bad("need 1 <= min_objects <= max_objects");
        }
        if !(self.min_extent > 0.0 && self.min_extent <= self.max_extent && self.max_extent <= 1.0) {
            return bad("need 0 < min_extent <= max_extent <= 1");
        }
        if !(self.skew.is_finite() && self.skew >= 0.0) {
            return bad("skew must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.subtle_contrast) || !(0.0..=1.0).contains(&self.noise) {
            return bad("subtle_contrast and noise must lie in [0, 1]");
        }
        Ok(())
    }

    /// Zipf probability mass over class ids: `p_k ∝ 1 / (k+1)^skew`.
    pub fn class_pmf(&self) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.classes)
            .map(|k| 1.0 / ((k + 1) as f64).powf(self.skew))
            .collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / z).collect()
    }

    pub fn is_subtle(class_id: usize) -> bool {
        class_id % 3 == 2
    }
}

/// Inverse-CDF sampler over the Zipf class masses.
#[derive(Clone, Debug)]
pub struct ZipfSampler {
    cdf: Vec<f64>,
}

impl ZipfSampler {
    pub fn new(pmf: &[f64]) -> Self {
        let mut cdf = pmf.to_vec();
        for i in 1..cdf.len() {
            cdf[i] += cdf[i - 1];
        }
        Self { cdf }
    }

    pub fn sample(&self, rng: &mut SplitMix64) -> usize {
        let u = rng.next_f64();
        self.cdf
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cdf.len() - 1)
    }
}

fn palette(k: usize, count: usize) -> [f64; 3] {
    let hue = k as f64 / count as f64 * 6.0;
    let (s, v) = (0.85, 0.9);
    let c = v * s;
    let x = c * (1.0 - (hue % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match hue as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

fn round6(v: f64) -> f64 {
    format!("{v:.6}").parse().expect("formatted float")
}

/// Generates `count` images. The same config always yields identical pixels
/// and labels.
pub fn generate_synthetic(cfg: &SynthConfig, count: usize) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let classes = ClassTable::with_ramp(cfg.classes);
    let sampler = ZipfSampler::new(&cfg.class_pmf());
    let mut rng = SplitMix64::new(cfg.seed);
    let mut ds = Dataset::new("synthetic", classes);
    let mut dropped = 0usize;
    for index in 0..count {
        let (sample, lost) = render_scene(cfg, &sampler, &mut rng, index);
        dropped += lost;
        ds.samples.push(sample);
    }
    if dropped > 0 {
        log::warn!("synthetic generator dropped {dropped} objects after {PLACEMENT_RETRIES} placement retries");
        ds.issues
            .push(format!("{dropped} objects dropped: no free placement"));
    }
    Ok(ds)
}

fn render_scene(
    cfg: &SynthConfig,
    sampler: &ZipfSampler,
    rng: &mut SplitMix64,
    index: usize,
) -> (Sample, usize) {
    let n = cfg.image_size;
    let base = [
        rng.uniform(0.3, 0.6),
        rng.uniform(0.3, 0.6),
        rng.uniform(0.3, 0.6),
    ];
    // Low-frequency texture: two oriented sinusoids.
    let (fx, fy) = (rng.uniform(1.0, 4.0), rng.uniform(1.0, 4.0));
    let (px, py) = (rng.uniform(0.0, TAU), rng.uniform(0.0, TAU));
    let amp = 0.06;
    let mut pixels = vec![0.0f64; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            let t = amp
                * ((fx * x as f64 / n as f64 * TAU + px).sin()
                    + (fy * y as f64 / n as f64 * TAU + py).sin())
                / 2.0;
            for c in 0..3 {
                pixels[(y * n + x) * 3 + c] = base[c] + t + cfg.noise * (rng.next_f64() - 0.5);
            }
        }
    }

    let objects = rng.range(cfg.min_objects, cfg.max_objects);
    let mut placed: Vec<[usize; 4]> = Vec::new();
    let mut boxes = Vec::new();
    let mut dropped = 0;
    let lo = ((cfg.min_extent * n as f64).round() as usize).max(2);
    let hi = ((cfg.max_extent * n as f64).round() as usize).max(lo);
    for _ in 0..objects {
        let class_id = sampler.sample(rng);
        let mut spot = None;
        for _ in 0..PLACEMENT_RETRIES {
            let w = rng.range(lo, hi);
            let h = rng.range(lo, hi);
            let x0 = rng.range(0, n - w);
            let y0 = rng.range(0, n - h);
            let r = [x0, y0, x0 + w, y0 + h];
            let free = placed
                .iter()
                .all(|p| r[2] < p[0] || p[2] < r[0] || r[3] < p[1] || p[3] < r[1]);
            if free {
                spot = Some(r);
                break;
            }
        }
        let Some(r) = spot else {
            dropped += 1;
            continue;
        };
        placed.push(r);
        let target = palette(class_id, cfg.classes);
        let colour: [f64; 3] = if SynthConfig::is_subtle(class_id) {
            std::array::from_fn(|c| base[c] + cfg.subtle_contrast * (target[c] - base[c]))
        } else {
            target
        };
        for y in r[1]..r[3] {
            for x in r[0]..r[2] {
                for c in 0..3 {
                    pixels[(y * n + x) * 3 + c] = colour[c] + cfg.noise * (rng.next_f64() - 0.5);
                }
            }
        }
        let nf = n as f64;
        boxes.push(GroundTruthBox {
            class_id,
            bbox: CenterBox {
                cx: round6((r[0] + r[2]) as f64 / 2.0 / nf),
                cy: round6((r[1] + r[3]) as f64 / 2.0 / nf),
                w: round6((r[2] - r[0]) as f64 / nf),
                h: round6((r[3] - r[1]) as f64 / nf),
            },
            severity: None,
        });
    }
    let data = pixels.into_iter().map(quantize).collect();
    let image = Image::new(n, n, data).expect("synthetic image in range");
    (
        Sample {
            name: format!("{index:05}"),
            image,
            boxes,
        },
        dropped,
    )
}
