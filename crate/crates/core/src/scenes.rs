//! Procedural ten-class scenes at 32×32.
//!
//! Each class pairs a small foreground glyph in a class colour with a
//! background context: a base colour and an oriented grating. Glyph
//! position, size and colour offset, the background colour offset, grating
//! phase and orientation, and pixel noise vary per image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split, CIFAR_CHANNELS, CIFAR_SIZE};
use crate::error::{CoreError, Result};

pub const NUM_CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub min_glyph: usize,
    pub max_glyph: usize,
    /// Per-image, per-channel background offset.
    pub background_jitter: f64,
    /// Scale of the class background colour around the table mean.
    pub background_contrast: f64,
    pub grating_amplitude: f64,
    /// Orientation jitter in degrees.
    pub orientation_jitter: f64,
    pub pixel_noise: f64,
    /// Glyphs take their class colour instead of a random palette entry.
    pub class_colour: bool,
    /// Per-image, per-channel glyph colour offset.
    pub glyph_colour_jitter: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            min_glyph: 4,
            max_glyph: 6,
            background_jitter: 30.0,
            background_contrast: 0.6,
            grating_amplitude: 18.0,
            orientation_jitter: 12.0,
            pixel_noise: 14.0,
            class_colour: true,
            glyph_colour_jitter: 25.0,
        }
    }
}

const BACKGROUNDS: [[f64; 3]; NUM_CLASSES] = [
    [96.0, 128.0, 160.0],
    [128.0, 112.0, 96.0],
    [104.0, 144.0, 104.0],
    [144.0, 128.0, 144.0],
    [120.0, 120.0, 120.0],
    [112.0, 136.0, 136.0],
    [152.0, 136.0, 104.0],
    [96.0, 104.0, 128.0],
    [136.0, 104.0, 120.0],
    [112.0, 128.0, 96.0],
];

const GLYPH_COLOURS: [[f64; 3]; 6] = [
    [230.0, 40.0, 40.0],
    [40.0, 200.0, 60.0],
    [50.0, 70.0, 230.0],
    [240.0, 220.0, 40.0],
    [240.0, 240.0, 240.0],
    [20.0, 20.0, 20.0],
];

const CLASS_COLOURS: [[f64; 3]; NUM_CLASSES] = [
    [230.0, 40.0, 40.0],
    [40.0, 200.0, 60.0],
    [50.0, 70.0, 230.0],
    [240.0, 220.0, 40.0],
    [240.0, 240.0, 240.0],
    [20.0, 20.0, 20.0],
    [230.0, 130.0, 20.0],
    [160.0, 40.0, 200.0],
    [30.0, 210.0, 210.0],
    [230.0, 90.0, 180.0],
];

/// Whether `(u, v)` in `[-1, 1]²` lies inside the glyph of `class`.
pub fn glyph(class: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    let r = (u * u + v * v).sqrt();
    match class {
        0 => r <= 1.0,
        1 => au.max(av) <= 0.8,
        2 => au <= 0.5 * (v + 1.0),
        3 => au <= 0.3 || av <= 0.3,
        4 => (0.55..=1.0).contains(&r),
        5 => ((v + 1.0) * 2.5).floor() as i64 % 2 == 0,
        6 => ((u + 1.0) * 2.5).floor() as i64 % 2 == 0,
        7 => au + av <= 1.0,
        8 => u <= -0.3 || v >= 0.3,
        _ => (au - av).abs() <= 0.3,
    }
}

fn stream(split: Split) -> u64 {
    match split {
        Split::Train => 11,
        Split::Test => 12,
    }
}

/// `per_class` scenes of every class, classes interleaved.
pub fn make_scenes(params: &SceneParams, per_class: usize, seed: u64, split: Split) -> Result<Dataset> {
    if params.min_glyph < 4 || params.min_glyph > params.max_glyph || params.max_glyph > CIFAR_SIZE {
        return Err(CoreError::Data(format!(
            "glyph size range {}..={} outside 4..={CIFAR_SIZE}",
            params.min_glyph, params.max_glyph
        )));
    }
    let normal = |s: f64| Normal::new(0.0, s.max(0.0)).map_err(|e| CoreError::Data(e.to_string()));
    let (bg, orient, noise) = (
        normal(params.background_jitter)?,
        normal(params.orientation_jitter)?,
        normal(params.pixel_noise)?,
    );
    let gj = normal(params.glyph_colour_jitter)?;
    let mean: [f64; 3] = std::array::from_fn(|ch| BACKGROUNDS.iter().map(|b| b[ch]).sum::<f64>() / NUM_CLASSES as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream(split));
    let s = CIFAR_SIZE;
    let plane = s * s;
    let count = per_class * NUM_CLASSES;
    let mut images = Vec::with_capacity(count * CIFAR_CHANNELS * plane);
    let mut labels = Vec::with_capacity(count);
    let mut img = vec![0.0f64; CIFAR_CHANNELS * plane];
    for i in 0..count {
        let c = i % NUM_CLASSES;
        let offset: [f64; 3] = std::array::from_fn(|_| bg.sample(&mut rng));
        let base: [f64; 3] = std::array::from_fn(|ch| mean[ch] + params.background_contrast * (BACKGROUNDS[c][ch] - mean[ch]));
        let theta = (c as f64 * 18.0 + orient.sample(&mut rng)).to_radians();
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let (ct, st) = (theta.cos(), theta.sin());
        for y in 0..s {
            for x in 0..s {
                let g = params.grating_amplitude
                    * (std::f64::consts::TAU * 0.18 * (x as f64 * ct + y as f64 * st) + phase).sin();
                for ch in 0..CIFAR_CHANNELS {
                    img[ch * plane + y * s + x] = base[ch] + offset[ch] + g;
                }
            }
        }
        let size = rng.random_range(params.min_glyph..=params.max_glyph);
        let x0 = rng.random_range(0..=s - size);
        let y0 = rng.random_range(0..=s - size);
        let colour: [f64; 3] = if params.class_colour {
            let jitter = [gj.sample(&mut rng), gj.sample(&mut rng), gj.sample(&mut rng)];
            std::array::from_fn(|ch| CLASS_COLOURS[c][ch] + jitter[ch])
        } else {
            GLYPH_COLOURS[rng.random_range(0..GLYPH_COLOURS.len())]
        };
        let half = size as f64 / 2.0;
        for y in y0..y0 + size {
            for x in x0..x0 + size {
                let u = (x as f64 + 0.5 - x0 as f64 - half) / half;
                let v = (y as f64 + 0.5 - y0 as f64 - half) / half;
                if glyph(c, u, v) {
                    for ch in 0..CIFAR_CHANNELS {
                        img[ch * plane + y * s + x] = colour[ch];
                    }
                }
            }
        }
        images.extend(
            img.iter()
                .map(|&p| (p + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8),
        );
        labels.push(c as u8);
    }
    Dataset::new(images, labels, CIFAR_CHANNELS, CIFAR_SIZE, NUM_CLASSES, split)
}
