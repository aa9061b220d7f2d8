//! Procedurally generated texture "individuals" for desk-scale experiments.
//!
//! Each class is a fixed mixture of oriented colour gratings. Every image of a
//! class redraws phases, jitters orientation, frequency, contrast and
//! brightness, and adds pixel noise plus an occluding patch, so images of one
//! class are related but never identical.

use std::f64::consts::PI;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::align::{warp_image, LandmarkSet, LandmarkTemplate, SimilarityParams, CROP_HEIGHT, CROP_WIDTH};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySpec {
    pub classes: usize,
    pub per_class: usize,
    pub seed: u64,
    /// Standard deviation of additive pixel noise, in 8-bit levels.
    pub noise: f64,
    /// Orientation jitter in radians (uniform, symmetric).
    pub orientation_jitter: f64,
    /// Relative frequency jitter.
    pub frequency_jitter: f64,
    /// Side of the square occluder as a fraction of the crop width; 0 disables it.
    pub occluder: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 40,
            seed: 7,
            noise: 24.0,
            orientation_jitter: 0.25,
            frequency_jitter: 0.12,
            occluder: 0.35,
        }
    }
}

#[derive(Clone, Debug)]
struct Grating {
    frequency: f64,
    orientation: f64,
    colour: [f64; 3],
}

#[derive(Clone, Debug)]
struct ClassRecipe {
    base: [f64; 3],
    gratings: Vec<Grating>,
}

fn recipe(seed: u64, class: usize) -> ClassRecipe {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ class as u64);
    let base = std::array::from_fn(|_| rng.random_range(70.0..180.0));
    let gratings = (0..3)
        .map(|_| Grating {
            frequency: rng.random_range(0.04..0.22),
            orientation: rng.random_range(0.0..PI),
            colour: std::array::from_fn(|_| rng.random_range(-45.0..45.0)),
        })
        .collect();
    ClassRecipe { base, gratings }
}

/// Identifier used for class `i`.
pub fn class_id(i: usize) -> String {
    format!("toy{i:03}")
}

#[derive(Clone, Debug)]
pub struct ToyImage {
    pub class: usize,
    pub index: usize,
    pub crop: RgbImage,
}

impl ToyImage {
    pub fn id(&self) -> String {
        class_id(self.class)
    }

    pub fn name(&self) -> String {
        format!("{}_{:03}.png", self.id(), self.index)
    }
}

/// Renders image `index` of `class` as a canonical 96x112 crop.
pub fn render(spec: &ToySpec, class: usize, index: usize) -> RgbImage {
    let recipe = recipe(spec.seed, class);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(
        spec.seed ^ ((class as u64) << 32) ^ (index as u64).wrapping_mul(0x2545_f491_4f6c_dd1d),
    );
    let waves: Vec<(f64, f64, f64, [f64; 3])> = recipe
        .gratings
        .iter()
        .map(|g| {
            let theta = g.orientation + rng.random_range(-1.0..=1.0) * spec.orientation_jitter;
            let f = g.frequency * (1.0 + rng.random_range(-1.0..=1.0) * spec.frequency_jitter);
            let phase = rng.random_range(0.0..2.0 * PI);
            (2.0 * PI * f * theta.cos(), 2.0 * PI * f * theta.sin(), phase, g.colour)
        })
        .collect();
    let contrast = rng.random_range(0.7..1.3);
    let brightness = rng.random_range(-20.0..20.0);
    let side = (spec.occluder * f64::from(CROP_WIDTH)) as u32;
    let occ = (side > 0).then(|| {
        (
            rng.random_range(0..=CROP_WIDTH - side),
            rng.random_range(0..=CROP_HEIGHT - side),
            rng.random_range(0.0..255.0),
        )
    });
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    RgbImage::from_fn(CROP_WIDTH, CROP_HEIGHT, |x, y| {
        let (fx, fy) = (f64::from(x), f64::from(y));
        let mut px = recipe.base;
        for &(kx, ky, phase, colour) in &waves {
            let v = (kx * fx + ky * fy + phase).sin() * contrast;
            for c in 0..3 {
                px[c] += colour[c] * v;
            }
        }
        if let Some((ox, oy, level)) = occ {
            if x >= ox && x < ox + side && y >= oy && y < oy + side {
                px = [level; 3];
            }
        }
        Rgb(px.map(|v| (v + brightness + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8))
    })
}

/// Every image of every class, ordered by class then index.
pub fn generate(spec: &ToySpec) -> Vec<ToyImage> {
    (0..spec.classes)
        .flat_map(|class| {
            (0..spec.per_class).map(move |index| ToyImage {
                class,
                index,
                crop: render(spec, class, index),
            })
        })
        .collect()
}

/// Places a canonical crop into a larger scene under a random similarity
/// transform and reports where the template landmarks ended up, producing an
/// unaligned photo with annotated landmarks.
pub fn embed_in_scene<R: Rng + ?Sized>(
    crop: &RgbImage,
    template: &LandmarkTemplate,
    scene: [u32; 2],
    image_ref: &str,
    rng: &mut R,
) -> (RgbImage, LandmarkSet, SimilarityParams) {
    let scale = rng.random_range(1.2..2.0);
    let theta = rng.random_range(-0.35..0.35);
    let centre = [f64::from(crop.width()) / 2.0, f64::from(crop.height()) / 2.0];
    let p = SimilarityParams::from_scale_rotation(scale, theta, 0.0, 0.0);
    let moved = p.apply(centre);
    let target = [f64::from(scene[0]) / 2.0, f64::from(scene[1]) / 2.0];
    let p = SimilarityParams {
        m_x: target[0] - moved[0],
        m_y: target[1] - moved[1],
        ..p
    };
    let photo = warp_image(crop, &p, scene).expect("positive scale");
    let [l, r, m] = template.target_points().map(|q| p.apply(q));
    let lm = LandmarkSet::new(image_ref, l, r, m).expect("similarity keeps landmarks non-degenerate");
    (photo, lm, p)
}
