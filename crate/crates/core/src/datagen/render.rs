use std::f64::consts::{PI, TAU};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vinil_tensor::Tensor;

use super::{mix_seed, DatasetConfig, Preset, Sample, Split, CHANNELS};
use crate::error::{Error, Result};

const STREAM_INSTANCE: u64 = 1;
const STREAM_VIEW: u64 = 2;
const STREAM_GALLERY: u64 = 3;

/// One shape family per category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Cross,
    Star,
    Ring,
    Bar,
    LShape,
    Diamond,
    Wedge,
}

impl Shape {
    pub const ALL: [Shape; 10] = [
        Shape::Disk,
        Shape::Square,
        Shape::Triangle,
        Shape::Cross,
        Shape::Star,
        Shape::Ring,
        Shape::Bar,
        Shape::LShape,
        Shape::Diamond,
        Shape::Wedge,
    ];

    /// Membership test in the object's unit frame, roughly `[-1, 1]²`.
    fn contains(self, x: f64, y: f64) -> bool {
        let r = x.hypot(y);
        match self {
            Shape::Disk => r <= 0.9,
            Shape::Square => x.abs().max(y.abs()) <= 0.75,
            Shape::Triangle => y >= -0.6 && y <= 0.9 - 1.5 * x.abs(),
            Shape::Cross => (x.abs() <= 0.28 && y.abs() <= 0.9) || (y.abs() <= 0.28 && x.abs() <= 0.9),
            Shape::Star => r <= 0.45 + 0.45 * (0.5 + 0.5 * (5.0 * y.atan2(x)).cos()),
            Shape::Ring => (0.5..=0.92).contains(&r),
            Shape::Bar => x.abs() <= 0.95 && y.abs() <= 0.32,
            Shape::LShape => {
                ((-0.8..=-0.25).contains(&x) && (-0.85..=0.85).contains(&y))
                    || ((-0.8..=0.8).contains(&x) && (0.3..=0.85).contains(&y))
            }
            Shape::Diamond => x.abs() + y.abs() <= 0.95,
            Shape::Wedge => {
                let (sx, sy) = (x + 0.45, y);
                sx.hypot(sy) <= 1.3 && sy.atan2(sx).abs() <= 0.6
            }
        }
    }
}

/// Per-instance appearance parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSpec {
    pub category: usize,
    pub shape: Shape,
    /// Hue in `[0, 1)`.
    pub hue: f64,
    pub saturation: f64,
    pub value: f64,
    /// Object radius as a fraction of the half-width of the image.
    pub size: f64,
    /// Width/height ratio.
    pub aspect: f64,
    pub texture_seed: u64,
    stripe_freq: f64,
    stripe_angle: f64,
    stripe_phase: f64,
}

/// Pose and backdrop of one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewParams {
    pub rotation: f64,
    pub offset: (f64, f64),
    pub scale: f64,
    pub background: usize,
}

struct Background {
    base: [f64; 3],
    gradient_angle: f64,
    gradient_strength: f64,
}

/// Eleven muted backdrops: a solid color plus a low-frequency gradient.
pub const BACKGROUND_POOL: usize = 11;

const BACKGROUNDS: [Background; BACKGROUND_POOL] = [
    Background { base: [0.50, 0.50, 0.50], gradient_angle: 0.0, gradient_strength: 0.10 },
    Background { base: [0.42, 0.45, 0.50], gradient_angle: 1.2, gradient_strength: 0.14 },
    Background { base: [0.55, 0.52, 0.46], gradient_angle: 2.4, gradient_strength: 0.12 },
    Background { base: [0.30, 0.32, 0.30], gradient_angle: 0.6, gradient_strength: 0.10 },
    Background { base: [0.68, 0.66, 0.62], gradient_angle: 3.5, gradient_strength: 0.15 },
    Background { base: [0.45, 0.38, 0.40], gradient_angle: 4.4, gradient_strength: 0.12 },
    Background { base: [0.36, 0.44, 0.40], gradient_angle: 5.3, gradient_strength: 0.16 },
    Background { base: [0.60, 0.58, 0.66], gradient_angle: 1.9, gradient_strength: 0.10 },
    Background { base: [0.25, 0.27, 0.33], gradient_angle: 2.9, gradient_strength: 0.14 },
    Background { base: [0.74, 0.72, 0.70], gradient_angle: 4.0, gradient_strength: 0.12 },
    Background { base: [0.48, 0.42, 0.34], gradient_angle: 5.8, gradient_strength: 0.18 },
];

const HUE_SLOTS: usize = 10;

/// (saturation, value) pairs.
const TONES: [(f64, f64); 4] = [(0.9, 1.0), (0.9, 0.7), (0.5, 1.0), (0.95, 0.45)];

/// Total rotation swept by the turntable preset, centered on the upright pose.
const TURNTABLE_ARC: f64 = PI / 2.0;

/// Backdrops the turntable preset draws from.
const TURNTABLE_BACKGROUNDS: usize = 3;

pub fn instance_spec(seed: u64, category: usize, index_in_category: usize, instances_per_category: usize) -> InstanceSpec {
    let instance_id = category * instances_per_category + index_in_category;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_INSTANCE, instance_id as u64));
    // Colors come from a 10-hue x 4-tone grid. Instance k of category c takes
    // tone k and hue (c + 3k) mod 10, so no two instances of a 10x4 dataset
    // share a cell and siblings differ in both hue and tone.
    let hue_slot = (category + 3 * index_in_category) % HUE_SLOTS;
    let hue = (hue_slot as f64 / HUE_SLOTS as f64 + rng.gen_range(-0.02..0.02)).rem_euclid(1.0);
    let (saturation, value) = TONES[index_in_category % TONES.len()];
    let texture_seed = rng.gen::<u64>();
    let mut tex = ChaCha8Rng::seed_from_u64(texture_seed);
    InstanceSpec {
        category,
        shape: Shape::ALL[category],
        hue,
        saturation,
        value,
        size: rng.gen_range(0.65..0.85),
        aspect: rng.gen_range(0.8..1.25),
        texture_seed,
        stripe_freq: tex.gen_range(2.0..6.0),
        stripe_angle: tex.gen_range(0.0..PI),
        stripe_phase: tex.gen_range(0.0..TAU),
    }
}

fn view_params(preset: Preset, seed: u64, instance_id: usize, view: usize, views: usize) -> ViewParams {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
        seed,
        STREAM_VIEW,
        (instance_id as u64) << 20 | view as u64,
    ));
    match preset {
        Preset::SynthA => ViewParams {
            rotation: TURNTABLE_ARC * (view as f64 / (views - 1) as f64 - 0.5),
            offset: (rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04)),
            scale: 1.0,
            background: rng.gen_range(0..TURNTABLE_BACKGROUNDS),
        },
        Preset::SynthB => ViewParams {
            rotation: rng.gen_range(0.0..TAU),
            offset: (rng.gen_range(-0.22..0.22), rng.gen_range(-0.22..0.22)),
            scale: rng.gen_range(0.85..1.15),
            background: rng.gen_range(0..BACKGROUND_POOL),
        },
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders one `[3, size, size]` view with 2×2 supersampling. Values are
/// quantized to 8-bit levels so the image survives a PPM round trip.
pub fn render(spec: &InstanceSpec, view: &ViewParams, size: usize) -> Tensor {
    const SUB: [f64; 2] = [0.25, 0.75];
    let angle = view.rotation.rem_euclid(TAU);
    let (sin, cos) = angle.sin_cos();
    let color = hsv_to_rgb(spec.hue, spec.saturation, spec.value);
    let bg = &BACKGROUNDS[view.background];
    let (gs, gc) = bg.gradient_angle.sin_cos();
    let (ss, sc) = spec.stripe_angle.sin_cos();
    let radius_x = spec.size * view.scale * spec.aspect.sqrt();
    let radius_y = spec.size * view.scale / spec.aspect.sqrt();

    let plane = size * size;
    let mut data = vec![0.0; CHANNELS * plane];
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0; 3];
            for sy in SUB {
                for sx in SUB {
                    let u = (px as f64 + sx) / size as f64 * 2.0 - 1.0;
                    let v = (py as f64 + sy) / size as f64 * 2.0 - 1.0;
                    let (dx, dy) = (u - view.offset.0, v - view.offset.1);
                    let xr = (cos * dx + sin * dy) / radius_x;
                    let yr = (-sin * dx + cos * dy) / radius_y;
                    let rgb = if spec.shape.contains(xr, yr) {
                        let phase = spec.stripe_freq * PI * (xr * sc + yr * ss) + spec.stripe_phase;
                        let shade = 0.65 + 0.35 * (0.5 + 0.5 * phase.sin());
                        color.map(|c| c * shade)
                    } else {
                        let g = bg.gradient_strength * 0.5 * (u * gc + v * gs);
                        bg.base.map(|c| c + g)
                    };
                    for (a, c) in acc.iter_mut().zip(rgb) {
                        *a += c;
                    }
                }
            }
            for (ch, a) in acc.iter().enumerate() {
                data[ch * plane + py * size + px] = quantize(a / 4.0);
            }
        }
    }
    Tensor::new(vec![CHANNELS, size, size], data).expect("render shape")
}

/// Which of an instance's `views` are held out for the gallery: a uniform
/// draw of `round(fraction · views)` view ids, fixed by `(seed, instance_id)`.
pub(crate) fn gallery_views(seed: u64, instance_id: usize, views: usize, fraction: f64) -> Vec<bool> {
    let count = gallery_count(views, fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_GALLERY, instance_id as u64));
    let mut mask = vec![false; views];
    for i in index::sample(&mut rng, views, count.min(views)) {
        mask[i] = true;
    }
    mask
}

pub(crate) fn gallery_count(views: usize, fraction: f64) -> usize {
    (fraction * views as f64).round() as usize
}

pub(crate) fn validate_gallery_fraction(views: usize, fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Data(format!("gallery_fraction {fraction} must lie in (0, 1)")));
    }
    let count = gallery_count(views, fraction);
    if count == 0 || count >= views {
        return Err(Error::Data(format!(
            "gallery_fraction {fraction} of {views} views leaves {count} gallery views; need between 1 and {}",
            views - 1
        )));
    }
    Ok(())
}

/// Renders `n_categories × instances_per_category × views_per_instance`
/// samples, ordered by (category, instance, view).
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<Sample>> {
    if cfg.n_categories == 0 || cfg.n_categories > Shape::ALL.len() {
        return Err(Error::Data(format!(
            "n_categories must be in 1..={}, got {}",
            Shape::ALL.len(),
            cfg.n_categories
        )));
    }
    if cfg.instances_per_category == 0 {
        return Err(Error::Data("instances_per_category must be positive".into()));
    }
    if cfg.views_per_instance < 2 {
        return Err(Error::Data(format!(
            "views_per_instance must be at least 2, got {}",
            cfg.views_per_instance
        )));
    }
    if cfg.image_size < 4 {
        return Err(Error::Data(format!("image_size must be at least 4, got {}", cfg.image_size)));
    }
    validate_gallery_fraction(cfg.views_per_instance, cfg.gallery_fraction)?;

    let mut samples = Vec::with_capacity(cfg.n_categories * cfg.instances_per_category * cfg.views_per_instance);
    for category in 0..cfg.n_categories {
        for k in 0..cfg.instances_per_category {
            let spec = instance_spec(cfg.seed, category, k, cfg.instances_per_category);
            let instance_id = category * cfg.instances_per_category + k;
            let gallery = gallery_views(cfg.seed, instance_id, cfg.views_per_instance, cfg.gallery_fraction);
            for (view_id, &held_out) in gallery.iter().enumerate() {
                let view = view_params(cfg.preset, cfg.seed, instance_id, view_id, cfg.views_per_instance);
                samples.push(Sample {
                    image: render(&spec, &view, cfg.image_size),
                    category_id: category,
                    instance_id,
                    view_id,
                    split: if held_out { Split::Gallery } else { Split::Train },
                });
            }
        }
    }
    Ok(samples)
}
