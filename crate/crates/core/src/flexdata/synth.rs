//! Seeded synthetic multimodal face data.
//!
//! Every sample draws a face ellipse with random position, size, skin tone,
//! background and illumination. The class signal lives mostly in depth and IR:
//!
//! * live: smooth radial depth bump over the ellipse, warm IR blob at the same
//!   place, clean RGB;
//! * spoof: near-flat tilted depth plane, attenuated IR, RGB with a faint
//!   cool colour cast and additive pixel noise.
//!
//! Depth alone separates the classes almost perfectly; RGB carries a weaker
//! cue that overall brightness and contrast variation largely hide.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::sample::{Label, MultimodalSample, Plane};

/// Shift of the red and blue channels over a spoof face.
const SPOOF_TINT: f32 = 0.09;
/// Per-channel skin jitter on top of a shared tone factor.
const SKIN_JITTER: f32 = 0.03;
const SPOOF_RGB_NOISE: f32 = 0.03;
const LIVE_RGB_NOISE: f32 = 0.01;
const DEPTH_NOISE: f32 = 0.01;
const IR_NOISE: f32 = 0.02;

/// `n` samples alternating live and spoof, ids `synth{seed}-{index}`.
pub fn synth_dataset(n: usize, image_size: usize, seed: u64) -> Vec<MultimodalSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Live } else { Label::Spoof };
            synth_sample(format!("synth{seed}-{i:05}"), label, image_size, &mut rng)
        })
        .collect()
}

fn synth_sample(id: String, label: Label, size: usize, rng: &mut ChaCha8Rng) -> MultimodalSample {
    let s = size as f32;
    let cx = s * (0.5 + rng.gen_range(-0.1..0.1));
    let cy = s * (0.5 + rng.gen_range(-0.1..0.1));
    let ax = s * rng.gen_range(0.25..0.35);
    let ay = s * rng.gen_range(0.30..0.40);
    let r2 = |x: usize, y: usize| {
        let dx = (x as f32 + 0.5 - cx) / ax;
        let dy = (y as f32 + 0.5 - cy) / ay;
        dx * dx + dy * dy
    };

    let gain: f32 = rng.gen_range(0.6..1.0);
    let bg: [f32; 3] = [rng.gen_range(0.05..0.5), rng.gen_range(0.05..0.5), rng.gen_range(0.05..0.5)];
    let tone: f32 = rng.gen_range(0.8..1.15);
    let mut skin = [0.75f32, 0.55, 0.45].map(|c| c * tone);
    for c in &mut skin {
        *c += rng.gen_range(-SKIN_JITTER..SKIN_JITTER);
    }
    let live = label.is_live();
    let tint = if live { [0.0; 3] } else { [-SPOOF_TINT, 0.0, SPOOF_TINT] };
    let rgb_noise = Normal::new(0.0, if live { LIVE_RGB_NOISE } else { SPOOF_RGB_NOISE }).unwrap();
    let mut rgb = Plane::from_fn(3, size, size, |c, y, x| {
        let q = r2(x, y);
        let v = if q <= 1.0 {
            gain * (skin[c] + tint[c]) * (1.0 - 0.25 * q)
        } else {
            gain * bg[c]
        };
        v + rgb_noise.sample(rng)
    });
    rgb.clamp_unit();

    let base: f32 = rng.gen_range(0.2..0.35);
    let depth_noise = Normal::new(0.0, DEPTH_NOISE).unwrap();
    let mut depth = if live {
        let h: f32 = rng.gen_range(0.35..0.6);
        Plane::from_fn(1, size, size, |_, y, x| {
            base + h * (1.0 - r2(x, y)).max(0.0) + depth_noise.sample(rng)
        })
    } else {
        let tilt: f32 = rng.gen_range(-0.1..0.1);
        Plane::from_fn(1, size, size, |_, _, x| {
            base + tilt * (x as f32 / s - 0.5) + depth_noise.sample(rng)
        })
    };
    depth.clamp_unit();

    let amp: f32 = rng.gen_range(0.5..0.75);
    let atten: f32 = if live { 1.0 } else { rng.gen_range(0.25..0.4) };
    let ir_noise = Normal::new(0.0, IR_NOISE).unwrap();
    let mut ir = Plane::from_fn(1, size, size, |_, y, x| {
        0.15 + atten * amp * (-1.5 * r2(x, y)).exp() + ir_noise.sample(rng)
    });
    ir.clamp_unit();

    MultimodalSample {
        id,
        rgb,
        depth: Some(depth),
        ir: Some(ir),
        label,
    }
}
