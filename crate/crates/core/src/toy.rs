//! Procedural videos: smooth colored blobs translating over a gradient
//! background with fresh per-frame texture noise, so every frame differs and
//! any duplicated frame is an exact copy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{arg_err, Result};
use crate::synth::{apply_schedule, plan_schedule, SynthSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorStyle {
    pub blobs: usize,
    /// Pixels per frame.
    pub max_speed: f64,
    pub noise_std: f64,
}

impl Default for AnchorStyle {
    fn default() -> Self {
        Self {
            blobs: 3,
            max_speed: 2.5,
            noise_std: 0.05,
        }
    }
}

struct Blob {
    pos: [f64; 2],
    vel: [f64; 2],
    radius: f64,
    color: [f64; 3],
}

/// `[frames, height, width, 3]` video with values in [0, 1].
pub fn procedural_anchor(frames: usize, height: usize, width: usize, style: &AnchorStyle, seed: u64) -> Result<Tensor> {
    if frames == 0 || height == 0 || width == 0 {
        return Err(arg_err!("empty video geometry {frames}x{height}x{width}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg_a: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.5));
    let bg_b: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.5));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let blobs: Vec<Blob> = (0..style.blobs)
        .map(|_| {
            let speed = rng.random_range(0.5 * style.max_speed..=style.max_speed);
            let dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            Blob {
                pos: [rng.random_range(0.0..height as f64), rng.random_range(0.0..width as f64)],
                vel: [speed * dir.sin(), speed * dir.cos()],
                radius: rng.random_range(0.12..0.25) * height.min(width) as f64,
                color: std::array::from_fn(|_| rng.random_range(0.3..0.6)),
            }
        })
        .collect();
    let noise = Normal::new(0.0, style.noise_std).map_err(|e| arg_err!("noise std: {e}"))?;
    let (hf, wf) = (height as f64, width as f64);
    let mut data = Vec::with_capacity(frames * height * width * 3);
    for t in 0..frames {
        let centers: Vec<[f64; 2]> = blobs
            .iter()
            .map(|b| {
                [
                    (b.pos[0] + b.vel[0] * t as f64).rem_euclid(hf),
                    (b.pos[1] + b.vel[1] * t as f64).rem_euclid(wf),
                ]
            })
            .collect();
        for i in 0..height {
            for j in 0..width {
                let u = ((i as f64 / hf) * dy + (j as f64 / wf) * dx).clamp(-1.0, 1.0) * 0.5 + 0.5;
                let mut px: [f64; 3] = std::array::from_fn(|c| bg_a[c] * (1.0 - u) + bg_b[c] * u);
                for (b, c) in blobs.iter().zip(&centers) {
                    // wrap-around distance keeps motion seamless at the borders
                    let di = (i as f64 - c[0]).abs();
                    let dj = (j as f64 - c[1]).abs();
                    let di = di.min(hf - di);
                    let dj = dj.min(wf - dj);
                    let w = (-(di * di + dj * dj) / (2.0 * b.radius * b.radius)).exp();
                    for ch in 0..3 {
                        px[ch] += w * b.color[ch];
                    }
                }
                for v in px {
                    data.push((v + noise.sample(&mut rng)).clamp(0.0, 1.0));
                }
            }
        }
    }
    Tensor::new(vec![frames, height, width, 3], data)
}

/// `count` anchors with seeds `seed, seed + 1, ...`.
pub fn procedural_anchors(
    count: usize,
    frames: usize,
    height: usize,
    width: usize,
    style: &AnchorStyle,
    seed: u64,
) -> Result<Vec<Tensor>> {
    (0..count)
        .map(|i| procedural_anchor(frames, height, width, style, seed.wrapping_add(i as u64)))
        .collect()
}

/// Stuttered anchors labeled on the 1-5 scale by their drop rate:
/// `y = 5 - 4 * r / max_rate`, with `r` drawn uniformly from `[0, max_rate]`.
pub fn procedural_labeled(
    count: usize,
    frames: usize,
    height: usize,
    width: usize,
    max_rate: f64,
    seed: u64,
) -> Result<Vec<(Tensor, f64)>> {
    if !(max_rate > 0.0 && max_rate < 1.0) {
        return Err(arg_err!("max_rate must lie in (0, 1), got {max_rate}"));
    }
    let anchors = procedural_anchors(count, frames, height, width, &AnchorStyle::default(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    anchors
        .into_iter()
        .enumerate()
        .map(|(i, a)| {
            let r: f64 = rng.random_range(0.0..max_rate);
            let y = 5.0 - 4.0 * r / max_rate;
            let spec = SynthSpec {
                frames,
                drop_rates: vec![r.max(1e-6)],
                intervals: 1.max(frames.min(5)),
                seed: seed.wrapping_add(i as u64),
            };
            let s = plan_schedule(&spec, 1)?;
            Ok((apply_schedule(&a, &s)?, y))
        })
        .collect()
}
