//! Procedural clean images with exact vessel masks.
//!
//! Each image is a smooth reddish background with a vignette, a bright disc
//! and a tree of dark curvilinear strokes. The mask marks every pixel whose
//! centre lies inside a stroke, so image and mask agree exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, MaskTensor};

pub const MIN_TOY_SIZE: usize = 64;
pub const BACKGROUND: u8 = 0;
pub const VESSEL: u8 = 1;

/// Accepted range of the vessel pixel fraction; draws outside it are redrawn.
const VESSEL_FRACTION: (f64, f64) = (0.03, 0.3);

struct Stroke {
    y: f32,
    x: f32,
    heading: f32,
    width: f32,
    depth: u32,
}

pub fn make_toy_corpus(n: usize, size: usize, seed: u64) -> Result<Vec<(ImageTensor, MaskTensor)>> {
    if n == 0 {
        return Err(Error::Empty("toy corpus size must be at least 1".into()));
    }
    if size < MIN_TOY_SIZE {
        return Err(Error::shape(format!(
            "toy images must be at least {MIN_TOY_SIZE} px, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| toy_pair(size, &mut rng)).collect()
}

fn toy_pair(size: usize, rng: &mut ChaCha8Rng) -> Result<(ImageTensor, MaskTensor)> {
    loop {
        let labels = draw_vessels(size, rng);
        let frac = labels.iter().filter(|l| **l == VESSEL).count() as f64 / labels.len() as f64;
        if frac <= VESSEL_FRACTION.0 || frac >= VESSEL_FRACTION.1 {
            continue;
        }
        let image = paint(size, &labels, rng)?;
        let mask = MaskTensor::from_labels(size, size, 2, &labels)?;
        return Ok((image, mask));
    }
}

fn draw_vessels(size: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let s = size as f32;
    let scale = s / 64.0;
    let mut labels = vec![BACKGROUND; size * size];
    let origin_y = s * rng.random_range(0.35..0.65);
    let origin_x = s * rng.random_range(0.3..0.7);
    let trunks = rng.random_range(5..=8);
    let wiggle = Normal::new(0.0f32, 0.09).expect("valid sigma");

    let mut stack: Vec<Stroke> = (0..trunks)
        .map(|i| Stroke {
            y: origin_y,
            x: origin_x,
            heading: std::f32::consts::TAU * (i as f32 + rng.random_range(0.0..0.8)) / trunks as f32,
            width: rng.random_range(1.8..2.8) * scale,
            depth: 0,
        })
        .collect();

    let step = 0.7f32;
    while let Some(mut st) = stack.pop() {
        let bend: f32 = rng.random_range(-0.02..0.02);
        let max_steps = (2.0 * s / step) as usize;
        for _ in 0..max_steps {
            stamp(&mut labels, size, st.y, st.x, (0.5 * st.width).max(0.6));
            st.heading += bend + wiggle.sample(rng);
            st.y += step * st.heading.sin();
            st.x += step * st.heading.cos();
            st.width = (st.width * 0.996).max(0.9 * scale);
            if st.y < -2.0 || st.x < -2.0 || st.y > s + 2.0 || st.x > s + 2.0 {
                break;
            }
            if st.depth < 2 && rng.random::<f32>() < 0.012 {
                let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
                stack.push(Stroke {
                    y: st.y,
                    x: st.x,
                    heading: st.heading + side * rng.random_range(0.4..0.9),
                    width: st.width * 0.7,
                    depth: st.depth + 1,
                });
            }
        }
    }
    labels
}

fn stamp(labels: &mut [u8], size: usize, cy: f32, cx: f32, r: f32) {
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil().max(0.0) as usize + 1).min(size);
    let x1 = ((cx + r).ceil().max(0.0) as usize + 1).min(size);
    for y in y0..y1 {
        for x in x0..x1 {
            let dy = y as f32 + 0.5 - cy;
            let dx = x as f32 + 0.5 - cx;
            if dy * dy + dx * dx <= r * r {
                labels[y * size + x] = VESSEL;
            }
        }
    }
}

fn paint(size: usize, labels: &[u8], rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    let s = size as f32;
    let base = [
        rng.random_range(0.70..0.85),
        rng.random_range(0.32..0.45),
        rng.random_range(0.12..0.22),
    ];
    let grad_dir = rng.random_range(0.0..std::f32::consts::TAU);
    let grad_amp = rng.random_range(0.03..0.1);
    let disc_y = s * rng.random_range(0.3..0.7);
    let disc_x = s * rng.random_range(0.25..0.75);
    let disc_r = s * rng.random_range(0.06..0.1);
    let darkening = [
        rng.random_range(0.25..0.35),
        rng.random_range(0.45..0.6),
        rng.random_range(0.35..0.5),
    ];
    ImageTensor::from_fn(size, size, |y, x, c| {
        let ny = (y as f32 + 0.5) / s - 0.5;
        let nx = (x as f32 + 0.5) / s - 0.5;
        let vignette = 1.0 - 0.9 * (ny * ny + nx * nx);
        let gradient = grad_amp * (ny * grad_dir.sin() + nx * grad_dir.cos());
        let dd = ((y as f32 + 0.5 - disc_y).powi(2) + (x as f32 + 0.5 - disc_x).powi(2))
            / (disc_r * disc_r);
        let disc = 0.35 * (-dd).exp();
        let mut v = base[c] * vignette + gradient + disc * [0.8, 1.0, 0.7][c];
        if labels[y * size + x] == VESSEL {
            v *= 1.0 - darkening[c];
        }
        v
    })
}
