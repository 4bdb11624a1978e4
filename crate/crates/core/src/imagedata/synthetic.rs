//! Procedural stand-in dataset.
//!
//! Each image is a smooth colored background with soft clutter and one
//! foreground shape; the shape kind is the class label (`index % 10`).
//! Images depend only on `(seed, split, index)`, so any prefix of a split is
//! stable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DatasetId, DatasetSplit, RawImages, Split};

pub const NUM_CLASSES: usize = 10;

fn image_seed(seed: u64, split: Split, index: usize) -> u64 {
    let s = match split {
        Split::Train => 0x7472_6169,
        Split::Test => 0x7465_7374,
        Split::Unlabeled => 0x756e_6c62,
    };
    let mut z = seed ^ s ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn synthetic_images(split: Split, count: usize, side: usize, seed: u64) -> DatasetSplit {
    let mut data = Vec::with_capacity(count * side * side * 3);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % NUM_CLASSES;
        data.extend(render(class, side, image_seed(seed, split, i)));
        labels.push(class as u8);
    }
    DatasetSplit {
        name: DatasetId::Synthetic,
        split,
        images: RawImages::new(count, side, side, 3, data).expect("sizes agree"),
        labels: Some(labels),
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    color: [f64; 3],
    alpha: f64,
}

struct Shape {
    class: usize,
    cx: f64,
    cy: f64,
    scale: f64,
    cos: f64,
    sin: f64,
    color: [f64; 3],
}

impl Shape {
    fn covers(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.scale;
        let dy = (y - self.cy) / self.scale;
        let u = self.cos * dx + self.sin * dy;
        let v = -self.sin * dx + self.cos * dy;
        let r2 = u * u + v * v;
        let box_ = u.abs().max(v.abs());
        match self.class {
            0 => r2 < 1.0,
            1 => box_ < 0.8,
            2 => v > -0.7 && v < 0.8 && u.abs() < (0.8 - v) * 0.6,
            3 => r2 < 1.0 && r2 > 0.36,
            4 => box_ < 0.9 && ((v + 1.0) * 3.0).floor() as i64 % 2 == 0,
            5 => box_ < 0.9 && ((u + 1.0) * 3.0).floor() as i64 % 2 == 0,
            6 => (u.abs() < 0.3 && v.abs() < 0.95) || (v.abs() < 0.3 && u.abs() < 0.95),
            7 => u.abs() + v.abs() < 1.0,
            8 => box_ < 0.9 && (((u + 1.0) * 2.0).floor() + ((v + 1.0) * 2.0).floor()) as i64 % 2 == 0,
            _ => u * u + 4.0 * v * v < 1.0,
        }
    }
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn render(class: usize, side: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c0 = color(&mut rng);
    let c1 = color(&mut rng);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (angle.cos(), angle.sin());
    let freq = rng.gen_range(2.0..8.0);
    let tex_angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let tex_amp = rng.gen_range(0.02..0.1);
    let blobs: Vec<Blob> = (0..rng.gen_range(1..4))
        .map(|_| Blob {
            cx: rng.gen(),
            cy: rng.gen(),
            rx: rng.gen_range(0.08..0.3),
            ry: rng.gen_range(0.08..0.3),
            color: color(&mut rng),
            alpha: rng.gen_range(0.3..0.8),
        })
        .collect();
    let bg_mean = [0, 1, 2].map(|c| 0.5 * (c0[c] + c1[c]));
    let mut fg = color(&mut rng);
    let dist: f64 = (0..3).map(|c| (fg[c] - bg_mean[c]).abs()).sum();
    if dist < 0.6 {
        fg = fg.map(|v| 1.0 - v);
    }
    let rot: f64 = rng.gen_range(-0.3..0.3);
    let shape = Shape {
        class,
        cx: rng.gen_range(0.35..0.65),
        cy: rng.gen_range(0.35..0.65),
        scale: rng.gen_range(0.22..0.38),
        cos: rot.cos(),
        sin: rot.sin(),
        color: fg,
    };
    let noise = Normal::new(0.0, 0.015).unwrap();
    let inv = 1.0 / side as f64;
    let mut out = Vec::with_capacity(side * side * 3);
    for py in 0..side {
        for px in 0..side {
            let mut acc = [0.0f64; 3];
            for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let x = (px as f64 + ox) * inv;
                let y = (py as f64 + oy) * inv;
                let t = (0.5 + 0.7 * ((x - 0.5) * gx + (y - 0.5) * gy)).clamp(0.0, 1.0);
                let tex = tex_amp
                    * (freq * (x * tex_angle.cos() + y * tex_angle.sin()) * std::f64::consts::TAU
                        + phase)
                        .sin();
                let mut c = [0, 1, 2].map(|k| c0[k] + (c1[k] - c0[k]) * t + tex);
                for b in &blobs {
                    let d = ((x - b.cx) / b.rx).powi(2) + ((y - b.cy) / b.ry).powi(2);
                    if d < 1.0 {
                        let a = b.alpha * (1.0 - d);
                        for k in 0..3 {
                            c[k] += (b.color[k] - c[k]) * a;
                        }
                    }
                }
                if shape.covers(x, y) {
                    c = shape.color;
                }
                for k in 0..3 {
                    acc[k] += c[k] * 0.25;
                }
            }
            for v in acc {
                let v = v + noise.sample(&mut rng);
                out.push(super::quantize(v.clamp(0.0, 1.0)));
            }
        }
    }
    out
}
