//! Procedural digit renderer producing IDX files.
//!
//! Each sample draws a 5x7 digit glyph through a random affine transform
//! (rotation, scale, translation) with bilinear sampling, random stroke
//! intensity and additive Gaussian noise. Deterministic for a given seed.

use crate::data::{write_idx_images, write_idx_labels};
use crate::error::Result;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const IMG: usize = 28;

const GLYPHS: [[&str; 7]; 10] = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00110", "01000", "10000", "11111"],
    ["01110", "10001", "00001", "00110", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
];

fn glyph_at(digit: usize, row: isize, col: isize) -> f64 {
    if !(0..7).contains(&row) || !(0..5).contains(&col) {
        return 0.0;
    }
    if GLYPHS[digit][row as usize].as_bytes()[col as usize] == b'1' {
        1.0
    } else {
        0.0
    }
}

fn sample_bilinear(digit: usize, u: f64, v: f64) -> f64 {
    let u = u - 0.5;
    let v = v - 0.5;
    let (u0, v0) = (u.floor(), v.floor());
    let (fu, fv) = (u - u0, v - v0);
    let (c, r) = (u0 as isize, v0 as isize);
    (1.0 - fu) * (1.0 - fv) * glyph_at(digit, r, c)
        + fu * (1.0 - fv) * glyph_at(digit, r, c + 1)
        + (1.0 - fu) * fv * glyph_at(digit, r + 1, c)
        + fu * fv * glyph_at(digit, r + 1, c + 1)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Render one digit as raw u8 pixels.
pub fn render_digit(digit: usize, rng: &mut ChaCha8Rng) -> [u8; IMG * IMG] {
    let angle: f64 = rng.random_range(-0.30..0.30);
    let scale = rng.random_range(-0.30..0.18f64).exp();
    let dx: f64 = rng.random_range(-3.5..3.5);
    let dy: f64 = rng.random_range(-3.5..3.5);
    let stroke: f64 = rng.random_range(0.5..1.0);
    let noise: f64 = rng.random_range(0.10..0.24);
    let (cx, cy) = (13.5 + dx, 13.5 + dy);
    let (cos, sin) = (angle.cos(), angle.sin());
    let (su, sv) = (3.0 * scale, 2.9 * scale);
    let mut out = [0u8; IMG * IMG];
    for y in 0..IMG {
        for x in 0..IMG {
            let rx = (x as f64 - cx) * cos + (y as f64 - cy) * sin;
            let ry = -(x as f64 - cx) * sin + (y as f64 - cy) * cos;
            let u = rx / su + 2.5;
            let v = ry / sv + 3.5;
            let mut val = sample_bilinear(digit, u, v) * stroke;
            val += gauss(rng) * noise;
            out[y * IMG + x] = (val.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out
}

/// Render `n` samples drawn uniformly from `classes`.
pub fn render_set(n: usize, seed: u64, classes: &[usize]) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * IMG * IMG);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let digit = classes[rng.random_range(0..classes.len())];
        labels.push(digit as u8);
        pixels.extend_from_slice(&render_digit(digit, &mut rng));
    }
    (pixels, labels)
}

/// Write a train/test pair of IDX file quadruples into `dir` using the
/// standard file names.
pub fn write_synthetic_dataset(dir: &Path, n_train: usize, n_test: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let all: Vec<usize> = (0..10).collect();
    let (tp, tl) = render_set(n_train, seed.wrapping_mul(2).wrapping_add(1), &all);
    write_idx_images(&dir.join("train-images-idx3-ubyte"), &tp, IMG, IMG)?;
    write_idx_labels(&dir.join("train-labels-idx1-ubyte"), &tl)?;
    let (vp, vl) = render_set(n_test, seed.wrapping_mul(2).wrapping_add(2), &all);
    write_idx_images(&dir.join("t10k-images-idx3-ubyte"), &vp, IMG, IMG)?;
    write_idx_labels(&dir.join("t10k-labels-idx1-ubyte"), &vl)?;
    Ok(())
}
