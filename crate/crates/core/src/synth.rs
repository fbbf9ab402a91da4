//! Deterministic synthetic aerial-style scenes.
//!
//! Each scene is a smooth terrain colour field overlaid with field parcels,
//! a few straight roads, small building blocks and low-amplitude correlated
//! texture. Used as a small desk-scale corpus where no real imagery is at hand.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::io::image::{quantize_to_8bit, write_image, ImageIoError};
use crate::tensor::Tensor;

const PALETTE: [[f32; 3]; 6] = [
    [0.32, 0.42, 0.22],
    [0.45, 0.50, 0.28],
    [0.55, 0.48, 0.35],
    [0.25, 0.33, 0.20],
    [0.62, 0.58, 0.45],
    [0.38, 0.36, 0.30],
];

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<[f32; 3]>,
}

impl Canvas {
    fn blend(&mut self, r: usize, c: usize, colour: [f32; 3], alpha: f32) {
        let px = &mut self.rgb[r * self.w + c];
        for k in 0..3 {
            px[k] = px[k] * (1.0 - alpha) + colour[k] * alpha;
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, colour: [f32; 3], amount: f32) -> [f32; 3] {
    let shift = rng.random_range(-amount..amount);
    colour.map(|v| v + shift + rng.random_range(-amount..amount) * 0.5)
}

fn terrain(canvas: &mut Canvas, rng: &mut ChaCha8Rng) {
    let base = PALETTE[rng.random_range(0..PALETTE.len())];
    let waves: Vec<(f32, f32, f32, [f32; 3])> = (0..4)
        .map(|_| {
            let fx = rng.random_range(0.5..3.0) / canvas.w as f32;
            let fy = rng.random_range(0.5..3.0) / canvas.h as f32;
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            let amp = [0.0; 3].map(|_: f32| rng.random_range(-0.06..0.06));
            (fx, fy, phase, amp)
        })
        .collect();
    for r in 0..canvas.h {
        for c in 0..canvas.w {
            let mut px = base;
            for &(fx, fy, phase, amp) in &waves {
                let s = (std::f32::consts::TAU * (fx * c as f32 + fy * r as f32) + phase).sin();
                for k in 0..3 {
                    px[k] += amp[k] * s;
                }
            }
            canvas.rgb[r * canvas.w + c] = px;
        }
    }
}

fn parcels(canvas: &mut Canvas, rng: &mut ChaCha8Rng) {
    let n = rng.random_range(3..9);
    for _ in 0..n {
        let ph = rng.random_range(canvas.h / 8..canvas.h / 2 + 1);
        let pw = rng.random_range(canvas.w / 8..canvas.w / 2 + 1);
        let top = rng.random_range(0..canvas.h - ph + 1);
        let left = rng.random_range(0..canvas.w - pw + 1);
        let pick = PALETTE[rng.random_range(0..PALETTE.len())];
        let colour = jitter(rng, pick, 0.05);
        // Crop rows: a gentle stripe pattern along one axis.
        let stripe = rng.random_range(3.0..8.0f32);
        let vertical = rng.random_bool(0.5);
        for r in top..top + ph {
            for c in left..left + pw {
                let t = if vertical { c } else { r } as f32;
                let mut px = colour;
                let s = 0.02 * (std::f32::consts::TAU * t / stripe).sin();
                px.iter_mut().for_each(|v| *v += s);
                canvas.blend(r, c, px, 0.85);
            }
        }
    }
}

fn roads(canvas: &mut Canvas, rng: &mut ChaCha8Rng) {
    let n = rng.random_range(1..4);
    for _ in 0..n {
        let colour = jitter(rng, [0.58, 0.57, 0.55], 0.04);
        let half_width = rng.random_range(0.6..1.8f32);
        // Line through a random point with a random direction.
        let (pr, pc) = (
            rng.random_range(0.0..canvas.h as f32),
            rng.random_range(0.0..canvas.w as f32),
        );
        let angle = rng.random_range(0.0..std::f32::consts::PI);
        let (nr, nc) = (angle.cos(), -angle.sin());
        for r in 0..canvas.h {
            for c in 0..canvas.w {
                let d = ((r as f32 - pr) * nr + (c as f32 - pc) * nc).abs();
                let alpha = (half_width + 0.5 - d).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    canvas.blend(r, c, colour, alpha);
                }
            }
        }
    }
}

fn buildings(canvas: &mut Canvas, rng: &mut ChaCha8Rng) {
    let clusters = rng.random_range(0..3);
    for _ in 0..clusters {
        let (cr, cc) = (rng.random_range(0..canvas.h), rng.random_range(0..canvas.w));
        for _ in 0..rng.random_range(2..7) {
            let bh = rng.random_range(2..6);
            let bw = rng.random_range(2..6);
            let top = (cr + rng.random_range(0..12)).min(canvas.h - bh);
            let left = (cc + rng.random_range(0..12)).min(canvas.w - bw);
            let roof = jitter(rng, [0.75, 0.70, 0.66], 0.08);
            for r in top..top + bh {
                for c in left..left + bw {
                    canvas.blend(r, c, roof, 1.0);
                }
            }
            // Shadow on the lower-right edge.
            for c in left..(left + bw + 1).min(canvas.w) {
                if top + bh < canvas.h {
                    canvas.blend(top + bh, c, [0.1, 0.1, 0.1], 0.4);
                }
            }
        }
    }
}

/// Bilinear value noise on a 4-pixel lattice, amplitude about 0.015.
fn texture(canvas: &mut Canvas, rng: &mut ChaCha8Rng) {
    const CELL: usize = 4;
    let (gh, gw) = (canvas.h / CELL + 2, canvas.w / CELL + 2);
    let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.random_range(-0.015..0.015)).collect();
    for r in 0..canvas.h {
        for c in 0..canvas.w {
            let (gr, gc) = (r / CELL, c / CELL);
            let (fr, fc) = ((r % CELL) as f32 / CELL as f32, (c % CELL) as f32 / CELL as f32);
            let at = |i: usize, j: usize| lattice[i * gw + j];
            let v = at(gr, gc) * (1.0 - fr) * (1.0 - fc)
                + at(gr, gc + 1) * (1.0 - fr) * fc
                + at(gr + 1, gc) * fr * (1.0 - fc)
                + at(gr + 1, gc + 1) * fr * fc;
            canvas.rgb[r * canvas.w + c].iter_mut().for_each(|p| *p += v);
        }
    }
}

/// One `3 x height x width` scene on the 8-bit grid; a pure function of its
/// arguments.
pub fn scene(seed: u64, height: usize, width: usize) -> Tensor<f32> {
    assert!(height >= 8 && width >= 8, "scene must be at least 8x8");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut canvas = Canvas {
        h: height,
        w: width,
        rgb: vec![[0.0; 3]; height * width],
    };
    terrain(&mut canvas, &mut rng);
    parcels(&mut canvas, &mut rng);
    roads(&mut canvas, &mut rng);
    buildings(&mut canvas, &mut rng);
    texture(&mut canvas, &mut rng);
    let plane = height * width;
    let t = Tensor::from_fn(vec![3, height, width], |i| canvas.rgb[i % plane][i / plane].clamp(0.0, 1.0));
    quantize_to_8bit(&t)
}

/// `count` scenes; scene `i` uses seed `seed * 1_000_003 + i`.
pub fn corpus(seed: u64, count: usize, height: usize, width: usize) -> Vec<Tensor<f32>> {
    (0..count)
        .map(|i| scene(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), height, width))
        .collect()
}

/// Writes [`corpus`] as `scene_0000.png`, ... into `dir`.
pub fn write_corpus(
    dir: &Path,
    seed: u64,
    count: usize,
    height: usize,
    width: usize,
) -> Result<Vec<PathBuf>, ImageIoError> {
    std::fs::create_dir_all(dir).map_err(|source| ImageIoError::Write {
        path: dir.to_path_buf(),
        source,
    })?;
    corpus(seed, count, height, width)
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let path = dir.join(format!("scene_{i:04}.png"));
            write_image(&path, img).map(|_| path)
        })
        .collect()
}
