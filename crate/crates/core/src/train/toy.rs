use std::f64::consts::PI;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::Tensor;

/// Procedural image distribution with structure at two scales: a few large
/// soft-edged blobs, each filled with a stripe texture of period 2 to 4 pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    pub size: usize,
    pub channels: usize,
    /// Inclusive range of blob counts per image.
    pub blobs: (usize, usize),
    /// Blob radius range as a fraction of the image size.
    pub radius: (f64, f64),
    /// Candidate texture periods in pixels.
    pub periods: Vec<usize>,
    pub texture_amplitude: f64,
    pub seed: u64,
}

impl ToySpec {
    pub fn new(size: usize, seed: u64) -> Self {
        ToySpec {
            size,
            channels: 3,
            blobs: (1, 3),
            radius: (0.125, 0.25),
            periods: vec![2, 3, 4],
            texture_amplitude: 0.3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.size >= 4
            && self.channels >= 1
            && 1 <= self.blobs.0
            && self.blobs.0 <= self.blobs.1
            && 0.0 < self.radius.0
            && self.radius.0 <= self.radius.1
            && !self.periods.is_empty()
            && self.periods.iter().all(|&p| p >= 2);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad toy data spec {self:?}")))
        }
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    r: f64,
    color: Vec<f64>,
    period: f64,
    dir: (f64, f64),
}

struct Scene {
    background: Vec<f64>,
    blobs: Vec<Blob>,
}

const DIRECTIONS: [(f64, f64); 4] = [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, -1.0)];

fn scene(spec: &ToySpec, index: u64) -> Scene {
    let mut r = rng::stream(spec.seed, &format!("toy/{index}"));
    let s = spec.size as f64;
    let background = (0..spec.channels).map(|_| r.random_range(-0.9..-0.4)).collect();
    let count = r.random_range(spec.blobs.0..=spec.blobs.1);
    let blobs = (0..count)
        .map(|_| {
            let rad = s * r.random_range(spec.radius.0..=spec.radius.1);
            let cy = r.random_range(rad.min(s / 2.0)..=(s - rad).max(s / 2.0));
            let cx = r.random_range(rad.min(s / 2.0)..=(s - rad).max(s / 2.0));
            let color = (0..spec.channels).map(|_| r.random_range(-0.2..0.6)).collect();
            let period = spec.periods[r.random_range(0..spec.periods.len())] as f64;
            let dir = DIRECTIONS[r.random_range(0..DIRECTIONS.len())];
            Blob { cy, cx, r: rad, color, period, dir }
        })
        .collect();
    Scene { background, blobs }
}

/// Coverage of a disc with a one-pixel soft edge.
fn coverage(d: f64, r: f64) -> f64 {
    (r - d + 0.5).clamp(0.0, 1.0)
}

/// Coverage of a two-pixel-wide ring on a circle.
fn ring(d: f64, r: f64) -> f64 {
    (1.5 - (d - r).abs()).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Render {
    Textured,
    Filled,
    Outline,
}

fn render(spec: &ToySpec, sc: &Scene, how: Render, out: &mut [f64]) {
    let n = spec.size;
    for c in 0..spec.channels {
        for y in 0..n {
            for x in 0..n {
                let mut v = sc.background[c];
                for b in &sc.blobs {
                    let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                    let d = ((py - b.cy).powi(2) + (px - b.cx).powi(2)).sqrt();
                    let (a, col) = match how {
                        Render::Outline => (ring(d, b.r), b.color[c]),
                        Render::Filled => (coverage(d, b.r), b.color[c]),
                        Render::Textured => {
                            let phase = 2.0 * PI * (x as f64 * b.dir.0 + y as f64 * b.dir.1) / b.period;
                            (coverage(d, b.r), b.color[c] + spec.texture_amplitude * phase.cos())
                        }
                    };
                    v = a * col + (1.0 - a) * v;
                }
                out[(c * n + y) * n + x] = v.clamp(-1.0, 1.0);
            }
        }
    }
}

fn batch(spec: &ToySpec, start: u64, n: usize, how: Render) -> Result<Tensor> {
    spec.validate()?;
    let per = spec.channels * spec.size * spec.size;
    let mut values = vec![0.0; n * per];
    for (i, img) in values.chunks_mut(per).enumerate() {
        render(spec, &scene(spec, start + i as u64), how, img);
    }
    Tensor::new(&[n, spec.channels, spec.size, spec.size], values)
}

/// Images `start .. start + n` of the textured distribution, as `(n, c, s, s)` in `[-1, 1]`.
///
/// Image `i` depends only on the seed and `i`.
pub fn gen_toy_dataset(spec: &ToySpec, start: u64, n: usize) -> Result<Tensor> {
    batch(spec, start, n, Render::Textured)
}

/// Paired translation domains sharing one scene per index: outlined blobs
/// (`x`) and the same blobs filled (`y`).
pub fn gen_paired_domains(spec: &ToySpec, start: u64, n: usize) -> Result<(Tensor, Tensor)> {
    Ok((batch(spec, start, n, Render::Outline)?, batch(spec, start, n, Render::Filled)?))
}
