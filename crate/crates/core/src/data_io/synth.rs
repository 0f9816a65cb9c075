//! Synthetic image pairs with exact ground-truth flow.
//!
//! A texture is rendered as the second frame; the first frame samples it at
//! `x + flow(x)`, so each frame-1 pixel moves by its flow into frame 2.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::DataConfig;
use crate::types::{FlowField, Image, ValidMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Noise,
    Checker,
    Blobs,
    /// One of the above, chosen per sample.
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Warp {
    Translation,
    Affine,
    Smooth,
    /// One of the above, chosen per sample.
    Mixed,
}

impl FromStr for Pattern {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "noise" => Self::Noise,
            "checker" => Self::Checker,
            "blobs" => Self::Blobs,
            "mixed" => Self::Mixed,
            _ => return Err(format!("unknown pattern `{s}`")),
        })
    }
}

impl FromStr for Warp {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "translation" => Self::Translation,
            "affine" => Self::Affine,
            "smooth" => Self::Smooth,
            "mixed" => Self::Mixed,
            _ => return Err(format!("unknown warp `{s}`")),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub pattern: Pattern,
    pub warp: Warp,
    /// Upper bound on the displacement magnitude, in pixels.
    pub max_displacement: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub image1: Image,
    pub image2: Image,
    pub flow: FlowField,
    pub valid: ValidMask,
}

/// Bilinear sample of channel `c` at `(x, y)`, clamped to the border.
pub fn sample_bilinear(img: &Image, c: usize, x: f32, y: f32) -> f32 {
    let (w, h) = (img.width as f32, img.height as f32);
    let x = x.clamp(0.0, w - 1.0);
    let y = y.clamp(0.0, h - 1.0);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as usize, y0 as usize);
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
    let bot = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Builds a sample from a second frame and a flow: frame 1 reads frame 2 at
/// `x + flow(x)`; pixels whose target leaves the image are invalid.
pub fn sample_from_flow(image2: Image, flow: FlowField) -> FlowSample {
    let (h, w) = (image2.height, image2.width);
    let mut image1 = Image::zeros(h, w);
    let mut valid = ValidMask::all(h, w);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.get(y, x);
            let (tx, ty) = (x as f32 + u, y as f32 + v);
            valid.data[y * w + x] = tx >= 0.0 && ty >= 0.0 && tx <= (w - 1) as f32 && ty <= (h - 1) as f32;
            for c in 0..3 {
                image1.set(c, y, x, sample_bilinear(&image2, c, tx, ty));
            }
        }
    }
    FlowSample { image1, image2, flow, valid }
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Uniform random lattice values in `[lo, hi)` with spacing `cell`,
/// interpolated smoothly to `h x w` at a random sub-cell offset.
fn smooth_grid(rng: &mut impl Rng, h: usize, w: usize, cell: f32, lo: f32, hi: f32) -> Vec<f32> {
    let gh = (h as f32 / cell).ceil() as usize + 2;
    let gw = (w as f32 / cell).ceil() as usize + 2;
    let grid: Vec<f32> = (0..gh * gw).map(|_| rng.random_range(lo..hi)).collect();
    let (oy, ox) = (rng.random::<f32>(), rng.random::<f32>());
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let gy = y as f32 / cell + oy;
        let (y0, ty) = (gy.floor() as usize, smoothstep(gy.fract()));
        for x in 0..w {
            let gx = x as f32 / cell + ox;
            let (x0, tx) = (gx.floor() as usize, smoothstep(gx.fract()));
            let at = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn normalize(plane: &mut [f32]) {
    let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-6);
    for v in plane {
        *v = (*v - lo) / span;
    }
}

/// Multi-octave value noise, independently per channel.
fn noise_texture(rng: &mut impl Rng, h: usize, w: usize) -> Image {
    let mut img = Image::zeros(h, w);
    for c in 0..3 {
        let mut plane = vec![0.0f32; h * w];
        for (cell, amp) in [(24.0, 1.0), (12.0, 0.6), (6.0, 0.4), (3.0, 0.25)] {
            let g = smooth_grid(rng, h, w, cell, -0.5, 0.5);
            for (p, v) in plane.iter_mut().zip(g) {
                *p += amp * v;
            }
        }
        normalize(&mut plane);
        img.data[c * h * w..(c + 1) * h * w].copy_from_slice(&plane);
    }
    img
}

/// Rotated two-colour checkerboard with a noise overlay that breaks its periodicity.
fn checker_texture(rng: &mut impl Rng, h: usize, w: usize) -> Image {
    let size = rng.random_range(6.0f32..16.0);
    let angle = rng.random_range(0.0f32..std::f32::consts::PI);
    let (sa, ca) = angle.sin_cos();
    let colors: [[f32; 3]; 2] = [[rng.random(), rng.random(), rng.random()], [rng.random(), rng.random(), rng.random()]];
    let overlay = noise_texture(rng, h, w);
    let mut img = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (rx, ry) = (ca * x as f32 - sa * y as f32, sa * x as f32 + ca * y as f32);
            let k = ((rx / size).floor() + (ry / size).floor()).rem_euclid(2.0) as usize;
            for c in 0..3 {
                img.set(c, y, x, 0.65 * colors[k][c] + 0.35 * overlay.get(c, y, x));
            }
        }
    }
    img
}

/// Soft-edged coloured discs over a noise background.
fn blobs_texture(rng: &mut impl Rng, h: usize, w: usize) -> Image {
    let mut img = noise_texture(rng, h, w);
    let count = rng.random_range(10..20);
    for _ in 0..count {
        let cx = rng.random_range(0.0..w as f32);
        let cy = rng.random_range(0.0..h as f32);
        let r = rng.random_range(3.0f32..12.0);
        let color: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        for y in 0..h {
            for x in 0..w {
                let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
                let a = (r + 0.5 - d).clamp(0.0, 1.0);
                if a > 0.0 {
                    for c in 0..3 {
                        let v = img.get(c, y, x);
                        img.set(c, y, x, v * (1.0 - a) + color[c] * a);
                    }
                }
            }
        }
    }
    img
}

/// Rescales a field so its largest vector has length `peak`.
fn scale_to(mut flow: FlowField, peak: f32) -> FlowField {
    let m = flow.max_magnitude();
    let k = if m > 0.0 { peak / m } else { 0.0 };
    for v in &mut flow.data {
        *v *= k;
    }
    flow
}

fn warp_field(warp: Warp, rng: &mut impl Rng, h: usize, w: usize, peak: f32) -> FlowField {
    match warp {
        Warp::Translation => {
            let a = rng.random_range(0.0f32..std::f32::consts::TAU);
            FlowField::constant(h, w, peak * a.cos(), peak * a.sin())
        }
        Warp::Affine => {
            let m: [f32; 6] = std::array::from_fn(|_| rng.random_range(-1.0f32..1.0));
            let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
            let s = 1.0 / w.max(h) as f32;
            let field = FlowField::from_fn(h, w, |y, x| {
                let (dx, dy) = ((x as f32 - cx) * s, (y as f32 - cy) * s);
                (m[0] + m[1] * dx + m[2] * dy, m[3] + m[4] * dx + m[5] * dy)
            });
            scale_to(field, peak)
        }
        Warp::Smooth => {
            let cell = rng.random_range(24.0f32..48.0);
            let u = smooth_grid(rng, h, w, cell, -1.0, 1.0);
            let v = smooth_grid(rng, h, w, cell, -1.0, 1.0);
            let mut data = u;
            data.extend(v);
            scale_to(FlowField { height: h, width: w, data }, peak)
        }
        Warp::Mixed => unreachable!("resolved before use"),
    }
}

/// Deterministic sample of size `h x w`.
pub fn generate(spec: &SyntheticSpec, h: usize, w: usize) -> FlowSample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pattern = match spec.pattern {
        Pattern::Mixed => [Pattern::Noise, Pattern::Checker, Pattern::Blobs][rng.random_range(0..3)],
        p => p,
    };
    let warp = match spec.warp {
        Warp::Mixed => [Warp::Translation, Warp::Affine, Warp::Smooth][rng.random_range(0..3)],
        w => w,
    };
    let texture = match pattern {
        Pattern::Noise => noise_texture(&mut rng, h, w),
        Pattern::Checker => checker_texture(&mut rng, h, w),
        Pattern::Blobs => blobs_texture(&mut rng, h, w),
        Pattern::Mixed => unreachable!(),
    };
    let peak = (spec.max_displacement * rng.random_range(0.5..1.0)) as f32;
    let flow = if spec.max_displacement > 0.0 { warp_field(warp, &mut rng, h, w, peak) } else { FlowField::zeros(h, w) };
    sample_from_flow(texture, flow)
}

/// Texture only, for building samples from hand-made flows.
pub fn texture(pattern: Pattern, seed: u64, h: usize, w: usize) -> Image {
    let spec = SyntheticSpec { pattern, warp: Warp::Translation, max_displacement: 0.0, seed };
    generate(&spec, h, w).image2
}

/// Seed of sample `index` of a dataset with seed `data_seed`.
pub fn sample_seed(data_seed: u64, index: usize) -> u64 {
    data_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9).wrapping_add(1)
}

/// The `index`-th sample described by a data configuration.
pub fn dataset_sample(cfg: &DataConfig, index: usize) -> Result<FlowSample, String> {
    let spec = SyntheticSpec {
        pattern: cfg.pattern.parse()?,
        warp: cfg.warp.parse()?,
        max_displacement: cfg.max_displacement,
        seed: sample_seed(cfg.data_seed, index),
    };
    Ok(generate(&spec, cfg.height, cfg.width))
}

/// `frames - 1` consecutive pairs of one sequence moving with a fixed flow:
/// the last frame is the texture and each earlier frame reads its successor
/// at `x + flow(x)`.
pub fn sequence(cfg: &DataConfig, index: usize, frames: usize) -> Result<Vec<FlowSample>, String> {
    if frames < 2 {
        return Err(format!("a sequence needs at least 2 frames, got {frames}"));
    }
    let last = dataset_sample(cfg, index)?;
    let mut pairs = vec![last];
    while pairs.len() < frames - 1 {
        let next = &pairs[0];
        let earlier = sample_from_flow(next.image1.clone(), next.flow.clone());
        pairs.insert(0, earlier);
    }
    Ok(pairs)
}
