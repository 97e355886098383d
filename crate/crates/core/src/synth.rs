//! Deterministic synthetic stand-in for the WSI pipeline: pseudo-slide
//! generation with planted signal tiles, grid tiling with a foreground
//! filter, augmentation, and per-epoch tile sampling.
//!
//! A bag is positive for a class iff its tile set contains at least one tile
//! carrying that class's planted stripe texture. Class textures differ by
//! stripe period (and nominal orientation), so flips and right-angle
//! rotations never turn one class's texture into another's.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Mean-intensity threshold above which a tile counts as background.
pub const FOREGROUND_THRESHOLD: f32 = 0.92;

/// Stable 64-bit FNV-1a hash for seeding from string ids.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Mix several seed components into one stream seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e3779b97f4a7c15;
    for &p in parts {
        h ^= p.wrapping_add(0x9e3779b97f4a7c15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        h = h.wrapping_mul(0xff51afd7ed558ccd);
    }
    h
}

/// Gaussian tensor via Box-Muller (used for weight init).
pub fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, sigma: f64) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    while data.len() < numel {
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        data.push(T::from_f64(r * c * sigma));
        if data.len() < numel {
            data.push(T::from_f64(r * s * sigma));
        }
    }
    Tensor::new(shape, data).expect("normal_tensor shape")
}

/// Planted stripe texture of one class: intensity modulation along a fixed
/// direction with the given spatial period (pixels at 1x magnification).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TextureSpec {
    pub period: f64,
    pub orientation_deg: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SlideParams {
    /// Logical slide side length in pixels at 1x.
    pub slide_size: usize,
    pub tile_size: usize,
    pub channels: usize,
    /// Fraction of foreground tiles that carry signal in a positive slide.
    pub signal_fraction: f64,
    /// Fraction of tiles rendered near-white to exercise the filter.
    pub white_fraction: f64,
    pub stripe_amplitude: f64,
    pub background_mean: f64,
    /// Amplitude of the smoothed low-frequency background field.
    pub background_wobble: f64,
    /// Per-tile iid noise amplitude range (uniform noise, matched variance).
    pub noise_min: f64,
    pub noise_max: f64,
}

impl Default for SlideParams {
    fn default() -> Self {
        SlideParams {
            slide_size: 1024,
            tile_size: 32,
            channels: 3,
            signal_fraction: 0.10,
            white_fraction: 0.05,
            stripe_amplitude: 0.09,
            background_mean: 0.55,
            background_wobble: 0.08,
            noise_min: 0.05,
            noise_max: 0.12,
        }
    }
}

impl SlideParams {
    pub fn validate(&self) -> Result<()> {
        if self.slide_size == 0 || self.tile_size == 0 || self.slide_size % self.tile_size != 0 {
            return Err(Error::Config(format!(
                "slide_size {} must be a positive multiple of tile_size {}",
                self.slide_size, self.tile_size
            )));
        }
        if !(self.signal_fraction > 0.0 && self.signal_fraction <= 1.0) {
            return Err(Error::Config("signal_fraction must be in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.white_fraction) {
            return Err(Error::Config("white_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One synthetic slide: the rendered image plus per-class ground truth.
#[derive(Clone, Debug)]
pub struct PseudoSlide {
    /// [R, R, C] with R = slide_size * magnification, values in [0,1].
    pub image: Tensor<f32>,
    pub labels: Vec<u8>,
    /// Per class: grid-flattened (row-major) signal mask.
    pub signal_mask: Vec<Vec<bool>>,
    /// 1 or 2; 2x slides are tiled at 2*tile_size and area-downscaled.
    pub magnification: u8,
    /// Tiles per side.
    pub grid: usize,
    pub tile_size: usize,
}

/// One bag of tiles with its label vector and grid coordinates.
#[derive(Clone, Debug)]
pub struct TileBag {
    pub bag_id: String,
    /// [K, tile_size, tile_size, C], values in [0,1].
    pub tiles: Tensor<f32>,
    pub labels: Vec<u8>,
    /// (row, col) grid position of each tile, when known.
    pub coords: Option<Vec<(u32, u32)>>,
}

impl TileBag {
    pub fn k(&self) -> usize {
        self.tiles.shape()[0]
    }
}

pub fn generate_slide(
    seed: u64,
    labels: &[u8],
    textures: &[TextureSpec],
    params: &SlideParams,
    magnification: u8,
) -> Result<PseudoSlide> {
    params.validate()?;
    if labels.len() != textures.len() || labels.is_empty() {
        return Err(Error::Config(
            "labels and class textures must have equal nonzero length".into(),
        ));
    }
    if !(magnification == 1 || magnification == 2) {
        return Err(Error::Config("magnification must be 1 or 2".into()));
    }
    let mag = magnification as usize;
    let r = params.slide_size * mag;
    let c = params.channels;
    let grid = params.slide_size / params.tile_size;
    let cells = grid * grid;
    let cell_px = params.tile_size * mag;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // 1. per-channel tint
    let tint: Vec<f32> = (0..c).map(|_| rng.random_range(-0.02..0.02)).collect();

    // 2. coarse low-frequency field, bilinearly interpolated
    let coarse_cell = 16 * mag;
    let cg = r / coarse_cell + 2;
    let coarse: Vec<f32> = (0..cg * cg).map(|_| rng.random_range(-1.0..1.0)).collect();

    // 3. white cells (exact count)
    let n_white = ((cells as f64) * params.white_fraction).floor() as usize;
    let mut cell_order: Vec<usize> = (0..cells).collect();
    cell_order.shuffle(&mut rng);
    let mut is_white = vec![false; cells];
    for &ci in cell_order.iter().take(n_white) {
        is_white[ci] = true;
    }

    // 4. signal cells per positive class, disjoint across classes
    let mut fg_pool: Vec<usize> = cell_order[n_white..].to_vec();
    let n_fg = fg_pool.len();
    let mut signal_mask: Vec<Vec<bool>> = vec![vec![false; cells]; labels.len()];
    let mut cell_class: Vec<Option<usize>> = vec![None; cells];
    for (cls, &lab) in labels.iter().enumerate() {
        if lab == 0 {
            continue;
        }
        let want = (((n_fg as f64) * params.signal_fraction).floor() as usize).max(1);
        if want > fg_pool.len() {
            return Err(Error::Config(format!(
                "class {cls}: not enough foreground tiles for disjoint signal textures \
                 ({want} wanted, {} left)",
                fg_pool.len()
            )));
        }
        for _ in 0..want {
            let ci = fg_pool.pop().expect("pool checked above");
            signal_mask[cls][ci] = true;
            cell_class[ci] = Some(cls);
        }
    }

    // 5. per-cell noise amplitude
    let sigmas: Vec<f32> = (0..cells)
        .map(|_| rng.random_range(params.noise_min as f32..params.noise_max as f32))
        .collect();

    // 6. render
    let mut image = Tensor::zeros(vec![r, r, c]);
    let data = image.data_mut();
    let wobble = params.background_wobble as f32;
    let mean = params.background_mean as f32;
    let amp = params.stripe_amplitude as f32;
    for y in 0..r {
        let cy = y / coarse_cell;
        let fy = (y % coarse_cell) as f32 / coarse_cell as f32;
        let gy = y / cell_px;
        for x in 0..r {
            let cell = gy * grid + x / cell_px;
            let base = if is_white[cell] {
                0.96 + 0.01 * (rng.random::<f32>() - 0.5)
            } else {
                let cx = x / coarse_cell;
                let fx = (x % coarse_cell) as f32 / coarse_cell as f32;
                let c00 = coarse[cy * cg + cx];
                let c01 = coarse[cy * cg + cx + 1];
                let c10 = coarse[(cy + 1) * cg + cx];
                let c11 = coarse[(cy + 1) * cg + cx + 1];
                let smooth = c00 * (1.0 - fy) * (1.0 - fx)
                    + c01 * (1.0 - fy) * fx
                    + c10 * fy * (1.0 - fx)
                    + c11 * fy * fx;
                // uniform noise with the cell's amplitude (matched variance)
                let s3 = sigmas[cell] * 1.732_050_8;
                let noise = (rng.random::<f32>() * 2.0 - 1.0) * s3;
                let stripe = match cell_class[cell] {
                    Some(cls) => {
                        // tile-local coordinates and a fixed phase: every
                        // signal tile of a class carries the same pattern,
                        // keeping the planted texture linearly detectable
                        let t = &textures[cls];
                        let period = (t.period * mag as f64) as f32;
                        let th = (t.orientation_deg.to_radians()) as f32;
                        let lx = (x % cell_px) as f32;
                        let ly = (y % cell_px) as f32;
                        let u = (th.cos() * lx + th.sin() * ly) * std::f32::consts::TAU / period;
                        amp * u.sin()
                    }
                    None => 0.0,
                };
                mean + wobble * smooth + noise + stripe
            };
            let px = (y * r + x) * c;
            for (ch, t) in tint.iter().enumerate() {
                data[px + ch] = (base + t).clamp(0.0, 1.0);
            }
        }
    }

    Ok(PseudoSlide {
        image,
        labels: labels.to_vec(),
        signal_mask,
        magnification,
        grid,
        tile_size: params.tile_size,
    })
}

/// 2x2 area downscale of a [2t, 2t, C] tile into [t, t, C].
pub fn area_downscale_2x(tile: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = tile.shape();
    if s.len() != 3 || s[0] != s[1] || s[0] % 2 != 0 {
        return Err(Error::BadShape {
            op: "area_downscale_2x",
            shape: s.to_vec(),
            reason: "expected square even-sided [H, H, C]".into(),
        });
    }
    let (big, c) = (s[0], s[2]);
    let t = big / 2;
    let mut out = Tensor::zeros(vec![t, t, c]);
    for y in 0..t {
        for x in 0..t {
            for ch in 0..c {
                let i = |yy: usize, xx: usize| tile.data()[(yy * big + xx) * c + ch];
                out.data_mut()[(y * t + x) * c + ch] =
                    0.25 * (i(2 * y, 2 * x) + i(2 * y, 2 * x + 1) + i(2 * y + 1, 2 * x) + i(2 * y + 1, 2 * x + 1));
            }
        }
    }
    Ok(out)
}

/// Grid-tile a slide, dropping near-white tiles (mean intensity above the
/// foreground threshold). 2x slides are tiled at twice the tile size and
/// area-downscaled.
pub fn tile_slide(slide: &PseudoSlide, tile_size: usize) -> Result<TileBag> {
    let mag = slide.magnification as usize;
    let r = slide.image.shape()[0];
    let c = slide.image.shape()[2];
    let logical = r / mag;
    if tile_size == 0 || logical % tile_size != 0 {
        return Err(Error::Config(format!(
            "slide size {logical} not divisible by tile_size {tile_size}"
        )));
    }
    let grid = logical / tile_size;
    let src_ts = tile_size * mag;
    let mut tiles: Vec<f32> = Vec::new();
    let mut coords: Vec<(u32, u32)> = Vec::new();
    let extract = |gy: usize, gx: usize| -> Tensor<f32> {
        let mut t = Tensor::zeros(vec![src_ts, src_ts, c]);
        for y in 0..src_ts {
            let src = ((gy * src_ts + y) * r + gx * src_ts) * c;
            let dst = y * src_ts * c;
            t.data_mut()[dst..dst + src_ts * c]
                .copy_from_slice(&slide.image.data()[src..src + src_ts * c]);
        }
        t
    };
    for gy in 0..grid {
        for gx in 0..grid {
            let raw = extract(gy, gx);
            let tile = if mag == 2 {
                area_downscale_2x(&raw)?
            } else {
                raw
            };
            let mean: f32 =
                tile.data().iter().copied().sum::<f32>() / tile.numel() as f32;
            if mean > FOREGROUND_THRESHOLD {
                continue;
            }
            tiles.extend_from_slice(tile.data());
            coords.push((gy as u32, gx as u32));
        }
    }
    if coords.is_empty() {
        return Err(Error::NoForeground);
    }
    let k = coords.len();
    Ok(TileBag {
        bag_id: String::new(),
        tiles: Tensor::new(vec![k, tile_size, tile_size, c], tiles)?,
        labels: slide.labels.clone(),
        coords: Some(coords),
    })
}

/// Uniform sample of min(n, K) distinct tile indices; n >= K returns all
/// tiles in original order.
pub fn sample_bag_tiles(k: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n >= k {
        return (0..k).collect();
    }
    let mut idx: Vec<usize> = (0..k).collect();
    // partial Fisher-Yates: first n entries are a uniform sample
    for i in 0..n {
        let j = rng.random_range(i..k);
        idx.swap(i, j);
    }
    idx.truncate(n);
    idx
}

/// Gather tile rows of a bag tensor by index.
pub fn gather_tiles(tiles: &Tensor<f32>, indices: &[usize]) -> Tensor<f32> {
    let s = tiles.shape();
    let stride: usize = s[1..].iter().product();
    let mut out = Tensor::zeros(vec![indices.len(), s[1], s[2], s[3]]);
    for (row, &i) in indices.iter().enumerate() {
        out.data_mut()[row * stride..(row + 1) * stride]
            .copy_from_slice(&tiles.data()[i * stride..(i + 1) * stride]);
    }
    out
}

// ── Augmentation ────────────────────────────────────────────────────────

fn flip_horizontal(tile: &mut Tensor<f32>) {
    let s = tile.shape().to_vec();
    let (h, w, c) = (s[0], s[1], s[2]);
    let data = tile.data_mut();
    for y in 0..h {
        for x in 0..w / 2 {
            for ch in 0..c {
                data.swap((y * w + x) * c + ch, (y * w + (w - 1 - x)) * c + ch);
            }
        }
    }
}

/// Rotate a square tile by quarter turns counterclockwise.
fn rotate_quarters(tile: &Tensor<f32>, quarters: usize) -> Tensor<f32> {
    let s = tile.shape().to_vec();
    let (n, c) = (s[0], s[2]);
    let mut out = Tensor::zeros(s);
    for y in 0..n {
        for x in 0..n {
            let (sy, sx) = match quarters % 4 {
                0 => (y, x),
                1 => (x, n - 1 - y),
                2 => (n - 1 - y, n - 1 - x),
                _ => (n - 1 - x, y),
            };
            for ch in 0..c {
                out.data_mut()[(y * n + x) * c + ch] = tile.data()[(sy * n + sx) * c + ch];
            }
        }
    }
    out
}

/// 3x3 Gaussian blur (σ=1.0, truncated, normalized), replicated borders.
fn gaussian_blur_3x3(tile: &Tensor<f32>) -> Tensor<f32> {
    let s = tile.shape().to_vec();
    let (n, c) = (s[0], s[2]);
    // exp(0), exp(-1/2) weights, normalized
    let w1 = 1.0f32;
    let w0 = (-0.5f32).exp();
    let norm = w1 + 2.0 * w0;
    let k = [w0 / norm, w1 / norm, w0 / norm];
    let clampi = |v: isize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = Tensor::zeros(s.clone());
    for y in 0..n {
        for x in 0..n {
            for ch in 0..c {
                let mut acc = 0.0f32;
                for (di, kv) in k.iter().enumerate() {
                    let sx = clampi(x as isize + di as isize - 1);
                    acc += kv * tile.data()[(y * n + sx) * c + ch];
                }
                tmp.data_mut()[(y * n + x) * c + ch] = acc;
            }
        }
    }
    let mut out = Tensor::zeros(s);
    for y in 0..n {
        for x in 0..n {
            for ch in 0..c {
                let mut acc = 0.0f32;
                for (di, kv) in k.iter().enumerate() {
                    let sy = clampi(y as isize + di as isize - 1);
                    acc += kv * tmp.data()[(sy * n + x) * c + ch];
                }
                out.data_mut()[(y * n + x) * c + ch] = acc.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Training augmentation: horizontal flip (p=0.5), rotation from
/// {0, 90, 180, 270} degrees, Gaussian blur (p=0.25). Applied independently.
pub fn augment(tile: &Tensor<f32>, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let mut out = tile.clone();
    if rng.random::<f64>() < 0.5 {
        flip_horizontal(&mut out);
    }
    let quarters = rng.random_range(0..4u32) as usize;
    if quarters != 0 {
        out = rotate_quarters(&out, quarters);
    }
    if rng.random::<f64>() < 0.25 {
        out = gaussian_blur_3x3(&out);
    }
    out
}

/// Rotate a tile by 180 degrees (exposed for involution tests).
pub fn rotate_180(tile: &Tensor<f32>) -> Tensor<f32> {
    rotate_quarters(tile, 2)
}

pub fn flip_h(tile: &Tensor<f32>) -> Tensor<f32> {
    let mut t = tile.clone();
    flip_horizontal(&mut t);
    t
}

pub fn blur(tile: &Tensor<f32>) -> Tensor<f32> {
    gaussian_blur_3x3(tile)
}

// ── Brute-force signal detector (learnability oracle) ───────────────────

/// Quadrature matched-filter response of one tile against a stripe texture,
/// maximized over the flip/right-angle-rotation orbit of its orientation.
pub fn stripe_filter_response(tile: &Tensor<f32>, texture: &TextureSpec) -> f64 {
    let s = tile.shape();
    let (n, c) = (s[0], s[2]);
    // grayscale, mean removed
    let mut gray = vec![0.0f64; n * n];
    for y in 0..n {
        for x in 0..n {
            let mut v = 0.0f64;
            for ch in 0..c {
                v += tile.data()[(y * n + x) * c + ch] as f64;
            }
            gray[y * n + x] = v / c as f64;
        }
    }
    let mean = gray.iter().sum::<f64>() / gray.len() as f64;
    for g in gray.iter_mut() {
        *g -= mean;
    }
    let base = texture.orientation_deg.to_radians();
    let mut best = 0.0f64;
    for k in 0..4 {
        for flip in [1.0f64, -1.0] {
            let th = flip * base + (k as f64) * std::f64::consts::FRAC_PI_2;
            let (mut cs, mut sn) = (0.0f64, 0.0f64);
            let w = std::f64::consts::TAU / texture.period;
            for y in 0..n {
                for x in 0..n {
                    let u = w * (th.cos() * x as f64 + th.sin() * y as f64);
                    cs += gray[y * n + x] * u.cos();
                    sn += gray[y * n + x] * u.sin();
                }
            }
            let mag = (cs * cs + sn * sn).sqrt() / (n * n) as f64;
            best = best.max(mag);
        }
    }
    best
}

/// Bag-level detector score: maximum per-tile filter response.
pub fn detector_bag_score(tiles: &Tensor<f32>, texture: &TextureSpec) -> f64 {
    let k = tiles.shape()[0];
    let stride: usize = tiles.shape()[1..].iter().product();
    let sub_shape: Vec<usize> = tiles.shape()[1..].to_vec();
    let mut best = 0.0f64;
    for i in 0..k {
        let t = Tensor::new(
            sub_shape.clone(),
            tiles.data()[i * stride..(i + 1) * stride].to_vec(),
        )
        .expect("tile slice");
        best = best.max(stripe_filter_response(&t, texture));
    }
    best
}

// ── Dataset assembly ────────────────────────────────────────────────────

use crate::data::{write_bag, write_manifest, write_truth, BagRecord, Dataset, Split, TruthRecord};
use rayon::prelude::*;
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub prevalence: f64,
    pub texture: TextureSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub classes: Vec<ClassSpec>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Fraction of slides generated at 2x and downscaled during tiling.
    pub mag2x_fraction: f64,
    pub slide: SlideParams,
}

impl DatasetSpec {
    /// Binary task: one planted texture, balanced labels.
    pub fn binary_default() -> Self {
        DatasetSpec {
            classes: vec![ClassSpec {
                name: "signal".into(),
                prevalence: 0.5,
                texture: TextureSpec {
                    period: 4.0,
                    orientation_deg: 45.0,
                },
            }],
            n_train: 200,
            n_val: 25,
            n_test: 25,
            mag2x_fraction: 0.3,
            slide: SlideParams::default(),
        }
    }

    /// Four-mutation multi-label task with the reference prevalences.
    /// Textures differ by stripe period so right-angle rotations never remap
    /// one class onto another.
    pub fn multilabel_default() -> Self {
        let tex = |period: f64, deg: f64| TextureSpec {
            period,
            orientation_deg: deg,
        };
        DatasetSpec {
            classes: vec![
                ClassSpec {
                    name: "EGFR".into(),
                    prevalence: 0.26,
                    texture: tex(3.0, 0.0),
                },
                ClassSpec {
                    name: "KRAS".into(),
                    prevalence: 0.27,
                    texture: tex(4.0, 45.0),
                },
                ClassSpec {
                    name: "MET".into(),
                    prevalence: 0.04,
                    texture: tex(6.0, 90.0),
                },
                ClassSpec {
                    name: "ALK".into(),
                    prevalence: 0.03,
                    texture: tex(10.0, 135.0),
                },
            ],
            n_train: 300,
            n_val: 100,
            n_test: 100,
            mag2x_fraction: 0.3,
            slide: SlideParams {
                slide_size: 384,
                signal_fraction: 0.15,
                ..SlideParams::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.slide.validate()?;
        if self.classes.is_empty() {
            return Err(Error::Config("at least one class required".into()));
        }
        for c in &self.classes {
            if !(c.prevalence > 0.0 && c.prevalence < 1.0) {
                return Err(Error::Config(format!(
                    "class {}: prevalence must be in (0,1)",
                    c.name
                )));
            }
        }
        for (split, n) in [
            ("train", self.n_train),
            ("val", self.n_val),
            ("test", self.n_test),
        ] {
            for c in &self.classes {
                let pos = (c.prevalence * n as f64).floor() as usize;
                if pos == 0 || pos >= n {
                    return Err(Error::Config(format!(
                        "{split} split of {n} slides too small to stratify class {}",
                        c.name
                    )));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.mag2x_fraction) {
            return Err(Error::Config("mag2x_fraction must be in [0,1]".into()));
        }
        Ok(())
    }
}

struct SlideDescriptor {
    split: Split,
    index: usize,
    labels: Vec<u8>,
    magnification: u8,
    seed: u64,
}

/// Build one split's slide descriptors with exact per-class positive counts
/// (floor rule) and a label-balanced 2x allocation.
fn split_descriptors(
    spec: &DatasetSpec,
    split: Split,
    n: usize,
    seed: u64,
) -> Vec<SlideDescriptor> {
    let nc = spec.classes.len();
    let split_id = match split {
        Split::Train => 0u64,
        Split::Val => 1,
        Split::Test => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xa551, split_id]));
    let mut labels = vec![vec![0u8; nc]; n];
    for (cls, c) in spec.classes.iter().enumerate() {
        let pos = (c.prevalence * n as f64).floor() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for &i in order.iter().take(pos) {
            labels[i][cls] = 1;
        }
    }
    // 2x assignment balanced within label groups (by full label vector)
    let mut magnification = vec![1u8; n];
    let mut groups: std::collections::BTreeMap<Vec<u8>, Vec<usize>> = Default::default();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l.clone()).or_default().push(i);
    }
    for members in groups.values() {
        let mut order = members.clone();
        order.shuffle(&mut rng);
        let n2 = ((members.len() as f64) * spec.mag2x_fraction).round() as usize;
        for &i in order.iter().take(n2) {
            magnification[i] = 2;
        }
    }
    (0..n)
        .map(|index| SlideDescriptor {
            split,
            index,
            labels: labels[index].clone(),
            magnification: magnification[index],
            seed: mix_seed(&[seed, split_id, index as u64]),
        })
        .collect()
}

/// Generate the full dataset on disk: manifest, per-bag binary files with
/// coordinate sidecars, and the signal-tile ground-truth file.
pub fn make_dataset(spec: &DatasetSpec, seed: u64, out_dir: &Path) -> Result<Dataset> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir.join("bags"))?;
    let textures: Vec<TextureSpec> = spec.classes.iter().map(|c| c.texture.clone()).collect();
    let mut descriptors = Vec::new();
    descriptors.extend(split_descriptors(spec, Split::Train, spec.n_train, seed));
    descriptors.extend(split_descriptors(spec, Split::Val, spec.n_val, seed));
    descriptors.extend(split_descriptors(spec, Split::Test, spec.n_test, seed));

    let results: Vec<Result<(BagRecord, TruthRecord)>> = descriptors
        .par_iter()
        .map(|d| {
            let slide = generate_slide(d.seed, &d.labels, &textures, &spec.slide, d.magnification)?;
            let mut bag = tile_slide(&slide, spec.slide.tile_size)?;
            let bag_id = format!("{}_{:04}", d.split.as_str(), d.index);
            bag.bag_id = bag_id.clone();
            let rel = format!("bags/{bag_id}.tpfm");
            write_bag(&out_dir.join(&rel), &bag)?;
            // signal coordinates restricted to tiles that survived filtering
            let kept: std::collections::HashSet<(u32, u32)> =
                bag.coords.as_ref().unwrap().iter().copied().collect();
            let grid = slide.grid as u32;
            let signal_coords: Vec<Vec<(u32, u32)>> = slide
                .signal_mask
                .iter()
                .map(|mask| {
                    mask.iter()
                        .enumerate()
                        .filter(|(_, &m)| m)
                        .map(|(ci, _)| (ci as u32 / grid, ci as u32 % grid))
                        .filter(|xy| kept.contains(xy))
                        .collect()
                })
                .collect();
            let record = BagRecord {
                bag_id: bag_id.clone(),
                split: d.split,
                labels: d.labels.clone(),
                magnification: d.magnification,
                path: rel,
                k: bag.k(),
                tile_size: spec.slide.tile_size,
                channels: spec.slide.channels,
            };
            Ok((record, TruthRecord {
                bag_id,
                signal_coords,
            }))
        })
        .collect();

    let mut records = Vec::with_capacity(results.len());
    let mut truth = Vec::with_capacity(results.len());
    for r in results {
        let (rec, tr) = r?;
        records.push(rec);
        truth.push(tr);
    }
    write_manifest(out_dir, &records)?;
    write_truth(out_dir, &truth)?;
    Ok(Dataset {
        root: out_dir.to_path_buf(),
        records,
    })
}

/// Per-split label and magnification counts, for audits and CLI output.
pub fn dataset_summary(records: &[BagRecord]) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let nc = records.first().map(|r| r.labels.len()).unwrap_or(0);
    for split in [Split::Train, Split::Val, Split::Test] {
        let rows: Vec<&BagRecord> = records.iter().filter(|r| r.split == split).collect();
        if rows.is_empty() {
            continue;
        }
        let n2 = rows.iter().filter(|r| r.magnification == 2).count();
        let pos: Vec<usize> = (0..nc)
            .map(|c| rows.iter().filter(|r| r.labels[c] == 1).count())
            .collect();
        let _ = writeln!(
            out,
            "{}: {} bags ({} at 2x), positives per class: {:?}",
            split.as_str(),
            rows.len(),
            n2,
            pos
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params() -> SlideParams {
        SlideParams {
            slide_size: 128,
            tile_size: 32,
            ..SlideParams::default()
        }
    }

    fn one_texture() -> Vec<TextureSpec> {
        vec![TextureSpec {
            period: 4.0,
            orientation_deg: 45.0,
        }]
    }

    #[test]
    fn negative_slide_has_empty_mask() {
        let s = generate_slide(1, &[0], &one_texture(), &small_params(), 1).unwrap();
        assert!(s.signal_mask[0].iter().all(|&m| !m));
    }

    #[test]
    fn signal_count_follows_floor_rule_min_one() {
        let params = small_params(); // 16 cells
        let s = generate_slide(2, &[1], &one_texture(), &params, 1).unwrap();
        let n_white = ((16 as f64) * params.white_fraction).floor() as usize;
        let n_fg = 16 - n_white;
        let expect = (((n_fg as f64) * params.signal_fraction).floor() as usize).max(1);
        let got = s.signal_mask[0].iter().filter(|&&m| m).count();
        assert_eq!(got, expect);
        assert!(got >= 1);
    }

    #[test]
    fn generation_deterministic_bitwise() {
        let a = generate_slide(3, &[1], &one_texture(), &small_params(), 1).unwrap();
        let b = generate_slide(3, &[1], &one_texture(), &small_params(), 1).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.signal_mask, b.signal_mask);
        let c = generate_slide(4, &[1], &one_texture(), &small_params(), 1).unwrap();
        assert_ne!(a.image.data(), c.image.data());
    }

    #[test]
    fn multilabel_disjoint_or_rejected() {
        let params = SlideParams {
            slide_size: 128,
            tile_size: 32,
            signal_fraction: 0.4, // 2 classes * floor(0.4*fg) exceeds fg/2 but fits
            ..SlideParams::default()
        };
        let textures = vec![
            TextureSpec { period: 3.0, orientation_deg: 0.0 },
            TextureSpec { period: 6.0, orientation_deg: 90.0 },
        ];
        let s = generate_slide(5, &[1, 1], &textures, &params, 1).unwrap();
        for i in 0..s.signal_mask[0].len() {
            assert!(!(s.signal_mask[0][i] && s.signal_mask[1][i]), "overlap at {i}");
        }
        // an infeasible fraction is rejected
        let bad = SlideParams {
            signal_fraction: 0.9,
            ..params
        };
        assert!(generate_slide(5, &[1, 1], &textures, &bad, 1).is_err());
    }

    #[test]
    fn tiling_counts_and_filter() {
        let params = SlideParams {
            slide_size: 128,
            tile_size: 32,
            white_fraction: 0.25, // 4 of 16 tiles white
            ..SlideParams::default()
        };
        let s = generate_slide(6, &[0], &one_texture(), &params, 1).unwrap();
        let bag = tile_slide(&s, 32).unwrap();
        assert_eq!(bag.k(), 12);
        let coords = bag.coords.as_ref().unwrap();
        let unique: std::collections::HashSet<_> = coords.iter().collect();
        assert_eq!(unique.len(), coords.len());
        for &v in bag.tiles.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn all_white_slide_rejected() {
        let params = small_params();
        let mut s = generate_slide(7, &[0], &one_texture(), &params, 1).unwrap();
        for v in s.image.data_mut() {
            *v = 0.99;
        }
        assert!(matches!(tile_slide(&s, 32), Err(Error::NoForeground)));
    }

    #[test]
    fn indivisible_tile_size_rejected() {
        let s = generate_slide(8, &[0], &one_texture(), &small_params(), 1).unwrap();
        assert!(tile_slide(&s, 48).is_err());
    }

    #[test]
    fn mag2x_downscale_equivalence() {
        // a 2x slide whose content is the nearest-neighbor upsample of a 1x
        // slide tiles to identical per-tile means under area downscaling
        let params = small_params();
        let one = generate_slide(9, &[1], &one_texture(), &params, 1).unwrap();
        let r = one.image.shape()[0];
        let c = one.image.shape()[2];
        let mut up = Tensor::zeros(vec![2 * r, 2 * r, c]);
        for y in 0..2 * r {
            for x in 0..2 * r {
                for ch in 0..c {
                    up.data_mut()[(y * 2 * r + x) * c + ch] =
                        one.image.data()[((y / 2) * r + (x / 2)) * c + ch];
                }
            }
        }
        let two = PseudoSlide {
            image: up,
            labels: one.labels.clone(),
            signal_mask: one.signal_mask.clone(),
            magnification: 2,
            grid: one.grid,
            tile_size: one.tile_size,
        };
        let bag1 = tile_slide(&one, 32).unwrap();
        let bag2 = tile_slide(&two, 32).unwrap();
        assert_eq!(bag1.k(), bag2.k());
        let stride: usize = bag1.tiles.shape()[1..].iter().product();
        for i in 0..bag1.k() {
            let m1: f32 = bag1.tiles.data()[i * stride..(i + 1) * stride].iter().sum::<f32>()
                / stride as f32;
            let m2: f32 = bag2.tiles.data()[i * stride..(i + 1) * stride].iter().sum::<f32>()
                / stride as f32;
            assert!((m1 - m2).abs() < 1e-6, "tile {i}: {m1} vs {m2}");
        }
    }

    #[test]
    fn native_2x_generation_tiles_consistently() {
        let params = small_params();
        let s = generate_slide(10, &[1], &one_texture(), &params, 2).unwrap();
        assert_eq!(s.image.shape()[0], 256);
        let bag = tile_slide(&s, 32).unwrap();
        assert_eq!(bag.tiles.shape()[1], 32);
        assert!(bag.k() >= 1);
    }

    #[test]
    fn sampling_boundary_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_bag_tiles(4, 10, &mut rng), vec![0, 1, 2, 3]);
        assert_eq!(sample_bag_tiles(4, 4, &mut rng), vec![0, 1, 2, 3]);
        let one = sample_bag_tiles(4, 1, &mut rng);
        assert_eq!(one.len(), 1);
        assert!(one[0] < 4);
        let three = sample_bag_tiles(10, 3, &mut rng);
        let unique: std::collections::HashSet<_> = three.iter().collect();
        assert_eq!(unique.len(), 3);
    }

    #[test]
    fn sampling_is_uniform() {
        // 10000 draws of n=1 from K=4: each index expected 2500 ± 150
        let mut counts = [0usize; 4];
        for draw in 0..10000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[77, draw]));
            let idx = sample_bag_tiles(4, 1, &mut rng)[0];
            counts[idx] += 1;
        }
        for &c in &counts {
            assert!(
                (c as i64 - 2500).abs() <= 150,
                "frequencies out of the 3-sigma band: {counts:?}"
            );
        }
    }

    #[test]
    fn augment_involutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tile = normal_tensor::<f32>(&mut rng, vec![16, 16, 3], 1.0).map(|v| v.clamp(0.0, 1.0));
        let r2 = rotate_180(&rotate_180(&tile));
        assert_eq!(tile.data(), r2.data());
        let f2 = flip_h(&flip_h(&tile));
        assert_eq!(tile.data(), f2.data());
    }

    #[test]
    fn blur_preserves_constant_tiles() {
        let tile = Tensor::full(vec![16, 16, 3], 0.42f32);
        let b = blur(&tile);
        for &v in b.data() {
            assert!((v - 0.42).abs() < 1e-7);
        }
    }

    #[test]
    fn augment_preserves_range_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let tile = normal_tensor::<f32>(&mut rng, vec![32, 32, 3], 0.3).map(|v| (v + 0.5).clamp(0.0, 1.0));
        for seed in 0..20 {
            let mut arng = ChaCha8Rng::seed_from_u64(seed);
            let out = augment(&tile, &mut arng);
            assert_eq!(out.shape(), tile.shape());
            for &v in out.data() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn detector_separates_signal_from_background() {
        // learnability oracle: max-tile matched-filter response gives AUC 1.0
        let params = SlideParams {
            slide_size: 256,
            tile_size: 32,
            ..SlideParams::default()
        };
        let texture = one_texture();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for i in 0..12u64 {
            let lab = (i % 2) as u8;
            let slide = generate_slide(100 + i, &[lab], &texture, &params, 1).unwrap();
            let bag = tile_slide(&slide, 32).unwrap();
            scores.push(detector_bag_score(&bag.tiles, &texture[0]));
            labels.push(lab);
        }
        let auc = crate::metrics::roc_auc(&scores, &labels).unwrap();
        assert_eq!(auc, 1.0, "scores {scores:?}");
    }

    #[test]
    fn augmented_signal_still_detected() {
        // flips/rotations keep the planted texture detectable by the
        // orbit-maximized filter
        let params = SlideParams {
            slide_size: 256,
            tile_size: 32,
            ..SlideParams::default()
        };
        let texture = one_texture();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10u64 {
            let lab = (i % 2) as u8;
            let slide = generate_slide(200 + i, &[lab], &texture, &params, 1).unwrap();
            let bag = tile_slide(&slide, 32).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(300 + i);
            let aug = crate::trainer::augment_batch(&bag.tiles, &mut rng);
            scores.push(detector_bag_score(&aug, &texture[0]));
            labels.push(lab);
        }
        let auc = crate::metrics::roc_auc(&scores, &labels).unwrap();
        assert!(auc >= 0.95, "augmented detector AUC {auc}: {scores:?}");
    }
}
