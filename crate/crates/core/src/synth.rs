//! Deterministic synthesis of atomic and compositional degradations.
//!
//! Images are `[3, h, w]` tensors in `[0, 1]`. All arithmetic is `f64` with
//! `libm` transcendental functions so outputs are reproducible across
//! platforms.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::degradation::{DegradationSpec, DegradationVector, Severity, TaskConfig};
use crate::rng::{normal, rng_from, uniform, DetRng};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub type Image = Tensor<f64>;

fn check_image(img: &Image) -> Result<(usize, usize, usize)> {
    let s = img.shape();
    if s.len() != 3 || s[0] == 0 || s[1] == 0 || s[2] == 0 {
        return Err(Error::Shape(format!("expected [c, h, w], got {:?}", s)));
    }
    if !img.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
        return Err(Error::Invalid("image values must be finite and within [0, 1]".into()));
    }
    Ok((s[0], s[1], s[2]))
}

#[inline]
fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Applies one factor. Randomness (streak placement, noise) comes from `seed`.
pub fn apply_degradation(img: &Image, spec: &DegradationSpec, seed: u64) -> Result<Image> {
    spec.severity.validate()?;
    let (c, h, w) = check_image(img)?;
    let mut rng = rng_from(seed, &[spec.factor().index() as u64]);
    let out = match spec.severity {
        Severity::Rain { density, length, angle } => rain(img, c, h, w, density, length, angle, &mut rng),
        Severity::Snow { density, size } => snow(img, c, h, w, density, size, &mut rng),
        Severity::Haze { transmission, airlight } => {
            img.map(|v| clamp01(v * transmission + airlight * (1.0 - transmission)))
        }
        Severity::LowLight { gain } => {
            let e = 1.0 + 0.5 * (1.0 - gain);
            img.map(|v| clamp01(gain * libm::pow(v, e)))
        }
        Severity::OverExposure { gain } => img.map(|v| clamp01(gain * v)),
        Severity::Blur { sigma } => gaussian_blur(img, c, h, w, sigma),
        Severity::Noise { sigma } => {
            if sigma == 0.0 {
                img.clone()
            } else {
                Tensor::from_vec(img.shape(), img.data().iter().map(|&v| clamp01(v + sigma * normal(&mut rng))).collect())
            }
        }
        Severity::Artifact { quality } => block_dct_quantize(img, c, h, w, quality),
    };
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn rain(img: &Image, c: usize, h: usize, w: usize, density: f64, length: f64, angle: f64, rng: &mut DetRng) -> Image {
    let count = libm::round(density * (h * w) as f64) as usize;
    let mut layer = vec![0.0f64; h * w];
    let theta = angle.to_radians();
    let (dx, dy) = (libm::sin(theta), libm::cos(theta));
    for _ in 0..count {
        let x0 = uniform(rng, -0.25 * w as f64, 1.25 * w as f64);
        let y0 = uniform(rng, -0.25 * h as f64, h as f64);
        let len = length * uniform(rng, 0.7, 1.3);
        let strength = uniform(rng, 0.35, 0.75);
        let steps = libm::ceil(len * 2.0) as usize + 1;
        for s in 0..steps {
            let t = s as f64 * 0.5;
            let (x, y) = (x0 + dx * t, y0 + dy * t);
            let (xi, yi) = (libm::round(x) as isize, libm::round(y) as isize);
            if xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h {
                let p = &mut layer[yi as usize * w + xi as usize];
                *p = p.max(strength);
            }
        }
    }
    let mut out = img.clone();
    for ch in 0..c {
        for (o, l) in out.data_mut()[ch * h * w..(ch + 1) * h * w].iter_mut().zip(&layer) {
            *o = clamp01(*o + l);
        }
    }
    out
}

fn snow(img: &Image, c: usize, h: usize, w: usize, density: f64, size: f64, rng: &mut DetRng) -> Image {
    let count = libm::round(density * (h * w) as f64) as usize;
    let mut alpha = vec![0.0f64; h * w];
    for _ in 0..count {
        let cx = uniform(rng, 0.0, w as f64);
        let cy = uniform(rng, 0.0, h as f64);
        let r = size * uniform(rng, 0.6, 1.4);
        let opacity = uniform(rng, 0.6, 1.0);
        let reach = libm::ceil(r + 1.0) as isize;
        for yy in (cy as isize - reach)..=(cy as isize + reach) {
            for xx in (cx as isize - reach)..=(cx as isize + reach) {
                if xx < 0 || yy < 0 || xx as usize >= w || yy as usize >= h {
                    continue;
                }
                let d = libm::hypot(xx as f64 + 0.5 - cx, yy as f64 + 0.5 - cy);
                let cover = (r + 0.5 - d).clamp(0.0, 1.0) * opacity;
                let a = &mut alpha[yy as usize * w + xx as usize];
                *a = a.max(cover);
            }
        }
    }
    let mut out = img.clone();
    for ch in 0..c {
        for (o, a) in out.data_mut()[ch * h * w..(ch + 1) * h * w].iter_mut().zip(&alpha) {
            *o = clamp01(*o * (1.0 - a) + a);
        }
    }
    out
}

/// Half-sample symmetric index (`d c b a | a b c d | d c b a`).
pub fn symmetric_index(p: isize, n: usize) -> usize {
    let n = n as isize;
    let m = p.rem_euclid(2 * n);
    (if m >= n { 2 * n - 1 - m } else { m }) as usize
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = libm::ceil(3.0 * sigma).max(1.0) as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma))).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with half-sample symmetric padding, which keeps
/// the operator symmetric and therefore preserves the pixel sum.
pub fn gaussian_blur(img: &Image, c: usize, h: usize, w: usize, sigma: f64) -> Image {
    if sigma == 0.0 {
        return img.clone();
    }
    let k = gaussian_taps(sigma);
    let r = (k.len() / 2) as isize;
    let src = img.data();
    let mut tmp = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let row = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            for x in 0..w {
                let mut s = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    s += kv * row[symmetric_index(x as isize + t as isize - r, w)];
                }
                tmp[(ch * h + y) * w + x] = s;
            }
        }
    }
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    s += kv * tmp[(ch * h + symmetric_index(y as isize + t as isize - r, h)) * w + x];
                }
                out[(ch * h + y) * w + x] = clamp01(s);
            }
        }
    }
    Tensor::from_vec(img.shape(), out)
}

const JPEG_LUMA: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16., 24., 40., 57., 69., 56., 14.,
    17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109., 103., 77., 24., 35., 55., 64., 81., 104., 113., 92., 49.,
    64., 78., 87., 103., 121., 120., 101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Quantization table for a quality factor, using the usual IJG scaling.
pub fn quant_table(quality: f64) -> [f64; 64] {
    let q = quality.clamp(1.0, 100.0);
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut t = [0.0; 64];
    for (o, b) in t.iter_mut().zip(JPEG_LUMA) {
        *o = libm::floor((b * scale + 50.0) / 100.0).max(1.0);
    }
    t
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let a = if u == 0 { libm::sqrt(1.0 / 8.0) } else { libm::sqrt(2.0 / 8.0) };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * libm::cos((2 * x + 1) as f64 * u as f64 * core::f64::consts::PI / 16.0);
        }
    }
    b
}

/// 8x8 block DCT quantization of each channel on the 0..255 scale.
/// Partial border blocks are extended by edge replication.
pub fn block_dct_quantize(img: &Image, c: usize, h: usize, w: usize, quality: f64) -> Image {
    let q = quant_table(quality);
    let b = dct_basis();
    let mut out = img.clone();
    let src = img.data();
    let mut blk = [[0.0f64; 8]; 8];
    let mut tmp = [[0.0f64; 8]; 8];
    for ch in 0..c {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for (y, row) in blk.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        let yy = (by + y).min(h - 1);
                        let xx = (bx + x).min(w - 1);
                        *v = src[(ch * h + yy) * w + xx] * 255.0 - 128.0;
                    }
                }
                // forward: C = B X B^T
                for u in 0..8 {
                    for x in 0..8 {
                        tmp[u][x] = (0..8).map(|y| b[u][y] * blk[y][x]).sum();
                    }
                }
                for u in 0..8 {
                    for v in 0..8 {
                        let coef: f64 = (0..8).map(|x| tmp[u][x] * b[v][x]).sum();
                        let qq = q[u * 8 + v];
                        blk[u][v] = libm::round(coef / qq) * qq;
                    }
                }
                // inverse: X = B^T C B
                for y in 0..8 {
                    for v in 0..8 {
                        tmp[y][v] = (0..8).map(|u| b[u][y] * blk[u][v]).sum();
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        if by + y < h && bx + x < w {
                            let val: f64 = (0..8).map(|v| tmp[y][v] * b[v][x]).sum();
                            out.data_mut()[(ch * h + by + y) * w + bx + x] = clamp01((val + 128.0) / 255.0);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Applies explicit specs in canonical factor order.
pub fn compose_specs(img: &Image, specs: &[DegradationSpec], seed: u64) -> Result<Image> {
    check_image(img)?;
    let mut sorted = specs.to_vec();
    sorted.sort_by_key(|s| s.factor());
    let mut cur = img.clone();
    for (i, s) in sorted.iter().enumerate() {
        cur = apply_degradation(&cur, s, crate::rng::derive_seed(seed, &[i as u64]))?;
    }
    Ok(cur)
}

/// Samples severities for `cfg` from `seed` and applies them.
pub fn sample_and_compose(img: &Image, cfg: &TaskConfig, seed: u64) -> Result<(Image, DegradationVector, Vec<DegradationSpec>)> {
    let mut rng = rng_from(seed, &[0x5e7e_41c7]);
    let specs = cfg.sample_specs(&mut rng);
    let out = compose_specs(img, &specs, seed)?;
    Ok((out, cfg.label, specs))
}

/// Degrades `img` with `cfg`; the returned label is `cfg.label`.
pub fn compose(img: &Image, cfg: &TaskConfig, seed: u64) -> Result<(Image, DegradationVector)> {
    let (out, label, _) = sample_and_compose(img, cfg, seed)?;
    Ok((out, label))
}

/// Crop of `[c, h, w]` at `(y0, x0)`.
pub fn crop(img: &Image, y0: usize, x0: usize, ch: usize, cw: usize) -> Image {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    assert!(y0 + ch <= h && x0 + cw <= w);
    let mut out = Vec::with_capacity(c * ch * cw);
    for k in 0..c {
        for y in y0..y0 + ch {
            let off = (k * h + y) * w + x0;
            out.extend_from_slice(&img.data()[off..off + cw]);
        }
    }
    Tensor::from_vec(&[c, ch, cw], out)
}

/// Window origin shared by all views of one scene.
pub fn view_window(h: usize, w: usize, crop_size: usize, scene_id: u64, seed: u64) -> Result<(usize, usize)> {
    if crop_size > h || crop_size > w || crop_size == 0 {
        return Err(Error::Shape(format!("scene {h}x{w} smaller than crop {crop_size}")));
    }
    let mut rng = rng_from(seed, &[scene_id, 0xa11e]);
    let y0 = rng.gen_range(0..=h - crop_size);
    let x0 = rng.gen_range(0..=w - crop_size);
    Ok((y0, x0))
}

/// Degrades the scene with every config and crops all outputs with one window.
///
/// Degradation is applied to the full scene and the result cropped, so the
/// clean view equals the raw crop exactly.
pub fn aligned_views(
    scene: &Image,
    scene_id: u64,
    configs: &[&TaskConfig],
    crop_size: usize,
    seed: u64,
) -> Result<Vec<(Image, DegradationVector)>> {
    let (_, h, w) = check_image(scene)?;
    let (y0, x0) = view_window(h, w, crop_size, scene_id, seed)?;
    configs
        .iter()
        .map(|cfg| {
            let s = crate::rng::derive_seed(seed, &[scene_id, crate::rng::hash_str(&cfg.name)]);
            let (img, label) = compose(scene, cfg, s)?;
            Ok((crop(&img, y0, x0, crop_size, crop_size), label))
        })
        .collect()
}
