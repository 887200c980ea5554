//! Luminance PSNR and SSIM.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

pub const PSNR_CAP: f64 = 99.0;

/// BT.601 luma of a `[3, h, w]` image.
pub fn luminance(rgb: &[f64], h: usize, w: usize) -> Vec<f64> {
    let n = h * w;
    assert_eq!(rgb.len(), 3 * n);
    (0..n).map(|i| 0.299 * rgb[i] + 0.587 * rgb[n + i] + 0.114 * rgb[2 * n + i]).collect()
}

fn check(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<()> {
    if a.len() != b.len() || a.len() != 3 * h * w {
        return Err(Error::Shape(alloc::format!("images must both be 3x{h}x{w}")));
    }
    Ok(())
}

/// PSNR on the luma channel for images with range 1; zero error reports 99 dB.
pub fn psnr_y(pred: &[f64], target: &[f64], h: usize, w: usize) -> Result<f64> {
    check(pred, target, h, w)?;
    let (a, b) = (luminance(pred, h, w), luminance(target, h, w));
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * libm::log10(1.0 / mse)).min(PSNR_CAP))
}

/// Normalized 2-D Gaussian window (11x11, sigma 1.5).
pub fn ssim_window() -> [[f64; 11]; 11] {
    let k = gaussian_1d();
    let mut win = [[0.0; 11]; 11];
    for y in 0..11 {
        for x in 0..11 {
            win[y][x] = k[y] * k[x];
        }
    }
    win
}

fn gaussian_1d() -> Vec<f64> {
    let g: Vec<f64> = (0..11).map(|i| (i as f64) - 5.0).map(|d| libm::exp(-d * d / (2.0 * 1.5 * 1.5))).collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    // separable valid-mode correlation
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for xx in 0..ow {
            tmp[y * ow + xx] = (0..n).map(|t| k[t] * x[y * w + xx + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for xx in 0..ow {
            out[y * ow + xx] = (0..n).map(|t| k[t] * tmp[(y + t) * ow + xx]).sum();
        }
    }
    (out, oh, ow)
}

/// Single-scale SSIM of two luma planes (valid windows only).
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < 11 || w < 11 {
        return Err(Error::Shape(alloc::format!("SSIM needs at least 11x11, got {h}x{w}")));
    }
    let k = gaussian_1d();
    let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (mu_a, oh, ow) = filter_valid(a, h, w, &k);
    let (mu_b, ..) = filter_valid(b, h, w, &k);
    let (e_aa, ..) = filter_valid(&aa, h, w, &k);
    let (e_bb, ..) = filter_valid(&bb, h, w, &k);
    let (e_ab, ..) = filter_valid(&ab, h, w, &k);
    let mut total = 0.0;
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / (oh * ow) as f64)
}

/// SSIM on the BT.601 luma channel.
pub fn ssim_y(pred: &[f64], target: &[f64], h: usize, w: usize) -> Result<f64> {
    check(pred, target, h, w)?;
    ssim_plane(&luminance(pred, h, w), &luminance(target, h, w), h, w)
}
