//! Procedural top-down scenes standing in for aerial photographs.
//!
//! A scene is terrain built from smooth value noise, overlaid with crop
//! fields, a road, buildings with cast shadows and tree canopies.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::rng::{rng_from, uniform, DetRng};
use crate::tensor::Tensor;

fn smooth_noise(rng: &mut DetRng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.gen::<f64>()).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let y0 = fy as usize;
        let ty = fy - y0 as f64;
        let sy = ty * ty * (3.0 - 2.0 * ty);
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let x0 = fx as usize;
            let tx = fx - x0 as f64;
            let sx = tx * tx * (3.0 - 2.0 * tx);
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let a = g(y0, x0) * (1.0 - sx) + g(y0, x0 + 1) * sx;
            let b = g(y0 + 1, x0) * (1.0 - sx) + g(y0 + 1, x0 + 1) * sx;
            out[y * w + x] = a * (1.0 - sy) + b * sy;
        }
    }
    out
}

fn put(img: &mut [f64], h: usize, w: usize, y: isize, x: isize, rgb: [f64; 3], alpha: f64) {
    if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
        return;
    }
    let i = y as usize * w + x as usize;
    for (c, v) in rgb.iter().enumerate() {
        let p = &mut img[c * h * w + i];
        *p = *p * (1.0 - alpha) + v * alpha;
    }
}

/// Generates scene `index` of the set identified by `seed` at `h x w`.
pub fn generate_scene(seed: u64, index: u64, h: usize, w: usize) -> Tensor<f64> {
    let mut rng = rng_from(seed, &[index, 0x5ce7e]);
    let mut img = vec![0.0f64; 3 * h * w];
    let n1 = smooth_noise(&mut rng, h, w, 16.max(h / 4));
    let n2 = smooth_noise(&mut rng, h, w, 4);
    let base = [uniform(&mut rng, 0.25, 0.45), uniform(&mut rng, 0.35, 0.55), uniform(&mut rng, 0.18, 0.32)];
    for i in 0..h * w {
        let v = 0.7 + 0.45 * n1[i] + 0.15 * n2[i];
        for c in 0..3 {
            img[c * h * w + i] = (base[c] * v).clamp(0.0, 1.0);
        }
    }

    // crop fields: oriented stripes inside rectangles
    let fields = rng.gen_range(1..=3);
    for _ in 0..fields {
        let (fy, fx) = (rng.gen_range(0..h) as isize, rng.gen_range(0..w) as isize);
        let (fh, fw) = (rng.gen_range(h / 5..h / 2 + 1) as isize, rng.gen_range(w / 5..w / 2 + 1) as isize);
        let col = [uniform(&mut rng, 0.45, 0.8), uniform(&mut rng, 0.4, 0.7), uniform(&mut rng, 0.15, 0.35)];
        let period = uniform(&mut rng, 2.5, 5.0);
        let ang = uniform(&mut rng, 0.0, core::f64::consts::PI);
        let (ca, sa) = (libm::cos(ang), libm::sin(ang));
        for y in fy..fy + fh {
            for x in fx..fx + fw {
                let t = (x as f64 * ca + y as f64 * sa) / period;
                let stripe = 0.82 + 0.18 * libm::sin(2.0 * core::f64::consts::PI * t);
                put(&mut img, h, w, y, x, [col[0] * stripe, col[1] * stripe, col[2] * stripe], 0.9);
            }
        }
    }

    // road: a thick straight band with a center line
    if rng.gen_bool(0.8) {
        let ang = uniform(&mut rng, 0.0, core::f64::consts::PI);
        let (nx, ny) = (libm::cos(ang), libm::sin(ang));
        let off = uniform(&mut rng, 0.3, 0.7) * (h.min(w) as f64);
        let cx = w as f64 / 2.0;
        let cy = h as f64 / 2.0;
        let half = uniform(&mut rng, 1.5, 3.5);
        let gray = uniform(&mut rng, 0.38, 0.55);
        for y in 0..h {
            for x in 0..w {
                let d = (x as f64 - cx) * nx + (y as f64 - cy) * ny + cx.min(cy) - off;
                let ad = libm::fabs(d);
                if ad < half {
                    put(&mut img, h, w, y as isize, x as isize, [gray, gray, gray * 1.02], 1.0);
                    if ad < 0.4 {
                        put(&mut img, h, w, y as isize, x as isize, [0.92, 0.9, 0.8], 0.8);
                    }
                }
            }
        }
    }

    // buildings with shadows
    let buildings = rng.gen_range(2..=6);
    for _ in 0..buildings {
        let bh = rng.gen_range(4..=(h / 6).max(5)) as isize;
        let bw = rng.gen_range(4..=(w / 6).max(5)) as isize;
        let by = rng.gen_range(0..h) as isize;
        let bx = rng.gen_range(0..w) as isize;
        for y in by + 2..by + bh + 2 {
            for x in bx + 2..bx + bw + 2 {
                put(&mut img, h, w, y, x, [0.05, 0.05, 0.07], 0.55);
            }
        }
        let roof = match rng.gen_range(0..3) {
            0 => [uniform(&mut rng, 0.6, 0.8), uniform(&mut rng, 0.25, 0.35), uniform(&mut rng, 0.2, 0.3)],
            1 => {
                let g = uniform(&mut rng, 0.7, 0.95);
                [g, g, g]
            }
            _ => [uniform(&mut rng, 0.3, 0.45), uniform(&mut rng, 0.35, 0.5), uniform(&mut rng, 0.5, 0.7)],
        };
        for y in by..by + bh {
            for x in bx..bx + bw {
                let edge = y == by || x == bx || y == by + bh - 1 || x == bx + bw - 1;
                let k = if edge { 0.8 } else { 1.0 };
                put(&mut img, h, w, y, x, [roof[0] * k, roof[1] * k, roof[2] * k], 1.0);
            }
        }
    }

    // tree canopies
    let trees = rng.gen_range(4..=14);
    for _ in 0..trees {
        let cy = uniform(&mut rng, 0.0, h as f64);
        let cx = uniform(&mut rng, 0.0, w as f64);
        let r = uniform(&mut rng, 1.2, 3.2);
        let g = uniform(&mut rng, 0.25, 0.4);
        let reach = r as isize + 2;
        for y in cy as isize - reach..=cy as isize + reach {
            for x in cx as isize - reach..=cx as isize + reach {
                let d = libm::hypot(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let a = (r + 0.5 - d).clamp(0.0, 1.0);
                if a > 0.0 {
                    let shade = 0.75 + 0.25 * (1.0 - d / (r + 0.5)).max(0.0);
                    put(&mut img, h, w, y, x, [0.1 * shade, g * shade, 0.08 * shade], a);
                }
            }
        }
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::from_vec(&[3, h, w], img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_valid_and_reproducible() {
        let a = generate_scene(1, 0, 64, 64);
        let b = generate_scene(1, 0, 64, 64);
        let c = generate_scene(1, 1, 64, 64);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = a.mean();
        let var = a.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / a.len() as f64;
        assert!(var > 1e-3, "scene should have texture");
    }
}
