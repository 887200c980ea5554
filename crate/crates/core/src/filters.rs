//! Box and guided filtering.

use alloc::vec;
use alloc::vec::Vec;

/// Mean over the `(2r+1)^2` window clipped to the image, divided by the
/// number of pixels actually inside the window.
pub fn box_mean(x: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let stride = w + 1;
    let mut integral = vec![0.0; (h + 1) * stride];
    for y in 0..h {
        let mut row = 0.0;
        for xx in 0..w {
            row += x[y * w + xx];
            integral[(y + 1) * stride + xx + 1] = integral[y * stride + xx + 1] + row;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r + 1).min(h);
        for xx in 0..w {
            let x0 = xx.saturating_sub(r);
            let x1 = (xx + r + 1).min(w);
            let s = integral[y1 * stride + x1] - integral[y0 * stride + x1] - integral[y1 * stride + x0]
                + integral[y0 * stride + x0];
            out[y * w + xx] = s / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

/// Guided filter of one `h x w` plane `p` with guide `i`.
///
/// Inputs are shifted by the guide's and input's first pixel before the
/// window statistics, which leaves the result unchanged mathematically but
/// makes constant planes an exact fixed point in floating point.
pub fn guided_filter_plane(i: &[f64], p: &[f64], h: usize, w: usize, r: usize, eps: f64) -> Vec<f64> {
    assert_eq!(i.len(), h * w);
    assert_eq!(p.len(), h * w);
    let (ci, cp) = (i[0], p[0]);
    let ic: Vec<f64> = i.iter().map(|v| v - ci).collect();
    let pc: Vec<f64> = p.iter().map(|v| v - cp).collect();
    let mean_i = box_mean(&ic, h, w, r);
    let mean_p = box_mean(&pc, h, w, r);
    let ii: Vec<f64> = ic.iter().map(|v| v * v).collect();
    let ip: Vec<f64> = ic.iter().zip(&pc).map(|(a, b)| a * b).collect();
    let corr_ii = box_mean(&ii, h, w, r);
    let corr_ip = box_mean(&ip, h, w, r);
    let mut a = vec![0.0; h * w];
    let mut b = vec![0.0; h * w];
    for k in 0..h * w {
        let var_i = corr_ii[k] - mean_i[k] * mean_i[k];
        let cov_ip = corr_ip[k] - mean_i[k] * mean_p[k];
        a[k] = cov_ip / (var_i + eps);
        b[k] = mean_p[k] - a[k] * mean_i[k];
    }
    let mean_a = box_mean(&a, h, w, r);
    let mean_b = box_mean(&b, h, w, r);
    (0..h * w).map(|k| mean_a[k] * ic[k] + mean_b[k] + cp).collect()
}

/// Channel-wise guided filter of `[c, h, w]` images.
pub fn guided_filter(guide: &[f64], input: &[f64], c: usize, h: usize, w: usize, r: usize, eps: f64) -> Vec<f64> {
    assert!(r >= 1 && eps > 0.0, "guided filter needs r >= 1 and eps > 0");
    let hw = h * w;
    let mut out = Vec::with_capacity(c * hw);
    for ch in 0..c {
        out.extend(guided_filter_plane(&guide[ch * hw..(ch + 1) * hw], &input[ch * hw..(ch + 1) * hw], h, w, r, eps));
    }
    out
}
