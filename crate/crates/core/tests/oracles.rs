//! Fast paths checked against direct, slow reference computations.

use mdr_core::filters::guided_filter_plane;
use mdr_core::metrics::{ssim_plane, ssim_window};
use mdr_core::objectives::{masked_freq_l1_grad, FreqMaskSpec};
use mdr_core::restoration::{RestorationConfig, SpatialBranch};
use mdr_core::fft::{fft2, ifft2};
use mdr_core::nn::ParamBuilder;
use mdr_core::rng::{rng_from, uniform};
use mdr_core::{Graph, ParamStore, Tensor};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

fn random(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng_from(seed, &[]);
    (0..n).map(|_| uniform(&mut r, 0.0, 1.0)).collect()
}

/// Windowed statistics evaluated pixel by pixel over the clipped window.
fn guided_oracle(i: &[f64], p: &[f64], h: usize, w: usize, r: usize, eps: f64) -> Vec<f64> {
    let win = |y: usize, x: usize| {
        let ys = y.saturating_sub(r)..(y + r + 1).min(h);
        let xs = x.saturating_sub(r)..(x + r + 1).min(w);
        ys.flat_map(move |yy| xs.clone().map(move |xx| yy * w + xx)).collect::<Vec<_>>()
    };
    let mut a = vec![0.0; h * w];
    let mut b = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let idx = win(y, x);
            let n = idx.len() as f64;
            let mi = idx.iter().map(|&k| i[k]).sum::<f64>() / n;
            let mp = idx.iter().map(|&k| p[k]).sum::<f64>() / n;
            let var = idx.iter().map(|&k| (i[k] - mi) * (i[k] - mi)).sum::<f64>() / n;
            let cov = idx.iter().map(|&k| (i[k] - mi) * (p[k] - mp)).sum::<f64>() / n;
            a[y * w + x] = cov / (var + eps);
            b[y * w + x] = mp - a[y * w + x] * mi;
        }
    }
    let mut q = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let idx = win(y, x);
            let n = idx.len() as f64;
            let ma = idx.iter().map(|&k| a[k]).sum::<f64>() / n;
            let mb = idx.iter().map(|&k| b[k]).sum::<f64>() / n;
            q[y * w + x] = ma * i[y * w + x] + mb;
        }
    }
    q
}

#[test]
fn guided_filter_matches_windowed_statistics() {
    let (h, w) = (16, 16);
    let i = random(h * w, 1);
    let p = random(h * w, 2);
    for (guide, r, eps) in [(&i, 3, 1e-3), (&p, 3, 1e-2), (&i, 1, 0.1)] {
        let fast = guided_filter_plane(guide, &p, h, w, r, eps);
        let slow = guided_oracle(guide, &p, h, w, r, eps);
        let err = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "guided filter error {err}");
    }
}

#[test]
fn guided_filter_large_eps_tends_to_double_box_mean() {
    let (h, w, r) = (32, 32, 2);
    let p = random(h * w, 3);
    let q = guided_filter_plane(&p, &p, h, w, r, 1e9);
    let boxed = mdr_core::filters::box_mean(&mdr_core::filters::box_mean(&p, h, w, r), h, w, r);
    let err = q.iter().zip(&boxed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-3, "{err}");
}

/// Mean over valid window positions of the per-window SSIM.
fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let win = ssim_window();
    let (c1, c2) = (0.0001, 0.0009);
    let mut total = 0.0;
    let mut count = 0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    let k = (y + dy) * w + x + dx;
                    ma += win[dy][dx] * a[k];
                    mb += win[dy][dx] * b[k];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    let k = (y + dy) * w + x + dx;
                    va += win[dy][dx] * (a[k] - ma) * (a[k] - ma);
                    vb += win[dy][dx] * (b[k] - mb) * (b[k] - mb);
                    cov += win[dy][dx] * (a[k] - ma) * (b[k] - mb);
                }
            }
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn ssim_matches_per_window_oracle() {
    let (h, w) = (24, 20);
    let a = random(h * w, 4);
    let b: Vec<f64> = a.iter().zip(random(h * w, 5)).map(|(x, n)| (x + 0.2 * (n - 0.5)).clamp(0.0, 1.0)).collect();
    let fast = ssim_plane(&a, &b, h, w).unwrap();
    let slow = ssim_oracle(&a, &b, h, w);
    assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
    assert!((ssim_plane(&a, &a, h, w).unwrap() - 1.0).abs() < 1e-12);
}

/// Direct DFT per bin with the low-frequency square expressed in centered coordinates.
fn spectral_oracle(p: &[f64], t: &[f64], c: usize, h: usize, w: usize) -> (f64, usize) {
    let side = (0.2 * h.min(w) as f64).floor() as i64;
    let centered = |k: usize, n: usize| {
        let (k, n) = (k as i64, n as i64);
        (k + n / 2).rem_euclid(n) - n / 2
    };
    let inside = |u: i64| u >= -(side / 2) && u < side - side / 2;
    let mut total = 0.0;
    let mut kept = 0;
    for ch in 0..c {
        for ky in 0..h {
            for kx in 0..w {
                if inside(centered(ky, h)) && inside(centered(kx, w)) {
                    continue;
                }
                if ch == 0 {
                    kept += 1;
                }
                let (mut fp, mut ft) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
                for y in 0..h {
                    for x in 0..w {
                        let ang = -2.0 * std::f64::consts::PI * ((ky * y) as f64 / h as f64 + (kx * x) as f64 / w as f64);
                        let e = Complex64::from_polar(1.0, ang);
                        fp += e * p[(ch * h + y) * w + x];
                        ft += e * t[(ch * h + y) * w + x];
                    }
                }
                total += (fp.norm() - ft.norm()).abs();
            }
        }
    }
    (total / (kept * c) as f64, kept)
}

#[test]
fn masked_spectral_loss_matches_per_bin_oracle() {
    let (c, h, w) = (3, 32, 32);
    let p = random(c * h * w, 6);
    let t = random(c * h * w, 7);
    let (fast, _) = masked_freq_l1_grad(&p, &t, &[c, h, w], &FreqMaskSpec::default()).unwrap();
    let (slow, kept) = spectral_oracle(&p, &t, c, h, w);
    assert_eq!(kept, 988);
    assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
    // odd, non-square shape
    let (c, h, w) = (2, 15, 20);
    let p = random(c * h * w, 8);
    let t = random(c * h * w, 9);
    let (fast, _) = masked_freq_l1_grad(&p, &t, &[c, h, w], &FreqMaskSpec::default()).unwrap();
    let (slow, _) = spectral_oracle(&p, &t, c, h, w);
    assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
}

fn set(store: &mut ParamStore<f64>, id: mdr_core::ParamId, f: impl Fn(usize) -> f64) {
    for (i, v) in store.get_mut(id).data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

#[test]
fn window_attention_matches_dense_softmax() {
    let c = 12;
    let cfg = RestorationConfig::desk();
    let mut store = ParamStore::<f64>::new();
    let sb = SpatialBranch::new(&mut ParamBuilder::new(&mut store, 1), c, &cfg);
    assert_eq!(sb.heads, 1);
    // q = k = v = x, identity output projection
    set(&mut store, sb.qkv.w, |i| if (i / c) % c == i % c { 1.0 } else { 0.0 });
    set(&mut store, sb.proj.w, |i| if i / c == i % c { 1.0 } else { 0.0 });
    for b in [sb.qkv.b, sb.proj.b].into_iter().flatten() {
        set(&mut store, b, |_| 0.0);
    }
    let bias = random(225, 10);
    set(&mut store, sb.rel_bias, |i| bias[i] - 0.5);
    let x = random(64 * c, 11);
    let mut g = Graph::new(&store);
    let xv = g.input(Tensor::from_vec(&[64, c], x.clone()));
    let (out, attn) = sb.window_attention(&mut g, xv, 1);
    let out = g.value(out).to_vec();
    let attn = g.value(attn).to_vec();
    let scale = 1.0 / (c as f64).sqrt();
    let mut max_err: f64 = 0.0;
    for i in 0..64 {
        let (yi, xi) = (i / 8, i % 8);
        let mut s: Vec<f64> = (0..64)
            .map(|j| {
                let (yj, xj) = (j / 8, j % 8);
                let dot: f64 = (0..c).map(|k| x[i * c + k] * x[j * c + k]).sum();
                dot * scale + bias[(yi + 7 - yj) * 15 + (xi + 7 - xj)] - 0.5
            })
            .collect();
        let m = s.iter().cloned().fold(f64::MIN, f64::max);
        s.iter_mut().for_each(|v| *v = (*v - m).exp());
        let z: f64 = s.iter().sum();
        let row: f64 = attn[i * 64..(i + 1) * 64].iter().sum();
        assert!((row - 1.0).abs() < 1e-6);
        for k in 0..c {
            let o: f64 = (0..64).map(|j| s[j] / z * x[j * c + k]).sum();
            max_err = max_err.max((o - out[i * c + k]).abs());
        }
    }
    assert!(max_err < 1e-5, "{max_err}");
}

#[test]
fn spatial_branch_preserves_shape_under_padding() {
    let c = 12;
    let mut store = ParamStore::<f64>::new();
    let sb = SpatialBranch::new(&mut ParamBuilder::new(&mut store, 2), c, &RestorationConfig::desk());
    for n in [15, 16, 17] {
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_vec(&[c, n, n], random(c * n * n, n as u64)));
        let y = sb.forward(&mut g, x);
        assert_eq!(g.shape(y), &[c, n, n]);
        assert!(g.value(y).iter().all(|v| v.is_finite()));
    }
}

#[test]
fn fft_round_trip_and_reference() {
    let (c, h, w) = (24, 32, 32);
    let x = random(c * h * w, 12);
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = (planner.plan_fft_forward(w), planner.plan_fft_forward(h));
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let (re, im) = fft2(plane, h, w);
        // reference: rows then columns
        let mut buf: Vec<Complex64> = plane.iter().map(|v| Complex64::new(*v, 0.0)).collect();
        for r in buf.chunks_mut(w) {
            row.process(r);
        }
        for xx in 0..w {
            let mut colv: Vec<Complex64> = (0..h).map(|y| buf[y * w + xx]).collect();
            col.process(&mut colv);
            for y in 0..h {
                buf[y * w + xx] = colv[y];
            }
        }
        for k in 0..h * w {
            let d = (Complex64::new(re[k], im[k]) - buf[k]).norm();
            assert!(d <= 1e-5 * buf[k].norm().max(1.0), "bin {k}: {d}");
        }
        let back = ifft2(re, im, h, w);
        for (a, b) in back.iter().zip(plane) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-3));
        }
    }
}
