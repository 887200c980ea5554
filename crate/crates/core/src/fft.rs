//! Complex discrete Fourier transforms on split real/imaginary buffers.
//!
//! Power-of-two lengths use an iterative radix-2 transform; other lengths
//! fall back to a direct DFT with a precomputed twiddle table. Transforms are
//! unnormalized in both directions; [`ifft2`] applies the `1/(h*w)` factor.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

#[derive(Clone, Debug)]
pub struct Fft<T> {
    n: usize,
    cos: Vec<T>,
    sin: Vec<T>,
    rev: Vec<usize>,
    pow2: bool,
}

impl<T: Real> Fft<T> {
    pub fn new(n: usize) -> Self {
        assert!(n > 0, "transform length must be positive");
        let pow2 = n.is_power_of_two();
        let table = if pow2 { n / 2 } else { n };
        let mut cos = Vec::with_capacity(table);
        let mut sin = Vec::with_capacity(table);
        for k in 0..table {
            let a = -2.0 * core::f64::consts::PI * k as f64 / n as f64;
            cos.push(T::c(libm::cos(a)));
            sin.push(T::c(libm::sin(a)));
        }
        let rev = if pow2 {
            let bits = n.trailing_zeros();
            (0..n).map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) }).collect()
        } else {
            Vec::new()
        };
        Self { n, cos, sin, rev, pow2 }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place transform. `inverse` flips the twiddle sign; no scaling.
    pub fn process(&self, re: &mut [T], im: &mut [T], inverse: bool, scratch: &mut Vec<T>) {
        let n = self.n;
        assert_eq!(re.len(), n);
        assert_eq!(im.len(), n);
        if n == 1 {
            return;
        }
        if self.pow2 {
            for i in 0..n {
                let j = self.rev[i];
                if j > i {
                    re.swap(i, j);
                    im.swap(i, j);
                }
            }
            let mut size = 2;
            while size <= n {
                let half = size / 2;
                let step = n / size;
                let mut start = 0;
                while start < n {
                    for j in 0..half {
                        let wr = self.cos[j * step];
                        let wi = if inverse { -self.sin[j * step] } else { self.sin[j * step] };
                        let a = start + j;
                        let b = a + half;
                        let tr = wr * re[b] - wi * im[b];
                        let ti = wr * im[b] + wi * re[b];
                        re[b] = re[a] - tr;
                        im[b] = im[a] - ti;
                        re[a] += tr;
                        im[a] += ti;
                    }
                    start += size;
                }
                size *= 2;
            }
        } else {
            scratch.clear();
            scratch.resize(2 * n, T::zero());
            for k in 0..n {
                let mut sr = T::zero();
                let mut si = T::zero();
                let mut idx = 0usize;
                for t in 0..n {
                    let wr = self.cos[idx];
                    let wi = if inverse { -self.sin[idx] } else { self.sin[idx] };
                    sr += re[t] * wr - im[t] * wi;
                    si += re[t] * wi + im[t] * wr;
                    idx += k;
                    if idx >= n {
                        idx -= n;
                    }
                }
                scratch[k] = sr;
                scratch[n + k] = si;
            }
            re.copy_from_slice(&scratch[..n]);
            im.copy_from_slice(&scratch[n..]);
        }
    }
}

/// Row/column plans for one `h x w` grid.
#[derive(Clone, Debug)]
pub struct Fft2<T> {
    h: usize,
    w: usize,
    rows: Fft<T>,
    cols: Fft<T>,
}

impl<T: Real> Fft2<T> {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w, rows: Fft::new(w), cols: Fft::new(h) }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// Unnormalized in-place 2-D transform of an `h x w` row-major grid.
    pub fn process(&self, re: &mut [T], im: &mut [T], inverse: bool) {
        let (h, w) = (self.h, self.w);
        assert_eq!(re.len(), h * w);
        assert_eq!(im.len(), h * w);
        let mut scratch = Vec::new();
        for r in 0..h {
            let s = r * w;
            self.rows.process(&mut re[s..s + w], &mut im[s..s + w], inverse, &mut scratch);
        }
        let mut cr = vec![T::zero(); h];
        let mut ci = vec![T::zero(); h];
        for c in 0..w {
            for r in 0..h {
                cr[r] = re[r * w + c];
                ci[r] = im[r * w + c];
            }
            self.cols.process(&mut cr, &mut ci, inverse, &mut scratch);
            for r in 0..h {
                re[r * w + c] = cr[r];
                im[r * w + c] = ci[r];
            }
        }
    }

    /// Forward transform of a real grid.
    pub fn forward_real(&self, x: &[T]) -> (Vec<T>, Vec<T>) {
        let mut re = x.to_vec();
        let mut im = vec![T::zero(); x.len()];
        self.process(&mut re, &mut im, false);
        (re, im)
    }

    /// Normalized inverse transform, returning the real part.
    pub fn inverse_real(&self, mut re: Vec<T>, mut im: Vec<T>) -> Vec<T> {
        self.process(&mut re, &mut im, true);
        let scale = T::one() / T::c((self.h * self.w) as f64);
        re.iter_mut().for_each(|v| *v *= scale);
        re
    }
}

/// Forward 2-D transform of a real `h x w` grid.
pub fn fft2<T: Real>(x: &[T], h: usize, w: usize) -> (Vec<T>, Vec<T>) {
    Fft2::new(h, w).forward_real(x)
}

/// Normalized inverse 2-D transform; returns the real part.
pub fn ifft2<T: Real>(re: Vec<T>, im: Vec<T>, h: usize, w: usize) -> Vec<T> {
    Fft2::new(h, w).inverse_real(re, im)
}

/// Index of the non-negative frequency that shares a mask entry with bin
/// `k` of an `n`-point transform (`min(k, n - k)`).
#[inline]
pub fn fold_frequency(k: usize, n: usize) -> usize {
    if k == 0 {
        0
    } else {
        k.min(n - k)
    }
}
