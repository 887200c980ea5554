//! Restoration losses and mask-overload augmentation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::degradation::{DegradationVector, Factor};
use crate::fft::Fft2;
use crate::filters;
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub freq: f64,
    pub base: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { freq: 0.1, base: 0.1 }
    }
}

/// Square low-frequency region removed from the spectral loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FreqMaskSpec {
    pub ratio: f64,
}

impl Default for FreqMaskSpec {
    fn default() -> Self {
        Self { ratio: 0.2 }
    }
}

impl FreqMaskSpec {
    /// Side of the removed square: `floor(ratio * min(h, w))`.
    pub fn side(&self, h: usize, w: usize) -> Result<usize> {
        let m = h.min(w);
        let side = libm::floor(self.ratio * m as f64) as usize;
        if !(self.ratio > 0.0) || side < 1 || side >= m {
            return Err(Error::Invalid(format!("spectral mask side {side} invalid for {h}x{w} at ratio {}", self.ratio)));
        }
        Ok(side)
    }

    /// Whether each unshifted bin `[h, w]` is kept.
    pub fn retained(&self, h: usize, w: usize) -> Result<Vec<bool>> {
        let side = self.side(h, w)?;
        let removed = |k: usize, n: usize| {
            // position after moving zero frequency to n / 2
            let i = (k + n / 2) % n;
            let lo = n / 2 - side / 2;
            i >= lo && i < lo + side
        };
        Ok((0..h * w).map(|i| !(removed(i / w, h) && removed(i % w, w))).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidedFilterSpec {
    pub radius: usize,
    pub eps: f64,
}

impl Default for GuidedFilterSpec {
    fn default() -> Self {
        Self { radius: 15, eps: 1e-3 }
    }
}

/// Self-guided filtered target for the base branch, `[c, h, w]`.
pub fn base_target(y: &Tensor<f64>, spec: &GuidedFilterSpec) -> Tensor<f64> {
    let s = y.shape();
    let out = filters::guided_filter(y.data(), y.data(), s[0], s[1], s[2], spec.radius, spec.eps);
    Tensor::from_vec(s, out)
}

fn check_shape(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("prediction {a:?} vs target {b:?}")));
    }
    Ok(())
}

/// Mean absolute difference, with subgradient 0 where the difference is 0.
pub fn spatial_l1<T: Real>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    check_shape(g.shape(pred), target.shape())?;
    let pv = g.value(pred);
    let n = pv.len() as f64;
    let mut total = 0.0;
    let inv = T::c(1.0 / n);
    let grad = pv
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            let d = a - b;
            total += d.abs().f64();
            if d > T::zero() {
                inv
            } else if d < T::zero() {
                -inv
            } else {
                T::zero()
            }
        })
        .collect();
    Ok(g.precomputed(T::c(total / n), vec![(pred, grad)]))
}

/// Loss value and input gradient of the masked spectral-magnitude L1 for
/// `[c, h, w]` planes.
pub fn masked_freq_l1_grad<T: Real>(pred: &[T], target: &[T], shape: &[usize], spec: &FreqMaskSpec) -> Result<(f64, Vec<T>)> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let keep = spec.retained(h, w)?;
    let kept = keep.iter().filter(|k| **k).count();
    let hw = h * w;
    let plan = Fft2::<T>::new(h, w);
    let norm = 1.0 / (c * kept) as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(c * hw);
    for ch in 0..c {
        let (pr, pi) = plan.forward_real(&pred[ch * hw..(ch + 1) * hw]);
        let (tr, ti) = plan.forward_real(&target[ch * hw..(ch + 1) * hw]);
        let mut gr = vec![T::zero(); hw];
        let mut gi = vec![T::zero(); hw];
        for k in 0..hw {
            if !keep[k] {
                continue;
            }
            let mp = (pr[k] * pr[k] + pi[k] * pi[k]).sqrt();
            let mt = (tr[k] * tr[k] + ti[k] * ti[k]).sqrt();
            let d = mp - mt;
            total += d.abs().f64();
            if mp > T::zero() && d != T::zero() {
                let s = if d > T::zero() { T::one() } else { -T::one() };
                gr[k] = s * pr[k] / mp;
                gi[k] = s * pi[k] / mp;
            }
        }
        // dL/dx = N Re(ifft(w u)) with the normalized inverse
        let back = plan.inverse_real(gr, gi);
        let scale = T::c(hw as f64 * norm);
        grad.extend(back.into_iter().map(|v| v * scale));
    }
    Ok((total * norm, grad))
}

/// Mean over retained bins and channels of `| |FFT(pred)| - |FFT(target)| |`.
pub fn masked_freq_l1<T: Real>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>, spec: &FreqMaskSpec) -> Result<Var> {
    check_shape(g.shape(pred), target.shape())?;
    let shape = target.shape().to_vec();
    let (v, grad) = masked_freq_l1_grad(g.value(pred), target.data(), &shape, spec)?;
    Ok(g.precomputed(T::c(v), vec![(pred, grad)]))
}

/// L1 between the base prediction and the cached filtered target.
pub fn base_loss<T: Real>(g: &mut Graph<T>, base: Var, target: &Tensor<T>) -> Result<Var> {
    spatial_l1(g, base, target)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub freq: f64,
    pub base: f64,
    pub total: f64,
}

/// `l1 + w_f * L_freq + w_p * L_base`. Terms with zero weight or a missing
/// base prediction are not computed.
pub fn restoration_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    base: Option<Var>,
    y: &Tensor<T>,
    y_base: &Tensor<T>,
    weights: &LossWeights,
    spec: &FreqMaskSpec,
) -> Result<(Var, LossBreakdown)> {
    let mut total = spatial_l1(g, pred, y)?;
    let mut bd = LossBreakdown { l1: g.scalar(total).f64(), ..Default::default() };
    if weights.freq != 0.0 {
        let f = masked_freq_l1(g, pred, y, spec)?;
        bd.freq = g.scalar(f).f64();
        let f = g.scale(f, T::c(weights.freq));
        total = g.add(total, f);
    }
    if let (Some(b), true) = (base, weights.base != 0.0) {
        let l = base_loss(g, b, y_base)?;
        bd.base = g.scalar(l).f64();
        let l = g.scale(l, T::c(weights.base));
        total = g.add(total, l);
    }
    bd.total = g.scalar(total).f64();
    Ok((total, bd))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverloadSpec {
    pub probability: f64,
}

impl Default for OverloadSpec {
    fn default() -> Self {
        Self { probability: 0.05 }
    }
}

impl OverloadSpec {
    /// Rain or snow present and neither haze nor low-light.
    pub fn eligible(mask: &DegradationVector) -> bool {
        (mask.get(Factor::Rain) || mask.get(Factor::Snow)) && !mask.get(Factor::Haze) && !mask.get(Factor::LowLight)
    }
}

/// Adds one uniformly chosen unset global-group bit to eligible masks with
/// the configured probability. Returns which masks changed.
pub fn mask_overload<R: Rng>(masks: &mut [DegradationVector], spec: &OverloadSpec, rng: &mut R) -> Vec<bool> {
    masks
        .iter_mut()
        .map(|m| {
            // draw for every sample so the stream does not depend on eligibility
            let u: f64 = rng.gen();
            let pick: f64 = rng.gen();
            if !OverloadSpec::eligible(m) || u >= spec.probability {
                return false;
            }
            let free: Vec<Factor> = Factor::GLOBAL.iter().copied().filter(|f| !m.get(*f)).collect();
            let f = free[((pick * free.len() as f64) as usize).min(free.len() - 1)];
            m.set(f, true);
            true
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retained_count_on_32() {
        let keep = FreqMaskSpec::default().retained(32, 32).unwrap();
        assert_eq!(keep.iter().filter(|k| **k).count(), 988);
        assert!(!keep[0]);
    }

    #[test]
    fn degenerate_spec_rejected() {
        assert!(FreqMaskSpec::default().side(4, 4).is_err());
        assert!(FreqMaskSpec { ratio: 0.0 }.side(32, 32).is_err());
    }
}
