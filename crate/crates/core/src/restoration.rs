//! Degradation-conditioned restoration backbone.
//!
//! A five-stage U-shaped network of dual-domain blocks. Each block mixes a
//! frequency branch (mask-modulated spectrum with DC correction) and a
//! window-attention spatial branch through a learned scalar gate, followed by
//! a mixture-of-experts feed-forward whose experts are bound to factors and
//! activated by the degradation mask. A low-resolution base branch predicts
//! the coarse image; the backbone adds the residual.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::ablation::Ablation;
use crate::conditioning::{ConditioningConfig, TokenBank};
use crate::degradation::{Factor, NUM_FACTORS};
use crate::fft::fold_frequency;
use crate::graph::{Graph, PadMode, Var};
use crate::nn::{Conv2d, DwConv3, LayerNorm, Linear, ParamBuilder};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Bound on the DC correction.
pub const ETA: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct RestorationConfig {
    pub widths: [usize; 5],
    pub blocks_per_stage: usize,
    pub window: usize,
    pub head_dim: usize,
    pub freq_experts: usize,
    pub rank: usize,
    /// Knots of the normalized-frequency grid on which mask factors live.
    pub freq_knots: usize,
    pub dc_hidden: usize,
    /// Expert hidden width as a multiple of the stage width.
    pub expert_expansion: usize,
    pub base_hidden: usize,
    /// Identity paths around the base CNN and through the residual branch so
    /// the untrained network starts at `y = x`.
    pub input_skips: bool,
    pub cond: ConditioningConfig,
}

impl RestorationConfig {
    /// Published widths.
    pub fn published() -> Self {
        Self { widths: [24, 48, 96, 48, 24], blocks_per_stage: 2, head_dim: 24, cond: ConditioningConfig { d: 512, ..Default::default() }, ..Self::desk() }
    }

    /// Width-halved desk-scale model.
    pub fn desk() -> Self {
        Self {
            widths: [12, 24, 48, 24, 12],
            blocks_per_stage: 1,
            window: 8,
            head_dim: 12,
            freq_experts: 2,
            rank: 4,
            freq_knots: 17,
            dc_hidden: 32,
            expert_expansion: 2,
            base_hidden: 16,
            input_skips: true,
            cond: ConditioningConfig::default(),
        }
    }

    /// Stage resolution divisor (1, 2, 4, 2, 1).
    pub fn stage_scale(s: usize) -> usize {
        [1, 2, 4, 2, 1][s]
    }
}

impl Default for RestorationConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Linear interpolation matrix `[nq, knots]` from knots evenly spaced on
/// `[0, 1]` to the `nq` non-negative frequencies of an `n`-point transform.
pub fn knot_interp(n: usize, knots: usize) -> Vec<f64> {
    let nq = n / 2 + 1;
    let mut m = vec![0.0; nq * knots];
    let top = (n as f64 / 2.0).max(1.0);
    for i in 0..nq {
        let f = (i as f64 / top).min(1.0) * (knots - 1) as f64;
        let k0 = (libm::floor(f) as usize).min(knots - 1);
        let k1 = (k0 + 1).min(knots - 1);
        let t = f - k0 as f64;
        m[i * knots + k0] += 1.0 - t;
        m[i * knots + k1] += t;
    }
    m
}

/// Flat index into the `[h/2+1, w/2+1]` grid for every full-spectrum bin.
pub fn fold_index(h: usize, w: usize) -> Vec<usize> {
    let wq = w / 2 + 1;
    (0..h * w).map(|i| fold_frequency(i / w, h) * wq + fold_frequency(i % w, w)).collect()
}

#[derive(Clone, Debug)]
pub struct FrequencyBranch {
    pub w_f: Linear,
    pub w_pi: Linear,
    /// Per-expert scalar logit offset, `[experts]`.
    pub c: ParamId,
    /// `[experts, rank, knots]`.
    pub v_h: ParamId,
    pub v_w: ParamId,
    pub b_dc: ParamId,
    pub dc1: Linear,
    pub dc2: Linear,
    pub w_out: Conv2d,
    pub experts: usize,
    pub rank: usize,
    pub knots: usize,
}

impl FrequencyBranch {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, c: usize, cfg: &RestorationConfig) -> Self {
        let e = cfg.cond.e;
        let (m, r, k) = (cfg.freq_experts, cfg.rank, cfg.freq_knots);
        pb.scope("freq", |pb| Self {
            w_f: Linear::new(pb, "w_f", c, e, true),
            w_pi: Linear::new(pb, "w_pi", e, m, true),
            c: pb.constant("c", &[m], 2.0),
            v_h: pb.normal("v_h", &[m, r, k], 0.3),
            v_w: pb.normal("v_w", &[m, r, k], 0.3),
            b_dc: pb.zeros("b_dc", &[1]),
            dc1: Linear::new(pb, "dc1", e + 2 * c, cfg.dc_hidden, true),
            dc2: Linear::with_std(pb, "dc2", cfg.dc_hidden, c, true, 0.02),
            w_out: Conv2d::new(pb, "w_out", c, c, 1, 1, 0),
            experts: m,
            rank: r,
            knots: k,
        })
    }

    /// Expert mixture weights `pi = softmax(W_pi(g + W_f GAP(x)))`, shape `[experts]`.
    pub fn mixture<T: Real>(&self, g: &mut Graph<T>, x: Var, cond: Var) -> Var {
        let gap = g.gap(x);
        let c = g.value(gap).len();
        let gap = g.reshape(gap, &[1, c]);
        let f = self.w_f.forward(g, gap);
        let e = g.value(cond).len();
        let cond = g.reshape(cond, &[1, e]);
        let t = g.add(cond, f);
        let l = self.w_pi.forward(g, t);
        let p = g.softmax(l);
        g.reshape(p, &[self.experts])
    }

    /// Pre-sigmoid logit map `c_m + sum_l v_h,l (x) v_w,l` on the `[h/2+1, w/2+1]` grid.
    pub fn logits<T: Real>(&self, g: &mut Graph<T>, m: usize, h: usize, w: usize) -> Var {
        let (r, k) = (self.rank, self.knots);
        let (hq, wq) = (h / 2 + 1, w / 2 + 1);
        let ih = g.constant(&[hq, k], knot_interp(h, k).into_iter().map(T::c).collect());
        let iw = g.constant(&[wq, k], knot_interp(w, k).into_iter().map(T::c).collect());
        let vh_all = g.param(self.v_h);
        let vw_all = g.param(self.v_w);
        let vh = g.slice(vh_all, m, 1);
        let vw = g.slice(vw_all, m, 1);
        // [hq, k] x [r, k]^T -> [hq, r]
        let vh = g.matmul_ex(ih, false, vh, true, hq, k, r);
        let vw = g.matmul_ex(iw, false, vw, true, wq, k, r);
        let l = g.matmul_ex(vh, false, vw, true, hq, r, wq);
        let c_all = g.param(self.c);
        let cm = g.slice(c_all, m, 1);
        g.add_b(l, cm)
    }

    /// Mixed spectral mask on the full `[h, w]` grid (before the DC overwrite).
    pub fn mixed_mask<T: Real>(&self, g: &mut Graph<T>, pi: Var, h: usize, w: usize) -> Var {
        let idx = fold_index(h, w);
        let mut acc: Option<Var> = None;
        for m in 0..self.experts {
            let l = self.logits(g, m, h, w);
            let s = g.sigmoid(l);
            let full = g.gather(s, idx.clone(), &[h, w]);
            let pm = g.slice(pi, m, 1);
            let term = g.scale_by(full, pm);
            acc = Some(match acc {
                Some(a) => g.add(a, term),
                None => term,
            });
        }
        acc.expect("at least one frequency expert")
    }

    /// Corrected zero-frequency entry per channel:
    /// `1 + b_dc + eta * tanh(MLP_dc([g, mu, sigma]))`.
    pub fn dc_correction<T: Real>(&self, g: &mut Graph<T>, cond: Var, mu: Var, sigma: Var) -> Var {
        let inp = g.concat(&[cond, mu, sigma]);
        let n = g.value(inp).len();
        let inp = g.reshape(inp, &[1, n]);
        let h = self.dc1.forward(g, inp);
        let h = g.gelu(h);
        let o = self.dc2.forward(g, h);
        let c = g.value(o).len();
        let o = g.reshape(o, &[c]);
        let t = g.tanh(o);
        let t = g.scale(t, T::c(ETA));
        let b = g.param(self.b_dc);
        let t = g.add_b(t, b);
        g.add_scalar(t, T::one())
    }

    /// `W_out(ifft(fft(x) * M))` with the mixed, DC-corrected mask.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, cond: Var, ab: &Ablation) -> FreqOut {
        let s = g.shape(x).to_vec();
        let (h, w) = (s[1], s[2]);
        let pi = self.mixture(g, x, cond);
        let mask = self.mixed_mask(g, pi, h, w);
        let dc = if ab.no_dc_correction {
            None
        } else {
            let (mu, sigma) = channel_stats(g, x);
            Some(self.dc_correction(g, cond, mu, sigma))
        };
        let filtered = g.spectral_filter(x, mask, dc);
        let out = self.w_out.forward(g, filtered);
        FreqOut { out, filtered, pi, mask, dc }
    }
}

pub struct FreqOut {
    pub out: Var,
    /// Output before `W_out`.
    pub filtered: Var,
    pub pi: Var,
    pub mask: Var,
    pub dc: Option<Var>,
}

/// Per-channel mean and standard deviation of `[c, h, w]`.
pub fn channel_stats<T: Real>(g: &mut Graph<T>, x: Var) -> (Var, Var) {
    let c = g.shape(x)[0];
    let n = g.value(x).len() / c;
    let flat = g.reshape(x, &[c, n]);
    let mu = g.mean_last(flat);
    let neg = g.scale(mu, -T::one());
    let neg = g.reshape(neg, &[c, 1]);
    let xc = g.add_b(flat, neg);
    let sq = g.unary(xc, crate::graph::Unary::Square);
    let var = g.mean_last(sq);
    let var = g.add_scalar(var, T::c(1e-6));
    let sd = g.unary(var, crate::graph::Unary::Sqrt);
    (mu, sd)
}

#[derive(Clone, Debug)]
pub struct SpatialBranch {
    pub qkv: Linear,
    pub proj: Linear,
    /// `[(2 win - 1)^2, heads]`.
    pub rel_bias: ParamId,
    pub ln: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub heads: usize,
    pub window: usize,
}

/// Relative position bias index `[heads, n, n]` into the `[(2w-1)^2, heads]` table.
pub fn rel_bias_index(win: usize, heads: usize) -> Vec<usize> {
    let n = win * win;
    let span = 2 * win - 1;
    let mut idx = vec![0; heads * n * n];
    for hd in 0..heads {
        for i in 0..n {
            let (y1, x1) = (i / win, i % win);
            for j in 0..n {
                let (y2, x2) = (j / win, j % win);
                let r = (y1 + win - 1 - y2) * span + (x1 + win - 1 - x2);
                idx[(hd * n + i) * n + j] = r * heads + hd;
            }
        }
    }
    idx
}

impl SpatialBranch {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, c: usize, cfg: &RestorationConfig) -> Self {
        let heads = (c / cfg.head_dim).max(1);
        let span = 2 * cfg.window - 1;
        pb.scope("spatial", |pb| Self {
            qkv: Linear::new(pb, "qkv", c, 3 * c, true),
            proj: Linear::new(pb, "proj", c, c, true),
            rel_bias: pb.normal("rel_bias", &[span * span, heads], 0.02),
            ln: LayerNorm::new(pb, "ln", c),
            ffn1: Linear::new(pb, "ffn1", c, 2 * c, true),
            ffn2: Linear::new(pb, "ffn2", 2 * c, c, true),
            heads,
            window: cfg.window,
        })
    }

    /// Multi-head self-attention within each window: `tokens [nw * n, c]`.
    /// Returns the projected output and the attention weights `[nw, heads, n, n]`.
    pub fn window_attention<T: Real>(&self, g: &mut Graph<T>, tokens: Var, nw: usize) -> (Var, Var) {
        let c = g.shape(tokens)[1];
        let n = self.window * self.window;
        let nh = self.heads;
        let hd = c / nh;
        let qkv = self.qkv.forward(g, tokens);
        let qkv = g.reshape(qkv, &[nw, n, 3, nh, hd]);
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4]);
        let q = g.slice(qkv, 0, 1);
        let k = g.slice(qkv, 1, 1);
        let v = g.slice(qkv, 2, 1);
        let scores = g.bmm(q, false, k, true, nw * nh, n, hd, n);
        let scores = g.scale(scores, T::c(1.0 / libm::sqrt(hd as f64)));
        let scores = g.reshape(scores, &[nw, nh, n, n]);
        let table = g.param(self.rel_bias);
        let bias = g.gather(table, rel_bias_index(self.window, nh), &[nh, n, n]);
        let scores = g.add_b(scores, bias);
        let attn = g.softmax(scores);
        let out = g.bmm(attn, false, v, false, nw * nh, n, n, hd);
        let out = g.reshape(out, &[nw, nh, n, hd]);
        let out = g.permute(out, &[0, 2, 1, 3]);
        let out = g.reshape(out, &[nw * n, c]);
        (self.proj.forward(g, out), attn)
    }

    /// Window attention plus feed-forward on `[c, h, w]`; the input is
    /// reflect-padded to window multiples and the padding removed afterwards.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let win = self.window;
        let (hp, wp) = (h.div_ceil(win) * win, w.div_ceil(win) * win);
        let xp = if (hp, wp) != (h, w) { g.pad2d(x, 0, hp - h, 0, wp - w, PadMode::Reflect) } else { x };
        let (nh, nw) = (hp / win, wp / win);
        let t = g.reshape(xp, &[c, nh, win, nw, win]);
        let t = g.permute(t, &[1, 3, 2, 4, 0]);
        let t = g.reshape(t, &[nh * nw * win * win, c]);
        let (att, _) = self.window_attention(g, t, nh * nw);
        let a = g.add(t, att);
        let f = self.ln.forward(g, a);
        let f = self.ffn1.forward(g, f);
        let f = g.gelu(f);
        let f = self.ffn2.forward(g, f);
        let a = g.add(a, f);
        let a = g.reshape(a, &[nh, nw, win, win, c]);
        let a = g.permute(a, &[4, 0, 2, 1, 3]);
        let a = g.reshape(a, &[c, hp, wp]);
        g.crop2d(a, 0, 0, h, w)
    }
}

/// Gated depthwise feed-forward: `1x1 -> 2h`, depthwise 3x3, `gelu(a) * b`, `1x1 -> c`.
#[derive(Clone, Debug)]
pub struct Expert {
    pub expand: Conv2d,
    pub dw: DwConv3,
    pub project: Conv2d,
    pub hidden: usize,
}

impl Expert {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, name: &str, c: usize, hidden: usize) -> Self {
        pb.scope(name, |pb| Self {
            expand: Conv2d::new(pb, "expand", c, 2 * hidden, 1, 1, 0),
            dw: DwConv3::new(pb, "dw", 2 * hidden),
            project: Conv2d::new(pb, "project", hidden, c, 1, 1, 0),
            hidden,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let h = self.expand.forward(g, x);
        let h = self.dw.forward(g, h);
        let a = g.slice(h, 0, self.hidden);
        let b = g.slice(h, self.hidden, self.hidden);
        let a = g.gelu(a);
        let m = g.mul(a, b);
        self.project.forward(g, m)
    }
}

#[derive(Clone, Debug)]
pub struct Moe {
    pub gate_g: Linear,
    pub gate_s: Linear,
    /// Single gate over all eight experts, used when routing is not decoupled.
    pub gate_all: Linear,
    pub global: Vec<Expert>,
    pub spatial: Vec<Expert>,
    pub routers: Vec<Conv2d>,
    pub base: Expert,
}

/// Renormalized routing weights of one feed-forward call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingState {
    pub pi_g: [f64; 3],
    pub pi_s: [f64; 5],
    pub router_means: [f64; 5],
}

impl Moe {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, c: usize, cfg: &RestorationConfig) -> Self {
        let e = cfg.cond.e;
        let hidden = c * cfg.expert_expansion;
        pb.scope("moe", |pb| Self {
            gate_g: Linear::new(pb, "gate_g", c + e, 3, true),
            gate_s: Linear::new(pb, "gate_s", c + e, 5, true),
            gate_all: Linear::new(pb, "gate_all", c + e, NUM_FACTORS, true),
            global: Factor::GLOBAL.iter().map(|f| Expert::new(pb, &format!("global.{}", f.name()), c, hidden)).collect(),
            spatial: Factor::SPATIAL.iter().map(|f| Expert::new(pb, &format!("spatial.{}", f.name()), c, hidden)).collect(),
            routers: Factor::SPATIAL.iter().map(|f| Conv2d::new(pb, &format!("router.{}", f.name()), c, 1, 1, 1, 0)).collect(),
            base: Expert::new(pb, "base", c, (hidden / 2).max(1)),
        })
    }

    fn gate<T: Real>(&self, g: &mut Graph<T>, lin: &Linear, x: Var, cond: Var) -> Var {
        let gap = g.gap(x);
        let inp = g.concat(&[gap, cond]);
        let n = g.value(inp).len();
        let inp = g.reshape(inp, &[1, n]);
        let l = lin.forward(g, inp);
        let p = g.softmax(l);
        let k = g.value(p).len();
        g.reshape(p, &[k])
    }

    /// `B(x) + sum_i pi_g,i E_i(x) + sum_j pi_s,j R_j * E_j(x)` with masked,
    /// renormalized weights. Experts whose weight is exactly zero are skipped.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, cond: Var, mask: &[f64; NUM_FACTORS], ab: &Ablation) -> (Var, RoutingState) {
        let mut y = self.base.forward(g, x);
        let mut st = RoutingState::default();
        if ab.shared_moe || ab.no_decouple_gate {
            let p = self.gate(g, &self.gate_all, x, cond);
            let w = if ab.shared_moe {
                p
            } else {
                let m: Vec<T> = mask.iter().map(|v| T::c(*v)).collect();
                g.masked_renorm(p, &m)
            };
            for f in Factor::ALL {
                let wi = g.slice(w, f.index(), 1);
                if g.value(wi)[0] == T::zero() {
                    continue;
                }
                let (expert, router) = match Factor::GLOBAL.iter().position(|q| *q == f) {
                    Some(i) => (&self.global[i], None),
                    None => {
                        let j = Factor::SPATIAL.iter().position(|q| *q == f).unwrap();
                        (&self.spatial[j], Some(j))
                    }
                };
                let mut out = expert.forward(g, x);
                if let (Some(j), false, false) = (router, ab.shared_moe, ab.no_spatial_router) {
                    let r = self.routers[j].forward(g, x);
                    let r = g.sigmoid(r);
                    st.router_means[j] = mean_of(g.value(r));
                    out = g.mul_b(out, r);
                }
                let term = g.scale_by(out, wi);
                y = g.add(y, term);
                let wv = g.value(wi)[0].f64();
                match router {
                    Some(j) => st.pi_s[j] = wv,
                    None => st.pi_g[Factor::GLOBAL.iter().position(|q| *q == f).unwrap()] = wv,
                }
            }
            return (y, st);
        }
        let mg: Vec<T> = Factor::GLOBAL.iter().map(|f| T::c(mask[f.index()])).collect();
        let ms: Vec<T> = Factor::SPATIAL.iter().map(|f| T::c(mask[f.index()])).collect();
        let any_g = mg.iter().any(|v| *v != T::zero());
        let any_s = ms.iter().any(|v| *v != T::zero());
        if any_g {
            let p = self.gate(g, &self.gate_g, x, cond);
            let w = g.masked_renorm(p, &mg);
            for (i, expert) in self.global.iter().enumerate() {
                let wi = g.slice(w, i, 1);
                let wv = g.value(wi)[0];
                st.pi_g[i] = wv.f64();
                if wv == T::zero() {
                    continue;
                }
                let out = expert.forward(g, x);
                let term = g.scale_by(out, wi);
                y = g.add(y, term);
            }
        }
        if any_s {
            let p = self.gate(g, &self.gate_s, x, cond);
            let w = g.masked_renorm(p, &ms);
            for (j, expert) in self.spatial.iter().enumerate() {
                let wj = g.slice(w, j, 1);
                let wv = g.value(wj)[0];
                st.pi_s[j] = wv.f64();
                if wv == T::zero() {
                    continue;
                }
                let mut out = expert.forward(g, x);
                if !ab.no_spatial_router {
                    let r = self.routers[j].forward(g, x);
                    let r = g.sigmoid(r);
                    st.router_means[j] = mean_of(g.value(r));
                    out = g.mul_b(out, r);
                }
                let term = g.scale_by(out, wj);
                y = g.add(y, term);
            }
        }
        (y, st)
    }
}

fn mean_of<T: Real>(v: &[T]) -> f64 {
    v.iter().map(|x| x.f64()).sum::<f64>() / v.len().max(1) as f64
}

/// One dual-domain block with its mixture-of-experts feed-forward.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub freq: FrequencyBranch,
    pub spatial: SpatialBranch,
    pub gate_logit: ParamId,
    pub ln2: LayerNorm,
    pub moe: Moe,
}

pub struct BlockOut {
    pub y: Var,
    pub freq: Option<Var>,
    pub spatial: Var,
    pub mix: Var,
    pub routing: RoutingState,
}

impl Block {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, name: &str, c: usize, cfg: &RestorationConfig) -> Self {
        pb.scope(name, |pb| Self {
            ln1: LayerNorm::new(pb, "ln1", c),
            freq: FrequencyBranch::new(pb, c, cfg),
            spatial: SpatialBranch::new(pb, c, cfg),
            gate_logit: pb.zeros("gate_logit", &[1]),
            ln2: LayerNorm::new(pb, "ln2", c),
            moe: Moe::new(pb, c, cfg),
        })
    }

    /// `w X_freq + (1 - w) X_spatial` with `w = sigmoid(gate_logit)`.
    pub fn cdcb<T: Real>(&self, g: &mut Graph<T>, xn: Var, cond: Var, ab: &Ablation) -> (Var, Option<Var>, Var) {
        let xs = self.spatial.forward(g, xn);
        if ab.no_freq_branch {
            return (xs, None, xs);
        }
        let xf = self.freq.forward(g, xn, cond, ab).out;
        let w = if ab.no_gate {
            g.constant(&[1], vec![T::c(0.5)])
        } else {
            let l = g.param(self.gate_logit);
            g.sigmoid(l)
        };
        let mix = gate_mix(g, xf, xs, w);
        (mix, Some(xf), xs)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, cond: Var, mask: &[f64; NUM_FACTORS], ab: &Ablation) -> BlockOut {
        let xn = self.ln1.forward_channels(g, x);
        let (mix, freq, spatial) = self.cdcb(g, xn, cond, ab);
        let x1 = g.add(x, mix);
        let xn2 = self.ln2.forward_channels(g, x1);
        let (f, routing) = self.moe.forward(g, xn2, cond, mask, ab);
        let y = g.add(x1, f);
        BlockOut { y, freq, spatial, mix, routing }
    }
}

/// Convex combination `w a + (1 - w) b` for a one-element weight `w`.
pub fn gate_mix<T: Real>(g: &mut Graph<T>, a: Var, b: Var, w: Var) -> Var {
    let d = g.sub(a, b);
    let wd = g.scale_by(d, w);
    g.add(b, wd)
}

/// Low-resolution branch: bilinear 4x down, small CNN, bilinear 4x up.
#[derive(Clone, Debug)]
pub struct BaseBranch {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
}

impl BaseBranch {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, hidden: usize) -> Self {
        pb.scope("base", |pb| Self {
            conv1: Conv2d::new(pb, "conv1", 3, hidden, 3, 1, 1),
            conv2: Conv2d::new(pb, "conv2", hidden, hidden, 3, 1, 1),
            conv3: Conv2d::with_std(pb, "conv3", hidden, 3, 3, 1, 1, 0.01),
        })
    }

    /// `x [3, h, w]` with `h, w` multiples of 4. With `skip`, the CNN output
    /// is added to the downsampled input before upsampling.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, skip: bool) -> Var {
        let s = g.shape(x).to_vec();
        let (h, w) = (s[1], s[2]);
        let d = g.resize(x, h / 4, w / 4);
        let t = self.conv1.forward(g, d);
        let t = g.gelu(t);
        let t = self.conv2.forward(g, t);
        let t = g.gelu(t);
        let t = self.conv3.forward(g, t);
        let t = if skip { g.add(t, d) } else { t };
        g.resize(t, h, w)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub in_conv: Conv2d,
    pub stages: Vec<Vec<Block>>,
    pub down: [Conv2d; 2],
    pub up: [Conv2d; 2],
    pub fuse: [Conv2d; 2],
    pub out_conv: Conv2d,
}

impl Backbone {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, cfg: &RestorationConfig) -> Self {
        let w = cfg.widths;
        pb.scope("backbone", |pb| Self {
            in_conv: Conv2d::new(pb, "in_conv", 3, w[0], 3, 1, 1),
            stages: (0..5)
                .map(|s| (0..cfg.blocks_per_stage).map(|b| Block::new(pb, &format!("s{s}.b{b}"), w[s], cfg)).collect())
                .collect(),
            down: [Conv2d::new(pb, "down0", 4 * w[0], w[1], 1, 1, 0), Conv2d::new(pb, "down1", 4 * w[1], w[2], 1, 1, 0)],
            up: [Conv2d::new(pb, "up0", w[2], 4 * w[3], 1, 1, 0), Conv2d::new(pb, "up1", w[3], 4 * w[4], 1, 1, 0)],
            fuse: [Conv2d::new(pb, "fuse0", w[1], w[3], 1, 1, 0), Conv2d::new(pb, "fuse1", w[0], w[4], 1, 1, 0)],
            out_conv: Conv2d::with_std(pb, "out_conv", w[4], 3, 3, 1, 1, 1e-3),
        })
    }

    /// `x [3, h, w]` (multiples of 4), conditioning `[5, e]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, cond: Var, mask: &[f64; NUM_FACTORS], ab: &Ablation) -> (Var, Vec<RoutingState>) {
        let mut routing = Vec::new();
        let e = g.shape(cond)[1];
        let mut run = |g: &mut Graph<T>, s: usize, mut h: Var| {
            let row = g.slice(cond, s, 1);
            let gs = g.reshape(row, &[e]);
            for blk in &self.stages[s] {
                let o = blk.forward(g, h, gs, mask, ab);
                routing.push(o.routing);
                h = o.y;
            }
            h
        };
        let h0 = self.in_conv.forward(g, x);
        let e1 = run(g, 0, h0);
        let d1 = g.pixel_unshuffle(e1);
        let d1 = self.down[0].forward(g, d1);
        let e2 = run(g, 1, d1);
        let d2 = g.pixel_unshuffle(e2);
        let d2 = self.down[1].forward(g, d2);
        let e3 = run(g, 2, d2);
        let u1 = self.up[0].forward(g, e3);
        let u1 = g.pixel_shuffle(u1);
        let f1 = self.fuse[0].forward(g, e2);
        let u1 = g.add(u1, f1);
        let e4 = run(g, 3, u1);
        let u2 = self.up[1].forward(g, e4);
        let u2 = g.pixel_shuffle(u2);
        let f2 = self.fuse[1].forward(g, e1);
        let u2 = g.add(u2, f2);
        let e5 = run(g, 4, u2);
        (self.out_conv.forward(g, e5), routing)
    }
}

/// Conditioning encoder, backbone and base branch.
#[derive(Clone, Debug)]
pub struct Restorer {
    pub cfg: RestorationConfig,
    pub cond: TokenBank,
    pub backbone: Backbone,
    pub base: BaseBranch,
}

pub struct RestoreOutput {
    /// Final prediction `[3, h, w]` (unclamped).
    pub y: Var,
    pub base: Option<Var>,
    pub res: Var,
    pub cond: Var,
    pub routing: Vec<RoutingState>,
}

impl Restorer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: RestorationConfig, seed: u64) -> Self {
        let mut pb = ParamBuilder::new(store, seed);
        let (cond, backbone, base) = pb.scope("restore", |pb| {
            (TokenBank::new(pb, cfg.cond.clone()), Backbone::new(pb, &cfg), BaseBranch::new(pb, cfg.base_hidden))
        });
        Self { cfg, cond, backbone, base }
    }

    /// `y = y_base + y_res` for `x [3, h, w]`; `mask` holds the eight
    /// (possibly soft) factor bits and `p [d]` the semantic embedding.
    /// Inputs are reflect-padded to multiples of 4 and the output cropped back.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, mask: &[f64; NUM_FACTORS], p: Var, ab: &Ablation) -> RestoreOutput {
        let s = g.shape(x).to_vec();
        let (h, w) = (s[1], s[2]);
        let (hp, wp) = (h.div_ceil(4) * 4, w.div_ceil(4) * 4);
        let xp = if (hp, wp) != (h, w) { g.pad2d(x, 0, hp - h, 0, wp - w, PadMode::Reflect) } else { x };
        let c = self.cond.forward(g, mask, p, ab);
        let (res, routing) = self.backbone.forward(g, xp, c.g, mask, ab);
        let skips = self.cfg.input_skips;
        let (y, base, res) = if ab.no_dual_branch {
            let res = if skips { g.add(res, xp) } else { res };
            (res, None, res)
        } else {
            let base = self.base.forward(g, xp, skips);
            let res = if skips {
                // high-frequency part of the input
                let d = g.resize(xp, hp / 4, wp / 4);
                let low = g.resize(d, hp, wp);
                let hi = g.sub(xp, low);
                g.add(res, hi)
            } else {
                res
            };
            (g.add(base, res), Some(base), res)
        };
        let crop = |g: &mut Graph<T>, v: Var| g.crop2d(v, 0, 0, h, w);
        let y = crop(g, y);
        let base = base.map(|b| crop(g, b));
        let res = crop(g, res);
        RestoreOutput { y, base, res, cond: c.g, routing }
    }

    /// Inference with a clamped output.
    pub fn restore(&self, params: &ParamStore<f32>, x: &Tensor<f32>, mask: &[f64; NUM_FACTORS], p: &[f64], ab: &Ablation) -> Tensor<f32> {
        let mut g = Graph::inference(params);
        let xv = g.input(x.clone());
        let pv = g.input(Tensor::from_vec(&[p.len()], p.iter().map(|v| *v as f32).collect()));
        let out = self.forward(&mut g, xv, mask, pv, ab);
        g.tensor(out.y).map(|v| v.clamp(0.0, 1.0))
    }
}
