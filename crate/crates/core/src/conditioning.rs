//! Degradation token encoder: stage-wise conditioning vectors from the
//! perceived mask and semantic embedding through masked cross-attention.

use alloc::vec;
use alloc::vec::Vec;

use crate::ablation::Ablation;
use crate::degradation::NUM_FACTORS;
use crate::graph::{Graph, Var};
use crate::nn::{LayerNorm, Linear, ParamBuilder};
use crate::params::ParamId;
use crate::real::Real;

pub const NUM_STAGES: usize = 5;
pub const NUM_KEYS: usize = NUM_FACTORS + 2;
/// Additive attention bias on inactive keys when strict masking is ablated.
pub const SOFT_KEY_BIAS: f64 = -4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningConfig {
    pub e: usize,
    pub heads: usize,
    pub stages: usize,
    /// Semantic embedding width.
    pub d: usize,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self { e: 256, heads: 4, stages: NUM_STAGES, d: 128 }
    }
}

#[derive(Clone, Debug)]
pub struct TokenBank {
    pub cfg: ConditioningConfig,
    pub tokens: ParamId,
    pub queries: ParamId,
    pub w_p: Linear,
    pub ln_p: LayerNorm,
    pub mlp_g1: Linear,
    pub mlp_g2: Linear,
    pub ln_g: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln1: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub ln2: LayerNorm,
}

/// Keys `U [10, e]` plus which of them may be attended to.
pub struct KeySet {
    pub u: Var,
    pub key_mask: [bool; NUM_KEYS],
}

pub struct Conditioning {
    /// `[stages, e]`.
    pub g: Var,
    /// Attention weights `[heads, stages, keys]`.
    pub attn: Var,
}

impl TokenBank {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, cfg: ConditioningConfig) -> Self {
        let e = cfg.e;
        pb.scope("cond", |pb| Self {
            tokens: pb.normal("tokens", &[NUM_FACTORS, e], 0.02),
            queries: pb.normal("queries", &[cfg.stages, e], 0.02),
            w_p: Linear::new(pb, "w_p", cfg.d, e, true),
            ln_p: LayerNorm::new(pb, "ln_p", e),
            mlp_g1: Linear::new(pb, "mlp_g1", NUM_FACTORS + cfg.d, e, true),
            mlp_g2: Linear::new(pb, "mlp_g2", e, e, true),
            ln_g: LayerNorm::new(pb, "ln_g", e),
            wq: Linear::new(pb, "wq", e, e, false),
            wk: Linear::new(pb, "wk", e, e, false),
            wv: Linear::new(pb, "wv", e, e, false),
            wo: Linear::new(pb, "wo", e, e, true),
            ln1: LayerNorm::new(pb, "ln1", e),
            ffn1: Linear::new(pb, "ffn1", e, 4 * e, true),
            ffn2: Linear::new(pb, "ffn2", 4 * e, e, true),
            ln2: LayerNorm::new(pb, "ln2", e),
            cfg,
        })
    }

    /// `U = [u_1..u_8; u_p; u_g]` with `u_p = LN(W_p p)` and
    /// `u_g = LN(MLP_g([m, p]))`. `mask` holds the (possibly soft) factor bits.
    pub fn build_key_set<T: Real>(&self, g: &mut Graph<T>, mask: &[f64; NUM_FACTORS], p: Var, ab: &Ablation) -> KeySet {
        let d = self.cfg.d;
        let p = if ab.no_semantic_embedding {
            g.constant(&[1, d], vec![T::zero(); d])
        } else {
            g.reshape(p, &[1, d])
        };
        let up = self.w_p.forward(g, p);
        let up = self.ln_p.forward(g, up);
        let mv = g.constant(&[NUM_FACTORS], mask.iter().map(|v| T::c(*v)).collect());
        let pf = g.reshape(p, &[d]);
        let mp = g.concat(&[mv, pf]);
        let mp = g.reshape(mp, &[1, NUM_FACTORS + d]);
        let h = self.mlp_g1.forward(g, mp);
        let h = g.gelu(h);
        let h = self.mlp_g2.forward(g, h);
        let ug = self.ln_g.forward(g, h);
        let tokens = g.param(self.tokens);
        let u = g.concat(&[tokens, up, ug]);
        let mut key_mask = [false; NUM_KEYS];
        for j in 0..NUM_FACTORS {
            key_mask[j] = mask[j] > 0.0;
        }
        key_mask[NUM_FACTORS] = !ab.no_semantic_token;
        key_mask[NUM_FACTORS + 1] = !ab.no_global_token;
        KeySet { u, key_mask }
    }

    /// Additive attention bias per key.
    pub fn key_bias(&self, mask: &[f64; NUM_FACTORS], key_mask: &[bool; NUM_KEYS], ab: &Ablation) -> [f64; NUM_KEYS] {
        let mut b = [0.0; NUM_KEYS];
        for j in 0..NUM_KEYS {
            b[j] = if ab.soft_mask && j < NUM_FACTORS {
                // probabilities weight the keys instead of excluding them
                libm::log(mask[j].max(1e-6))
            } else if key_mask[j] {
                0.0
            } else if ab.no_strict_masking {
                SOFT_KEY_BIAS
            } else {
                f64::NEG_INFINITY
            };
        }
        b
    }

    /// Cross-attention of the stage queries over `U`, then a feed-forward
    /// block; both sub-blocks are residual and post-normalized.
    pub fn stage_conditioning<T: Real>(&self, g: &mut Graph<T>, keys: &KeySet, bias: &[f64; NUM_KEYS]) -> Conditioning {
        let e = self.cfg.e;
        let nh = self.cfg.heads;
        let hd = e / nh;
        let s = self.cfg.stages;
        let q_in = g.param(self.queries);
        let q = self.wq.forward(g, q_in);
        let k = self.wk.forward(g, keys.u);
        let v = self.wv.forward(g, keys.u);
        // [n, e] -> [heads, n, hd]
        let split = |g: &mut Graph<T>, x: Var, n: usize| {
            let r = g.reshape(x, &[n, nh, hd]);
            g.permute(r, &[1, 0, 2])
        };
        let qh = split(g, q, s);
        let kh = split(g, k, NUM_KEYS);
        let vh = split(g, v, NUM_KEYS);
        let scores = g.bmm(qh, false, kh, true, nh, s, hd, NUM_KEYS);
        let scores = g.scale(scores, T::c(1.0 / libm::sqrt(hd as f64)));
        let b = g.constant(&[NUM_KEYS], bias.iter().map(|v| T::c(*v)).collect());
        let scores = g.add_b(scores, b);
        let attn = g.softmax(scores);
        let out = g.bmm(attn, false, vh, false, nh, s, NUM_KEYS, hd);
        let out = g.permute(out, &[1, 0, 2]);
        let out = g.reshape(out, &[s, e]);
        let out = self.wo.forward(g, out);
        let z1 = g.add(q_in, out);
        let z1 = self.ln1.forward(g, z1);
        let f = self.ffn1.forward(g, z1);
        let f = g.gelu(f);
        let f = self.ffn2.forward(g, f);
        let z = g.add(z1, f);
        let z = self.ln2.forward(g, z);
        Conditioning { g: z, attn }
    }

    /// Full encoder: mask and embedding to `[stages, e]` conditioning.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, mask: &[f64; NUM_FACTORS], p: Var, ab: &Ablation) -> Conditioning {
        let keys = self.build_key_set(g, mask, p, ab);
        let bias = self.key_bias(mask, &keys.key_mask, ab);
        let mut c = self.stage_conditioning(g, &keys, &bias);
        if ab.no_stagewise {
            let g1 = g.slice(c.g, 0, 1);
            let parts: Vec<Var> = (0..self.cfg.stages).map(|_| g1).collect();
            c.g = g.concat(&parts);
        }
        c
    }
}
