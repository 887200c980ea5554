//! Factor-wise degradation perception with label-similarity-guided soft
//! cross-modal alignment.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::degradation::{DegradationVector, Factor, NUM_FACTORS, NUM_LABELS};
use crate::graph::{sigmoid, Graph, Var};
use crate::nn::{Conv2d, LayerNorm, Linear, ParamBuilder};
use crate::params::ParamStore;
use crate::real::Real;
use crate::rng::{hash_str, normal, rng_from};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const ALPHA: f64 = 2.0;
pub const TAU: f64 = 0.07;
pub const LAMBDA_ALIGN: f64 = 0.1;
pub const LAMBDA_CLS: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct PerceptionConfig {
    /// Embedding width.
    pub d: usize,
    /// Channel widths of the four strided encoder blocks.
    pub widths: [usize; 4],
    /// Side of the square input window seen by the encoder.
    pub input_size: usize,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self { d: 128, widths: [16, 32, 64, 128], input_size: 56 }
    }
}

/// Small trainable image encoder: four strided conv blocks, pooling and a projection.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub blocks: Vec<(Conv2d, LayerNorm)>,
    pub proj: Linear,
}

impl ImageEncoder {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, cfg: &PerceptionConfig) -> Self {
        pb.scope("encoder", |pb| {
            let mut cin = 3;
            let mut blocks = Vec::new();
            for (i, &c) in cfg.widths.iter().enumerate() {
                let conv = Conv2d::new(pb, &format!("conv{i}"), cin, c, 3, 2, 1);
                let ln = LayerNorm::new(pb, &format!("ln{i}"), c);
                blocks.push((conv, ln));
                cin = c;
            }
            let proj = Linear::new(pb, "proj", cin, cfg.d, true);
            Self { blocks, proj }
        })
    }

    /// `x [3, h, w] -> f [d]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let mut h = x;
        for (conv, ln) in &self.blocks {
            h = conv.forward(g, h);
            h = ln.forward_channels(g, h);
            h = g.gelu(h);
        }
        let p = g.gap(h);
        self.proj.forward(g, p)
    }
}

/// Multi-label head: layer norm, `d -> 2d`, GELU, `2d -> 9`.
#[derive(Clone, Copy, Debug)]
pub struct Head {
    pub ln: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Head {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, d: usize) -> Self {
        pb.scope("head", |pb| Self {
            ln: LayerNorm::new(pb, "ln", d),
            fc1: Linear::new(pb, "fc1", d, 2 * d, true),
            fc2: Linear::new(pb, "fc2", 2 * d, NUM_LABELS, true),
        })
    }
}

/// `z = head(f)` for `f [.., d]`.
pub fn predict_logits<T: Real>(g: &mut Graph<T>, head: &Head, f: Var) -> Var {
    let h = head.ln.forward(g, f);
    let h = head.fc1.forward(g, h);
    let h = g.gelu(h);
    head.fc2.forward(g, h)
}

/// Hard mask from the eight factor logits: present iff `z >= 0`, i.e.
/// `sigmoid(z) >= 0.5`. The clean logit, if present, is ignored.
pub fn threshold_mask<T: Real>(z: &[T]) -> DegradationVector {
    let mut b = [false; NUM_FACTORS];
    for (o, v) in b.iter_mut().zip(z) {
        *o = *v >= T::zero();
    }
    DegradationVector(b)
}

/// Cosine similarity between label rows (`K x K`, row-major).
pub fn label_similarity(labels: &[[f64; NUM_LABELS]]) -> Result<Vec<f64>> {
    let k = labels.len();
    let norms: Vec<f64> = labels.iter().map(|t| libm::sqrt(t.iter().map(|v| v * v).sum())).collect();
    if let Some(i) = norms.iter().position(|n| *n == 0.0) {
        return Err(Error::Invalid(format!("label row {i} has zero norm")));
    }
    let mut s = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let dot: f64 = labels[i].iter().zip(&labels[j]).map(|(a, b)| a * b).sum();
            s[i * k + j] = dot / (norms[i] * norms[j]);
        }
    }
    Ok(s)
}

fn softmax_rows(x: &[f64], k: usize, alpha: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..x.len() / k {
        let row = &x[r * k..(r + 1) * k];
        let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(alpha * v));
        let e: Vec<f64> = row.iter().map(|v| libm::exp(alpha * v - m)).collect();
        let s: f64 = e.iter().sum();
        for j in 0..k {
            out[r * k + j] = e[j] / s;
        }
    }
    out
}

/// Row-wise `softmax(alpha S)` and `softmax(alpha S^T)`.
pub fn soft_targets(s: &[f64], k: usize, alpha: f64) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(s.len(), k * k, "similarity matrix must be square");
    let mut st = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            st[j * k + i] = s[i * k + j];
        }
    }
    (softmax_rows(s, k, alpha), softmax_rows(&st, k, alpha))
}

/// Which way the KL divergence between prediction `P` and target `Q` is taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KlOrder {
    /// `KL(P || Q) = sum p log(p / q)`.
    #[default]
    PredictionFirst,
    /// `KL(Q || P) = sum q log(q / p)`.
    TargetFirst,
}

fn kl_rows<T: Real>(g: &mut Graph<T>, logits: Var, q: &[f64], k: usize, order: KlOrder) -> Var {
    let logp = g.log_softmax(logits);
    let logq: Vec<T> = q.iter().map(|v| T::c(libm::log(*v))).collect();
    let logq = g.constant(&[k, k], logq);
    let terms = match order {
        KlOrder::PredictionFirst => {
            let p = g.unary(logp, crate::graph::Unary::Exp);
            let diff = g.sub(logp, logq);
            g.mul(p, diff)
        }
        KlOrder::TargetFirst => {
            let qv = g.constant(&[k, k], q.iter().map(|v| T::c(*v)).collect());
            let diff = g.sub(logq, logp);
            g.mul(qv, diff)
        }
    };
    let s = g.sum_all(terms);
    g.scale(s, T::one() / T::c(k as f64))
}

/// Symmetric soft alignment loss between image embeddings `fi [K, d]` and
/// text embeddings `ft [K, d]` given label similarity `s` (`K x K`).
pub fn alignment_loss<T: Real>(g: &mut Graph<T>, fi: Var, ft: Var, s: &[f64], tau: f64, order: KlOrder) -> Var {
    let k = g.shape(fi)[0];
    let d = g.shape(fi)[1];
    assert_eq!(g.shape(ft), &[k, d], "image and text embeddings must align");
    let ni = g.l2_normalize_rows(fi);
    let nt = g.l2_normalize_rows(ft);
    let a = g.matmul_ex(ni, false, nt, true, k, d, k);
    let a = g.scale(a, T::c(1.0 / tau));
    let at = g.permute(a, &[1, 0]);
    let (q_it, q_ti) = soft_targets(s, k, ALPHA);
    let l1 = kl_rows(g, a, &q_it, k, order);
    let l2 = kl_rows(g, at, &q_ti, k, order);
    let sum = g.add(l1, l2);
    g.scale(sum, T::c(0.5))
}

/// Mean binary cross-entropy with logits over every element.
pub fn bce_with_logits<T: Real>(g: &mut Graph<T>, z: Var, targets: &[f64]) -> Var {
    let zv = g.value(z);
    assert_eq!(zv.len(), targets.len());
    let n = zv.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(zv.len());
    for (&zt, &t) in zv.iter().zip(targets) {
        let x = zt.f64();
        // max(x, 0) - x t + log(1 + exp(-|x|))
        total += x.max(0.0) - x * t + libm::log1p(libm::exp(-x.abs()));
        grad.push(T::c((sigmoid(x) - t) / n));
    }
    g.precomputed(T::c(total / n), vec![(z, grad)])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerceptionWeights {
    pub align: f64,
    pub cls: f64,
}

impl Default for PerceptionWeights {
    fn default() -> Self {
        Self { align: LAMBDA_ALIGN, cls: LAMBDA_CLS }
    }
}

/// `lambda_align * L_align + lambda_cls * L_cls`; returns the total and both terms.
#[allow(clippy::too_many_arguments)]
pub fn perception_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[f64],
    fi: Var,
    ft: Var,
    s: &[f64],
    w: PerceptionWeights,
    order: KlOrder,
) -> (Var, Var, Var) {
    let la = alignment_loss(g, fi, ft, s, TAU, order);
    let lc = bce_with_logits(g, logits, labels);
    let a = g.scale(la, T::c(w.align));
    let c = g.scale(lc, T::c(w.cls));
    (g.add(a, c), la, lc)
}

/// Prompt text for a label.
pub fn prompt(mask: &DegradationVector) -> String {
    if mask.is_clean() {
        return String::from("This image is clean.");
    }
    let words: Vec<&str> = mask.factors().iter().map(|f| f.phrase()).collect();
    format!("This image contains {}.", words.join(" and "))
}

/// Frozen text encoder: each lower-cased word maps to a fixed pseudo-random
/// vector derived from its hash; a prompt embeds as the mean of its words.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub d: usize,
    pub seed: u64,
}

impl TextEncoder {
    pub fn new(d: usize, seed: u64) -> Self {
        Self { d, seed }
    }

    pub fn word(&self, w: &str) -> Vec<f64> {
        let mut rng = rng_from(self.seed, &[hash_str(w)]);
        (0..self.d).map(|_| normal(&mut rng)).collect()
    }

    pub fn encode(&self, text: &str) -> Vec<f64> {
        let lower = text.to_ascii_lowercase();
        let words: Vec<&str> = lower.split(|c: char| !(c.is_ascii_alphanumeric() || c == '-')).filter(|w| !w.is_empty()).collect();
        let mut out = vec![0.0; self.d];
        for w in &words {
            for (o, v) in out.iter_mut().zip(self.word(w)) {
                *o += v;
            }
        }
        let n = words.len().max(1) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

/// Text embeddings computed once for a fixed prompt list.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptCache {
    pub prompts: Vec<String>,
    pub embeddings: Tensor<f32>,
}

impl PromptCache {
    pub fn build(encoder: &TextEncoder, masks: &[DegradationVector]) -> Self {
        let prompts: Vec<String> = masks.iter().map(prompt).collect();
        let mut data = Vec::with_capacity(prompts.len() * encoder.d);
        for p in &prompts {
            data.extend(encoder.encode(p).into_iter().map(|v| v as f32));
        }
        Self { embeddings: Tensor::from_vec(&[prompts.len(), encoder.d], data), prompts }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.embeddings.shape()[1];
        &self.embeddings.data()[i * d..(i + 1) * d]
    }

    pub fn index_of(&self, mask: &DegradationVector) -> Option<usize> {
        let p = prompt(mask);
        self.prompts.iter().position(|q| *q == p)
    }
}

/// Trainable perception network: encoder plus head.
#[derive(Clone, Debug)]
pub struct PerceptionModel {
    pub cfg: PerceptionConfig,
    pub encoder: ImageEncoder,
    pub head: Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerceptionOutput {
    pub logits: [f64; NUM_LABELS],
    pub mask: DegradationVector,
    pub embedding: Vec<f64>,
}

impl PerceptionOutput {
    pub fn probabilities(&self) -> [f64; NUM_FACTORS] {
        let mut p = [0.0; NUM_FACTORS];
        for (o, z) in p.iter_mut().zip(self.logits) {
            *o = sigmoid(z);
        }
        p
    }
}

impl PerceptionModel {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: PerceptionConfig, seed: u64) -> Self {
        let mut pb = ParamBuilder::new(store, seed);
        let (encoder, head) = pb.scope("perception", |pb| (ImageEncoder::new(pb, &cfg), Head::new(pb, cfg.d)));
        Self { cfg, encoder, head }
    }

    /// Embedding and logits of one `[3, h, w]` input.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> (Var, Var) {
        let f = self.encoder.forward(g, x);
        let f2 = g.reshape(f, &[1, self.cfg.d]);
        let z = predict_logits(g, &self.head, f2);
        (f, z)
    }

    /// Center crop to the encoder input size when the image is larger.
    pub fn prepare(&self, img: &Tensor<f32>) -> Tensor<f32> {
        let s = img.shape();
        let (h, w) = (s[1], s[2]);
        let n = self.cfg.input_size;
        if h <= n && w <= n {
            return img.clone();
        }
        let (ch, cw) = (h.min(n), w.min(n));
        let (y0, x0) = ((h - ch) / 2, (w - cw) / 2);
        let mut out = Vec::with_capacity(3 * ch * cw);
        for c in 0..3 {
            for y in y0..y0 + ch {
                let off = (c * h + y) * w + x0;
                out.extend_from_slice(&img.data()[off..off + cw]);
            }
        }
        Tensor::from_vec(&[3, ch, cw], out)
    }

    pub fn infer(&self, params: &ParamStore<f32>, img: &Tensor<f32>) -> PerceptionOutput {
        let mut g = Graph::inference(params);
        let x = g.input(self.prepare(img));
        let (f, z) = self.forward(&mut g, x);
        let zv = g.value(z);
        let mut logits = [0.0; NUM_LABELS];
        for (o, v) in logits.iter_mut().zip(zv) {
            *o = *v as f64;
        }
        PerceptionOutput {
            mask: threshold_mask(&logits[..NUM_FACTORS]),
            logits,
            embedding: g.value(f).iter().map(|v| *v as f64).collect(),
        }
    }
}

/// Factors named by a label row of nine bits (clean bit ignored).
pub fn factors_of_label(label: &[f64; NUM_LABELS]) -> Vec<Factor> {
    Factor::ALL.iter().copied().filter(|f| label[f.index()] > 0.5).collect()
}
