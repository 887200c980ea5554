//! Structural invariants of conditioning, routing and the restoration backbone.

use mdr_core::ablation::Ablation;
use mdr_core::conditioning::{ConditioningConfig, TokenBank, NUM_KEYS};
use mdr_core::degradation::{DegradationVector, Factor, NUM_FACTORS};
use mdr_core::fft::fold_frequency;
use mdr_core::nn::ParamBuilder;
use mdr_core::restoration::{channel_stats, BaseBranch, Block, FrequencyBranch, Moe, RestorationConfig, Restorer};
use mdr_core::rng::{normal, rng_from, uniform};
use mdr_core::{Graph, ParamId, ParamStore, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn randn(shape: &[usize], seed: u64, std: f64) -> Tensor<f64> {
    let mut r = rng_from(seed, &[3]);
    Tensor::from_fn(shape, |_| std * normal(&mut r))
}

fn randu(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng_from(seed, &[4]);
    Tensor::from_fn(shape, |_| uniform(&mut r, 0.0, 1.0))
}

fn mask_of(bits: u8) -> [f64; NUM_FACTORS] {
    let mut m = [0.0; NUM_FACTORS];
    for (j, v) in m.iter_mut().enumerate() {
        *v = ((bits >> j) & 1) as f64;
    }
    m
}

fn perturb(store: &mut ParamStore<f64>, ids: &[ParamId], seed: u64) {
    let mut r = rng_from(seed, &[5]);
    for &id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += normal(&mut r));
    }
}

fn perturb_token_rows(store: &mut ParamStore<f64>, tokens: ParamId, mask: &[f64; NUM_FACTORS], seed: u64) {
    let mut r = rng_from(seed, &[6]);
    let e = store.get(tokens).shape()[1];
    let t = store.get_mut(tokens).data_mut();
    for j in (0..NUM_FACTORS).filter(|j| mask[*j] == 0.0) {
        t[j * e..(j + 1) * e].iter_mut().for_each(|v| *v += 3.0 * normal(&mut r));
    }
}

fn conditioning(store: &ParamStore<f64>, bank: &TokenBank, mask: &[f64; NUM_FACTORS], p: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new(store);
    let pv = g.input(p.clone());
    let c = bank.forward(&mut g, mask, pv, &Ablation::full());
    (g.value(c.g).to_vec(), g.value(c.attn).to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn strict_masking_ignores_inactive_tokens(bits in any::<u8>(), seed in 0u64..1000) {
        let mut store = ParamStore::<f64>::new();
        let bank = TokenBank::new(&mut ParamBuilder::new(&mut store, seed), ConditioningConfig::default());
        let mask = mask_of(bits);
        let p = randn(&[128], seed, 1.0);
        let (g0, attn) = conditioning(&store, &bank, &mask, &p);
        // inactive keys get exactly zero weight; rows sum to one
        for row in attn.chunks(NUM_KEYS) {
            for j in 0..NUM_FACTORS {
                if mask[j] == 0.0 {
                    prop_assert_eq!(row[j], 0.0);
                }
            }
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let mut moved = store.clone();
        perturb_token_rows(&mut moved, bank.tokens, &mask, seed + 1);
        let (g1, _) = conditioning(&moved, &bank, &mask, &p);
        prop_assert!(g0.iter().zip(&g1).all(|(a, b)| a.to_bits() == b.to_bits()));
        // and the gradient with respect to inactive rows is exactly zero
        let mut g = Graph::new(&store);
        let pv = g.input(p.clone());
        let c = bank.forward(&mut g, &mask, pv, &Ablation::full());
        let s = g.sum_all(c.g);
        let grads = g.backward(s);
        let gt = grads.get(bank.tokens).unwrap();
        for j in (0..NUM_FACTORS).filter(|j| mask[*j] == 0.0) {
            prop_assert!(gt.data()[j * 256..(j + 1) * 256].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn renormalized_routing_is_a_simplex(logits in proptest::collection::vec(-6.0f64..6.0, 5), bits in 0u8..32) {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let l = g.input(Tensor::from_vec(&[5], logits));
        let p = g.softmax(l);
        let mask: Vec<f64> = (0..5).map(|j| ((bits >> j) & 1) as f64).collect();
        let r = g.masked_renorm(p, &mask);
        let v = g.value(r);
        prop_assert!(v.iter().all(|x| *x >= 0.0));
        for j in 0..5 {
            if mask[j] == 0.0 {
                prop_assert_eq!(v[j], 0.0);
            }
        }
        let s: f64 = v.iter().sum();
        if bits == 0 {
            prop_assert!(v.iter().all(|x| *x == 0.0));
        } else {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spectral_logits_have_bounded_rank(seed in 0u64..500, h in 8usize..40, w in 8usize..40) {
        let cfg = RestorationConfig::desk();
        let mut store = ParamStore::<f64>::new();
        let fb = FrequencyBranch::new(&mut ParamBuilder::new(&mut store, seed), 12, &cfg);
        let big = randn(store.get(fb.v_h).shape(), seed, 1.0);
        *store.get_mut(fb.v_h) = big;
        let mut g = Graph::new(&store);
        for m in 0..cfg.freq_experts {
            let l = fb.logits(&mut g, m, h, w);
            let c = store.get(fb.c).data()[m];
            let wq = w / 2 + 1;
            // rows of the real-input half-spectrum grid [h, w/2 + 1]
            let lv = g.value(l);
            let mat = DMatrix::from_fn(h, wq, |y, x| lv[fold_frequency(y, h) * wq + x] - c);
            let sv = mat.singular_values();
            let mut s: Vec<f64> = sv.iter().copied().collect();
            s.sort_by(|a, b| b.partial_cmp(a).unwrap());
            for v in &s[cfg.rank.min(s.len())..] {
                prop_assert!(*v < 1e-5, "singular value {} beyond rank {}", v, cfg.rank);
            }
        }
    }
}

#[test]
fn dc_correction_is_bounded() {
    let cfg = RestorationConfig::desk();
    let c = 12;
    let mut store = ParamStore::<f64>::new();
    let fb = FrequencyBranch::new(&mut ParamBuilder::new(&mut store, 9), c, &cfg);
    // large weights to drive tanh into saturation
    let big = randn(store.get(fb.dc2.w).shape(), 10, 5.0);
    *store.get_mut(fb.dc2.w) = big;
    store.get_mut(fb.b_dc).data_mut()[0] = 0.37;
    let mut worst: f64 = 0.0;
    for i in 0..1000u64 {
        let mut g = Graph::new(&store);
        let cond = g.input(randn(&[256], i, 2.0));
        let mu = g.input(randn(&[c], i + 5000, 1.0));
        let sd = g.input(randu(&[c], i + 9000));
        let dc = fb.dc_correction(&mut g, cond, mu, sd);
        for v in g.value(dc) {
            worst = worst.max((v - 1.37).abs());
        }
    }
    assert!(worst <= 0.1 + 1e-12, "{worst}");
    assert!(worst > 0.09, "saturation not reached: {worst}");
    // zero MLP output leaves exactly 1 + b_dc
    *store.get_mut(fb.dc2.w) = Tensor::zeros(store.get(fb.dc2.w).shape());
    *store.get_mut(fb.dc2.b.unwrap()) = Tensor::zeros(&[c]);
    let mut g = Graph::new(&store);
    let cond = g.input(randn(&[256], 1, 1.0));
    let mu = g.input(randn(&[c], 2, 1.0));
    let sd = g.input(randu(&[c], 3));
    let dc = fb.dc_correction(&mut g, cond, mu, sd);
    assert!(g.value(dc).iter().all(|v| *v == 1.0 + 0.37));
}

#[test]
fn unit_dc_preserves_channel_means() {
    let (c, h, w) = (4, 12, 10);
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.input(randu(&[c, h, w], 11));
    let mask = g.input(Tensor::full(&[h, w], 1.0));
    let dc = g.input(Tensor::full(&[c], 1.0));
    let y = g.spectral_filter(x, mask, Some(dc));
    let (mx, _) = channel_stats(&mut g, x);
    let (my, _) = channel_stats(&mut g, y);
    for (a, b) in g.value(mx).iter().zip(g.value(my)) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn saturated_mask_reduces_to_output_projection() {
    let (c, h, w) = (12, 16, 16);
    let cfg = RestorationConfig::desk();
    let mut store = ParamStore::<f64>::new();
    let fb = FrequencyBranch::new(&mut ParamBuilder::new(&mut store, 12), c, &cfg);
    *store.get_mut(fb.c) = Tensor::full(&[cfg.freq_experts], 20.0);
    for id in [fb.v_h, fb.v_w] {
        *store.get_mut(id) = Tensor::zeros(store.get(id).shape());
    }
    let ab = Ablation::full().with(mdr_core::ablation::Variant::NoDcCorrection);
    let mut g = Graph::new(&store);
    let x = g.input(randu(&[c, h, w], 13));
    let cond = g.input(randn(&[256], 14, 1.0));
    let out = fb.forward(&mut g, x, cond, &ab);
    let pi: f64 = g.value(out.pi).iter().sum();
    assert!((pi - 1.0).abs() < 1e-6);
    let direct = fb.w_out.forward(&mut g, x);
    let err = g.value(out.out).iter().zip(g.value(direct)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-3, "{err}");
}

fn block_and_inputs(seed: u64) -> (ParamStore<f64>, Block, Tensor<f64>, Tensor<f64>) {
    let c = 12;
    let mut store = ParamStore::<f64>::new();
    let block = Block::new(&mut ParamBuilder::new(&mut store, seed), "blk", c, &RestorationConfig::desk());
    (store, block, randn(&[c, 16, 16], seed + 1, 1.0), randn(&[256], seed + 2, 1.0))
}

#[test]
fn gate_is_a_convex_combination() {
    let (mut store, block, x, cond) = block_and_inputs(20);
    let ab = Ablation::full();
    for (logit, exact) in [(0.0, true), (1.3, false), (-2.0, false), (20.0, false)] {
        store.get_mut(block.gate_logit).data_mut()[0] = logit;
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let cv = g.input(cond.clone());
        let (mix, xf, xs) = block.cdcb(&mut g, xv, cv, &ab);
        let w = 1.0 / (1.0 + (-logit).exp());
        let (m, f, s) = (g.value(mix), g.value(xf.unwrap()), g.value(xs));
        let err = (0..m.len()).map(|i| (m[i] - (w * f[i] + (1.0 - w) * s[i])).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
        if exact {
            assert!((0..m.len()).all(|i| m[i] == 0.5 * f[i] + 0.5 * s[i] || (m[i] - (0.5 * f[i] + 0.5 * s[i])).abs() < 1e-15));
        }
        if logit == 20.0 {
            assert!((0..m.len()).all(|i| (m[i] - f[i]).abs() < 1e-3 * (1.0 + f[i].abs() + s[i].abs())));
        }
        // segment membership channel-wise
        for i in 0..m.len() {
            let (lo, hi) = (f[i].min(s[i]), f[i].max(s[i]));
            assert!(m[i] >= lo - 1e-12 && m[i] <= hi + 1e-12);
        }
    }
}

fn moe_out(store: &ParamStore<f64>, moe: &Moe, x: &Tensor<f64>, cond: &Tensor<f64>, mask: &[f64; 8]) -> Vec<f64> {
    let mut g = Graph::new(store);
    let xv = g.input(x.clone());
    let cv = g.input(cond.clone());
    let (y, _) = moe.forward(&mut g, xv, cv, mask, &Ablation::full());
    g.value(y).to_vec()
}

#[test]
fn empty_mask_feed_forward_is_the_base_expert() {
    let (store, block, x, cond) = block_and_inputs(30);
    let y = moe_out(&store, &block.moe, &x, &cond, &[0.0; 8]);
    let mut g = Graph::new(&store);
    let xv = g.input(x.clone());
    let b = block.moe.base.forward(&mut g, xv);
    assert!(y.iter().zip(g.value(b)).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn haze_only_feed_forward_ignores_spatial_experts() {
    let (store, block, x, cond) = block_and_inputs(40);
    let mask = DegradationVector::from_factors(&[Factor::Haze]).to_reals::<f64>();
    let y0 = moe_out(&store, &block.moe, &x, &cond, &mask);
    let spatial: Vec<ParamId> = store.ids().filter(|id| {
        let n = &store.entry(*id).name;
        n.contains(".moe.spatial.") || n.contains(".moe.router.") || n.contains(".moe.gate_s.")
    }).collect();
    assert!(spatial.len() >= 5 * 3);
    let mut moved = store.clone();
    perturb(&mut moved, &spatial, 41);
    let y1 = moe_out(&moved, &block.moe, &x, &cond, &mask);
    assert!(y0.iter().zip(&y1).all(|(a, b)| a.to_bits() == b.to_bits()));
    // and the renormalized routing fixture
    let store0 = ParamStore::<f64>::new();
    let mut g = Graph::new(&store0);
    let p = g.input(Tensor::from_vec(&[5], vec![0.5, 0.3, 0.2, 0.0, 0.0]));
    let r = g.masked_renorm(p, &[1.0, 0.0, 1.0, 0.0, 0.0]);
    let want = [5.0 / 7.0, 0.0, 2.0 / 7.0, 0.0, 0.0];
    assert!(g.value(r).iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12));
}

fn small_restorer(seed: u64, skips: bool) -> (ParamStore<f64>, Restorer) {
    let mut store = ParamStore::<f64>::new();
    let cfg = RestorationConfig { input_skips: skips, ..RestorationConfig::desk() };
    let r = Restorer::new(&mut store, cfg, seed);
    (store, r)
}

struct Run {
    y: Vec<f64>,
    base: Option<Vec<f64>>,
    res: Vec<f64>,
    shape: Vec<usize>,
}

fn run(store: &ParamStore<f64>, r: &Restorer, x: &Tensor<f64>, mask: &[f64; 8], ab: &Ablation) -> Run {
    let mut g = Graph::new(store);
    let xv = g.input(x.clone());
    let p = g.input(randn(&[128], 99, 1.0));
    let o = r.forward(&mut g, xv, mask, p, ab);
    Run {
        y: g.value(o.y).to_vec(),
        base: o.base.map(|b| g.value(b).to_vec()),
        res: g.value(o.res).to_vec(),
        shape: g.shape(o.y).to_vec(),
    }
}

#[test]
fn haze_only_restoration_is_independent_of_inactive_parameters() {
    let (store, r) = small_restorer(50, true);
    let x = randu(&[3, 32, 32], 51);
    let mask = DegradationVector::from_factors(&[Factor::Haze]).to_reals::<f64>();
    let ab = Ablation::full();
    let y0 = run(&store, &r, &x, &mask, &ab).y;
    let exclusive: Vec<ParamId> = store.ids().filter(|id| {
        let n = &store.entry(*id).name;
        n.contains(".moe.spatial.") || n.contains(".moe.router.") || n.contains(".moe.gate_s.") || n.contains(".moe.gate_all.")
    }).collect();
    let mut moved = store.clone();
    perturb(&mut moved, &exclusive, 52);
    perturb_token_rows(&mut moved, r.cond.tokens, &mask, 53);
    let y1 = run(&moved, &r, &x, &mask, &ab).y;
    assert!(y0.iter().zip(&y1).all(|(a, b)| a.to_bits() == b.to_bits()));
    // the active token does matter
    let mut moved = store.clone();
    perturb_token_rows(&mut moved, r.cond.tokens, &[1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0], 54);
    let y2 = run(&moved, &r, &x, &mask, &ab).y;
    assert!(y0 != y2);
}

#[test]
fn dual_branch_ablation_returns_the_residual() {
    let (store, r) = small_restorer(60, true);
    let x = randu(&[3, 32, 32], 61);
    let mask = mask_of(0b0000_0101);
    let o = run(&store, &r, &x, &mask, &Ablation::from_variant(mdr_core::ablation::Variant::NoDualBranch));
    assert!(o.base.is_none());
    assert!(o.y.iter().zip(&o.res).all(|(a, b)| a.to_bits() == b.to_bits()));
    let full = run(&store, &r, &x, &mask, &Ablation::full());
    let b = full.base.unwrap();
    for i in 0..full.y.len() {
        assert!((full.y[i] - (b[i] + full.res[i])).abs() < 1e-12);
    }
}

#[test]
fn zeroed_residual_path_leaves_the_base() {
    let (mut store, r) = small_restorer(70, false);
    for id in [r.backbone.out_conv.w, r.backbone.out_conv.b] {
        *store.get_mut(id) = Tensor::zeros(store.get(id).shape());
    }
    let x = randu(&[3, 32, 32], 71);
    let o = run(&store, &r, &x, &mask_of(3), &Ablation::full());
    let b = o.base.unwrap();
    assert!(o.y.iter().zip(&b).all(|(a, b)| a == b));
}

#[test]
fn base_branch_degenerate_cases() {
    let mut store = ParamStore::<f64>::new();
    let bb = BaseBranch::new(&mut ParamBuilder::new(&mut store, 80), 16);
    let zero: Vec<ParamId> = store.ids().collect();
    for id in zero {
        *store.get_mut(id) = Tensor::zeros(store.get(id).shape());
    }
    let mut g = Graph::new(&store);
    let x = g.input(randu(&[3, 32, 24], 81));
    let y = bb.forward(&mut g, x, false);
    assert_eq!(g.shape(y), &[3, 32, 24]);
    assert!(g.value(y).iter().all(|v| *v == 0.0));
    // identity low-resolution path on a constant image
    let c = g.input(Tensor::full(&[3, 32, 24], 0.42));
    let y = bb.forward(&mut g, c, true);
    assert!(g.value(y).iter().all(|v| (v - 0.42).abs() < 1e-6));
}

#[test]
fn restore_handles_odd_sizes_and_stays_finite() {
    let (store, r) = small_restorer(90, true);
    for (h, w, bits) in [(32, 32, 0u8), (33, 45, 0b1010_0101), (40, 36, 0xff), (64, 64, 0b0001_0010)] {
        let x = randu(&[3, h, w], 91 + h as u64);
        let o = run(&store, &r, &x, &mask_of(bits), &Ablation::full());
        assert_eq!(o.shape, vec![3, h, w]);
        assert!(o.y.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn untrained_network_with_skips_is_close_to_identity() {
    let (store, r) = small_restorer(95, true);
    let x = randu(&[3, 32, 32], 96);
    let o = run(&store, &r, &x, &mask_of(1), &Ablation::full());
    let err = o.y.iter().zip(x.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64;
    assert!(err < 0.2, "{err}");
}

#[test]
fn every_parameter_receives_gradient_under_a_full_mask() {
    let mut store = ParamStore::<f32>::new();
    let r = Restorer::new(&mut store, RestorationConfig::desk(), 100);
    let x = randu(&[3, 32, 32], 101).cast::<f32>();
    let mut g = Graph::new(&store);
    let xv = g.input(x.clone());
    let p = g.input(randn(&[128], 102, 1.0).cast::<f32>());
    let o = r.forward(&mut g, xv, &[1.0; 8], p, &Ablation::full());
    let t = g.constant(&[3, 32, 32], x.data().iter().map(|v| 1.0 - v).collect());
    let d = g.sub(o.y, t);
    let sq = g.mul(d, d);
    let l = g.mean_all(sq);
    let base = o.base.unwrap();
    let lb = g.mean_all(base);
    let l = g.add(l, lb);
    let grads = g.backward(l);
    let dead: Vec<&str> = store
        .ids()
        .filter(|id| !store.entry(*id).name.contains("gate_all"))
        .filter(|id| grads.get(*id).is_none_or(|t| t.data().iter().all(|v| *v == 0.0)))
        .map(|id| store.entry(id).name.as_str())
        .collect();
    assert!(dead.is_empty(), "no gradient reaches {dead:?}");
}

