//! Stage I: perception training on aligned multi-task views.

use std::path::Path;

use mdr_core::degradation::{DegradationVector, NUM_FACTORS};
use mdr_core::optim::AdamW;
use mdr_core::perception::{
    label_similarity, perception_loss, PerceptionModel, PerceptionOutput, PerceptionWeights, PromptCache, TextEncoder,
};
use mdr_core::rng::{derive_seed, rng_from};
use mdr_core::synth::{crop, view_window};
use mdr_core::{Gradients, Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{PerceptionTrainConfig, RunConfig};
use crate::dataset::{Dataset, Role};
use crate::error::{Error, Result};
use crate::hash::sha256_hex;

pub const KIND: &str = "perception";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptionMeta {
    pub config: PerceptionTrainConfig,
    pub seed: u64,
    pub catalog_sha256: String,
    pub prompts: Vec<String>,
    /// Factor bits of each prompt.
    pub prompt_masks: Vec<String>,
    /// Digest of the cached text embeddings.
    pub text_sha256: String,
    /// Fingerprint of the trained parameters.
    pub fingerprint: u64,
}

/// A trained, frozen perception model.
#[derive(Clone, Debug)]
pub struct Perceiver {
    pub model: PerceptionModel,
    pub params: ParamStore<f32>,
    pub meta: PerceptionMeta,
    pub sha256: String,
}

fn text_digest(cache: &PromptCache) -> String {
    let bytes: Vec<u8> = cache.embeddings.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

impl Perceiver {
    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint<PerceptionMeta> = checkpoint::load(path, KIND)?;
        let meta = ck.meta;
        let mut params = ParamStore::new();
        let model = PerceptionModel::new(&mut params, meta.config.model(), 0);
        params.load_from(&ck.params)?;
        if params.fingerprint() != meta.fingerprint {
            return Err(Error::Frozen(format!("{}: parameter fingerprint differs from header", path.display())));
        }
        let masks = meta.prompt_masks.iter().map(|b| DegradationVector::parse_bits(b)).collect::<Result<Vec<_>, _>>()?;
        let cache = PromptCache::build(&TextEncoder::new(meta.config.d, meta.config.text_seed), &masks);
        if cache.prompts != meta.prompts || text_digest(&cache) != meta.text_sha256 {
            return Err(Error::Frozen(format!("{}: text embeddings differ from the ones trained against", path.display())));
        }
        Ok(Self { model, params, meta, sha256: ck.sha256 })
    }

    pub fn infer(&self, img: &Tensor<f64>) -> PerceptionOutput {
        self.model.infer(&self.params, &img.cast())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub align: f64,
    pub cls: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptionAccuracy {
    /// Mean over views and the eight factor bits.
    pub bit_accuracy: f64,
    /// Fraction of views whose whole mask is right.
    pub exact: f64,
    pub views: usize,
}

#[derive(Clone, Debug)]
pub struct Stage1Result {
    pub perceiver: Perceiver,
    pub epochs: Vec<EpochLog>,
    pub seen: PerceptionAccuracy,
    pub unseen: PerceptionAccuracy,
}

/// Per-bit accuracy on aligned views of `scenes` under the configs at `configs`.
pub fn accuracy(p: &Perceiver, ds: &Dataset, scenes: &[usize], configs: &[usize], seed: u64) -> Result<PerceptionAccuracy> {
    let side = p.model.cfg.input_size.min(ds.manifest.size);
    let (mut bits, mut exact, mut views) = (0usize, 0usize, 0usize);
    for &s in scenes {
        let (y0, x0) = view_window(ds.manifest.size, ds.manifest.size, side, ds.scene_id(s), seed)?;
        for &c in configs {
            let Some(img) = ds.image(s, c) else { continue };
            let out = p.infer(&crop(&img, y0, x0, side, side));
            let truth = ds.config(c).label;
            let right = (0..NUM_FACTORS).filter(|&j| out.mask.0[j] == truth.0[j]).count();
            bits += right;
            exact += usize::from(right == NUM_FACTORS);
            views += 1;
        }
    }
    if views == 0 {
        return Err(Error::Invalid("no views to score".into()));
    }
    Ok(PerceptionAccuracy { bit_accuracy: bits as f64 / (views * NUM_FACTORS) as f64, exact: exact as f64 / views as f64, views })
}

/// Trains the perception model and writes its checkpoint to `out`.
pub fn train(ds: &Dataset, run: &RunConfig, out: &Path, log: &mut dyn FnMut(&str)) -> Result<Stage1Result> {
    let cfg = &run.perception;
    let order = cfg.kl()?;
    let size = ds.manifest.size;
    if cfg.crop > size {
        return Err(Error::Invalid(format!("perception crop {} exceeds image size {size}", cfg.crop)));
    }
    let tasks: Vec<usize> = ds.catalog.catalog.training_tasks().iter().map(|t| ds.config_index(&t.name).expect("task in catalog")).collect();
    let masks: Vec<DegradationVector> = tasks.iter().map(|&c| ds.config(c).label).collect();
    let labels: Vec<[f64; 9]> = masks.iter().map(|m| m.label9()).collect();
    let flat: Vec<f64> = labels.iter().flatten().copied().collect();
    let sim = label_similarity(&labels)?;
    let text = TextEncoder::new(cfg.d, cfg.text_seed);
    let cache = PromptCache::build(&text, &masks);
    let text_before = text_digest(&cache);
    let k = tasks.len();
    let ft = cache.embeddings.clone();

    let mut params = ParamStore::<f32>::new();
    let model = PerceptionModel::new(&mut params, cfg.model(), derive_seed(run.seed, &[1]));
    let mut opt = AdamW::new(cfg.optim.adamw());
    let train_scenes = ds.scenes(Role::Train);
    let per_step = cfg.scenes_per_step.max(1);
    let total_steps = cfg.epochs * train_scenes.len().div_ceil(per_step);
    let weights = PerceptionWeights::default();
    let mut epochs = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order_rng = rng_from(run.seed, &[0x57a9e1, epoch as u64]);
        let mut scenes = train_scenes.clone();
        scenes.shuffle(&mut order_rng);
        let window_seed = derive_seed(run.seed, &[0x3d1e, epoch as u64]);
        let (mut sum, mut sum_a, mut sum_c, mut n) = (0.0, 0.0, 0.0, 0usize);
        for chunk in scenes.chunks(per_step) {
            let mut grads = Gradients::new(params.len());
            for &s in chunk {
                let (y0, x0) = view_window(size, size, cfg.crop, ds.scene_id(s), window_seed)?;
                let mut g = Graph::new(&params);
                let mut fs = Vec::with_capacity(k);
                let mut zs = Vec::with_capacity(k);
                for &c in &tasks {
                    let img = ds.image(s, c).ok_or_else(|| Error::Invalid(format!("scene {s} lacks config {}", ds.config(c).name)))?;
                    let x = g.input(crop(&img, y0, x0, cfg.crop, cfg.crop).cast());
                    let (f, z) = model.forward(&mut g, x);
                    fs.push(g.reshape(f, &[1, cfg.d]));
                    zs.push(z);
                }
                let fi = g.concat(&fs);
                let z = g.concat(&zs);
                let ftv = g.input(ft.clone());
                let (loss, la, lc) = perception_loss(&mut g, z, &flat, fi, ftv, &sim, weights, order);
                let l = g.scalar(loss) as f64;
                if !l.is_finite() {
                    return Err(Error::Diverged(format!("perception loss {l} at epoch {epoch}, scene {s}")));
                }
                sum += l;
                sum_a += g.scalar(la) as f64;
                sum_c += g.scalar(lc) as f64;
                n += 1;
                grads.merge(&g.backward(loss));
            }
            grads.scale(1.0 / chunk.len() as f32);
            if !grads.all_finite() {
                return Err(Error::Diverged(format!("non-finite perception gradient at epoch {epoch}")));
            }
            let lr = cfg.optim.lr_at(opt.steps() as usize, total_steps);
            opt.step_with_lr(&mut params, &grads, lr);
        }
        let e = EpochLog { epoch, loss: sum / n as f64, align: sum_a / n as f64, cls: sum_c / n as f64 };
        log(&format!("perception epoch {epoch}: loss {:.4} align {:.4} cls {:.4}", e.loss, e.align, e.cls));
        epochs.push(e);
    }

    let rebuilt = PromptCache::build(&text, &masks);
    if rebuilt != cache || text_digest(&rebuilt) != text_before {
        return Err(Error::Frozen("text embeddings changed during training".into()));
    }
    let meta = PerceptionMeta {
        config: cfg.clone(),
        seed: run.seed,
        catalog_sha256: ds.catalog.sha256.clone(),
        prompts: cache.prompts.clone(),
        prompt_masks: masks.iter().map(|m| m.bits()).collect(),
        text_sha256: text_before,
        fingerprint: params.fingerprint(),
    };
    let sha256 = checkpoint::save(out, KIND, &meta, &params)?;
    let perceiver = Perceiver { model, params, meta, sha256 };
    let test = ds.scenes(Role::Test);
    let eval_seed = derive_seed(run.seed, &[0xe7a1]);
    let seen = accuracy(&perceiver, ds, &test, &tasks, eval_seed)?;
    let unseen_cfgs: Vec<usize> = (0..ds.catalog.catalog.configs().len())
        .filter(|&c| ds.config(c).split == mdr_core::degradation::Split::Unseen)
        .collect();
    let unseen = accuracy(&perceiver, ds, &test, &unseen_cfgs, eval_seed)?;
    log(&format!(
        "perception held-out bit accuracy: seen {:.4} ({} views), unseen {:.4}",
        seen.bit_accuracy, seen.views, unseen.bit_accuracy
    ));
    Ok(Stage1Result { perceiver, epochs, seen, unseen })
}
