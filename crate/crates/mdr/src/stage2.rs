//! Stage II: restoration training against a frozen perception model.

use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use mdr_core::ablation::{Ablation, Variant};
use mdr_core::degradation::{DegradationVector, Split, NUM_FACTORS};
use mdr_core::objectives::{base_target, mask_overload, restoration_loss, FreqMaskSpec, GuidedFilterSpec, LossWeights, OverloadSpec};
use mdr_core::optim::AdamW;
use mdr_core::perception::PerceptionOutput;
use mdr_core::restoration::Restorer;
use mdr_core::rng::{derive_seed, rng_from};
use mdr_core::synth::crop;
use mdr_core::{Gradients, Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{EpochMode, RestorationTrainConfig, RunConfig};
use crate::dataset::{Dataset, Role};
use crate::error::{io_err, Error, Result};
use crate::stage1::Perceiver;

pub const KIND: &str = "restoration";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestorationMeta {
    pub config: RestorationTrainConfig,
    pub ablation: Vec<String>,
    pub seed: u64,
    /// Semantic embedding width the model was built for.
    pub d: usize,
    pub catalog_sha256: String,
    pub perception_sha256: String,
    pub perception_fingerprint: u64,
    pub fingerprint: u64,
}

/// A trained restoration model with its ablation switches.
#[derive(Clone, Debug)]
pub struct RestorerBundle {
    pub model: Restorer,
    pub params: ParamStore<f32>,
    pub ablation: Ablation,
    pub meta: RestorationMeta,
    pub sha256: String,
}

pub fn parse_ablation(names: &[String]) -> Result<Ablation> {
    let mut ab = Ablation::full();
    for n in names {
        ab = ab.with(n.parse::<Variant>()?);
    }
    Ok(ab)
}

fn ablation_names(ab: &Ablation) -> Vec<String> {
    ab.active().iter().map(|v| v.name().to_string()).collect()
}

impl RestorerBundle {
    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint<RestorationMeta> = checkpoint::load(path, KIND)?;
        let meta = ck.meta;
        let mut params = ParamStore::new();
        let model = Restorer::new(&mut params, meta.config.model.resolve(meta.d), 0);
        params.load_from(&ck.params)?;
        if params.fingerprint() != meta.fingerprint {
            return Err(Error::Frozen(format!("{}: parameter fingerprint differs from header", path.display())));
        }
        Ok(Self { model, ablation: parse_ablation(&meta.ablation)?, params, meta, sha256: ck.sha256 })
    }

    /// Checks that `p` is the perception model this restorer was trained against.
    pub fn check_perception(&self, p: &Perceiver) -> Result<()> {
        if p.params.fingerprint() != self.meta.perception_fingerprint {
            return Err(Error::Frozen(format!(
                "perception checkpoint {} is not the one the restorer was trained with ({})",
                p.sha256, self.meta.perception_sha256
            )));
        }
        Ok(())
    }

    pub fn restore(&self, x: &Tensor<f64>, mask: &[f64; NUM_FACTORS], p: &[f64]) -> Tensor<f64> {
        self.model.restore(&self.params, &x.cast(), mask, p, &self.ablation).cast()
    }
}

/// Mask values fed to the restorer: ground truth when given, else the
/// thresholded prediction, or the probabilities under `soft_mask`.
pub fn mask_input(out: &PerceptionOutput, ab: &Ablation, oracle: Option<DegradationVector>) -> [f64; NUM_FACTORS] {
    match oracle {
        Some(m) => m.to_reals(),
        None if ab.soft_mask => out.probabilities(),
        None => out.mask.to_reals(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l1: f64,
    pub l_freq: f64,
    pub l_base: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct Stage2Result {
    pub bundle: RestorerBundle,
    pub steps: Vec<StepLog>,
}

/// Trains the restorer with `ab` and writes the checkpoint to `out` and the
/// per-step loss log (JSON lines) to `loss_log`.
pub fn train(
    ds: &Dataset,
    perceiver: &Perceiver,
    run: &RunConfig,
    ab: Ablation,
    out: &Path,
    loss_log: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<Stage2Result> {
    let cfg = &run.restoration;
    let size = ds.manifest.size;
    if cfg.crop > size || cfg.crop < 8 {
        return Err(Error::Invalid(format!("restoration crop {} must be in [8, {size}]", cfg.crop)));
    }
    let frozen_before = perceiver.params.fingerprint();
    let train_scenes = ds.scenes(Role::Train);
    let seen: Vec<usize> = (0..ds.catalog.catalog.configs().len()).filter(|&c| ds.config(c).split == Split::Seen).collect();

    // frozen perception outputs and low-frequency targets, computed once
    let mut perceived: HashMap<(usize, usize), PerceptionOutput> = HashMap::new();
    let mut base_targets: HashMap<usize, Tensor<f64>> = HashMap::new();
    let gf = GuidedFilterSpec { radius: cfg.guided_radius, eps: cfg.guided_eps };
    for &s in &train_scenes {
        for &c in &seen {
            let img = ds.image(s, c).ok_or_else(|| Error::Invalid(format!("scene {s} lacks config {}", ds.config(c).name)))?;
            perceived.insert((s, c), perceiver.infer(&img));
        }
        base_targets.insert(s, base_target(&ds.clean(s), &gf));
    }
    log(&format!("restoration: {} training pairs perceived", perceived.len()));

    let rcfg = cfg.model.resolve(perceiver.model.cfg.d);
    let mut params = ParamStore::<f32>::new();
    let model = Restorer::new(&mut params, rcfg, derive_seed(run.seed, &[2]));
    let mut opt = AdamW::new(cfg.optim.adamw());
    let weights = LossWeights {
        freq: if ab.no_freq_loss { 0.0 } else { cfg.freq_weight },
        base: if ab.no_base_loss { 0.0 } else { cfg.base_weight },
    };
    let fspec = FreqMaskSpec { ratio: cfg.freq_ratio };
    fspec.side(cfg.crop, cfg.crop)?;
    let overload = OverloadSpec { probability: if ab.no_mask_overload { 0.0 } else { cfg.overload_probability } };
    let batch = cfg.batch.max(1);
    let per_epoch = match cfg.epoch {
        EpochMode::PerScene => train_scenes.len(),
        EpochMode::AllPairs => train_scenes.len() * seen.len(),
    };
    let total_steps = cfg.epochs * per_epoch.div_ceil(batch);
    if let Some(dir) = loss_log.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = std::fs::File::create(loss_log).map_err(io_err(loss_log))?;
    let mut writer = BufWriter::new(file);
    let mut steps = Vec::new();
    let mut rng = rng_from(run.seed, &[0x5e2]);
    for epoch in 0..cfg.epochs {
        let mut samples: Vec<(usize, usize)> = match cfg.epoch {
            EpochMode::PerScene => train_scenes.iter().map(|&s| (s, seen[rng.gen_range(0..seen.len())])).collect(),
            EpochMode::AllPairs => train_scenes.iter().flat_map(|&s| seen.iter().map(move |&c| (s, c))).collect(),
        };
        samples.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in samples.chunks(batch) {
            let predicted: Vec<DegradationVector> = chunk.iter().map(|k| perceived[k].mask).collect();
            let mut masks = predicted.clone();
            mask_overload(&mut masks, &overload, &mut rng);
            let mut grads = Gradients::new(params.len());
            let mut acc = StepLog { step: steps.len(), l1: 0.0, l_freq: 0.0, l_base: 0.0, total: 0.0 };
            for (i, key) in chunk.iter().enumerate() {
                let (s, c) = *key;
                let po = &perceived[key];
                let mut mask = if ab.soft_mask { po.probabilities() } else { masks[i].to_reals() };
                // an injected bit is fully on in soft mode too
                for (j, m) in mask.iter_mut().enumerate() {
                    if masks[i].0[j] && !predicted[i].0[j] {
                        *m = 1.0;
                    }
                }
                let (y0, x0) = (rng.gen_range(0..=size - cfg.crop), rng.gen_range(0..=size - cfg.crop));
                let cut = |t: &Tensor<f64>| crop(t, y0, x0, cfg.crop, cfg.crop).cast::<f32>();
                let x = cut(&ds.image(s, c).expect("perceived pairs exist"));
                let y = cut(&ds.clean(s));
                let yb = cut(&base_targets[&s]);
                let mut g = Graph::new(&params);
                let xv = g.input(x);
                let pv = g.input(Tensor::from_vec(&[po.embedding.len()], po.embedding.iter().map(|v| *v as f32).collect()));
                let o = model.forward(&mut g, xv, &mask, pv, &ab);
                let (loss, bd) = restoration_loss(&mut g, o.y, o.base, &y, &yb, &weights, &fspec)?;
                if !bd.total.is_finite() {
                    return Err(Error::Diverged(format!("restoration loss {} at step {}", bd.total, steps.len())));
                }
                acc.l1 += bd.l1;
                acc.l_freq += bd.freq;
                acc.l_base += bd.base;
                acc.total += bd.total;
                grads.merge(&g.backward(loss));
            }
            let n = chunk.len() as f64;
            for v in [&mut acc.l1, &mut acc.l_freq, &mut acc.l_base, &mut acc.total] {
                *v /= n;
            }
            grads.scale(1.0 / chunk.len() as f32);
            if !grads.all_finite() {
                return Err(Error::Diverged(format!("non-finite restoration gradient at step {}", steps.len())));
            }
            let lr = cfg.optim.lr_at(opt.steps() as usize, total_steps);
            opt.step_with_lr(&mut params, &grads, lr);
            serde_json::to_writer(&mut writer, &acc)?;
            writer.write_all(b"\n").map_err(io_err(loss_log))?;
            epoch_loss += acc.total;
            steps.push(acc);
        }
        log(&format!("restoration epoch {epoch}: loss {:.5}", epoch_loss / samples.len().div_ceil(batch) as f64));
    }
    writer.flush().map_err(io_err(loss_log))?;
    if perceiver.params.fingerprint() != frozen_before {
        return Err(Error::Frozen("perception parameters changed during restoration training".into()));
    }
    let meta = RestorationMeta {
        config: cfg.clone(),
        ablation: ablation_names(&ab),
        seed: run.seed,
        d: perceiver.model.cfg.d,
        catalog_sha256: ds.catalog.sha256.clone(),
        perception_sha256: perceiver.sha256.clone(),
        perception_fingerprint: frozen_before,
        fingerprint: params.fingerprint(),
    };
    let sha256 = checkpoint::save(out, KIND, &meta, &params)?;
    Ok(Stage2Result { bundle: RestorerBundle { model, params, ablation: ab, meta, sha256 }, steps })
}
