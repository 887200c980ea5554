//! Run manifests and ablation runs.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use mdr_core::ablation::{Ablation, Variant};
use mdr_core::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{Dataset, Role};
use crate::error::{write, Result};
use crate::eval::{evaluate, EvalReport, MaskSource};
use crate::stage1::Perceiver;
use crate::stage2::{self, mask_input, RestorerBundle};

/// Written as `run.json` next to every run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: RunConfig,
    pub seed: u64,
    pub dataset_seed: Option<u64>,
    pub catalog_sha256: Option<String>,
    pub git_commit: Option<String>,
    /// Settings that depart from the published protocol.
    pub overrides: Vec<String>,
    /// Digests of checkpoints read by the run.
    pub inputs: BTreeMap<String, String>,
    /// Digests of checkpoints written by the run.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, ds: Option<&Dataset>) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().collect(),
            config: config.clone(),
            seed: config.seed,
            dataset_seed: ds.map(|d| d.manifest.seed),
            catalog_sha256: ds.map(|d| d.catalog.sha256.clone()),
            git_commit: git_commit(),
            overrides: config.overrides(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write(&dir.join("run.json"), serde_json::to_string_pretty(self)?)
    }
}

/// Commit of the working directory's repository, when there is one.
pub fn git_commit() -> Option<String> {
    let out = Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    if !out.status.success() {
        return None;
    }
    let s = String::from_utf8(out.stdout).ok()?.trim().to_string();
    (!s.is_empty()).then_some(s)
}

/// Largest `|y - y_res|` of `bundle` on the first test image of `ds`, or
/// `None` when the dual branch is active.
pub fn dual_branch_gap(ds: &Dataset, perceiver: &Perceiver, bundle: &RestorerBundle) -> Option<f64> {
    if !bundle.ablation.no_dual_branch {
        return None;
    }
    let s = *ds.scenes(Role::Test).first()?;
    let c = (0..ds.catalog.catalog.configs().len()).find(|&c| ds.config(c).order > 0 && ds.image(s, c).is_some())?;
    let x = ds.image(s, c)?;
    let po = perceiver.infer(&x);
    let mask = mask_input(&po, &bundle.ablation, None);
    let mut g = Graph::inference(&bundle.params);
    let xv = g.input(x.cast::<f32>());
    let pv = g.input(Tensor::from_vec(&[po.embedding.len()], po.embedding.iter().map(|v| *v as f32).collect()));
    let o = bundle.model.forward(&mut g, xv, &mask, pv, &bundle.ablation);
    let (y, r) = (g.tensor(o.y), g.tensor(o.res));
    Some(y.data().iter().zip(r.data()).map(|(a, b)| f64::from((a - b).abs())).fold(0.0, f64::max))
}

/// Outcome of one ablation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub checkpoint_sha256: String,
    pub final_loss: f64,
    /// `max |y - y_res|` for `no_dual_branch`.
    pub dual_branch_gap: Option<f64>,
    pub report: EvalReport,
}

/// Trains the restorer with one variant switched on (`None` for the full
/// model) and evaluates it, writing everything under `dir`.
pub fn ablate(
    ds: &Dataset,
    perceiver: &Perceiver,
    run: &RunConfig,
    variant: Option<Variant>,
    dir: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<AblationRun> {
    let name = variant.map_or("full", Variant::name);
    let ab = variant.map_or_else(Ablation::full, |v| Ablation::full().with(v));
    let ckpt = dir.join("restoration.ckpt");
    let r = stage2::train(ds, perceiver, run, ab, &ckpt, &dir.join("loss.jsonl"), log)?;
    let report = evaluate(ds, perceiver, &r.bundle, MaskSource::Predicted, run.eval.max_scenes, name)?;
    report.check_groups(1e-9)?;
    report.write_all(dir, "eval")?;
    let gap = dual_branch_gap(ds, perceiver, &r.bundle);
    let mut m = RunManifest::new("ablate", run, Some(ds));
    m.inputs.insert("perception".into(), perceiver.sha256.clone());
    m.outputs.insert("restoration".into(), r.bundle.sha256.clone());
    m.write(dir)?;
    Ok(AblationRun {
        variant: name.to_string(),
        checkpoint_sha256: r.bundle.sha256,
        final_loss: r.steps.last().map_or(f64::NAN, |s| s.total),
        dual_branch_gap: gap,
        report,
    })
}
