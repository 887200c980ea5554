//! Grouped PSNR/SSIM evaluation on the luminance channel.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use mdr_core::degradation::Split;
use mdr_core::metrics::{psnr_y, ssim_y};
use serde::{Deserialize, Serialize};

use crate::catalog::LoadedCatalog;
use crate::dataset::{Dataset, Role};
use crate::error::{write, Error, Result};
use crate::stage1::Perceiver;
use crate::stage2::{mask_input, RestorerBundle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    Predicted,
    Oracle,
}

/// Metrics of one restored test image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub scene: String,
    pub config: String,
    pub psnr: f64,
    pub ssim: f64,
    pub input_psnr: f64,
    pub input_ssim: f64,
    pub predicted_mask: String,
    pub true_mask: String,
}

impl EvalItem {
    pub fn mask_correct(&self) -> bool {
        self.predicted_mask == self.true_mask
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigRow {
    pub name: String,
    pub split: String,
    pub order: usize,
    pub label: String,
    pub scenes: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub input_psnr: f64,
    pub input_ssim: f64,
    /// Fraction of test images whose predicted mask is exactly right.
    pub mask_exact: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub configs: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub input_psnr: f64,
    pub input_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub mask_source: MaskSource,
    pub configs: Vec<ConfigRow>,
    pub groups: Vec<GroupRow>,
    /// Degraded configs with no evaluated image.
    pub missing: Vec<String>,
    pub partial: bool,
    pub items: Vec<EvalItem>,
}

/// Row groups of the comparison table, in display order.
pub const GROUPS: [&str; 10] = [
    "seen_single",
    "seen_double",
    "seen_triple",
    "seen_overall",
    "unseen_double",
    "unseen_triple",
    "unseen_quad",
    "unseen_overall",
    "all",
    "quad",
];

/// Whether a config row belongs to `group`.
pub fn in_group(group: &str, split: &str, order: usize) -> bool {
    let seen = split == Split::Seen.name();
    let unseen = split == Split::Unseen.name();
    match group {
        "seen_single" => seen && order == 1,
        "seen_double" => seen && order == 2,
        "seen_triple" => seen && order == 3,
        "seen_overall" => seen,
        "unseen_double" => unseen && order == 2,
        "unseen_triple" => unseen && order == 3,
        "unseen_quad" => unseen && order == 4,
        "unseen_overall" => unseen,
        "all" => seen || unseen,
        "quad" => order == 4,
        _ => false,
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn group_rows(configs: &[ConfigRow]) -> Vec<GroupRow> {
    GROUPS
        .iter()
        .map(|g| {
            let members: Vec<&ConfigRow> = configs.iter().filter(|c| in_group(g, &c.split, c.order)).collect();
            GroupRow {
                group: g.to_string(),
                configs: members.len(),
                psnr: mean(members.iter().map(|c| c.psnr)),
                ssim: mean(members.iter().map(|c| c.ssim)),
                input_psnr: mean(members.iter().map(|c| c.input_psnr)),
                input_ssim: mean(members.iter().map(|c| c.input_ssim)),
            }
        })
        .collect()
}

impl EvalReport {
    /// Aggregates per-image metrics into per-config and group means.
    pub fn from_items(name: &str, source: MaskSource, catalog: &LoadedCatalog, items: Vec<EvalItem>) -> Self {
        let mut by_config: BTreeMap<&str, Vec<&EvalItem>> = BTreeMap::new();
        for it in &items {
            by_config.entry(it.config.as_str()).or_default().push(it);
        }
        let mut configs = Vec::new();
        let mut missing = Vec::new();
        for cfg in catalog.catalog.degraded() {
            match by_config.get(cfg.name.as_str()) {
                Some(v) => configs.push(ConfigRow {
                    name: cfg.name.clone(),
                    split: cfg.split.name().to_string(),
                    order: cfg.order,
                    label: cfg.label.bits(),
                    scenes: v.len(),
                    psnr: mean(v.iter().map(|i| i.psnr)),
                    ssim: mean(v.iter().map(|i| i.ssim)),
                    input_psnr: mean(v.iter().map(|i| i.input_psnr)),
                    input_ssim: mean(v.iter().map(|i| i.input_ssim)),
                    mask_exact: mean(v.iter().map(|i| f64::from(u8::from(i.mask_correct())))),
                }),
                None => missing.push(cfg.name.clone()),
            }
        }
        let groups = group_rows(&configs);
        Self { name: name.to_string(), mask_source: source, configs, groups, partial: !missing.is_empty(), missing, items }
    }

    pub fn group(&self, name: &str) -> Option<&GroupRow> {
        self.groups.iter().find(|g| g.group == name)
    }

    /// Recomputes every group mean from the per-config table.
    pub fn check_groups(&self, tol: f64) -> Result<()> {
        for (a, b) in self.groups.iter().zip(group_rows(&self.configs)) {
            let pairs = [(a.psnr, b.psnr), (a.ssim, b.ssim), (a.input_psnr, b.input_psnr), (a.input_ssim, b.input_ssim)];
            let ok = a.configs == b.configs && pairs.iter().all(|(x, y)| (x.is_nan() && y.is_nan()) || (x - y).abs() <= tol);
            if !ok {
                return Err(Error::Invalid(format!("group {} does not match its member configs", a.group)));
            }
        }
        Ok(())
    }

    /// Largest absolute difference of any metric against `other`.
    pub fn max_difference(&self, other: &EvalReport) -> f64 {
        let mut d: f64 = 0.0;
        if self.configs.len() != other.configs.len() {
            return f64::INFINITY;
        }
        for (a, b) in self.configs.iter().zip(&other.configs) {
            if a.name != b.name || a.scenes != b.scenes {
                return f64::INFINITY;
            }
            for (x, y) in [(a.psnr, b.psnr), (a.ssim, b.ssim), (a.input_psnr, b.input_psnr), (a.input_ssim, b.input_ssim)] {
                d = d.max((x - y).abs());
            }
        }
        for (a, b) in self.groups.iter().zip(&other.groups) {
            for (x, y) in [(a.psnr, b.psnr), (a.ssim, b.ssim)] {
                if !(x.is_nan() && y.is_nan()) {
                    d = d.max((x - y).abs());
                }
            }
        }
        d
    }

    pub fn config_csv(&self) -> String {
        let mut s = String::from("config,split,order,label,scenes,psnr,ssim,input_psnr,input_ssim,mask_exact\n");
        for c in &self.configs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.4}",
                c.name, c.split, c.order, c.label, c.scenes, c.psnr, c.ssim, c.input_psnr, c.input_ssim, c.mask_exact
            );
        }
        s
    }

    pub fn group_csv(&self) -> String {
        let mut s = String::from("group,configs,psnr,ssim,input_psnr,input_ssim\n");
        for g in &self.groups {
            let _ = writeln!(s, "{},{},{:.6},{:.6},{:.6},{:.6}", g.group, g.configs, g.psnr, g.ssim, g.input_psnr, g.input_ssim);
        }
        s
    }

    pub fn markdown(&self) -> String {
        let mut s = format!("# Evaluation: {}\n\nMask source: {:?}\n\n", self.name, self.mask_source);
        if self.partial {
            let _ = writeln!(s, "**Partial report.** Missing configs: {}\n", self.missing.join(", "));
        }
        s.push_str("| Group | Configs | PSNR | SSIM | Input PSNR | Input SSIM |\n|---|---:|---:|---:|---:|---:|\n");
        for g in &self.groups {
            let _ = writeln!(
                s,
                "| {} | {} | {:.2} | {:.4} | {:.2} | {:.4} |",
                g.group, g.configs, g.psnr, g.ssim, g.input_psnr, g.input_ssim
            );
        }
        s.push_str("\n| Config | Split | Order | PSNR | SSIM | Input PSNR | Input SSIM | Mask exact |\n");
        s.push_str("|---|---|---:|---:|---:|---:|---:|---:|\n");
        for c in &self.configs {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.2} | {:.4} | {:.2} | {:.4} | {:.2} |",
                c.name, c.split, c.order, c.psnr, c.ssim, c.input_psnr, c.input_ssim, c.mask_exact
            );
        }
        s
    }

    /// Writes `<stem>.json`, `<stem>.csv`, `<stem>_groups.csv` and `<stem>.md` into `dir`.
    pub fn write_all(&self, dir: &Path, stem: &str) -> Result<()> {
        write(&dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?)?;
        write(&dir.join(format!("{stem}.csv")), self.config_csv())?;
        write(&dir.join(format!("{stem}_groups.csv")), self.group_csv())?;
        write(&dir.join(format!("{stem}.md")), self.markdown())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&crate::error::read_string(path)?)?)
    }
}

/// Restores every degraded test image and scores it against the clean scene.
/// Jobs are split over worker threads; the item order is fixed.
pub fn evaluate_items(
    ds: &Dataset,
    perceiver: &Perceiver,
    restorer: &RestorerBundle,
    source: MaskSource,
    max_scenes: Option<usize>,
) -> Result<Vec<EvalItem>> {
    restorer.check_perception(perceiver)?;
    let mut scenes = ds.scenes(Role::Test);
    if let Some(n) = max_scenes {
        scenes.truncate(n);
    }
    let jobs: Vec<(usize, usize)> = scenes
        .iter()
        .flat_map(|&s| {
            ds.catalog.catalog.configs().iter().enumerate().filter(move |(c, cfg)| cfg.split != Split::Clean && ds.image(s, *c).is_some()).map(move |(c, _)| (s, c))
        })
        .collect();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    let per = jobs.len().div_ceil(threads).max(1);
    let chunks: Vec<Result<Vec<EvalItem>>> = std::thread::scope(|sc| {
        let handles: Vec<_> = jobs.chunks(per).map(|chunk| sc.spawn(move || chunk.iter().map(|&(s, c)| score(ds, perceiver, restorer, source, s, c)).collect())).collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut items = Vec::with_capacity(jobs.len());
    for c in chunks {
        items.extend(c?);
    }
    Ok(items)
}

fn score(ds: &Dataset, perceiver: &Perceiver, restorer: &RestorerBundle, source: MaskSource, s: usize, c: usize) -> Result<EvalItem> {
    let n = ds.manifest.size;
    let cfg = ds.config(c);
    let x = ds.image(s, c).expect("job has an image");
    let clean = ds.clean(s);
    let po = perceiver.infer(&x);
    let oracle = (source == MaskSource::Oracle).then_some(cfg.label);
    let mask = mask_input(&po, &restorer.ablation, oracle);
    let y = restorer.restore(&x, &mask, &po.embedding);
    Ok(EvalItem {
        scene: ds.manifest.scenes[s].name.clone(),
        config: cfg.name.clone(),
        psnr: psnr_y(y.data(), clean.data(), n, n)?,
        ssim: ssim_y(y.data(), clean.data(), n, n)?,
        input_psnr: psnr_y(x.data(), clean.data(), n, n)?,
        input_ssim: ssim_y(x.data(), clean.data(), n, n)?,
        predicted_mask: po.mask.bits(),
        true_mask: cfg.label.bits(),
    })
}

pub fn evaluate(
    ds: &Dataset,
    perceiver: &Perceiver,
    restorer: &RestorerBundle,
    source: MaskSource,
    max_scenes: Option<usize>,
    name: &str,
) -> Result<EvalReport> {
    let items = evaluate_items(ds, perceiver, restorer, source, max_scenes)?;
    Ok(EvalReport::from_items(name, source, &ds.catalog, items))
}
