//! On-disk desk-scale benchmark: `root/<split>/<config>/<scene>.png` plus
//! `root/manifest.json` and a copy of the catalog.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use mdr_core::degradation::{parameter_bounds, DegradationSpec, TaskConfig};
use mdr_core::rng::{derive_seed, hash_str};
use mdr_core::scene::generate_scene;
use mdr_core::synth::sample_and_compose;
use mdr_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::catalog::{parse_catalog, LoadedCatalog};
use crate::error::{read, read_string, write, Error, Result};
use crate::hash::sha256_hex;
use crate::imageio::{decode_png, encode_png, fit_square, from_rgb8, quantize, read_png, to_rgb8};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CATALOG_FILE: &str = "catalog.toml";
const FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub seed: u64,
    pub scenes: usize,
    /// The last `test_scenes` scenes are held out for evaluation.
    pub test_scenes: usize,
    pub size: usize,
    /// Directory of PNG scenes; procedural scenes when `None`.
    pub scene_dir: Option<PathBuf>,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { seed: 0, scenes: 200, test_scenes: 20, size: 64, scene_dir: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneSource {
    Procedural,
    Directory { path: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: u64,
    pub name: String,
    pub role: Role,
    /// Source file name for directory scenes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub scene: String,
    pub config: String,
    pub split: String,
    pub label: String,
    pub path: String,
    pub seed: u64,
    /// Sampled severity parameters per factor.
    pub severity: BTreeMap<String, BTreeMap<String, f64>>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub seed: u64,
    pub size: usize,
    pub catalog_sha256: String,
    pub scene_source: SceneSource,
    pub scenes: Vec<SceneEntry>,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&read_string(&root.join(MANIFEST_FILE))?)?)
    }
}

fn severity_record(specs: &[DegradationSpec]) -> BTreeMap<String, BTreeMap<String, f64>> {
    specs
        .iter()
        .map(|s| {
            let names = parameter_bounds(s.factor()).iter().map(|(n, _, _)| n.to_string());
            (s.factor().name().to_string(), names.zip(s.severity.values()).collect())
        })
        .collect()
}

/// Seed of one (scene, config) composition; shared with aligned views.
pub fn composition_seed(seed: u64, scene_id: u64, config: &str) -> u64 {
    derive_seed(seed, &[scene_id, hash_str(config)])
}

/// Configs generated for a scene: clean plus seen for training scenes, all for test scenes.
pub fn configs_for<'a>(cat: &'a LoadedCatalog, role: Role) -> Vec<&'a TaskConfig> {
    match role {
        Role::Train => cat.catalog.training_tasks(),
        Role::Test => cat.catalog.configs().iter().collect(),
    }
}

fn scene_list(opts: &SynthOptions) -> Result<Vec<SceneEntry>> {
    if opts.test_scenes == 0 || opts.test_scenes >= opts.scenes {
        return Err(Error::Invalid(format!("need 0 < test scenes ({}) < scenes ({})", opts.test_scenes, opts.scenes)));
    }
    let files: Vec<Option<String>> = match &opts.scene_dir {
        None => vec![None; opts.scenes],
        Some(dir) => {
            let mut names: Vec<String> = std::fs::read_dir(dir)
                .map_err(crate::error::io_err(dir))?
                .filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
                .collect();
            names.sort();
            if names.len() < opts.scenes {
                return Err(Error::Invalid(format!("{} holds {} PNG scenes, need {}", dir.display(), names.len(), opts.scenes)));
            }
            names.truncate(opts.scenes);
            names.into_iter().map(Some).collect()
        }
    };
    let n_train = opts.scenes - opts.test_scenes;
    Ok(files
        .into_iter()
        .enumerate()
        .map(|(i, file)| SceneEntry {
            id: i as u64,
            name: format!("s{i:04}"),
            role: if i < n_train { Role::Train } else { Role::Test },
            file,
        })
        .collect())
}

fn load_scene(source: &SceneSource, entry: &SceneEntry, size: usize, seed: u64) -> Result<Tensor<f64>> {
    match (source, &entry.file) {
        (SceneSource::Procedural, _) => Ok(quantize(&generate_scene(seed, entry.id, size, size))),
        (SceneSource::Directory { path }, Some(file)) => Ok(quantize(&fit_square(&read_png(&Path::new(path).join(file))?, size)?)),
        (SceneSource::Directory { .. }, None) => Err(Error::Manifest(format!("scene {} has no source file", entry.name))),
    }
}

fn relative_path(cfg: &TaskConfig, scene: &SceneEntry) -> String {
    format!("{}/{}/{}.png", cfg.split.name(), cfg.name, scene.name)
}

/// Every (scene, config) file of the dataset, rendered in memory.
fn render_all(
    cat: &LoadedCatalog,
    source: &SceneSource,
    scenes: &[SceneEntry],
    size: usize,
    seed: u64,
    mut sink: impl FnMut(FileEntry, Vec<u8>) -> Result<()>,
) -> Result<()> {
    for scene in scenes {
        let img = load_scene(source, scene, size, seed)?;
        for cfg in configs_for(cat, scene.role) {
            let s = composition_seed(seed, scene.id, &cfg.name);
            let (out, label, specs) = sample_and_compose(&img, cfg, s)?;
            let bytes = encode_png(&out)?;
            let entry = FileEntry {
                scene: scene.name.clone(),
                config: cfg.name.clone(),
                split: cfg.split.name().to_string(),
                label: label.bits(),
                path: relative_path(cfg, scene),
                seed: s,
                severity: severity_record(&specs),
                sha256: sha256_hex(&bytes),
            };
            sink(entry, bytes)?;
        }
    }
    Ok(())
}

/// Generates the dataset under `root` and writes its manifest.
pub fn synth(root: &Path, cat: &LoadedCatalog, opts: &SynthOptions) -> Result<Manifest> {
    let scenes = scene_list(opts)?;
    let source = match &opts.scene_dir {
        None => SceneSource::Procedural,
        Some(d) => SceneSource::Directory { path: d.to_string_lossy().into_owned() },
    };
    let mut files = Vec::new();
    render_all(cat, &source, &scenes, opts.size, opts.seed, |entry, bytes| {
        write(&root.join(&entry.path), bytes)?;
        files.push(entry);
        Ok(())
    })?;
    let manifest = Manifest {
        format: FORMAT,
        seed: opts.seed,
        size: opts.size,
        catalog_sha256: cat.sha256.clone(),
        scene_source: source,
        scenes,
        files,
    };
    write(&root.join(CATALOG_FILE), &cat.text)?;
    write(&root.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn dataset_catalog(root: &Path, manifest: &Manifest) -> Result<LoadedCatalog> {
    let cat = parse_catalog(&read_string(&root.join(CATALOG_FILE))?)?;
    if cat.sha256 != manifest.catalog_sha256 {
        return Err(Error::Manifest(format!("catalog hash {} differs from manifest {}", cat.sha256, manifest.catalog_sha256)));
    }
    Ok(cat)
}

/// Checks that every (scene, config) pair appears exactly once and matches the catalog.
fn check_coverage(cat: &LoadedCatalog, manifest: &Manifest) -> Result<()> {
    let mut seen: HashMap<(&str, &str), usize> = HashMap::new();
    for f in &manifest.files {
        *seen.entry((f.scene.as_str(), f.config.as_str())).or_default() += 1;
    }
    let mut expected = 0;
    for scene in &manifest.scenes {
        for cfg in configs_for(cat, scene.role) {
            expected += 1;
            match seen.get(&(scene.name.as_str(), cfg.name.as_str())) {
                Some(1) => {}
                Some(n) => return Err(Error::Manifest(format!("{}/{} listed {n} times", scene.name, cfg.name))),
                None => return Err(Error::Manifest(format!("{}/{} missing", scene.name, cfg.name))),
            }
        }
    }
    if expected != manifest.files.len() {
        return Err(Error::Manifest(format!("{} files listed, {expected} expected", manifest.files.len())));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifySummary {
    pub files: usize,
}

/// Regenerates every file from the manifest and compares bytes with the
/// recorded digests and with the files on disk.
pub fn verify(root: &Path) -> Result<VerifySummary> {
    let manifest = Manifest::load(root)?;
    let cat = dataset_catalog(root, &manifest)?;
    check_coverage(&cat, &manifest)?;
    let recorded: HashMap<&str, &FileEntry> = manifest.files.iter().map(|f| (f.path.as_str(), f)).collect();
    let mut n = 0;
    render_all(&cat, &manifest.scene_source, &manifest.scenes, manifest.size, manifest.seed, |entry, bytes| {
        let rec = recorded.get(entry.path.as_str()).ok_or_else(|| Error::Manifest(format!("{} not in manifest", entry.path)))?;
        if **rec != entry {
            return Err(Error::Manifest(format!("{}: regenerated entry differs from manifest", entry.path)));
        }
        let disk = read(&root.join(&entry.path))?;
        if disk != bytes {
            return Err(Error::Manifest(format!("{}: file on disk differs from regeneration", entry.path)));
        }
        n += 1;
        Ok(())
    })?;
    Ok(VerifySummary { files: n })
}

/// 8-bit image kept in memory.
#[derive(Clone, Debug)]
struct Stored {
    h: usize,
    w: usize,
    rgb: Vec<u8>,
}

/// A loaded dataset with every image resident as 8-bit pixels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub catalog: LoadedCatalog,
    images: HashMap<(usize, usize), Stored>,
}

impl Dataset {
    /// Loads the manifest, checks the catalog hash and every file digest.
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = Manifest::load(root)?;
        let catalog = dataset_catalog(root, &manifest)?;
        check_coverage(&catalog, &manifest)?;
        let scene_idx: HashMap<&str, usize> = manifest.scenes.iter().enumerate().map(|(i, s)| (s.name.as_str(), i)).collect();
        let cfg_idx: HashMap<&str, usize> = catalog.catalog.configs().iter().enumerate().map(|(i, c)| (c.name.as_str(), i)).collect();
        let mut images = HashMap::with_capacity(manifest.files.len());
        for f in &manifest.files {
            let path = root.join(&f.path);
            let bytes = read(&path)?;
            if sha256_hex(&bytes) != f.sha256 {
                return Err(Error::Manifest(format!("{}: digest mismatch", f.path)));
            }
            let (h, w, rgb) = to_rgb8(&decode_png(&bytes, &path)?)?;
            images.insert((scene_idx[f.scene.as_str()], cfg_idx[f.config.as_str()]), Stored { h, w, rgb });
        }
        Ok(Self { root: root.to_path_buf(), manifest, catalog, images })
    }

    pub fn scenes(&self, role: Role) -> Vec<usize> {
        self.manifest.scenes.iter().enumerate().filter(|(_, s)| s.role == role).map(|(i, _)| i).collect()
    }

    pub fn scene_id(&self, scene: usize) -> u64 {
        self.manifest.scenes[scene].id
    }

    pub fn config_index(&self, name: &str) -> Option<usize> {
        self.catalog.catalog.configs().iter().position(|c| c.name == name)
    }

    pub fn config(&self, index: usize) -> &TaskConfig {
        &self.catalog.catalog.configs()[index]
    }

    /// Image of `scene` under config `config` (catalog index).
    pub fn image(&self, scene: usize, config: usize) -> Option<Tensor<f64>> {
        self.images.get(&(scene, config)).map(|s| from_rgb8(s.h, s.w, &s.rgb))
    }

    pub fn clean(&self, scene: usize) -> Tensor<f64> {
        let c = self.config_index(&self.catalog.catalog.clean().name).expect("catalog has a clean config");
        self.image(scene, c).expect("every scene has a clean image")
    }
}
