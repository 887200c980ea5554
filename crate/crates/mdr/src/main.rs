use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mdr::catalog::load_catalog;
use mdr::config::RunConfig;
use mdr::dataset::{synth, verify, Dataset, SynthOptions};
use mdr::error::write;
use mdr::eval::{evaluate, EvalReport, MaskSource};
use mdr::imageio::{read_png, write_png};
use mdr::pipeline::{ablate, RunManifest};
use mdr::stage1::{self, Perceiver};
use mdr::stage2::{self, parse_ablation, RestorerBundle};
use mdr::{report, Error, Result};
use mdr_core::ablation::Variant;
use mdr_core::degradation::DegradationVector;
use mdr_core::Graph;
use mdr_core::Tensor;
use serde_json::json;

#[derive(Parser)]
#[command(name = "mdr", version, about = "Multi-degradation restoration: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML run configuration; missing keys take desk-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        Ok(c)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    /// Pretrained vision-language encoder (not bundled).
    Vlm,
    /// Small trainable convolutional encoder.
    Tiny,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset.
    Synth {
        /// Catalog file; the built-in catalog when omitted.
        #[arg(long)]
        catalog: Option<PathBuf>,
        /// Directory of clean PNG scenes; procedural scenes when omitted.
        #[arg(long)]
        scenes: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        num_scenes: usize,
        #[arg(long, default_value_t = 20)]
        test_scenes: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Regenerate a dataset and compare it with its manifest and files.
    Verify {
        #[arg(long)]
        data: PathBuf,
    },
    /// Stage I: train the perception model.
    TrainPerception {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "tiny")]
        backend: Backend,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value = "runs/perception")]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Stage II: train the restorer against a frozen perception model.
    TrainRestoration {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "runs/perception/perception.ckpt")]
        perception: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Ablation variant to switch on (repeatable).
        #[arg(long)]
        variant: Vec<String>,
        #[arg(long, default_value = "runs/restoration")]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Grouped PSNR/SSIM evaluation on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "runs/perception/perception.ckpt")]
        perception: PathBuf,
        #[arg(long, default_value = "runs/restoration/restoration.ckpt")]
        restoration: PathBuf,
        /// Feed ground-truth masks instead of predicted ones.
        #[arg(long)]
        oracle_mask: bool,
        #[arg(long)]
        max_scenes: Option<usize>,
        /// Row label in comparison tables.
        #[arg(long)]
        name: Option<String>,
        /// Output directory; `runs/eval` or `runs/eval_oracle` by default.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train and evaluate ablation variants under one seed.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "runs/perception/perception.ckpt")]
        perception: PathBuf,
        /// A variant name, `full`, or `all` (full model plus every variant).
        #[arg(long)]
        variant: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_scenes: Option<usize>,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Comparison tables and PSNR-vs-order plots from evaluation reports.
    Report {
        /// Evaluation report JSON files.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, default_value = "runs/report")]
        out: PathBuf,
    },
    /// Print the predicted mask and factor probabilities of an image as JSON.
    Perceive {
        #[arg(long)]
        img: PathBuf,
        #[arg(long, default_value = "runs/perception/perception.ckpt")]
        ckpt: PathBuf,
    },
    /// Restore one image.
    Restore {
        #[arg(long)]
        img: PathBuf,
        /// Restoration checkpoint.
        #[arg(long, default_value = "runs/restoration/restoration.ckpt")]
        ckpt: PathBuf,
        #[arg(long, default_value = "runs/perception/perception.ckpt")]
        perception: PathBuf,
        /// Eight factor bits replacing the predicted mask.
        #[arg(long)]
        mask: Option<String>,
        #[arg(long, default_value = "restored.png")]
        out: PathBuf,
        /// Write stage tokens and conditioning attention maps to this JSON file.
        #[arg(long)]
        dump_conditioning: Option<PathBuf>,
    },
}

fn say(msg: &str) {
    eprintln!("{msg}");
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { catalog, scenes, out, seed, num_scenes, test_scenes, size } => {
            let cat = load_catalog(catalog.as_deref())?;
            let opts = SynthOptions {
                seed,
                scenes: num_scenes,
                test_scenes,
                size,
                scene_dir: scenes,
            };
            let t = Instant::now();
            let m = synth(&out, &cat, &opts)?;
            say(&format!("wrote {} images for {} scenes to {} in {:.1}s", m.files.len(), m.scenes.len(), out.display(), t.elapsed().as_secs_f64()));
        }
        Cmd::Verify { data } => {
            let s = verify(&data)?;
            say(&format!("{}: {} files regenerate byte-identically", data.display(), s.files));
        }
        Cmd::TrainPerception { data, backend, epochs, out, run } => {
            if let Backend::Vlm = backend {
                return Err(Error::Invalid(
                    "the vlm backend needs pretrained vision-language weights, which are not bundled; use --backend tiny".into(),
                ));
            }
            let mut cfg = run.load()?;
            if let Some(e) = epochs {
                cfg.perception.epochs = e;
            }
            let ds = Dataset::open(&data)?;
            let mut m = RunManifest::new("train-perception", &cfg, Some(&ds));
            m.write(&out)?;
            let r = stage1::train(&ds, &cfg, &out.join("perception.ckpt"), &mut |s| say(s))?;
            m.outputs.insert("perception".into(), r.perceiver.sha256.clone());
            m.write(&out)?;
            let log = json!({ "epochs": r.epochs, "held_out_seen": r.seen, "held_out_unseen": r.unseen });
            write(&out.join("metrics.json"), serde_json::to_string_pretty(&log)?)?;
        }
        Cmd::TrainRestoration { data, perception, epochs, variant, out, run } => {
            let mut cfg = run.load()?;
            if let Some(e) = epochs {
                cfg.restoration.epochs = e;
            }
            let ab = parse_ablation(&variant)?;
            let ds = Dataset::open(&data)?;
            let p = Perceiver::load(&perception)?;
            let mut m = RunManifest::new("train-restoration", &cfg, Some(&ds));
            m.inputs.insert("perception".into(), p.sha256.clone());
            m.write(&out)?;
            let r = stage2::train(&ds, &p, &cfg, ab, &out.join("restoration.ckpt"), &out.join("loss.jsonl"), &mut |s| say(s))?;
            m.outputs.insert("restoration".into(), r.bundle.sha256.clone());
            m.write(&out)?;
        }
        Cmd::Eval { data, perception, restoration, oracle_mask, max_scenes, name, out, run } => {
            let cfg = run.load()?;
            let ds = Dataset::open(&data)?;
            let p = Perceiver::load(&perception)?;
            let r = RestorerBundle::load(&restoration)?;
            let source = if oracle_mask { MaskSource::Oracle } else { MaskSource::Predicted };
            let stem = if oracle_mask { "eval_oracle" } else { "eval" };
            let out = out.unwrap_or_else(|| Path::new("runs").join(stem));
            let label = name.unwrap_or_else(|| if oracle_mask { "oracle mask".into() } else { "predicted mask".into() });
            let rep = evaluate(&ds, &p, &r, source, max_scenes.or(cfg.eval.max_scenes), &label)?;
            rep.check_groups(1e-9)?;
            rep.write_all(&out, stem)?;
            let mut m = RunManifest::new("eval", &cfg, Some(&ds));
            m.inputs.insert("perception".into(), p.sha256);
            m.inputs.insert("restoration".into(), r.sha256);
            m.write(&out)?;
            if rep.partial {
                say(&format!("partial report: missing {}", rep.missing.join(", ")));
            }
            for g in &rep.groups {
                say(&format!("{:<15} {:>6.2} dB  {:.4}  (input {:>6.2} dB  {:.4})", g.group, g.psnr, g.ssim, g.input_psnr, g.input_ssim));
            }
        }
        Cmd::Ablate { data, perception, variant, epochs, max_scenes, out, run } => {
            let mut cfg = run.load()?;
            if let Some(e) = epochs {
                cfg.restoration.epochs = e;
            }
            if max_scenes.is_some() {
                cfg.eval.max_scenes = max_scenes;
            }
            let variants: Vec<Option<Variant>> = match variant.as_str() {
                "all" => std::iter::once(None).chain(Variant::ALL.iter().copied().map(Some)).collect(),
                "full" => vec![None],
                v => vec![Some(v.parse()?)],
            };
            let ds = Dataset::open(&data)?;
            let p = Perceiver::load(&perception)?;
            let mut reports = Vec::new();
            for v in variants {
                let name = v.map_or("full", Variant::name);
                say(&format!("ablation {name}"));
                let a = ablate(&ds, &p, &cfg, v, &out.join(name), &mut |s| say(s))?;
                if let Some(gap) = a.dual_branch_gap {
                    say(&format!("{name}: max |y - y_res| = {gap:e}"));
                }
                reports.push(a.report);
            }
            report::render(&reports, &out)?;
        }
        Cmd::Report { reports, out } => {
            let rs = reports.iter().map(|p| EvalReport::load(p)).collect::<Result<Vec<_>>>()?;
            for r in &rs {
                r.check_groups(1e-9)?;
            }
            report::render(&rs, &out)?;
            say(&format!("wrote comparison tables and plot to {}", out.display()));
        }
        Cmd::Perceive { img, ckpt } => {
            let p = Perceiver::load(&ckpt)?;
            let x = read_png(&img)?;
            let o = p.infer(&x);
            let probs = o.probabilities();
            let named: serde_json::Map<String, serde_json::Value> = mdr_core::degradation::Factor::ALL
                .iter()
                .zip(probs)
                .map(|(f, v)| (f.name().to_string(), json!(v)))
                .collect();
            println!("{}", serde_json::to_string_pretty(&json!({ "mask": o.mask.bits(), "probabilities": named }))?);
        }
        Cmd::Restore { img, ckpt, perception, mask, out, dump_conditioning } => {
            let p = Perceiver::load(&perception)?;
            let r = RestorerBundle::load(&ckpt)?;
            r.check_perception(&p)?;
            let x = read_png(&img)?;
            let po = p.infer(&x);
            let oracle = mask.as_deref().map(DegradationVector::parse_bits).transpose()?;
            let m = stage2::mask_input(&po, &r.ablation, oracle);
            write_png(&out, &r.restore(&x, &m, &po.embedding))?;
            if let Some(path) = dump_conditioning {
                dump(&path, &r, &m, &po.embedding)?;
            }
            say(&format!("mask {} -> {}", oracle.unwrap_or(po.mask).bits(), out.display()));
        }
    }
    Ok(())
}

fn rows(t: &Tensor<f32>) -> serde_json::Value {
    let s = t.shape();
    let last = *s.last().unwrap_or(&1);
    let v: Vec<Vec<f32>> = t.data().chunks(last.max(1)).map(<[f32]>::to_vec).collect();
    json!({ "shape": s, "rows": v })
}

fn dump(path: &Path, r: &RestorerBundle, mask: &[f64; 8], p: &[f64]) -> Result<()> {
    let mut g = Graph::inference(&r.params);
    let pv = g.input(Tensor::from_vec(&[p.len()], p.iter().map(|v| *v as f32).collect()));
    let c = r.model.cond.forward(&mut g, mask, pv, &r.ablation);
    let keys: Vec<String> = mdr_core::degradation::Factor::ALL
        .iter()
        .map(|f| f.name().to_string())
        .chain(["semantic".to_string(), "global".to_string()])
        .collect();
    let doc = json!({
        "mask": mask,
        "keys": keys,
        "stage_tokens": rows(&g.tensor(c.g)),
        "attention": rows(&g.tensor(c.attn)),
    });
    write(path, serde_json::to_string_pretty(&doc)?)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
