//! Command-line front end: synth, prune, train, sample, eval, report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::uniform_azimuths;
use crate::data::backends::RandomConvEmbedder;
use crate::data::prune::{prune, reference_classifier, DEFAULT_TAU_BV, DEFAULT_TAU_II};
use crate::data::{
    generate_corpus_with_defects, load_dataset, save_dataset, DataMix, IdentityRecord, RenderCamera, ViewRecord,
};
use crate::error::{Error, Result};
use crate::imageio::{grid_columns, tensor_to_images, tile_grid};
use crate::metrics::{evaluate, EvalIdentity, MetricBackends, MetricReport};
use crate::model::Condition;
use crate::rng::SeededRng;
use crate::training::{build_examples, fit, sample_views, Checkpoint, FitOptions, TrainConfig};

pub const DATA_ROOT_ENV: &str = "GEN3D_DATA_ROOT";
pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(name = "gen3d", version, about = "Multi-view consistent face generation from a single image")]
pub struct Cli {
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a procedural multi-view face corpus.
    Synth(SynthArgs),
    /// Drop Janus back views and inconsistent identities.
    Prune(PruneArgs),
    /// Train the multi-view denoiser.
    Train(TrainArgs),
    /// Generate target views from one input image or a whole dataset.
    Sample(SampleArgs),
    /// Score generated views against a dataset.
    Eval(EvalArgs),
    /// Summarize metric reports as a table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub identities: usize,
    #[arg(long, env = DATA_ROOT_ENV)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, default_value = "both")]
    pub mix: DataMix,
    /// Identities that get one planted Janus back view.
    #[arg(long, default_value_t = 0)]
    pub janus: usize,
    /// Identities that get impostor views.
    #[arg(long, default_value_t = 0)]
    pub swaps: usize,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long = "in", env = DATA_ROOT_ENV)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAU_BV)]
    pub tau_bv: f64,
    #[arg(long, default_value_t = DEFAULT_TAU_II)]
    pub tau_ii: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, env = DATA_ROOT_ENV)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config override `key=value`; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Single input image; writes a grid plus per-view files.
    #[arg(long, conflicts_with = "data")]
    pub input: Option<PathBuf>,
    /// Dataset whose frontal views are used as inputs; writes a dataset of generated views.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Only the first identities of `--data`.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset holding the inputs and reference views.
    #[arg(long, env = DATA_ROOT_ENV)]
    pub data: PathBuf,
    /// Generated dataset written by `sample --data`.
    #[arg(long)]
    pub generated: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long = "in", required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Provenance of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub config_hash: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    /// SHA-256 of every output file except the manifest, by path.
    pub checksums: BTreeMap<String, String>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<_> = std::fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            collect_files(&e, out)?;
        }
    } else if path.is_file() && path.file_name().is_some_and(|n| n != RUN_MANIFEST) {
        out.push(path.to_path_buf());
    }
    Ok(())
}

pub fn checksums(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    for p in paths {
        collect_files(p, &mut files)?;
    }
    files.iter().map(|f| Ok((f.display().to_string(), sha256_file(f)?))).collect()
}

/// Where the manifest of a run writing `out` goes.
pub fn manifest_path(out: &Path) -> PathBuf {
    if out.extension().is_some() && !out.is_dir() {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        out.with_file_name(name)
    } else {
        out.join(RUN_MANIFEST)
    }
}

struct Outcome {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    config_path: Option<PathBuf>,
    config_hash: Option<String>,
    primary: PathBuf,
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit code: 0 on success, 1 on a validation error, 2 on a runtime failure.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let started = now();
    let seed = cli.seed.unwrap_or(0);
    let name = match &cli.command {
        Command::Synth(_) => "synth",
        Command::Prune(_) => "prune",
        Command::Train(_) => "train",
        Command::Sample(_) => "sample",
        Command::Eval(_) => "eval",
        Command::Report(_) => "report",
    };
    let result = match &cli.command {
        Command::Synth(a) => synth(a, seed),
        Command::Prune(a) => prune_cmd(a, seed),
        Command::Train(a) => train(a, cli.seed),
        Command::Sample(a) => sample(a, seed),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    };
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return if e.is_validation() { 1 } else { 2 };
        }
    };
    let manifest = (|| -> Result<()> {
        let config_hash = outcome
            .config_hash
            .clone()
            .unwrap_or_else(|| hex::encode(Sha256::digest(argv[1..].join("\u{1f}").as_bytes())));
        let m = RunManifest {
            command: name.into(),
            argv: argv.to_vec(),
            config_path: outcome.config_path.clone(),
            config_hash,
            inputs: outcome.inputs.clone(),
            outputs: outcome.outputs.clone(),
            seed,
            started_unix: started,
            finished_unix: now(),
            checksums: checksums(&outcome.outputs)?,
        };
        let path = manifest_path(&outcome.primary);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(&m)?)?;
        Ok(())
    })();
    match manifest {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: writing run manifest: {e}");
            2
        }
    }
}

fn synth(a: &SynthArgs, seed: u64) -> Result<Outcome> {
    if a.identities == 0 {
        return Err(Error::invalid("--identities must be at least 1"));
    }
    let records = generate_corpus_with_defects(a.identities, seed, a.mix, a.image_size, a.janus, a.swaps)?;
    save_dataset(&records, &a.out)?;
    println!("wrote {} identities x {} views to {}", records.len(), records[0].views.len(), a.out.display());
    Ok(Outcome { inputs: vec![], outputs: vec![a.out.clone()], config_path: None, config_hash: None, primary: a.out.clone() })
}

pub const PRUNE_REPORT: &str = "prune_report.json";

fn prune_records(records: Vec<IdentityRecord>, seed: u64, tau_bv: f64, tau_ii: f64) -> Result<(Vec<IdentityRecord>, crate::data::prune::PruneReport)> {
    let size = records.first().map_or(32, |r| r.camera.image_size);
    let clf = reference_classifier(seed, size, 8)?;
    let emb = RandomConvEmbedder::new(seed, 64);
    prune(records, &clf, &emb, tau_bv, tau_ii)
}

fn prune_cmd(a: &PruneArgs, seed: u64) -> Result<Outcome> {
    let records = load_dataset(&a.input)?;
    let before = records.len();
    let (kept, report) = prune_records(records, seed, a.tau_bv, a.tau_ii)?;
    save_dataset(&kept, &a.out)?;
    std::fs::write(a.out.join(PRUNE_REPORT), serde_json::to_string_pretty(&report)?)?;
    println!(
        "removed {} back views, kept {} of {} identities -> {}",
        report.removed_views.len(),
        kept.len(),
        before,
        a.out.display()
    );
    Ok(Outcome { inputs: vec![a.input.clone()], outputs: vec![a.out.clone()], config_path: None, config_hash: None, primary: a.out.clone() })
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(&str, &str)>> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))
        })
        .collect()
}

pub const CONFIG_FILE: &str = "config.txt";
pub const FINAL_CHECKPOINT: &str = "final.bin";

fn train(a: &TrainArgs, seed: Option<u64>) -> Result<Outcome> {
    let base = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::desk(),
    };
    let mut pairs = parse_overrides(&a.overrides)?;
    let steps = a.steps.map(|s| s.to_string());
    let seed_text = seed.map(|s| s.to_string());
    if let Some(s) = &steps {
        pairs.push(("steps", s));
    }
    if let Some(s) = &seed_text {
        pairs.push(("seed", s));
    }
    let cfg = base.with_overrides(pairs)?;
    let mut records = load_dataset(&a.data)?;
    if cfg.prune && records.iter().any(|r| r.consistency.is_none()) {
        let (kept, report) = prune_records(records, cfg.seed, DEFAULT_TAU_BV, DEFAULT_TAU_II)?;
        println!("pruned to {} identities ({} back views removed)", kept.len(), report.removed_views.len());
        records = kept;
    }
    let examples = build_examples(&records, &cfg)?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join(CONFIG_FILE), cfg.to_text())?;
    let opts = FitOptions { out_dir: Some(a.out.clone()), resume, stop_at: None, progress_every: 50 };
    let outcome = fit(&cfg, &examples, &opts)?;
    outcome.checkpoint.save(&a.out.join(FINAL_CHECKPOINT))?;
    if let (Some(first), Some(last)) = (outcome.losses.first(), outcome.losses.last()) {
        println!("trained {} steps: loss {first:.4} -> {last:.4}", outcome.losses.len());
    }
    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.config.clone());
    inputs.extend(a.resume.clone());
    Ok(Outcome { inputs, outputs: vec![a.out.clone()], config_path: a.config.clone(), config_hash: Some(cfg.hash()), primary: a.out.clone() })
}

struct Sampler {
    ck: Checkpoint,
    model: crate::model::Gen3dModel,
    views: usize,
    steps: usize,
    eta: f64,
}

impl Sampler {
    fn new(a: &SampleArgs) -> Result<Self> {
        let ck = Checkpoint::load(&a.ckpt)?;
        let model = ck.model()?;
        let views = a.views.unwrap_or(ck.config.views);
        let steps = a.steps.unwrap_or(ck.config.ddim_steps);
        let eta = a.eta.unwrap_or(ck.config.eta);
        if views == 0 {
            return Err(Error::invalid("--views must be at least 1"));
        }
        Ok(Self { ck, model, views, steps, eta })
    }

    fn generate(&self, image: &image::RgbImage, rng: &mut SeededRng) -> Result<(Vec<f64>, Vec<image::RgbImage>)> {
        let m = &self.ck.config.model;
        let cond = Condition::from_image(image, 0.0, m, &self.ck.config.mesh_provider, &m.mesh_providers(), self.model.dtype())?;
        let azimuths = uniform_azimuths(self.views);
        let poses = azimuths.iter().map(|&az| m.pose(az)).collect::<Result<Vec<_>>>()?;
        let out = sample_views(&self.model, &cond, m, &poses, &self.ck.schedule, self.steps, self.eta, rng)?;
        Ok((azimuths, tensor_to_images(&out)?))
    }
}

fn sample(a: &SampleArgs, seed: u64) -> Result<Outcome> {
    let s = Sampler::new(a)?;
    let mut outputs = Vec::new();
    match (&a.input, &a.data) {
        (Some(input), None) => {
            if !input.exists() {
                return Err(Error::MissingFile(input.clone()));
            }
            let img = image::open(input)?.to_rgb8();
            let (azimuths, views) = s.generate(&img, &mut SeededRng::derive(seed, 0))?;
            if let Some(parent) = a.out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            tile_grid(&views, grid_columns(views.len()))?.save(&a.out)?;
            let dir = a.out.with_extension("views");
            std::fs::create_dir_all(&dir)?;
            for (az, v) in azimuths.iter().zip(&views) {
                v.save(dir.join(crate::data::view_file_name(*az)))?;
            }
            println!("wrote {} views to {} and {}", views.len(), a.out.display(), dir.display());
            outputs.push(a.out.clone());
            outputs.push(dir);
            Ok(Outcome { inputs: vec![a.ckpt.clone(), input.clone()], outputs, config_path: None, config_hash: Some(s.ck.config.hash()), primary: a.out.clone() })
        }
        (None, Some(data)) => {
            let records = load_dataset(data)?;
            let take = a.limit.unwrap_or(records.len()).min(records.len());
            let mut generated = Vec::with_capacity(take);
            for r in &records[..take] {
                let front = r.view_at(0.0).ok_or_else(|| Error::invalid(format!("identity {} has no frontal view", r.id)))?;
                let (azimuths, views) = s.generate(&front.image, &mut SeededRng::derive(seed, r.id as u64))?;
                let camera = RenderCamera { image_size: s.ck.config.model.image_size, ..r.camera };
                let views = azimuths
                    .iter()
                    .zip(views)
                    .map(|(&azimuth, image)| ViewRecord { azimuth, elevation: camera.elevation, image, planted: None, front_score: None })
                    .collect();
                generated.push(IdentityRecord { views, camera, consistency: None, ..r.clone() });
                println!("identity {}: {} views", r.id, s.views);
            }
            save_dataset(&generated, &a.out)?;
            outputs.push(a.out.clone());
            Ok(Outcome { inputs: vec![a.ckpt.clone(), data.clone()], outputs, config_path: None, config_hash: Some(s.ck.config.hash()), primary: a.out.clone() })
        }
        _ => Err(Error::invalid("pass exactly one of --input or --data")),
    }
}

/// Pairs generated identities with their dataset inputs; references are
/// attached when the dataset has a view at every generated azimuth.
pub fn eval_identities(data: &[IdentityRecord], generated: &[IdentityRecord]) -> Result<Vec<EvalIdentity>> {
    let mut out = Vec::with_capacity(generated.len());
    for g in generated {
        let d = data
            .iter()
            .find(|d| d.id == g.id)
            .ok_or_else(|| Error::Manifest(format!("generated identity {} not in the dataset", g.id)))?;
        let input = d.view_at(0.0).ok_or_else(|| Error::invalid(format!("identity {} has no frontal view", d.id)))?;
        let size = g.camera.image_size as u32;
        let resize = |img: &image::RgbImage| {
            if img.dimensions() == (size, size) {
                img.clone()
            } else {
                image::imageops::resize(img, size, size, image::imageops::FilterType::Triangle)
            }
        };
        let reference = g
            .views
            .iter()
            .map(|v| d.view_at(v.azimuth).map(|r| resize(&r.image)))
            .collect::<Option<Vec<_>>>();
        out.push(EvalIdentity { id: g.id, input: resize(&input.image), generated: g.views.iter().map(|v| v.image.clone()).collect(), reference });
    }
    Ok(out)
}

fn eval(a: &EvalArgs) -> Result<Outcome> {
    let data = load_dataset(&a.data)?;
    let generated = load_dataset(&a.generated)?;
    let mut report = evaluate(&eval_identities(&data, &generated)?, &MetricBackends::desk())?;
    report.provenance.insert("data".into(), a.data.display().to_string());
    report.provenance.insert("generated".into(), a.generated.display().to_string());
    if let Some(parent) = a.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&a.out, serde_json::to_string_pretty(&report)?)?;
    println!("{}", summary_table(&[(a.out.display().to_string(), report)]));
    Ok(Outcome { inputs: vec![a.data.clone(), a.generated.clone()], outputs: vec![a.out.clone()], config_path: None, config_hash: None, primary: a.out.clone() })
}

fn cell(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

pub fn summary_table(reports: &[(String, MetricReport)]) -> String {
    let mut s = String::from("| report | FID | CLIP-sim | I2OID | O2OID | Re-ID match | Re-ID dist | SSIM |\n|---|---|---|---|---|---|---|---|\n");
    for (name, r) in reports {
        s.push_str(&format!(
            "| {name} | {} | {} | {} | {} | {} | {} | {} |\n",
            cell(r.fid),
            cell(Some(r.clip_sim)),
            cell(Some(r.i2oid)),
            cell(r.o2oid),
            cell(r.reid_match),
            cell(r.reid_dist),
            cell(r.ssim_mean)
        ));
    }
    s
}

fn report(a: &ReportArgs) -> Result<Outcome> {
    let mut reports = Vec::new();
    for p in &a.inputs {
        if !p.exists() {
            return Err(Error::MissingFile(p.clone()));
        }
        let r: MetricReport = serde_json::from_str(&std::fs::read_to_string(p)?)?;
        reports.push((p.display().to_string(), r));
    }
    let table = summary_table(&reports);
    print!("{table}");
    let (outputs, primary) = match &a.out {
        Some(out) => {
            std::fs::write(out, &table)?;
            (vec![out.clone()], out.clone())
        }
        None => (vec![], a.inputs[0].clone()),
    };
    Ok(Outcome { inputs: a.inputs.clone(), outputs, config_path: None, config_hash: None, primary: primary.with_extension("report") })
}
