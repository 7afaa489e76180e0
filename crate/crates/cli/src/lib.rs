//! `pvseg` command-line interface.
//!
//! Every subcommand writes the configuration it actually ran with next to
//! its outputs, so any run can be repeated from that file. Relative output
//! paths are resolved against `PVSEG_OUT` when it is set.

pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::{json, Map, Value};

use pvseg_core::datamodel::{
    load_image, load_patch_pair, manifest_root, save_image, save_mask, save_rgba, split_dataset, tile_raster,
};
use pvseg_core::metrics::evaluate_dataset;
use pvseg_core::synthgen::{write_dataset, SceneSpec};
use pvseg_core::training::trainer::load_split;
use pvseg_core::training::{load_checkpoint, Trainer};
use pvseg_core::{write_atomic, DatasetManifest, Error, ImagePatch, ManifestEntry, MaskPatch, Model, Split, SplitSpec};

pub use config::RunConfig;

/// Environment variable overriding the root of relative output paths.
pub const OUT_ENV: &str = "PVSEG_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Core(e) => match e {
                Error::Config(_) => EXIT_USAGE,
                Error::Divergence { .. } | Error::Metric(_) => EXIT_NUMERICAL,
                _ => EXIT_DATA,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "pvseg", version, about = "Solar PV segmentation of aerial image patches")]
pub struct Cli {
    /// Root for relative output paths.
    #[arg(long, global = true, env = OUT_ENV)]
    pub out_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of image/mask pairs.
    Synth(SynthArgs),
    /// Cut large rasters into fixed-size patches.
    Tile(TileArgs),
    /// Assign train/val/test splits in a manifest.
    Split(SplitArgs),
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// Segment a single image.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene specification (JSON); defaults apply to missing keys.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TileArgs {
    /// Manifest of large rasters to tile.
    #[arg(long, conflicts_with_all = ["image", "mask"], required_unless_present = "image")]
    pub manifest: Option<PathBuf>,
    #[arg(long, requires = "mask")]
    pub image: Option<PathBuf>,
    #[arg(long, requires = "image")]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value_t = 400)]
    pub patch: usize,
    #[arg(long, default_value_t = 400)]
    pub stride: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output manifest; defaults to rewriting the input.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.6)]
    pub train: f64,
    #[arg(long, default_value_t = 0.2)]
    pub val: f64,
    #[arg(long, default_value_t = 0.2)]
    pub test: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Shuffle all entries together instead of per PV/background stratum.
    #[arg(long)]
    pub no_stratify: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (flat JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override any configuration key; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = config::parse_override)]
    pub overrides: Vec<(String, Value)>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Directory for `metrics.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the semantic mask of every decoder step.
    #[arg(long)]
    pub steps: bool,
}

struct Context {
    out_root: Option<PathBuf>,
}

impl Context {
    fn out(&self, p: &Path) -> PathBuf {
        match &self.out_root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }
}

fn write_json(path: &Path, value: &Value) -> CliResult {
    let mut s = serde_json::to_string_pretty(value).map_err(Error::from)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> CliResult {
    let ctx = Context { out_root: cli.out_root };
    match cli.command {
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Tile(a) => cmd_tile(&ctx, a),
        Command::Split(a) => cmd_split(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Predict(a) => cmd_predict(&ctx, a),
    }
}

fn cmd_synth(ctx: &Context, a: SynthArgs) -> CliResult {
    let mut spec: SceneSpec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => SceneSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(s) = a.image_size {
        spec.image_size = s;
    }
    let out = ctx.out(&a.out);
    let manifest = write_dataset(&spec, a.count, &out)?;
    manifest.validate(&out)?;
    write_json(&out.join("synth_config.json"), &json!({ "count": a.count, "spec": spec }))?;
    let positives = manifest.entries.iter().filter(|e| e.has_pv).count();
    println!("wrote {} pairs ({positives} with PV) to {}", manifest.entries.len(), out.display());
    Ok(())
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "raster".into())
}

fn cmd_tile(ctx: &Context, a: TileArgs) -> CliResult {
    let rasters: Vec<(PathBuf, PathBuf)> = match (&a.manifest, &a.image, &a.mask) {
        (Some(m), _, _) => {
            let manifest = DatasetManifest::read_jsonl(m)?;
            let root = manifest_root(m);
            manifest.entries.iter().map(|e| (root.join(&e.image), root.join(&e.mask))).collect()
        }
        (None, Some(i), Some(k)) => vec![(i.clone(), k.clone())],
        _ => return Err(CliError::Usage("pass --manifest or both --image and --mask".into())),
    };
    let out = ctx.out(&a.out);
    create_dir(&out.join("images"))?;
    create_dir(&out.join("masks"))?;
    let mut entries = Vec::new();
    for (image_path, mask_path) in &rasters {
        let (image, mask) = load_patch_pair(image_path, mask_path)?;
        let tiles = tile_raster(&image, &mask, a.patch, a.stride)?;
        let stem = file_stem(image_path);
        for t in tiles {
            let name = format!("{stem}_{:05}_{:05}.png", t.y, t.x);
            let (img_rel, mask_rel) = (format!("images/{name}"), format!("masks/{name}"));
            save_image(&out.join(&img_rel), &t.image)?;
            save_mask(&out.join(&mask_rel), &t.mask)?;
            entries.push(ManifestEntry {
                image: img_rel,
                mask: mask_rel,
                has_pv: t.mask.has_pv(),
                split: Split::Unassigned,
            });
        }
    }
    let manifest = DatasetManifest { entries };
    manifest.validate_structure()?;
    manifest.write_jsonl(&out.join("manifest.jsonl"))?;
    let sources: Vec<Value> = rasters
        .iter()
        .map(|(i, m)| json!({ "image": i, "mask": m }))
        .collect();
    write_json(
        &out.join("tile_config.json"),
        &json!({ "patch": a.patch, "stride": a.stride, "sources": sources }),
    )?;
    println!("wrote {} patches from {} raster(s) to {}", manifest.entries.len(), rasters.len(), out.display());
    Ok(())
}

/// Rewrites relative entry paths so they resolve from `to` instead of `from`.
fn rebase(manifest: &mut DatasetManifest, from: &Path, to: &Path) -> CliResult {
    let same = match (from.canonicalize(), to.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => from == to,
    };
    if same {
        return Ok(());
    }
    let absolute = |rel: &str| -> CliResult<String> {
        let p = from.join(rel);
        let p = p.canonicalize().map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        Ok(p.to_string_lossy().into_owned())
    };
    for e in &mut manifest.entries {
        if Path::new(&e.image).is_relative() {
            e.image = absolute(&e.image)?;
        }
        if Path::new(&e.mask).is_relative() {
            e.mask = absolute(&e.mask)?;
        }
    }
    Ok(())
}

fn cmd_split(ctx: &Context, a: SplitArgs) -> CliResult {
    let spec = SplitSpec {
        train_frac: a.train,
        val_frac: a.val,
        test_frac: a.test,
        stratify_positive: !a.no_stratify,
        seed: a.seed,
    };
    let manifest = DatasetManifest::read_jsonl(&a.manifest)?;
    let mut split = split_dataset(&manifest, &spec)?;
    let out = match &a.out {
        Some(p) => ctx.out(p),
        None => a.manifest.clone(),
    };
    let out_dir = manifest_root(&out);
    create_dir(&out_dir)?;
    rebase(&mut split, &manifest_root(&a.manifest), &out_dir)?;
    split.write_jsonl(&out)?;
    write_json(
        &out_dir.join("split_config.json"),
        &json!({
            "manifest": a.manifest,
            "out": out,
            "train_frac": spec.train_frac,
            "val_frac": spec.val_frac,
            "test_frac": spec.test_frac,
            "stratify_positive": spec.stratify_positive,
            "seed": spec.seed,
        }),
    )?;
    println!(
        "train {} / val {} / test {} -> {}",
        split.count(Split::Train),
        split.count(Split::Val),
        split.count(Split::Test),
        out.display()
    );
    Ok(())
}

fn resolve_run_config(a: &TrainArgs) -> CliResult<RunConfig> {
    let mut map = match &a.config {
        Some(p) => RunConfig::read_map(p)?,
        None => Map::new(),
    };
    let mut set = |k: &str, v: Value| {
        map.insert(k.to_string(), v);
    };
    if let Some(m) = &a.manifest {
        set("manifest", json!(m));
    }
    if let Some(o) = &a.out {
        set("out_dir", json!(o));
    }
    if let Some(v) = a.epochs {
        set("epochs", json!(v));
    }
    if let Some(v) = a.lr {
        set("lr", json!(v));
    }
    if let Some(v) = a.batch_size {
        set("batch_size", json!(v));
    }
    if let Some(v) = a.max_steps {
        set("max_steps", json!(v));
    }
    if let Some(v) = a.seed {
        set("seed", json!(v));
    }
    for (k, v) in &a.overrides {
        set(k, v.clone());
    }
    RunConfig::from_map(map)
}

fn cmd_train(ctx: &Context, a: TrainArgs) -> CliResult {
    let cfg = resolve_run_config(&a)?;
    let manifest_path = cfg
        .manifest
        .clone()
        .ok_or_else(|| CliError::Usage("no manifest given (set `manifest` or pass --manifest)".into()))?;
    let out = ctx.out(&cfg.out_dir);
    create_dir(&out)?;
    write_atomic(&out.join("config.json"), cfg.to_json().as_bytes())?;

    let manifest = DatasetManifest::read_jsonl(&manifest_path)?;
    let root = manifest_root(&manifest_path);
    let train = load_split(&manifest, &root, Split::Train)?;
    let val = load_split(&manifest, &root, Split::Val)?;
    if train.is_empty() {
        return Err(CliError::Data(format!("{}: no entries in the train split", manifest_path.display())));
    }
    info!("training on {} images, validating on {}", train.len(), val.len());
    let model = Model::new(&cfg.model, cfg.train.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    trainer.fit(&train, &val, Some(&out))?;
    let last = trainer.history.last();
    println!(
        "trained {} epoch(s), {} step(s); final loss {}; outputs in {}",
        trainer.epoch,
        trainer.step,
        last.map_or("-".into(), |r| format!("{:.4}", r.loss)),
        out.display()
    );
    Ok(())
}

fn cmd_eval(ctx: &Context, a: EvalArgs) -> CliResult {
    let (model, _, meta) = load_checkpoint(&a.checkpoint)?;
    let manifest = DatasetManifest::read_jsonl(&a.manifest)?;
    let root = manifest_root(&a.manifest);
    if manifest.count(a.split) == 0 {
        return Err(CliError::Data(format!("{}: split `{}` is empty", a.manifest.display(), a.split)));
    }
    let report = evaluate_dataset(&model, &manifest, &root, a.split)?;
    let out = ctx.out(&a.out);
    create_dir(&out)?;
    write_atomic(&out.join("metrics.csv"), report.to_csv()?.as_bytes())?;
    write_json(
        &out.join("eval_config.json"),
        &json!({
            "checkpoint": a.checkpoint,
            "manifest": a.manifest,
            "split": a.split,
            "model": meta.model,
            "epoch": meta.epoch,
            "step": meta.step,
        }),
    )?;
    print!("{}", report.to_table()?);
    if !report.errors.is_empty() {
        for (name, e) in &report.errors {
            warn!("{name}: {e}");
        }
        return Err(CliError::Data(format!("{} image(s) could not be evaluated", report.errors.len())));
    }
    Ok(())
}

/// The input image with PV pixels blended half-way towards red.
pub fn overlay(image: &ImagePatch, mask: &MaskPatch) -> image::RgbaImage {
    let rgb = image.to_rgb8();
    image::RgbaImage::from_fn(image.width as u32, image.height as u32, |x, y| {
        let [r, g, b] = rgb.get_pixel(x, y).0;
        if mask.get(x as usize, y as usize) == 1 {
            let blend = |c: u8, t: u8| ((c as u16 + t as u16) / 2) as u8;
            image::Rgba([blend(r, 255), blend(g, 0), blend(b, 0), 255])
        } else {
            image::Rgba([r, g, b, 255])
        }
    })
}

fn cmd_predict(ctx: &Context, a: PredictArgs) -> CliResult {
    let (model, _, meta) = load_checkpoint(&a.checkpoint)?;
    let image = load_image(&a.image)?;
    let pred = model.predict(&image)?;
    let out = ctx.out(&a.out);
    create_dir(&out)?;
    save_mask(&out.join("mask.png"), &pred.mask)?;
    save_rgba(&out.join("overlay.png"), &overlay(&image, &pred.mask))?;
    if a.steps {
        create_dir(&out.join("steps"))?;
        for (i, m) in pred.step_masks.iter().enumerate() {
            save_mask(&out.join("steps").join(format!("step_{i}.png")), m)?;
        }
    }
    write_json(
        &out.join("predict_config.json"),
        &json!({
            "checkpoint": a.checkpoint,
            "image": a.image,
            "steps": a.steps,
            "model": meta.model,
        }),
    )?;
    let frac = pred.mask.positive_count() as f64 / (image.width * image.height) as f64;
    println!("PV pixels: {} ({:.2}%)", pred.mask.positive_count(), 100.0 * frac);
    Ok(())
}
