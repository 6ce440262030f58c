//! Command-line front end.
//!
//! Every flag can also be given in a flat JSON file passed with `--config`;
//! values resolve as flag > config file > built-in default. Exit codes: 0 on
//! success, 1 on failure, 2 on usage errors, 3 when a checkpoint is missing.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::baselines::{CenterBox, GradientProducer, IterConfig, IterOptimizer, IterativeProducer, MaskerProducer, MaxBox};
use crate::blackbox::{classify, train_classifier, ClassifierTrainConfig, SmallCnn};
use crate::datasets::{generate_sprites, load_cifar10_batch, load_image_directory, save_image_directory, LabeledImageSet, SpriteConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_saliency, localization_error, EvaluationReport, GroundTruthBoxes, SaliencyProducer};
use crate::evidence::{apply_mask_image, make_alternative, AlternativeMode, AlternativeSpec};
use crate::image::Image;
use crate::masker::{Masker, MaskerConfig};
use crate::objective::ObjectiveParams;
use crate::service::{self, ExplainRequest, ServiceState};
use crate::trainer::{masker_diagnostics, train, TrainConfig, TrainOutputs};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING_CHECKPOINT: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "fastsal", version, about = "Real-time saliency masks for image classifiers")]
pub struct Cli {
    /// Flat JSON file of defaults for any flag (snake_case keys).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic sprite dataset with ground-truth boxes.
    GenSprites(GenSpritesArgs),
    /// Train the small CNN classifier.
    TrainBlackbox(TrainBlackboxArgs),
    /// Train a masking model against a frozen classifier.
    TrainMasker(TrainMaskerArgs),
    /// Explain one image with a trained masker.
    Explain(ExplainArgs),
    /// Explain one image by per-image mask optimization.
    Iterate(IterateArgs),
    /// Score a saliency method on a dataset.
    Evaluate(EvaluateArgs),
    /// Serve the HTTP explanation API.
    Serve(ServeArgs),
    /// Write the masker's class embedding as CSV.
    ExportEmbedding(ExportEmbeddingArgs),
}

// Flag structs: every field optional so that absence can be told apart from a value.

#[derive(Args, Debug, Serialize)]
pub struct GenSpritesArgs {
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub area_min: Option<f64>,
    #[arg(long)]
    pub area_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenSpritesConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub area_min: f64,
    pub area_max: f64,
}

impl Default for GenSpritesConfig {
    fn default() -> Self {
        let s = SpriteConfig::default();
        Self {
            out_dir: PathBuf::from("sprites"),
            seed: s.seed,
            num_classes: s.num_classes,
            per_class: s.sprites_per_class,
            image_size: s.image_size,
            area_min: s.sprite_area_range.0,
            area_max: s.sprite_area_range.1,
        }
    }
}

/// Dataset selection shared by several subcommands.
#[derive(Args, Debug, Serialize)]
pub struct DataArgs {
    /// Image directory (`<class>/<image>.png`, optional boxes.csv) or a CIFAR-10 binary batch.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Skip this many images.
    #[arg(long)]
    pub offset: Option<usize>,
    /// Use at most this many images.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Resize directory images to this square size.
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainBlackboxArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Output checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainBlackboxConfig {
    pub data: Option<PathBuf>,
    pub offset: usize,
    pub limit: Option<usize>,
    pub image_size: usize,
    pub out: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainBlackboxConfig {
    fn default() -> Self {
        let c = ClassifierTrainConfig::default();
        Self {
            data: None,
            offset: 0,
            limit: None,
            image_size: 32,
            out: PathBuf::from("blackbox.ckpt"),
            epochs: c.epochs,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            validation_fraction: c.validation_fraction,
            seed: c.seed,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct ObjectiveArgs {
    #[arg(long)]
    pub lambda_tv: Option<f64>,
    #[arg(long)]
    pub lambda_area: Option<f64>,
    #[arg(long)]
    pub lambda_destroy: Option<f64>,
    #[arg(long)]
    pub destroy_power: Option<f64>,
    #[arg(long)]
    pub fake_prob: Option<f64>,
    #[arg(long)]
    pub aux_weight: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainMaskerArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub blackbox: Option<PathBuf>,
    /// Parent of timestamped run directories.
    #[arg(long)]
    pub runs_dir: Option<PathBuf>,
    /// Exact run directory (overrides the timestamped one).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Held-out data for the post-training diagnostics report.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub encoder_frozen: Option<bool>,
    /// blur, color_noise or random_50_50
    #[arg(long)]
    pub alternative: Option<String>,
    /// cifar or imagenet
    #[arg(long)]
    pub preset: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub objective: ObjectiveArgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainMaskerConfig {
    pub data: Option<PathBuf>,
    pub offset: usize,
    pub limit: Option<usize>,
    pub image_size: usize,
    pub blackbox: Option<PathBuf>,
    pub runs_dir: PathBuf,
    pub run_dir: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub encoder_frozen: bool,
    pub alternative: AlternativeMode,
    pub preset: String,
    pub lambda_tv: f64,
    pub lambda_area: f64,
    pub lambda_destroy: f64,
    pub destroy_power: f64,
    pub fake_prob: f64,
    pub aux_weight: f64,
}

impl Default for TrainMaskerConfig {
    fn default() -> Self {
        let t = TrainConfig::desk();
        let p = t.params;
        Self {
            data: None,
            offset: 0,
            limit: None,
            image_size: 32,
            blackbox: None,
            runs_dir: PathBuf::from("runs"),
            run_dir: None,
            val_data: None,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            encoder_frozen: t.encoder_frozen,
            alternative: t.alternative,
            preset: "cifar".into(),
            lambda_tv: p.lambda_tv,
            lambda_area: p.lambda_area,
            lambda_destroy: p.lambda_destroy,
            destroy_power: p.destroy_power,
            fake_prob: p.fake_prob,
            aux_weight: p.aux_weight,
        }
    }
}

impl TrainMaskerConfig {
    fn objective(&self) -> ObjectiveParams {
        ObjectiveParams {
            lambda_tv: self.lambda_tv,
            lambda_area: self.lambda_area,
            lambda_destroy: self.lambda_destroy,
            destroy_power: self.destroy_power,
            fake_prob: self.fake_prob,
            aux_weight: self.aux_weight,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct ExplainArgs {
    #[arg(long)]
    pub masker: Option<PathBuf>,
    #[arg(long)]
    pub blackbox: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Class to explain; the classifier's top-1 when absent.
    #[arg(long = "class")]
    pub class: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub masker: Option<PathBuf>,
    pub blackbox: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub class: Option<usize>,
    pub threshold: f64,
    pub out_dir: PathBuf,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            masker: None,
            blackbox: None,
            image: None,
            class: None,
            threshold: crate::eval::DEFAULT_THRESHOLD,
            out_dir: PathBuf::from("explanation"),
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct IterateArgs {
    #[arg(long)]
    pub blackbox: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long = "class")]
    pub class: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// gradient_descent or adam
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub mask_resolution: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub include_preserve_term: Option<bool>,
    #[arg(long)]
    pub alternative: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub objective: ObjectiveArgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IterateConfig {
    pub blackbox: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub class: Option<usize>,
    pub out_dir: PathBuf,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: IterOptimizer,
    pub mask_resolution: Option<usize>,
    pub include_preserve_term: bool,
    pub alternative: AlternativeMode,
    pub seed: u64,
    pub lambda_tv: f64,
    pub lambda_area: f64,
    pub lambda_destroy: f64,
    pub destroy_power: f64,
    pub fake_prob: f64,
    pub aux_weight: f64,
}

impl Default for IterateConfig {
    fn default() -> Self {
        let c = IterConfig::desk();
        let p = c.params;
        Self {
            blackbox: None,
            image: None,
            class: None,
            out_dir: PathBuf::from("iteration"),
            steps: c.steps,
            learning_rate: c.learning_rate,
            optimizer: c.optimizer,
            mask_resolution: c.mask_resolution,
            include_preserve_term: c.include_preserve_term,
            alternative: c.alternative,
            seed: c.seed,
            lambda_tv: p.lambda_tv,
            lambda_area: p.lambda_area,
            lambda_destroy: p.lambda_destroy,
            destroy_power: p.destroy_power,
            fake_prob: p.fake_prob,
            aux_weight: p.aux_weight,
        }
    }
}

impl IterateConfig {
    pub fn iter_config(&self) -> IterConfig {
        IterConfig {
            steps: self.steps,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            params: ObjectiveParams {
                lambda_tv: self.lambda_tv,
                lambda_area: self.lambda_area,
                lambda_destroy: self.lambda_destroy,
                destroy_power: self.destroy_power,
                fake_prob: self.fake_prob,
                aux_weight: self.aux_weight,
            },
            mask_resolution: self.mask_resolution,
            include_preserve_term: self.include_preserve_term,
            alternative: self.alternative,
            seed: self.seed,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// masker, center_box, max_box, gradient, iterative or ground_truth
    #[arg(long)]
    pub producer: Option<String>,
    /// Comma-separated: saliency, localization
    #[arg(long)]
    pub metrics: Option<String>,
    #[arg(long)]
    pub masker: Option<PathBuf>,
    #[arg(long)]
    pub blackbox: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub data: Option<PathBuf>,
    pub offset: usize,
    pub limit: Option<usize>,
    pub image_size: usize,
    pub producer: String,
    pub metrics: String,
    pub masker: Option<PathBuf>,
    pub blackbox: Option<PathBuf>,
    pub threshold: f64,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            data: None,
            offset: 0,
            limit: None,
            image_size: 32,
            producer: "masker".into(),
            metrics: "saliency".into(),
            masker: None,
            blackbox: None,
            threshold: crate::eval::DEFAULT_THRESHOLD,
            seed: 0,
            out: PathBuf::from("report.json"),
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct ServeArgs {
    #[arg(long)]
    pub masker: Option<PathBuf>,
    #[arg(long)]
    pub blackbox: Option<PathBuf>,
    /// Defaults to $FASTSAL_PORT, then 8080.
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub max_image_bytes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeConfig {
    pub masker: Option<PathBuf>,
    pub blackbox: Option<PathBuf>,
    pub port: u16,
    pub host: String,
    pub max_image_bytes: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            masker: None,
            blackbox: None,
            port: service::default_port(),
            host: "127.0.0.1".into(),
            max_image_bytes: service::DEFAULT_MAX_IMAGE_BYTES,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct ExportEmbeddingArgs {
    #[arg(long)]
    pub masker: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportEmbeddingConfig {
    pub masker: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for ExportEmbeddingConfig {
    fn default() -> Self {
        Self { masker: None, out: PathBuf::from("embedding.csv") }
    }
}

/// Failure of a CLI run, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Run(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Run(Error::MissingCheckpoint(_)) => EXIT_MISSING_CHECKPOINT,
            CliError::Run(_) => EXIT_FAILURE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Merges defaults, then config-file keys, then non-null flags.
pub fn resolve<A: Serialize, C: Serialize + DeserializeOwned + Default>(args: &A, file: Option<&Value>) -> CliResult<C> {
    let mut merged = serde_json::to_value(C::default())?;
    let base = merged.as_object_mut().expect("configs serialize to objects");
    if let Some(Value::Object(f)) = file {
        for (k, v) in f {
            if base.contains_key(k) {
                base.insert(k.clone(), v.clone());
            }
        }
    }
    if let Value::Object(flags) = serde_json::to_value(args)? {
        for (k, v) in flags {
            if !v.is_null() && base.contains_key(&k) {
                base.insert(k, v);
            }
        }
    }
    serde_json::from_value(merged).map_err(|e| CliError::Usage(format!("invalid option value: {e}")))
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    v.as_ref().ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

fn load_config_file(path: Option<&Path>) -> CliResult<Option<Value>> {
    let Some(path) = path else { return Ok(None) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config file {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config file {} is not valid JSON: {e}", path.display())))?;
    if !v.is_object() {
        return Err(CliError::Usage("config file must hold a JSON object".into()));
    }
    Ok(Some(v))
}

/// Loads a dataset from a CIFAR-10 batch file or an image directory and
/// applies `offset`/`limit`.
pub fn load_dataset(path: &Path, image_size: usize, offset: usize, limit: Option<usize>) -> Result<LabeledImageSet> {
    let set = if path.is_file() {
        load_cifar10_batch(path)?
    } else {
        load_image_directory(path, (image_size, image_size))?
    };
    let end = limit.map_or(set.len(), |l| (offset + l).min(set.len()));
    let start = offset.min(end);
    Ok(set.subset(&(start..end).collect::<Vec<_>>()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let file = load_config_file(cli.config.as_deref())?;
    let file = file.as_ref();
    match &cli.command {
        Command::GenSprites(a) => gen_sprites(&resolve(a, file)?),
        Command::TrainBlackbox(a) => train_blackbox(&resolve(a, file)?),
        Command::TrainMasker(a) => train_masker(&resolve(a, file)?),
        Command::Explain(a) => explain(&resolve(a, file)?),
        Command::Iterate(a) => iterate(&resolve(a, file)?),
        Command::Evaluate(a) => evaluate(&resolve(a, file)?),
        Command::Serve(a) => serve(&resolve(a, file)?),
        Command::ExportEmbedding(a) => export_embedding(&resolve(a, file)?),
    }
}

fn gen_sprites(c: &GenSpritesConfig) -> CliResult<()> {
    let cfg = SpriteConfig {
        image_size: c.image_size,
        num_classes: c.num_classes,
        sprites_per_class: c.per_class,
        sprite_area_range: (c.area_min, c.area_max),
        seed: c.seed,
        ..Default::default()
    };
    let set = generate_sprites(&cfg)?;
    save_image_directory(&set, &c.out_dir)?;
    println!("wrote {} sprites to {}", set.len(), c.out_dir.display());
    Ok(())
}

fn train_blackbox(c: &TrainBlackboxConfig) -> CliResult<()> {
    let data = load_dataset(required(&c.data, "data")?, c.image_size, c.offset, c.limit)?;
    let cfg = ClassifierTrainConfig {
        epochs: c.epochs,
        batch_size: c.batch_size,
        learning_rate: c.learning_rate,
        validation_fraction: c.validation_fraction,
        seed: c.seed,
        ..Default::default()
    };
    let trained = train_classifier(&data, &cfg, Some(&c.out))?;
    write_json(&c.out.with_extension("report.json"), &trained.report)?;
    println!(
        "validation accuracy {:.4} on {} images; checkpoint {}",
        trained.report.validation_accuracy,
        trained.report.validation_size,
        c.out.display()
    );
    Ok(())
}

fn timestamp_dir(parent: &Path) -> PathBuf {
    parent.join(chrono::Local::now().format("%Y%m%d-%H%M%S").to_string())
}

fn train_masker(c: &TrainMaskerConfig) -> CliResult<()> {
    let data = load_dataset(required(&c.data, "data")?, c.image_size, c.offset, c.limit)?;
    let model = SmallCnn::load(required(&c.blackbox, "blackbox")?)?;
    let k = model.class_names().len();
    let mcfg = match c.preset.as_str() {
        "cifar" => MaskerConfig::cifar(k),
        "imagenet" => MaskerConfig::imagenet(k),
        other => return Err(CliError::Usage(format!("unknown preset {other:?}"))),
    };
    let mcfg = mcfg.with_input_size(model.config().input_size.0, model.config().input_size.1);
    let masker = Masker::new(mcfg, model.class_names().to_vec(), c.seed)?;
    let run_dir = c.run_dir.clone().unwrap_or_else(|| timestamp_dir(&c.runs_dir));
    std::fs::create_dir_all(run_dir.join("reports"))?;
    write_json(&run_dir.join("config.json"), c)?;
    let tcfg = TrainConfig {
        epochs: c.epochs,
        batch_size: c.batch_size,
        learning_rate: c.learning_rate,
        params: c.objective(),
        seed: c.seed,
        checkpoint_every: c.checkpoint_every,
        encoder_frozen: c.encoder_frozen,
        alternative: c.alternative,
    };
    let outputs = TrainOutputs {
        history: Some(run_dir.join("history.jsonl")),
        checkpoint_dir: Some(run_dir.join("checkpoints")),
    };
    train(&masker, &data, &model, &tcfg, &outputs)?;
    let final_ckpt = run_dir.join("checkpoints").join("masker.ckpt");
    masker.save(&final_ckpt)?;
    if let Some(val) = &c.val_data {
        let val = load_dataset(val, c.image_size, 0, None)?;
        let d = masker_diagnostics(&masker, &val, &model, AlternativeMode::Blur, c.seed)?;
        write_json(&run_dir.join("reports").join("diagnostics.json"), &d)?;
    }
    println!("run directory {}; masker checkpoint {}", run_dir.display(), final_ckpt.display());
    Ok(())
}

fn explain(c: &ExplainConfig) -> CliResult<()> {
    let model = Arc::new(SmallCnn::load(required(&c.blackbox, "blackbox")?)?);
    let masker = Arc::new(Masker::load(required(&c.masker, "masker")?)?);
    let names = model.class_names().to_vec();
    let state = ServiceState::new(masker, model, names)?.with_max_image_bytes(usize::MAX / 2);
    let bytes = std::fs::read(required(&c.image, "image")?)?;
    let req = ExplainRequest {
        image: STANDARD.encode(bytes),
        class_id: c.class.map(|v| v as i64),
        threshold: Some(c.threshold),
    };
    let resp = service::handle_explain(&req, &state)
        .map_err(|e| CliError::Run(Error::Contract(format!("{}: {}", e.code, e.message))))?;
    std::fs::create_dir_all(&c.out_dir)?;
    for (name, b64) in [("mask.png", &resp.mask), ("preserved.png", &resp.preserved), ("destroyed.png", &resp.destroyed)] {
        let png = STANDARD.decode(b64).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(c.out_dir.join(name), png)?;
    }
    let report = json!({
        "class_id": resp.class_id,
        "class_name": resp.class_name,
        "threshold": resp.threshold,
        "crop": resp.crop,
        "crop_found": resp.crop_found,
        "area_fraction": resp.area_fraction,
        "saliency_metric": resp.saliency_metric,
        "class_prob_full": resp.class_prob_full,
        "class_prob_crop": resp.class_prob_crop,
        "timing_ms": resp.timing_ms,
    });
    write_json(&c.out_dir.join("report.json"), &report)?;
    println!(
        "class {} ({}): metric {:.4}, crop {:?}",
        resp.class_id, resp.class_name, resp.saliency_metric, resp.crop
    );
    Ok(())
}

fn iterate(c: &IterateConfig) -> CliResult<()> {
    let model = SmallCnn::load(required(&c.blackbox, "blackbox")?)?;
    let image = Image::open(required(&c.image, "image")?)?;
    let input = model.config().input_size;
    let x = if image.dims() == input { image } else { image.resize(input.0, input.1) };
    let class = match c.class {
        Some(k) => k,
        None => classify(&model, &[&x])?[0].argmax(),
    };
    let cfg = c.iter_config();
    let out = crate::baselines::iterative_mask(&x, class, &model, &cfg)?;
    let alt = make_alternative(&x, &AlternativeSpec::for_height(AlternativeMode::Blur, x.height(), 0))?;
    std::fs::create_dir_all(&c.out_dir)?;
    out.mask.save_png(&c.out_dir.join("mask.png"))?;
    apply_mask_image(&x, &out.mask, &alt)?.save_png(&c.out_dir.join("preserved.png"))?;
    apply_mask_image(&x, &out.mask.inverted(), &alt)?.save_png(&c.out_dir.join("destroyed.png"))?;
    let report = json!({
        "class_id": class,
        "config": cfg,
        "trace": out.trace,
        "stopped_early": out.stopped_early,
        "mask_mean": out.mask.mean(),
    });
    write_json(&c.out_dir.join("report.json"), &report)?;
    println!("final loss {:?} after {} steps", out.trace.last(), out.trace.len());
    Ok(())
}

fn evaluate(c: &EvaluateConfig) -> CliResult<()> {
    let metrics: Vec<&str> = c.metrics.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if let Some(bad) = metrics.iter().find(|m| !matches!(**m, "saliency" | "localization")) {
        return Err(CliError::Usage(format!("unknown metric {bad:?}")));
    }
    let data = load_dataset(required(&c.data, "data")?, c.image_size, c.offset, c.limit)?;
    let needs_model = metrics.contains(&"saliency") || matches!(c.producer.as_str(), "gradient" | "iterative");
    let model = if needs_model { Some(SmallCnn::load(required(&c.blackbox, "blackbox")?)?) } else { None };
    let masker = if c.producer == "masker" { Some(Masker::load(required(&c.masker, "masker")?)?) } else { None };
    let gt;
    let producer: Box<dyn SaliencyProducer + '_> = match c.producer.as_str() {
        "masker" => Box::new(MaskerProducer { masker: masker.as_ref().expect("loaded above") }),
        "center_box" => Box::new(CenterBox),
        "max_box" => Box::new(MaxBox),
        "gradient" => Box::new(GradientProducer { model: model.as_ref().expect("loaded above") }),
        "iterative" => Box::new(IterativeProducer {
            model: model.as_ref().expect("loaded above"),
            config: IterConfig { seed: c.seed, ..IterConfig::desk() },
        }),
        "ground_truth" => {
            gt = data.boxes.clone().ok_or_else(|| Error::Config("dataset has no boxes".into()))?;
            Box::new(GroundTruthBoxes { boxes: &gt })
        }
        other => return Err(CliError::Usage(format!("unknown producer {other:?}"))),
    };
    let saliency = if metrics.contains(&"saliency") {
        Some(evaluate_saliency(producer.as_ref(), &data, model.as_ref().expect("loaded above"), c.threshold)?)
    } else {
        None
    };
    let localization = if metrics.contains(&"localization") {
        Some(localization_error(producer.as_ref(), &data, c.threshold)?)
    } else {
        None
    };
    let report = EvaluationReport {
        producer: c.producer.clone(),
        threshold: c.threshold,
        seed: c.seed,
        config: serde_json::to_value(c)?,
        saliency,
        localization,
    };
    report.write(&c.out)?;
    if let Some(s) = &report.saliency {
        println!("{}: mean saliency metric {:.4} over {} images", c.producer, s.mean_metric, s.images.len());
    }
    if let Some(l) = &report.localization {
        println!("{}: localization error {:.4} over {} images", c.producer, l.error_rate, l.images.len());
    }
    Ok(())
}

fn serve(c: &ServeConfig) -> CliResult<()> {
    let model = Arc::new(SmallCnn::load(required(&c.blackbox, "blackbox")?)?);
    let masker = Arc::new(Masker::load(required(&c.masker, "masker")?)?);
    let names = model.class_names().to_vec();
    let state = Arc::new(ServiceState::new(masker, model, names)?.with_max_image_bytes(c.max_image_bytes));
    let addr: SocketAddr = format!("{}:{}", c.host, c.port)
        .parse()
        .map_err(|e| CliError::Usage(format!("bad listen address: {e}")))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(state, addr))?;
    Ok(())
}

fn export_embedding(c: &ExportEmbeddingConfig) -> CliResult<()> {
    let masker = Masker::load(required(&c.masker, "masker")?)?;
    masker.export_embedding(&c.out)?;
    println!("wrote {} class embeddings to {}", masker.class_names().len(), c.out.display());
    Ok(())
}
