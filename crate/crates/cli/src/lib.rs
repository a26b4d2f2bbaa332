//! Command line front end. [`dispatch`] parses arguments, runs one
//! subcommand and maps failures to exit codes:
//! 0 success, 1 usage error, 2 data error, 3 training abort.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use wetmap::bands::{assemble_modalities, ModalityStacks, ScalingScope};
use wetmap::classes::{class_counts, ClassLabel, NUM_CLASSES};
use wetmap::dataset::{
    proportional_sizes, read_manifest, samples_from_rows, select, split_iid, write_manifest,
    DatasetSplit, PatchSample, Provenance, PATCH_SIZE_M,
};
use wetmap::evaluate::ablation_report;
use wetmap::mapgen::{crf_refine, render_palette, slide_map, LabelMap, SlideConfig};
use wetmap::model::{
    build_fusion, load_checkpoint, BackboneConfig, FusionStrategy, Modality, Model, ModelDescriptor,
};
use wetmap::raster::{load_raster, write_raster, RasterGrid};
use wetmap::rng::derive_seed;
use wetmap::synth::{generate_scene, imbalance_manifest, Layout, SceneSpec};
use wetmap::trainer::{
    evaluate_model, init_seed, run_ablation, run_cv, train, training_set, write_run_dir, BalanceMode, ExperimentData,
    LossMode, TrainConfig, TrainError,
};
use wetmap::Scalar;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "WETMAP_OUT_ROOT";
pub const RUN_MANIFEST: &str = "run.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    /// Argument parser message, already carrying its own usage text.
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Data(String),
    #[error("training aborted: {0}")]
    Abort(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Parse(_) => 1,
            CliError::Data(_) => 2,
            CliError::Abort(_) => 3,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Abort(e.to_string()),
            TrainError::InvalidConfig(_) | TrainError::EpochOutOfRange { .. } => CliError::Usage(e.to_string()),
            other => data(other),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "wetmap", version, about = "Wetland patch classification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene with ground truth
    #[command(args_override_self = true)]
    Synth(SynthArgs),
    /// Assemble rasters and a manifest into a dataset directory
    #[command(args_override_self = true)]
    Ingest(IngestArgs),
    /// Report class counts before and after augmentation balancing
    #[command(args_override_self = true)]
    Balance(BalanceArgs),
    /// Train a single-modality or fusion model
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split
    #[command(args_override_self = true)]
    Evaluate(EvaluateArgs),
    /// Compose a label map over a scene
    #[command(args_override_self = true)]
    Map(MapArgs),
    /// Train and score the full ablation grid
    #[command(args_override_self = true)]
    Ablate(AblateArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Ingest(_) => "ingest",
            Command::Balance(_) => "balance",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Map(_) => "map",
            Command::Ablate(_) => "ablate",
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct Common {
    /// Output directory [default: $WETMAP_OUT_ROOT/<command>]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON object whose keys mirror the long flags
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Dtype {
    F32,
    F64,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
enum LayoutArg {
    Checkerboard,
    Smooth,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Arch {
    Tiny,
    Desk,
    Standard,
}

impl Arch {
    fn config(self) -> BackboneConfig {
        match self {
            Arch::Tiny => BackboneConfig::tiny(3),
            Arch::Desk => BackboneConfig::desk(3),
            Arch::Standard => BackboneConfig::standard(3),
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SplitArg {
    Train,
    Validation,
    Test,
    All,
}

fn parse_modality(s: &str) -> Result<Modality, String> {
    s.parse::<Modality>().map_err(|e| e.to_string())
}

fn parse_fusion(s: &str) -> Result<FusionStrategy, String> {
    s.parse::<FusionStrategy>().map_err(|e| e.to_string())
}

fn parse_scope(s: &str) -> Result<ScalingScope, String> {
    match s {
        "scene" => Ok(ScalingScope::Scene),
        "patch" => Ok(ScalingScope::Patch),
        _ => Err(format!("unknown scaling scope {s:?} (scene|patch)")),
    }
}

fn parse_counts(s: &str) -> Result<[usize; NUM_CLASSES], String> {
    let parts = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    parts
        .try_into()
        .map_err(|v: Vec<usize>| format!("expected {NUM_CLASSES} counts, got {}", v.len()))
}

fn parse_loss(s: &str) -> Result<LossMode, String> {
    match s {
        "plain" => Ok(LossMode::Plain),
        "reweighted" => Ok(LossMode::Reweighted),
        _ => Err(format!("unknown loss {s:?} (plain|reweighted)")),
    }
}

fn parse_balance(s: &str) -> Result<BalanceMode, String> {
    match s {
        "none" => Ok(BalanceMode::None),
        "augment" => Ok(BalanceMode::Augment),
        _ => Err(format!("unknown balance mode {s:?} (none|augment)")),
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Use the 2x3 code construction instead of six distinct signatures
    #[arg(long)]
    complementary: bool,
    #[arg(long, value_enum, default_value_t = LayoutArg::Checkerboard)]
    layout: LayoutArg,
    /// Maximum block-edge displacement for the smooth layout
    #[arg(long, default_value_t = 6.0)]
    jitter_m: f64,
    #[arg(long, default_value_t = 2)]
    grid_rows: usize,
    #[arg(long, default_value_t = 6)]
    grid_cols: usize,
    /// Block side in 30 m patches
    #[arg(long, default_value_t = 3)]
    block_patches: usize,
    /// Per-pixel noise standard deviation
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    /// Per-block offset standard deviation
    #[arg(long, default_value_t = 0.0)]
    region_sigma: f64,
    /// Subsample the manifest to these six class counts
    #[arg(long, value_name = "A,B,C,D,E,F", value_parser = parse_counts)]
    counts: Option<[usize; NUM_CLASSES]>,
    /// Full scene spec as JSON; overrides the shape flags
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct IngestArgs {
    #[command(flatten)]
    common: Common,
    /// Three-band R, G, B raster
    #[arg(long)]
    rgb: PathBuf,
    /// Assembled NIR, DEM, NDVI raster
    #[arg(long, conflicts_with_all = ["nir", "dem"], required_unless_present_all = ["nir", "dem"])]
    ndd: Option<PathBuf>,
    /// Raw NIR raster on the RGB grid
    #[arg(long, requires = "dem")]
    nir: Option<PathBuf>,
    /// Raw elevation raster, any resolution
    #[arg(long, requires = "nir")]
    dem: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_parser = parse_scope, default_value = "scene")]
    #[serde(serialize_with = "ser_debug")]
    scope: ScalingScope,
}

#[derive(Args, Debug, Clone, Serialize)]
struct BalanceArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: PathBuf,
    /// Dataset directory; when given the augmented samples are generated
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct TrainFlags {
    #[arg(long, value_parser = parse_loss, default_value = "plain")]
    #[serde(serialize_with = "ser_debug")]
    loss: LossMode,
    #[arg(long, value_parser = parse_balance, default_value = "augment")]
    #[serde(serialize_with = "ser_debug")]
    balance: BalanceMode,
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    power: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum, default_value_t = Arch::Tiny)]
    arch: Arch,
    #[arg(long, value_enum, default_value_t = Dtype::F32)]
    dtype: Dtype,
}

impl TrainFlags {
    fn config(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            r_i: self.lr.unwrap_or(d.r_i),
            power: self.power.unwrap_or(d.power),
            max_epoch: self.epochs.unwrap_or(d.max_epoch),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            momentum: self.momentum.unwrap_or(d.momentum),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            loss_mode: self.loss,
            balance_mode: self.balance,
            seed,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by `ingest`
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_modality, conflicts_with = "fusion", required_unless_present = "fusion")]
    #[serde(serialize_with = "ser_debug")]
    modality: Option<Modality>,
    #[arg(long, value_parser = parse_fusion)]
    #[serde(serialize_with = "ser_debug")]
    fusion: Option<FusionStrategy>,
    /// Trained RGB checkpoint for middle and late fusion
    #[arg(long)]
    rgb_checkpoint: Option<PathBuf>,
    /// Trained NDD checkpoint for middle and late fusion
    #[arg(long)]
    ndd_checkpoint: Option<PathBuf>,
    /// Train the inherited branches too
    #[arg(long)]
    fine_tune: bool,
    /// Also run k-fold cross-validation over train+validation
    #[arg(long)]
    folds: Option<usize>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug, Clone, Serialize)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
}

#[derive(Args, Debug, Clone, Serialize)]
struct MapArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory holding rgb.raster and ndd.raster
    #[arg(long)]
    scene: PathBuf,
    /// Window step in pixels [default: one tile]
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    crf_weight: f64,
    #[arg(long, default_value_t = 10)]
    crf_iters: usize,
    /// Ground-truth label raster to score against
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, value_parser = parse_scope, default_value = "scene")]
    #[serde(serialize_with = "ser_debug")]
    scope: ScalingScope,
    #[arg(long, default_value_t = 4)]
    cell_px: u32,
}

#[derive(Args, Debug, Clone, Serialize)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated row names to run [default: all]
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
    #[command(flatten)]
    flags: TrainFlags,
}

fn ser_debug<S: serde::Serializer, V: std::fmt::Debug>(v: &V, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{v:?}"))
}

/// Record of one invocation, sufficient to repeat it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub input_hashes: BTreeMap<String, String>,
    pub seed: u64,
    pub tool_version: String,
    pub started_unix_s: u64,
    pub finished_unix_s: Option<u64>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hashes of files, or of every regular file directly inside directories
/// (skipping their run manifests).
fn hash_inputs(paths: &[&Path]) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for &p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(p)
                .map_err(data)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && f.file_name().is_some_and(|n| n != RUN_MANIFEST))
                .collect();
            entries.sort();
            for f in entries {
                out.insert(f.display().to_string(), sha256_file(&f)?);
            }
        } else {
            out.insert(p.display().to_string(), sha256_file(p)?);
        }
    }
    Ok(out)
}

struct Run {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    /// Creates the output directory and writes the run manifest before
    /// anything else lands there.
    fn start(command: &str, argv: &[String], common: &Common, config: impl Serialize, inputs: &[&Path]) -> CliResult<Self> {
        let dir = match (&common.out, std::env::var_os(OUT_ROOT_ENV)) {
            (Some(d), _) => d.clone(),
            (None, Some(root)) => PathBuf::from(root).join(command),
            (None, None) => return Err(CliError::Usage(format!("--out is required when {OUT_ROOT_ENV} is unset"))),
        };
        let manifest = RunManifest {
            command: command.to_string(),
            argv: argv.to_vec(),
            config: serde_json::to_value(config).map_err(data)?,
            input_hashes: hash_inputs(inputs)?,
            seed: common.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_s: now(),
            finished_unix_s: None,
        };
        fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        let run = Run { dir, manifest };
        run.write_manifest()?;
        Ok(run)
    }

    fn write_manifest(&self) -> CliResult<()> {
        let text = serde_json::to_string_pretty(&self.manifest).map_err(data)? + "\n";
        fs::write(self.dir.join(RUN_MANIFEST), text).map_err(data)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<()> {
        fs::write(self.path(name), contents).map_err(data)
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> CliResult<()> {
        self.write(name, serde_json::to_string_pretty(value).map_err(data)? + "\n")
    }

    fn finish(mut self) -> CliResult<()> {
        self.manifest.finished_unix_s = Some(now());
        self.write_manifest()
    }
}

/// Splices the `--config` file's entries in as flags right after the
/// subcommand so explicit flags, which come later, win.
fn expand_config(argv: &[String]) -> CliResult<Vec<String>> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        if a == "--config" {
            path = argv.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(argv.to_vec());
    };
    let text = fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("config {path}: {e}")))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {path}: {e}")))?;
    let serde_json::Value::Object(map) = value else {
        return Err(CliError::Usage(format!("config {path} must hold a JSON object")));
    };
    let mut injected = Vec::new();
    for (key, v) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        if flag == "--config" {
            continue;
        }
        match v {
            serde_json::Value::Null | serde_json::Value::Bool(false) => {}
            serde_json::Value::Bool(true) => injected.push(flag),
            serde_json::Value::Number(n) => injected.extend([flag, n.to_string()]),
            serde_json::Value::String(s) => injected.extend([flag, s]),
            serde_json::Value::Array(items) => {
                let parts: Vec<String> = items
                    .iter()
                    .map(|x| match x {
                        serde_json::Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect();
                injected.extend([flag, parts.join(",")]);
            }
            serde_json::Value::Object(_) => {
                return Err(CliError::Usage(format!("config key {key:?} has an object value")));
            }
        }
    }
    let mut out = Vec::with_capacity(argv.len() + injected.len());
    out.extend(argv.first().cloned());
    out.extend(injected);
    out.extend(argv.iter().skip(1).cloned());
    Ok(out)
}

/// Runs one command line (without the program name) and returns the exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    match run(&argv) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            let mut err = std::io::stderr().lock();
            if let CliError::Parse(msg) = &e {
                let _ = writeln!(err, "{msg}");
                return code;
            }
            let _ = writeln!(err, "error: {e}");
            if code == 1 {
                let _ = writeln!(err, "{}", <Cli as clap::CommandFactory>::command().render_usage());
            }
            code
        }
    }
}

fn run(argv: &[String]) -> CliResult<()> {
    let expanded = expand_config(argv)?;
    let os: Vec<OsString> = std::iter::once(OsString::from("wetmap"))
        .chain(expanded.iter().map(OsString::from))
        .collect();
    let cli = match Cli::try_parse_from(os) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            return Err(CliError::Parse(e.render().to_string().trim_end().to_string()));
        }
    };
    log::info!("running {}", cli.command.name());
    match cli.command {
        Command::Synth(a) => synth(argv, a),
        Command::Ingest(a) => ingest(argv, a),
        Command::Balance(a) => balance(argv, a),
        Command::Train(a) => match a.flags.dtype {
            Dtype::F32 => train_cmd::<f32>(argv, a),
            Dtype::F64 => train_cmd::<f64>(argv, a),
        },
        Command::Evaluate(a) => evaluate(argv, a),
        Command::Map(a) => map(argv, a),
        Command::Ablate(a) => match a.flags.dtype {
            Dtype::F32 => ablate::<f32>(argv, a),
            Dtype::F64 => ablate::<f64>(argv, a),
        },
    }
}

fn synth(argv: &[String], a: SynthArgs) -> CliResult<()> {
    let spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<SceneSpec>(&text).map_err(data)?
        }
        None => {
            let mut s = SceneSpec::checkerboard(a.grid_rows, a.grid_cols, a.block_patches, a.complementary);
            s.signatures.iter_mut().for_each(|sig| sig.sigma = [a.sigma; 6]);
            s.region_sigma = a.region_sigma;
            if a.layout == LayoutArg::Smooth {
                s.layout = Layout::Smooth { jitter_m: a.jitter_m };
            }
            s
        }
    };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let inputs: Vec<&Path> = a.spec.iter().map(PathBuf::as_path).collect();
    let run = Run::start("synth", argv, &a.common, &a, &inputs)?;
    let scene = generate_scene::<f32>(&spec, a.common.seed).map_err(data)?;
    scene.write(&run.dir).map_err(data)?;
    if let Some(counts) = &a.counts {
        let target = *counts;
        let rows = imbalance_manifest(&scene.manifest, target, derive_seed(a.common.seed, &[0x5b])).map_err(data)?;
        write_manifest(run.path("manifest.csv"), &rows).map_err(data)?;
        write_manifest(run.path("manifest_full.csv"), &scene.manifest).map_err(data)?;
    }
    render_palette(&scene.truth, 4)
        .and_then(|img| Ok(img.write_png(run.path("truth.png"))?))
        .map_err(data)?;
    run.write_json("spec.json", &spec)?;
    log::info!("wrote {} tiles to {}", scene.manifest.len(), run.dir.display());
    run.finish()
}

/// Dataset directory contents written by `ingest`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetInfo {
    scope: ScalingScope,
    sample_count: usize,
    class_counts: BTreeMap<String, usize>,
}

fn counts_map(labels: impl IntoIterator<Item = ClassLabel>) -> BTreeMap<String, usize> {
    let counts = class_counts(labels);
    ClassLabel::ALL.iter().map(|c| (c.name().to_string(), counts[c.id()])).collect()
}

fn load_grid<T: Scalar>(path: &Path) -> CliResult<RasterGrid<T>> {
    load_raster(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_stacks<T: Scalar>(rgb: &Path, ndd: &Path) -> CliResult<ModalityStacks<T>> {
    ModalityStacks::new(load_grid(rgb)?, load_grid(ndd)?).map_err(data)
}

fn ingest(argv: &[String], a: IngestArgs) -> CliResult<()> {
    let mut inputs: Vec<&Path> = vec![&a.rgb, &a.manifest];
    inputs.extend([&a.ndd, &a.nir, &a.dem].into_iter().flatten().map(PathBuf::as_path));
    let stacks: ModalityStacks<f32> = match (&a.ndd, &a.nir, &a.dem) {
        (Some(ndd), _, _) => load_stacks(&a.rgb, ndd)?,
        (None, Some(nir), Some(dem)) => {
            let (stacks, stats) =
                assemble_modalities(&load_grid(&a.rgb)?, &load_grid(nir)?, &load_grid(dem)?).map_err(data)?;
            log::info!("scaling stats {stats:?}");
            stacks
        }
        _ => return Err(CliError::Usage("give --ndd or both --nir and --dem".into())),
    };
    let rows = read_manifest(&a.manifest).map_err(data)?;
    let samples = samples_from_rows(&rows, &stacks, a.scope).map_err(data)?;
    let split = split_iid(&samples, proportional_sizes(samples.len()), a.common.seed).map_err(data)?;
    let run = Run::start("ingest", argv, &a.common, &a, &inputs)?;
    write_raster(run.path("rgb.raster"), &stacks.rgb).map_err(data)?;
    write_raster(run.path("ndd.raster"), &stacks.ndd).map_err(data)?;
    write_manifest(run.path("manifest.csv"), &rows).map_err(data)?;
    run.write_json("split.json", &split)?;
    run.write_json(
        "dataset.json",
        &DatasetInfo {
            scope: a.scope,
            sample_count: samples.len(),
            class_counts: counts_map(samples.iter().map(|s| s.label)),
        },
    )?;
    run.finish()
}

struct Dataset<T> {
    stacks: ModalityStacks<T>,
    scope: ScalingScope,
    samples: Vec<PatchSample<T>>,
    split: DatasetSplit,
}

impl<T: Scalar> Dataset<T> {
    fn load(dir: &Path) -> CliResult<Self> {
        let read_json = |name: &str| -> CliResult<String> {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
        };
        let info: DatasetInfo = serde_json::from_str(&read_json("dataset.json")?).map_err(data)?;
        let split: DatasetSplit = serde_json::from_str(&read_json("split.json")?).map_err(data)?;
        let stacks = load_stacks(&dir.join("rgb.raster"), &dir.join("ndd.raster"))?;
        let rows = read_manifest(dir.join("manifest.csv")).map_err(data)?;
        let samples = samples_from_rows(&rows, &stacks, info.scope).map_err(data)?;
        Ok(Self {
            stacks,
            scope: info.scope,
            samples,
            split,
        })
    }

    fn experiment(&self) -> ExperimentData<T> {
        ExperimentData {
            scene: self.stacks.clone(),
            scope: self.scope,
            train: select(&self.samples, &self.split.train),
            validation: select(&self.samples, &self.split.validation),
            test: select(&self.samples, &self.split.test),
        }
    }
}

#[derive(Debug, Serialize)]
struct AugmentedRecord {
    sample_id: String,
    source_id: String,
    class: String,
    center_index: u8,
    flip_lr: bool,
    flip_ud: bool,
}

#[derive(Debug, Serialize)]
struct BalanceReport {
    before: BTreeMap<String, usize>,
    after: BTreeMap<String, usize>,
    augmented: Option<Vec<AugmentedRecord>>,
}

fn balance(argv: &[String], a: BalanceArgs) -> CliResult<()> {
    let rows = read_manifest(&a.manifest).map_err(data)?;
    let labels: Vec<ClassLabel> = rows
        .iter()
        .map(|r| r.class_name.parse().map_err(|_| CliError::Data(format!("unknown class {:?}", r.class_name))))
        .collect::<CliResult<_>>()?;
    let before = class_counts(labels.iter().copied());
    if let Some(c) = ClassLabel::ALL.iter().find(|c| before[c.id()] == 0) {
        return Err(CliError::Data(format!("class {} has no samples to augment", c.name())));
    }
    let mut inputs: Vec<&Path> = vec![&a.manifest];
    inputs.extend(a.data.as_deref());
    let (after, augmented) = match &a.data {
        None => {
            let target = before.iter().copied().max().unwrap_or(0);
            ([target; NUM_CLASSES], None)
        }
        Some(dir) => {
            let ds = Dataset::<f32>::load(dir)?;
            let train = samples_from_rows(&rows, &ds.stacks, ds.scope).map_err(data)?;
            let cfg = TrainConfig {
                seed: a.common.seed,
                ..Default::default()
            };
            let balanced = training_set(&train, &ds.stacks, ds.scope, &cfg)?;
            let records = balanced
                .iter()
                .filter_map(|s| match &s.provenance {
                    Provenance::Original => None,
                    Provenance::Augmented {
                        source_id,
                        center_index,
                        flip_lr,
                        flip_ud,
                    } => Some(AugmentedRecord {
                        sample_id: s.sample_id.clone(),
                        source_id: source_id.clone(),
                        class: s.label.name().to_string(),
                        center_index: *center_index,
                        flip_lr: *flip_lr,
                        flip_ud: *flip_ud,
                    }),
                })
                .collect();
            (class_counts(balanced.iter().map(|s| s.label)), Some(records))
        }
    };
    let run = Run::start("balance", argv, &a.common, &a, &inputs)?;
    let named = |c: [usize; NUM_CLASSES]| -> BTreeMap<String, usize> {
        ClassLabel::ALL.iter().map(|l| (l.name().to_string(), c[l.id()])).collect()
    };
    let mut text = format!("{:<14} {:>8} {:>8}\n", "class", "before", "after");
    for c in ClassLabel::ALL {
        text += &format!("{:<14} {:>8} {:>8}\n", c.name(), before[c.id()], after[c.id()]);
    }
    text += &format!(
        "{:<14} {:>8} {:>8}\n",
        "total",
        before.iter().sum::<usize>(),
        after.iter().sum::<usize>()
    );
    print!("{text}");
    run.write("balance.txt", &text)?;
    run.write_json(
        "balance.json",
        &BalanceReport {
            before: named(before),
            after: named(after),
            augmented,
        },
    )?;
    run.finish()
}

fn load_model<T: Scalar>(path: &Path) -> CliResult<Model<T>> {
    load_checkpoint(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn train_cmd<T: Scalar>(argv: &[String], a: TrainArgs) -> CliResult<()> {
    let cfg = a.flags.config(a.common.seed);
    cfg.validate()?;
    let ds = Dataset::<T>::load(&a.data)?;
    let exp = ds.experiment();
    let mut inputs: Vec<&Path> = vec![&a.data];
    inputs.extend([&a.rgb_checkpoint, &a.ndd_checkpoint].into_iter().flatten().map(PathBuf::as_path));
    let parents = |needed: bool| -> CliResult<(Option<Model<T>>, Option<Model<T>>)> {
        if !needed {
            return Ok((None, None));
        }
        match (&a.rgb_checkpoint, &a.ndd_checkpoint) {
            (Some(r), Some(n)) => Ok((Some(load_model(r)?), Some(load_model(n)?))),
            _ => Err(CliError::Usage(
                "middle and late fusion need --rgb-checkpoint and --ndd-checkpoint".into(),
            )),
        }
    };
    let (rgb, ndd) = parents(a.fusion.is_some_and(FusionStrategy::inherits))?;
    let base = match &rgb {
        Some(m) => m.descriptor().base,
        None => a.flags.arch.config(),
    };
    let seed = init_seed(&cfg);
    let build = || -> CliResult<Model<T>> {
        let model = match (a.modality, a.fusion) {
            (Some(m), _) => Model::single(m, &base, seed),
            (None, Some(s)) => build_fusion(s, &base, rgb.as_ref(), ndd.as_ref(), seed),
            (None, None) => unreachable!("clap requires one of --modality/--fusion"),
        }
        .map_err(data)?;
        if !a.fine_tune {
            return Ok(model);
        }
        let mut tuned = Model::from_descriptor(
            ModelDescriptor {
                fine_tune: true,
                ..*model.descriptor()
            },
            seed,
        )
        .map_err(data)?;
        tuned.store_mut().data_mut().copy_from_slice(model.params());
        Ok(tuned)
    };
    let run = Run::start("train", argv, &a.common, &a, &inputs)?;
    let mut model = build()?;
    let train_set = training_set(&exp.train, &exp.scene, exp.scope, &cfg)?;
    let outcome = train(&mut model, &train_set, &exp.validation, &cfg)?;
    write_run_dir(&run.dir, &cfg, &model, &outcome)?;
    let report = evaluate_model(&model, &exp.test)?;
    run.write_json("test_report.json", &report)?;
    run.write("test_report.txt", report.to_text())?;
    log::info!("{}: test overall {:.4}", model.kind(), report.overall);

    if let Some(k) = a.folds {
        let mut pool = exp.train.clone();
        pool.extend(exp.validation.iter().cloned());
        let cv = run_cv(&pool, &exp.test, k, cfg.seed, |fold, tr, va| {
            let fold_cfg = TrainConfig {
                seed: derive_seed(cfg.seed, &[0xcf, fold as u64]),
                ..cfg
            };
            let mut m = build().map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
            let set = training_set(tr, &exp.scene, exp.scope, &fold_cfg)?;
            train(&mut m, &set, va, &fold_cfg)?;
            Ok(m)
        })?;
        run.write_json("cv.json", &cv)?;
    }
    run.finish()
}

fn evaluate(argv: &[String], a: EvaluateArgs) -> CliResult<()> {
    let model = load_model::<f64>(&a.checkpoint)?;
    let ds = Dataset::<f64>::load(&a.data)?;
    let samples = match a.split {
        SplitArg::Train => select(&ds.samples, &ds.split.train),
        SplitArg::Validation => select(&ds.samples, &ds.split.validation),
        SplitArg::Test => select(&ds.samples, &ds.split.test),
        SplitArg::All => ds.samples.clone(),
    };
    let report = evaluate_model(&model, &samples)?;
    let run = Run::start("evaluate", argv, &a.common, &a, &[&a.checkpoint, &a.data])?;
    run.write_json("report.json", &report)?;
    run.write("report.txt", report.to_text())?;
    report.write_heatmap(run.path("confusion.png"), 32).map_err(data)?;
    print!("{}", report.to_text());
    run.finish()
}

#[derive(Debug, Serialize)]
struct MapSummary {
    rows: usize,
    cols: usize,
    tile_size_px: usize,
    stride_px: usize,
    crf_weight: f64,
    crf_energies: Vec<f64>,
    crf_sweeps: usize,
    crf_converged: bool,
    raw_accuracy: Option<f64>,
    crf_accuracy: Option<f64>,
}

fn map(argv: &[String], a: MapArgs) -> CliResult<()> {
    if !(a.crf_weight >= 0.0 && a.crf_weight.is_finite()) {
        return Err(CliError::Usage("--crf-weight must be a non-negative number".into()));
    }
    let model = load_model::<f32>(&a.checkpoint)?;
    let stacks = load_stacks::<f32>(&a.scene.join("rgb.raster"), &a.scene.join("ndd.raster"))?;
    let tile = (PATCH_SIZE_M / stacks.rgb.resolution_m()).round() as usize;
    let stride = a.stride.unwrap_or(tile);
    if stride == 0 || stride > tile {
        return Err(CliError::Usage(format!("--stride must be in 1..={tile}")));
    }
    let truth = match &a.truth {
        Some(p) => Some(LabelMap::from_raster(&load_grid::<f32>(p)?, tile, tile).map_err(data)?),
        None => None,
    };
    let mut inputs: Vec<&Path> = vec![&a.checkpoint, &a.scene];
    inputs.extend(a.truth.as_deref());
    let run = Run::start("map", argv, &a.common, &a, &inputs)?;
    let cfg = SlideConfig {
        tile_size_px: tile,
        stride_px: stride,
        scope: a.scope,
    };
    let raw = slide_map(&model, &stacks, cfg).map_err(data)?;
    let (refined, trace) = crf_refine(&raw, a.crf_weight, a.crf_iters).map_err(data)?;
    let score = |m: &LabelMap| {
        truth
            .as_ref()
            .filter(|t| (t.rows, t.cols) == (m.rows, m.cols))
            .map(|t| m.agreement(t))
    };
    if truth.is_some() && score(&raw).is_none() {
        log::warn!("truth lattice differs from the map lattice; accuracy not scored");
    }
    raw.write_raster(run.path("labels_raw.raster")).map_err(data)?;
    refined.write_raster(run.path("labels.raster")).map_err(data)?;
    render_palette(&refined, a.cell_px)
        .and_then(|img| Ok(img.write_png(run.path("labels.png"))?))
        .map_err(data)?;
    let summary = MapSummary {
        rows: refined.rows,
        cols: refined.cols,
        tile_size_px: tile,
        stride_px: stride,
        crf_weight: a.crf_weight,
        crf_energies: trace.energies,
        crf_sweeps: trace.sweeps,
        crf_converged: trace.converged,
        raw_accuracy: score(&raw),
        crf_accuracy: score(&refined),
    };
    run.write_json("map.json", &summary)?;
    run.finish()
}

fn ablate<T: Scalar>(argv: &[String], a: AblateArgs) -> CliResult<()> {
    let cfg = a.flags.config(a.common.seed);
    cfg.validate()?;
    let known: Vec<&str> = wetmap::trainer::ablation_recipes().iter().map(|r| r.name).collect();
    if let Some(bad) = a.only.iter().find(|n| !known.contains(&n.as_str())) {
        return Err(CliError::Usage(format!("unknown ablation row {bad:?}; rows are {}", known.join(", "))));
    }
    let ds = Dataset::<T>::load(&a.data)?;
    let exp = ds.experiment();
    let run = Run::start("ablate", argv, &a.common, &a, &[&a.data])?;
    let only: Vec<&str> = a.only.iter().map(String::as_str).collect();
    let results = run_ablation(&a.flags.arch.config(), &exp, &cfg, &only)?;
    let mut reports = Vec::with_capacity(results.len());
    for r in &results {
        let dir = run.path(r.recipe.name);
        let row_cfg = TrainConfig {
            loss_mode: r.recipe.loss_mode,
            balance_mode: r.recipe.balance_mode,
            ..cfg
        };
        write_run_dir(&dir, &row_cfg, &r.trained.model, &r.trained.outcome)?;
        fs::write(
            dir.join("test_report.json"),
            serde_json::to_string_pretty(&r.test_report).map_err(data)? + "\n",
        )
        .map_err(data)?;
        reports.push((r.recipe.name.to_string(), r.test_report.clone()));
    }
    let table = ablation_report(&reports).map_err(data)?;
    run.write("ablation.csv", table.to_csv())?;
    run.write("ablation.txt", table.to_text())?;
    print!("{}", table.to_text());
    run.finish()
}
