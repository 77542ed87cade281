//! The `canopy` command line: prepare, train, predict, refine, evaluate, report.
//!
//! Every subcommand writes into `<out>/<subcommand>/<run id>`, where the run id
//! is `--run-id` or a hash of the arguments other than `--out`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use canopy_core::metrics::{aggregate, evaluate as score, Averaging, MetricsReport};
use canopy_core::model::{build_attention_unet, ModelConfig};
use canopy_core::preprocess::PreprocessConfig;
use canopy_core::refine::{refine_query, select_records, PredictionRecord, RecordStatus, RefineConfig, Variant};
use canopy_core::train::{train, TrainConfig};
use canopy_core::{Error as CoreError, Mask, Sensor};
use clap::{ArgAction, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::dataset::{load_manifest, prepare_image, prepare_sample, split_dataset, Manifest};
use crate::error::{CanopyError, IoContext, Result};
use crate::raster_io::{read_mask, write_mask, write_tile};
use crate::records::{read_index, read_queries, RecordRef};
use crate::report;

#[derive(Debug, Parser)]
#[command(name = "canopy", version, about = "Deforestation segmentation with an attention UNet")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Option<Command>,
    #[command(flatten)]
    pub opts: Options,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Validate a manifest and write per-band statistics.
    Prepare,
    /// Train a model on a manifest; writes model.ckpt and history.txt.
    Train,
    /// Run a checkpoint over a manifest; writes probability rasters and records.txt.
    Predict,
    /// Merge prediction records into one mask per query.
    Refine,
    /// Score predicted masks against ground truth.
    Evaluate,
    /// Render metrics and masks as Markdown and PNG.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Prepare => "prepare",
            Command::Train => "train",
            Command::Predict => "predict",
            Command::Refine => "refine",
            Command::Evaluate => "evaluate",
            Command::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SensorArg {
    #[value(name = "landsat8", alias = "l8")]
    Landsat8,
    #[value(name = "sentinel1", alias = "s1")]
    Sentinel1,
}

impl From<SensorArg> for Sensor {
    fn from(s: SensorArg) -> Self {
        match s {
            SensorArg::Landsat8 => Sensor::Landsat8,
            SensorArg::Sentinel1 => Sensor::Sentinel1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    /// Average all records and threshold at 0.5.
    Raw,
    /// Cloud screening, thresholded average and morphological opening.
    #[value(alias = "refined")]
    V2,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Raw => Variant::RawAverage,
            VariantArg::V2 => Variant::Refined,
        }
    }
}

#[derive(Debug, Clone, clap::Args)]
pub struct Options {
    /// Dataset manifest.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Expected sensor; checked against the manifest and checkpoint.
    #[arg(long, global = true, value_enum)]
    pub sensor: Option<SensorArg>,
    /// Model checkpoint to read (predict).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Root directory for run outputs.
    #[arg(long, global = true, env = "CANOPY_OUT", default_value = "runs")]
    pub out: PathBuf,
    /// Run directory name instead of the argument hash.
    #[arg(long, global = true)]
    pub run_id: Option<String>,
    /// Query list, one `lat lon date` per line (refine).
    #[arg(long, global = true)]
    pub queries: Option<PathBuf>,
    /// Prediction record index; repeat to merge sensors (refine).
    #[arg(long, global = true)]
    pub records: Vec<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = VariantArg::V2)]
    pub variant: VariantArg,
    /// Succeed even when some queries have no usable records.
    #[arg(long, global = true)]
    pub allow_missing: bool,
    #[arg(long, global = true, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, global = true, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, global = true, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// Encoder levels of the UNet.
    #[arg(long, global = true, default_value_t = 4)]
    pub depth: usize,
    /// Filters at the top level, doubled per level.
    #[arg(long, global = true, default_value_t = 64)]
    pub base_filters: usize,
    /// Side length every tile is resampled to.
    #[arg(long, global = true, default_value_t = 256)]
    pub tile_size: usize,
    /// Disable rotation and flip augmentation of optical tiles.
    #[arg(long, global = true)]
    pub no_augment: bool,
    #[arg(long, global = true, default_value_t = 1.0)]
    pub stretch_percent: f64,
    #[arg(long, global = true, default_value_t = 0.1)]
    pub ndvi_threshold: f64,
    #[arg(long, global = true, default_value_t = 0.01)]
    pub cloud_limit: f64,
    #[arg(long, global = true, default_value_t = 0.4)]
    pub agg_threshold: f64,
    #[arg(long, global = true, default_value_t = 3)]
    pub kernel: usize,
    /// Average each sensor separately, then average the sensor means.
    #[arg(long, global = true)]
    pub per_sensor: bool,
    /// Directory of predicted masks (evaluate, report).
    #[arg(long, global = true)]
    pub pred: Option<PathBuf>,
    /// Directory of ground-truth masks (evaluate, report).
    #[arg(long, global = true)]
    pub truth: Option<PathBuf>,
    /// Average metrics per tile instead of pooling pixels.
    #[arg(long = "macro", global = true)]
    pub macro_average: bool,
    /// metrics.txt written by evaluate (report).
    #[arg(long, global = true)]
    pub metrics: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
}

impl Options {
    pub fn train_config(&self, sensor: Sensor) -> TrainConfig {
        let base = TrainConfig::for_sensor(sensor);
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.lr,
            epochs: self.epochs,
            seed: self.seed,
            augment: base.augment && !self.no_augment,
            ..base
        }
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        PreprocessConfig {
            stretch_percent: self.stretch_percent,
            resample_target: (self.tile_size, self.tile_size),
            ..PreprocessConfig::default()
        }
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            ndvi_threshold: self.ndvi_threshold,
            cloud_fraction_limit: self.cloud_limit,
            aggregate_threshold: self.agg_threshold,
            kernel: self.kernel,
            pool_sensors: !self.per_sensor,
        }
    }

    pub fn averaging(&self) -> Averaging {
        if self.macro_average {
            Averaging::Macro
        } else {
            Averaging::Micro
        }
    }

    /// `key=value` lines of every tunable, as used by the subcommands.
    pub fn config_text(&self) -> String {
        let t = self.train_config(Sensor::Sentinel1);
        let p = self.preprocess_config();
        let r = self.refine_config();
        let mut out = String::new();
        let mut line = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(out, "{k}={v}");
        };
        line("batch_size", &t.batch_size);
        line("learning_rate", &t.learning_rate);
        line("epochs", &t.epochs);
        line("adam_beta1", &t.adam_beta1);
        line("adam_beta2", &t.adam_beta2);
        line("adam_epsilon", &t.adam_epsilon);
        line("bce_weight", &t.loss.bce_weight);
        line("dice_weight", &t.loss.dice_weight);
        line("seed", &t.seed);
        line("val_fraction", &self.val_fraction);
        line("depth", &self.depth);
        line("base_filters", &self.base_filters);
        line("tile_size", &p.resample_target.0);
        line("stretch_percent", &p.stretch_percent);
        line("augment_optical", &!self.no_augment);
        line("ndvi_threshold", &r.ndvi_threshold);
        line("cloud_limit", &r.cloud_fraction_limit);
        line("agg_threshold", &r.aggregate_threshold);
        line("kernel", &r.kernel);
        line("pool_sensors", &r.pool_sensors);
        line("variant", &self.variant.to_possible_value().map_or_else(String::new, |v| v.get_name().to_string()));
        line("averaging", &if self.macro_average { "macro" } else { "micro" });
        out
    }
}

/// Parses `argv` (program name first), runs it and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.opts.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    match execute(&cli, &argv) {
        Ok(Some(dir)) => {
            println!("{}", dir.display());
            0
        }
        Ok(None) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Executes a parsed command line; returns the run directory written, if any.
pub fn execute(cli: &Cli, argv: &[OsString]) -> Result<Option<PathBuf>> {
    if cli.opts.print_config {
        print!("{}", cli.opts.config_text());
        return Ok(None);
    }
    let Some(command) = cli.command else {
        return Err(CanopyError::Usage("no subcommand given; see `canopy --help`".into()));
    };
    let dir = run_dir(&cli.opts, command, argv);
    std::fs::create_dir_all(&dir).at(&dir)?;
    let opts = &cli.opts;
    match command {
        Command::Prepare => prepare(opts, &dir)?,
        Command::Train => train_cmd(opts, &dir)?,
        Command::Predict => predict(opts, &dir)?,
        Command::Refine => refine(opts, &dir)?,
        Command::Evaluate => evaluate(opts, &dir)?,
        Command::Report => report_cmd(opts, &dir)?,
    }
    Ok(Some(dir))
}

/// `<out>/<subcommand>/<run-id or argument hash>`.
pub fn run_dir(opts: &Options, command: Command, argv: &[OsString]) -> PathBuf {
    let id = opts.run_id.clone().unwrap_or_else(|| {
        let mut hasher = Sha256::new();
        let mut args = argv.iter().skip(1);
        while let Some(arg) = args.next() {
            let text = arg.to_string_lossy();
            if text == "--out" {
                args.next();
                continue;
            }
            if text.starts_with("--out=") {
                continue;
            }
            hasher.update(arg.as_encoded_bytes());
            hasher.update([0]);
        }
        hasher.finalize().iter().take(6).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    });
    opts.out.join(command.name()).join(id)
}

fn required<'a, T>(value: &'a Option<T>, flag: &str, command: &str) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| CanopyError::Usage(format!("{command} needs {flag}")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).at(path)
}

fn manifest_for(opts: &Options, command: &str) -> Result<Manifest> {
    let manifest = load_manifest(required(&opts.manifest, "--manifest", command)?)?;
    if let Some(expected) = opts.sensor.map(Sensor::from) {
        if expected != manifest.sensor {
            return Err(CanopyError::Usage(format!(
                "--sensor {expected} does not match the manifest's {} entries",
                manifest.sensor
            )));
        }
    }
    Ok(manifest)
}

fn prepare(opts: &Options, dir: &Path) -> Result<()> {
    let manifest = manifest_for(opts, "prepare")?;
    let config = opts.preprocess_config();
    let mut stats: Vec<(String, f64, f64, f64, usize)> = Vec::new();
    let (mut labeled, mut positives, mut label_pixels) = (0usize, 0usize, 0usize);
    for entry in &manifest.entries {
        let bands = crate::dataset::load_bands(entry)?;
        if entry.label.is_some() {
            let sample = prepare_sample(entry, &config)?;
            labeled += 1;
            positives += sample.label.count_ones();
            label_pixels += sample.label.data().len();
        } else {
            prepare_image(entry, &config)?;
        }
        for (name, tile) in &bands {
            let (lo, hi) = tile.min_max();
            let sum: f64 = tile.values().iter().sum();
            match stats.iter_mut().find(|s| &s.0 == name) {
                Some(s) => {
                    s.1 = s.1.min(lo);
                    s.2 = s.2.max(hi);
                    s.3 += sum;
                    s.4 += tile.values().len();
                }
                None => stats.push((name.clone(), lo, hi, sum, tile.values().len())),
            }
        }
    }
    let mut out = format!("sensor={}\nentries={}\nlabeled={labeled}\n", manifest.sensor, manifest.len());
    let fraction = if label_pixels == 0 { 0.0 } else { positives as f64 / label_pixels as f64 };
    let _ = writeln!(out, "positive_fraction={fraction:.6}");
    for name in manifest.sensor.bands() {
        if let Some((_, lo, hi, sum, n)) = stats.iter().find(|s| s.0 == *name) {
            let _ = writeln!(out, "band {name} min={lo} max={hi} mean={}", sum / *n as f64);
        }
    }
    write_text(&dir.join("stats.txt"), &out)?;
    write_text(&dir.join("manifest.txt"), &manifest.to_text())?;
    log::info!("{} entries validated", manifest.len());
    Ok(())
}

fn train_cmd(opts: &Options, dir: &Path) -> Result<()> {
    let manifest = manifest_for(opts, "train")?;
    let (train_part, val_part) = split_dataset(&manifest, opts.val_fraction, opts.seed)?;
    if val_part.is_empty() {
        return Err(CanopyError::Usage(format!(
            "training needs at least 2 labeled entries, {} has {}",
            manifest.path.display(),
            manifest.len()
        )));
    }
    let config = opts.preprocess_config();
    let load = |m: &Manifest| m.entries.iter().map(|e| prepare_sample(e, &config)).collect::<Result<Vec<_>>>();
    let (train_set, val_set) = (load(&train_part)?, load(&val_part)?);
    let model_config = ModelConfig {
        in_channels: manifest.sensor.channels(),
        depth: opts.depth,
        base_filters: opts.base_filters,
    };
    if opts.tile_size % model_config.divisor() != 0 {
        return Err(CanopyError::Usage(format!(
            "--tile-size {} must be divisible by {} for depth {}",
            opts.tile_size,
            model_config.divisor(),
            opts.depth
        )));
    }
    let params = build_attention_unet(model_config, opts.seed)?;
    let train_config = opts.train_config(manifest.sensor);
    log::info!(
        "training on {} tiles, validating on {}, {} parameters",
        train_set.len(),
        val_set.len(),
        params.param_count()
    );
    let (params, history) = train(params, &train_set, &val_set, &train_config)?;
    checkpoint::save(&dir.join("model.ckpt"), &params, manifest.sensor)?;
    write_text(&dir.join("history.txt"), &history.to_lines())?;
    write_text(&dir.join("train_manifest.txt"), &train_part.to_text())?;
    write_text(&dir.join("val_manifest.txt"), &val_part.to_text())?;
    write_text(&dir.join("config.txt"), &opts.config_text())?;
    Ok(())
}

fn predict(opts: &Options, dir: &Path) -> Result<()> {
    let manifest = manifest_for(opts, "predict")?;
    let params = checkpoint::load_for(required(&opts.checkpoint, "--checkpoint", "predict")?, manifest.sensor)?;
    let divisor = params.config().divisor();
    if opts.tile_size % divisor != 0 {
        return Err(CanopyError::Usage(format!("--tile-size {} must be divisible by {divisor}", opts.tile_size)));
    }
    let config = opts.preprocess_config();
    let mut index = String::from("# sensor lat lon date prob=path [red=path nir=path]\n");
    for entry in &manifest.entries {
        let probs = params.forward(&prepare_image(entry, &config)?)?;
        let rel = PathBuf::from("records").join(format!("{}_{}.tif", entry.key.sensor, entry.key.stem()));
        write_tile(&dir.join(&rel), &probs)?;
        let optical = manifest.sensor.is_optical();
        let record = RecordRef {
            key: entry.key,
            prob: rel,
            red: optical.then(|| entry.bands["SR_B4"].clone()),
            nir: optical.then(|| entry.bands["SR_B5"].clone()),
        };
        index.push_str(&record.to_line());
        index.push('\n');
    }
    write_text(&dir.join("records.txt"), &index)
}

fn refine(opts: &Options, dir: &Path) -> Result<()> {
    let queries = read_queries(required(&opts.queries, "--queries", "refine")?)?;
    if opts.records.is_empty() {
        return Err(CanopyError::Usage("refine needs at least one --records index".into()));
    }
    let mut records: Vec<PredictionRecord> = Vec::new();
    for index in &opts.records {
        for r in read_index(index)? {
            records.push(r.load()?);
        }
    }
    let config = opts.refine_config();
    let variant = Variant::from(opts.variant);
    let mut provenance = String::from("# query status record\n");
    let mut missing = Vec::new();
    for query in &queries {
        let selected = select_records(query, &records);
        match refine_query(query, &selected, &config, variant) {
            Ok(refined) => {
                write_mask(&dir.join("masks").join(format!("{}.tif", query.stem())), &refined.mask)?;
                for p in &refined.provenance {
                    let status = match p.status {
                        RecordStatus::Used => "used".to_string(),
                        RecordStatus::Cloudy { fraction } => format!("cloudy({fraction:.4})"),
                    };
                    let _ = writeln!(provenance, "{} {status} {}_{}", query.stem(), p.key.sensor, p.key.stem());
                }
            }
            Err(CoreError::NoData(why)) => {
                log::warn!("no mask for {why}");
                let _ = writeln!(provenance, "{} no-data -", query.stem());
                missing.push(query.stem());
            }
            Err(e) => return Err(e.into()),
        }
    }
    write_text(&dir.join("provenance.txt"), &provenance)?;
    if !missing.is_empty() && !opts.allow_missing {
        return Err(CanopyError::MissingQueries { count: missing.len(), queries: missing.join(", ") });
    }
    Ok(())
}

/// Sorted `.tif` file names in a directory.
pub fn tif_names(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".tif"))
        .collect();
    names.sort();
    Ok(names)
}

fn evaluate(opts: &Options, dir: &Path) -> Result<()> {
    let pred_dir = required(&opts.pred, "--pred", "evaluate")?;
    let truth_dir = required(&opts.truth, "--truth", "evaluate")?;
    let names = tif_names(truth_dir)?;
    if names.is_empty() {
        return Err(CanopyError::Usage(format!("no .tif masks in {}", truth_dir.display())));
    }
    let mut reports: Vec<MetricsReport> = Vec::with_capacity(names.len());
    let mut per_tile = String::from("# name pixel_accuracy f1 iou\n");
    for name in &names {
        let truth = read_mask(&truth_dir.join(name))?;
        let pred_path = pred_dir.join(name);
        if !pred_path.is_file() {
            return Err(CanopyError::Usage(format!("no prediction {} for ground truth {name}", pred_path.display())));
        }
        let report = score(&read_mask(&pred_path)?, &truth).map_err(|source| CanopyError::Raster { path: pred_path, source })?;
        let _ = writeln!(per_tile, "{name} {:.4} {:.4} {:.4}", report.pixel_accuracy, report.f1, report.iou);
        reports.push(report);
    }
    let total = aggregate(&reports, opts.averaging())?;
    let record = total.to_record();
    write_text(&dir.join("metrics.txt"), &record)?;
    write_text(&dir.join("per_tile.txt"), &per_tile)?;
    print!("{record}");
    Ok(())
}

fn report_cmd(opts: &Options, dir: &Path) -> Result<()> {
    let metrics_path = required(&opts.metrics, "--metrics", "report")?;
    let text = std::fs::read_to_string(metrics_path).at(metrics_path)?;
    let metrics = MetricsReport::from_record(&text)
        .map_err(|source| CanopyError::Raster { path: metrics_path.clone(), source })?;
    write_text(&dir.join("metrics.md"), &report::metrics_markdown(&metrics))?;
    report::save_png(&dir.join("metrics.png"), &report::bar_chart(&metrics))?;
    if let Some(pred_dir) = &opts.pred {
        for name in tif_names(pred_dir)? {
            let pred = read_mask(&pred_dir.join(&name))?;
            let truth: Option<Mask> = match &opts.truth {
                Some(t) if t.join(&name).is_file() => Some(read_mask(&t.join(&name))?),
                _ => None,
            };
            let thumb = report::thumbnail(&pred, truth.as_ref(), report::THUMB_SIZE)?;
            report::save_png(&dir.join("thumbs").join(name.replace(".tif", ".png")), &thumb)?;
        }
    }
    Ok(())
}
