//! painest: pipeline driver for the two-stage pain intensity estimator.
//! Deterministic results go to stdout; timing and progress go to stderr.
//! Exit codes: 2 for usage problems (unknown flags, missing files),
//! 1 for data/validation failures, 0 on success.

use std::collections::HashMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::rc::Rc;
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use painest_core::bilinear::{BilinearNet, DESCRIPTOR_DIM};
use painest_core::data::{self, synth, ClipRecord, PreprocessOptions};
use painest_core::error::Error;
use painest_core::eval::{
    carve_val, evaluate_scored, evaluate_trained, loso_folds, metrics_tsv, split_fold, EvalConfig,
};
use painest_core::params::ParamSet;
use painest_core::registry::reference_tsv;
use painest_core::temporal::IntensityLstm;
use painest_core::tensor::{read_bten, write_bten, Dtype};
use painest_core::train::{
    descriptor_matrix, fit, history_tsv, predict_sequence, AugmentMode, FrameStore, SeqRef,
    Stage1Model, Stage2Model, StoreConfig, TrainConfig, Variant,
};

#[derive(Parser)]
#[command(name = "painest", version, about = "Two-stage facial pain intensity estimation pipeline")]
struct Cli {
    /// Deterministic RNG seed [default: 42]
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for data-parallel stages [default: all cores]
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Config file of key=value lines; command-line flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// On-disk dtype for checkpoints and features: f32 or f64 [default: f64]
    #[arg(long, global = true)]
    precision: Option<String>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic evaluation corpus (frames plus manifest.tsv)
    Synth(SynthArgs),
    /// Validate a manifest and build per-event key-frame clips
    Preprocess(PreprocessArgs),
    /// Export per-event descriptor sequences as .bten feature files
    Features(FeaturesArgs),
    /// Train stage 1: the frame-level bilinear intensity regressor
    TrainBilinear(TrainBilinearArgs),
    /// Train stage 2: the sequence-level intensity LSTM
    TrainLstm(TrainLstmArgs),
    /// Cross-validated evaluation: train per fold, or score checkpoints
    Evaluate(EvaluateArgs),
    /// Per-time-step intensity curve for one preprocessed event
    Predict(PredictArgs),
    /// Published reference results for these architectures
    Reference,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for frames/ and manifest.tsv
    #[arg(long)]
    out: PathBuf,
    /// Keep at most this many events per intensity level (smoke corpora)
    #[arg(long)]
    per_level: Option<usize>,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Manifest of pain events (tab-separated)
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for clips/ and clips.tsv
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated subject ids to keep [default: all]
    #[arg(long)]
    subjects: Option<String>,
    /// Skip class balancing
    #[arg(long)]
    no_balance: bool,
}

#[derive(Args)]
struct FeaturesArgs {
    /// Preprocessed clips directory (holds clips.tsv)
    #[arg(long)]
    clips: PathBuf,
    /// Output directory for <event_id>.bten files
    #[arg(long)]
    out: PathBuf,
    /// Stage-1 checkpoint; omitted = seed-initialized weights
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct TrainOpts {
    /// Learning rate [default: 0.0001]
    #[arg(long)]
    lr: Option<f64>,
    /// Mini-batch size [default: 16]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Epoch cap [default: 150]
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Early-stopping patience in epochs [default: 10]
    #[arg(long)]
    patience: Option<usize>,
    /// Leading backbone blocks kept frozen [default: 3]
    #[arg(long)]
    freeze_prefix: Option<usize>,
    /// Augmentation mode: fixed, per-epoch, or off [default: fixed]
    #[arg(long)]
    augment: Option<String>,
    /// Draw one augmentation per clip instead of per frame
    #[arg(long)]
    augment_per_clip: bool,
    /// Stop as soon as validation MSE reaches this value
    #[arg(long)]
    target_val_mse: Option<f64>,
}

#[derive(Args)]
struct TrainBilinearArgs {
    /// Preprocessed clips directory (holds clips.tsv)
    #[arg(long)]
    clips: PathBuf,
    /// Output checkpoint directory (weights plus history.tsv)
    #[arg(long)]
    out: PathBuf,
    /// Warm-start checkpoint (e.g. weights trained on acute-phase events)
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOpts,
}

#[derive(Args)]
struct TrainLstmArgs {
    /// Preprocessed clips directory (holds clips.tsv)
    #[arg(long)]
    clips: PathBuf,
    /// Stage-1 checkpoint to extract descriptors with
    #[arg(long)]
    stage1: PathBuf,
    /// Output checkpoint directory (weights plus history.tsv)
    #[arg(long)]
    out: PathBuf,
    /// Directory of precomputed <event_id>.bten descriptor files
    #[arg(long)]
    features: Option<PathBuf>,
    /// Fine-tune the unfrozen stage-1 suffix jointly with the LSTM
    #[arg(long)]
    joint: bool,
    #[command(flatten)]
    train: TrainOpts,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    /// Leave-one-subject-out cross-validation
    Loso,
    /// Single seeded 80/20 event split
    Split,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Preprocessed clips directory (holds clips.tsv)
    #[arg(long)]
    clips: PathBuf,
    /// Evaluation protocol
    #[arg(long, value_enum)]
    protocol: Protocol,
    /// Directory to write metrics.tsv into [default: stdout only]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stage-1 checkpoint: score it instead of training per fold
    #[arg(long)]
    stage1: Option<PathBuf>,
    /// Stage-2 checkpoint (adds step and event scopes when scoring)
    #[arg(long)]
    stage2: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOpts,
}

#[derive(Args)]
struct PredictArgs {
    /// Preprocessed clips directory (holds clips.tsv)
    #[arg(long)]
    clips: PathBuf,
    /// Event id to score
    #[arg(long)]
    event: String,
    /// Stage-1 checkpoint
    #[arg(long)]
    stage1: PathBuf,
    /// Stage-2 checkpoint
    #[arg(long)]
    stage2: PathBuf,
}

/// Usage errors exit 2 (like clap's own), everything else exits 1.
enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> CliError {
        CliError::Run(e)
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// key=value configuration file; '#' starts a comment.
struct Conf(HashMap<String, String>);

impl Conf {
    fn load(path: Option<&Path>) -> CliResult<Conf> {
        let Some(path) = path else { return Ok(Conf(HashMap::new())) };
        require_file(path)?;
        let text = std::fs::read_to_string(path).map_err(Error::from)?;
        let mut map = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Run(Error::Config(format!(
                    "{}:{}: expected key=value, got `{line}`",
                    path.display(),
                    i + 1
                )))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Conf(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                CliError::Run(Error::Config(format!("config key {key}={raw}: {e}")))
            }),
        }
    }
}

fn pick<T>(flag: Option<T>, conf: Option<T>, default: T) -> T {
    flag.or(conf).unwrap_or(default)
}

/// Deterministic output channel. A reader that closes the pipe early (e.g.
/// `painest predict | head`) ends the run quietly instead of panicking.
fn emit(text: impl Display) -> CliResult<()> {
    use std::io::Write;
    match write!(std::io::stdout(), "{text}") {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => std::process::exit(0),
        Err(e) => Err(CliError::Run(Error::from(e))),
    }
}

macro_rules! emitln {
    ($($arg:tt)*) => { emit(format_args!("{}\n", format_args!($($arg)*)))? };
}

impl TrainOpts {
    fn resolve(&self, conf: &Conf, seed: u64) -> CliResult<TrainConfig> {
        let d = TrainConfig::default();
        let augment = match self.augment.clone().or(conf.get::<String>("augment")?) {
            Some(s) => s.parse::<AugmentMode>()?,
            None => d.augment,
        };
        Ok(TrainConfig {
            lr: pick(self.lr, conf.get("lr")?, d.lr),
            batch_size: pick(self.batch_size, conf.get("batch_size")?, d.batch_size),
            max_epochs: pick(self.max_epochs, conf.get("max_epochs")?, d.max_epochs),
            patience: pick(self.patience, conf.get("patience")?, d.patience),
            seed,
            freeze_prefix: pick(self.freeze_prefix, conf.get("freeze_prefix")?, d.freeze_prefix),
            augment,
            augment_per_clip: self.augment_per_clip
                || conf.get("augment_per_clip")?.unwrap_or(d.augment_per_clip),
            target_val_mse: self.target_val_mse.or(conf.get("target_val_mse")?),
        })
    }
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("file not found: {}", path.display())))
    }
}

fn require_checkpoint(dir: &Path) -> CliResult<()> {
    require_file(&dir.join("manifest.tsv"))
}

fn read_clips(dir: &Path) -> CliResult<Vec<ClipRecord>> {
    let index = dir.join("clips.tsv");
    require_file(&index)?;
    Ok(data::read_clips_index(&index)?)
}

fn parse_dtype(s: Option<&str>, conf: &Conf) -> CliResult<Dtype> {
    let owned;
    let s = match s {
        Some(s) => s,
        None => match conf.0.get("precision") {
            Some(v) => {
                owned = v.clone();
                &owned
            }
            None => return Ok(Dtype::F64),
        },
    };
    match s {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        other => Err(CliError::Run(Error::Config(format!("precision must be f32 or f64, got {other}")))),
    }
}

fn load_bilinear(seed: u64, dir: &Path) -> CliResult<BilinearNet> {
    require_checkpoint(dir)?;
    let net = BilinearNet::init(seed, Default::default());
    net.params().load(dir)?;
    Ok(net)
}

fn load_lstm(seed: u64, dir: &Path) -> CliResult<IntensityLstm> {
    require_checkpoint(dir)?;
    let lstm = IntensityLstm::init(seed);
    lstm.params().load(dir)?;
    Ok(lstm)
}

fn save_checkpoint(params: &ParamSet, dir: &Path, dtype: Dtype) -> CliResult<()> {
    if dtype == Dtype::F32 {
        // keep in-memory weights identical to what a reload would see
        params.round_to_f32();
    }
    params.save(dir, dtype)?;
    Ok(())
}

/// (slot, facial label) pairs for stage 1.
fn facial_pairs(clips: &[ClipRecord], idx: &[usize]) -> Vec<(usize, f64)> {
    idx.iter().map(|&i| (i, clips[i].facial_label())).collect()
}

/// Postoperative (slot, intensity label) refs for stage 2.
fn seq_refs(clips: &[ClipRecord], idx: &[usize]) -> Vec<SeqRef> {
    idx.iter()
        .filter(|&&i| clips[i].phase == data::Phase::Postoperative)
        .map(|&i| SeqRef { slot: i, label: clips[i].npass as f64 })
        .collect()
}

fn train_val_split(clips: &[ClipRecord], seed: u64) -> CliResult<(Vec<usize>, Vec<usize>)> {
    let all: Vec<usize> = (0..clips.len()).collect();
    let (train, val) = carve_val(&all, clips, seed);
    if val.is_empty() {
        return Err(CliError::Run(Error::Data(
            "validation carve is empty; need a subject with at least 2 clips".into(),
        )));
    }
    Ok((train, val))
}

fn build_store(
    net: &BilinearNet,
    clips: &[ClipRecord],
    train_idx: &[usize],
    cfg: &TrainConfig,
) -> CliResult<Rc<FrameStore>> {
    let variants: Vec<Variant> = (0..clips.len())
        .map(|i| if train_idx.contains(&i) { Variant::Augmented } else { Variant::Clean })
        .collect();
    let store_cfg = StoreConfig {
        freeze: cfg.freeze_prefix,
        augment: cfg.augment,
        augment_per_clip: cfg.augment_per_clip,
        seed: cfg.seed,
        ..Default::default()
    };
    let streams = [&net.stream_a, &net.stream_b];
    Ok(Rc::new(FrameStore::build(&streams, clips, &variants, store_cfg)?))
}

fn write_history(dir: &Path, report: &painest_core::train::FitReport) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(Error::from)?;
    std::fs::write(dir.join("history.tsv"), history_tsv(&report.history)).map_err(Error::from)?;
    Ok(())
}

fn report_summary(report: &painest_core::train::FitReport) -> String {
    format!(
        "epochs\t{}\nbest_epoch\t{}\nbest_val_mse\t{:.6}\nhit_target\t{}\n",
        report.history.len(),
        report.best_epoch,
        report.best_val_mse,
        report.hit_target
    )
}

/// Per-event descriptor sequences loaded from .bten feature files, in the
/// order of `refs`.
fn load_feature_sequences(
    dir: &Path,
    clips: &[ClipRecord],
    refs: &[SeqRef],
) -> CliResult<Vec<Vec<Vec<f64>>>> {
    refs.iter()
        .map(|s| {
            let path = dir.join(format!("{}.bten", clips[s.slot].event_id));
            require_file(&path)?;
            let (data, shape, _) = read_bten(&path)?;
            if shape.len() != 2 || shape[1] != DESCRIPTOR_DIM {
                return Err(CliError::Run(Error::Data(format!(
                    "{}: expected [frames, {DESCRIPTOR_DIM}] descriptors, got {shape:?}",
                    path.display()
                ))));
            }
            Ok(data.chunks(DESCRIPTOR_DIM).map(<[f64]>::to_vec).collect())
        })
        .collect()
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Run(Error::Config(format!("--jobs: {e}"))))?;
    }
    let conf = Conf::load(cli.config.as_deref())?;
    let seed = pick(cli.seed, conf.get("seed")?, 42);
    let dtype = parse_dtype(cli.precision.as_deref(), &conf)?;

    match cli.cmd {
        Cmd::Synth(a) => {
            let t = Instant::now();
            let records = synth::generate_with(&a.out, seed, a.per_level)?;
            eprintln!("rendered {} events in {:.1}s", records.len(), t.elapsed().as_secs_f64());
            emitln!("manifest\t{}", a.out.join("manifest.tsv").display());
            emitln!("events\t{}", records.len());
        }
        Cmd::Preprocess(a) => {
            require_file(&a.manifest)?;
            let opts = PreprocessOptions {
                seed,
                subjects: a.subjects.map(|s| s.split(',').map(str::to_string).collect()),
                balance: !a.no_balance,
            };
            let t = Instant::now();
            let (_, summary) = data::preprocess(&a.manifest, &a.out, &opts)?;
            eprintln!("preprocessed in {:.1}s", t.elapsed().as_secs_f64());
            emitln!("events\t{}", summary.events);
            emitln!("dropped_short\t{}", summary.dropped_short);
            emitln!("dropped_balance\t{}", summary.dropped_balance);
            emitln!("keyframes\t{}", summary.keyframes);
            let levels: Vec<String> =
                summary.per_level_frames.iter().map(|n| n.to_string()).collect();
            emitln!("level_frames\t{}", levels.join(","));
        }
        Cmd::Features(a) => {
            let clips = read_clips(&a.clips)?;
            let net = match &a.checkpoint {
                Some(dir) => load_bilinear(seed, dir)?,
                None => BilinearNet::init(seed, Default::default()),
            };
            let store = build_store(&net, &clips, &[], &TrainConfig { seed, ..Default::default() })?;
            std::fs::create_dir_all(&a.out).map_err(Error::from)?;
            let t = Instant::now();
            for (slot, clip) in clips.iter().enumerate() {
                let (flat, shape) = descriptor_matrix(&net, &store, slot)?;
                write_bten(&a.out.join(format!("{}.bten", clip.event_id)), &flat, &shape, dtype)?;
            }
            eprintln!("extracted in {:.1}s", t.elapsed().as_secs_f64());
            emitln!("events\t{}", clips.len());
            emitln!("out\t{}", a.out.display());
        }
        Cmd::TrainBilinear(a) => {
            let clips = read_clips(&a.clips)?;
            let cfg = a.train.resolve(&conf, seed)?;
            let (train_idx, val_idx) = train_val_split(&clips, seed)?;
            let net = match &a.init {
                Some(dir) => load_bilinear(seed, dir)?,
                None => BilinearNet::init(seed, Default::default()),
            };
            net.set_freeze_prefix(cfg.freeze_prefix);
            let t = Instant::now();
            let store = build_store(&net, &clips, &train_idx, &cfg)?;
            eprintln!("store ready in {:.1}s", t.elapsed().as_secs_f64());
            let mut model = Stage1Model::new(
                net,
                store,
                &facial_pairs(&clips, &train_idx),
                &facial_pairs(&clips, &val_idx),
            );
            let t = Instant::now();
            let report = fit(&mut model, &cfg)?;
            eprintln!("trained in {:.1}s", t.elapsed().as_secs_f64());
            write_history(&a.out, &report)?;
            save_checkpoint(&model.net.params(), &a.out, dtype)?;
            emit(report_summary(&report))?;
            emitln!("checkpoint\t{}", a.out.display());
        }
        Cmd::TrainLstm(a) => {
            let clips = read_clips(&a.clips)?;
            let cfg = a.train.resolve(&conf, seed)?;
            let (train_idx, val_idx) = train_val_split(&clips, seed)?;
            let train_refs = seq_refs(&clips, &train_idx);
            let val_refs = seq_refs(&clips, &val_idx);
            if train_refs.is_empty() || val_refs.is_empty() {
                return Err(CliError::Run(Error::Data(
                    "no postoperative events in the train or validation carve".into(),
                )));
            }
            let net = load_bilinear(seed, &a.stage1)?;
            net.set_freeze_prefix(cfg.freeze_prefix);
            let lstm = IntensityLstm::init(seed);
            // feature files bypass the frames entirely, so skip prefix caching
            let store_cfg = TrainConfig {
                freeze_prefix: if a.features.is_some() { 0 } else { cfg.freeze_prefix },
                ..cfg.clone()
            };
            let t = Instant::now();
            let store = build_store(&net, &clips, &train_idx, &store_cfg)?;
            eprintln!("store ready in {:.1}s", t.elapsed().as_secs_f64());
            let mut model =
                Stage2Model::new(lstm, net, store, train_refs.clone(), val_refs.clone(), a.joint)?;
            if let Some(dir) = &a.features {
                model.set_descriptors(
                    load_feature_sequences(dir, &clips, &train_refs)?,
                    load_feature_sequences(dir, &clips, &val_refs)?,
                )?;
            }
            let t = Instant::now();
            let report = fit(&mut model, &cfg)?;
            eprintln!("trained in {:.1}s", t.elapsed().as_secs_f64());
            write_history(&a.out, &report)?;
            save_checkpoint(&model.lstm.params(), &a.out, dtype)?;
            if a.joint {
                let refined = a.out.join("bilinear-refined");
                save_checkpoint(&model.net.params(), &refined, dtype)?;
                emitln!("refined_stage1\t{}", refined.display());
            }
            emit(report_summary(&report))?;
            emitln!("checkpoint\t{}", a.out.display());
        }
        Cmd::Evaluate(a) => {
            let clips = read_clips(&a.clips)?;
            let folds = match a.protocol {
                Protocol::Loso => loso_folds(&clips)?,
                Protocol::Split => vec![split_fold(clips.len(), seed)?],
            };
            let cfg = a.train.resolve(&conf, seed)?;
            let t = Instant::now();
            let rows = match &a.stage1 {
                Some(stage1) => {
                    let net = load_bilinear(seed, stage1)?;
                    let lstm = match &a.stage2 {
                        Some(dir) => Some(load_lstm(seed, dir)?),
                        None => None,
                    };
                    let store_cfg = StoreConfig {
                        freeze: cfg.freeze_prefix,
                        seed,
                        ..Default::default()
                    };
                    evaluate_scored(&clips, &folds, &net, lstm.as_ref(), store_cfg)?
                }
                None => {
                    let eval_cfg = EvalConfig {
                        seed,
                        stage1: cfg.clone(),
                        stage2: cfg.clone(),
                        store: StoreConfig {
                            freeze: cfg.freeze_prefix,
                            augment: cfg.augment,
                            augment_per_clip: cfg.augment_per_clip,
                            seed,
                            ..Default::default()
                        },
                        joint: false,
                    };
                    evaluate_trained(&clips, &folds, &eval_cfg)?
                }
            };
            eprintln!("evaluated in {:.1}s", t.elapsed().as_secs_f64());
            let tsv = metrics_tsv(&rows);
            if let Some(out) = &a.out {
                std::fs::create_dir_all(out).map_err(Error::from)?;
                std::fs::write(out.join("metrics.tsv"), &tsv).map_err(Error::from)?;
            }
            emit(&tsv)?;
        }
        Cmd::Predict(a) => {
            let clips = read_clips(&a.clips)?;
            let slot = clips
                .iter()
                .position(|c| c.event_id == a.event)
                .ok_or_else(|| CliError::Run(Error::Data(format!("unknown event id {}", a.event))))?;
            let net = load_bilinear(seed, &a.stage1)?;
            let lstm = load_lstm(seed, &a.stage2)?;
            let clip = clips[slot].clone();
            let streams = [&net.stream_a, &net.stream_b];
            let store = FrameStore::build(
                &streams,
                std::slice::from_ref(&clip),
                &[Variant::Clean],
                StoreConfig { seed, ..Default::default() },
            )?;
            for v in predict_sequence(&lstm, &net, &store, 0)? {
                emitln!("{v:.6}");
            }
        }
        Cmd::Reference => {
            emit(reference_tsv())?;
        }
    }
    Ok(())
}
