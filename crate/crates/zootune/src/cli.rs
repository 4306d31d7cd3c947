//! The `zootune` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use zootune_core::backbone::{zoo_compatible_by_digest, BackboneConfig, Model};
use zootune_core::checkpoint::Checkpoint;
use zootune_core::complexity::report;
use zootune_core::data::{gen_synthetic_split, Dataset, Factor, TaskSpec};
use zootune_core::train::{
    evaluate_accuracy, run_baseline, train_source, zoo_tune, BaselineKind, RunRecord, TrainConfig, TuneMode,
};
use zootune_core::Real;

use crate::atomic::Outputs;
use crate::config::load_config_args;
use crate::csvio;
use crate::error::{Error, Result, EXIT_OK, EXIT_USAGE};
use crate::idx;
use crate::zooc;

#[derive(Debug, Parser)]
#[command(name = "zootune", version, about = "Adaptive transfer from a zoo of same-architecture convolutional models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic task into IDX train/test files
    #[command(args_override_self = true)]
    Synth(SynthArgs),
    /// Train a source model from scratch
    #[command(args_override_self = true)]
    Pretrain(PretrainArgs),
    /// Tune an aggregated model over a zoo of source checkpoints
    #[command(args_override_self = true)]
    Tune(TuneArgs),
    /// Fold temporal-ensemble gates into a plain model
    #[command(args_override_self = true)]
    Collapse(CollapseArgs),
    /// Top-1 accuracy of a model on a data split
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Per-layer MAC and parameter report
    #[command(args_override_self = true)]
    Complexity(ComplexityArgs),
    /// Single-source fine-tuning, ensembles and average aggregation
    #[command(args_override_self = true)]
    Baseline(BaselineArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Pretrain(_) => "pretrain",
            Command::Tune(_) => "tune",
            Command::Collapse(_) => "collapse",
            Command::Eval(_) => "eval",
            Command::Complexity(_) => "complexity",
            Command::Baseline(_) => "baseline",
        }
    }

    fn config(&self) -> Option<&Path> {
        match self {
            Command::Synth(a) => a.config.as_deref(),
            Command::Pretrain(a) => a.config.as_deref(),
            Command::Tune(a) => a.config.as_deref(),
            Command::Collapse(a) => a.config.as_deref(),
            Command::Eval(a) => a.config.as_deref(),
            Command::Complexity(a) => a.config.as_deref(),
            Command::Baseline(a) => a.config.as_deref(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    Single,
    Double,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Full,
    Lite,
    AvgAgg,
    NoAlign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Desk,
    Compact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Active factors, comma separated (shape, orientation, color)
    #[arg(long, default_value = "shape")]
    factors: String,
    /// Values used per factor (2 to 4)
    #[arg(long, default_value_t = 4)]
    levels: usize,
    /// Class of every factor combination, comma separated
    #[arg(long)]
    class_map: Option<String>,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 16)]
    side: usize,
    #[arg(long)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    /// Fractions of the run at which the learning rate decays
    #[arg(long, default_value = "0.4,0.8")]
    decay_at: String,
    #[arg(long, default_value_t = 0.1)]
    decay_factor: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    /// Evaluate on the test split every N iterations (0: at the end only)
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    #[arg(long, value_enum, default_value_t = Precision::Single)]
    precision: Precision,
}

impl TrainArgs {
    fn config(&self, seed: u64, mode: TuneMode) -> Result<TrainConfig> {
        let decay_at = if self.decay_at.trim().is_empty() {
            Vec::new()
        } else {
            self.decay_at
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Usage(format!("bad --decay-at value `{s}`"))))
                .collect::<Result<_>>()?
        };
        let cfg = TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            iterations: self.iterations,
            decay_at,
            decay_factor: self.decay_factor,
            weight_decay: self.weight_decay,
            seed,
            mode,
            eval_every: self.eval_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct BackboneArgs {
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    backbone: Preset,
    #[arg(long)]
    stem: Option<usize>,
    /// Stages as BLOCKSxCHANNELS, comma separated
    #[arg(long)]
    stages: Option<String>,
    /// Also align 1x1 shortcut convolutions
    #[arg(long)]
    align_pointwise: bool,
}

impl BackboneArgs {
    fn config(&self) -> Result<BackboneConfig> {
        let mut c = match self.backbone {
            Preset::Desk => BackboneConfig::desk(),
            Preset::Compact => BackboneConfig::compact(),
        };
        if let Some(s) = self.stem {
            c.stem_channels = s;
        }
        if let Some(s) = &self.stages {
            c.stages = BackboneConfig::parse_stages(s)?;
        }
        c.align_pointwise = self.align_pointwise;
        Ok(c)
    }
}

#[derive(Debug, Args)]
struct PretrainArgs {
    /// Directory with train/test IDX files
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Keep the classification head in the checkpoint
    #[arg(long)]
    include_head: bool,
    #[arg(long)]
    run_csv: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    backbone: BackboneArgs,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TuneArgs {
    /// Source checkpoints, comma separated; the order fixes source indices
    #[arg(long)]
    zoo: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Full)]
    mode: ModeArg,
    #[arg(long)]
    out: PathBuf,
    /// Temporal-ensemble gates (lite mode)
    #[arg(long)]
    te_out: Option<PathBuf>,
    #[arg(long)]
    gates_csv: Option<PathBuf>,
    #[arg(long)]
    run_csv: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CollapseArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    te: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Precision::Single)]
    precision: Precision,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    /// Evaluate with temporal-ensemble gates
    #[arg(long)]
    te: Option<PathBuf>,
    /// Metric CSV
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Precision::Single)]
    precision: Precision,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ComplexityArgs {
    /// Report on a model checkpoint instead of a plain backbone
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    backbone: BackboneArgs,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    /// Input side (defaults to the configured one)
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    /// finetune:INDEX, ensemble or avg-agg
    #[arg(long)]
    kind: String,
    #[arg(long)]
    zoo: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    run_csv: Option<PathBuf>,
    /// Metric CSV
    #[arg(long)]
    metric_out: Option<PathBuf>,
    /// Model checkpoint (single-model kinds only)
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn init_logging() -> Result<()> {
    let level = match std::env::var("ZOOTUNE_LOG").as_deref() {
        Err(_) | Ok("info") => log::LevelFilter::Info,
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        Ok(other) => return Err(Error::Usage(format!("ZOOTUNE_LOG must be quiet, info or debug, not `{other}`"))),
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    Ok(())
}

fn parse(argv: &[OsString]) -> std::result::Result<Cli, clap::Error> {
    Cli::try_parse_from(argv)
}

/// Runs one command and returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString>,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match parse(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = init_logging().and_then(|_| {
        let cli = match cli.command.config() {
            Some(path) => {
                let mut merged = argv[..2].to_vec();
                merged.extend(load_config_args(path, cli.command.name())?.into_iter().map(OsString::from));
                merged.extend_from_slice(&argv[2..]);
                parse(&merged).map_err(|e| Error::Usage(e.to_string()))?
            }
            None => cli,
        };
        execute(cli.command)
    });
    match result.and_then(Outputs::commit) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cmd: Command) -> Result<Outputs> {
    match cmd {
        Command::Synth(a) => synth(&a),
        Command::Pretrain(a) => match a.train.precision {
            Precision::Single => pretrain::<f32>(&a),
            Precision::Double => pretrain::<f64>(&a),
        },
        Command::Tune(a) => match a.train.precision {
            Precision::Single => tune::<f32>(&a),
            Precision::Double => tune::<f64>(&a),
        },
        Command::Collapse(a) => match a.precision {
            Precision::Single => collapse::<f32>(&a),
            Precision::Double => collapse::<f64>(&a),
        },
        Command::Eval(a) => match a.precision {
            Precision::Single => eval::<f32>(&a),
            Precision::Double => eval::<f64>(&a),
        },
        Command::Complexity(a) => complexity(&a),
        Command::Baseline(a) => match a.train.precision {
            Precision::Single => baseline::<f32>(&a),
            Precision::Double => baseline::<f64>(&a),
        },
    }
}

fn synth(a: &SynthArgs) -> Result<Outputs> {
    let factors = a.factors.split(',').map(|f| Factor::parse(f.trim())).collect::<std::result::Result<Vec<_>, _>>()?;
    let class_map = match &a.class_map {
        Some(s) => Some(
            s.split(',')
                .map(|c| c.trim().parse().map_err(|_| Error::Usage(format!("bad class map entry `{c}`"))))
                .collect::<Result<Vec<usize>>>()?,
        ),
        None => None,
    };
    let spec = TaskSpec {
        factors,
        levels: a.levels,
        class_map,
        noise: a.noise,
        samples_per_class: a.per_class,
        side: a.side,
        seed: a.seed,
    };
    let (train, test) = gen_synthetic_split(&spec)?;
    info!("synth: {} train / {} test samples, {} classes", train.len(), test.len(), train.classes);
    let mut out = Outputs::default();
    for (name, d) in [("train", &train), ("test", &test)] {
        let (ib, lb) = idx::dataset_to_bytes(d)?;
        let (ip, lp) = idx::split_paths(&a.out, name);
        out.add(ip, ib);
        out.add(lp, lb);
    }
    Ok(out)
}

fn finish_record(record: &mut RunRecord, start: Instant, what: &str) {
    record.wall_clock = Some(start.elapsed().as_secs_f64());
    info!(
        "{what}: {} iterations in {:.1}s, final loss {:?}, metric {:?}",
        record.points.len(),
        start.elapsed().as_secs_f64(),
        record.points.last().map(|p| p.train_loss),
        record.final_metric
    );
}

fn pretrain<T: Real>(a: &PretrainArgs) -> Result<Outputs> {
    let (train, test) = idx::load_dir(&a.data)?;
    let mut bc = a.backbone.config()?;
    bc.in_channels = train.channels;
    bc.side = train.side;
    let cfg = a.train.config(a.seed, TuneMode::Full)?;
    let start = Instant::now();
    let (ck, mut record) = train_source::<T>(&train, &cfg, &bc, a.include_head, Some(&test))?;
    finish_record(&mut record, start, "pretrain");
    let mut out = Outputs::default();
    out.add(&a.out, zooc::encode(&ck)?);
    if let Some(p) = &a.run_csv {
        out.add(p, csvio::run_csv(&record)?);
    }
    Ok(out)
}

fn load_zoo(list: &str) -> Result<(Vec<Checkpoint>, BackboneConfig)> {
    let paths: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if paths.is_empty() {
        return Err(Error::Usage("--zoo needs at least one checkpoint".into()));
    }
    let mut zoo = Vec::new();
    for p in &paths {
        let ck = zooc::load_checkpoint(Path::new(p))?;
        if ck.meta("kind").is_some_and(|k| k != "plain") {
            return Err(Error::Format(format!("{p}: not a source checkpoint")));
        }
        zoo.push(ck);
    }
    let cfg = zoo[0].meta("config").ok_or_else(|| Error::Format(format!("{}: no backbone config recorded", paths[0])))?;
    let cfg = BackboneConfig::decode(cfg).map_err(|e| Error::Format(format!("{}: {e}", paths[0])))?;
    if zoo_compatible_by_digest(&cfg, &zoo) == Some(false) {
        return Err(Error::Core(zootune_core::Error::ZooIncompatible {
            param: String::new(),
            reason: "backbone digests differ across the zoo".into(),
        }));
    }
    info!("zoo: {} sources, backbone {}", zoo.len(), cfg.encode());
    Ok((zoo, cfg))
}

fn tune<T: Real>(a: &TuneArgs) -> Result<Outputs> {
    let (zoo, bc) = load_zoo(&a.zoo)?;
    let (train, test) = idx::load_dir(&a.data)?;
    let mode = match a.mode {
        ModeArg::Full => TuneMode::Full,
        ModeArg::Lite => TuneMode::Lite,
        ModeArg::AvgAgg => TuneMode::AvgAgg,
        ModeArg::NoAlign => TuneMode::NoAlign,
    };
    if a.te_out.is_some() && mode != TuneMode::Lite {
        return Err(Error::Usage("--te-out is only produced in lite mode".into()));
    }
    let cfg = a.train.config(a.seed, mode)?;
    let start = Instant::now();
    let mut res = zoo_tune::<T>(&zoo, &bc, &train, &cfg, Some(&test))?;
    finish_record(&mut res.record, start, "tune");
    let mut out = Outputs::default();
    let mut ck = res.model.to_checkpoint(true);
    ck.set_meta("mode", mode.name());
    ck.set_meta("seed", a.seed);
    out.add(&a.out, zooc::encode(&ck)?);
    match (&res.te, &a.te_out) {
        (Some(te), Some(p)) => out.add(p, csvio::te_csv(te)?),
        (Some(_), None) => warn!("lite run without --te-out: the temporal ensemble is discarded"),
        _ => {}
    }
    if let Some(p) = &a.gates_csv {
        out.add(p, csvio::gates_csv(&res.record)?);
    }
    if let Some(p) = &a.run_csv {
        out.add(p, csvio::run_csv(&res.record)?);
    }
    Ok(out)
}

fn read_te(path: &Path) -> Result<zootune_core::zoo::TeState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    csvio::read_te_csv(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn load_model<T: Real>(path: &Path) -> Result<(Model<T>, Checkpoint)> {
    let ck = zooc::load_checkpoint(path)?;
    let model = Model::<T>::from_checkpoint(&ck).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok((model, ck))
}

fn collapse<T: Real>(a: &CollapseArgs) -> Result<Outputs> {
    let (model, _) = load_model::<T>(&a.model)?;
    let te = read_te(&a.te)?;
    let plain = model.collapse(&te).map_err(|e| Error::Format(format!("{}: {e}", a.model.display())))?;
    let mut out = Outputs::default();
    out.add(&a.out, zooc::encode(&plain.to_checkpoint(true))?);
    Ok(out)
}

fn eval<T: Real>(a: &EvalArgs) -> Result<Outputs> {
    let (model, ck) = load_model::<T>(&a.model)?;
    let split = match a.split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let (ip, lp) = idx::split_paths(&a.data, split);
    let data: Dataset = idx::load_idx(&ip, &lp, Some(model.config.classes))?;
    let te = a.te.as_deref().map(read_te).transpose()?;
    if te.is_none() && ck.meta("gate_mode") == Some("batch_average") {
        return Err(Error::Usage("lite models are evaluated with --te".into()));
    }
    let acc = evaluate_accuracy(&model, &data, te.as_ref())?;
    println!("accuracy {}", csvio::fmt_float(acc));
    let mut out = Outputs::default();
    if let Some(p) = &a.out {
        out.add(p, csvio::metrics_csv(&[("accuracy", acc)])?);
    }
    Ok(out)
}

fn complexity(a: &ComplexityArgs) -> Result<Outputs> {
    let model: Model<f64> = match &a.model {
        Some(p) => load_model::<f64>(p)?.0,
        None => {
            let cfg = BackboneConfig { classes: a.classes, ..a.backbone.config()? };
            zootune_core::backbone::build_plain_backbone(&cfg, 0)?
        }
    };
    let side = a.side.unwrap_or(model.config.side);
    let rep = report(&model, side)?;
    let mut out = Outputs::default();
    out.add(&a.out, rep.to_csv().into_bytes());
    Ok(out)
}

fn parse_kind(s: &str) -> Result<BaselineKind> {
    match s {
        "ensemble" => Ok(BaselineKind::Ensemble),
        "avg-agg" => Ok(BaselineKind::AvgAgg),
        _ => s
            .strip_prefix("finetune:")
            .and_then(|i| i.parse().ok())
            .map(BaselineKind::FinetuneSingle)
            .ok_or_else(|| Error::Usage(format!("--kind must be finetune:INDEX, ensemble or avg-agg, not `{s}`"))),
    }
}

fn baseline<T: Real>(a: &BaselineArgs) -> Result<Outputs> {
    let kind = parse_kind(&a.kind)?;
    if kind == BaselineKind::Ensemble && a.out.is_some() {
        return Err(Error::Usage("--out is not available for ensembles".into()));
    }
    let (zoo, bc) = load_zoo(&a.zoo)?;
    if let BaselineKind::FinetuneSingle(i) = kind {
        if i >= zoo.len() {
            return Err(Error::Usage(format!("source index {i} out of range for {} sources", zoo.len())));
        }
    }
    let (train, test) = idx::load_dir(&a.data)?;
    let mode = match kind {
        BaselineKind::FinetuneSingle(i) => TuneMode::FinetuneSingle(i),
        BaselineKind::AvgAgg => TuneMode::AvgAgg,
        BaselineKind::Ensemble => TuneMode::FinetuneSingle(0),
    };
    let cfg = a.train.config(a.seed, mode)?;
    let start = Instant::now();
    let mut res = run_baseline::<T>(kind, &zoo, &bc, &train, &test, &cfg)?;
    finish_record(&mut res.record, start, "baseline");
    println!("accuracy {}", csvio::fmt_float(res.metric));
    let mut out = Outputs::default();
    if let Some(p) = &a.run_csv {
        out.add(p, csvio::run_csv(&res.record)?);
    }
    if let Some(p) = &a.metric_out {
        out.add(p, csvio::metrics_csv(&[("accuracy", res.metric)])?);
    }
    if let Some(p) = &a.out {
        out.add(p, zooc::encode(&res.models[0].to_checkpoint(true))?);
    }
    Ok(out)
}
