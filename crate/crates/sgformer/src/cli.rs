//! `sgformer` command line: gen-data, train, eval, summary, inspect.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sgformer_core::harness::{evaluate, gen_salient_dataset, Dataset};
use sgformer_core::model::{build_variant, count_flops, count_params, Model};
use sgformer_core::numerics::DType;
use sgformer_core::Real;

use crate::error::Error;
use crate::formats::{load_dataset, save_dataset, save_pgm, HistoryRow};
use crate::run::{self, load_run, model_from_checkpoint, parse_kv, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "sgformer", version, about = "Train, evaluate and inspect SG-Former backbones")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic salient-object dataset.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints plus history.csv.
    Train(TrainArgs),
    /// Print top-1 accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Print parameter and multiply-accumulate counts of a variant.
    Summary(SummaryArgs),
    /// Write per-stage significance maps of one image as PGM files.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// key=value file with defaults for any of these flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out dataset evaluated after every epoch.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    drop_path: Option<f64>,
    /// hybrid | local | global | uniform
    #[arg(long)]
    guidance: Option<String>,
    /// hybrid | local | global
    #[arg(long)]
    scale_mode: Option<String>,
    /// f32 | f64
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    flip: Option<bool>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SummaryArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    input: Option<usize>,
    #[arg(long)]
    scale_mode: Option<String>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    index: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Io(String),
    Failed(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Io(_) => EXIT_IO,
            Self::Failed(_) => EXIT_FAILURE,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Core(sgformer_core::Error::Config(_) | sgformer_core::Error::UnknownVariant(_)) => {
                Self::Usage(e.to_string())
            }
            Error::Core(_) => Self::Failed(e.to_string()),
            _ => Self::Io(e.to_string()),
        }
    }
}

impl From<sgformer_core::Error> for CliError {
    fn from(e: sgformer_core::Error) -> Self {
        Error::Core(e).into()
    }
}

type CliResult<T> = Result<T, CliError>;

/// Flags given on the command line layered over an optional config file.
struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    fn new(config: Option<&Path>, flags: Vec<(&'static str, Option<String>)>) -> CliResult<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = config {
            let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            let map = parse_kv(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            for (k, v) in map {
                if !flags.iter().any(|(name, _)| *name == k) {
                    return Err(CliError::Usage(format!("{}: unknown key {k:?}", path.display())));
                }
                values.insert(k, v);
            }
        }
        for (k, v) in flags {
            if let Some(v) = v {
                values.insert(k.to_string(), v);
            }
        }
        Ok(Self { values })
    }

    fn get<V: std::str::FromStr>(&self, key: &str) -> CliResult<Option<V>> {
        self.values
            .get(key)
            .map(|v| v.parse().map_err(|_| CliError::Usage(format!("invalid value {v:?} for --{key}"))))
            .transpose()
    }

    fn require<V: std::str::FromStr>(&self, key: &str) -> CliResult<V> {
        self.get(key)?.ok_or_else(|| CliError::Usage(format!("missing required --{key}")))
    }
}

fn s<V: ToString>(v: &Option<V>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn p(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|p| p.display().to_string())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn dispatch<I, A>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train(a, out, err),
        Command::Eval(a) => eval(a, out),
        Command::Summary(a) => summary(a, out),
        Command::Inspect(a) => inspect(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let (kind, msg) = match &e {
                CliError::Usage(m) => ("usage", m),
                CliError::Io(m) => ("io", m),
                CliError::Failed(m) => ("error", m),
            };
            let _ = writeln!(err, "sgformer: {kind}: {msg}");
            if matches!(e, CliError::Usage(_)) {
                let _ = writeln!(err, "run `sgformer --help` for usage");
            }
            e.code()
        }
    }
}

fn write_out(out: &mut dyn Write, line: &str) -> CliResult<()> {
    writeln!(out, "{line}").map_err(|e| CliError::Io(e.to_string()))
}

fn gen_data(a: GenDataArgs, out: &mut dyn Write) -> CliResult<()> {
    let st = Settings::new(
        a.config.as_deref(),
        vec![
            ("seed", s(&a.seed)),
            ("count", s(&a.count)),
            ("out", p(&a.out)),
            ("size", s(&a.size)),
            ("classes", s(&a.classes)),
        ],
    )?;
    let seed: u64 = st.require("seed")?;
    let count: usize = st.require("count")?;
    let path: PathBuf = st.require("out")?;
    let size = st.get("size")?.unwrap_or(64);
    let classes = st.get("classes")?.unwrap_or(10);
    let data = gen_salient_dataset(seed, count, classes, size)?;
    save_dataset(&path, &data)?;
    write_out(out, &format!("wrote {count} images to {}", path.display()))
}

fn load_data(path: &Path) -> CliResult<Dataset> {
    Ok(load_dataset(path)?)
}

fn train(a: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let st = Settings::new(
        a.config.as_deref(),
        vec![
            ("variant", a.variant.clone()),
            ("data", p(&a.data)),
            ("val", p(&a.val)),
            ("out", p(&a.out)),
            ("seed", s(&a.seed)),
            ("epochs", s(&a.epochs)),
            ("batch", s(&a.batch)),
            ("lr", s(&a.lr)),
            ("weight-decay", s(&a.weight_decay)),
            ("warmup", s(&a.warmup)),
            ("drop-path", s(&a.drop_path)),
            ("guidance", a.guidance.clone()),
            ("scale-mode", a.scale_mode.clone()),
            ("precision", a.precision.clone()),
            ("flip", s(&a.flip)),
            ("resume", p(&a.resume)),
            // Written by `train` into config.txt, so accepted when that file
            // is passed back through --config.
            ("classes", None),
            ("input", None),
        ],
    )?;
    let data_path: PathBuf = st.require("data")?;
    let out_dir: PathBuf = st.require("out")?;
    let data = load_data(&data_path)?;
    let val = st.get::<PathBuf>("val")?.map(|v| load_data(&v)).transpose()?;
    let mut map = st.values.clone();
    if !map.contains_key("classes") {
        let classes = data.labels().iter().copied().max().map_or(2, |m| (m as usize + 1).max(2));
        map.insert("classes".into(), classes.to_string());
    }
    for key in ["data", "val", "out", "resume"] {
        map.remove(key);
    }
    let run = RunConfig::from_kv(&map)?;
    if run.model.input != data.image_shape().0 {
        return Err(CliError::Usage(format!(
            "variant {} expects {}x{} images, dataset has {}x{}",
            run.model.name,
            run.model.input,
            run.model.input,
            data.image_shape().0,
            data.image_shape().1
        )));
    }
    run.train.validate()?;
    let resume = st
        .get::<PathBuf>("resume")?
        .map(|path| crate::formats::load_checkpoint(&path))
        .transpose()?;
    let mut log = |r: &HistoryRow| {
        let _ = writeln!(
            err,
            "epoch {} loss={:.4} train_acc={:.4} val_acc={:.4}",
            r.epoch, r.loss, r.train_acc, r.val_acc
        );
    };
    let history = match run.train.precision {
        DType::F32 => run::train::<f32>(&run, &data, val.as_ref(), &out_dir, resume.as_ref(), &mut log)?,
        DType::F64 => run::train::<f64>(&run, &data, val.as_ref(), &out_dir, resume.as_ref(), &mut log)?,
    };
    if let Some(last) = history.last() {
        write_out(out, &format!("loss={} train_acc={} val_acc={}", last.loss, last.train_acc, last.val_acc))?;
    }
    Ok(())
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let st = Settings::new(a.config.as_deref(), vec![("ckpt", p(&a.ckpt)), ("data", p(&a.data))])?;
    let ckpt: PathBuf = st.require("ckpt")?;
    let data = load_data(&st.require::<PathBuf>("data")?)?;
    let (ck, run) = load_run(&ckpt)?;
    let acc = match ck.dtype().unwrap_or(DType::F32) {
        DType::F32 => evaluate(&model_from_checkpoint::<f32>(&ck, &run.model)?, &data, 64)?,
        DType::F64 => evaluate(&model_from_checkpoint::<f64>(&ck, &run.model)?, &data, 64)?,
    };
    write_out(out, &format!("accuracy={acc}"))
}

fn summary(a: SummaryArgs, out: &mut dyn Write) -> CliResult<()> {
    let st = Settings::new(
        a.config.as_deref(),
        vec![("variant", a.variant.clone()), ("input", s(&a.input)), ("scale-mode", a.scale_mode.clone())],
    )?;
    let mut cfg = build_variant(&st.require::<String>("variant")?)?;
    if let Some(mode) = st.get::<String>("scale-mode")? {
        cfg.scale_mode = mode.parse()?;
        cfg.validate()?;
    }
    let input = st.get("input")?.unwrap_or(cfg.input);
    let flops = count_flops(&cfg, input)?;
    write_out(out, &format!("params={} flops={flops}", count_params(&cfg)))
}

fn inspect_with<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    index: usize,
    dir: &Path,
) -> CliResult<(usize, Vec<(usize, usize)>)> {
    let (x, _) = data.batch::<T>(&[index], &[]);
    let (logits, maps) = model.predict(&x)?;
    let predicted = sgformer_core::harness::argmax(logits.data());
    let (h, w, c) = data.image_shape();
    let gray: Vec<f64> = data
        .image(index)
        .chunks(c)
        .map(|px| px.iter().map(|&v| v as f64).sum::<f64>() / c as f64)
        .collect();
    save_pgm(&dir.join("input.pgm"), &gray, h, w)?;
    let mut sizes = Vec::new();
    for (i, map) in maps.iter().enumerate() {
        let (gh, gw) = (map.shape()[1], map.shape()[2]);
        let values: Vec<f64> = map.data().iter().map(|v| v.to_f64()).collect();
        save_pgm(&dir.join(format!("stage{}.pgm", i + 1)), &values, gh, gw)?;
        sizes.push((gh, gw));
    }
    Ok((predicted, sizes))
}

fn inspect(a: InspectArgs, out: &mut dyn Write) -> CliResult<()> {
    let st = Settings::new(
        a.config.as_deref(),
        vec![("ckpt", p(&a.ckpt)), ("data", p(&a.data)), ("index", s(&a.index)), ("out", p(&a.out))],
    )?;
    let ckpt: PathBuf = st.require("ckpt")?;
    let data = load_data(&st.require::<PathBuf>("data")?)?;
    let index: usize = st.require("index")?;
    let dir: PathBuf = st.require("out")?;
    if index >= data.len() {
        return Err(CliError::Usage(format!("--index {index} out of range for {} images", data.len())));
    }
    let (ck, run) = load_run(&ckpt)?;
    fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let (predicted, sizes) = match ck.dtype().unwrap_or(DType::F32) {
        DType::F32 => inspect_with(&model_from_checkpoint::<f32>(&ck, &run.model)?, &data, index, &dir)?,
        DType::F64 => inspect_with(&model_from_checkpoint::<f64>(&ck, &run.model)?, &data, index, &dir)?,
    };
    let grids: Vec<String> = sizes.iter().map(|(h, w)| format!("{h}x{w}")).collect();
    write_out(
        out,
        &format!(
            "label={} predicted={predicted} maps={}",
            data.labels()[index],
            grids.join(",")
        ),
    )
}
