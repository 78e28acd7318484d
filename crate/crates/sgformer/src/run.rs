//! Training runs on disk: `config.txt`, one checkpoint per epoch and
//! `history.csv` in the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sgformer_core::harness::{evaluate, Dataset, TrainConfig, Trainer};
use sgformer_core::model::{build_variant, Model, ModelConfig};
use sgformer_core::numerics::DType;
use sgformer_core::{rng, Real, Tensor};

use crate::error::{io_err, Error, Result};
use crate::formats::{
    load_checkpoint, parse_history, save_checkpoint, write_history, Checkpoint, HistoryRow, NamedTensor,
};

pub const CONFIG_FILE: &str = "config.txt";
pub const HISTORY_FILE: &str = "history.csv";

/// Everything needed to rebuild a model and its training schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.sgck")
}

fn precision_name(p: DType) -> &'static str {
    match p {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

pub fn parse_precision(s: &str) -> Option<DType> {
    match s {
        "f32" => Some(DType::F32),
        "f64" => Some(DType::F64),
        _ => None,
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Malformed(format!("line {}: expected key=value", no + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

impl RunConfig {
    /// `key=value` text using the CLI flag names.
    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        [
            ("variant", m.name.clone()),
            ("classes", m.num_classes.to_string()),
            ("input", m.input.to_string()),
            ("guidance", m.guidance.name().to_string()),
            ("scale-mode", m.scale_mode.name().to_string()),
            ("drop-path", m.drop_path.to_string()),
            ("seed", t.seed.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch", t.batch.to_string()),
            ("lr", t.lr.to_string()),
            ("weight-decay", t.weight_decay.to_string()),
            ("warmup", t.warmup_epochs.to_string()),
            ("flip", t.flip.to_string()),
            ("precision", precision_name(t.precision).to_string()),
        ]
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
    }

    /// Rebuilds from `key=value` pairs; missing keys take defaults.
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        fn get<V: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Option<V>> {
            map.get(key)
                .map(|v| v.parse().map_err(|_| Error::Malformed(format!("bad value {v:?} for {key}"))))
                .transpose()
        }
        let mut model = build_variant(map.get("variant").map_or("Tiny", String::as_str))?;
        if let Some(c) = get(map, "classes")? {
            model.num_classes = c;
        }
        if let Some(i) = get(map, "input")? {
            model.set_input(i)?;
        }
        if let Some(g) = map.get("guidance") {
            model.guidance = g.parse()?;
        }
        if let Some(s) = map.get("scale-mode") {
            model.scale_mode = s.parse()?;
        }
        if let Some(d) = get(map, "drop-path")? {
            model.drop_path = d;
        }
        model.validate()?;
        let mut train = TrainConfig::default();
        train.seed = get(map, "seed")?.unwrap_or(train.seed);
        train.epochs = get(map, "epochs")?.unwrap_or(train.epochs);
        train.batch = get(map, "batch")?.unwrap_or(train.batch);
        train.lr = get(map, "lr")?.unwrap_or(train.lr);
        train.weight_decay = get(map, "weight-decay")?.unwrap_or(train.weight_decay);
        train.warmup_epochs = get(map, "warmup")?.unwrap_or(train.warmup_epochs);
        train.flip = get(map, "flip")?.unwrap_or(train.flip);
        if let Some(p) = map.get("precision") {
            train.precision = parse_precision(p).ok_or_else(|| Error::Malformed(format!("precision {p:?}")))?;
        }
        Ok(Self { model, train })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.to_kv()).map_err(io_err(path))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(path))?;
        Self::from_kv(&parse_kv(&text)?)
    }
}

/// Parameters, AdamW moments, step counter and generator state.
pub fn checkpoint_from_trainer<T: Real>(t: &Trainer<T>) -> Checkpoint {
    let specs = t.model.specs();
    let mut tensors = Vec::with_capacity(3 * specs.len());
    for (s, p) in specs.iter().zip(t.model.params()) {
        tensors.push(NamedTensor::from_tensor(&s.name, p));
    }
    for (prefix, moments) in [("opt.m.", &t.opt.m), ("opt.v.", &t.opt.v)] {
        for (s, m) in specs.iter().zip(moments) {
            tensors.push(NamedTensor::from_tensor(format!("{prefix}{}", s.name), m));
        }
    }
    Checkpoint {
        step: t.opt.step,
        rng_state: rng::state_bytes(&t.rng).to_vec(),
        tensors,
    }
}

fn named<T: Real>(ck: &Checkpoint, name: &str) -> Result<Tensor<T>> {
    ck.get(name)
        .ok_or_else(|| Error::Malformed(format!("checkpoint has no tensor {name}")))?
        .to_tensor()
}

pub fn model_from_checkpoint<T: Real>(ck: &Checkpoint, cfg: &ModelConfig) -> Result<Model<T>> {
    let layout = Model::<T>::new(cfg.clone(), 0)?;
    let params = layout
        .specs()
        .iter()
        .map(|s| named(ck, &s.name))
        .collect::<Result<Vec<_>>>()?;
    Ok(Model::from_params(cfg.clone(), params)?)
}

pub fn trainer_from_checkpoint<T: Real>(ck: &Checkpoint, run: &RunConfig) -> Result<Trainer<T>> {
    let model = model_from_checkpoint::<T>(ck, &run.model)?;
    let mut t = Trainer::new(model, run.train.clone())?;
    for (i, s) in t.model.specs().to_vec().iter().enumerate() {
        t.opt.m[i] = named(ck, &format!("opt.m.{}", s.name))?;
        t.opt.v[i] = named(ck, &format!("opt.v.{}", s.name))?;
    }
    t.opt.step = ck.step;
    t.rng = rng::from_state_bytes(&ck.rng_state)
        .ok_or_else(|| Error::Malformed(format!("rng state of {} bytes", ck.rng_state.len())))?;
    Ok(t)
}

/// Trains for the configured number of epochs, writing `config.txt`,
/// `epoch_000.sgck` (the starting point), one checkpoint per epoch and
/// `history.csv`. With `resume`, continues from that checkpoint and keeps
/// the history rows up to it.
pub fn train<T: Real>(
    run: &RunConfig,
    data: &Dataset,
    val: Option<&Dataset>,
    out: &Path,
    resume: Option<&Checkpoint>,
    mut log: impl FnMut(&HistoryRow),
) -> Result<Vec<HistoryRow>> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    run.save(out)?;
    let mut trainer = match resume {
        Some(ck) => trainer_from_checkpoint::<T>(ck, run)?,
        None => Trainer::new(Model::<T>::new(run.model.clone(), run.train.seed)?, run.train.clone())?,
    };
    let start = trainer.epoch(data.len());
    let mut history = Vec::new();
    if resume.is_some() {
        if let Ok(text) = fs::read_to_string(out.join(HISTORY_FILE)) {
            history = parse_history(&text)?.into_iter().filter(|r| r.epoch <= start).collect();
        }
    } else {
        save_checkpoint(&out.join(checkpoint_name(0)), &checkpoint_from_trainer(&trainer))?;
    }
    for _ in start..run.train.epochs {
        let stats = trainer.run_epoch(data, |_, _| {})?;
        let val_acc = match val {
            Some(v) => evaluate(&trainer.model, v, 64)?,
            None => f64::NAN,
        };
        let row = HistoryRow {
            epoch: stats.epoch + 1,
            loss: stats.loss,
            train_acc: stats.accuracy,
            val_acc,
        };
        save_checkpoint(&out.join(checkpoint_name(row.epoch)), &checkpoint_from_trainer(&trainer))?;
        history.push(row);
        write_history(&out.join(HISTORY_FILE), &history)?;
        log(&row);
    }
    Ok(history)
}

/// The run configuration stored next to a checkpoint file.
pub fn run_dir(ckpt: &Path) -> PathBuf {
    ckpt.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

pub fn load_run(ckpt: &Path) -> Result<(Checkpoint, RunConfig)> {
    let ck = load_checkpoint(ckpt)?;
    let run = RunConfig::load(&run_dir(ckpt))?;
    Ok((ck, run))
}
