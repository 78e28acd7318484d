//! Binary dataset and checkpoint files, the training history CSV and PGM
//! images. All integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use sgformer_core::harness::Dataset;
use sgformer_core::numerics::DType;
use sgformer_core::{Real, Tensor};

use crate::error::{io_err, Error, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"SGDS";
pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SGCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const HISTORY_HEADER: &str = "epoch,loss,train_acc,val_acc";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(what))?;
        let out = self.buf.get(self.pos..end).ok_or(Error::Truncated(what))?;
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn header(&mut self, magic: [u8; 4], version: u32) -> Result<()> {
        let found = self.array::<4>("magic")?;
        if found != magic {
            return Err(Error::BadMagic { expected: magic, found });
        }
        let v = self.u32("version")?;
        if v != version {
            return Err(Error::Version { found: v, expected: version });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))?;
    f.sync_all().map_err(io_err(path))
}

fn checked_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Malformed(format!("{what} {v} does not fit in u32")))
}

pub fn encode_dataset(data: &Dataset) -> Result<Vec<u8>> {
    let (h, w, c) = data.image_shape();
    let mut out = Vec::with_capacity(24 + data.len() * (1 + h * w * c * 4));
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for (v, what) in [(data.len(), "count"), (h, "height"), (w, "width"), (c, "channels")] {
        out.extend_from_slice(&checked_u32(v, what)?.to_le_bytes());
    }
    out.extend_from_slice(data.labels());
    for v in data.images().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.header(DATASET_MAGIC, DATASET_VERSION)?;
    let n = r.u32("count")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let c = r.u32("channels")? as usize;
    let labels = r.take(n, "labels")?.to_vec();
    let len = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::Malformed("image dimensions overflow".into()))?;
    let raw = r.take(len.checked_mul(4).ok_or(Error::Truncated("pixels"))?, "pixels")?;
    r.finish()?;
    let pixels = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4")))
        .collect();
    Ok(Dataset::new(Tensor::new(&[n, h, w, c], pixels)?, labels)?)
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    write_file(path, &encode_dataset(data)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&read_file(path)?)
}

/// Raw tensor payload in its stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        // Widening f32 to f64 and back is exact, so this round-trips bits.
        let data = match T::DTYPE {
            DType::F32 => TensorData::F32(t.data().iter().map(|v| v.to_f64() as f32).collect()),
            DType::F64 => TensorData::F64(t.data().iter().map(|v| v.to_f64()).collect()),
        };
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data,
        }
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    /// Converts to `T`; fails if the stored precision differs.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match (&self.data, T::DTYPE) {
            (TensorData::F32(v), DType::F32) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            (TensorData::F64(v), DType::F64) => v.iter().map(|&x| T::from_f64(x)).collect(),
            _ => {
                return Err(Error::Malformed(format!(
                    "tensor {} is stored as {:?}, requested {:?}",
                    self.name,
                    self.dtype(),
                    T::DTYPE
                )))
            }
        };
        Ok(Tensor::new(&self.shape, data)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub rng_state: Vec<u8>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn dtype(&self) -> Option<DType> {
        self.tensors.first().map(NamedTensor::dtype)
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&ck.step.to_le_bytes());
    out.extend_from_slice(&checked_u32(ck.rng_state.len(), "rng state length")?.to_le_bytes());
    out.extend_from_slice(&ck.rng_state);
    out.extend_from_slice(&checked_u32(ck.tensors.len(), "tensor count")?.to_le_bytes());
    for t in &ck.tensors {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Malformed(format!("tensor name {} too long", t.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(t.dtype() as u8);
        let rank = u8::try_from(t.shape.len()).map_err(|_| Error::Malformed(format!("rank of {}", t.name)))?;
        out.push(rank);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &t.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let step = r.u64("step")?;
    let rng_len = r.u32("rng state length")? as usize;
    let rng_state = r.take(rng_len, "rng state")?.to_vec();
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let code = r.u8("dtype")?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::Malformed(format!("dtype code {code} for {name}")))?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(
                usize::try_from(r.u64("dims")?).map_err(|_| Error::Malformed(format!("dimension of {name}")))?,
            );
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Malformed(format!("shape of {name} overflows")))?;
        let bytes_len = n.checked_mul(dtype.size_of()).ok_or(Error::Truncated("tensor data"))?;
        let raw = r.take(bytes_len, "tensor data")?;
        let data = match dtype {
            DType::F32 => TensorData::F32(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()),
            DType::F64 => TensorData::F64(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()),
        };
        tensors.push(NamedTensor { name, shape, data });
    }
    r.finish()?;
    Ok(Checkpoint { step, rng_state, tensors })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_file(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?)
}

/// One line of `history.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    /// NaN when no validation set was given.
    pub val_acc: f64,
}

impl HistoryRow {
    pub fn to_line(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.loss, self.train_acc, self.val_acc)
    }
}

pub fn parse_history(text: &str) -> Result<Vec<HistoryRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(Error::Malformed("history header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Malformed(format!("history line {l:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(HistoryRow {
                epoch: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                train_acc: f[2].parse().map_err(|_| bad())?,
                val_acc: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut text = String::from(HISTORY_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

/// Binary PGM (P5, maxval 255) of a row-major `h x w` map, min-max scaled.
/// A constant map comes out black.
pub fn encode_pgm(values: &[f64], h: usize, w: usize) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().take(h * w).map(|&v| {
        if span > 0.0 && span.is_finite() {
            ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

pub fn save_pgm(path: &Path, values: &[f64], h: usize, w: usize) -> Result<()> {
    write_file(path, &encode_pgm(values, h, w))
}
