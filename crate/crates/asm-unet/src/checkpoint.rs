//! Checkpoint file format.
//!
//! Layout, all integers little-endian:
//!   magic "ASMC", version u8, dtype u8 (1 = f64)
//!   config echo: u32 byte length + UTF-8 key=value text
//!   epoch u32, step u64, best_metric f64, evals_since_improve u32,
//!   master_seed u64
//!   n_params u32, then per parameter in registration order:
//!     key u32, name (u16 length + UTF-8), rows u32, cols u32,
//!     rows*cols f64 values
//!   moments flag u8; if 1: adam step u64, then per parameter the first
//!   and second moment payloads (rows*cols f64 each, same order)
//!
//! Training state is f64 throughout and is stored as f64 so a resumed
//! run continues from bit-identical parameters.

use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::Tensor;

pub const MAGIC: [u8; 4] = *b"ASMC";
pub const VERSION: u8 = 1;
pub const DTYPE_F64: u8 = 1;

/// Scalar training progress carried alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epoch: u32,
    pub step: u64,
    pub best_metric: f64,
    pub evals_since_improve: u32,
    pub master_seed: u64,
}

impl TrainState {
    pub fn fresh(master_seed: u64) -> Self {
        TrainState {
            epoch: 0,
            step: 0,
            best_metric: f64::NEG_INFINITY,
            evals_since_improve: 0,
            master_seed,
        }
    }
}

/// Adam accumulators, one pair of tensors per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros_like(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.rows, e.value.cols))
            .collect();
        AdamState { t: 0, m: zeros.clone(), v: zeros }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_text: String,
    pub state: TrainState,
    /// (name, value) in registration order; index is the stable key.
    pub params: Vec<(String, Tensor)>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_store(
        config_text: &str,
        state: &TrainState,
        store: &ParamStore,
        adam: Option<&AdamState>,
    ) -> Self {
        Checkpoint {
            config_text: config_text.to_string(),
            state: state.clone(),
            params: store
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.value.clone()))
                .collect(),
            adam: adam.cloned(),
        }
    }

    /// Copy saved values into a freshly constructed store. Names and
    /// shapes must line up entry for entry.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (id, (name, value)) in self.params.iter().enumerate() {
            if store.name(id) != name {
                return Err(Error::Format(format!(
                    "parameter {id} is '{}' in the model but '{name}' in the checkpoint",
                    store.name(id)
                )));
            }
            let slot = store.value_mut(id);
            if (slot.rows, slot.cols) != (value.rows, value.cols) {
                return Err(Error::Format(format!(
                    "parameter '{name}' shape mismatch: model {}x{}, checkpoint {}x{}",
                    slot.rows, slot.cols, value.rows, value.cols
                )));
            }
            *slot = value.clone();
        }
        Ok(())
    }
}

// ---- byte-level helpers ----

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
    fn tensor(&mut self, t: &Tensor) {
        for v in &t.data {
            self.f64(*v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f64()?);
        }
        Ok(Tensor::new(rows, cols, data))
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.bytes(&MAGIC);
    w.u8(VERSION);
    w.u8(DTYPE_F64);
    let cfg_bytes = ckpt.config_text.as_bytes();
    w.u32(cfg_bytes.len() as u32);
    w.bytes(cfg_bytes);
    w.u32(ckpt.state.epoch);
    w.u64(ckpt.state.step);
    w.f64(ckpt.state.best_metric);
    w.u32(ckpt.state.evals_since_improve);
    w.u64(ckpt.state.master_seed);
    w.u32(ckpt.params.len() as u32);
    for (key, (name, value)) in ckpt.params.iter().enumerate() {
        w.u32(key as u32);
        let name_bytes = name.as_bytes();
        w.u16(name_bytes.len() as u16);
        w.bytes(name_bytes);
        w.u32(value.rows as u32);
        w.u32(value.cols as u32);
        w.tensor(value);
    }
    match &ckpt.adam {
        None => w.u8(0),
        Some(adam) => {
            w.u8(1);
            w.u64(adam.t);
            for t in adam.m.iter().chain(&adam.v) {
                w.tensor(t);
            }
        }
    }
    w.buf
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let dtype = r.u8()?;
    if dtype != DTYPE_F64 {
        return Err(Error::Format(format!("unsupported checkpoint dtype {dtype}")));
    }
    let cfg_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::Format("config echo is not UTF-8".into()))?
        .to_string();
    let state = TrainState {
        epoch: r.u32()?,
        step: r.u64()?,
        best_metric: r.f64()?,
        evals_since_improve: r.u32()?,
        master_seed: r.u64()?,
    };
    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for expect_key in 0..n_params {
        let key = r.u32()? as usize;
        if key != expect_key {
            return Err(Error::Format(format!(
                "parameter keys out of order: got {key}, expected {expect_key}"
            )));
        }
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        params.push((name, r.tensor(rows, cols)?));
    }
    let adam = match r.u8()? {
        0 => None,
        1 => {
            let t = r.u64()?;
            let mut m = Vec::with_capacity(n_params);
            for (_, value) in &params {
                m.push(r.tensor(value.rows, value.cols)?);
            }
            let mut v = Vec::with_capacity(n_params);
            for (_, value) in &params {
                v.push(r.tensor(value.rows, value.cols)?);
            }
            Some(AdamState { t, m, v })
        }
        other => return Err(Error::Format(format!("bad moments flag {other}"))),
    };
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint payload",
            buf.len() - r.pos
        )));
    }
    Ok(Checkpoint { config_text, state, params, adam })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(ckpt))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}
