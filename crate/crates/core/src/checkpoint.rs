//! Versioned binary checkpoints.
//!
//! A checkpoint carries everything needed to continue a run bit-for-bit:
//! the network config snapshot, every store entry (learnable weights and
//! normalization buffers alike) as named 64-bit little-endian blobs, the
//! optimizer moments, the training RNG position, and the epoch counter.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{Model, NetworkConfig};
use crate::tensor::AdamW;

const MAGIC: [u8; 4] = *b"PCKP";
const VERSION: u32 = 1;

/// Exact ChaCha position: seed, word offset, stream id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        RngState { seed: rng.get_seed(), word_pos: rng.get_word_pos(), stream: rng.get_stream() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Adam moments plus the hyperparameters needed to rebuild the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn capture(opt: &AdamW) -> OptimState {
        OptimState {
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            step_count: opt.step_count(),
            m: opt.m.clone(),
            v: opt.v.clone(),
        }
    }

    /// Rebuild the optimizer. Slot sizes must match the model's learnable
    /// parameters in creation order.
    pub fn restore(&self) -> AdamW {
        let sizes: Vec<usize> = self.m.iter().map(|s| s.len()).collect();
        let mut opt = AdamW::new(&sizes, self.lr, self.weight_decay);
        opt.step_count = self.step_count;
        opt.m = self.m.clone();
        opt.v = self.v.clone();
        opt
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlob {
    pub name: String,
    pub learnable: bool,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub epoch: u32,
    pub rng: RngState,
    pub params: Vec<ParamBlob>,
    pub optim: Option<OptimState>,
}

/// First JSON path where two values differ, for mismatch diagnostics.
fn first_difference(a: &serde_json::Value, b: &serde_json::Value, path: &str) -> Option<String> {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(ma), Value::Object(mb)) => {
            let mut keys: Vec<&String> = ma.keys().chain(mb.keys()).collect();
            keys.sort();
            keys.dedup();
            for key in keys {
                let sub = format!("{path}{}{key}", if path.is_empty() { "" } else { "." });
                match (ma.get(key), mb.get(key)) {
                    (Some(x), Some(y)) => {
                        if let Some(hit) = first_difference(x, y, &sub) {
                            return Some(hit);
                        }
                    }
                    _ => return Some(sub),
                }
            }
            None
        }
        (Value::Array(xa), Value::Array(xb)) => {
            if xa.len() != xb.len() {
                return Some(format!("{path} (length {} vs {})", xa.len(), xb.len()));
            }
            for (i, (x, y)) in xa.iter().zip(xb).enumerate() {
                if let Some(hit) = first_difference(x, y, &format!("{path}[{i}]")) {
                    return Some(hit);
                }
            }
            None
        }
        _ => {
            if a == b {
                None
            } else {
                Some(format!("{path} ({a} vs {b})"))
            }
        }
    }
}

impl Checkpoint {
    /// Snapshot a model mid-run.
    pub fn capture(model: &Model, epoch: u32, rng: &ChaCha8Rng, optim: Option<&AdamW>) -> Checkpoint {
        let params = model
            .store
            .entries()
            .iter()
            .map(|e| ParamBlob {
                name: e.name.clone(),
                learnable: e.learnable,
                shape: e.tensor.shape().to_vec(),
                values: e.tensor.data().to_vec(),
            })
            .collect();
        Checkpoint {
            config: model.config.clone(),
            epoch,
            rng: RngState::capture(rng),
            params,
            optim: optim.map(OptimState::capture),
        }
    }

    /// Copy stored values into a freshly built model. The model must have
    /// been built from the same config; every store entry is matched by name
    /// and shape, and the first offender is named on failure.
    pub fn apply(&self, model: &mut Model) -> Result<()> {
        let mine = serde_json::to_value(&self.config).expect("config serializes");
        let theirs = serde_json::to_value(&model.config).expect("config serializes");
        if let Some(path) = first_difference(&mine, &theirs, "") {
            return Err(Error::Data(format!("checkpoint config differs from model at {path}")));
        }
        if self.params.len() != model.store.entries().len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                model.store.entries().len()
            )));
        }
        for (i, blob) in self.params.iter().enumerate() {
            let entry = &model.store.entries()[i];
            if entry.name != blob.name {
                return Err(Error::Data(format!(
                    "parameter order mismatch: checkpoint '{}' vs model '{}'",
                    blob.name, entry.name
                )));
            }
            if entry.tensor.shape() != blob.shape.as_slice() {
                return Err(Error::Data(format!(
                    "shape mismatch for '{}': checkpoint {:?}, model {:?}",
                    blob.name,
                    blob.shape,
                    entry.tensor.shape()
                )));
            }
        }
        for (i, blob) in self.params.iter().enumerate() {
            let id = model
                .store
                .id_by_name(&blob.name)
                .ok_or_else(|| Error::Data(format!("model lacks parameter '{}'", blob.name)))?;
            debug_assert_eq!(id.0, i);
            model.store.set_values(id, &blob.values)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Data(format!("config does not serialize: {e}")))?;
        buf.extend_from_slice(&(config.len() as u64).to_le_bytes());
        buf.extend_from_slice(&config);
        buf.extend_from_slice(&self.epoch.to_le_bytes());
        buf.extend_from_slice(&self.rng.seed);
        buf.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        buf.extend_from_slice(&self.rng.stream.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for blob in &self.params {
            buf.extend_from_slice(&(blob.name.len() as u64).to_le_bytes());
            buf.extend_from_slice(blob.name.as_bytes());
            buf.push(blob.learnable as u8);
            buf.extend_from_slice(&(blob.shape.len() as u64).to_le_bytes());
            for &d in &blob.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &blob.values {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        match &self.optim {
            None => buf.push(0),
            Some(o) => {
                buf.push(1);
                buf.extend_from_slice(&o.lr.to_le_bytes());
                buf.extend_from_slice(&o.weight_decay.to_le_bytes());
                buf.extend_from_slice(&o.step_count.to_le_bytes());
                buf.extend_from_slice(&(o.m.len() as u64).to_le_bytes());
                for (m, v) in o.m.iter().zip(&o.v) {
                    buf.extend_from_slice(&(m.len() as u64).to_le_bytes());
                    for &x in m {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                    for &x in v {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        fs::write(path, &buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let buf = fs::read(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let mut r = ByteReader { buf: &buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Parse { offset: 0, detail: "not a checkpoint file (bad magic)".into() });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Parse {
                offset: 4,
                detail: format!("unsupported checkpoint version {version} (expected {VERSION})"),
            });
        }
        let config_len = r.u64()? as usize;
        let at = r.pos;
        let config_bytes = r.take(config_len)?;
        let config: NetworkConfig = serde_json::from_slice(config_bytes).map_err(|e| Error::Parse {
            offset: at,
            detail: format!("config snapshot does not parse: {e}"),
        })?;
        let epoch = r.u32()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let stream = r.u64()?;
        let n_params = r.u64()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name_len = r.u64()? as usize;
            let at = r.pos;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Parse {
                offset: at,
                detail: "parameter name is not utf-8".into(),
            })?;
            let learnable = r.u8()? != 0;
            let ndims = r.u64()? as usize;
            let mut shape = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                values.push(r.f64()?);
            }
            params.push(ParamBlob { name, learnable, shape, values });
        }
        let optim = if r.u8()? != 0 {
            let lr = r.f64()?;
            let weight_decay = r.f64()?;
            let step_count = r.u64()?;
            let slots = r.u64()? as usize;
            let mut m = Vec::with_capacity(slots);
            let mut v = Vec::with_capacity(slots);
            for _ in 0..slots {
                let len = r.u64()? as usize;
                let mut ms = Vec::with_capacity(len);
                for _ in 0..len {
                    ms.push(r.f64()?);
                }
                let mut vs = Vec::with_capacity(len);
                for _ in 0..len {
                    vs.push(r.f64()?);
                }
                m.push(ms);
                v.push(vs);
            }
            Some(OptimState { lr, weight_decay, step_count, m, v })
        } else {
            None
        };
        Ok(Checkpoint {
            config,
            epoch,
            rng: RngState { seed, word_pos, stream },
            params,
            optim,
        })
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse {
                offset: self.pos,
                detail: format!("file truncated ({} bytes needed, {} left)", n, self.buf.len() - self.pos),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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
}
