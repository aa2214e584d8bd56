//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` version, then sections in fixed order, each
//! a 4-byte tag, a `u64` payload length and the payload. All integers and
//! floats are little-endian.
//!
//! | tag    | payload                                                  |
//! |--------|----------------------------------------------------------|
//! | `CONF` | JSON `{"model": ModelConfig, "train": TrainConfig}`      |
//! | `HASH` | sha256 of the `CONF` payload                             |
//! | `PARM` | parameter arrays                                         |
//! | `ADM1` | first optimizer moments, same layout as `PARM`           |
//! | `ADM2` | second optimizer moments                                 |
//! | `CNTR` | JSON counters: epoch, step, optimizer steps, history     |
//! | `RNGS` | JSON shuffle-stream state: seed and next epoch           |
//!
//! An array block is a `u32` count followed by, per array, a `u16` name
//! length, the UTF-8 name, a `u8` rank, `u64` dims and the `f64` values.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, Result};
use crate::model::{HydraVit, ModelConfig};
use crate::optim::Adam;
use crate::params::Parameters;
use crate::train::{EpochMetrics, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"HYDRAVIT";
pub const VERSION: u32 = 1;
const SECTIONS: [&str; 7] = ["CONF", "HASH", "PARM", "ADM1", "ADM2", "CNTR", "RNGS"];

#[derive(Serialize, Deserialize)]
struct ConfigSection {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct Counters {
    epoch: usize,
    step: u64,
    optimizer_steps: u64,
    best_val_auc: Option<f64>,
    history: Vec<EpochMetrics>,
}

#[derive(Serialize, Deserialize)]
struct RngSection {
    seed: u64,
    next_epoch: usize,
}

fn encode_arrays<P: Parameters>(p: &P) -> Vec<u8> {
    let params = p.params();
    let mut out = Vec::new();
    out.extend((params.len() as u32).to_le_bytes());
    for a in params {
        out.extend((a.name.len() as u16).to_le_bytes());
        out.extend(a.name.as_bytes());
        out.push(a.shape.len() as u8);
        for &d in &a.shape {
            out.extend((d as u64).to_le_bytes());
        }
        for &v in a.data {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                section: self.section.to_string(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn malformed(section: &str, message: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed {
        section: section.to_string(),
        message: message.into(),
    }
}

fn decode_arrays(
    payload: &[u8],
    section: &'static str,
) -> std::result::Result<BTreeMap<String, Array>, CheckpointError> {
    let mut c = Cursor {
        buf: payload,
        pos: 0,
        section,
    };
    let count = c.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| malformed(section, "parameter name is not UTF-8"))?
            .to_string();
        let rank = c.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = c.take(n.checked_mul(8).ok_or_else(|| malformed(section, "array too large"))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.insert(name, Array { shape, data });
    }
    if c.pos != payload.len() {
        return Err(malformed(section, "trailing bytes"));
    }
    Ok(out)
}

fn restore<P: Parameters>(
    target: &mut P,
    arrays: &BTreeMap<String, Array>,
) -> std::result::Result<(), CheckpointError> {
    for p in target.params_mut() {
        let a = arrays
            .get(&p.name)
            .ok_or_else(|| CheckpointError::MissingParameter(p.name.clone()))?;
        if a.shape != p.shape {
            return Err(CheckpointError::ShapeMismatch {
                name: p.name.clone(),
                found: a.shape.clone(),
                expected: p.shape.clone(),
            });
        }
        p.data.copy_from_slice(&a.data);
    }
    Ok(())
}

pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> Result<String> {
    let json = serde_json::to_vec(&ConfigSection {
        model: model.clone(),
        train: train.clone(),
    })?;
    Ok(hex::encode(Sha256::digest(&json)))
}

/// Serializes `state` to bytes.
pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let conf = serde_json::to_vec(&ConfigSection {
        model: state.model.config.clone(),
        train: state.config.clone(),
    })?;
    let hash = Sha256::digest(&conf).to_vec();
    let counters = serde_json::to_vec(&Counters {
        epoch: state.epoch,
        step: state.step,
        optimizer_steps: state.optimizer.steps,
        best_val_auc: state.best_val_auc,
        history: state.history.clone(),
    })?;
    let rng = serde_json::to_vec(&RngSection {
        seed: state.config.seed,
        next_epoch: state.epoch,
    })?;
    let payloads = [
        conf,
        hash,
        encode_arrays(&state.model),
        encode_arrays(&state.optimizer.first),
        encode_arrays(&state.optimizer.second),
        counters,
        rng,
    ];
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    for (tag, payload) in SECTIONS.iter().zip(&payloads) {
        out.extend(tag.as_bytes());
        out.extend((payload.len() as u64).to_le_bytes());
        out.extend(payload);
    }
    Ok(out)
}

/// Writes atomically: the bytes go to a sibling temporary file which is
/// then renamed over `path`.
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn split_sections(bytes: &[u8]) -> std::result::Result<Vec<&[u8]>, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut c = Cursor {
        buf: bytes,
        pos: MAGIC.len(),
        section: "header",
    };
    let version = c.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let mut out = Vec::with_capacity(SECTIONS.len());
    for tag in SECTIONS {
        c.section = tag;
        let found = c.take(4)?;
        if found != tag.as_bytes() {
            return Err(malformed(
                tag,
                format!("found tag {:?}", String::from_utf8_lossy(found)),
            ));
        }
        let len = c.u64()? as usize;
        out.push(c.take(len)?);
    }
    Ok(out)
}

/// Decodes a checkpoint into a state built from `model_config` when given,
/// or from the stored configuration otherwise.
pub fn decode_checkpoint(bytes: &[u8], model_config: Option<&ModelConfig>) -> Result<TrainState> {
    let sections = split_sections(bytes)?;
    let conf: ConfigSection = serde_json::from_slice(sections[0]).map_err(|e| malformed("CONF", e.to_string()))?;
    if Sha256::digest(sections[0]).as_slice() != sections[1] {
        return Err(malformed("HASH", "configuration hash does not match").into());
    }
    let config = model_config.cloned().unwrap_or(conf.model);
    let classes = config.classes;
    // Parameters are overwritten below; counts only need to be valid.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = HydraVit::new(&config, &vec![1; classes], classes, &mut rng)?;
    restore(&mut model, &decode_arrays(sections[2], "PARM")?)?;
    let mut optimizer = Adam::new(conf.train.adam(), &model);
    restore(&mut optimizer.first, &decode_arrays(sections[3], "ADM1")?)?;
    restore(&mut optimizer.second, &decode_arrays(sections[4], "ADM2")?)?;
    let counters: Counters = serde_json::from_slice(sections[5]).map_err(|e| malformed("CNTR", e.to_string()))?;
    let rng: RngSection = serde_json::from_slice(sections[6]).map_err(|e| malformed("RNGS", e.to_string()))?;
    if rng.seed != conf.train.seed || rng.next_epoch != counters.epoch {
        return Err(malformed("RNGS", "shuffle state disagrees with counters").into());
    }
    optimizer.steps = counters.optimizer_steps;
    Ok(TrainState {
        config: conf.train,
        model,
        optimizer,
        epoch: counters.epoch,
        step: counters.step,
        history: counters.history,
        best_val_auc: counters.best_val_auc,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&std::fs::read(path)?, None)
}

/// Loads parameters into a model of `config`; any shape disagreement is
/// reported against the parameter name.
pub fn load_checkpoint_for(path: &Path, config: &ModelConfig) -> Result<TrainState> {
    decode_checkpoint(&std::fs::read(path)?, Some(config))
}
