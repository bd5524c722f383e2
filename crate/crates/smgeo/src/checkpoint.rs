//! Binary checkpoints: `SMGEOCK1`, a little-endian u64 header length, a JSON
//! header, then every tensor as little-endian f64 in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use smgeo_core::model::{Model, ModelState};
use smgeo_core::optim::Adam;

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SMGEOCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    AdamM,
    AdamV,
    BnMean,
    BnVar,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    group: Group,
    name: String,
    shape: Vec<usize>,
}

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self.word_pos.parse().map_err(|_| Error::Validation(format!("bad RNG position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config_hash: String,
    config: RunConfig,
    epoch: usize,
    step: u64,
    adam_step: u64,
    best_val_acc25: Option<f64>,
    rng: RngState,
    blobs: Vec<BlobEntry>,
}

/// Everything needed to resume training or serve a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: ModelState,
    pub optimizer: Adam,
    pub rng: RngState,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub best_val_acc25: Option<f64>,
}

impl Checkpoint {
    /// A fresh model and optimizer for `config`.
    pub fn initial(config: &RunConfig) -> Result<(Model, Self)> {
        let (model, state) = Model::new(&config.model, config.seed)?;
        let optimizer = Adam::new(config.optimizer.adam(), &state.params);
        let rng = RngState::capture(&ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a));
        let ck = Self { config: config.clone(), state, optimizer, rng, epoch: 0, step: 0, best_val_acc25: None };
        Ok((model, ck))
    }

    pub fn model(&self) -> Result<Model> {
        Ok(Model::new(&self.config.model, self.config.seed)?.0)
    }

    /// Refuses to continue a run whose settings differ from `cfg`.
    pub fn ensure_compatible(&self, cfg: &RunConfig) -> Result<()> {
        let (a, b) = (self.config.hash(), cfg.hash());
        if a != b {
            return Err(Error::Config(format!("checkpoint config hash {a} does not match run config hash {b}")));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blobs = Vec::new();
        let mut data: Vec<&[f64]> = Vec::new();
        for (i, (_, name, t)) in self.state.params.iter().enumerate() {
            for (group, values) in [(Group::Param, t.data()), (Group::AdamM, &self.optimizer.m[i][..]), (Group::AdamV, &self.optimizer.v[i][..])] {
                blobs.push(BlobEntry { group, name: name.to_string(), shape: t.shape().to_vec() });
                data.push(values);
            }
        }
        for (i, rs) in self.state.bn.iter().enumerate() {
            for (group, values) in [(Group::BnMean, &rs.mean), (Group::BnVar, &rs.var)] {
                blobs.push(BlobEntry { group, name: format!("bn{i}"), shape: vec![values.len()] });
                data.push(values);
            }
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            adam_step: self.optimizer.step,
            best_val_acc25: self.best_val_acc25,
            rng: self.rng.clone(),
            blobs,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * data.iter().map(|d| d.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for d in data {
            for v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header".into()))?;
        let version = serde_json::from_slice::<serde_json::Value>(body)
            .map_err(|e| bad(e.to_string()))?
            .get("version")
            .and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(bad(format!("schema version {version:?}, expected {CHECKPOINT_VERSION}")));
        }
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
        if header.config.hash() != header.config_hash {
            return Err(bad("stored config does not match its hash".into()));
        }
        let mut payload = &bytes[16 + hlen..];
        let mut take = |n: usize| -> Result<Vec<f64>> {
            if payload.len() < 8 * n {
                return Err(bad("truncated tensor data".into()));
            }
            let (head, rest) = payload.split_at(8 * n);
            payload = rest;
            Ok(head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
        };

        let (_, mut state) = Model::new(&header.config.model, header.config.seed)?;
        let mut optimizer = Adam::new(header.config.optimizer.adam(), &state.params);
        optimizer.step = header.adam_step;
        let names: Vec<String> = state.params.iter().map(|(_, n, _)| n.to_string()).collect();
        let mut seen = vec![[false; 3]; names.len()];
        let mut bn_seen = vec![[false; 2]; state.bn.len()];
        for entry in &header.blobs {
            let values = take(entry.shape.iter().product())?;
            let unknown = || bad(format!("unexpected tensor {:?} {}", entry.group, entry.name));
            let (slot, g) = match entry.group {
                Group::BnMean | Group::BnVar => {
                    let i: usize = entry.name.strip_prefix("bn").and_then(|s| s.parse().ok()).ok_or_else(unknown)?;
                    let rs = state.bn.get_mut(i).ok_or_else(unknown)?;
                    let (dst, g) = if entry.group == Group::BnMean { (&mut rs.mean, 0) } else { (&mut rs.var, 1) };
                    if dst.len() != values.len() {
                        return Err(bad(format!("tensor {} has {} values, expected {}", entry.name, values.len(), dst.len())));
                    }
                    *dst = values;
                    bn_seen[i][g] = true;
                    continue;
                }
                Group::Param => (names.iter().position(|n| *n == entry.name).ok_or_else(unknown)?, 0),
                Group::AdamM => (names.iter().position(|n| *n == entry.name).ok_or_else(unknown)?, 1),
                Group::AdamV => (names.iter().position(|n| *n == entry.name).ok_or_else(unknown)?, 2),
            };
            let expect = state.params.tensors_mut()[slot].shape().to_vec();
            if entry.shape != expect {
                return Err(bad(format!("tensor {} has shape {:?}, expected {expect:?}", entry.name, entry.shape)));
            }
            match g {
                0 => state.params.tensors_mut()[slot].data_mut().copy_from_slice(&values),
                1 => optimizer.m[slot] = values,
                _ => optimizer.v[slot] = values,
            }
            seen[slot][g] = true;
        }
        if !payload.is_empty() {
            return Err(bad(format!("{} trailing bytes", payload.len())));
        }
        if let Some(i) = seen.iter().position(|s| s.contains(&false)) {
            return Err(bad(format!("tensor {} is missing", names[i])));
        }
        if bn_seen.iter().any(|s| s.contains(&false)) {
            return Err(bad("batch-norm statistics are missing".into()));
        }
        Ok(Self {
            config: header.config,
            state,
            optimizer,
            rng: header.rng,
            epoch: header.epoch,
            step: header.step,
            best_val_acc25: header.best_val_acc25,
        })
    }

    /// Writes through a temporary file so an interrupted save leaves the old file intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
