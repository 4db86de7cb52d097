//! `IDMC` checkpoint files.
//!
//! ```text
//! "IDMC" | u32 version | u64 header_len | header JSON
//! repeat: u64 name_len | name | u64 rank | u64 dims[rank] | f32 data[..]
//! ```
//!
//! All integers and floats are little-endian. Optimizer moments, when
//! present, follow the parameters as tensors named `adam.m/<name>` and
//! `adam.v/<name>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DenoiserConfig, UNet};
use crate::error::{Error, Result};
use crate::imaging::RngStream;
use crate::nn::Tensor;
use crate::schedule::ScheduleConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IDMC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// First and second moment estimates plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn zeros_like(params: &[Vec<f32>]) -> Self {
        let z: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            step: 0,
            m: z.clone(),
            v: z,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserCheckpoint {
    pub config: DenoiserConfig,
    pub schedule: ScheduleConfig,
    /// 0 for a model trained on the original corpus, 1 after one extrinsic round.
    pub training_round: u32,
    pub step_count: u64,
    pub rng_seed: u64,
    pub params: Vec<Vec<f32>>,
    pub optimizer: Option<AdamState>,
    net: UNet,
}

impl PartialEq for DenoiserCheckpoint {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.schedule == other.schedule
            && self.training_round == other.training_round
            && self.step_count == other.step_count
            && self.rng_seed == other.rng_seed
            && bits_equal(&self.params, &other.params)
            && match (&self.optimizer, &other.optimizer) {
                (None, None) => true,
                (Some(a), Some(b)) => a.step == b.step && bits_equal(&a.m, &b.m) && bits_equal(&a.v, &b.v),
                _ => false,
            }
    }
}

fn bits_equal(a: &[Vec<f32>], b: &[Vec<f32>]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: DenoiserConfig,
    schedule: ScheduleConfig,
    training_round: u32,
    step_count: u64,
    rng_seed: u64,
    param_count: usize,
    optimizer_step: Option<u64>,
    tool_version: String,
}

/// Fresh round-0 checkpoint with the default schedule.
pub fn init_denoiser(config: &DenoiserConfig, rng: RngStream) -> Result<DenoiserCheckpoint> {
    DenoiserCheckpoint::init(config, &ScheduleConfig::default(), rng)
}

impl DenoiserCheckpoint {
    pub fn init(config: &DenoiserConfig, schedule: &ScheduleConfig, rng: RngStream) -> Result<Self> {
        let net = UNet::new(config)?;
        let params = net.init_params(rng);
        Ok(Self {
            config: config.clone(),
            schedule: schedule.clone(),
            training_round: 0,
            step_count: 0,
            rng_seed: rng.seed,
            params,
            optimizer: None,
            net,
        })
    }

    pub fn net(&self) -> &UNet {
        &self.net
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().flatten().all(|v| v.is_finite())
    }

    pub fn predict(&self, noisy: &Tensor<f32>, cond: &Tensor<f32>, gammas: &[f64]) -> Result<Tensor<f32>> {
        self.net.predict(&self.params, noisy, cond, gammas)
    }

    /// Short content hash, used to tag corpora enhanced by this model.
    pub fn id(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        hex::encode(&digest[..8])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            training_round: self.training_round,
            step_count: self.step_count,
            rng_seed: self.rng_seed,
            param_count: self.param_count(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.param_count() * 3);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let specs = self.net.param_specs();
        let mut put = |name: &str, shape: &[usize], data: &[f32]| {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (spec, p) in specs.iter().zip(&self.params) {
            put(&spec.name, &spec.shape, p);
        }
        if let Some(opt) = &self.optimizer {
            for (spec, m) in specs.iter().zip(&opt.m) {
                put(&format!("adam.m/{}", spec.name), &spec.shape, m);
            }
            for (spec, v) in specs.iter().zip(&opt.v) {
                put(&format!("adam.v/{}", spec.name), &spec.shape, v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic, not an IDMC checkpoint".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let net = UNet::new(&header.config)?;
        let specs = net.param_specs();
        if header.param_count != net.param_count() {
            return Err(Error::Checkpoint(format!(
                "header declares {} parameters, config implies {}",
                header.param_count,
                net.param_count()
            )));
        }
        let mut read_set = |prefix: &str| -> Result<Vec<Vec<f32>>> {
            specs
                .iter()
                .map(|spec| {
                    let expect = format!("{prefix}{}", spec.name);
                    let (name, shape, data) = r.tensor()?;
                    if name != expect || shape != spec.shape {
                        return Err(Error::Checkpoint(format!(
                            "expected tensor {expect} {:?}, found {name} {shape:?}",
                            spec.shape
                        )));
                    }
                    Ok(data)
                })
                .collect()
        };
        let params = read_set("")?;
        let optimizer = match header.optimizer_step {
            Some(step) => Some(AdamState {
                step,
                m: read_set("adam.m/")?,
                v: read_set("adam.v/")?,
            }),
            None => None,
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let ckpt = Self {
            config: header.config,
            schedule: header.schedule,
            training_round: header.training_round,
            step_count: header.step_count,
            rng_seed: header.rng_seed,
            params,
            optimizer,
            net,
        };
        if !ckpt.all_finite() {
            return Err(Error::Checkpoint("checkpoint contains non-finite parameters".into()));
        }
        Ok(ckpt)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let nlen = self.u64()? as usize;
        let name = String::from_utf8(self.take(nlen)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = self.u64()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {rank} for {name}")));
        }
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = self.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, shape, data))
    }
}

pub fn write_checkpoint(ckpt: &DenoiserCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("partial");
    fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<DenoiserCheckpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    DenoiserCheckpoint::from_bytes(&bytes)
}
