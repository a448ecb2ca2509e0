//! Training checkpoints.
//!
//! Layout (integers little-endian):
//!
//! | offset | size | field                                        |
//! |--------|------|----------------------------------------------|
//! | 0      | 4    | magic `b"RFCK"`                              |
//! | 4      | 2    | format version, currently 1                  |
//! | 6      | 8    | header length `n` as u64                     |
//! | 14     | n    | UTF-8 JSON header                            |
//! | 14+n   | rest | f32 payload: parameters, EMA shadow, first   |
//! |        |      | moments, second moments, each in tensor order |
//!
//! The header lists every tensor's name, kind and shape together with the
//! resolved config, its fingerprint, the step counter, the generator state,
//! the best validation CSI-M and the recorded loss history.

use std::fs;
use std::path::Path;

use rfcast_autodiff::{ParamKind, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::train::{AdamW, RngState, StepRecord, ValRecord};

pub const MAGIC: [u8; 4] = *b"RFCK";
pub const VERSION: u16 = 1;
const GROUPS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    kind: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    fingerprint: String,
    step: u64,
    adam_t: u64,
    best_csi_m: Option<f64>,
    rng: RngState,
    tensors: Vec<TensorMeta>,
    history: Vec<StepRecord>,
    validation: Vec<ValRecord>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub fingerprint: String,
    pub step: u64,
    pub best_csi_m: Option<f64>,
    pub rng: RngState,
    pub params: ParamStore<f32>,
    pub ema: ParamStore<f32>,
    pub opt: AdamW,
    pub history: Vec<StepRecord>,
    pub validation: Vec<ValRecord>,
}

fn same_layout(a: &ParamStore<f32>, b: &ParamStore<f32>) -> bool {
    a.len() == b.len()
        && a.entries().iter().zip(b.entries()).all(|(x, y)| x.name == y.name && x.kind == y.kind && x.value().shape() == y.value().shape())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.params.len();
        if !same_layout(&self.params, &self.ema) || self.opt.m.len() != n || self.opt.v.len() != n {
            return Err(Error::Invalid("checkpoint parts disagree on the parameter layout".into()));
        }
        let tensors = self
            .params
            .entries()
            .iter()
            .map(|e| TensorMeta { name: e.name.clone(), kind: e.kind.as_str().into(), shape: e.value().shape().to_vec() })
            .collect();
        let header = Header {
            config: self.config.clone(),
            fingerprint: self.fingerprint.clone(),
            step: self.step,
            adam_t: self.opt.t,
            best_csi_m: self.best_csi_m,
            rng: self.rng.clone(),
            tensors,
            history: self.history.clone(),
            validation: self.validation.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(14 + json.len() + GROUPS * 4 * self.params.num_trainable());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let groups: [Vec<&Tensor<f32>>; GROUPS] = [
            self.params.entries().iter().map(|e| e.value()).collect(),
            self.ema.entries().iter().map(|e| e.value()).collect(),
            self.opt.m.iter().collect(),
            self.opt.v.iter().collect(),
        ];
        for group in &groups {
            for (t, e) in group.iter().zip(self.params.entries()) {
                if t.shape() != e.value().shape() {
                    return Err(Error::Shape(format!("state of {} has shape {:?}", e.name, t.shape())));
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 14 || bytes[..4] != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes")) as usize;
        let body = &bytes[14..];
        if body.len() < hlen {
            return Err(Error::format(path, "truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        let mut payload = &body[hlen..];
        let numel: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if payload.len() != GROUPS * 4 * numel {
            return Err(Error::format(path, format!("payload holds {} bytes, expected {}", payload.len(), GROUPS * 4 * numel)));
        }
        let mut read_group = || -> Vec<Tensor<f32>> {
            header
                .tensors
                .iter()
                .map(|t| {
                    let n: usize = t.shape.iter().product();
                    let (head, rest) = payload.split_at(4 * n);
                    payload = rest;
                    let data = head.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                    Tensor::new(t.shape.clone(), data)
                })
                .collect()
        };
        let groups: Vec<Vec<Tensor<f32>>> = (0..GROUPS).map(|_| read_group()).collect();
        let mut stores = Vec::new();
        for g in &groups[..2] {
            let mut store = ParamStore::new();
            for (meta, t) in header.tensors.iter().zip(g) {
                let kind = ParamKind::parse(&meta.kind).ok_or_else(|| Error::format(path, format!("unknown kind {:?}", meta.kind)))?;
                store.add(meta.name.clone(), t.clone(), kind);
            }
            stores.push(store);
        }
        let ema = stores.pop().expect("two stores");
        let params = stores.pop().expect("two stores");
        let mut groups = groups.into_iter().skip(2);
        let opt = AdamW { m: groups.next().expect("moments"), v: groups.next().expect("moments"), t: header.adam_t };
        Ok(Self {
            config: header.config,
            fingerprint: header.fingerprint,
            step: header.step,
            best_csi_m: header.best_csi_m,
            rng: header.rng,
            params,
            ema,
            opt,
            history: header.history,
            validation: header.validation,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        // write then rename so a crash never leaves a half-written checkpoint
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Loads and checks that the stored fingerprint matches the embedded config.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt = Self::from_bytes(&bytes, path)?;
        let expected = ckpt.config.fingerprint();
        if ckpt.fingerprint != expected {
            return Err(Error::Fingerprint { expected, found: ckpt.fingerprint });
        }
        Ok(ckpt)
    }

    /// Rejects a checkpoint trained under a different config.
    pub fn check_config(&self, config: &RunConfig) -> Result<()> {
        let expected = config.fingerprint();
        if self.fingerprint != expected {
            return Err(Error::Fingerprint { expected, found: self.fingerprint.clone() });
        }
        Ok(())
    }

    /// Confirms the stored tensors fit the layout of `reference` (a freshly built model store).
    pub fn check_layout(&self, reference: &ParamStore<f32>) -> Result<()> {
        if !same_layout(&self.params, reference) {
            return Err(Error::Invalid("checkpoint tensors do not match the model built from its config".into()));
        }
        Ok(())
    }
}
