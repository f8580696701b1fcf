//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `VILUCKPT`, the header length as a little-endian
//! `u64`, a JSON header, then every tensor's little-endian payload at the
//! byte offset the header lists (relative to the start of the payload).

use std::path::Path;

use serde::{Deserialize, Serialize};
use vilu_core::net::{NetworkConfig, VilUNet};
use vilu_core::nn::ParamStore;
use vilu_core::train::{AdamState, TrainConfig, TrainState, Trainer};
use vilu_core::Scalar;

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"VILUCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub dtype: String,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub epoch: usize,
    pub adam_step: u64,
    pub best_val_dsc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub tensors: Vec<TensorEntry>,
}

fn payload<S: Scalar>(values: &[S], out: &mut Vec<u8>) {
    for &v in values {
        v.write_le(out);
    }
}

/// Serialises the trainer's network, parameters and optimizer state.
pub fn to_bytes<S: Scalar>(t: &Trainer<S>) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut body = Vec::new();
    let mut push = |name: String, shape: &[usize], values: &[S]| {
        let offset = body.len() as u64;
        payload(values, &mut body);
        tensors.push(TensorEntry {
            name,
            shape: shape.to_vec(),
            dtype: S::DTYPE.into(),
            offset,
            nbytes: body.len() as u64 - offset,
        });
    };
    for p in t.store.iter() {
        push(format!("param/{}", p.name), p.tensor.shape(), p.tensor.data());
    }
    for (p, m) in t.store.iter().zip(&t.state.adam.m) {
        push(format!("adam.m/{}", p.name), p.tensor.shape(), m);
    }
    for (p, v) in t.store.iter().zip(&t.state.adam.v) {
        push(format!("adam.v/{}", p.name), p.tensor.shape(), v);
    }
    let header = Header {
        version: VERSION,
        dtype: S::DTYPE.into(),
        network: t.net.config().clone(),
        train: t.cfg.clone(),
        step: t.state.step,
        epoch: t.state.epoch,
        adam_step: t.state.adam.step,
        best_val_dsc: t.state.best_val_dsc,
        best_epoch: t.state.best_epoch,
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(16 + json.len() + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&body);
    out
}

/// Writes through a temporary file and a rename, so an interrupted write
/// never replaces the previous checkpoint.
pub fn save<S: Scalar>(path: &Path, t: &Trainer<S>) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, to_bytes(t)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn split(bytes: &[u8], path: &Path) -> Result<(Header, usize)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a vilu checkpoint"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Truncated {
            path: path.into(),
            expected: 16 + len,
            found: bytes.len(),
        })?;
    let header: Header = serde_json::from_slice(json).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    if header.version != VERSION {
        return Err(Error::format(path, format!("checkpoint version {} (expected {VERSION})", header.version)));
    }
    Ok((header, 16 + len))
}

/// Header only, e.g. to choose the precision before loading.
pub fn read_header(path: &Path) -> Result<Header> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split(&bytes, path)?.0)
}

pub fn from_bytes<S: Scalar>(bytes: &[u8], path: &Path) -> Result<Trainer<S>> {
    let (header, start) = split(bytes, path)?;
    let body = &bytes[start..];
    if header.dtype != S::DTYPE {
        return Err(vilu_core::Error::Checkpoint(format!(
            "checkpoint holds {} tensors, {} requested",
            header.dtype,
            S::DTYPE
        ))
        .into());
    }
    let mut store = ParamStore::<S>::new(header.train.seed);
    let net = VilUNet::new(header.network.clone(), &mut store)?;
    let read = |name: &str, shape: &[usize]| -> Result<Vec<S>> {
        let e = header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| vilu_core::Error::Checkpoint(format!("{name}: missing")))?;
        if e.shape != shape {
            return Err(vilu_core::Error::Checkpoint(format!("{name}: {:?} vs {:?}", shape, e.shape)).into());
        }
        let n: usize = shape.iter().product();
        let (a, b) = (e.offset as usize, e.offset as usize + n * S::BYTES);
        if e.nbytes as usize != n * S::BYTES || b > body.len() {
            return Err(Error::Truncated {
                path: path.into(),
                expected: start + b,
                found: bytes.len(),
            });
        }
        Ok(body[a..b].chunks_exact(S::BYTES).map(S::read_le).collect())
    };
    let mut diffs = Vec::new();
    let expected = 3 * store.len();
    if header.tensors.len() != expected {
        diffs.push(format!("{} tensors, network needs {expected}", header.tensors.len()));
    }
    let mut m = Vec::with_capacity(store.len());
    let mut v = Vec::with_capacity(store.len());
    for p in store.iter_mut() {
        let shape = p.tensor.shape().to_vec();
        match (
            read(&format!("param/{}", p.name), &shape),
            read(&format!("adam.m/{}", p.name), &shape),
            read(&format!("adam.v/{}", p.name), &shape),
        ) {
            (Ok(w), Ok(mm), Ok(vv)) => {
                p.tensor.data_mut().copy_from_slice(&w);
                m.push(mm);
                v.push(vv);
            }
            (a, b, c) => {
                for r in [a.err(), b.err(), c.err()].into_iter().flatten() {
                    match r {
                        Error::Core(vilu_core::Error::Checkpoint(d)) => diffs.push(d),
                        other => return Err(other),
                    }
                }
            }
        }
    }
    if !diffs.is_empty() {
        return Err(vilu_core::Error::Checkpoint(diffs.join("; ")).into());
    }
    let state = TrainState {
        step: header.step,
        epoch: header.epoch,
        adam: AdamState {
            step: header.adam_step,
            m,
            v,
        },
        best_val_dsc: header.best_val_dsc,
        best_epoch: header.best_epoch,
    };
    Ok(Trainer::from_parts(net, store, header.train, state)?)
}

pub fn load<S: Scalar>(path: &Path) -> Result<Trainer<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

/// Fails with the list of shape differences when `cfg` does not describe
/// the checkpointed network.
pub fn check_network(header: &Header, cfg: &NetworkConfig) -> Result<()> {
    if &header.network == cfg {
        return Ok(());
    }
    let mut store = ParamStore::<f32>::new(0);
    VilUNet::new(cfg.clone(), &mut store)?;
    let mut diffs = Vec::new();
    for p in store.iter() {
        match header.tensors.iter().find(|e| e.name == format!("param/{}", p.name)) {
            None => diffs.push(format!("{}: missing from checkpoint", p.name)),
            Some(e) if e.shape != p.tensor.shape() => diffs.push(format!("{}: {:?} vs {:?}", p.name, p.tensor.shape(), e.shape)),
            _ => {}
        }
    }
    for e in header.tensors.iter().filter(|e| e.name.starts_with("param/")) {
        if store.by_name(&e.name["param/".len()..]).is_none() {
            diffs.push(format!("{}: not in configured network", &e.name["param/".len()..]));
        }
    }
    if diffs.is_empty() {
        diffs.push("network configuration differs with identical tensor shapes".into());
    }
    Err(vilu_core::Error::Checkpoint(diffs.join("; ")).into())
}
