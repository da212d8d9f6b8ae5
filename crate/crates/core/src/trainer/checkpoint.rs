//! `DGCK` checkpoint encoding.
//!
//! The JSON header lists every tensor record in file order. Records are
//! named `<dir>.<param>`, `<dir>.adam_m.<param>` and `<dir>.adam_v.<param>`
//! with `<dir>` one of `va` (V→A) or `av` (A→V).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, Checkpoint, Direction, TrainConfig};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::Result;
use crate::format::{put_tensor, put_u32, read_tensor, FormatError, Reader};
use crate::schedule::ScheduleParams;
use crate::tape::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    denoiser_va: DenoiserConfig,
    denoiser_av: DenoiserConfig,
    schedule: ScheduleParams,
    train: TrainConfig,
    iteration: u64,
    direction: Direction,
    toggles: u64,
    adam_t_va: u64,
    adam_t_av: u64,
    tensors: Vec<String>,
}

fn record_names(prefix: &str, cfg: &DenoiserConfig) -> Vec<String> {
    let params: Vec<String> = (0..cfg.layer_shapes().len())
        .flat_map(|i| {
            let (w, b) = crate::denoiser::layer_param_names(i);
            [w, b]
        })
        .collect();
    let mut out = Vec::with_capacity(3 * params.len());
    out.extend(params.iter().map(|p| format!("{prefix}.{p}")));
    out.extend(params.iter().map(|p| format!("{prefix}.adam_m.{p}")));
    out.extend(params.iter().map(|p| format!("{prefix}.adam_v.{p}")));
    out
}

fn expected_names(va: &DenoiserConfig, av: &DenoiserConfig) -> Vec<String> {
    let mut n = record_names("va", va);
    n.extend(record_names("av", av));
    n
}

fn net_tensors<'a>(net: &'a Denoiser, adam: &'a AdamState) -> impl Iterator<Item = &'a Tensor> {
    let p = net.params();
    p.ids().map(move |id| p.value(id)).chain(adam.m.iter()).chain(adam.v.iter())
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let (va_cfg, av_cfg) = (*ck.va.config(), *ck.av.config());
    let tensors = expected_names(&va_cfg, &av_cfg);
    let header = Header {
        denoiser_va: va_cfg,
        denoiser_av: av_cfg,
        schedule: ck.train.schedule,
        train: ck.train,
        iteration: ck.iteration,
        direction: ck.direction,
        toggles: ck.toggles,
        adam_t_va: ck.adam_va.t,
        adam_t_av: ck.adam_av.t,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| FormatError::Header(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    let values = net_tensors(&ck.va, &ck.adam_va).chain(net_tensors(&ck.av, &ck.adam_av));
    for (name, t) in header.tensors.iter().zip(values) {
        put_tensor(&mut out, name, t)?;
    }
    Ok(out)
}

fn read_net(
    r: &mut Reader<'_>,
    names: &mut std::slice::Iter<'_, String>,
    cfg: DenoiserConfig,
    adam_t: u64,
) -> Result<(Denoiser, AdamState)> {
    let count = 2 * cfg.layer_shapes().len();
    let mut next = |r: &mut Reader<'_>| -> Result<(String, Tensor)> {
        let want = names.next().expect("name list matches layout");
        let (name, t) = read_tensor(r, &format!("tensor {want}"))?;
        if &name != want {
            return Err(FormatError::Invalid(format!("expected tensor {want}, found {name}")).into());
        }
        Ok((name, t))
    };
    let mut params = ParamStore::new();
    for _ in 0..count {
        let (name, t) = next(r)?;
        let short = name.split_once('.').map_or(name.as_str(), |(_, s)| s);
        params.add(short, t);
    }
    let mut m = Vec::with_capacity(count);
    for _ in 0..count {
        m.push(next(r)?.1);
    }
    let mut v = Vec::with_capacity(count);
    for _ in 0..count {
        v.push(next(r)?.1);
    }
    let net = Denoiser::from_params(cfg, params)?;
    let p = net.params();
    for (k, id) in p.ids().enumerate() {
        if m[k].shape() != p.value(id).shape() || v[k].shape() != p.value(id).shape() {
            return Err(FormatError::Invalid(format!("adam moments for {} have the wrong shape", p.name(id))).into());
        }
    }
    Ok((net, AdamState { t: adam_t, m, v }))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        }
        .into());
    }
    let len = r.u32("header length")? as usize;
    let json = r.take(len, "header")?;
    let h: Header = serde_json::from_slice(json).map_err(|e| FormatError::Header(e.to_string()))?;
    if h.schedule != h.train.schedule {
        return Err(FormatError::Header("schedule disagrees with training config".into()).into());
    }
    if h.tensors != expected_names(&h.denoiser_va, &h.denoiser_av) {
        return Err(FormatError::Header("tensor list does not match the denoiser configs".into()).into());
    }
    let mut names = h.tensors.iter();
    let (va, adam_va) = read_net(&mut r, &mut names, h.denoiser_va, h.adam_t_va)?;
    let (av, adam_av) = read_net(&mut r, &mut names, h.denoiser_av, h.adam_t_av)?;
    r.finish()?;
    Ok(Checkpoint {
        train: h.train,
        iteration: h.iteration,
        direction: h.direction,
        toggles: h.toggles,
        va,
        av,
        adam_va,
        adam_av,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    fs::write(path, bytes).map_err(|e| FormatError::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| FormatError::io(path, e))?;
    decode_checkpoint(&bytes)
}
