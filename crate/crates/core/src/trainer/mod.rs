//! Bidirectional split training of the two conditional denoisers.
//!
//! One denoiser generates modality A from V, the other V from A. Training
//! starts on the V→A network and hands over to the other one after every
//! `interval` iterations, counting iterations globally.

mod checkpoint;

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Modality, PairedCorpus};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::diffusion_loss;
use crate::error::{Error, Result};
use crate::format::FormatError;
use crate::schedule::{NoiseSchedule, ScheduleParams};
use crate::seeds::{self, Rng};
use crate::tape::{ParamStore, Tape};
use crate::tensor::{Tensor, TensorError};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Which modality conditions and which is generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Condition on V, denoise A.
    CondVDenoiseA,
    /// Condition on A, denoise V.
    CondADenoiseV,
}

impl Direction {
    pub fn toggled(self) -> Self {
        match self {
            Direction::CondVDenoiseA => Direction::CondADenoiseV,
            Direction::CondADenoiseV => Direction::CondVDenoiseA,
        }
    }

    pub fn condition(self) -> Modality {
        match self {
            Direction::CondVDenoiseA => Modality::V,
            Direction::CondADenoiseV => Modality::A,
        }
    }

    pub fn target(self) -> Modality {
        self.condition().other()
    }

    /// `"v->a"` or `"a->v"`: query modality, then generated modality.
    pub fn label(self) -> &'static str {
        match self {
            Direction::CondVDenoiseA => "v->a",
            Direction::CondADenoiseV => "a->v",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "v->a" => Some(Direction::CondVDenoiseA),
            "a->v" => Some(Direction::CondADenoiseV),
            _ => None,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter tensor, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.ids().map(|id| Tensor::zeros(params.value(id).shape())).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update with `grads` given in store order.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Dimension(format!(
            "adam: {} parameters, {} gradients, {} moment tensors",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for id in params.ids() {
        let shape = params.value(id).shape();
        if grads[id.0].shape() != shape || state.m[id.0].shape() != shape || state.v[id.0].shape() != shape {
            return Err(TensorError::shape("adam", format!("parameter {}", params.name(id))).into());
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for id in params.ids().collect::<Vec<_>>() {
        let g = grads[id.0].data();
        let m = state.m[id.0].data_mut();
        let v = state.v[id.0].data_mut();
        let theta = params.value_mut(id).data_mut();
        for k in 0..theta.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            theta[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Direction switch interval in iterations; `None` never switches.
    pub interval: Option<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub schedule: ScheduleParams,
    /// Factor applied to the unit-norm embeddings (targets and conditions)
    /// before they enter the diffusion. `None` uses `√dim` for each
    /// modality, giving per-coordinate variance near 1.
    pub data_scale: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 2e-4,
            epochs: 30,
            interval: Some(5000),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            schedule: ScheduleParams::default(),
            data_scale: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.interval == Some(0) {
            return Err(Error::Config("interval must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("adam needs 0 <= beta1, beta2 < 1 and eps > 0".into()));
        }
        if let Some(s) = self.data_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("data_scale must be positive, got {s}")));
            }
        }
        self.schedule.build()?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Scale applied to `dim`-wide embeddings.
    pub fn scale_for(&self, dim: usize) -> f64 {
        self.data_scale.unwrap_or((dim as f64).sqrt())
    }

    /// `true` when the direction switches right after iteration `j`.
    pub fn toggles_after(&self, j: u64) -> bool {
        self.interval.is_some_and(|m| j % m == 0)
    }

    /// Iterations in a full run over `count` items.
    pub fn total_iterations(&self, count: usize) -> u64 {
        (self.epochs * count.div_ceil(self.batch_size)) as u64
    }
}

/// The per-direction denoiser configs implied by a base config and corpus
/// dims: V→A generates `dim_a` from `dim_v`, A→V the reverse.
pub fn direction_configs(base: &DenoiserConfig, dim_a: usize, dim_v: usize) -> (DenoiserConfig, DenoiserConfig) {
    let va = DenoiserConfig {
        embed_dim: dim_a,
        cond_dim: dim_v,
        ..*base
    };
    let av = DenoiserConfig {
        embed_dim: dim_v,
        cond_dim: dim_a,
        ..*base
    };
    (va, av)
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub train: TrainConfig,
    /// Iterations completed.
    pub iteration: u64,
    /// Direction the next iteration would train.
    pub direction: Direction,
    pub toggles: u64,
    pub va: Denoiser,
    pub av: Denoiser,
    pub adam_va: AdamState,
    pub adam_av: AdamState,
}

impl Checkpoint {
    pub fn denoiser(&self, d: Direction) -> &Denoiser {
        match d {
            Direction::CondVDenoiseA => &self.va,
            Direction::CondADenoiseV => &self.av,
        }
    }

    /// Rejects use with a corpus whose dims differ from the trained ones.
    pub fn check_dims(&self, dim_a: usize, dim_v: usize) -> Result<()> {
        let cfg = self.va.config();
        if cfg.embed_dim != dim_a || cfg.cond_dim != dim_v {
            return Err(Error::Config(format!(
                "checkpoint was trained with dim_a={}, dim_v={} but the data has dim_a={dim_a}, dim_v={dim_v}",
                cfg.embed_dim, cfg.cond_dim
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(self.train.schedule.build()?)
    }

    /// Scales `(condition, target)` that direction `d` was trained with.
    pub fn data_scales(&self, d: Direction) -> (f64, f64) {
        let c = self.denoiser(d).config();
        (self.train.scale_for(c.cond_dim), self.train.scale_for(c.embed_dim))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub direction: Direction,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<LossRecord>,
}

/// One optimisation step on a `[B, D]` target batch and its `[B, C]`
/// conditions. Returns the batch-mean loss.
pub fn train_step(
    denoiser: &mut Denoiser,
    adam: &mut AdamState,
    z0: &Tensor,
    cond: &Tensor,
    sched: &NoiseSchedule,
    opt: &AdamConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let (loss, grads) = {
        let net: &Denoiser = denoiser;
        let mut tape = Tape::new();
        let l = diffusion_loss(&mut tape, net, z0, cond, sched, rng)?;
        let loss = tape.value(l)?.item();
        let g = tape.backward(l)?;
        let params = net.params();
        let grads: Vec<Tensor> = params.ids().map(|id| g.param_or_zeros(params, id)).collect();
        (loss, grads)
    };
    adam_step(denoiser.params_mut(), &grads, adam, opt)?;
    Ok(loss)
}

/// Runs split training over `corpus` (rows are unit-normalised first).
/// `base` supplies the network shape; its `embed_dim`/`cond_dim` must
/// match the corpus as `dim_a`/`dim_v`.
pub fn train(corpus: &PairedCorpus, base: &DenoiserConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    if base.embed_dim != corpus.dim_a() || base.cond_dim != corpus.dim_v() {
        return Err(Error::Dimension(format!(
            "denoiser expects dim_a={}, dim_v={}; corpus has {}, {}",
            base.embed_dim,
            base.cond_dim,
            corpus.dim_a(),
            corpus.dim_v()
        )));
    }
    let data = corpus.normalized()?;
    let sched = cfg.schedule.build()?;
    let (va_cfg, av_cfg) = direction_configs(base, corpus.dim_a(), corpus.dim_v());
    let va = Denoiser::new(va_cfg, &mut seeds::rng(cfg.seed, "init.v->a"))?;
    let av = Denoiser::new(av_cfg, &mut seeds::rng(cfg.seed, "init.a->v"))?;
    let mut ck = Checkpoint {
        train: *cfg,
        iteration: 0,
        direction: Direction::CondVDenoiseA,
        toggles: 0,
        adam_va: AdamState::new(va.params()),
        adam_av: AdamState::new(av.params()),
        va,
        av,
    };
    let opt = cfg.adam();
    let mut shuffle_rng = seeds::rng(cfg.seed, "shuffle");
    let mut noise_rng = seeds::rng(cfg.seed, "noise");
    let mut order: Vec<usize> = (0..data.count()).collect();
    let mut history = Vec::with_capacity(cfg.total_iterations(data.count()) as usize);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            let dir = ck.direction;
            let (ts, cs) = (cfg.scale_for(data.dim(dir.target())), cfg.scale_for(data.dim(dir.condition())));
            let z0 = data.gather(dir.target(), batch).map(|v| v * ts);
            let cond = data.gather(dir.condition(), batch).map(|v| v * cs);
            let j = ck.iteration + 1;
            let (net, adam) = match dir {
                Direction::CondVDenoiseA => (&mut ck.va, &mut ck.adam_va),
                Direction::CondADenoiseV => (&mut ck.av, &mut ck.adam_av),
            };
            let loss = match train_step(net, adam, &z0, &cond, &sched, &opt, &mut noise_rng) {
                Ok(l) if l.is_finite() => l,
                Ok(l) => return Err(diverged(j, l)),
                Err(Error::Tensor(TensorError::NonFinite { .. })) => return Err(diverged(j, f64::NAN)),
                Err(e) => return Err(e),
            };
            ck.iteration = j;
            history.push(LossRecord {
                iteration: j,
                direction: dir,
                loss,
            });
            if cfg.toggles_after(j) {
                ck.direction = dir.toggled();
                ck.toggles += 1;
            }
        }
    }
    Ok(TrainOutcome {
        checkpoint: ck,
        history,
    })
}

fn diverged(iteration: u64, loss: f64) -> Error {
    Error::Diverged {
        stage: "denoiser",
        iteration,
        loss,
    }
}

/// Loss history as CSV: `iteration,direction,loss`.
pub fn write_loss_csv(history: &[LossRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "iteration,direction,loss")?;
    for r in history {
        writeln!(out, "{},{},{}", r.iteration, r.direction, r.loss)?;
    }
    Ok(())
}

pub fn save_loss_csv(history: &[LossRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_loss_csv(history, &mut buf).map_err(|e| FormatError::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| FormatError::io(path, e))?;
    Ok(())
}
