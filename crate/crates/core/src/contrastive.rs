//! Synthetic two-modality contrastive space.
//!
//! Every item has a latent concept `z ~ N(0, I_K)`. Each modality observes
//! it through its own linear mixing map plus isotropic noise. The gap
//! between the modalities is controlled by the noise scales and by how
//! strongly the two maps are correlated.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Modality, PairedCorpus};
use crate::diffusion::standard_normal;
use crate::error::{Error, Result};
use crate::seeds::{self, Rng};
use crate::tape::{ParamStore, Tape, Var};
use crate::tensor::{normalize, Tensor, TensorError};
use crate::trainer::{adam_step, AdamConfig, AdamState};

const MAX_RETRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    /// Latent concept dimension `K`.
    pub concept_dim: usize,
    /// Width of the raw features fed to contrastive encoders.
    pub raw_dim: usize,
    pub dim_a: usize,
    pub dim_v: usize,
    /// Correlation `ρ` between the two mixing maps:
    /// `M_v = ρ·M_a + √(1−ρ²)·M'` with `M'` independent. `ρ = 1` makes the
    /// maps identical (and needs `dim_a == dim_v` for any `ρ > 0`).
    pub map_correlation: f64,
    pub sigma_a: f64,
    pub sigma_v: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for ConceptSpec {
    fn default() -> Self {
        Self {
            concept_dim: 16,
            raw_dim: 64,
            dim_a: 512,
            dim_v: 512,
            map_correlation: 0.0,
            sigma_a: 0.7,
            sigma_v: 0.7,
            count: 5500,
            seed: 0,
        }
    }
}

impl ConceptSpec {
    pub fn validate(&self) -> Result<()> {
        if self.concept_dim == 0 || self.raw_dim == 0 || self.dim_a == 0 || self.dim_v == 0 {
            return Err(Error::Config("concept, raw and embedding dims must be at least 1".into()));
        }
        if !(self.sigma_a >= 0.0 && self.sigma_v >= 0.0) || !self.sigma_a.is_finite() || !self.sigma_v.is_finite() {
            return Err(Error::Config("noise scales must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.map_correlation) {
            return Err(Error::Config(format!(
                "map_correlation must be in [0, 1], got {}",
                self.map_correlation
            )));
        }
        if self.map_correlation > 0.0 && self.dim_a != self.dim_v {
            return Err(Error::Config(
                "correlated mixing maps need dim_a == dim_v".into(),
            ));
        }
        Ok(())
    }

    /// Mixing maps `(M_a: [dim_a, K], M_v: [dim_v, K])` with standard
    /// normal entries.
    pub fn mixing_maps(&self) -> Result<(Tensor, Tensor)> {
        self.validate()?;
        let k = self.concept_dim;
        let mut rng = seeds::rng(self.seed, "maps");
        let ma = standard_normal(&mut rng, self.dim_a * k);
        let other = standard_normal(&mut rng, self.dim_v * k);
        let rho = self.map_correlation;
        let mv = if rho > 0.0 {
            let r = (1.0 - rho * rho).max(0.0).sqrt();
            ma.iter().zip(&other).map(|(a, o)| rho * a + r * o).collect()
        } else {
            other
        };
        Ok((Tensor::matrix(self.dim_a, k, ma)?, Tensor::matrix(self.dim_v, k, mv)?))
    }

    /// The same concepts observed as `raw_dim`-wide features, the input of
    /// [`train_contrastive`].
    pub fn raw(&self) -> Self {
        Self {
            dim_a: self.raw_dim,
            dim_v: self.raw_dim,
            ..*self
        }
    }
}

fn observe(map: &Tensor, z: &[f64], sigma: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    let (rows, k) = map.as_rows().expect("map rank");
    for _ in 0..MAX_RETRIES {
        let x: Vec<f64> = (0..rows)
            .map(|r| {
                let mz: f64 = map.data()[r * k..(r + 1) * k].iter().zip(z).map(|(m, c)| m * c).sum();
                mz + sigma * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        if let Some(u) = normalize(&x) {
            return Ok(u);
        }
    }
    Err(Error::Invalid(format!(
        "observation stayed zero after {MAX_RETRIES} noise redraws"
    )))
}

/// `F^a = normalize(M_a z + σ_a η_a)`, `F^v = normalize(M_v z + σ_v η_v)`
/// for `count` items. Item `i` draws from its own substream.
pub fn generate_corpus(spec: &ConceptSpec) -> Result<PairedCorpus> {
    let (ma, mv) = spec.mixing_maps()?;
    let mut a = Vec::with_capacity(spec.count * spec.dim_a);
    let mut v = Vec::with_capacity(spec.count * spec.dim_v);
    for i in 0..spec.count {
        let mut rng = seeds::rng_indexed(spec.seed, "concept", i as u64);
        let z = standard_normal(&mut rng, spec.concept_dim);
        a.extend(observe(&ma, &z, spec.sigma_a, &mut rng)?);
        v.extend(observe(&mv, &z, spec.sigma_v, &mut rng)?);
    }
    PairedCorpus::new(spec.count, spec.dim_a, spec.dim_v, a, v)
}

/// One-directional InfoNCE over a batch of paired unit-norm rows
/// `fa, fv: [B, D]`:
/// `−(1/B) Σ_b log softmax_m(sim(F^a_b, F^v_m)/τ)[b]`.
pub fn contrastive_loss(tape: &mut Tape<'_>, fa: Var, fv: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    let shape = tape.value(fa)?.shape().to_vec();
    match shape.as_slice() {
        [b, _] if *b >= 2 => {}
        s => return Err(TensorError::contract("contrastive_loss", format!("need a [B>=2, D] batch, got {s:?}")).into()),
    }
    if tape.value(fv)?.shape() != shape.as_slice() {
        return Err(TensorError::shape("contrastive_loss", "modality batches differ in shape").into());
    }
    let sim = tape.matmul_nt(fa, fv)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    let lse = tape.logsumexp(logits)?;
    let pos = tape.diagonal(logits)?;
    let per_item = tape.sub(lse, pos)?;
    Ok(tape.mean(per_item)?)
}

/// [`contrastive_loss`] evaluated off-tape.
pub fn contrastive_loss_value(fa: &Tensor, fv: &Tensor, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, v) = (tape.leaf(fa.clone())?, tape.leaf(fv.clone())?);
    let l = contrastive_loss(&mut tape, a, v, tau)?;
    Ok(tape.value(l)?.item())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            batch_size: 64,
            epochs: 10,
            learning_rate: 1e-3,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("contrastive batch_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("contrastive learning_rate must be positive".into()));
        }
        Ok(())
    }
}

pub const ENCODER_A: &str = "encoder_a";
pub const ENCODER_V: &str = "encoder_v";

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutcome {
    /// `encoder_a: [dim_a, raw_dim]`, `encoder_v: [dim_v, raw_dim]`.
    pub encoders: ParamStore,
    pub corpus: PairedCorpus,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn encode(raw: &PairedCorpus, m: Modality, w: &Tensor) -> Result<Vec<f64>> {
    let (out_dim, raw_dim) = w.as_rows().expect("encoder rank");
    let mut data = Vec::with_capacity(raw.count() * out_dim);
    for (i, x) in raw.rows(m).enumerate() {
        let y: Vec<f64> = (0..out_dim)
            .map(|r| w.data()[r * raw_dim..(r + 1) * raw_dim].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        data.extend(normalize(&y).ok_or_else(|| {
            Error::Invalid(format!("encoder maps item {i} of modality {} to zero", m.label()))
        })?);
    }
    Ok(data)
}

/// Trains one linear encoder per modality on the raw features of `spec`
/// with [`contrastive_loss`] and Adam, and returns the encoded corpus.
/// Batches smaller than two items are skipped.
pub fn train_contrastive(spec: &ConceptSpec, cfg: &ContrastiveConfig) -> Result<ContrastiveOutcome> {
    cfg.validate()?;
    let raw = generate_corpus(&spec.raw())?;
    let mut store = ParamStore::new();
    let mut init = seeds::rng(spec.seed, "encoders");
    let bound = 1.0 / (spec.raw_dim as f64).sqrt();
    for (name, dim) in [(ENCODER_A, spec.dim_a), (ENCODER_V, spec.dim_v)] {
        let w: Vec<f64> = (0..dim * spec.raw_dim).map(|_| init.random_range(-bound..bound)).collect();
        store.add(name, Tensor::matrix(dim, spec.raw_dim, w)?);
    }
    let (ida, idv) = (store.find(ENCODER_A).expect("added"), store.find(ENCODER_V).expect("added"));
    let mut adam = AdamState::new(&store);
    let opt = AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut shuffle = seeds::rng(spec.seed, "contrastive.shuffle");
    let mut order: Vec<usize> = (0..raw.count()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut iteration = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut sum, mut batches) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size).filter(|b| b.len() >= 2) {
            iteration += 1;
            let (loss, grads) = {
                let mut tape = Tape::new();
                let xa = tape.leaf(raw.gather(Modality::A, batch))?;
                let xv = tape.leaf(raw.gather(Modality::V, batch))?;
                let wa = tape.param(&store, ida)?;
                let wv = tape.param(&store, idv)?;
                let ya = tape.matmul_nt(xa, wa)?;
                let yv = tape.matmul_nt(xv, wv)?;
                let fa = tape.normalize_rows(ya)?;
                let fv = tape.normalize_rows(yv)?;
                let l = contrastive_loss(&mut tape, fa, fv, cfg.temperature).map_err(|e| match e {
                    Error::Tensor(TensorError::NonFinite { .. }) => diverged(iteration),
                    e => e,
                })?;
                let loss = tape.value(l)?.item();
                let g = tape.backward(l)?;
                (loss, store.ids().map(|id| g.param_or_zeros(&store, id)).collect::<Vec<_>>())
            };
            if !loss.is_finite() {
                return Err(diverged(iteration));
            }
            adam_step(&mut store, &grads, &mut adam, &opt)?;
            sum += loss;
            batches += 1;
        }
        epoch_losses.push(if batches == 0 { f64::NAN } else { sum / batches as f64 });
    }
    let a = encode(&raw, Modality::A, store.value(ida))?;
    let v = encode(&raw, Modality::V, store.value(idv))?;
    let corpus = PairedCorpus::new(raw.count(), spec.dim_a, spec.dim_v, a, v)?;
    Ok(ContrastiveOutcome {
        encoders: store,
        corpus,
        epoch_losses,
    })
}

fn diverged(iteration: u64) -> Error {
    Error::Diverged {
        stage: "contrastive",
        iteration,
        loss: f64::NAN,
    }
}

/// Mean cosine between the paired rows of a corpus.
pub fn mean_pair_cosine(c: &PairedCorpus) -> f64 {
    if c.is_empty() {
        return f64::NAN;
    }
    let s: f64 = c
        .rows(Modality::A)
        .zip(c.rows(Modality::V))
        .map(|(a, v)| crate::tensor::dot(a, v) / (crate::tensor::dot(a, a) * crate::tensor::dot(v, v)).sqrt())
        .sum();
    s / c.count() as f64
}
