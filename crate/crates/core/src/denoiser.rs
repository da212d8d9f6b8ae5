//! Conditional noise-prediction network ε_θ(z_n, n, c).
//!
//! The input is the concatenation `[z_n ; c ; sinusoidal(n)]`, followed by
//! `hidden_layers` affine+SiLU blocks and a final affine layer back to the
//! target dimension.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::standard_normal;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::seeds::{self, Rng};
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Dimension of the denoising target.
    pub embed_dim: usize,
    /// Dimension of the condition embedding.
    pub cond_dim: usize,
    /// Width of the sinusoidal timestep embedding (even).
    pub time_embed_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            embed_dim: 512,
            cond_dim: 512,
            time_embed_dim: 128,
            hidden_dim: 512,
            hidden_layers: 2,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("cond_dim", self.cond_dim),
            ("time_embed_dim", self.time_embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("hidden_layers", self.hidden_layers),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("denoiser {name} must be at least 1")));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim must be even, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.embed_dim + self.cond_dim + self.time_embed_dim
    }

    /// `(out, in)` for every affine layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![(self.hidden_dim, self.input_dim())];
        shapes.extend((1..self.hidden_layers).map(|_| (self.hidden_dim, self.hidden_dim)));
        shapes.push((self.embed_dim, self.hidden_dim));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }
}

/// Parameter footprint, with bytes counted at 4 per parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamStats {
    pub param_count: usize,
    pub bytes_f32_equivalent: usize,
}

impl ParamStats {
    /// Size in megabytes (10⁶ bytes).
    pub fn megabytes(&self) -> f64 {
        self.bytes_f32_equivalent as f64 / 1e6
    }
}

/// Sinusoidal embedding of step `n`: `[sin(n/10000^{2i/E}), cos(...)]`
/// interleaved per frequency.
pub fn time_embedding(n: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!("time embedding width must be even, got {dim}")));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(2.0 * i as f64 / dim as f64);
        let arg = n as f64 / freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

pub fn layer_param_names(index: usize) -> (String, String) {
    (format!("layer{index}.weight"), format!("layer{index}.bias"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamStore,
    layers: Vec<(ParamId, ParamId)>,
}

impl Denoiser {
    /// Weights uniform in ±1/√fan_in, biases zero.
    pub fn new(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        for (i, (out, inp)) in config.layer_shapes().into_iter().enumerate() {
            let bound = 1.0 / (inp as f64).sqrt();
            let w: Vec<f64> = (0..out * inp).map(|_| rng.random_range(-bound..bound)).collect();
            let (wn, bn) = layer_param_names(i);
            let wid = params.add(wn, Tensor::matrix(out, inp, w)?);
            let bid = params.add(bn, Tensor::zeros(&[out]));
            layers.push((wid, bid));
        }
        Ok(Self { config, params, layers })
    }

    /// Rebuilds a denoiser from stored parameters, checking names and shapes.
    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        if params.len() != 2 * shapes.len() {
            return Err(Error::Dimension(format!(
                "denoiser expects {} parameter tensors, found {}",
                2 * shapes.len(),
                params.len()
            )));
        }
        let mut layers = Vec::new();
        for (i, (out, inp)) in shapes.into_iter().enumerate() {
            let (wn, bn) = layer_param_names(i);
            let wid = params
                .find(&wn)
                .ok_or_else(|| Error::Dimension(format!("missing parameter {wn}")))?;
            let bid = params
                .find(&bn)
                .ok_or_else(|| Error::Dimension(format!("missing parameter {bn}")))?;
            if params.value(wid).shape() != [out, inp] || params.value(bid).shape() != [out] {
                return Err(Error::Dimension(format!(
                    "layer {i} shapes {:?}/{:?} do not match config ({out}x{inp})",
                    params.value(wid).shape(),
                    params.value(bid).shape()
                )));
            }
            layers.push((wid, bid));
        }
        Ok(Self { config, params, layers })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn param_stats(&self) -> ParamStats {
        let param_count = self.params.scalar_count();
        ParamStats {
            param_count,
            bytes_f32_equivalent: 4 * param_count,
        }
    }

    /// Records the forward pass for a batch: `z: [B, D]`, `cond: [B, C]`,
    /// one step index per row. Rank-1 `z`/`cond` with a single step are
    /// accepted as a batch of one and yield a rank-1 output.
    pub fn forward<'p>(&'p self, tape: &mut Tape<'p>, z: Var, steps: &[usize], cond: Var) -> Result<Var> {
        self.forward_with(&self.params, tape, z, steps, cond)
    }

    /// [`Denoiser::forward`] reading weights from `params`, which must have
    /// this denoiser's layout (for example a perturbed copy of
    /// [`Denoiser::params`]).
    pub fn forward_with<'p>(
        &self,
        params: &'p ParamStore,
        tape: &mut Tape<'p>,
        z: Var,
        steps: &[usize],
        cond: Var,
    ) -> Result<Var> {
        let c = &self.config;
        let zt = tape.value(z)?;
        let (rows, zw) = zt
            .as_rows()
            .ok_or_else(|| Error::Dimension(format!("z_n must be rank 1 or 2, got {:?}", zt.shape())))?;
        let rank = zt.rank();
        if zw != c.embed_dim {
            return Err(Error::Dimension(format!("z_n width {zw}, denoiser expects {}", c.embed_dim)));
        }
        let ct = tape.value(cond)?;
        if ct.rank() != rank || ct.as_rows() != Some((rows, c.cond_dim)) {
            return Err(Error::Dimension(format!(
                "condition shape {:?}, expected {rows} rows of width {}",
                ct.shape(),
                c.cond_dim
            )));
        }
        if steps.len() != rows {
            return Err(Error::Dimension(format!("{} step indices for {rows} rows", steps.len())));
        }
        let mut temb = Vec::with_capacity(rows * c.time_embed_dim);
        for &n in steps {
            temb.extend(time_embedding(n, c.time_embed_dim)?);
        }
        let temb = if rank == 1 {
            Tensor::vector(temb)
        } else {
            Tensor::matrix(rows, c.time_embed_dim, temb)?
        };
        let temb = tape.leaf(temb)?;
        let mut h = tape.concat(&[z, cond, temb])?;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let w = tape.param(params, w)?;
            let b = tape.param(params, b)?;
            h = tape.affine(w, b, h)?;
            if i < last {
                h = tape.silu(h)?;
            }
        }
        Ok(h)
    }

    /// ε_θ(z_n, n, cond) for a single item, recorded on `tape`.
    pub fn predict_noise<'p>(&'p self, tape: &mut Tape<'p>, z_n: &Tensor, n: usize, cond: &Tensor) -> Result<Var> {
        let z = tape.leaf(z_n.clone())?;
        let c = tape.leaf(cond.clone())?;
        self.forward(tape, z, &[n], c)
    }
}

/// Batched noise prediction without gradient bookkeeping. Samplers are
/// generic over this so tests can substitute analytic predictors.
pub trait NoisePredictor {
    fn embed_dim(&self) -> usize;
    fn cond_dim(&self) -> usize;
    /// `z: [B, D]`, `cond: [B, C]`, one step per row → `[B, D]`.
    fn predict(&self, z: &Tensor, steps: &[usize], cond: &Tensor) -> Result<Tensor>;
}

impl NoisePredictor for Denoiser {
    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn cond_dim(&self) -> usize {
        self.config.cond_dim
    }

    fn predict(&self, z: &Tensor, steps: &[usize], cond: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone())?;
        let cv = tape.leaf(cond.clone())?;
        let out = self.forward(&mut tape, zv, steps, cv)?;
        Ok(tape.value(out)?.clone())
    }
}

/// Finite-difference check of a freshly initialised denoiser on the noise
/// regression loss for a random two-row batch. Parameters, inputs and step
/// indices all come from `seed`; `max_steps` bounds the sampled steps.
pub fn check_gradients(
    config: DenoiserConfig,
    max_steps: usize,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let rows = 2;
    let net = Denoiser::new(config, &mut seeds::rng(seed, "gradcheck.init"))?;
    let mut rng = seeds::rng(seed, "gradcheck.batch");
    let z = Tensor::matrix(rows, config.embed_dim, standard_normal(&mut rng, rows * config.embed_dim))?;
    let c = Tensor::matrix(rows, config.cond_dim, standard_normal(&mut rng, rows * config.cond_dim))?;
    let eps = Tensor::matrix(rows, config.embed_dim, standard_normal(&mut rng, rows * config.embed_dim))?;
    let steps: Vec<usize> = (0..rows).map(|_| rng.random_range(1..=max_steps.max(1))).collect();
    let mut store = net.params().clone();
    grad_check(
        &mut store,
        |t: &mut Tape<'_>, s| {
            let zv = t.leaf(z.clone())?;
            let cv = t.leaf(c.clone())?;
            let out = net.forward_with(s, t, zv, &steps, cv)?;
            let e = t.leaf(eps.clone())?;
            Ok(t.mse(out, e)?)
        },
        opts,
    )
}
