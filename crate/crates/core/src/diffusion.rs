//! Forward noising, the ε-prediction objective and reverse samplers.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::denoiser::{Denoiser, NoisePredictor};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::seeds::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{normalize, Tensor};

pub fn standard_normal(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Closed-form marginal `z_n = √ᾱ_n·z0 + √(1−ᾱ_n)·ε`. `n = 0` returns `z0`.
pub fn forward_diffuse(z0: &[f64], n: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if n > sched.steps() {
        return Err(Error::Invalid(format!("step {n} exceeds schedule length {}", sched.steps())));
    }
    if z0.len() != eps.len() {
        return Err(Error::Dimension(format!("z0 has {} values, noise {}", z0.len(), eps.len())));
    }
    if n == 0 {
        return Ok(z0.to_vec());
    }
    let ab = sched.alpha_bar(n);
    let (s, r) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0.iter().zip(eps).map(|(x, e)| s * x + r * e).collect())
}

/// One step of the Markov kernel `q(z_t | z_{t−1}) = N(√(1−β_t) z_{t−1}, β_t I)`.
pub fn forward_step(z_prev: &[f64], t: usize, noise: &[f64], sched: &NoiseSchedule) -> Vec<f64> {
    let b = sched.beta(t);
    let (s, r) = ((1.0 - b).sqrt(), b.sqrt());
    z_prev.iter().zip(noise).map(|(x, e)| s * x + r * e).collect()
}

/// The random quantities of one loss evaluation: a step per row and the
/// injected noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub steps: Vec<usize>,
    pub eps: Tensor,
}

impl NoiseDraw {
    /// `n ~ U{1..N}` per row, `ε ~ N(0, I)`.
    pub fn sample(rows: usize, dim: usize, sched: &NoiseSchedule, rng: &mut Rng) -> Self {
        let mut steps = Vec::with_capacity(rows);
        let mut eps = Vec::with_capacity(rows * dim);
        for _ in 0..rows {
            steps.push(rng.random_range(1..=sched.steps()));
            eps.extend(standard_normal(rng, dim));
        }
        Self {
            steps,
            eps: Tensor::matrix(rows, dim, eps).expect("draw shape"),
        }
    }
}

/// Noised inputs `z_n` for every row of `z0: [B, D]` under `draw`.
pub fn noised_batch(z0: &Tensor, draw: &NoiseDraw, sched: &NoiseSchedule) -> Result<Tensor> {
    let (rows, dim) = z0
        .as_rows()
        .ok_or_else(|| Error::Dimension(format!("z0 must be rank 1 or 2, got {:?}", z0.shape())))?;
    if draw.steps.len() != rows || draw.eps.numel() != rows * dim {
        return Err(Error::Dimension("noise draw does not match z0".into()));
    }
    let mut out = Vec::with_capacity(rows * dim);
    for (r, &n) in draw.steps.iter().enumerate() {
        if n == 0 {
            return Err(Error::Invalid("training steps start at 1".into()));
        }
        out.extend(forward_diffuse(z0.row(r), n, draw.eps.row(r), sched)?);
    }
    Ok(Tensor::new(z0.shape().to_vec(), out)?)
}

/// `mse(ε, predict(z_n, n, cond))` for a given draw, with the prediction
/// supplied by `predict`. Mean over rows and dimensions.
pub fn diffusion_loss_with<'p, F>(
    tape: &mut Tape<'p>,
    z0: &Tensor,
    cond: &Tensor,
    draw: &NoiseDraw,
    sched: &NoiseSchedule,
    predict: F,
) -> Result<Var>
where
    F: FnOnce(&mut Tape<'p>, Var, &[usize], Var) -> Result<Var>,
{
    let zn = noised_batch(z0, draw, sched)?;
    let eps = if z0.rank() == 1 {
        Tensor::vector(draw.eps.data().to_vec())
    } else {
        draw.eps.clone()
    };
    let zn = tape.leaf(zn)?;
    let c = tape.leaf(cond.clone())?;
    let pred = predict(tape, zn, &draw.steps, c)?;
    let target = tape.leaf(eps)?;
    Ok(tape.mse(target, pred)?)
}

/// Diffusion loss of `denoiser` for a fixed draw.
pub fn diffusion_loss_at<'p>(
    tape: &mut Tape<'p>,
    denoiser: &'p Denoiser,
    z0: &Tensor,
    cond: &Tensor,
    draw: &NoiseDraw,
    sched: &NoiseSchedule,
) -> Result<Var> {
    diffusion_loss_with(tape, z0, cond, draw, sched, |t, zn, steps, c| {
        denoiser.forward(t, zn, steps, c)
    })
}

/// Samples `n` and `ε` from `rng` and records the ε-prediction loss.
/// `z0` is the denoising target (rank 1, or `[B, D]`), `cond` the
/// condition embedding(s).
pub fn diffusion_loss<'p>(
    tape: &mut Tape<'p>,
    denoiser: &'p Denoiser,
    z0: &Tensor,
    cond: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Var> {
    let (rows, dim) = z0
        .as_rows()
        .ok_or_else(|| Error::Dimension(format!("z0 must be rank 1 or 2, got {:?}", z0.shape())))?;
    let draw = NoiseDraw::sample(rows, dim, sched, rng);
    diffusion_loss_at(tape, denoiser, z0, cond, &draw, sched)
}

fn check_cond(pred: &impl NoisePredictor, cond: &Tensor) -> Result<usize> {
    match cond.shape() {
        [b, c] if *c == pred.cond_dim() => Ok(*b),
        s => Err(Error::Dimension(format!(
            "conditions must be [batch, {}], got {s:?}",
            pred.cond_dim()
        ))),
    }
}

fn normalize_rows(z: Tensor) -> Result<Tensor> {
    let (rows, dim) = z.as_rows().expect("sampler output rank");
    let mut out = Vec::with_capacity(rows * dim);
    for r in 0..rows {
        out.extend(normalize(z.row(r)).ok_or_else(|| Error::Invalid(format!("sample {r} collapsed to zero")))?);
    }
    Ok(Tensor::new(z.shape().to_vec(), out)?)
}

fn start_noise(pred: &impl NoisePredictor, rows: usize, rng: &mut Rng) -> Tensor {
    let d = pred.embed_dim();
    Tensor::matrix(rows, d, standard_normal(rng, rows * d)).expect("start noise shape")
}

/// Ancestral DDPM sampling for every row of `cond: [B, C]`, starting from
/// `z_N ~ N(0, I)` drawn from `rng`. Returns unit-norm rows.
pub fn ddpm_sample(pred: &impl NoisePredictor, cond: &Tensor, sched: &NoiseSchedule, rng: &mut Rng) -> Result<Tensor> {
    let rows = check_cond(pred, cond)?;
    let z = start_noise(pred, rows, rng);
    ddpm_sample_from(pred, z, cond, sched, rng)
}

/// DDPM sampling from a given `z_N`:
/// `z_{t−1} = (z_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t + √β̃_t·w`.
pub fn ddpm_sample_from(
    pred: &impl NoisePredictor,
    z_start: Tensor,
    cond: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    let unnormalized = ddpm_trajectory(pred, z_start, cond, sched, Some(rng))?;
    normalize_rows(unnormalized)
}

/// The DDPM reverse chain before output normalisation. With `rng = None`
/// the `√β̃_t·w` term is dropped and the chain follows its mean path.
pub fn ddpm_trajectory(
    pred: &impl NoisePredictor,
    mut z: Tensor,
    cond: &Tensor,
    sched: &NoiseSchedule,
    mut rng: Option<&mut Rng>,
) -> Result<Tensor> {
    let rows = check_cond(pred, cond)?;
    if z.as_rows() != Some((rows, pred.embed_dim())) || z.rank() != 2 {
        return Err(Error::Dimension(format!("start noise shape {:?}", z.shape())));
    }
    for t in (1..=sched.steps()).rev() {
        let eps = pred.predict(&z, &vec![t; rows], cond)?;
        let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
        let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
        let sigma = sched.posterior_var(t).sqrt();
        let noise = match (&mut rng, sigma > 0.0) {
            (Some(r), true) => Some(standard_normal(r, z.numel())),
            _ => None,
        };
        for (i, (zv, ev)) in z.data_mut().iter_mut().zip(eps.data()).enumerate() {
            *zv = inv_sqrt_alpha * (*zv - coef * ev);
            if let Some(w) = &noise {
                *zv += sigma * w[i];
            }
        }
    }
    Ok(z)
}

/// `steps` timesteps evenly spaced over `1..=N`, descending, always
/// starting at `N`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::Invalid(format!(
            "sampling steps must be in 1..={total}, got {steps}"
        )));
    }
    Ok((0..steps).map(|i| ((steps - i) * total).div_ceil(steps)).collect())
}

/// DDIM sampling from `z_N ~ N(0, I)` drawn from `rng`. With `eta = 0` the
/// only randomness is the start noise.
pub fn ddim_sample(
    pred: &impl NoisePredictor,
    cond: &Tensor,
    sched: &NoiseSchedule,
    steps: usize,
    eta: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    let rows = check_cond(pred, cond)?;
    let z = start_noise(pred, rows, rng);
    ddim_sample_from(pred, z, cond, sched, steps, eta, rng)
}

/// DDIM sampling from a given `z_N`; unit-norm rows out.
pub fn ddim_sample_from(
    pred: &impl NoisePredictor,
    z_start: Tensor,
    cond: &Tensor,
    sched: &NoiseSchedule,
    steps: usize,
    eta: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    normalize_rows(ddim_trajectory(pred, z_start, cond, sched, steps, eta, rng)?)
}

/// The DDIM chain before output normalisation. At each selected `t` with
/// predecessor `s`:
/// `ẑ0 = (z_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`,
/// `z_s = √ᾱ_s·ẑ0 + √(1−ᾱ_s−σ²)·ε̂ + σ·w`,
/// `σ = eta·√((1−ᾱ_s)/(1−ᾱ_t))·√(1−ᾱ_t/ᾱ_s)`.
pub fn ddim_trajectory(
    pred: &impl NoisePredictor,
    mut z: Tensor,
    cond: &Tensor,
    sched: &NoiseSchedule,
    steps: usize,
    eta: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    if !(eta >= 0.0) {
        return Err(Error::Invalid(format!("eta must be non-negative, got {eta}")));
    }
    let rows = check_cond(pred, cond)?;
    if z.as_rows() != Some((rows, pred.embed_dim())) || z.rank() != 2 {
        return Err(Error::Dimension(format!("start noise shape {:?}", z.shape())));
    }
    let ts = ddim_timesteps(sched.steps(), steps)?;
    for (i, &t) in ts.iter().enumerate() {
        let s = ts.get(i + 1).copied().unwrap_or(0);
        let (ab_t, ab_s) = (sched.alpha_bar(t), sched.alpha_bar(s));
        let eps = pred.predict(&z, &vec![t; rows], cond)?;
        let sigma = eta * ((1.0 - ab_s) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_s).sqrt();
        let dir = (1.0 - ab_s - sigma * sigma).max(0.0).sqrt();
        let noise = (sigma > 0.0).then(|| standard_normal(rng, z.numel()));
        let (sq_t, sqm_t, sq_s) = (ab_t.sqrt(), (1.0 - ab_t).sqrt(), ab_s.sqrt());
        for (k, (zv, ev)) in z.data_mut().iter_mut().zip(eps.data()).enumerate() {
            let x0 = (*zv - sqm_t * ev) / sq_t;
            *zv = sq_s * x0 + dir * ev;
            if let Some(w) = &noise {
                *zv += sigma * w[k];
            }
        }
    }
    Ok(z)
}
