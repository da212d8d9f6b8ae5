//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Denominator floor for the relative error,
    /// `|a - n| / max(|a|, |n|, floor)`. Keeps round-off on near-zero
    /// gradients from reading as a relative failure.
    pub floor: f64,
    /// Check at most this many coordinates per parameter tensor, sampled
    /// with `seed`. `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-6,
            floor: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// Flat index, analytic and numeric value at the worst coordinate.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tol)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| p.max_rel_err > self.tol)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.params {
            let status = if p.max_rel_err <= self.tol { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{status:4} {:<28} coords={:<6} max_rel_err={:.3e}",
                p.name, p.coords_checked, p.max_rel_err
            )?;
        }
        write!(
            f,
            "{} (max_rel_err={:.3e}, tol={:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_err(),
            self.tol
        )
    }
}

/// Scalar loss builder: records a forward pass on the tape and returns the
/// loss variable.
pub trait LossFn: for<'p> Fn(&mut Tape<'p>, &'p ParamStore) -> Result<Var> {}
impl<F> LossFn for F where F: for<'p> Fn(&mut Tape<'p>, &'p ParamStore) -> Result<Var> {}

fn eval_loss(store: &ParamStore, loss_fn: &impl LossFn) -> Result<f64> {
    let mut tape = Tape::new();
    let l = loss_fn(&mut tape, store)?;
    Ok(tape.value(l)?.item())
}

/// Analytic gradient of every parameter, in store order.
pub fn analytic_gradients(store: &ParamStore, loss_fn: &impl LossFn) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let l = loss_fn(&mut tape, store)?;
    let g = tape.backward(l)?;
    Ok(store.ids().map(|id| g.param_or_zeros(store, id)).collect())
}

/// Compares tape gradients of `loss_fn` against central differences.
pub fn grad_check(
    store: &mut ParamStore,
    loss_fn: impl LossFn,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let analytic = analytic_gradients(store, &loss_fn)?;
    grad_check_against(store, loss_fn, &analytic, opts)
}

/// Compares caller-supplied gradients (one tensor per parameter, in store
/// order) against central differences of `loss_fn`.
pub fn grad_check_against(
    store: &mut ParamStore,
    loss_fn: impl LossFn,
    analytic: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if analytic.len() != store.len() {
        return Err(Error::Dimension(format!(
            "{} gradients for {} parameters",
            analytic.len(),
            store.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ids: Vec<_> = store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let numel = store.value(id).numel();
        if analytic[id.0].numel() != numel {
            return Err(TensorError::shape("grad_check", format!("gradient for {}", store.name(id))).into());
        }
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < numel => {
                let mut c = sample(&mut rng, numel, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..numel).collect(),
        };
        let mut max_rel_err = 0.0f64;
        let mut worst = None;
        for &i in &coords {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + opts.step;
            let plus = eval_loss(store, &loss_fn);
            store.value_mut(id).data_mut()[i] = orig - opts.step;
            let minus = eval_loss(store, &loss_fn);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.step);
            let a = analytic[id.0].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if worst.is_none() || rel > max_rel_err {
                max_rel_err = max_rel_err.max(rel);
                worst = Some((i, a, numeric));
            }
        }
        params.push(ParamCheck {
            name: store.name(id).to_string(),
            coords_checked: coords.len(),
            max_rel_err,
            worst,
        });
    }
    Ok(GradCheckReport {
        tol: opts.tol,
        params,
    })
}
