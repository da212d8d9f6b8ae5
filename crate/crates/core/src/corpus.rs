//! Paired two-modality embedding corpora.

use crate::error::{Error, Result};
use crate::tensor::{normalize, Tensor};

/// One side of a pair. `A` is the audio-like modality; `V` is the other
/// one (video or text).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    A,
    V,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::A => Modality::V,
            Modality::V => Modality::A,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Modality::A => "a",
            Modality::V => "v",
        }
    }
}

/// Aligned embedding pairs; row `i` of each modality belongs to item `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedCorpus {
    count: usize,
    dim_a: usize,
    dim_v: usize,
    a: Vec<f64>,
    v: Vec<f64>,
}

impl PairedCorpus {
    /// Row-major `count × dim` buffers for each modality.
    pub fn new(count: usize, dim_a: usize, dim_v: usize, a: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if a.len() != count * dim_a || v.len() != count * dim_v {
            return Err(Error::Dimension(format!(
                "corpus buffers ({}, {}) do not match {count} items of dims ({dim_a}, {dim_v})",
                a.len(),
                v.len()
            )));
        }
        Ok(Self {
            count,
            dim_a,
            dim_v,
            a,
            v,
        })
    }

    /// A one-modality set (stored as modality A, `dim_v = 0`), the layout
    /// used for generated embeddings.
    pub fn single(dim: usize, rows: Vec<f64>) -> Result<Self> {
        if dim == 0 || rows.len() % dim != 0 {
            return Err(Error::Dimension(format!("{} values do not form rows of width {dim}", rows.len())));
        }
        Self::new(rows.len() / dim, dim, 0, rows, Vec::new())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn dim(&self, m: Modality) -> usize {
        match m {
            Modality::A => self.dim_a,
            Modality::V => self.dim_v,
        }
    }

    pub fn dim_a(&self) -> usize {
        self.dim_a
    }

    pub fn dim_v(&self) -> usize {
        self.dim_v
    }

    /// The full row-major buffer of one modality.
    pub fn data(&self, m: Modality) -> &[f64] {
        match m {
            Modality::A => &self.a,
            Modality::V => &self.v,
        }
    }

    pub fn row(&self, m: Modality, i: usize) -> &[f64] {
        let d = self.dim(m);
        &self.data(m)[i * d..(i + 1) * d]
    }

    pub fn rows(&self, m: Modality) -> impl Iterator<Item = &[f64]> {
        let d = self.dim(m).max(1);
        self.data(m).chunks_exact(d).take(self.count)
    }

    /// Gathers the given items of one modality into a `[len, dim]` matrix.
    pub fn gather(&self, m: Modality, items: &[usize]) -> Tensor {
        let d = self.dim(m);
        let mut data = Vec::with_capacity(items.len() * d);
        for &i in items {
            data.extend_from_slice(self.row(m, i));
        }
        Tensor::matrix(items.len(), d, data).expect("gather shape")
    }

    pub fn matrix(&self, m: Modality) -> Tensor {
        Tensor::matrix(self.count, self.dim(m), self.data(m).to_vec()).expect("corpus shape")
    }

    /// The items at `items`, in that order.
    pub fn subset(&self, items: &[usize]) -> Self {
        Self {
            count: items.len(),
            dim_a: self.dim_a,
            dim_v: self.dim_v,
            a: self.gather(Modality::A, items).into_data(),
            v: self.gather(Modality::V, items).into_data(),
        }
    }

    /// Splits off the last `eval_count` items as the evaluation set.
    pub fn split_tail(&self, eval_count: usize) -> Result<(Self, Self)> {
        if eval_count > self.count {
            return Err(Error::Dimension(format!(
                "cannot hold out {eval_count} of {} items",
                self.count
            )));
        }
        let cut = self.count - eval_count;
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.count).collect();
        Ok((self.subset(&head), self.subset(&tail)))
    }

    /// Copy with every row rescaled to unit norm (in `f64`).
    pub fn normalized(&self) -> Result<Self> {
        let norm_all = |m: Modality| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(self.data(m).len());
            for (i, row) in self.rows(m).enumerate() {
                let u = normalize(row)
                    .ok_or_else(|| Error::Invalid(format!("item {i} of modality {} has zero norm", m.label())))?;
                out.extend(u);
            }
            Ok(out)
        };
        let a = if self.dim_a > 0 { norm_all(Modality::A)? } else { Vec::new() };
        let v = if self.dim_v > 0 { norm_all(Modality::V)? } else { Vec::new() };
        Self::new(self.count, self.dim_a, self.dim_v, a, v)
    }

    /// Largest `|‖row‖ − 1|` over all stored rows.
    pub fn max_norm_deviation(&self) -> f64 {
        [Modality::A, Modality::V]
            .into_iter()
            .filter(|&m| self.dim(m) > 0)
            .flat_map(|m| self.rows(m).map(|r| (r.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs()))
            .fold(0.0, f64::max)
    }
}
