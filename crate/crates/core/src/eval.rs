//! Cosine retrieval, recall@k and embedding-space generation metrics.

use std::io::Write;
use std::path::Path;

use crate::diffusion::{ddim_sample_from, standard_normal};
use crate::error::{Error, Result};
use crate::format::FormatError;
use crate::seeds;
use crate::tensor::{dot, Tensor};
use crate::trainer::{Checkpoint, Direction};

/// Ranks reported by every retrieval evaluation.
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

pub fn cosine_similarity(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("cosine of {} and {} values", x.len(), y.len())));
    }
    let (nx, ny) = (dot(x, x).sqrt(), dot(y, y).sqrt());
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Invalid("cosine similarity of a zero vector".into()));
    }
    Ok((dot(x, y) / (nx * ny)).clamp(-1.0, 1.0))
}

/// Scores of `query` against each candidate row, by cosine.
fn scores(query: &[f64], candidates: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = candidates
        .as_rows()
        .ok_or_else(|| Error::Dimension("candidates must be a matrix".into()))?;
    if n == 0 || candidates.rank() != 2 {
        return Err(Error::Invalid("no candidates to rank".into()));
    }
    if query.len() != d {
        return Err(Error::Dimension(format!("query has {} values, candidates {d}", query.len())));
    }
    (0..n).map(|i| cosine_similarity(query, candidates.row(i))).collect()
}

fn order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// The `k` best candidate rows of `candidates: [N, D]` for `query`, by
/// descending cosine; equal scores go to the lower index.
pub fn retrieve(query: &[f64], candidates: &Tensor, k: usize) -> Result<Vec<usize>> {
    let s = scores(query, candidates)?;
    if k > s.len() {
        return Err(Error::Invalid(format!("k={k} exceeds {} candidates", s.len())));
    }
    let mut r = order(&s);
    r.truncate(k);
    Ok(r)
}

/// Percentage of queries whose true index is among the first `k` entries
/// of its ranking.
pub fn recall_at_k(truth: &[usize], rankings: &[Vec<usize>], k: usize) -> Result<f64> {
    if truth.len() != rankings.len() {
        return Err(Error::Dimension(format!("{} truths for {} rankings", truth.len(), rankings.len())));
    }
    if truth.is_empty() {
        return Err(Error::Invalid("recall over zero queries".into()));
    }
    let mut hits = 0usize;
    for (t, r) in truth.iter().zip(rankings) {
        if k > r.len() {
            return Err(Error::Invalid(format!("k={k} exceeds ranking length {}", r.len())));
        }
        hits += usize::from(r[..k].contains(t));
    }
    Ok(100.0 * hits as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub direction: String,
    /// `(k, recall %)` for each k in [`RECALL_KS`].
    pub recall: Vec<(usize, f64)>,
    pub query_count: usize,
    /// Sampling steps; 0 for the raw-cosine baseline.
    pub steps: usize,
    pub seed: u64,
}

impl RetrievalReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }

    pub fn write_rows(&self, mut out: impl Write) -> std::io::Result<()> {
        for (k, r) in &self.recall {
            writeln!(out, "{},{k},{r},{},{},{}", self.direction, self.query_count, self.steps, self.seed)?;
        }
        Ok(())
    }
}

pub const REPORT_HEADER: &str = "direction,k,recall,query_count,steps,seed";

pub fn save_reports(reports: &[RetrievalReport], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    let io = |e| FormatError::io(path, e);
    writeln!(buf, "{REPORT_HEADER}").map_err(io)?;
    for r in reports {
        r.write_rows(&mut buf).map_err(io)?;
    }
    std::fs::write(path, buf).map_err(io)?;
    Ok(())
}

/// Ranks every candidate for every query row, where query `i`'s partner is
/// candidate `i`, and aggregates recall at [`RECALL_KS`].
pub fn rank_report(queries: &Tensor, candidates: &Tensor, direction: &str, steps: usize, seed: u64) -> Result<RetrievalReport> {
    let (q, _) = queries
        .as_rows()
        .ok_or_else(|| Error::Dimension("queries must be a matrix".into()))?;
    let n = candidates.as_rows().map_or(0, |(n, _)| n);
    if q > n {
        return Err(Error::Invalid(format!("{q} queries but only {n} candidates")));
    }
    let mut rankings = Vec::with_capacity(q);
    for i in 0..q {
        rankings.push(order(&scores(queries.row(i), candidates)?));
    }
    let truth: Vec<usize> = (0..q).collect();
    let recall = RECALL_KS
        .iter()
        .map(|&k| Ok((k, recall_at_k(&truth, &rankings, k)?)))
        .collect::<Result<_>>()?;
    Ok(RetrievalReport {
        direction: direction.to_string(),
        recall,
        query_count: q,
        steps,
        seed,
    })
}

/// Retrieval by cosine between the query and candidate embeddings
/// themselves.
pub fn raw_retrieval(queries: &Tensor, candidates: &Tensor, direction: Direction) -> Result<RetrievalReport> {
    rank_report(queries, candidates, direction.label(), 0, 0)
}

/// Generates one unit-norm target-modality embedding per condition row
/// with DDIM from the direction's denoiser. Row `i` starts from a `z_N`
/// drawn from the substream `(seed, "eval.start", i)`, so results do not
/// depend on batching.
pub fn generate(ck: &Checkpoint, direction: Direction, conds: &Tensor, steps: usize, eta: f64, seed: u64) -> Result<Tensor> {
    let net = ck.denoiser(direction);
    let cfg = net.config();
    let (rows, c) = conds
        .as_rows()
        .ok_or_else(|| Error::Dimension("conditions must be a matrix".into()))?;
    if c != cfg.cond_dim {
        return Err(Error::Config(format!(
            "{direction} denoiser expects {}-dim conditions, got {c}",
            cfg.cond_dim
        )));
    }
    let (cond_scale, _) = ck.data_scales(direction);
    let scaled = Tensor::matrix(rows, c, conds.data().iter().map(|v| v * cond_scale).collect())?;
    let mut start = Vec::with_capacity(rows * cfg.embed_dim);
    for i in 0..rows {
        let mut rng = seeds::rng_indexed(seed, "eval.start", i as u64);
        start.extend(standard_normal(&mut rng, cfg.embed_dim));
    }
    let start = Tensor::matrix(rows, cfg.embed_dim, start)?;
    let sched = ck.schedule()?;
    let mut rng = seeds::rng(seed, "eval.ddim");
    ddim_sample_from(net, start, &scaled, &sched, steps, eta, &mut rng)
}

/// Generate-then-rank retrieval: each query (a condition-modality row) is
/// turned into a generated target embedding with deterministic DDIM
/// (`eta = 0`), then candidates are ranked by cosine to it. Query `i`'s
/// partner is candidate `i`.
pub fn diffgap_retrieval(
    ck: &Checkpoint,
    direction: Direction,
    queries: &Tensor,
    candidates: &Tensor,
    steps: usize,
    seed: u64,
) -> Result<RetrievalReport> {
    let d = ck.denoiser(direction).config().embed_dim;
    if candidates.as_rows().map(|(_, w)| w) != Some(d) {
        return Err(Error::Config(format!(
            "{direction} denoiser generates {d}-dim embeddings, candidates are {:?}",
            candidates.shape()
        )));
    }
    let generated = generate(ck, direction, queries, steps, 0.0, seed)?;
    rank_report(&generated, candidates, direction.label(), steps, seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationMetrics {
    pub mean_cosine: f64,
    /// Mean over pairs of the per-coordinate squared error.
    pub mse: f64,
    pub count: usize,
}

pub fn generation_metrics(generated: &Tensor, reference: &Tensor) -> Result<GenerationMetrics> {
    if generated.shape() != reference.shape() || generated.rank() != 2 {
        return Err(Error::Dimension(format!(
            "generated {:?} vs reference {:?}",
            generated.shape(),
            reference.shape()
        )));
    }
    let (n, d) = generated.as_rows().expect("rank 2");
    if n == 0 {
        return Err(Error::Invalid("no pairs to compare".into()));
    }
    let (mut cos, mut mse) = (0.0, 0.0);
    for i in 0..n {
        let (g, r) = (generated.row(i), reference.row(i));
        cos += cosine_similarity(g, r)?;
        mse += g.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d as f64;
    }
    Ok(GenerationMetrics {
        mean_cosine: cos / n as f64,
        mse: mse / n as f64,
        count: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn retrieve_exact_match_and_ties() {
        let mut rows = vec![vec![0.0; 3]; 10];
        for (i, r) in rows.iter_mut().enumerate() {
            r[i % 3] = 1.0 + i as f64;
        }
        rows[7] = vec![0.2, 0.5, -0.1];
        let c = Tensor::stack_rows(&rows).unwrap();
        assert_eq!(retrieve(&[0.2, 0.5, -0.1], &c, 1).unwrap(), vec![7]);
        let tie = Tensor::stack_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(retrieve(&[1.0, 0.0], &tie, 3).unwrap(), vec![0, 2, 1]);
        assert!(retrieve(&[1.0, 0.0], &tie, 4).is_err());
    }

    #[test]
    fn retrieve_orthonormal_basis() {
        let basis = Tensor::identity(8);
        let mut q = vec![0.0; 8];
        q[2] = 1.0;
        q[5] = 0.1;
        assert_eq!(&retrieve(&q, &basis, 8).unwrap()[..2], &[2, 5]);
    }

    /// A ranking of 10 candidates with `truth` at 1-based `rank`.
    fn ranking_with(truth: usize, rank: usize) -> Vec<usize> {
        let mut r: Vec<usize> = (0..10).filter(|&c| c != truth).collect();
        r.insert(rank - 1, truth);
        r
    }

    #[test]
    fn recall_hand_count() {
        let truth = [0, 1, 2];
        let rankings = vec![ranking_with(0, 1), ranking_with(1, 2), ranking_with(2, 7)];
        let r = |k| recall_at_k(&truth, &rankings, k).unwrap();
        assert!((r(1) - 33.33).abs() < 5e-3);
        assert!((r(5) - 66.67).abs() < 5e-3);
        assert_eq!(r(10), 100.0);
        assert!(recall_at_k(&truth, &rankings, 11).is_err());
    }

    #[test]
    fn generation_metric_extremes() {
        let g = Tensor::matrix(2, 2, vec![0.6, 0.8, 1.0, 0.0]).unwrap();
        let m = generation_metrics(&g, &g).unwrap();
        assert_eq!((m.mean_cosine, m.mse), (1.0, 0.0));
        let neg = g.map(|v| -v);
        assert!((generation_metrics(&g, &neg).unwrap().mean_cosine + 1.0).abs() < 1e-15);
        assert!(generation_metrics(&g, &Tensor::identity(3)).is_err());
    }

    #[test]
    fn report_csv_rows() {
        let r = RetrievalReport {
            direction: "v->a".into(),
            recall: vec![(1, 12.5), (5, 40.0), (10, 60.2)],
            query_count: 500,
            steps: 50,
            seed: 7,
        };
        let mut out = Vec::new();
        r.write_rows(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "v->a,1,12.5,500,50,7\nv->a,5,40,500,50,7\nv->a,10,60.2,500,50,7\n"
        );
        assert_eq!(r.at(5), Some(40.0));
    }
}
