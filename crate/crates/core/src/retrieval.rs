//! Cross-modal retrieval by cosine ranking and its evaluation metrics.

use std::cmp::Ordering;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RetrievalError {
    #[error("no candidates to rank")]
    EmptyCandidates,
    #[error("need at least {need} pairs, got {got}")]
    TooFewPairs { need: usize, got: usize },
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("invalid retrieval configuration: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    /// Each molecule is paired with one sampled sentence.
    SentenceLevel,
    /// Each molecule is paired with its whole document, truncated to the
    /// encoder's maximum length.
    ParagraphLevel,
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RetrievalMode::SentenceLevel => "sentence_level",
            RetrievalMode::ParagraphLevel => "paragraph_level",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    GraphToText,
    TextToGraph,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::GraphToText => "graph_to_text",
            Direction::TextToGraph => "text_to_graph",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub mode: RetrievalMode,
    pub batch_size: usize,
    pub recall_k: usize,
    pub seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            mode: RetrievalMode::ParagraphLevel,
            batch_size: 64,
            recall_k: 20,
            seed: 0,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.recall_k == 0 {
            return Err(RetrievalError::Config("recall_k must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(RetrievalError::Config(
                "batch_size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / d
}

/// Candidate indices by descending cosine to `query`; ties keep ascending
/// index order.
pub fn rank(query: &[f64], candidates: &Tensor) -> Result<Vec<usize>, RetrievalError> {
    let n = candidates.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(RetrievalError::EmptyCandidates);
    }
    if candidates.last_dim() != query.len() {
        return Err(RetrievalError::DimMismatch(
            query.len(),
            candidates.last_dim(),
        ));
    }
    let sims: Vec<f64> = candidates.rows().map(|c| cosine(query, c)).collect();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap_or(Ordering::Equal));
    Ok(idx)
}

/// Position of the true partner `i` when ranking `queries[i]` against
/// `candidates` (0 = first). Counting strictly better candidates plus
/// earlier-index ties gives the same answer as a full stable sort.
fn partner_rank(queries: &Tensor, candidates: &Tensor, i: usize, pool: &[usize]) -> usize {
    let q = queries.row(pool[i]);
    let own = cosine(q, candidates.row(pool[i]));
    pool.iter()
        .enumerate()
        .filter(|&(j, &c)| {
            let s = cosine(q, candidates.row(c));
            s > own || (s == own && j < i)
        })
        .count()
}

fn check_pairs(queries: &Tensor, candidates: &Tensor) -> Result<usize, RetrievalError> {
    if queries.shape()[0] != candidates.shape()[0] {
        return Err(RetrievalError::TooFewPairs {
            need: queries.shape()[0],
            got: candidates.shape()[0],
        });
    }
    if queries.last_dim() != candidates.last_dim() {
        return Err(RetrievalError::DimMismatch(
            queries.last_dim(),
            candidates.last_dim(),
        ));
    }
    Ok(queries.shape()[0])
}

/// Row `i` of `queries` pairs with row `i` of `candidates`. Pairs are shuffled
/// by `seed`, cut into batches of `batch_size` (the remainder is dropped), and
/// the per-batch rank-1 accuracy is averaged.
pub fn eval_batched_top1(
    queries: &Tensor,
    candidates: &Tensor,
    batch_size: usize,
    seed: u64,
) -> Result<f64, RetrievalError> {
    let n = check_pairs(queries, candidates)?;
    if batch_size == 0 || n < batch_size {
        return Err(RetrievalError::TooFewPairs {
            need: batch_size.max(1),
            got: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "retrieval"));
    let batches: Vec<&[usize]> = order.chunks_exact(batch_size).collect();
    let total: f64 = batches
        .iter()
        .map(|b| {
            let hits = (0..b.len())
                .filter(|&i| partner_rank(queries, candidates, i, b) == 0)
                .count();
            hits as f64 / b.len() as f64
        })
        .sum();
    Ok(total / batches.len() as f64)
}

/// Fraction of queries whose partner is within the top `k` over the whole pool.
pub fn eval_recall_at_k(
    queries: &Tensor,
    candidates: &Tensor,
    k: usize,
) -> Result<f64, RetrievalError> {
    let n = check_pairs(queries, candidates)?;
    if n == 0 {
        return Err(RetrievalError::TooFewPairs { need: 1, got: 0 });
    }
    let pool: Vec<usize> = (0..n).collect();
    let hits = (0..n)
        .filter(|&i| partner_rank(queries, candidates, i, &pool) < k)
        .count();
    Ok(hits as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub mode: RetrievalMode,
    pub top1_batched: f64,
    pub recall_at_k: f64,
    pub k: usize,
    pub pool_size: usize,
    pub seed: u64,
}

/// Both directions on paired graph and text embeddings.
pub fn evaluate(
    graphs: &Tensor,
    texts: &Tensor,
    cfg: &RetrievalConfig,
) -> Result<[RetrievalReport; 2], RetrievalError> {
    cfg.validate()?;
    let run = |direction, q: &Tensor, c: &Tensor| -> Result<RetrievalReport, RetrievalError> {
        Ok(RetrievalReport {
            direction,
            mode: cfg.mode,
            top1_batched: eval_batched_top1(q, c, cfg.batch_size, cfg.seed)?,
            recall_at_k: eval_recall_at_k(q, c, cfg.recall_k)?,
            k: cfg.recall_k,
            pool_size: q.shape()[0],
            seed: cfg.seed,
        })
    };
    Ok([
        run(Direction::GraphToText, graphs, texts)?,
        run(Direction::TextToGraph, texts, graphs)?,
    ])
}
