//! Contrastive graph–text pretraining.

mod loss;

pub use loss::{
    cross_modal_loss, info_nce, intra_graph_loss, total_pretrain_loss, BatchViews, LossFlags,
    BASE_TERMS,
};

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_two_views, AugmentConfig};
use crate::encoders::{DualEncoder, EncoderError, GraphBatch};
use crate::rng;
use crate::smiles::{parse_smiles, MolError, MolGraph};
use crate::tensor::{Adam, AdamConfig, Graph, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum PretrainError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("embedding counts differ: {left} vs {right}")]
    CountMismatch { left: usize, right: usize },
    #[error("document has no sentences")]
    EmptyDocument,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("invalid pretraining configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Callback(String),
}

/// One line of the dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cid: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub smiles: String,
    pub sentences: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub mol: MolGraph,
    pub sentences: Vec<String>,
}

impl PairedSample {
    pub fn new(mol: MolGraph, sentences: Vec<String>) -> Result<Self, PretrainError> {
        if sentences.is_empty() {
            return Err(PretrainError::EmptyDocument);
        }
        Ok(Self { mol, sentences })
    }

    /// All sentences joined by spaces (paragraph-level text).
    pub fn document(&self) -> String {
        self.sentences.join(" ")
    }
}

/// Parses line-delimited JSON records; blank lines are skipped.
pub fn parse_dataset(text: &str) -> Result<Vec<PairedSample>, PretrainError> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |msg: String| PretrainError::Format { line: k + 1, msg };
        let rec: DatasetRecord = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        let mol = parse_smiles(&rec.smiles)
            .map_err(|e: MolError| fail(format!("{}: {e}", rec.smiles)))?;
        if rec.sentences.is_empty() {
            return Err(fail("no sentences".into()));
        }
        out.push(PairedSample {
            mol,
            sentences: rec.sentences,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub symmetric: bool,
    pub intra_text: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            batch_size: 64,
            lr: 1e-4,
            weight_decay: 1e-5,
            epochs: 50,
            seed: 0,
            symmetric: false,
            intra_text: false,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), PretrainError> {
        if self.temperature.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(PretrainError::Config("temperature must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(PretrainError::Config(
                "batch_size must be at least 2".into(),
            ));
        }
        if self.lr.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(PretrainError::Config("lr must be positive".into()));
        }
        Ok(())
    }

    pub fn flags(&self) -> LossFlags {
        LossFlags {
            tau: self.temperature,
            symmetric: self.symmetric,
            intra_text: self.intra_text,
        }
    }
}

/// Two distinct sentence indices (uniform over ordered pairs), or the only
/// sentence twice.
pub fn sample_sentences(len: usize, seed: u64) -> Result<(usize, usize), PretrainError> {
    match len {
        0 => Err(PretrainError::EmptyDocument),
        1 => Ok((0, 0)),
        n => {
            let mut r = rng::from_seed(seed);
            let a = r.random_range(0..n);
            let mut b = r.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            Ok((a, b))
        }
    }
}

/// Per-epoch record: mean of every loss term over the epoch's batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
    pub batches: usize,
    pub wall_time_s: f64,
}

/// Total loss and named terms for one batch of sample indices at a given
/// epoch.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<'g>(
    g: &'g Graph,
    model: &DualEncoder,
    data: &[PairedSample],
    tokens: &[Vec<Vec<usize>>],
    batch: &[usize],
    epoch: usize,
    cfg: &PretrainConfig,
    aug: &AugmentConfig,
) -> Result<
    (
        crate::tensor::Var<'g>,
        Vec<(&'static str, crate::tensor::Var<'g>)>,
    ),
    PretrainError,
> {
    let n = batch.len();
    let mut graphs = Vec::with_capacity(2 * n);
    let mut views_b = Vec::with_capacity(n);
    let mut seqs_a = Vec::with_capacity(n);
    let mut seqs_b = Vec::with_capacity(n);
    for &i in batch {
        let item = (epoch * data.len() + i) as u64;
        let (v1, v2) = sample_two_views(
            &data[i].mol,
            aug,
            rng::derive_seed(cfg.seed, "augment", item),
        );
        graphs.push(v1);
        views_b.push(v2);
        let (a, b) = sample_sentences(
            tokens[i].len(),
            rng::derive_seed(cfg.seed, "sentences", item),
        )?;
        seqs_a.push(tokens[i][a].clone());
        seqs_b.push(tokens[i][b].clone());
    }
    graphs.extend(views_b);
    seqs_a.extend(seqs_b);
    let refs: Vec<&MolGraph> = graphs.iter().collect();
    let zg = model.graph_embed(g, &refs)?;
    let zt = model.text_embed(g, &seqs_a)?;
    let views = BatchViews {
        z_g: zg.slice(0, 0, n)?,
        z_g_aug: zg.slice(0, n, n)?,
        z_t: zt.slice(0, 0, n)?,
        z_t_aug: zt.slice(0, n, n)?,
    };
    total_pretrain_loss(&views, cfg.flags())
}

/// Tokenizes every sentence; fails before training on sentences without tokens.
pub fn tokenize_dataset(
    model: &DualEncoder,
    data: &[PairedSample],
) -> Result<Vec<Vec<Vec<usize>>>, PretrainError> {
    data.iter()
        .enumerate()
        .map(|(k, s)| {
            if s.sentences.is_empty() {
                return Err(PretrainError::EmptyDocument);
            }
            s.sentences
                .iter()
                .map(|t| {
                    let ids = model.tokenize(t);
                    if ids.is_empty() {
                        Err(PretrainError::Format {
                            line: k + 1,
                            msg: format!("sentence '{t}' has no tokens"),
                        })
                    } else {
                        Ok(ids)
                    }
                })
                .collect()
        })
        .collect()
}

/// Trains `model` in place with AdamW. `on_epoch` sees every epoch's log and
/// the updated model (checkpointing hook).
pub fn pretrain_run(
    model: &mut DualEncoder,
    data: &[PairedSample],
    cfg: &PretrainConfig,
    aug: &AugmentConfig,
    mut on_epoch: impl FnMut(&EpochLog, &DualEncoder) -> Result<(), String>,
) -> Result<Vec<EpochLog>, PretrainError> {
    cfg.validate()?;
    aug.validate().map_err(PretrainError::Config)?;
    if data.is_empty() {
        return Err(PretrainError::EmptyDataset);
    }
    for s in data {
        GraphBatch::new(&[&s.mol], model.gin.config())?;
    }
    let tokens = tokenize_dataset(model, data)?;
    let mut opt = Adam::new(AdamConfig::adamw(cfg.lr, cfg.weight_decay), &model.store);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::indexed_stream(cfg.seed, "shuffle", epoch as u64));
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let grads = {
                let g = Graph::new();
                let (loss, terms) = batch_loss(&g, model, data, &tokens, batch, epoch, cfg, aug)?;
                for (name, v) in &terms {
                    *sums.entry((*name).to_string()).or_default() += v.item();
                }
                total += loss.item();
                g.backward(loss)?.for_store(&model.store)
            };
            batches += 1;
            opt.step(&mut model.store, &grads);
        }
        let denom = batches.max(1) as f64;
        let log = EpochLog {
            epoch: epoch + 1,
            terms: sums.into_iter().map(|(k, v)| (k, v / denom)).collect(),
            total: total / denom,
            batches,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&log, model).map_err(PretrainError::Callback)?;
        logs.push(log);
    }
    Ok(logs)
}
