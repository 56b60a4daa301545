//! Binary property prediction on top of a pretrained graph encoder:
//! skeleton-grouped splitting, ROC-AUC and repeated fine-tuning.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderError, GinConfig, GinEncoder, GraphBatch};
use crate::rng;
use crate::smiles::{
    canonical_key, parse_smiles, Atom, Bond, BondOrder, Element, MolError, MolGraph,
};
use crate::tensor::{Adam, AdamConfig, Graph, Linear, ParamStore, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum PropError {
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("line {line}: {source}")]
    Smiles { line: usize, source: MolError },
    #[error("ROC-AUC needs both classes")]
    SingleClass,
    #[error("scores and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("checkpoint does not match the encoder config: {0}")]
    CheckpointMismatch(String),
    #[error("no task has both classes in the test split")]
    NoEvaluableTask,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropRecord {
    pub smiles: String,
    /// One entry per task; `None` is a missing label.
    pub labels: Vec<Option<u8>>,
}

#[derive(Clone, Debug)]
pub struct PropDataset {
    pub num_tasks: usize,
    pub records: Vec<PropRecord>,
    pub graphs: Vec<MolGraph>,
}

impl PropDataset {
    pub fn new(records: Vec<PropRecord>) -> Result<Self, PropError> {
        let num_tasks = records.first().map_or(0, |r| r.labels.len());
        let mut graphs = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let line = i + 1;
            if r.labels.len() != num_tasks || num_tasks == 0 {
                return Err(PropError::Format {
                    line,
                    msg: format!("expected {num_tasks} labels, got {}", r.labels.len()),
                });
            }
            if r.labels.iter().flatten().any(|&y| y > 1) {
                return Err(PropError::Format {
                    line,
                    msg: "labels must be 0, 1 or null".into(),
                });
            }
            graphs.push(
                parse_smiles(&r.smiles).map_err(|source| PropError::Smiles { line, source })?,
            );
        }
        Ok(Self {
            num_tasks,
            records,
            graphs,
        })
    }

    /// One JSON object `{"smiles": ..., "labels": [...]}` per line.
    pub fn parse(text: &str) -> Result<Self, PropError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: PropRecord = serde_json::from_str(line).map_err(|e| PropError::Format {
                line: i + 1,
                msg: e.to_string(),
            })?;
            records.push(r);
        }
        Self::new(records)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Same molecules with each task's labels permuted across records.
    pub fn shuffled_labels(&self, seed: u64) -> Self {
        let mut out = self.clone();
        for t in 0..self.num_tasks {
            let mut col: Vec<Option<u8>> = self.records.iter().map(|r| r.labels[t]).collect();
            col.shuffle(&mut rng::indexed_stream(seed, "labels", t as u64));
            for (r, y) in out.records.iter_mut().zip(col) {
                r.labels[t] = y;
            }
        }
        out
    }
}

/// Canonical key of the molecule with every atom turned into carbon and every
/// bond into a plain single bond.
pub fn skeleton_key(g: &MolGraph) -> String {
    let atoms = vec![Atom::new(Element::C); g.num_atoms()];
    let bonds = g
        .bonds()
        .iter()
        .map(|b| Bond::new(b.i, b.j, BondOrder::Single))
        .collect();
    let skel = MolGraph::new(atoms, bonds).expect("same structure as a valid graph");
    canonical_key(&skel)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Groups molecules by [`skeleton_key`] and hands whole groups out, largest
/// first, to test, then valid, then train, each up to its share of the total.
/// Equal-sized groups are ordered by `seed`.
pub fn scaffold_split(
    graphs: &[MolGraph],
    fractions: [f64; 3],
    seed: u64,
) -> Result<Split, PropError> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(PropError::Config(format!(
            "split fractions {fractions:?} must sum to 1"
        )));
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, g) in graphs.iter().enumerate() {
        groups.entry(skeleton_key(g)).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    groups.shuffle(&mut rng::stream(seed, "scaffold"));
    groups.sort_by_key(|g| std::cmp::Reverse(g.len()));

    let n = graphs.len() as f64;
    let test_cap = fractions[2] * n;
    let valid_cap = fractions[1] * n;
    let mut split = Split::default();
    for group in groups {
        if (split.test.len() + group.len()) as f64 <= test_cap + 1e-9 {
            split.test.extend(group);
        } else if (split.valid.len() + group.len()) as f64 <= valid_cap + 1e-9 {
            split.valid.extend(group);
        } else {
            split.train.extend(group);
        }
    }
    for part in [&mut split.train, &mut split.valid, &mut split.test] {
        part.sort_unstable();
    }
    Ok(split)
}

/// Probability that a random positive scores above a random negative, ties
/// counting one half. Computed from midranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, PropError> {
    if scores.len() != labels.len() {
        return Err(PropError::LengthMismatch(scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(PropError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, q) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub runs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_head: f64,
    pub lr_encoder: f64,
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            runs: 10,
            epochs: 50,
            batch_size: 32,
            lr_head: 1e-3,
            lr_encoder: 1e-4,
            fractions: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub dataset: String,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub aucs: Vec<f64>,
}

/// Fresh GIN under prefix `gin` whose weights are copied from the same-named
/// entries of `checkpoint`.
pub fn load_gin(
    cfg: &GinConfig,
    checkpoint: &ParamStore,
) -> Result<(GinEncoder, ParamStore), PropError> {
    let mut store = ParamStore::new();
    let gin = GinEncoder::new(cfg.clone(), &mut store, "gin", &mut rng::from_seed(0))?;
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let src = checkpoint
            .id_of(&name)
            .ok_or_else(|| PropError::CheckpointMismatch(format!("missing parameter {name}")))?;
        let t = checkpoint.get(src);
        let id = store.id_of(&name).expect("just created");
        if t.shape() != store.get(id).shape() {
            return Err(PropError::CheckpointMismatch(format!(
                "{name}: checkpoint shape {:?}, config shape {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        store.set(&name, t.clone())?;
    }
    Ok((gin, store))
}

/// Pooled encoder features through a linear head, then masked binary
/// cross-entropy with logits.
fn batch_loss<'g>(
    g: &'g Graph,
    gin: &GinEncoder,
    enc: &ParamStore,
    head: &Linear,
    head_store: &ParamStore,
    data: &PropDataset,
    idx: &[usize],
) -> Result<Option<crate::tensor::Var<'g>>, PropError> {
    let t = data.num_tasks;
    let mut y = Vec::with_capacity(idx.len() * t);
    let mut m = Vec::with_capacity(idx.len() * t);
    for &i in idx {
        for l in &data.records[i].labels {
            y.push(l.map_or(0.0, f64::from));
            m.push(if l.is_some() { 1.0 } else { 0.0 });
        }
    }
    let count: f64 = m.iter().sum();
    if count == 0.0 {
        return Ok(None);
    }
    let graphs: Vec<&MolGraph> = idx.iter().map(|&i| &data.graphs[i]).collect();
    let h = gin.encode(g, enc, &graphs)?;
    let z = head.forward(g, head_store, &h)?;
    let y = g.constant(Tensor::new(&[idx.len(), t], y)?);
    let m = g.constant(Tensor::new(&[idx.len(), t], m)?);
    let loss = z
        .softplus()
        .sub(&z.mul(&y)?)?
        .mul(&m)?
        .sum()
        .scale(1.0 / count);
    Ok(Some(loss))
}

fn predict(
    gin: &GinEncoder,
    enc: &ParamStore,
    head: &Linear,
    head_store: &ParamStore,
    graphs: &[&MolGraph],
) -> Result<Tensor, PropError> {
    let g = Graph::inference();
    let h = gin.encode(&g, enc, graphs)?;
    Ok(head.forward(&g, head_store, &h)?.value())
}

/// Mean test ROC-AUC over tasks that have both classes in the test split.
fn test_auc(
    gin: &GinEncoder,
    enc: &ParamStore,
    head: &Linear,
    head_store: &ParamStore,
    data: &PropDataset,
    test: &[usize],
) -> Result<f64, PropError> {
    let graphs: Vec<&MolGraph> = test.iter().map(|&i| &data.graphs[i]).collect();
    let mut logits = Vec::new();
    for chunk in graphs.chunks(128) {
        logits.extend(predict(gin, enc, head, head_store, chunk)?.into_data());
    }
    let t = data.num_tasks;
    let mut aucs = Vec::new();
    for task in 0..t {
        let (mut s, mut y) = (Vec::new(), Vec::new());
        for (row, &i) in test.iter().enumerate() {
            if let Some(l) = data.records[i].labels[task] {
                s.push(logits[row * t + task]);
                y.push(l == 1);
            }
        }
        match roc_auc(&s, &y) {
            Ok(a) => aucs.push(a),
            Err(PropError::SingleClass) => {}
            Err(e) => return Err(e),
        }
    }
    if aucs.is_empty() {
        return Err(PropError::NoEvaluableTask);
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// One fine-tuning run: copy the encoder, attach a fresh head, train on
/// `split.train`, score `split.test`.
pub fn finetune_run(
    gin_cfg: &GinConfig,
    checkpoint: &ParamStore,
    data: &PropDataset,
    split: &Split,
    cfg: &FinetuneConfig,
    run_seed: u64,
) -> Result<f64, PropError> {
    let (gin, mut enc) = load_gin(gin_cfg, checkpoint)?;
    let mut head_store = ParamStore::new();
    let head = Linear::new(
        &mut head_store,
        "head",
        gin.out_dim(),
        data.num_tasks,
        &mut rng::stream(run_seed, "init"),
    );
    let mut enc_opt = Adam::new(AdamConfig::adam(cfg.lr_encoder), &enc);
    let mut head_opt = Adam::new(AdamConfig::adam(cfg.lr_head), &head_store);
    let mut order = split.train.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::indexed_stream(run_seed, "shuffle", epoch as u64));
        for idx in order.chunks(cfg.batch_size) {
            let g = Graph::new();
            let Some(loss) = batch_loss(&g, &gin, &enc, &head, &head_store, data, idx)? else {
                continue;
            };
            let grads = g.backward(loss)?;
            let (ge, gh) = (grads.for_store(&enc), grads.for_store(&head_store));
            enc_opt.step(&mut enc, &ge);
            head_opt.step(&mut head_store, &gh);
        }
    }
    test_auc(&gin, &enc, &head, &head_store, data, &split.test)
}

/// `cfg.runs` independent runs on one scaffold split; population standard
/// deviation, so a single run reports 0.
pub fn finetune_eval(
    name: &str,
    gin_cfg: &GinConfig,
    checkpoint: &ParamStore,
    data: &PropDataset,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport, PropError> {
    if cfg.runs == 0 || cfg.batch_size == 0 {
        return Err(PropError::Config(
            "runs and batch size must be positive".into(),
        ));
    }
    let split = scaffold_split(&data.graphs, cfg.fractions, cfg.seed)?;
    if split.train.is_empty() || split.test.is_empty() {
        return Err(PropError::Config(format!(
            "scaffold split left {} train and {} test molecules",
            split.train.len(),
            split.test.len()
        )));
    }
    GraphBatch::new(&data.graphs.iter().collect::<Vec<_>>(), gin_cfg)?;
    let seeds: Vec<u64> = (0..cfg.runs as u64)
        .map(|r| rng::derive_seed(cfg.seed, "run", r))
        .collect();
    let aucs = seeds
        .iter()
        .map(|&s| finetune_run(gin_cfg, checkpoint, data, &split, cfg, s))
        .collect::<Result<Vec<f64>, _>>()?;
    let k = aucs.len() as f64;
    let mean = aucs.iter().sum::<f64>() / k;
    let var = aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / k;
    Ok(FinetuneReport {
        dataset: name.to_string(),
        mean_auc: mean,
        std_auc: var.sqrt(),
        runs: cfg.runs,
        seeds,
        aucs,
    })
}
