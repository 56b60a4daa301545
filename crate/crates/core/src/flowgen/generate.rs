use serde::{Deserialize, Serialize};

use super::{decode, sample_latent, validity_correct, Flow, FlowError};
use crate::encoders::{DualEncoder, SoftGraph};
use crate::rng;
use crate::smiles::MolGraph;
use crate::tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenOptConfig {
    pub max_iters: usize,
    pub lr: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenOptConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            lr: 0.05,
            temperature: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub loss: f64,
    pub cosine: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenResult {
    pub mol: MolGraph,
    /// `ℓ_q` at the initial latent and after every update.
    pub trace: Vec<TraceRecord>,
}

/// Maps flow atom channels (pad last) to rows of the graph encoder's atom
/// table and flow bond types to its bond channels.
fn channel_maps(model: &DualEncoder, flow: &Flow) -> Result<(Vec<usize>, Vec<usize>), FlowError> {
    let gin = model.gin.config();
    let mut rows = Vec::with_capacity(flow.config.dims.c_a());
    for &e in &flow.config.dims.atom_types {
        rows.push(gin.atom_row(e).ok_or_else(|| {
            FlowError::Incompatible(format!("graph encoder has no embedding for {e}"))
        })?);
    }
    rows.push(gin.pad_row());
    let bonds = flow
        .config
        .dims
        .bond_types
        .iter()
        .map(|b| b.index())
        .collect();
    Ok((rows, bonds))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = k;
        }
    }
    best
}

/// Nodes are the rows whose most likely type is not pad (row 0 when every
/// row is pad); edges follow the hard bond decode among them.
fn hard_structure(
    flow: &Flow,
    vhat: &Tensor,
    slots: &Tensor,
    bond_channels: &[usize],
) -> SoftGraph {
    let pad = flow.config.dims.pad_index();
    let no_bond = flow.config.dims.no_bond_index();
    let mut rows: Vec<usize> = (0..flow.config.dims.n_max)
        .filter(|&i| argmax(vhat.row(i)) != pad)
        .collect();
    if rows.is_empty() {
        rows.push(0);
    }
    let mut local = vec![usize::MAX; flow.config.dims.n_max];
    for (k, &r) in rows.iter().enumerate() {
        local[r] = k;
    }
    let mut edges = Vec::new();
    for (p, (i, j)) in flow.config.pairs().into_iter().enumerate() {
        let t = argmax(slots.row(p));
        if t != no_bond && local[i] != usize::MAX && local[j] != usize::MAX {
            edges.push((local[i], local[j], bond_channels[t]));
        }
    }
    SoftGraph { rows, edges }
}

/// Optimizes the flow latent so that the soft-encoded decode matches the text
/// embedding; encoder and flow weights stay frozen.
pub fn generate_from_text(
    text: &str,
    model: &DualEncoder,
    flow: &Flow,
    cfg: &GenOptConfig,
) -> Result<GenResult, FlowError> {
    if cfg.lr.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(FlowError::Config("lr must be positive".into()));
    }
    let tokens = model.tokenize(text);
    if tokens.is_empty() || tokens.iter().all(|&t| t == crate::encoders::UNK_ID) {
        return Err(FlowError::EmptyText);
    }
    let (channel_rows, bond_channels) = channel_maps(model, flow)?;
    let z_t = {
        let g = Graph::inference();
        model.text_embed(&g, &[tokens])?.value()
    };
    let (qv0, qe0) = sample_latent(&flow.config, &mut rng::stream(cfg.seed, "latent"));
    let (dv, de) = (qv0.numel(), qe0.numel());
    let mut q_store = ParamStore::new();
    let q_id = q_store.add(
        "q",
        Tensor::new(&[1, dv + de], [qv0.into_data(), qe0.into_data()].concat())?,
    );
    let mut opt = Adam::new(AdamConfig::adam(cfg.lr), &q_store);

    let mut trace = Vec::with_capacity(cfg.max_iters + 1);
    for iteration in 0..=cfg.max_iters {
        let g = Graph::new().with_frozen_params();
        let q = g.variable(q_store.get(q_id).clone());
        let q_v = q.slice(1, 0, dv)?;
        let q_e = q.slice(1, dv, de)?;
        let (vhat, slots) = flow.reverse_flow(&g, &q_v, &q_e)?;
        let soft = hard_structure(flow, &vhat.value(), &slots.value(), &bond_channels);
        let h = model
            .gin
            .encode_soft(&g, &model.store, &vhat, &channel_rows, &soft)?;
        let z_g = model.graph_head.forward(&g, &model.store, &h)?;
        let cosine = z_g.cosine(&g.constant(z_t.clone()))?.sum();
        let loss = cosine.scale(-1.0 / cfg.temperature);
        trace.push(TraceRecord {
            iteration,
            loss: loss.item(),
            cosine: cosine.item(),
        });
        if iteration == cfg.max_iters {
            break;
        }
        let grad = g
            .backward(loss)?
            .wrt(q)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&[1, dv + de]));
        opt.step(&mut q_store, &[Some(grad)]);
    }

    let q = q_store.get(q_id).data();
    let (qv, qe) = (
        Tensor::new(&[1, dv], q[..dv].to_vec())?,
        Tensor::new(&[1, de], q[dv..].to_vec())?,
    );
    let g = Graph::inference();
    let (x_v, x_e) = flow.reverse_raw(&g, &g.constant(qv), &g.constant(qe))?;
    let raw = decode(&flow.config, x_v.value().data(), x_e.value().data())?;
    Ok(GenResult {
        mol: validity_correct(&raw),
        trace,
    })
}
