use serde::{Deserialize, Serialize};

use super::EncoderError;
use crate::smiles::{Bond, Element, MolGraph};
use crate::tensor::{Graph, Linear, ParamId, ParamStore, Tensor, Var};

/// Bond channels of the edge embeddings: single, double, triple, aromatic.
pub const BOND_CHANNELS: usize = 4;

pub fn bond_channel(b: &Bond) -> usize {
    if b.aromatic {
        3
    } else {
        b.order.index()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GinConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    /// Atom vocabulary; one extra embedding row serves as "pad".
    pub atom_types: Vec<Element>,
    pub learn_eps: bool,
}

impl Default for GinConfig {
    fn default() -> Self {
        Self {
            num_layers: 5,
            hidden_dim: 300,
            atom_types: Element::ALL.to_vec(),
            learn_eps: true,
        }
    }
}

impl GinConfig {
    pub fn c_a(&self) -> usize {
        self.atom_types.len() + 1
    }

    pub fn c_b(&self) -> usize {
        BOND_CHANNELS
    }

    pub fn pad_row(&self) -> usize {
        self.atom_types.len()
    }

    pub fn atom_row(&self, e: Element) -> Option<usize> {
        self.atom_types.iter().position(|&t| t == e)
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.num_layers == 0 || self.hidden_dim == 0 || self.atom_types.is_empty() {
            return Err(EncoderError::Config(
                "GIN needs at least one layer, hidden unit and atom type".into(),
            ));
        }
        Ok(())
    }
}

/// Nodes and directed edges of several graphs stacked together.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GraphBatch {
    pub atom_rows: Vec<usize>,
    pub chirality: Vec<usize>,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub edge_types: Vec<usize>,
    pub node_graph: Vec<usize>,
    pub counts: Vec<usize>,
}

impl GraphBatch {
    pub fn new(graphs: &[&MolGraph], cfg: &GinConfig) -> Result<Self, EncoderError> {
        let mut b = GraphBatch::default();
        for (gi, g) in graphs.iter().enumerate() {
            if g.is_empty() {
                return Err(EncoderError::EmptyGraph);
            }
            let offset = b.atom_rows.len();
            for a in g.atoms() {
                let row = cfg.atom_row(a.element).ok_or_else(|| {
                    EncoderError::Vocabulary(format!(
                        "element {} not in the encoder vocabulary",
                        a.element
                    ))
                })?;
                b.atom_rows.push(row);
                b.chirality.push(a.chirality.index());
                b.node_graph.push(gi);
            }
            for bond in g.bonds() {
                let t = bond_channel(bond);
                for (s, d) in [(bond.i, bond.j), (bond.j, bond.i)] {
                    b.src.push(offset + s);
                    b.dst.push(offset + d);
                    b.edge_types.push(t);
                }
            }
            b.counts.push(g.num_atoms());
        }
        Ok(b)
    }

    pub fn num_nodes(&self) -> usize {
        self.atom_rows.len()
    }

    pub fn num_graphs(&self) -> usize {
        self.counts.len()
    }
}

/// Soft input for one graph: the kept rows of a probability atom matrix plus
/// hard edges between them (local indices, bond channel).
#[derive(Clone, Debug, PartialEq)]
pub struct SoftGraph {
    pub rows: Vec<usize>,
    pub edges: Vec<(usize, usize, usize)>,
}

#[derive(Clone, Debug)]
struct GinLayer {
    bond_emb: ParamId,
    eps: Option<ParamId>,
    lin1: Linear,
    lin2: Linear,
}

/// Edge-featured GIN with mean pooling.
#[derive(Clone, Debug)]
pub struct GinEncoder {
    cfg: GinConfig,
    atom_emb: ParamId,
    chir_emb: ParamId,
    layers: Vec<GinLayer>,
}

impl GinEncoder {
    pub fn new(
        cfg: GinConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut impl rand::Rng,
    ) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let h = cfg.hidden_dim;
        let emb_std = 1.0 / (h as f64).sqrt();
        let atom_emb =
            store.normal_std(format!("{prefix}.atom_emb"), &[cfg.c_a(), h], emb_std, rng);
        let chir_emb = store.normal_std(format!("{prefix}.chirality_emb"), &[3, h], emb_std, rng);
        let layers = (0..cfg.num_layers)
            .map(|l| GinLayer {
                bond_emb: store.normal_std(
                    format!("{prefix}.layer{l}.bond_emb"),
                    &[BOND_CHANNELS, h],
                    emb_std,
                    rng,
                ),
                eps: cfg
                    .learn_eps
                    .then(|| store.zeros(format!("{prefix}.layer{l}.eps"), &[1])),
                lin1: Linear::new(store, &format!("{prefix}.layer{l}.mlp1"), h, 2 * h, rng),
                lin2: Linear::new(store, &format!("{prefix}.layer{l}.mlp2"), 2 * h, h, rng),
            })
            .collect();
        Ok(Self {
            cfg,
            atom_emb,
            chir_emb,
            layers,
        })
    }

    pub fn config(&self) -> &GinConfig {
        &self.cfg
    }

    pub fn out_dim(&self) -> usize {
        self.cfg.hidden_dim
    }

    /// Pooled features `[num_graphs, hidden_dim]`.
    pub fn encode<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        graphs: &[&MolGraph],
    ) -> Result<Var<'g>, EncoderError> {
        let batch = GraphBatch::new(graphs, &self.cfg)?;
        self.encode_batch(g, store, &batch)
    }

    pub fn encode_batch<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        batch: &GraphBatch,
    ) -> Result<Var<'g>, EncoderError> {
        if batch.num_nodes() == 0 {
            return Err(EncoderError::EmptyGraph);
        }
        let h0 = g
            .param(store, self.atom_emb)
            .gather_rows(&batch.atom_rows)?
            .add(
                &g.param(store, self.chir_emb)
                    .gather_rows(&batch.chirality)?,
            )?;
        self.propagate(g, store, h0, batch)
    }

    /// Soft mode: the first-layer atom embedding of kept row `r` is
    /// `Σ_c V̂[r, c] · emb[channel_rows[c]]`; differentiable in `vhat`.
    pub fn encode_soft<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        vhat: &Var<'g>,
        channel_rows: &[usize],
        soft: &SoftGraph,
    ) -> Result<Var<'g>, EncoderError> {
        let shape = vhat.shape();
        if shape.len() != 2 || shape[1] != channel_rows.len() {
            return Err(EncoderError::Vocabulary(format!(
                "atom matrix {:?} does not match {} channel mappings",
                shape,
                channel_rows.len()
            )));
        }
        if let Some(&bad) = channel_rows.iter().find(|&&r| r >= self.cfg.c_a()) {
            return Err(EncoderError::Vocabulary(format!(
                "channel row {bad} outside the encoder vocabulary"
            )));
        }
        if soft.rows.is_empty() {
            return Err(EncoderError::EmptyGraph);
        }
        let k = soft.rows.len();
        let mut batch = GraphBatch {
            atom_rows: vec![0; k],
            chirality: vec![0; k],
            node_graph: vec![0; k],
            counts: vec![k],
            ..Default::default()
        };
        for &(i, j, t) in &soft.edges {
            if i >= k || j >= k || i == j || t >= BOND_CHANNELS {
                return Err(EncoderError::Vocabulary(format!(
                    "invalid soft edge ({i}, {j}, {t})"
                )));
            }
            for (s, d) in [(i, j), (j, i)] {
                batch.src.push(s);
                batch.dst.push(d);
                batch.edge_types.push(t);
            }
        }
        let table = g.param(store, self.atom_emb).gather_rows(channel_rows)?;
        let h0 = vhat.gather_rows(&soft.rows)?.matmul(&table)?.add(
            &g.param(store, self.chir_emb)
                .gather_rows(&batch.chirality)?,
        )?;
        self.propagate(g, store, h0, &batch)
    }

    fn propagate<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        h0: Var<'g>,
        batch: &GraphBatch,
    ) -> Result<Var<'g>, EncoderError> {
        let n = batch.num_nodes();
        let hd = self.cfg.hidden_dim;
        let mut h = h0;
        for (l, layer) in self.layers.iter().enumerate() {
            let self_term = match layer.eps {
                Some(eps) => h.mul_last(
                    &g.param(store, eps)
                        .gather_flat(&vec![0; hd])?
                        .add_scalar(1.0),
                )?,
                None => h,
            };
            let pre = if batch.src.is_empty() {
                self_term
            } else {
                let msg = h.gather_rows(&batch.src)?.add(
                    &g.param(store, layer.bond_emb)
                        .gather_rows(&batch.edge_types)?,
                )?;
                self_term.add(&msg.scatter_add_rows(&batch.dst, n)?)?
            };
            h = layer
                .lin2
                .forward(g, store, &layer.lin1.forward(g, store, &pre)?.relu())?;
            if l + 1 < self.layers.len() {
                h = h.relu();
            }
        }
        let inv: Vec<f64> = batch.counts.iter().map(|&c| 1.0 / c as f64).collect();
        let pooled = h
            .scatter_add_rows(&batch.node_graph, batch.num_graphs())?
            .mul_rows(&g.constant(Tensor::vector(inv)))?;
        Ok(pooled)
    }
}
