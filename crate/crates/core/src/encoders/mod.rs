//! Graph and text encoders, projection heads, and the dual-encoder bundle.

mod gin;
mod text;
pub mod tokenizer;

pub use gin::{bond_channel, GinConfig, GinEncoder, GraphBatch, SoftGraph, BOND_CHANNELS};
pub use text::{TextConfig, TextEncoder};
pub use tokenizer::{split_words, Vocab, PAD_ID, UNK_ID};

use serde::{Deserialize, Serialize};

use crate::smiles::MolGraph;
use crate::tensor::{Graph, Linear, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EncoderError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("graph has no atoms")]
    EmptyGraph,
    #[error("token sequence is empty")]
    EmptySequence,
    #[error("vocabulary mismatch: {0}")]
    Vocabulary(String),
    #[error("invalid encoder configuration: {0}")]
    Config(String),
}

/// Two-layer perceptron `W2 relu(W1 x + b1) + b2`, hidden width = input width.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    lin1: Linear,
    lin2: Linear,
    in_dim: usize,
    out_dim: usize,
}

impl ProjectionHead {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        Self {
            lin1: Linear::new(store, &format!("{prefix}.fc1"), in_dim, in_dim, rng),
            lin2: Linear::new(store, &format!("{prefix}.fc2"), in_dim, out_dim, rng),
            in_dim,
            out_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        x: &Var<'g>,
    ) -> Result<Var<'g>, EncoderError> {
        let shape = x.shape();
        if shape.last() != Some(&self.in_dim) {
            return Err(TensorError::ShapeMismatch {
                op: "project",
                lhs: shape,
                rhs: vec![self.in_dim],
            }
            .into());
        }
        Ok(self
            .lin2
            .forward(g, store, &self.lin1.forward(g, store, x)?.relu())?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub gin: GinConfig,
    pub text: TextConfig,
    pub proj_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            gin: GinConfig::default(),
            text: TextConfig::default(),
            proj_dim: 256,
        }
    }
}

/// Graph encoder, text encoder and both projection heads over one parameter
/// store. Parameter names are prefixed `gin.`, `text.`, `graph_proj.` and
/// `text_proj.`.
#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub gin: GinEncoder,
    pub text: TextEncoder,
    pub graph_head: ProjectionHead,
    pub text_head: ProjectionHead,
}

/// Embeddings are computed in chunks of this many items at inference time.
const INFER_CHUNK: usize = 128;

impl DualEncoder {
    /// Fresh model; `config.text.vocab_size` is taken from `vocab`.
    pub fn new(
        mut config: ModelConfig,
        vocab: Vocab,
        rng: &mut impl rand::Rng,
    ) -> Result<Self, EncoderError> {
        config.text.vocab_size = vocab.len();
        if config.proj_dim == 0 {
            return Err(EncoderError::Config(
                "projection dim must be positive".into(),
            ));
        }
        let mut store = ParamStore::new();
        let gin = GinEncoder::new(config.gin.clone(), &mut store, "gin", rng)?;
        let text = TextEncoder::new(config.text.clone(), &mut store, "text", rng)?;
        let graph_head = ProjectionHead::new(
            &mut store,
            "graph_proj",
            gin.out_dim(),
            config.proj_dim,
            rng,
        );
        let text_head = ProjectionHead::new(
            &mut store,
            "text_proj",
            text.out_dim(),
            config.proj_dim,
            rng,
        );
        Ok(Self {
            config,
            vocab,
            store,
            gin,
            text,
            graph_head,
            text_head,
        })
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        self.vocab.tokenize(text, self.config.text.max_len)
    }

    /// Projected graph embeddings `[B, proj_dim]`.
    pub fn graph_embed<'g>(
        &self,
        g: &'g Graph,
        graphs: &[&MolGraph],
    ) -> Result<Var<'g>, EncoderError> {
        let h = self.gin.encode(g, &self.store, graphs)?;
        self.graph_head.forward(g, &self.store, &h)
    }

    /// Projected text embeddings `[B, proj_dim]` from token ids.
    pub fn text_embed<'g>(
        &self,
        g: &'g Graph,
        seqs: &[Vec<usize>],
    ) -> Result<Var<'g>, EncoderError> {
        let h = self.text.encode(g, &self.store, seqs)?;
        self.text_head.forward(g, &self.store, &h)
    }

    pub fn embed_graphs(&self, graphs: &[&MolGraph]) -> Result<Tensor, EncoderError> {
        let mut rows = Vec::new();
        for chunk in graphs.chunks(INFER_CHUNK) {
            let g = Graph::inference();
            rows.extend(self.graph_embed(&g, chunk)?.value().into_data());
        }
        Ok(Tensor::new(&[graphs.len(), self.config.proj_dim], rows)?)
    }

    pub fn embed_texts(&self, texts: &[&str]) -> Result<Tensor, EncoderError> {
        let seqs: Vec<Vec<usize>> = texts.iter().map(|t| self.tokenize(t)).collect();
        let mut rows = Vec::new();
        for chunk in seqs.chunks(INFER_CHUNK) {
            let g = Graph::inference();
            rows.extend(self.text_embed(&g, chunk)?.value().into_data());
        }
        Ok(Tensor::new(&[texts.len(), self.config.proj_dim], rows)?)
    }
}
