use serde::{Deserialize, Serialize};

use super::tokenizer::PAD_ID;
use super::EncoderError;
use crate::tensor::{Graph, Linear, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2,
            dim: 128,
            layers: 4,
            heads: 4,
            ff_dim: 256,
            max_len: 256,
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(EncoderError::Config(format!(
                "model dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.vocab_size < 2 || self.max_len == 0 || self.ff_dim == 0 {
            return Err(EncoderError::Config(
                "vocab_size ≥ 2, max_len ≥ 1 and ff_dim ≥ 1 required".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (ParamId, ParamId),
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: (ParamId, ParamId),
    ff1: Linear,
    ff2: Linear,
}

/// Pre-norm transformer encoder with learned positions and masked mean pooling.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    cfg: TextConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
}

fn norm_params(store: &mut ParamStore, name: &str, dim: usize) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
        store.zeros(format!("{name}.bias"), &[dim]),
    )
}

fn norm<'g>(
    g: &'g Graph,
    store: &ParamStore,
    x: &Var<'g>,
    p: (ParamId, ParamId),
) -> Result<Var<'g>, EncoderError> {
    Ok(x.layer_norm_last()
        .mul_last(&g.param(store, p.0))?
        .add_last(&g.param(store, p.1))?)
}

impl TextEncoder {
    pub fn new(
        cfg: TextConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut impl rand::Rng,
    ) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let d = cfg.dim;
        let std = 1.0 / (d as f64).sqrt();
        let tok_emb = store.normal_std(format!("{prefix}.tok_emb"), &[cfg.vocab_size, d], std, rng);
        let pos_emb = store.normal_std(
            format!("{prefix}.pos_emb"),
            &[cfg.max_len, d],
            std * 0.1,
            rng,
        );
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("{prefix}.block{l}");
                Block {
                    ln1: norm_params(store, &format!("{p}.ln1"), d),
                    q: Linear::new(store, &format!("{p}.q"), d, d, rng),
                    k: Linear::new(store, &format!("{p}.k"), d, d, rng),
                    v: Linear::new(store, &format!("{p}.v"), d, d, rng),
                    o: Linear::new(store, &format!("{p}.o"), d, d, rng),
                    ln2: norm_params(store, &format!("{p}.ln2"), d),
                    ff1: Linear::new(store, &format!("{p}.ff1"), d, cfg.ff_dim, rng),
                    ff2: Linear::new(store, &format!("{p}.ff2"), cfg.ff_dim, d, rng),
                }
            })
            .collect();
        let ln_f = norm_params(store, &format!("{prefix}.ln_f"), d);
        Ok(Self {
            cfg,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
        })
    }

    pub fn config(&self) -> &TextConfig {
        &self.cfg
    }

    pub fn out_dim(&self) -> usize {
        self.cfg.dim
    }

    /// Pooled features `[batch, dim]`. Pad ids (0) inside a sequence are
    /// treated as padding; sequences are truncated to `max_len`.
    pub fn encode<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        seqs: &[Vec<usize>],
    ) -> Result<Var<'g>, EncoderError> {
        let b = seqs.len();
        let seqs: Vec<&[usize]> = seqs
            .iter()
            .map(|s| &s[..s.len().min(self.cfg.max_len)])
            .collect();
        if b == 0 || seqs.iter().any(|s| s.iter().all(|&t| t == PAD_ID)) {
            return Err(EncoderError::EmptySequence);
        }
        if let Some(&bad) = seqs
            .iter()
            .flat_map(|s| s.iter())
            .find(|&&t| t >= self.cfg.vocab_size)
        {
            return Err(EncoderError::Vocabulary(format!(
                "token id {bad} ≥ vocabulary size {}",
                self.cfg.vocab_size
            )));
        }
        let l = seqs.iter().map(|s| s.len()).max().unwrap();
        let (d, heads) = (self.cfg.dim, self.cfg.heads);
        let dh = d / heads;

        let mut ids = vec![PAD_ID; b * l];
        let mut pos = vec![0; b * l];
        let mut live = vec![false; b * l];
        for (i, s) in seqs.iter().enumerate() {
            for (t, &tok) in s.iter().enumerate() {
                ids[i * l + t] = tok;
                live[i * l + t] = tok != PAD_ID;
            }
            for t in 0..l {
                pos[i * l + t] = t;
            }
        }
        let mut mask = vec![0.0; b * l * l];
        for i in 0..b {
            for q in 0..l {
                for k in 0..l {
                    if !live[i * l + k] {
                        mask[(i * l + q) * l + k] = -1e30;
                    }
                }
            }
        }
        let mask = g.constant(Tensor::new(&[b, l, l], mask).unwrap());

        let mut x = g
            .param(store, self.tok_emb)
            .gather_rows(&ids)?
            .add(&g.param(store, self.pos_emb).gather_rows(&pos)?)?;
        let scale = 1.0 / (dh as f64).sqrt();
        for blk in &self.blocks {
            let hn = norm(g, store, &x, blk.ln1)?;
            let q = blk.q.forward(g, store, &hn)?;
            let k = blk.k.forward(g, store, &hn)?;
            let v = blk.v.forward(g, store, &hn)?;
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let split = |m: &Var<'g>| -> Result<Var<'g>, EncoderError> {
                    Ok(m.slice(1, h * dh, dh)?.reshape(&[b, l, dh])?)
                };
                let scores = split(&q)?
                    .bmm(&split(&k)?.transpose_last2()?)?
                    .scale(scale)
                    .add(&mask)?
                    .softmax_last();
                outs.push(scores.bmm(&split(&v)?)?.reshape(&[b * l, dh])?);
            }
            let attn = if heads == 1 {
                outs[0]
            } else {
                Var::concat(&outs, 1)?
            };
            x = x.add(&blk.o.forward(g, store, &attn)?)?;
            let hn = norm(g, store, &x, blk.ln2)?;
            let ff = blk
                .ff2
                .forward(g, store, &blk.ff1.forward(g, store, &hn)?.relu())?;
            x = x.add(&ff)?;
        }
        let x = norm(g, store, &x, self.ln_f)?;

        let rows: Vec<usize> = (0..b * l).filter(|&r| live[r]).collect();
        let owner: Vec<usize> = rows.iter().map(|&r| r / l).collect();
        let inv: Vec<f64> = (0..b)
            .map(|i| 1.0 / owner.iter().filter(|&&o| o == i).count() as f64)
            .collect();
        Ok(x.gather_rows(&rows)?
            .scatter_add_rows(&owner, b)?
            .mul_rows(&g.constant(Tensor::vector(inv)))?)
    }
}
