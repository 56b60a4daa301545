//! Invertible flow generator over dense molecules and latent optimization
//! toward a text embedding.

mod correct;
mod flow;
mod generate;

pub use correct::validity_correct;
pub use flow::{Conditioning, Flow, FlowOut, GenConfig};
pub use generate::{generate_from_text, GenOptConfig, GenResult, TraceRecord};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoders::EncoderError;
use crate::rng;
use crate::smiles::{decode_argmax, to_dense, MolError, MolGraph};
use crate::tensor::{clip_grad_norm, Adam, AdamConfig, Graph, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error(transparent)]
    Mol(#[from] MolError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid flow configuration: {0}")]
    Config(String),
    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),
    #[error("prompt has no known tokens")]
    EmptyText,
    #[error("no training molecules")]
    EmptyDataset,
}

/// One-hot flow inputs of a molecule: atom rows flattened and the upper
/// triangle bond slots flattened.
pub fn encode_molecule(g: &MolGraph, cfg: &GenConfig) -> Result<(Vec<f64>, Vec<f64>), FlowError> {
    let d = to_dense(g, &cfg.dims)?;
    let n = cfg.dims.n_max;
    let cb = cfg.dims.c_b();
    let mut e = Vec::with_capacity(cfg.edge_dim());
    for (i, j) in cfg.pairs() {
        let at = (i * n + j) * cb;
        e.extend_from_slice(&d.e.data()[at..at + cb]);
    }
    Ok((d.v.into_data(), e))
}

/// Argmax decode of raw or probability flow outputs for one molecule.
pub fn decode(cfg: &GenConfig, v_rows: &[f64], e_slots: &[f64]) -> Result<MolGraph, FlowError> {
    let n = cfg.dims.n_max;
    let cb = cfg.dims.c_b();
    let v = Tensor::new(&[n, cfg.dims.c_a()], v_rows.to_vec())?;
    let mut e = vec![0.0; n * n * cb];
    for i in 0..n {
        e[(i * n + i) * cb + cfg.dims.no_bond_index()] = 1.0;
    }
    for (p, (i, j)) in cfg.pairs().into_iter().enumerate() {
        for c in 0..cb {
            let x = e_slots[p * cb + c];
            e[(i * n + j) * cb + c] = x;
            e[(j * n + i) * cb + c] = x;
        }
    }
    Ok(decode_argmax(&cfg.dims, &v, &Tensor::new(&[n, n, cb], e)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Anneal the learning rate from `lr` to zero along a half cosine over
    /// all steps.
    pub cosine: bool,
    /// Global gradient norm cap; 0 disables clipping.
    pub max_grad_norm: f64,
    /// Decay of the exponential moving average of the weights that is
    /// evaluated each epoch and returned; 0 keeps the raw weights.
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            cosine: true,
            max_grad_norm: 1.0,
            ema_decay: 0.995,
            seed: 0,
        }
    }
}

fn dequantized(
    onehot: &[Vec<f64>],
    idx: &[usize],
    width: f64,
    rng: &mut impl Rng,
) -> Result<Tensor, TensorError> {
    let d = onehot[0].len();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend(onehot[i].iter().map(|&x| x + width * rng.random::<f64>()));
    }
    Tensor::new(&[idx.len(), d], data)
}

/// Maximum-likelihood training with Adam. After every epoch the mean
/// per-dimension NLL of the whole training set is measured under one fixed
/// dequantization draw; the history of those values is returned.
pub fn train_flow(
    flow: &mut Flow,
    mols: &[MolGraph],
    cfg: &FlowTrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>, FlowError> {
    if mols.is_empty() {
        return Err(FlowError::EmptyDataset);
    }
    if cfg.batch_size == 0 || cfg.lr.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(FlowError::Config(
            "batch_size and lr must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&cfg.ema_decay) {
        return Err(FlowError::Config("ema_decay must lie in [0, 1)".into()));
    }
    let encoded = mols
        .iter()
        .map(|m| encode_molecule(m, &flow.config))
        .collect::<Result<Vec<_>, _>>()?;
    let (vs, es): (Vec<Vec<f64>>, Vec<Vec<f64>>) = encoded.into_iter().unzip();
    let mut opt = Adam::new(AdamConfig::adam(cfg.lr), &flow.store);
    let mut history = Vec::with_capacity(cfg.epochs);
    let total_steps = cfg.epochs * mols.len().div_ceil(cfg.batch_size);
    let mut step = 0;
    let mut ema = (cfg.ema_decay > 0.0).then(|| flow.store.clone());
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..mols.len()).collect();
        order.shuffle(&mut rng::indexed_stream(cfg.seed, "shuffle", epoch as u64));
        let mut noise = rng::indexed_stream(cfg.seed, "dequant", epoch as u64);
        for batch in order.chunks(cfg.batch_size) {
            let xv = dequantized(&vs, batch, flow.config.dequant, &mut noise)?;
            let xe = dequantized(&es, batch, flow.config.dequant, &mut noise)?;
            let mut grads = {
                let g = Graph::new();
                let out = flow.forward_flow(&g, &g.constant(xv), &g.constant(xe))?;
                g.backward(flow.nll(&out)?.mean())?.for_store(&flow.store)
            };
            if cfg.max_grad_norm > 0.0 {
                clip_grad_norm(&mut grads, cfg.max_grad_norm);
            }
            if cfg.cosine {
                let frac = step as f64 / total_steps as f64;
                opt.config.lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * frac).cos());
            }
            step += 1;
            opt.step(&mut flow.store, &grads);
            if let Some(avg) = ema.as_mut() {
                let d = cfg.ema_decay;
                for id in flow.store.ids() {
                    let cur = flow.store.get(id).data();
                    for (a, &x) in avg.get_mut(id).data_mut().iter_mut().zip(cur) {
                        *a = d * *a + (1.0 - d) * x;
                    }
                }
            }
        }
        if let Some(avg) = ema.as_mut() {
            std::mem::swap(&mut flow.store, avg);
        }
        let mean = dataset_nll(flow, &vs, &es, cfg.seed, cfg.batch_size)?;
        // Swap back so training continues from the raw weights; after the
        // last epoch the average stays in place.
        if let Some(avg) = ema.as_mut() {
            if epoch + 1 < cfg.epochs {
                std::mem::swap(&mut flow.store, avg);
            }
        }
        on_epoch(epoch + 1, mean);
        history.push(mean);
    }
    Ok(history)
}

fn dataset_nll(
    flow: &Flow,
    vs: &[Vec<f64>],
    es: &[Vec<f64>],
    seed: u64,
    chunk: usize,
) -> Result<f64, FlowError> {
    let idx: Vec<usize> = (0..vs.len()).collect();
    let mut noise = rng::stream(seed, "dequant");
    let mut sum = 0.0;
    for part in idx.chunks(chunk.max(1)) {
        let xv = dequantized(vs, part, flow.config.dequant, &mut noise)?;
        let xe = dequantized(es, part, flow.config.dequant, &mut noise)?;
        let g = Graph::inference();
        let out = flow.forward_flow(&g, &g.constant(xv), &g.constant(xe))?;
        sum += flow.nll(&out)?.value().data().iter().sum::<f64>();
    }
    Ok(sum / vs.len() as f64)
}

/// Mean per-dimension NLL of `mols` under one fixed dequantization draw.
pub fn evaluate_nll(flow: &Flow, mols: &[MolGraph], seed: u64) -> Result<f64, FlowError> {
    let encoded = mols
        .iter()
        .map(|m| encode_molecule(m, &flow.config))
        .collect::<Result<Vec<_>, _>>()?;
    let (vs, es): (Vec<Vec<f64>>, Vec<Vec<f64>>) = encoded.into_iter().unzip();
    dataset_nll(flow, &vs, &es, seed, 256)
}

/// A standard Gaussian latent `(q_v, q_e)` for one molecule.
pub fn sample_latent(cfg: &GenConfig, rng: &mut impl Rng) -> (Tensor, Tensor) {
    let mut draw = |d: usize| {
        Tensor::new(
            &[1, d],
            (0..d).map(|_| rng.sample(StandardNormal)).collect(),
        )
        .expect("shape")
    };
    let qv = draw(cfg.atom_dim());
    let qe = draw(cfg.edge_dim());
    (qv, qe)
}

/// Argmax decode of a latent before any correction.
pub fn decode_latent(flow: &Flow, q_v: &Tensor, q_e: &Tensor) -> Result<MolGraph, FlowError> {
    let g = Graph::inference();
    let (x_v, x_e) = flow.reverse_raw(&g, &g.constant(q_v.clone()), &g.constant(q_e.clone()))?;
    decode(&flow.config, x_v.value().data(), x_e.value().data())
}

/// Raw decode of a prior sample (possibly invalid) and its corrected form.
pub fn sample_raw(flow: &Flow, seed: u64) -> Result<(MolGraph, MolGraph), FlowError> {
    let (qv, qe) = sample_latent(&flow.config, &mut rng::stream(seed, "latent"));
    let raw = decode_latent(flow, &qv, &qe)?;
    let fixed = validity_correct(&raw);
    Ok((raw, fixed))
}

pub fn sample_molecule(flow: &Flow, seed: u64) -> Result<MolGraph, FlowError> {
    Ok(sample_raw(flow, seed)?.1)
}

#[cfg(test)]
mod tests;
