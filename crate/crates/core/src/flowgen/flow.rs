//! Affine coupling flows: an unconditional flow over bond slots and an atom
//! flow conditioned on the normalized soft bond tensor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FlowError;
use crate::smiles::DenseDims;
use crate::tensor::{Graph, Linear, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub dims: DenseDims,
    /// Coupling layers in each of the two flows.
    pub coupling_layers: usize,
    /// Width of the uniform dequantization noise added to one-hot entries.
    pub dequant: f64,
    pub edge_hidden: usize,
    pub atom_hidden: usize,
    /// Log-scales are `scale_limit · tanh(raw)`.
    pub scale_limit: f64,
    /// Bond probabilities are `softmax(bond_sharpness · x_e)` per slot.
    pub bond_sharpness: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            dims: DenseDims::default(),
            coupling_layers: 6,
            dequant: 0.6,
            edge_hidden: 128,
            atom_hidden: 64,
            scale_limit: 2.0,
            bond_sharpness: 10.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        self.dims.validate()?;
        if self.coupling_layers == 0 || self.edge_hidden == 0 || self.atom_hidden == 0 {
            return Err(FlowError::Config(
                "layer counts and widths must be positive".into(),
            ));
        }
        if !(self.dequant > 0.0 && self.dequant < 1.0) {
            return Err(FlowError::Config("dequant must lie in (0, 1)".into()));
        }
        if self.scale_limit.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(FlowError::Config("scale_limit must be positive".into()));
        }
        if self.bond_sharpness.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(FlowError::Config("bond_sharpness must be positive".into()));
        }
        Ok(())
    }

    /// Unordered atom pairs `(i, j)`, `i < j`, in row-major order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let n = self.dims.n_max;
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect()
    }

    /// Length of `q_v`.
    pub fn atom_dim(&self) -> usize {
        self.dims.n_max * self.dims.c_a()
    }

    /// Length of `q_e` (upper triangle only; the diagonal is always "no bond").
    pub fn edge_dim(&self) -> usize {
        self.pairs().len() * self.dims.c_b()
    }

    pub fn latent_dim(&self) -> usize {
        self.atom_dim() + self.edge_dim()
    }
}

struct EdgeCoupling {
    hidden: Linear,
    out: Linear,
}

struct AtomCoupling {
    self_w: ParamId,
    bond_w: Vec<ParamId>,
    degree: ParamId,
    pos: ParamId,
    out: Linear,
}

/// Both flows and their fixed masks. Coupling outputs are zero-initialized,
/// so a fresh flow is the identity.
pub struct Flow {
    pub config: GenConfig,
    pub store: ParamStore,
    edge: Vec<EdgeCoupling>,
    atom: Vec<AtomCoupling>,
    /// `[edge_dim]` per layer: 1 where the entry conditions, 0 where it is
    /// transformed.
    edge_masks: Vec<Tensor>,
    atom_masks: Vec<Tensor>,
    /// Flat index into `[probs ; 0]` for every `(i, j)` of each real bond
    /// channel's dense `N × N` matrix.
    dense_index: Vec<Vec<usize>>,
}

impl Clone for Flow {
    fn clone(&self) -> Self {
        Self::from_store(self.config.clone(), self.store.clone()).expect("valid flow")
    }
}

impl std::fmt::Debug for Flow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Flow")
            .field("config", &self.config)
            .field("params", &self.store.num_values())
            .finish()
    }
}

/// Checkerboard over slots and channels. Layer `l` groups the channels of a
/// slot by bit `l mod 3` of the channel index, so any two of up to eight
/// channels are split within three consecutive layers; the slot parity flips
/// every three layers.
pub(super) fn mask_bit(l: usize, slot: usize, c: usize) -> f64 {
    let group = (c >> (l % 3)) & 1;
    ((slot + group + l / 3) % 2) as f64
}

fn layer_names(cfg: &GenConfig) -> Vec<(String, Vec<usize>)> {
    let (ed, eh) = (cfg.edge_dim(), cfg.edge_hidden);
    let (n, ca, ah) = (cfg.dims.n_max, cfg.dims.c_a(), cfg.atom_hidden);
    let real = cfg.dims.bond_types.len();
    let mut out = Vec::new();
    for l in 0..cfg.coupling_layers {
        let p = format!("edge{l}");
        out.push((format!("{p}.hidden.weight"), vec![ed, eh]));
        out.push((format!("{p}.hidden.bias"), vec![eh]));
        out.push((format!("{p}.out.weight"), vec![eh, 2 * ed]));
        out.push((format!("{p}.out.bias"), vec![2 * ed]));
    }
    for l in 0..cfg.coupling_layers {
        let p = format!("atom{l}");
        out.push((format!("{p}.self"), vec![ca, ah]));
        for c in 0..real {
            out.push((format!("{p}.bond{c}"), vec![ca, ah]));
        }
        out.push((format!("{p}.degree"), vec![real, ah]));
        out.push((format!("{p}.pos"), vec![n, ah]));
        out.push((format!("{p}.out.weight"), vec![ah, 2 * ca]));
        out.push((format!("{p}.out.bias"), vec![2 * ca]));
    }
    out
}

impl Flow {
    pub fn new(config: GenConfig, rng: &mut impl Rng) -> Result<Self, FlowError> {
        config.validate()?;
        let mut store = ParamStore::new();
        for (name, shape) in layer_names(&config) {
            let zero_init = name.contains(".out.") || name.ends_with(".bias");
            if zero_init {
                store.zeros(name, &shape);
            } else {
                let std = 1.0 / (shape[0] as f64).sqrt();
                store.normal_std(name, &shape, std, rng);
            }
        }
        Self::from_store(config, store)
    }

    /// Binds a parameter table (e.g. from a checkpoint); every expected
    /// tensor must be present with its configured shape.
    pub fn from_store(config: GenConfig, store: ParamStore) -> Result<Self, FlowError> {
        config.validate()?;
        for (name, shape) in layer_names(&config) {
            let id = store
                .id_of(&name)
                .ok_or_else(|| FlowError::ShapeMismatch(format!("missing flow tensor {name}")))?;
            if store.get(id).shape() != shape.as_slice() {
                return Err(FlowError::ShapeMismatch(format!(
                    "{name}: stored {:?}, config expects {shape:?}",
                    store.get(id).shape()
                )));
            }
        }
        let id = |s: String| store.id_of(&s).expect("checked");
        let lin = |p: String| Linear {
            weight: id(format!("{p}.weight")),
            bias: id(format!("{p}.bias")),
        };
        let real = config.dims.bond_types.len();
        let edge = (0..config.coupling_layers)
            .map(|l| EdgeCoupling {
                hidden: lin(format!("edge{l}.hidden")),
                out: lin(format!("edge{l}.out")),
            })
            .collect();
        let atom = (0..config.coupling_layers)
            .map(|l| AtomCoupling {
                self_w: id(format!("atom{l}.self")),
                bond_w: (0..real).map(|c| id(format!("atom{l}.bond{c}"))).collect(),
                degree: id(format!("atom{l}.degree")),
                pos: id(format!("atom{l}.pos")),
                out: lin(format!("atom{l}.out")),
            })
            .collect();

        let n = config.dims.n_max;
        let (ca, cb) = (config.dims.c_a(), config.dims.c_b());
        let pairs = config.pairs();
        let edge_masks = (0..config.coupling_layers)
            .map(|l| {
                let data = (0..pairs.len())
                    .flat_map(|p| (0..cb).map(move |c| mask_bit(l, p, c)))
                    .collect();
                Tensor::vector(data)
            })
            .collect();
        let atom_masks = (0..config.coupling_layers)
            .map(|l| {
                let data = (0..n)
                    .flat_map(|i| (0..ca).map(move |c| mask_bit(l, i, c)))
                    .collect();
                Tensor::vector(data)
            })
            .collect();
        let mut slot = vec![usize::MAX; n * n];
        for (p, &(i, j)) in pairs.iter().enumerate() {
            slot[i * n + j] = p;
            slot[j * n + i] = p;
        }
        let zero = pairs.len() * cb;
        let dense_index = (0..real)
            .map(|c| {
                (0..n * n)
                    .map(|ij| {
                        if slot[ij] == usize::MAX {
                            zero
                        } else {
                            slot[ij] * cb + c
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            config,
            store,
            edge,
            atom,
            edge_masks,
            atom_masks,
            dense_index,
        })
    }

    fn batch_mask<'g>(g: &'g Graph, mask: &Tensor, b: usize) -> Var<'g> {
        let mut data = Vec::with_capacity(b * mask.numel());
        for _ in 0..b {
            data.extend_from_slice(mask.data());
        }
        g.constant(Tensor::new(&[b, mask.numel()], data).expect("mask shape"))
    }

    /// Scale `s` and shift `t` for the transformed entries of edge layer `l`,
    /// both zero on conditioning entries.
    fn edge_st<'g>(
        &self,
        g: &'g Graph,
        l: usize,
        xm: &Var<'g>,
        inv: &Var<'g>,
    ) -> Result<(Var<'g>, Var<'g>), FlowError> {
        let d = self.config.edge_dim();
        let layer = &self.edge[l];
        let h = layer.hidden.forward(g, &self.store, xm)?.relu();
        let raw = layer.out.forward(g, &self.store, &h)?;
        let s = raw
            .slice(1, 0, d)?
            .tanh()
            .scale(self.config.scale_limit)
            .mul(inv)?;
        let t = raw.slice(1, d, d)?.mul(inv)?;
        Ok((s, t))
    }

    /// Same for atom layer `l`, conditioned on the bond tensor.
    fn atom_st<'g>(
        &self,
        g: &'g Graph,
        l: usize,
        xm: &Var<'g>,
        inv: &Var<'g>,
        cond: &Conditioning<'g>,
    ) -> Result<(Var<'g>, Var<'g>), FlowError> {
        let b = xm.shape()[0];
        let (n, ca, ah) = (
            self.config.dims.n_max,
            self.config.dims.c_a(),
            self.config.atom_hidden,
        );
        let layer = &self.atom[l];
        let rows = xm.reshape(&[b * n, ca])?;
        let pos_idx: Vec<usize> = (0..b * n).map(|r| r % n).collect();
        let mut h = rows
            .matmul(&g.param(&self.store, layer.self_w))?
            .add(&g.param(&self.store, layer.pos).gather_rows(&pos_idx)?)?
            .add(&cond.degree.matmul(&g.param(&self.store, layer.degree))?)?;
        for (c, adj) in cond.gn.iter().enumerate() {
            let msg = rows
                .matmul(&g.param(&self.store, layer.bond_w[c]))?
                .reshape(&[b, n, ah])?;
            h = h.add(&adj.bmm(&msg)?.reshape(&[b * n, ah])?)?;
        }
        let raw = layer.out.forward(g, &self.store, &h.relu())?;
        let s = raw
            .slice(1, 0, ca)?
            .reshape(&[b, n * ca])?
            .tanh()
            .scale(self.config.scale_limit)
            .mul(inv)?;
        let t = raw.slice(1, ca, ca)?.reshape(&[b, n * ca])?.mul(inv)?;
        Ok((s, t))
    }

    fn check_cols(x: &Var<'_>, want: usize, what: &str) -> Result<usize, FlowError> {
        let s = x.shape();
        if s.len() != 2 || s[1] != want {
            return Err(FlowError::ShapeMismatch(format!(
                "{what}: got {s:?}, expected [B, {want}]"
            )));
        }
        Ok(s[0])
    }

    /// Bond-type probabilities `[B·P, C_b]` from raw bond-slot values.
    pub fn edge_probs<'g>(&self, x_e: &Var<'g>) -> Result<Var<'g>, FlowError> {
        let b = x_e.shape()[0];
        let cb = self.config.dims.c_b();
        Ok(x_e
            .reshape(&[b * self.config.pairs().len(), cb])?
            .scale(self.config.bond_sharpness)
            .softmax_last())
    }

    /// Dense symmetric soft bond matrices, one `[B, N, N]` per real bond
    /// channel (zero diagonal).
    pub fn dense_bonds<'g>(
        &self,
        g: &'g Graph,
        probs: &Var<'g>,
    ) -> Result<Vec<Var<'g>>, FlowError> {
        let n = self.config.dims.n_max;
        let per = self.config.pairs().len() * self.config.dims.c_b();
        let b = probs.shape()[0] / self.config.pairs().len();
        let flat = probs.reshape(&[b * per])?;
        let padded = Var::concat(&[flat, g.constant(Tensor::zeros(&[1]))], 0)?;
        let mut out = Vec::with_capacity(self.dense_index.len());
        for idx in &self.dense_index {
            let all: Vec<usize> = (0..b)
                .flat_map(|k| {
                    idx.iter()
                        .map(move |&f| if f == per { b * per } else { k * per + f })
                })
                .collect();
            out.push(padded.gather_flat(&all)?.reshape(&[b, n, n])?);
        }
        Ok(out)
    }

    /// Degree normalization `D^{-1/2} A_c D^{-1/2}` with `d_i = 1 + Σ_{j,c} A_c[i, j]`.
    pub fn graph_norm<'g>(
        &self,
        g: &'g Graph,
        dense: &[Var<'g>],
    ) -> Result<Vec<Var<'g>>, FlowError> {
        let shape = dense[0].shape();
        let (b, n) = (shape[0], shape[1]);
        let mut total = dense[0];
        for a in &dense[1..] {
            total = total.add(a)?;
        }
        let root = total.sum_axis(2)?.add_scalar(1.0).sqrt();
        let inv_sqrt = g.constant(Tensor::full(&[b, n], 1.0)).div(&root)?;
        let rows: Vec<usize> = (0..b * n * n).map(|f| f / n).collect();
        let cols: Vec<usize> = (0..b * n * n).map(|f| (f / (n * n)) * n + f % n).collect();
        let scale = inv_sqrt
            .gather_flat(&rows)?
            .mul(&inv_sqrt.gather_flat(&cols)?)?
            .reshape(&[b, n, n])?;
        dense.iter().map(|a| Ok(a.mul(&scale)?)).collect()
    }

    /// Data to latent for the bond flow: `(q_e, logdet [B])`.
    pub fn forward_edges<'g>(
        &self,
        g: &'g Graph,
        x_e: &Var<'g>,
    ) -> Result<(Var<'g>, Var<'g>), FlowError> {
        let b = Self::check_cols(x_e, self.config.edge_dim(), "bond latent")?;
        let mut x = *x_e;
        let mut logdet: Option<Var<'g>> = None;
        for l in 0..self.edge.len() {
            let m = Self::batch_mask(g, &self.edge_masks[l], b);
            let inv = m.neg().add_scalar(1.0);
            let (s, t) = self.edge_st(g, l, &x.mul(&m)?, &inv)?;
            x = x.mul(&s.exp())?.add(&t)?;
            let ld = s.sum_axis(1)?;
            logdet = Some(match logdet {
                Some(acc) => acc.add(&ld)?,
                None => ld,
            });
        }
        Ok((x, logdet.expect("at least one layer")))
    }

    /// Latent to data for the bond flow: `(x_e, logdet [B])`.
    pub fn reverse_edges<'g>(
        &self,
        g: &'g Graph,
        q_e: &Var<'g>,
    ) -> Result<(Var<'g>, Var<'g>), FlowError> {
        let b = Self::check_cols(q_e, self.config.edge_dim(), "bond latent")?;
        let mut y = *q_e;
        let mut logdet: Option<Var<'g>> = None;
        for l in (0..self.edge.len()).rev() {
            let m = Self::batch_mask(g, &self.edge_masks[l], b);
            let inv = m.neg().add_scalar(1.0);
            let (s, t) = self.edge_st(g, l, &y.mul(&m)?, &inv)?;
            y = y.sub(&t)?.mul(&s.neg().exp())?;
            let ld = s.sum_axis(1)?.neg();
            logdet = Some(match logdet {
                Some(acc) => acc.add(&ld)?,
                None => ld,
            });
        }
        Ok((y, logdet.expect("at least one layer")))
    }

    pub fn forward_atoms<'g>(
        &self,
        g: &'g Graph,
        x_v: &Var<'g>,
        cond: &Conditioning<'g>,
    ) -> Result<(Var<'g>, Var<'g>), FlowError> {
        let b = Self::check_cols(x_v, self.config.atom_dim(), "atom latent")?;
        let mut x = *x_v;
        let mut logdet: Option<Var<'g>> = None;
        for l in 0..self.atom.len() {
            let m = Self::batch_mask(g, &self.atom_masks[l], b);
            let inv = m.neg().add_scalar(1.0);
            let (s, t) = self.atom_st(g, l, &x.mul(&m)?, &inv, cond)?;
            x = x.mul(&s.exp())?.add(&t)?;
            let ld = s.sum_axis(1)?;
            logdet = Some(match logdet {
                Some(acc) => acc.add(&ld)?,
                None => ld,
            });
        }
        Ok((x, logdet.expect("at least one layer")))
    }

    pub fn reverse_atoms<'g>(
        &self,
        g: &'g Graph,
        q_v: &Var<'g>,
        cond: &Conditioning<'g>,
    ) -> Result<(Var<'g>, Var<'g>), FlowError> {
        let b = Self::check_cols(q_v, self.config.atom_dim(), "atom latent")?;
        let mut y = *q_v;
        let mut logdet: Option<Var<'g>> = None;
        for l in (0..self.atom.len()).rev() {
            let m = Self::batch_mask(g, &self.atom_masks[l], b);
            let inv = m.neg().add_scalar(1.0);
            let (s, t) = self.atom_st(g, l, &y.mul(&m)?, &inv, cond)?;
            y = y.sub(&t)?.mul(&s.neg().exp())?;
            let ld = s.sum_axis(1)?.neg();
            logdet = Some(match logdet {
                Some(acc) => acc.add(&ld)?,
                None => ld,
            });
        }
        Ok((y, logdet.expect("at least one layer")))
    }

    /// Normalized soft bond tensor and soft degrees of raw bond-slot values.
    pub fn conditioning<'g>(&self, g: &'g Graph, x_e: &Var<'g>) -> Result<Conditioning<'g>, FlowError> {
        let probs = self.edge_probs(x_e)?;
        let dense = self.dense_bonds(g, &probs)?;
        let b = dense[0].shape()[0];
        let n = self.config.dims.n_max;
        let degree = dense
            .iter()
            .map(|a| a.sum_axis(2)?.reshape(&[b * n, 1]))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Conditioning {
            gn: self.graph_norm(g, &dense)?,
            degree: Var::concat(&degree, 1)?,
        })
    }

    /// Dequantized data `(x_v [B, N·C_a], x_e [B, P·C_b])` to
    /// `(q_v, q_e, logdet [B])`.
    pub fn forward_flow<'g>(
        &self,
        g: &'g Graph,
        x_v: &Var<'g>,
        x_e: &Var<'g>,
    ) -> Result<FlowOut<'g>, FlowError> {
        let (q_e, ld_e) = self.forward_edges(g, x_e)?;
        let cond = self.conditioning(g, x_e)?;
        let (q_v, ld_v) = self.forward_atoms(g, x_v, &cond)?;
        Ok(FlowOut {
            q_v,
            q_e,
            logdet: ld_e.add(&ld_v)?,
        })
    }

    /// Latent to raw `(x_v, x_e)`: the bond flow first, then the atom flow
    /// conditioned on the normalized soft bonds.
    pub fn reverse_raw<'g>(
        &self,
        g: &'g Graph,
        q_v: &Var<'g>,
        q_e: &Var<'g>,
    ) -> Result<(Var<'g>, Var<'g>), FlowError> {
        let out = self.reverse_with_logdet(g, q_v, q_e)?;
        Ok((out.q_v, out.q_e))
    }

    /// Latent to raw data with the log-determinant of the reverse map; the
    /// returned [`FlowOut`] holds `x_v` and `x_e` in its `q_v` and `q_e` slots.
    pub fn reverse_with_logdet<'g>(
        &self,
        g: &'g Graph,
        q_v: &Var<'g>,
        q_e: &Var<'g>,
    ) -> Result<FlowOut<'g>, FlowError> {
        let (x_e, ld_e) = self.reverse_edges(g, q_e)?;
        let cond = self.conditioning(g, &x_e)?;
        let (x_v, ld_v) = self.reverse_atoms(g, q_v, &cond)?;
        Ok(FlowOut {
            q_v: x_v,
            q_e: x_e,
            logdet: ld_e.add(&ld_v)?,
        })
    }

    /// Latent to probabilities: `V̂` as `[B·N, C_a]` rows and bond slot
    /// probabilities as `[B·P, C_b]` rows.
    pub fn reverse_flow<'g>(
        &self,
        g: &'g Graph,
        q_v: &Var<'g>,
        q_e: &Var<'g>,
    ) -> Result<(Var<'g>, Var<'g>), FlowError> {
        let (x_v, x_e) = self.reverse_raw(g, q_v, q_e)?;
        let b = x_v.shape()[0];
        let vhat = x_v
            .reshape(&[b * self.config.dims.n_max, self.config.dims.c_a()])?
            .softmax_last();
        Ok((vhat, self.edge_probs(&x_e)?))
    }

    /// Per-molecule negative log-likelihood in nats per latent dimension
    /// under the standard Gaussian prior, `[B]`.
    pub fn nll<'g>(&self, out: &FlowOut<'g>) -> Result<Var<'g>, FlowError> {
        let d = self.config.latent_dim() as f64;
        let sq = out
            .q_v
            .square()
            .sum_axis(1)?
            .add(&out.q_e.square().sum_axis(1)?)?;
        let log_prior = sq
            .scale(-0.5)
            .add_scalar(-0.5 * d * (2.0 * std::f64::consts::PI).ln());
        Ok(log_prior.add(&out.logdet)?.scale(-1.0 / d))
    }
}

/// What the atom flow sees of the bonds: `gn` holds one normalized `[B, N, N]`
/// matrix per real bond channel, `degree` the per-channel soft bond counts of
/// every atom as `[B·N, real]`.
pub struct Conditioning<'g> {
    pub gn: Vec<Var<'g>>,
    pub degree: Var<'g>,
}

pub struct FlowOut<'g> {
    pub q_v: Var<'g>,
    pub q_e: Var<'g>,
    pub logdet: Var<'g>,
}
