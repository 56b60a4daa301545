use serde::{Deserialize, Serialize};

use super::{Atom, Bond, BondOrder, Element, MolError, MolGraph};
use crate::tensor::Tensor;

/// Dimensions and vocabularies of the dense form. The last atom channel is
/// "pad" and the last bond channel is "no bond".
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenseDims {
    pub n_max: usize,
    pub atom_types: Vec<Element>,
    pub bond_types: Vec<BondOrder>,
}

impl Default for DenseDims {
    fn default() -> Self {
        Self {
            n_max: 12,
            atom_types: vec![Element::C, Element::N, Element::O, Element::F],
            bond_types: BondOrder::ALL.to_vec(),
        }
    }
}

impl DenseDims {
    pub fn new(
        n_max: usize,
        atom_types: Vec<Element>,
        bond_types: Vec<BondOrder>,
    ) -> Result<Self, MolError> {
        let dims = Self {
            n_max,
            atom_types,
            bond_types,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<(), MolError> {
        if self.n_max < 2 {
            return Err(MolError::InvalidDense("n_max must be at least 2".into()));
        }
        if self.atom_types.is_empty() || self.bond_types.is_empty() {
            return Err(MolError::InvalidDense(
                "empty atom or bond vocabulary".into(),
            ));
        }
        let mut atoms = self.atom_types.clone();
        atoms.sort();
        atoms.dedup();
        let mut bonds = self.bond_types.clone();
        bonds.sort();
        bonds.dedup();
        if atoms.len() != self.atom_types.len() || bonds.len() != self.bond_types.len() {
            return Err(MolError::InvalidDense("duplicate vocabulary entry".into()));
        }
        Ok(())
    }

    /// Atom channels including pad.
    pub fn c_a(&self) -> usize {
        self.atom_types.len() + 1
    }

    /// Bond channels including no-bond.
    pub fn c_b(&self) -> usize {
        self.bond_types.len() + 1
    }

    pub fn pad_index(&self) -> usize {
        self.atom_types.len()
    }

    pub fn no_bond_index(&self) -> usize {
        self.bond_types.len()
    }

    pub fn atom_index(&self, e: Element) -> Option<usize> {
        self.atom_types.iter().position(|&t| t == e)
    }

    pub fn bond_index(&self, b: BondOrder) -> Option<usize> {
        self.bond_types.iter().position(|&t| t == b)
    }

    /// Length of the flattened `[V; E]` vector.
    pub fn latent_len(&self) -> usize {
        self.n_max * self.c_a() + self.n_max * self.n_max * self.c_b()
    }
}

/// One-hot atom matrix `v` (`n_max × C_a`) and bond tensor `e`
/// (`n_max × n_max × C_b`).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMol {
    pub dims: DenseDims,
    pub v: Tensor,
    pub e: Tensor,
}

impl DenseMol {
    pub fn check(&self) -> Result<(), MolError> {
        let d = &self.dims;
        let (n, ca, cb) = (d.n_max, d.c_a(), d.c_b());
        if self.v.shape() != [n, ca] || self.e.shape() != [n, n, cb] {
            return Err(MolError::InvalidDense(format!(
                "shapes {:?} / {:?} do not match dims ({n}, {ca}, {cb})",
                self.v.shape(),
                self.e.shape()
            )));
        }
        let one_hot = |row: &[f64]| {
            row.iter().all(|&x| x == 0.0 || x == 1.0)
                && row.iter().filter(|&&x| x == 1.0).count() == 1
        };
        for (i, row) in self.v.data().chunks(ca).enumerate() {
            if !one_hot(row) {
                return Err(MolError::InvalidDense(format!(
                    "atom row {i} is not one-hot"
                )));
            }
        }
        let e = self.e.data();
        for i in 0..n {
            for j in 0..n {
                let a = &e[(i * n + j) * cb..(i * n + j + 1) * cb];
                if !one_hot(a) {
                    return Err(MolError::InvalidDense(format!(
                        "bond slot ({i}, {j}) is not one-hot"
                    )));
                }
                let b = &e[(j * n + i) * cb..(j * n + i + 1) * cb];
                if a != b {
                    return Err(MolError::InvalidDense(format!(
                        "bond tensor not symmetric at ({i}, {j})"
                    )));
                }
                if i == j && a[d.no_bond_index()] != 1.0 {
                    return Err(MolError::InvalidDense(format!(
                        "diagonal slot {i} is not no-bond"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Dense one-hot form. Chirality and bracket hydrogen counts are not
/// representable and are dropped; aromatic bonds keep their Kekulé order.
pub fn to_dense(g: &MolGraph, dims: &DenseDims) -> Result<DenseMol, MolError> {
    dims.validate()?;
    let (n, ca, cb) = (dims.n_max, dims.c_a(), dims.c_b());
    if g.num_atoms() > n {
        return Err(MolError::TooManyAtoms {
            atoms: g.num_atoms(),
            max: n,
        });
    }
    let mut v = vec![0.0; n * ca];
    for i in 0..n {
        let t = match g.atoms().get(i) {
            Some(a) => dims
                .atom_index(a.element)
                .ok_or_else(|| MolError::TypeOutOfVocabulary(format!("atom {}", a.element)))?,
            None => dims.pad_index(),
        };
        v[i * ca + t] = 1.0;
    }
    let mut e = vec![0.0; n * n * cb];
    for i in 0..n {
        for j in 0..n {
            e[(i * n + j) * cb + dims.no_bond_index()] = 1.0;
        }
    }
    for b in g.bonds() {
        let t = dims
            .bond_index(b.order)
            .ok_or_else(|| MolError::TypeOutOfVocabulary(format!("bond {:?}", b.order)))?;
        for (x, y) in [(b.i, b.j), (b.j, b.i)] {
            let slot = &mut e[(x * n + y) * cb..(x * n + y + 1) * cb];
            slot.fill(0.0);
            slot[t] = 1.0;
        }
    }
    Ok(DenseMol {
        dims: dims.clone(),
        v: Tensor::new(&[n, ca], v).expect("shape"),
        e: Tensor::new(&[n, n, cb], e).expect("shape"),
    })
}

/// Inverse of [`to_dense`] after checking the one-hot invariants. Pad atoms
/// and their bonds are dropped; valence is not checked.
pub fn from_dense(d: &DenseMol) -> Result<MolGraph, MolError> {
    d.check()?;
    let n = d.dims.n_max;
    let atom_types = d.v.argmax_last();
    let bond_types = d.e.argmax_last();
    Ok(assemble(&d.dims, &atom_types, |i, j| bond_types[i * n + j]))
}

/// Hard decode of probability matrices: argmax over atom channels per row and
/// over bond channels per upper-triangle slot. Ties go to the lowest channel.
pub fn decode_argmax(dims: &DenseDims, v: &Tensor, e: &Tensor) -> Result<MolGraph, MolError> {
    let (n, ca, cb) = (dims.n_max, dims.c_a(), dims.c_b());
    if v.shape() != [n, ca] || e.shape() != [n, n, cb] {
        return Err(MolError::InvalidDense(
            "probability tensor shapes do not match dims".into(),
        ));
    }
    let atom_types = v.argmax_last();
    let bond_types = e.argmax_last();
    Ok(assemble(dims, &atom_types, |i, j| bond_types[i * n + j]))
}

fn assemble(
    dims: &DenseDims,
    atom_types: &[usize],
    bond_type: impl Fn(usize, usize) -> usize,
) -> MolGraph {
    let pad = dims.pad_index();
    let mut map = vec![usize::MAX; atom_types.len()];
    let mut atoms = Vec::new();
    for (i, &t) in atom_types.iter().enumerate() {
        if t != pad {
            map[i] = atoms.len();
            atoms.push(Atom::new(dims.atom_types[t]));
        }
    }
    let mut bonds = Vec::new();
    for i in 0..atom_types.len() {
        for j in i + 1..atom_types.len() {
            if map[i] == usize::MAX || map[j] == usize::MAX {
                continue;
            }
            let t = bond_type(i, j);
            if t != dims.no_bond_index() {
                bonds.push(Bond::new(map[i], map[j], dims.bond_types[t]));
            }
        }
    }
    MolGraph::new(atoms, bonds).expect("upper-triangle bonds are structurally valid")
}
