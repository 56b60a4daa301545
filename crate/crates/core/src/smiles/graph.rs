use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{Element, MolError};

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub enum Chirality {
    #[default]
    None,
    /// `@@`
    Clockwise,
    /// `@`
    CounterClockwise,
}

impl Chirality {
    pub const ALL: [Chirality; 3] = [
        Chirality::None,
        Chirality::Clockwise,
        Chirality::CounterClockwise,
    ];

    pub fn index(self) -> usize {
        match self {
            Chirality::None => 0,
            Chirality::Clockwise => 1,
            Chirality::CounterClockwise => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Atom {
    pub element: Element,
    pub chirality: Chirality,
    /// Hydrogen count fixed by a bracket atom; `None` means implicit.
    pub hydrogens: Option<u8>,
}

impl Atom {
    pub fn new(element: Element) -> Self {
        Self {
            element,
            chirality: Chirality::None,
            hydrogens: None,
        }
    }

    pub fn atomic_number(&self) -> u8 {
        self.element.atomic_number()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
}

impl BondOrder {
    pub const ALL: [BondOrder; 3] = [BondOrder::Single, BondOrder::Double, BondOrder::Triple];

    pub fn valence(self) -> u8 {
        match self {
            BondOrder::Single => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        }
    }

    pub fn from_valence(v: u8) -> Option<Self> {
        match v {
            1 => Some(BondOrder::Single),
            2 => Some(BondOrder::Double),
            3 => Some(BondOrder::Triple),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self.valence() as usize - 1
    }
}

/// A bond between atoms `i < j`. Aromatic bonds carry their Kekulé order and
/// the `aromatic` annotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub order: BondOrder,
    pub aromatic: bool,
}

impl Bond {
    pub fn new(i: usize, j: usize, order: BondOrder) -> Self {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        Self {
            i,
            j,
            order,
            aromatic: false,
        }
    }

    pub fn other(&self, atom: usize) -> usize {
        if self.i == atom {
            self.j
        } else {
            self.i
        }
    }
}

/// Heavy-atom molecular graph.
///
/// Construction guarantees the structural invariants (indices in range, no
/// self-loops, no duplicate pairs). Valence is checked separately by
/// [`MolGraph::check_valence`]: parsed molecules always pass it, raw decoder
/// output may not until it goes through validity correction.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MolGraph {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
}

impl MolGraph {
    pub fn new(atoms: Vec<Atom>, bonds: Vec<Bond>) -> Result<Self, MolError> {
        let n = atoms.len();
        let mut seen = std::collections::HashSet::new();
        let mut normalized = Vec::with_capacity(bonds.len());
        for b in bonds {
            let b = Bond {
                i: b.i.min(b.j),
                j: b.i.max(b.j),
                ..b
            };
            if b.j >= n {
                return Err(MolError::Structure(format!(
                    "bond ({}, {}) out of range for {n} atoms",
                    b.i, b.j
                )));
            }
            if b.i == b.j {
                return Err(MolError::Structure(format!("self-loop on atom {}", b.i)));
            }
            if !seen.insert((b.i, b.j)) {
                return Err(MolError::Structure(format!(
                    "duplicate bond ({}, {})",
                    b.i, b.j
                )));
            }
            normalized.push(b);
        }
        Ok(Self {
            atoms,
            bonds: normalized,
        })
    }

    /// Builds and checks valence in one go.
    pub fn new_valid(atoms: Vec<Atom>, bonds: Vec<Bond>) -> Result<Self, MolError> {
        let g = Self::new(atoms, bonds)?;
        g.check_valence()?;
        Ok(g)
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn num_bonds(&self) -> usize {
        self.bonds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atom(&self, i: usize) -> &Atom {
        &self.atoms[i]
    }

    /// `(neighbor, bond index)` pairs for every atom, in bond order.
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for (k, b) in self.bonds.iter().enumerate() {
            adj[b.i].push((b.j, k));
            adj[b.j].push((b.i, k));
        }
        adj
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<&Bond> {
        let (i, j) = (a.min(b), a.max(b));
        self.bonds.iter().find(|bd| bd.i == i && bd.j == j)
    }

    pub fn degree(&self, atom: usize) -> usize {
        self.bonds
            .iter()
            .filter(|b| b.i == atom || b.j == atom)
            .count()
    }

    /// Sum of bond orders at `atom` (explicit heavy-atom bonds only).
    pub fn bond_valence(&self, atom: usize) -> u8 {
        self.bonds
            .iter()
            .filter(|b| b.i == atom || b.j == atom)
            .map(|b| b.order.valence())
            .sum()
    }

    /// Implicit hydrogens completing the lowest neutral valence that fits, or
    /// the bracket count when one was given.
    pub fn hydrogen_count(&self, atom: usize) -> u8 {
        let a = &self.atoms[atom];
        if let Some(h) = a.hydrogens {
            return h;
        }
        let used = self.bond_valence(atom);
        a.element
            .valences()
            .iter()
            .find(|&&v| v >= used)
            .map_or(0, |&v| v - used)
    }

    pub fn check_valence(&self) -> Result<(), MolError> {
        for (i, a) in self.atoms.iter().enumerate() {
            let total = self.bond_valence(i) + a.hydrogens.unwrap_or(0);
            if total > a.element.max_valence() {
                return Err(MolError::ValenceViolation {
                    atom: i,
                    element: a.element,
                    valence: total,
                });
            }
        }
        Ok(())
    }

    pub fn is_valence_valid(&self) -> bool {
        self.check_valence().is_ok()
    }

    /// Connected components, each sorted, ordered by their smallest atom.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let adj = self.adjacency();
        let mut seen = vec![false; self.atoms.len()];
        let mut out = Vec::new();
        for start in 0..self.atoms.len() {
            if seen[start] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(u) = queue.pop_front() {
                comp.push(u);
                for &(v, _) in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        self.components().len() <= 1
    }

    /// The subgraph induced by `keep`; atoms are renumbered in `keep` order.
    pub fn induced_subgraph(&self, keep: &[usize]) -> MolGraph {
        let mut map = vec![usize::MAX; self.atoms.len()];
        for (new, &old) in keep.iter().enumerate() {
            map[old] = new;
        }
        let atoms = keep.iter().map(|&i| self.atoms[i]).collect();
        let bonds = self
            .bonds
            .iter()
            .filter(|b| map[b.i] != usize::MAX && map[b.j] != usize::MAX)
            .map(|b| Bond {
                i: map[b.i].min(map[b.j]),
                j: map[b.i].max(map[b.j]),
                ..*b
            })
            .collect();
        MolGraph { atoms, bonds }
    }

    /// Reorders atoms so that new atom `k` is old atom `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> MolGraph {
        assert_eq!(perm.len(), self.atoms.len());
        self.induced_subgraph(perm)
    }

    /// Whether `bond` lies on a cycle.
    pub fn is_ring_bond(&self, bond: usize) -> bool {
        let b = self.bonds[bond];
        let adj = self.adjacency();
        let mut seen = vec![false; self.atoms.len()];
        let mut stack = vec![b.i];
        seen[b.i] = true;
        while let Some(u) = stack.pop() {
            for &(v, k) in &adj[u] {
                if k == bond || seen[v] {
                    continue;
                }
                if v == b.j {
                    return true;
                }
                seen[v] = true;
                stack.push(v);
            }
        }
        false
    }

    /// Number of independent cycles (edges - atoms + components).
    pub fn ring_count(&self) -> usize {
        (self.bonds.len() + self.components().len()).saturating_sub(self.atoms.len())
    }

    pub fn count_element(&self, element: Element) -> usize {
        self.atoms.iter().filter(|a| a.element == element).count()
    }

    /// Copy with every aromatic annotation removed (Kekulé orders kept).
    pub fn dearomatized(&self) -> MolGraph {
        let mut g = self.clone();
        for b in &mut g.bonds {
            b.aromatic = false;
        }
        g
    }

    pub(crate) fn bonds_mut(&mut self) -> &mut Vec<Bond> {
        &mut self.bonds
    }
}
