use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{BondOrder, Element, MolGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionalGroup {
    Hydroxyl,
    Carbonyl,
    Amine,
    Halogen,
    BenzeneRing,
    Carboxyl,
    DoubleBond,
}

impl FunctionalGroup {
    pub const ALL: [FunctionalGroup; 7] = [
        FunctionalGroup::Hydroxyl,
        FunctionalGroup::Carbonyl,
        FunctionalGroup::Amine,
        FunctionalGroup::Halogen,
        FunctionalGroup::BenzeneRing,
        FunctionalGroup::Carboxyl,
        FunctionalGroup::DoubleBond,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FunctionalGroup::Hydroxyl => "hydroxyl",
            FunctionalGroup::Carbonyl => "carbonyl",
            FunctionalGroup::Amine => "amine",
            FunctionalGroup::Halogen => "halogen",
            FunctionalGroup::BenzeneRing => "benzene_ring",
            FunctionalGroup::Carboxyl => "carboxyl",
            FunctionalGroup::DoubleBond => "double_bond",
        }
    }
}

impl fmt::Display for FunctionalGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FunctionalGroup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| format!("unknown functional group '{s}'"))
    }
}

/// Pattern matches:
/// - hydroxyl: O with one single, non-aromatic bond and at least one hydrogen
/// - carbonyl: non-aromatic C=O
/// - carboxyl: a carbonyl carbon also carrying a hydroxyl oxygen
/// - amine: non-aromatic N whose bonds are all single
/// - halogen: any F, Cl, Br, I
/// - benzene_ring: six-membered carbon ring, aromatic or alternating
/// - double_bond: non-aromatic C=C
pub fn detect_functional_groups(g: &MolGraph) -> BTreeSet<FunctionalGroup> {
    let adj = g.adjacency();
    let bonds = g.bonds();
    let mut found = BTreeSet::new();

    let is_hydroxyl_o = |o: usize| {
        g.atom(o).element == Element::O
            && adj[o].len() == 1
            && !bonds[adj[o][0].1].aromatic
            && bonds[adj[o][0].1].order == BondOrder::Single
            && g.hydrogen_count(o) > 0
    };

    for i in 0..g.num_atoms() {
        let el = g.atom(i).element;
        if el.is_halogen() {
            found.insert(FunctionalGroup::Halogen);
        }
        if is_hydroxyl_o(i) {
            found.insert(FunctionalGroup::Hydroxyl);
        }
        if el == Element::N
            && adj[i]
                .iter()
                .all(|&(_, k)| !bonds[k].aromatic && bonds[k].order == BondOrder::Single)
        {
            found.insert(FunctionalGroup::Amine);
        }
        if el == Element::C {
            let has_carbonyl = adj[i].iter().any(|&(v, k)| {
                g.atom(v).element == Element::O
                    && !bonds[k].aromatic
                    && bonds[k].order == BondOrder::Double
            });
            if has_carbonyl {
                found.insert(FunctionalGroup::Carbonyl);
                if adj[i].iter().any(|&(v, _)| is_hydroxyl_o(v)) {
                    found.insert(FunctionalGroup::Carboxyl);
                }
            }
        }
    }
    let benzene = benzene_ring_bonds(g, &adj);
    if benzene.iter().any(|&b| b) {
        found.insert(FunctionalGroup::BenzeneRing);
    }
    // Kekulé double bonds inside a benzene ring do not count as C=C.
    for (k, b) in bonds.iter().enumerate() {
        if !b.aromatic
            && !benzene[k]
            && b.order == BondOrder::Double
            && g.atom(b.i).element == Element::C
            && g.atom(b.j).element == Element::C
        {
            found.insert(FunctionalGroup::DoubleBond);
        }
    }
    found
}

/// Marks the bonds of every six-membered carbon ring that is aromatic or
/// alternating.
fn benzene_ring_bonds(g: &MolGraph, adj: &[Vec<(usize, usize)>]) -> Vec<bool> {
    let carbon: Vec<bool> = g.atoms().iter().map(|a| a.element == Element::C).collect();
    let mut marked = vec![false; g.num_bonds()];
    let mut path = Vec::with_capacity(6);
    let mut path_bonds = Vec::with_capacity(6);
    for s in 0..g.num_atoms() {
        if carbon[s] {
            rings_from(
                g,
                adj,
                &carbon,
                s,
                s,
                &mut path,
                &mut path_bonds,
                &mut marked,
            );
        }
    }
    marked
}

/// Depth-limited search for 6-cycles through `start` whose atoms all have
/// index ≥ `start` (each cycle is found from its lowest atom).
#[allow(clippy::too_many_arguments)]
fn rings_from(
    g: &MolGraph,
    adj: &[Vec<(usize, usize)>],
    carbon: &[bool],
    start: usize,
    u: usize,
    path: &mut Vec<usize>,
    path_bonds: &mut Vec<usize>,
    marked: &mut [bool],
) {
    path.push(u);
    for &(v, k) in &adj[u] {
        if path.len() == 6 {
            if v == start {
                path_bonds.push(k);
                if benzene_like(g, path_bonds) {
                    for &b in path_bonds.iter() {
                        marked[b] = true;
                    }
                }
                path_bonds.pop();
            }
        } else if carbon[v] && v > start && !path.contains(&v) {
            path_bonds.push(k);
            rings_from(g, adj, carbon, start, v, path, path_bonds, marked);
            path_bonds.pop();
        }
    }
    path.pop();
}

fn benzene_like(g: &MolGraph, ring: &[usize]) -> bool {
    let bonds = g.bonds();
    if ring.iter().all(|&k| bonds[k].aromatic) {
        return true;
    }
    let orders: Vec<BondOrder> = ring.iter().map(|&k| bonds[k].order).collect();
    (0..2).any(|phase| {
        orders.iter().enumerate().all(|(p, &o)| {
            let want = if p % 2 == phase {
                BondOrder::Double
            } else {
                BondOrder::Single
            };
            o == want
        })
    })
}
