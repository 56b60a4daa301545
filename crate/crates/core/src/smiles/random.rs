//! Random small molecules for synthetic corpora, flow training sets and
//! property tests.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    detect_functional_groups, parse_smiles, write_smiles, Atom, Bond, BondOrder, Element,
    FunctionalGroup, MolGraph,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomMolConfig {
    pub min_atoms: usize,
    pub max_atoms: usize,
    /// Relative sampling weights per element.
    pub elements: Vec<(Element, f64)>,
    /// Probability of each further ring closure (at most three).
    pub ring_rate: f64,
    pub double_prob: f64,
    pub triple_prob: f64,
    /// Probability of seeding the molecule with a benzene ring.
    pub benzene_prob: f64,
    /// Molecules containing any of these groups are rejected.
    pub forbid: Vec<FunctionalGroup>,
}

impl Default for RandomMolConfig {
    fn default() -> Self {
        Self {
            min_atoms: 2,
            max_atoms: 12,
            elements: vec![
                (Element::C, 6.0),
                (Element::N, 1.2),
                (Element::O, 1.5),
                (Element::F, 0.3),
                (Element::S, 0.2),
                (Element::Cl, 0.2),
            ],
            ring_rate: 0.4,
            double_prob: 0.15,
            triple_prob: 0.02,
            benzene_prob: 0.1,
            forbid: Vec::new(),
        }
    }
}

fn base_valence(e: Element) -> u8 {
    e.valences()[0]
}

fn pick_element<R: Rng + ?Sized>(rng: &mut R, weights: &[(Element, f64)]) -> Element {
    let total: f64 = weights.iter().map(|w| w.1).sum();
    let mut x = rng.random::<f64>() * total;
    for &(e, w) in weights {
        if x < w {
            return e;
        }
        x -= w;
    }
    weights.last().map_or(Element::C, |w| w.0)
}

fn free(atoms: &[Atom], used: &[u8], i: usize) -> u8 {
    base_valence(atoms[i].element).saturating_sub(used[i])
}

fn distance(n: usize, bonds: &[Bond], a: usize, b: usize) -> usize {
    let mut dist = vec![usize::MAX; n];
    dist[a] = 0;
    let mut queue = std::collections::VecDeque::from([a]);
    while let Some(u) = queue.pop_front() {
        for bd in bonds {
            if bd.i == u || bd.j == u {
                let v = bd.other(u);
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    dist[b]
}

fn attempt<R: Rng + ?Sized>(rng: &mut R, cfg: &RandomMolConfig) -> Option<MolGraph> {
    let lo = cfg.min_atoms.max(1);
    let hi = cfg.max_atoms.max(lo);
    let target = rng.random_range(lo..=hi);
    let mut atoms: Vec<Atom> = Vec::new();
    let mut bonds: Vec<Bond> = Vec::new();
    let mut used: Vec<u8> = Vec::new();

    if target >= 6 && rng.random::<f64>() < cfg.benzene_prob {
        for k in 0..6 {
            atoms.push(Atom::new(Element::C));
            let order = if k % 2 == 0 {
                BondOrder::Double
            } else {
                BondOrder::Single
            };
            let mut b = Bond::new(k, (k + 1) % 6, order);
            b.aromatic = true;
            bonds.push(b);
        }
        used = vec![3; 6];
    } else {
        atoms.push(Atom::new(pick_element(rng, &cfg.elements)));
        used.push(0);
    }

    while atoms.len() < target {
        let open: Vec<usize> = (0..atoms.len())
            .filter(|&i| free(&atoms, &used, i) > 0)
            .collect();
        if open.is_empty() {
            break;
        }
        let parent = open[rng.random_range(0..open.len())];
        let el = pick_element(rng, &cfg.elements);
        let idx = atoms.len();
        atoms.push(Atom::new(el));
        used.push(1);
        used[parent] += 1;
        bonds.push(Bond::new(parent, idx, BondOrder::Single));
    }

    let n = atoms.len();
    let mut closures = 0;
    while closures < 3 && rng.random::<f64>() < cfg.ring_rate {
        closures += 1;
    }
    for _ in 0..closures {
        let open: Vec<usize> = (0..n).filter(|&i| free(&atoms, &used, i) > 0).collect();
        let mut pairs = Vec::new();
        for (x, &a) in open.iter().enumerate() {
            for &b in &open[x + 1..] {
                let d = distance(n, &bonds, a, b);
                if (2..=5).contains(&d) {
                    pairs.push((a, b));
                }
            }
        }
        if pairs.is_empty() {
            break;
        }
        let (a, b) = pairs[rng.random_range(0..pairs.len())];
        bonds.push(Bond::new(a, b, BondOrder::Single));
        used[a] += 1;
        used[b] += 1;
    }

    for k in 0..bonds.len() {
        if bonds[k].aromatic {
            continue;
        }
        let (a, b) = (bonds[k].i, bonds[k].j);
        let room = free(&atoms, &used, a).min(free(&atoms, &used, b));
        let x = rng.random::<f64>();
        let extra = if room >= 2 && x < cfg.triple_prob {
            2
        } else if room >= 1 && x < cfg.triple_prob + cfg.double_prob {
            1
        } else {
            0
        };
        if extra > 0 {
            bonds[k].order = BondOrder::from_valence(1 + extra).expect("order");
            used[a] += extra;
            used[b] += extra;
        }
    }

    let g = MolGraph::new_valid(atoms, bonds).ok()?;
    let groups = detect_functional_groups(&g);
    if cfg.forbid.iter().any(|f| groups.contains(f)) {
        return None;
    }
    // Renumber into depth-first order so atom indices follow the SMILES.
    parse_smiles(&write_smiles(&g)).ok()
}

/// A connected, valence-valid molecule. Atom order follows its SMILES.
pub fn random_molecule<R: Rng + ?Sized>(rng: &mut R, cfg: &RandomMolConfig) -> MolGraph {
    for _ in 0..1000 {
        if let Some(g) = attempt(rng, cfg) {
            return g;
        }
    }
    panic!("random molecule configuration rejects every candidate");
}
