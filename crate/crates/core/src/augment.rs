//! Stochastic graph views: node dropping and random-walk subgraphs.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::smiles::MolGraph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub node_drop_ratio: f64,
    pub subgraph_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            node_drop_ratio: 0.10,
            subgraph_fraction: 0.80,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("node_drop_ratio", self.node_drop_ratio),
            ("subgraph_fraction", self.subgraph_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        Ok(())
    }
}

// Guards against products like 0.1 * 30 landing a hair off an integer.
const ROUND_SLACK: f64 = 1e-9;

/// Number of atoms kept by [`node_drop`].
pub fn drop_keep_count(n: usize, ratio: f64) -> usize {
    let dropped = (ratio * n as f64 + ROUND_SLACK).floor() as usize;
    n.saturating_sub(dropped).max(1)
}

/// Number of atoms a [`subgraph_walk`] tries to collect.
pub fn walk_target(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64 - ROUND_SLACK).ceil() as usize).clamp(1, n.max(1))
}

/// Removes `floor(ratio·N)` uniformly chosen atoms (keeping at least one)
/// together with their bonds.
pub fn node_drop(g: &MolGraph, ratio: f64, seed: u64) -> MolGraph {
    g.induced_subgraph(&drop_kept_atoms(g, ratio, seed))
}

/// Sorted indices of the atoms [`node_drop`] keeps.
pub fn drop_kept_atoms(g: &MolGraph, ratio: f64, seed: u64) -> Vec<usize> {
    let n = g.num_atoms();
    let mut order: Vec<usize> = (0..n).collect();
    if n <= 1 {
        return order;
    }
    order.shuffle(&mut rng::from_seed(seed));
    order.truncate(drop_keep_count(n, ratio));
    order.sort_unstable();
    order
}

/// Random walk from a uniform start atom until `ceil(fraction·N)` distinct
/// atoms are visited or `50·N` steps pass; returns the induced subgraph.
pub fn subgraph_walk(g: &MolGraph, fraction: f64, seed: u64) -> MolGraph {
    g.induced_subgraph(&walk_visited_atoms(g, fraction, seed))
}

/// Sorted indices of the atoms a [`subgraph_walk`] visits.
pub fn walk_visited_atoms(g: &MolGraph, fraction: f64, seed: u64) -> Vec<usize> {
    let n = g.num_atoms();
    if n <= 1 {
        return (0..n).collect();
    }
    let mut r = rng::from_seed(seed);
    let adj = g.adjacency();
    let target = walk_target(n, fraction);
    let mut cur = r.random_range(0..n);
    let mut seen = vec![false; n];
    seen[cur] = true;
    let mut count = 1;
    let mut steps = 0;
    while count < target && steps < 50 * n {
        let Some(&(next, _)) = adj[cur].choose(&mut r) else {
            break;
        };
        cur = next;
        if !seen[cur] {
            seen[cur] = true;
            count += 1;
        }
        steps += 1;
    }
    (0..n).filter(|&i| seen[i]).collect()
}

/// View 1 drops nodes, view 2 is a random-walk subgraph; each draws from its
/// own stream derived from `seed`.
pub fn sample_two_views(g: &MolGraph, cfg: &AugmentConfig, seed: u64) -> (MolGraph, MolGraph) {
    (
        node_drop(
            g,
            cfg.node_drop_ratio,
            rng::derive_seed(seed, "node_drop", 0),
        ),
        subgraph_walk(
            g,
            cfg.subgraph_fraction,
            rng::derive_seed(seed, "subgraph", 0),
        ),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smiles::{are_isomorphic, parse_smiles, random, Bond};
    use proptest::prelude::*;

    /// Independent induced-subgraph oracle: bonds of `g` with both ends kept,
    /// renumbered by rank within `kept`.
    fn induced_oracle(g: &MolGraph, kept: &[usize]) -> Vec<Bond> {
        let mut out = Vec::new();
        for b in g.bonds() {
            if let (Ok(i), Ok(j)) = (kept.binary_search(&b.i), kept.binary_search(&b.j)) {
                out.push(Bond {
                    i: i.min(j),
                    j: i.max(j),
                    ..*b
                });
            }
        }
        out
    }

    #[test]
    fn drop_counts() {
        let g = parse_smiles("CCCCCCCCCC").unwrap();
        assert_eq!(node_drop(&g, 0.1, 1).num_atoms(), 9);
        let one = parse_smiles("C").unwrap();
        assert_eq!(node_drop(&one, 0.1, 1), one);
        assert_eq!(drop_keep_count(30, 0.1), 27);
        assert_eq!(drop_keep_count(3, 0.9), 1);
    }

    #[test]
    fn dropped_graph_is_induced() {
        let mut r = rng::from_seed(11);
        for s in 0..100 {
            let g = random::random_molecule(&mut r, &Default::default());
            let kept = drop_kept_atoms(&g, 0.3, s);
            let d = node_drop(&g, 0.3, s);
            assert_eq!(d.num_atoms(), drop_keep_count(g.num_atoms(), 0.3));
            assert_eq!(d.bonds(), induced_oracle(&g, &kept).as_slice());
            for (k, &i) in kept.iter().enumerate() {
                assert_eq!(d.atom(k), g.atom(i));
            }
        }
    }

    #[test]
    fn walk_on_path() {
        let g = parse_smiles("CCCCC").unwrap();
        for s in 0..50 {
            let w = subgraph_walk(&g, 0.8, s);
            assert_eq!(w.num_atoms(), 4);
            assert!(w.is_connected());
        }
        assert!(are_isomorphic(&subgraph_walk(&g, 0.99, 3), &g));
    }

    #[test]
    fn walk_stays_in_component() {
        let g = parse_smiles("CCC.OO").unwrap();
        for s in 0..20 {
            let w = subgraph_walk(&g, 0.8, s);
            assert!(w.is_connected());
            assert!(w.num_atoms() <= 3);
        }
    }

    #[test]
    fn walk_connected_over_many_trials() {
        let mut r = rng::from_seed(5);
        for s in 0..1000 {
            let g = random::random_molecule(&mut r, &Default::default());
            assert!(subgraph_walk(&g, 0.8, s).is_connected());
        }
    }

    #[test]
    fn two_views_deterministic_and_nonempty() {
        let cfg = AugmentConfig::default();
        let mut r = rng::from_seed(21);
        for s in 0..1000 {
            let g = random::random_molecule(&mut r, &Default::default());
            let (a, b) = sample_two_views(&g, &cfg, s);
            assert!(!a.is_empty() && !b.is_empty());
            assert!(a.num_atoms() <= g.num_atoms() && b.num_atoms() <= g.num_atoms());
            if s < 50 {
                assert_eq!(sample_two_views(&g, &cfg, s), (a, b));
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            node_drop_ratio: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn walk_hits_target_and_is_induced(mol_seed in 0u64..10_000, seed in any::<u64>(), frac in 0.05f64..0.95) {
            let g = random::random_molecule(&mut rng::from_seed(mol_seed), &Default::default());
            let kept = walk_visited_atoms(&g, frac, seed);
            let w = subgraph_walk(&g, frac, seed);
            prop_assert!(w.is_connected());
            prop_assert_eq!(w.num_atoms(), walk_target(g.num_atoms(), frac));
            let expect = induced_oracle(&g, &kept);
            prop_assert_eq!(w.bonds(), expect.as_slice());
        }
    }
}
