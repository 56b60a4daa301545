use super::writer::serialize_component;
use super::MolGraph;

fn bond_label(g: &MolGraph, k: usize) -> usize {
    let b = g.bonds()[k];
    if b.aromatic {
        3
    } else {
        b.order.index()
    }
}

/// Replaces arbitrary sortable keys with dense ranks `0..`.
fn rank_keys<K: Ord + Clone>(keys: &[K]) -> Vec<usize> {
    let mut sorted: Vec<K> = keys.to_vec();
    sorted.sort();
    sorted.dedup();
    keys.iter()
        .map(|k| sorted.binary_search(k).unwrap())
        .collect()
}

fn num_classes(colors: &[usize]) -> usize {
    colors.iter().max().map_or(0, |m| m + 1)
}

fn refine(colors: Vec<usize>, adj: &[Vec<(usize, usize)>], labels: &[usize]) -> Vec<usize> {
    let mut colors = colors;
    loop {
        let keys: Vec<(usize, Vec<(usize, usize)>)> = (0..colors.len())
            .map(|u| {
                let mut nb: Vec<(usize, usize)> = adj[u]
                    .iter()
                    .map(|&(v, k)| (labels[k], colors[v]))
                    .collect();
                nb.sort_unstable();
                (colors[u], nb)
            })
            .collect();
        let next = rank_keys(&keys);
        if num_classes(&next) == num_classes(&colors) {
            return next;
        }
        colors = next;
    }
}

fn search(
    g: &MolGraph,
    colors: Vec<usize>,
    adj: &[Vec<(usize, usize)>],
    labels: &[usize],
    best: &mut Option<String>,
) {
    let colors = refine(colors, adj, labels);
    let n = colors.len();
    let mut counts = vec![0usize; n];
    for &c in &colors {
        counts[c] += 1;
    }
    match (0..n).find(|&c| counts[c] > 1) {
        None => {
            let start = colors.iter().position(|&c| c == 0).unwrap();
            let s = serialize_component(g, start, &colors, true);
            if best.as_ref().is_none_or(|b| s < *b) {
                *best = Some(s);
            }
        }
        Some(cell) => {
            for v in (0..n).filter(|&v| colors[v] == cell) {
                let split: Vec<usize> = (0..n)
                    .map(|u| 2 * colors[u] + usize::from(colors[u] == cell && u != v))
                    .collect();
                search(g, rank_keys(&split), adj, labels, best);
            }
        }
    }
}

fn canonical_connected(g: &MolGraph) -> String {
    let adj = g.adjacency();
    let labels: Vec<usize> = (0..g.num_bonds()).map(|k| bond_label(g, k)).collect();
    let invariants: Vec<_> = (0..g.num_atoms())
        .map(|i| {
            let a = g.atom(i);
            (
                a.element.index(),
                a.chirality.index(),
                g.hydrogen_count(i),
                adj[i].len(),
            )
        })
        .collect();
    let mut best = None;
    search(g, rank_keys(&invariants), &adj, &labels, &mut best);
    best.unwrap_or_default()
}

/// A string that is equal for two graphs exactly when they are isomorphic
/// (atom element, chirality tag and hydrogen count; bond order, with aromatic
/// bonds compared as aromatic regardless of their Kekulé order).
pub fn canonical_key(g: &MolGraph) -> String {
    let mut parts: Vec<String> = g
        .components()
        .iter()
        .map(|comp| canonical_connected(&g.induced_subgraph(comp)))
        .collect();
    parts.sort();
    parts.join(".")
}

pub fn are_isomorphic(a: &MolGraph, b: &MolGraph) -> bool {
    a.num_atoms() == b.num_atoms()
        && a.num_bonds() == b.num_bonds()
        && canonical_key(a) == canonical_key(b)
}
