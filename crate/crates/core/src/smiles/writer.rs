use super::{Bond, BondOrder, Chirality, MolGraph};

/// Serializes a graph to SMILES. Atoms are visited depth-first from the lowest
/// index of each component, neighbors in index order.
pub fn write_smiles(g: &MolGraph) -> String {
    let rank: Vec<usize> = (0..g.num_atoms()).collect();
    g.components()
        .iter()
        .map(|comp| serialize_component(g, comp[0], &rank, false))
        .collect::<Vec<_>>()
        .join(".")
}

fn is_aromatic_atom(g: &MolGraph, adj: &[Vec<(usize, usize)>], i: usize) -> bool {
    g.atom(i).element.can_be_aromatic() && adj[i].iter().any(|&(_, k)| g.bonds()[k].aromatic)
}

fn atom_text(g: &MolGraph, adj: &[Vec<(usize, usize)>], i: usize, explicit: bool) -> String {
    let atom = g.atom(i);
    let mut sym = atom.element.symbol().to_string();
    if is_aromatic_atom(g, adj, i) {
        sym = sym.to_lowercase();
    }
    if !explicit && atom.chirality == Chirality::None && atom.hydrogens.is_none() {
        return sym;
    }
    let mut s = format!("[{sym}");
    match atom.chirality {
        Chirality::None => {}
        Chirality::Clockwise => s.push_str("@@"),
        Chirality::CounterClockwise => s.push('@'),
    }
    match g.hydrogen_count(i) {
        0 => {}
        1 => s.push('H'),
        h => s.push_str(&format!("H{h}")),
    }
    s.push(']');
    s
}

fn bond_text(
    g: &MolGraph,
    adj: &[Vec<(usize, usize)>],
    bond: &Bond,
    explicit: bool,
) -> &'static str {
    if bond.aromatic {
        return if explicit { ":" } else { "" };
    }
    match bond.order {
        BondOrder::Single => {
            if explicit || (is_aromatic_atom(g, adj, bond.i) && is_aromatic_atom(g, adj, bond.j)) {
                "-"
            } else {
                ""
            }
        }
        BondOrder::Double => "=",
        BondOrder::Triple => "#",
    }
}

fn ring_label(d: usize) -> String {
    if d < 10 {
        d.to_string()
    } else {
        format!("%{d:02}")
    }
}

/// Depth-first serialization of the component containing `start`, visiting
/// neighbors in increasing `rank`. With `explicit`, every bond carries a
/// symbol so the string determines bond labels exactly.
pub(crate) fn serialize_component(
    g: &MolGraph,
    start: usize,
    rank: &[usize],
    explicit: bool,
) -> String {
    let n = g.num_atoms();
    let mut adj = g.adjacency();
    for list in &mut adj {
        list.sort_by_key(|&(v, k)| (rank[v], k));
    }

    // First pass: spanning tree and ring-closure bonds.
    let mut pre = vec![usize::MAX; n];
    let mut children: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    let mut opens: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut closes: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut handled = vec![false; g.num_bonds()];
    let mut counter = 0;
    let mut stack: Vec<(usize, Option<usize>, usize)> = vec![(start, None, 0)];
    pre[start] = counter;
    counter += 1;
    while let Some(&mut (u, parent, ref mut next)) = stack.last_mut() {
        if *next >= adj[u].len() {
            stack.pop();
            continue;
        }
        let (v, k) = adj[u][*next];
        *next += 1;
        if Some(k) == parent || handled[k] {
            continue;
        }
        handled[k] = true;
        if pre[v] == usize::MAX {
            pre[v] = counter;
            counter += 1;
            children[u].push((v, k));
            stack.push((v, Some(k), 0));
        } else {
            opens[v].push(k);
            closes[u].push(k);
        }
    }

    // Second pass: emit text, allocating ring digits in visit order.
    let mut out = String::new();
    let mut digit_of = vec![0usize; g.num_bonds()];
    let mut in_use: Vec<bool> = vec![false; 100];
    emit(
        g,
        &adj,
        start,
        explicit,
        &children,
        &opens,
        &closes,
        rank,
        &mut digit_of,
        &mut in_use,
        &mut out,
    );
    out
}

#[allow(clippy::too_many_arguments)]
fn emit(
    g: &MolGraph,
    adj: &[Vec<(usize, usize)>],
    u: usize,
    explicit: bool,
    children: &[Vec<(usize, usize)>],
    opens: &[Vec<usize>],
    closes: &[Vec<usize>],
    rank: &[usize],
    digit_of: &mut [usize],
    in_use: &mut [bool],
    out: &mut String,
) {
    out.push_str(&atom_text(g, adj, u, explicit));
    for &k in &closes[u] {
        let d = digit_of[k];
        out.push_str(&ring_label(d));
        in_use[d] = false;
    }
    let mut open_here = opens[u].clone();
    open_here.sort_by_key(|&k| rank[g.bonds()[k].other(u)]);
    for k in open_here {
        let d = (1..100)
            .find(|&d| !in_use[d])
            .expect("fewer than 100 open rings");
        in_use[d] = true;
        digit_of[k] = d;
        out.push_str(bond_text(g, adj, &g.bonds()[k], explicit));
        out.push_str(&ring_label(d));
    }
    let kids = &children[u];
    for (idx, &(v, k)) in kids.iter().enumerate() {
        let last = idx + 1 == kids.len();
        if !last {
            out.push('(');
        }
        out.push_str(bond_text(g, adj, &g.bonds()[k], explicit));
        emit(
            g, adj, v, explicit, children, opens, closes, rank, digit_of, in_use, out,
        );
        if !last {
            out.push(')');
        }
    }
}
