use crate::smiles::{Bond, BondOrder, MolGraph};

fn largest_component(g: &MolGraph) -> MolGraph {
    let comps = g.components();
    // Ties go to the component holding the lowest atom index (components are
    // ordered by their smallest atom).
    match comps
        .iter()
        .enumerate()
        .max_by_key(|(k, c)| (c.len(), std::cmp::Reverse(*k)))
    {
        Some((_, keep)) if comps.len() > 1 => g.induced_subgraph(keep),
        _ => g.clone(),
    }
}

/// Repairs a decoded graph: keeps the largest connected component, then for
/// each over-valent atom in index order lowers the order of its lowest-index
/// bond (a single bond is removed) until the atom fits its largest neutral
/// valence. Repeats until stable.
pub fn validity_correct(g: &MolGraph) -> MolGraph {
    let mut g = largest_component(g);
    if g.is_valence_valid() {
        return g;
    }
    if g.bonds().iter().any(|b| b.aromatic) {
        g = g.dearomatized();
    }
    loop {
        let mut atoms = g.atoms().to_vec();
        let mut bonds: Vec<Bond> = g.bonds().to_vec();
        for i in 0..atoms.len() {
            let max = atoms[i].element.max_valence();
            // Explicit hydrogen counts never exceed what is left.
            let used = |bonds: &[Bond]| -> u8 {
                bonds
                    .iter()
                    .filter(|b| b.i == i || b.j == i)
                    .map(|b| b.order.valence())
                    .sum()
            };
            while used(&bonds) + atoms[i].hydrogens.unwrap_or(0) > max {
                if used(&bonds) == 0 {
                    atoms[i].hydrogens = Some(max);
                    break;
                }
                let k = bonds
                    .iter()
                    .position(|b| b.i == i || b.j == i)
                    .expect("bond present");
                match BondOrder::from_valence(bonds[k].order.valence() - 1) {
                    Some(lower) => bonds[k].order = lower,
                    None => {
                        bonds.remove(k);
                    }
                }
            }
        }
        let next =
            largest_component(&MolGraph::new(atoms, bonds).expect("bonds stay within range"));
        if next.is_valence_valid() && next.is_connected() {
            return next;
        }
        g = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smiles::{parse_smiles, random, Atom, Element};
    use rand::Rng;

    #[test]
    fn valid_input_is_a_fixed_point() {
        for s in ["CCO", "c1ccccc1O", "C#N", "O=C=O", "C[C@H](N)O"] {
            let g = parse_smiles(s).unwrap();
            assert_eq!(validity_correct(&g), g);
        }
    }

    #[test]
    fn pentavalent_carbon_loses_lowest_bond() {
        let atoms = vec![Atom::new(Element::C); 6];
        let bonds: Vec<Bond> = (1..6).map(|j| Bond::new(0, j, BondOrder::Single)).collect();
        let g = MolGraph::new(atoms, bonds).unwrap();
        let out = validity_correct(&g);
        // Atom 1 becomes isolated; the remaining star is kept.
        assert_eq!(out.num_atoms(), 5);
        assert_eq!(out.num_bonds(), 4);
        assert!(out.is_valence_valid());
    }

    #[test]
    fn double_bond_is_lowered_before_removal() {
        // O with a double and a single bond: the first (double) becomes single.
        let atoms = vec![
            Atom::new(Element::O),
            Atom::new(Element::C),
            Atom::new(Element::C),
        ];
        let g = MolGraph::new(
            atoms,
            vec![
                Bond::new(0, 1, BondOrder::Double),
                Bond::new(0, 2, BondOrder::Single),
            ],
        )
        .unwrap();
        let out = validity_correct(&g);
        assert_eq!(out.bonds()[0].order, BondOrder::Single);
        assert_eq!(out.num_bonds(), 2);
    }

    #[test]
    fn keeps_largest_component() {
        let g = parse_smiles("CC.CCCO.N").unwrap();
        assert_eq!(validity_correct(&g), parse_smiles("CCCO").unwrap());
        let tie = parse_smiles("CO.CN").unwrap();
        assert_eq!(validity_correct(&tie), parse_smiles("CO").unwrap());
    }

    #[test]
    fn random_graphs_become_valid_and_idempotent() {
        let mut r = crate::rng::from_seed(5);
        let els = [Element::C, Element::N, Element::O, Element::F];
        for _ in 0..1000 {
            let n = r.random_range(1..10);
            let atoms: Vec<Atom> = (0..n)
                .map(|_| Atom::new(els[r.random_range(0..4)]))
                .collect();
            let mut bonds = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if r.random::<f64>() < 0.35 {
                        let order = BondOrder::ALL[r.random_range(0..3)];
                        bonds.push(Bond::new(i, j, order));
                    }
                }
            }
            let g = MolGraph::new(atoms, bonds).unwrap();
            let out = validity_correct(&g);
            assert!(out.is_valence_valid() && out.is_connected() && !out.is_empty());
            assert_eq!(validity_correct(&out), out);
        }
        let mut r2 = crate::rng::from_seed(6);
        for _ in 0..100 {
            let g = random::random_molecule(&mut r2, &Default::default());
            assert_eq!(validity_correct(&g), g);
        }
    }
}
