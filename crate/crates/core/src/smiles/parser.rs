use std::collections::BTreeMap;

use super::{Atom, Bond, BondOrder, Chirality, Element, MolError, MolGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BondSym {
    Single,
    Double,
    Triple,
    Aromatic,
}

struct PendingBond {
    i: usize,
    j: usize,
    sym: Option<BondSym>,
    pos: usize,
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    atoms: Vec<Atom>,
    aromatic: Vec<bool>,
    bonds: Vec<PendingBond>,
}

fn syntax(pos: usize, msg: impl Into<String>) -> MolError {
    MolError::Syntax {
        pos,
        msg: msg.into(),
    }
}

/// Parses a SMILES string into a valence-checked heavy-atom graph.
pub fn parse_smiles(text: &str) -> Result<MolGraph, MolError> {
    let text = text.trim();
    if text.is_empty() {
        return Err(syntax(0, "empty SMILES"));
    }
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
        atoms: Vec::new(),
        aromatic: Vec::new(),
        bonds: Vec::new(),
    };
    p.parse()?;
    p.finish()
}

impl Parser<'_> {
    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn parse(&mut self) -> Result<(), MolError> {
        let mut prev: Option<usize> = None;
        let mut branches: Vec<(Option<usize>, usize)> = Vec::new();
        let mut pending: Option<(BondSym, usize)> = None;
        let mut rings: BTreeMap<u32, (usize, Option<BondSym>, usize)> = BTreeMap::new();

        while let Some(c) = self.peek() {
            let start = self.pos;
            match c {
                b'(' => {
                    if prev.is_none() {
                        return Err(syntax(start, "branch without a preceding atom"));
                    }
                    if pending.is_some() {
                        return Err(syntax(start, "bond symbol before '('"));
                    }
                    branches.push((prev, self.atoms.len()));
                    self.pos += 1;
                }
                b')' => {
                    let (restore, atoms_before) = branches
                        .pop()
                        .ok_or_else(|| syntax(start, "unbalanced ')'"))?;
                    if pending.is_some() {
                        return Err(syntax(start, "dangling bond symbol before ')'"));
                    }
                    if self.atoms.len() == atoms_before {
                        return Err(syntax(start, "empty branch"));
                    }
                    prev = restore;
                    self.pos += 1;
                }
                b'-' | b'=' | b'#' | b':' => {
                    if pending.is_some() {
                        return Err(syntax(start, "two consecutive bond symbols"));
                    }
                    let sym = match c {
                        b'-' => BondSym::Single,
                        b'=' => BondSym::Double,
                        b'#' => BondSym::Triple,
                        _ => BondSym::Aromatic,
                    };
                    pending = Some((sym, start));
                    self.pos += 1;
                }
                b'/' | b'\\' => {
                    return Err(MolError::UnsupportedFeature("directional bonds".into()));
                }
                b'$' => return Err(MolError::UnsupportedFeature("quadruple bonds".into())),
                b'.' => {
                    if pending.is_some() {
                        return Err(syntax(start, "bond symbol before '.'"));
                    }
                    prev = None;
                    self.pos += 1;
                }
                b'0'..=b'9' | b'%' => {
                    let label = self.ring_label()?;
                    let here = prev.ok_or_else(|| syntax(start, "ring closure without an atom"))?;
                    let sym = pending.take().map(|(s, _)| s);
                    match rings.remove(&label) {
                        Some((other, other_sym, _)) => {
                            let sym = match (sym, other_sym) {
                                (Some(a), Some(b)) if a != b => {
                                    return Err(syntax(
                                        start,
                                        format!("conflicting bond symbols on ring {label}"),
                                    ))
                                }
                                (a, b) => a.or(b),
                            };
                            if other == here {
                                return Err(syntax(
                                    start,
                                    format!("ring {label} closes on its own atom"),
                                ));
                            }
                            self.bonds.push(PendingBond {
                                i: other,
                                j: here,
                                sym,
                                pos: start,
                            });
                        }
                        None => {
                            rings.insert(label, (here, sym, start));
                        }
                    }
                }
                _ => {
                    let idx = self.atom()?;
                    match prev {
                        Some(p) => self.bonds.push(PendingBond {
                            i: p,
                            j: idx,
                            sym: pending.take().map(|(s, _)| s),
                            pos: start,
                        }),
                        None => {
                            if let Some((_, at)) = pending {
                                return Err(syntax(at, "bond symbol without a preceding atom"));
                            }
                        }
                    }
                    prev = Some(idx);
                }
            }
        }
        if let Some((_, at)) = pending {
            return Err(syntax(at, "dangling bond symbol"));
        }
        if !branches.is_empty() {
            return Err(syntax(self.src.len(), "unbalanced '('"));
        }
        if let Some((label, (_, _, at))) = rings.into_iter().next() {
            return Err(syntax(at, format!("unmatched ring-closure digit {label}")));
        }
        if self.atoms.is_empty() {
            return Err(syntax(0, "no atoms"));
        }
        Ok(())
    }

    fn ring_label(&mut self) -> Result<u32, MolError> {
        let start = self.pos;
        if self.peek() == Some(b'%') {
            let digits = self.src.get(self.pos + 1..self.pos + 3);
            match digits {
                Some(d) if d.iter().all(u8::is_ascii_digit) => {
                    self.pos += 3;
                    Ok(u32::from(d[0] - b'0') * 10 + u32::from(d[1] - b'0'))
                }
                _ => Err(syntax(start, "'%' must be followed by two digits")),
            }
        } else {
            let d = self.peek().expect("digit");
            self.pos += 1;
            Ok(u32::from(d - b'0'))
        }
    }

    fn push_atom(&mut self, atom: Atom, aromatic: bool) -> usize {
        self.atoms.push(atom);
        self.aromatic.push(aromatic);
        self.atoms.len() - 1
    }

    fn atom(&mut self) -> Result<usize, MolError> {
        let start = self.pos;
        let c = self.peek().expect("atom char");
        if c == b'[' {
            return self.bracket_atom();
        }
        let next = self.src.get(self.pos + 1).copied();
        let (element, aromatic, len) = match (c, next) {
            (b'C', Some(b'l')) => (Element::Cl, false, 2),
            (b'B', Some(b'r')) => (Element::Br, false, 2),
            (b'C', _) => (Element::C, false, 1),
            (b'N', _) => (Element::N, false, 1),
            (b'O', _) => (Element::O, false, 1),
            (b'F', _) => (Element::F, false, 1),
            (b'P', _) => (Element::P, false, 1),
            (b'S', _) => (Element::S, false, 1),
            (b'I', _) => (Element::I, false, 1),
            (b'c', _) => (Element::C, true, 1),
            (b'n', _) => (Element::N, true, 1),
            (b'o', _) => (Element::O, true, 1),
            (b's', _) => (Element::S, true, 1),
            (b'p', _) => (Element::P, true, 1),
            (c, _) if c.is_ascii_alphabetic() || c == b'*' => {
                return Err(MolError::UnsupportedElement((c as char).to_string()))
            }
            (c, _) => {
                return Err(syntax(
                    start,
                    format!("unexpected character '{}'", c as char),
                ))
            }
        };
        self.pos += len;
        Ok(self.push_atom(Atom::new(element), aromatic))
    }

    fn bracket_atom(&mut self) -> Result<usize, MolError> {
        let open = self.pos;
        self.pos += 1;
        let close = self.src[self.pos..]
            .iter()
            .position(|&c| c == b']')
            .map(|k| self.pos + k)
            .ok_or_else(|| syntax(open, "unterminated bracket atom"))?;
        let body = &self.src[self.pos..close];
        let mut k;
        if body.first().is_some_and(u8::is_ascii_digit) {
            return Err(MolError::UnsupportedFeature("isotopes".into()));
        }
        let letter = |i: usize| body.get(i).copied();
        let (element, aromatic) = match (letter(0), letter(1)) {
            (Some(b'C'), Some(b'l')) => {
                k = 2;
                (Element::Cl, false)
            }
            (Some(b'B'), Some(b'r')) => {
                k = 2;
                (Element::Br, false)
            }
            (Some(first), second) if first.is_ascii_alphabetic() => {
                // Reject two-letter symbols we do not know ("Na", "Se", ...).
                if let Some(s) = second.filter(u8::is_ascii_lowercase) {
                    if first.is_ascii_uppercase() && s != b'H' {
                        let sym = format!("{}{}", first as char, s as char);
                        if sym.parse::<Element>().is_err() {
                            return Err(MolError::UnsupportedElement(sym));
                        }
                    }
                }
                k = 1;
                match first {
                    b'c' | b'n' | b'o' | b's' | b'p' => {
                        let e = (first.to_ascii_uppercase() as char)
                            .to_string()
                            .parse()
                            .unwrap();
                        (e, true)
                    }
                    _ => {
                        let sym = (first as char).to_string();
                        (
                            sym.parse::<Element>()
                                .map_err(MolError::UnsupportedElement)?,
                            false,
                        )
                    }
                }
            }
            _ => return Err(syntax(open, "bracket atom without an element")),
        };
        let mut chirality = Chirality::None;
        if letter(k) == Some(b'@') {
            if letter(k + 1) == Some(b'@') {
                chirality = Chirality::Clockwise;
                k += 2;
            } else {
                chirality = Chirality::CounterClockwise;
                k += 1;
            }
            if letter(k).is_some_and(|c| c.is_ascii_uppercase() && c != b'H') {
                return Err(MolError::UnsupportedFeature(
                    "extended chirality classes".into(),
                ));
            }
        }
        let mut hydrogens = 0u8;
        if letter(k) == Some(b'H') {
            k += 1;
            hydrogens = 1;
            if let Some(d) = letter(k).filter(u8::is_ascii_digit) {
                hydrogens = d - b'0';
                k += 1;
            }
        }
        match letter(k) {
            None => {}
            Some(b'+') | Some(b'-') => {
                return Err(MolError::UnsupportedFeature("formal charges".into()))
            }
            Some(b':') => return Err(MolError::UnsupportedFeature("atom classes".into())),
            Some(c) => {
                return Err(syntax(
                    self.pos + k,
                    format!("unexpected '{}' in bracket atom", c as char),
                ))
            }
        }
        self.pos = close + 1;
        let atom = Atom {
            element,
            chirality,
            hydrogens: Some(hydrogens),
        };
        Ok(self.push_atom(atom, aromatic))
    }

    fn finish(self) -> Result<MolGraph, MolError> {
        let aromatic_atom = self.aromatic;
        let mut bonds = Vec::with_capacity(self.bonds.len());
        let mut candidate = Vec::with_capacity(self.bonds.len());
        let mut seen = std::collections::HashSet::new();
        for pb in &self.bonds {
            let key = (pb.i.min(pb.j), pb.i.max(pb.j));
            if !seen.insert(key) {
                return Err(syntax(
                    pb.pos,
                    format!("duplicate bond between atoms {} and {}", key.0, key.1),
                ));
            }
            let (order, is_candidate) = match pb.sym {
                Some(BondSym::Single) => (BondOrder::Single, false),
                Some(BondSym::Double) => (BondOrder::Double, false),
                Some(BondSym::Triple) => (BondOrder::Triple, false),
                Some(BondSym::Aromatic) => (BondOrder::Single, true),
                None => (
                    BondOrder::Single,
                    aromatic_atom[pb.i] && aromatic_atom[pb.j],
                ),
            };
            bonds.push(Bond::new(pb.i, pb.j, order));
            candidate.push(is_candidate);
        }
        let mut graph = MolGraph::new(self.atoms, bonds)?;

        // Implicit bonds between aromatic atoms are aromatic only inside rings.
        let ring: Vec<bool> = (0..graph.num_bonds())
            .map(|k| graph.is_ring_bond(k))
            .collect();
        for (k, b) in graph.bonds_mut().iter_mut().enumerate() {
            b.aromatic = candidate[k] && ring[k];
        }
        kekulize(&mut graph, &aromatic_atom)?;
        graph.check_valence()?;
        Ok(graph)
    }
}

/// Assigns alternating double bonds inside aromatic systems.
fn kekulize(graph: &mut MolGraph, aromatic_atom: &[bool]) -> Result<(), MolError> {
    let n = graph.num_atoms();
    let adj = graph.adjacency();
    let mut needs = vec![false; n];
    for i in 0..n {
        if !aromatic_atom[i] {
            continue;
        }
        let atom = graph.atom(i);
        if !atom.element.can_be_aromatic() {
            return Err(MolError::Syntax {
                pos: 0,
                msg: format!("{} cannot be aromatic", atom.element),
            });
        }
        let mut used = atom.hydrogens.unwrap_or(0);
        let mut arom_bonds = 0;
        for &(_, k) in &adj[i] {
            let b = graph.bonds()[k];
            if b.aromatic {
                arom_bonds += 1;
            }
            used += b.order.valence();
        }
        if arom_bonds == 0 {
            return Err(MolError::Syntax {
                pos: 0,
                msg: format!("aromatic atom {i} is not in an aromatic ring"),
            });
        }
        let base = match atom.element {
            Element::C => 4,
            Element::N | Element::P => 3,
            _ => 2,
        };
        needs[i] = match atom.element {
            Element::O | Element::S => false,
            _ => base > used,
        };
    }

    let mut mate: Vec<Option<usize>> = vec![None; n];
    let order: Vec<usize> = (0..n).filter(|&i| needs[i]).collect();
    if !match_from(0, &order, &adj, graph.bonds(), &needs, &mut mate) {
        return Err(MolError::Syntax {
            pos: 0,
            msg: "cannot kekulize aromatic system".into(),
        });
    }
    for b in graph.bonds_mut() {
        if b.aromatic && mate[b.i] == Some(b.j) {
            b.order = BondOrder::Double;
        }
    }
    Ok(())
}

fn match_from(
    start: usize,
    order: &[usize],
    adj: &[Vec<(usize, usize)>],
    bonds: &[Bond],
    needs: &[bool],
    mate: &mut [Option<usize>],
) -> bool {
    let Some(pos) = (start..order.len()).find(|&p| mate[order[p]].is_none()) else {
        return true;
    };
    let u = order[pos];
    for &(v, k) in &adj[u] {
        if bonds[k].aromatic && needs[v] && mate[v].is_none() {
            mate[u] = Some(v);
            mate[v] = Some(u);
            if match_from(pos + 1, order, adj, bonds, needs, mate) {
                return true;
            }
            mate[u] = None;
            mate[v] = None;
        }
    }
    false
}
