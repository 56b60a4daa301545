use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::pretrain::DatasetRecord;
use crate::rng;
use crate::smiles::random::{random_molecule, RandomMolConfig};
use crate::smiles::{detect_functional_groups, write_smiles, Element, FunctionalGroup, MolGraph};

fn element_name(e: Element) -> &'static str {
    match e {
        Element::C => "carbon",
        Element::N => "nitrogen",
        Element::O => "oxygen",
        Element::F => "fluorine",
        Element::P => "phosphorus",
        Element::S => "sulfur",
        Element::Cl => "chlorine",
        Element::Br => "bromine",
        Element::I => "iodine",
    }
}

fn group_phrase(f: FunctionalGroup) -> &'static str {
    match f {
        FunctionalGroup::Hydroxyl => "a hydroxyl group",
        FunctionalGroup::Carbonyl => "a carbonyl group",
        FunctionalGroup::Amine => "an amine group",
        FunctionalGroup::Halogen => "a halogen atom",
        FunctionalGroup::BenzeneRing => "a benzene ring",
        FunctionalGroup::Carboxyl => "a carboxyl group",
        FunctionalGroup::DoubleBond => "a carbon carbon double bond",
    }
}

const DISTRACTORS: [&str; 8] = [
    "It has been reported in several studies.",
    "Further work is needed to clarify its role.",
    "The compound is available from commercial suppliers.",
    "Its biological activity has been examined in vitro.",
    "Samples were stored at room temperature.",
    "Several synthetic routes to it have been described.",
    "It appears in a number of patent filings.",
    "The substance is handled with standard laboratory care.",
];

/// Sentence counts drawn per document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub min_facts: usize,
    pub max_facts: usize,
    pub min_distractors: usize,
    pub max_distractors: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            min_facts: 3,
            max_facts: 8,
            min_distractors: 1,
            max_distractors: 2,
        }
    }
}

fn list_words(parts: &[&str]) -> String {
    match parts.split_last() {
        Some((last, [])) => last.to_string(),
        Some((last, rest)) => format!("{} and {last}", rest.join(", ")),
        None => String::new(),
    }
}

/// Heavy-atom size class used in captions.
pub fn size_word(n: usize) -> &'static str {
    match n {
        0..=4 => "very small",
        5..=7 => "small",
        8..=10 => "medium-sized",
        _ => "large",
    }
}

/// Count in words, capped at "three or more".
pub fn count_word(k: usize) -> &'static str {
    match k {
        0 => "no",
        1 => "one",
        2 => "two",
        _ => "three or more",
    }
}

fn ring_phrase(r: usize) -> &'static str {
    match r {
        0 => "no ring",
        1 => "one ring",
        2 => "two rings",
        _ => "three or more rings",
    }
}

/// True statements about `g`: the always-kept ones first, then optional
/// details. Counts are coarse on purpose; a dropped atom or a cropped
/// subgraph should rarely turn a caption into a lie about the view. Each
/// summary sentence packs several facts since training reads one sentence
/// at a time.
fn facts(g: &MolGraph, rng: &mut impl Rng) -> (Vec<String>, Vec<String>) {
    let pick = |rng: &mut dyn rand::RngCore, opts: &[String]| {
        opts[rng.random_range(0..opts.len())].clone()
    };
    let n = g.num_atoms();
    let present: Vec<Element> = Element::ALL
        .into_iter()
        .filter(|&e| g.count_element(e) > 0)
        .collect();
    let names: Vec<&str> = present.iter().map(|&e| element_name(e)).collect();
    let elems = list_words(&names);
    let size = size_word(n);
    let rings = ring_phrase(g.ring_count());
    let mut core = vec![pick(
        rng,
        &[
            format!("It is a {size} molecule with {rings}, made of {elems}."),
            format!("The {size} compound is made of {elems} and has {rings}."),
        ],
    )];
    for f in detect_functional_groups(g) {
        let p = group_phrase(f);
        core.push(pick(
            rng,
            &[
                format!("The molecule contains {p}."),
                format!("It has {p}."),
                format!("The structure bears {p}."),
            ],
        ));
    }
    let mut extra = Vec::new();
    let hetero: Vec<String> = present
        .iter()
        .filter(|&&e| e != Element::C)
        .map(|&e| {
            let k = g.count_element(e);
            let noun = if k == 1 { "atom" } else { "atoms" };
            format!("{} {} {noun}", count_word(k), element_name(e))
        })
        .collect();
    if !hetero.is_empty() {
        let refs: Vec<&str> = hetero.iter().map(String::as_str).collect();
        extra.push(format!("Its heteroatoms are {}.", list_words(&refs)));
    }
    let branched = (0..n).any(|i| g.degree(i) >= 3);
    let shape = if branched { "branched" } else { "unbranched" };
    extra.push(pick(
        rng,
        &[
            format!("The {size} skeleton is {shape} and has {rings}."),
            format!("Its skeleton is {shape}."),
        ],
    ));
    if n > 0 && g.count_element(Element::C) * 5 >= n * 3 {
        extra.push("Most of its atoms are carbon.".into());
    }
    extra.push(format!("The molecule consists of {elems}."));
    (core, extra)
}

/// 3–8 true structural sentences (a size, ring and element summary and every
/// functional group always among them) and 1–2 unrelated sentences, shuffled. Deterministic in `(g, seed)`.
pub fn synth_captions(g: &MolGraph, seed: u64, cfg: &SynthConfig) -> Vec<String> {
    let mut r = rng::stream(seed, "captions");
    let (core, mut extra) = facts(g, &mut r);
    extra.shuffle(&mut r);
    let available = core.len() + extra.len();
    let hi = cfg.max_facts.min(available);
    let lo = cfg.min_facts.min(hi).max(core.len().min(hi));
    let k = r.random_range(lo..=hi);
    let mut chosen: Vec<String> = core.into_iter().chain(extra).take(k).collect();
    let d = r.random_range(cfg.min_distractors..=cfg.max_distractors.max(cfg.min_distractors));
    let mut others: Vec<&str> = DISTRACTORS.to_vec();
    others.shuffle(&mut r);
    chosen.extend(others.into_iter().take(d).map(String::from));
    chosen.shuffle(&mut r);
    chosen
}

/// `n` random molecules with synthetic captions.
pub fn synth_dataset(
    n: usize,
    mols: &RandomMolConfig,
    captions: &SynthConfig,
    seed: u64,
) -> Vec<DatasetRecord> {
    let mut r = rng::stream(seed, "molecules");
    (0..n)
        .map(|i| {
            let g = random_molecule(&mut r, mols);
            DatasetRecord {
                cid: Some(format!("synth-{i}")),
                name: None,
                smiles: write_smiles(&g),
                sentences: synth_captions(
                    &g,
                    rng::derive_seed(seed, "captions", i as u64),
                    captions,
                ),
            }
        })
        .collect()
}
