//! Name-query paragraph mining over a local paper corpus, and synthetic
//! captions for desk-scale training data.

mod synth;

pub use synth::{synth_captions, synth_dataset, SynthConfig};

use std::collections::HashSet;
use std::io::BufRead;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::pretrain::DatasetRecord;
use crate::smiles::{parse_smiles, MolError};

#[derive(Debug, thiserror::Error)]
pub enum MinerError {
    #[error("corpus line {line}: {msg}")]
    CorpusRead { line: usize, msg: String },
    #[error("molecule line {line}: {msg}")]
    MoleculeRead { line: usize, msg: String },
    #[error("molecule '{name}': {source}")]
    Smiles { name: String, source: MolError },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldTag {
    Medicine,
    Biology,
    Chemistry,
    ComputerScience,
    #[serde(other)]
    Other,
}

impl FieldTag {
    pub fn is_searched(self) -> bool {
        !matches!(self, FieldTag::Other)
    }
}

/// A section given either as sentences or as running text to be split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SectionText {
    Sentences(Vec<String>),
    Text(String),
}

impl SectionText {
    pub fn sentences(&self) -> Vec<String> {
        match self {
            SectionText::Sentences(s) => s.clone(),
            SectionText::Text(t) => split_sentences(t),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sections {
    #[serde(default, rename = "abstract", skip_serializing_if = "Option::is_none")]
    pub abstract_: Option<SectionText>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub introduction: Option<SectionText>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conclusion: Option<SectionText>,
}

/// Corpus line. Sections other than abstract, introduction and conclusion are
/// ignored when parsing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub paper_id: String,
    pub field: FieldTag,
    #[serde(default)]
    pub sections: Sections,
}

impl CorpusDoc {
    /// Searchable sections, each as a sentence list.
    pub fn searchable(&self) -> Vec<Vec<String>> {
        [
            &self.sections.abstract_,
            &self.sections.introduction,
            &self.sections.conclusion,
        ]
        .into_iter()
        .flatten()
        .map(SectionText::sentences)
        .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoleculeRecord {
    #[serde(default)]
    pub cid: Option<String>,
    pub name: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
    pub smiles: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinerConfig {
    pub max_paragraphs: usize,
    pub max_bytes: usize,
    /// Synonyms are searched when the name yields fewer paragraphs than this.
    pub min_name_paragraphs: usize,
}

impl Default for MinerConfig {
    fn default() -> Self {
        Self {
            max_paragraphs: 5000,
            max_bytes: 500 << 20,
            min_name_paragraphs: 2,
        }
    }
}

const ABBREVIATIONS: [&str; 14] = [
    "e.g.", "i.e.", "et al.", "etc.", "fig.", "figs.", "eq.", "ref.", "vs.", "dr.", "approx.",
    "no.", "ca.", "cf.",
];

/// Splits at `.`, `?` or `!` followed by whitespace and an uppercase letter,
/// unless the text before the break ends with a known abbreviation.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0;
    for k in 0..chars.len() {
        let (pos, c) = chars[k];
        if !matches!(c, '.' | '?' | '!') {
            continue;
        }
        let mut m = k + 1;
        while m < chars.len() && chars[m].1.is_whitespace() {
            m += 1;
        }
        if m == k + 1 || m >= chars.len() || !chars[m].1.is_uppercase() {
            continue;
        }
        let head = &text[start..pos + c.len_utf8()];
        let lower = head.to_lowercase();
        if c == '.'
            && ABBREVIATIONS
                .iter()
                .any(|a| lower.ends_with(a) && boundary_before(&lower, a))
        {
            continue;
        }
        let s = head.trim();
        if !s.is_empty() {
            out.push(s.to_string());
        }
        start = chars[m].0;
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

fn boundary_before(text: &str, suffix: &str) -> bool {
    text[..text.len() - suffix.len()]
        .chars()
        .next_back()
        .is_none_or(|c| !c.is_alphanumeric())
}

/// Case-insensitive whole-word matcher for a molecule name.
pub fn name_matcher(name: &str) -> Regex {
    Regex::new(&format!(
        r"(?i)(?:^|[^\w]){}(?:[^\w]|$)",
        regex::escape(name)
    ))
    .expect("escaped pattern")
}

/// One retrieved paragraph: the hit sentence with its neighbours.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paragraph {
    pub paper_id: String,
    pub section: usize,
    pub hit: usize,
    pub sentences: Vec<String>,
}

impl Paragraph {
    pub fn text(&self) -> String {
        self.sentences.join(" ")
    }
}

/// Paragraphs for `mol`: windows `[hit−1, hit+1]` around every sentence
/// mentioning the name, clipped to the section; synonyms are searched when
/// the name alone gives fewer than `min_name_paragraphs`. Stops before
/// either cap would be exceeded (the paragraph cap is checked first).
pub fn retrieve_paragraphs(
    mol: &MoleculeRecord,
    corpus: &[CorpusDoc],
    cfg: &MinerConfig,
) -> Vec<Paragraph> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut bytes = 0usize;
    let mut full = false;
    let mut search = |query: &str, out: &mut Vec<Paragraph>, full: &mut bool| {
        if query.trim().is_empty() {
            return;
        }
        let re = name_matcher(query);
        for doc in corpus.iter().filter(|d| d.field.is_searched()) {
            for (si, sentences) in doc.searchable().iter().enumerate() {
                for (hit, s) in sentences.iter().enumerate() {
                    if *full {
                        return;
                    }
                    if !re.is_match(s) || !seen.insert((doc.paper_id.clone(), si, hit)) {
                        continue;
                    }
                    let lo = hit.saturating_sub(1);
                    let hi = (hit + 1).min(sentences.len() - 1);
                    let p = Paragraph {
                        paper_id: doc.paper_id.clone(),
                        section: si,
                        hit,
                        sentences: sentences[lo..=hi].to_vec(),
                    };
                    let size = p.text().len();
                    if out.len() >= cfg.max_paragraphs || bytes + size > cfg.max_bytes {
                        *full = true;
                        return;
                    }
                    bytes += size;
                    out.push(p);
                }
            }
        }
    };
    search(&mol.name, &mut out, &mut full);
    if out.len() < cfg.min_name_paragraphs {
        for syn in &mol.synonyms {
            search(syn, &mut out, &mut full);
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MineStats {
    pub molecules_in: usize,
    pub pairs_out: usize,
    pub dropped: usize,
    pub total_paragraphs: usize,
}

/// Dataset records (one per molecule with at least one paragraph); the
/// record's sentences are the paragraph texts.
pub fn build_dataset(
    molecules: &[MoleculeRecord],
    corpus: &[CorpusDoc],
    cfg: &MinerConfig,
) -> Result<(Vec<DatasetRecord>, MineStats), MinerError> {
    let mut records = Vec::new();
    let mut stats = MineStats {
        molecules_in: molecules.len(),
        ..Default::default()
    };
    for m in molecules {
        parse_smiles(&m.smiles).map_err(|source| MinerError::Smiles {
            name: m.name.clone(),
            source,
        })?;
        let paragraphs = retrieve_paragraphs(m, corpus, cfg);
        if paragraphs.is_empty() {
            stats.dropped += 1;
            continue;
        }
        stats.total_paragraphs += paragraphs.len();
        records.push(DatasetRecord {
            cid: m.cid.clone(),
            name: Some(m.name.clone()),
            smiles: m.smiles.clone(),
            sentences: paragraphs.iter().map(Paragraph::text).collect(),
        });
    }
    stats.pairs_out = records.len();
    Ok((records, stats))
}

fn read_lines<T: serde::de::DeserializeOwned>(
    reader: impl BufRead,
    err: impl Fn(usize, String) -> MinerError,
) -> Result<Vec<T>, MinerError> {
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| err(k + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| err(k + 1, e.to_string()))?);
    }
    Ok(out)
}

/// Line-delimited corpus records, ordered by paper id.
pub fn read_corpus(reader: impl BufRead) -> Result<Vec<CorpusDoc>, MinerError> {
    let mut docs: Vec<CorpusDoc> =
        read_lines(reader, |line, msg| MinerError::CorpusRead { line, msg })?;
    docs.sort_by(|a, b| a.paper_id.cmp(&b.paper_id));
    Ok(docs)
}

pub fn read_molecules(reader: impl BufRead) -> Result<Vec<MoleculeRecord>, MinerError> {
    let mols: Vec<MoleculeRecord> =
        read_lines(reader, |line, msg| MinerError::MoleculeRead { line, msg })?;
    for (k, m) in mols.iter().enumerate() {
        if m.name.trim().is_empty() {
            return Err(MinerError::MoleculeRead {
                line: k + 1,
                msg: "empty name".into(),
            });
        }
    }
    Ok(mols)
}
