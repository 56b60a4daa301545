//! SMILES subset parsing and writing, canonical keys, dense tensor
//! conversion, and functional-group detection.
//!
//! The grammar covers organic-subset atoms, bracket atoms with chirality and
//! hydrogen counts (no charges, no isotopes), branches, ring closures and
//! lowercase aromatic atoms. Aromatic rings are kekulized on parse; the
//! aromatic annotation stays on the bonds.

mod canon;
mod dense;
mod element;
mod graph;
mod groups;
mod parser;
pub mod random;
mod writer;

pub use canon::{are_isomorphic, canonical_key};
pub use dense::{decode_argmax, from_dense, to_dense, DenseDims, DenseMol};
pub use element::Element;
pub use graph::{Atom, Bond, BondOrder, Chirality, MolGraph};
pub use groups::{detect_functional_groups, FunctionalGroup};
pub use parser::parse_smiles;
pub use writer::write_smiles;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MolError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unsupported element '{0}'")]
    UnsupportedElement(String),
    #[error("unsupported SMILES feature: {0}")]
    UnsupportedFeature(String),
    #[error("valence violation at atom {atom} ({element}): bond valence {valence}")]
    ValenceViolation {
        atom: usize,
        element: Element,
        valence: u8,
    },
    #[error("invalid graph structure: {0}")]
    Structure(String),
    #[error("{atoms} atoms exceed the dense capacity of {max}")]
    TooManyAtoms { atoms: usize, max: usize },
    #[error("type outside the dense vocabulary: {0}")]
    TypeOutOfVocabulary(String),
    #[error("dense tensor violates its invariants: {0}")]
    InvalidDense(String),
}
