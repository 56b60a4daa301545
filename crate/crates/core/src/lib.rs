//! Molecular graph–text contrastive learning and text-guided molecule generation.

pub mod augment;
pub mod corpusminer;
pub mod encoders;
pub mod flowgen;
pub mod pretrain;
pub mod proppred;
pub mod retrieval;
pub mod rng;
pub mod smiles;
pub mod tensor;
