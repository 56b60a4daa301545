//! Run configuration: one TOML file with a section per pipeline stage,
//! `--set section.key=value` overrides on top, and a single master seed.

use std::path::Path;

use moltext::augment::AugmentConfig;
use moltext::corpusminer::{MinerConfig, SynthConfig};
use moltext::encoders::ModelConfig;
use moltext::flowgen::{FlowTrainConfig, GenConfig, GenOptConfig};
use moltext::pretrain::PretrainConfig;
use moltext::proppred::FinetuneConfig;
use moltext::retrieval::RetrievalConfig;
use moltext::smiles::random::RandomMolConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    pub min_count: usize,
    pub max_size: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            min_count: 1,
            max_size: 30_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub count: usize,
    pub molecules: RandomMolConfig,
    pub captions: SynthConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            count: 2400,
            molecules: RandomMolConfig::default(),
            captions: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; every stage's own `seed` field is overwritten by it.
    pub seed: u64,
    pub model: ModelConfig,
    pub vocab: VocabConfig,
    pub augment: AugmentConfig,
    pub pretrain: PretrainConfig,
    pub retrieval: RetrievalConfig,
    pub miner: MinerConfig,
    pub synth: SynthSection,
    pub flow: GenConfig,
    pub flow_train: FlowTrainConfig,
    pub generate: GenOptConfig,
    pub finetune: FinetuneConfig,
}

impl RunConfig {
    /// Reads `path` (if any), applies `overrides` and propagates the seed.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| CliError::Config(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table.clone())
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        let round = toml::Value::try_from(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(key) = unknown_key(&toml::Value::Table(table), &round, "") {
            return Err(CliError::Config(format!("unknown config key {key}")));
        }
        Ok(cfg.seeded())
    }

    fn seeded(mut self) -> Self {
        let s = self.seed;
        self.pretrain.seed = s;
        self.retrieval.seed = s;
        self.flow_train.seed = s;
        self.generate.seed = s;
        self.finetune.seed = s;
        self
    }

    /// Hex sha256 of the resolved configuration's JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a
/// bare string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{spec}' is not key=value")))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key '{key}'")));
    }
    let (last, path) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override '{key}': {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// First key present in `given` but absent from the re-serialized config.
fn unknown_key(given: &toml::Value, known: &toml::Value, prefix: &str) -> Option<String> {
    let (toml::Value::Table(g), toml::Value::Table(k)) = (given, known) else {
        return None;
    };
    for (name, v) in g {
        let path = if prefix.is_empty() {
            name.clone()
        } else {
            format!("{prefix}.{name}")
        };
        match k.get(name) {
            None => return Some(path),
            Some(kv) => {
                if let Some(bad) = unknown_key(v, kv, &path) {
                    return Some(bad);
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_seed_propagation() {
        let cfg = RunConfig::load(
            None,
            &[
                "seed=7".into(),
                "pretrain.epochs=3".into(),
                "model.gin.hidden_dim=32".into(),
                "retrieval.mode=sentence_level".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.pretrain.epochs, 3);
        assert_eq!(cfg.model.gin.hidden_dim, 32);
        assert_eq!(cfg.pretrain.seed, 7);
        assert_eq!(cfg.generate.seed, 7);
        assert_eq!(
            cfg.retrieval.mode,
            moltext::retrieval::RetrievalMode::SentenceLevel
        );
    }

    #[test]
    fn unknown_keys_and_bad_overrides_are_rejected() {
        let e = RunConfig::load(None, &["pretrain.epochz=3".into()]).unwrap_err();
        assert!(e.to_string().contains("pretrain.epochz"), "{e}");
        assert!(RunConfig::load(None, &["pretrain".into()]).is_err());
        assert!(RunConfig::load(None, &["seed=3".into(), "seed.x=1".into()]).is_err());
        assert!(RunConfig::load(None, &["pretrain.epochs=\"many\"".into()]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::load(None, &[]).unwrap();
        let b = RunConfig::load(None, &["pretrain.epochs=2".into()]).unwrap();
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
