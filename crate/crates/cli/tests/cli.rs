mod common;

use std::path::Path;

use common::{moltext, ok, write_config};
use moltext::encoders::{DualEncoder, GinConfig, ModelConfig, TextConfig, Vocab};
use moltext::flowgen::{Flow, GenConfig};
use moltext::rng;
use moltext_cli::{
    load_checkpoint, restore_dual_encoder, save_checkpoint, Checkpoint, CheckpointError, RngState,
};

fn encoder(hidden: usize) -> DualEncoder {
    let cfg = ModelConfig {
        gin: GinConfig {
            num_layers: 2,
            hidden_dim: hidden,
            ..Default::default()
        },
        text: TextConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            ff_dim: 8,
            max_len: 16,
            ..Default::default()
        },
        proj_dim: 8,
    };
    let vocab = Vocab::build(["a small test vocabulary"], 1, 100);
    DualEncoder::new(cfg, vocab, &mut rng::from_seed(3)).unwrap()
}

fn bits(ck: &Checkpoint) -> Vec<(String, Vec<usize>, Vec<u64>)> {
    ck.tensors
        .iter()
        .map(|(n, t)| {
            (
                n.clone(),
                t.shape().to_vec(),
                t.data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut model = encoder(12);
    // values that do not survive a decimal round trip
    let id = model.store.id_of("gin.layer0.eps").unwrap();
    model.store.get_mut(id).data_mut()[0] = 0.1 + 0.2;
    let ck = Checkpoint::from_dual_encoder(
        &model,
        RngState {
            seed: 9,
            epochs_done: 4,
        },
    );
    save_checkpoint(&path, &ck).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(bits(&back), bits(&ck));
    assert_eq!(back, ck);
    assert_eq!(std::fs::read(&path).unwrap(), back.to_bytes());
    let leftovers = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(leftovers, 1, "temporary file left behind");

    let flow = Flow::new(GenConfig::default(), &mut rng::from_seed(1)).unwrap();
    let fck = Checkpoint::from_flow(&flow, RngState::default());
    let fpath = dir.path().join("f.ckpt");
    save_checkpoint(&fpath, &fck).unwrap();
    assert_eq!(bits(&load_checkpoint(&fpath).unwrap()), bits(&fck));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ck = Checkpoint::from_dual_encoder(&encoder(12), RngState::default());
    let bytes = ck.to_bytes();

    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(CheckpointError::CorruptFile(_))
    ));
    std::fs::write(&path, &bytes[..40]).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(CheckpointError::CorruptFile(_))
    ));

    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 1;
    std::fs::write(&path, &flipped).unwrap();
    assert!(
        matches!(load_checkpoint(&path), Err(CheckpointError::CorruptFile(m)) if m.contains("checksum"))
    );

    let text = String::from_utf8_lossy(&bytes).replacen("\"version\":1", "\"version\":2", 1);
    let mut v2 = text.as_bytes().to_vec();
    v2.truncate(text.find('\n').unwrap() + 1);
    v2.extend_from_slice(&bytes[bytes.iter().position(|&b| b == b'\n').unwrap() + 1..]);
    std::fs::write(&path, &v2).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(CheckpointError::VersionMismatch {
            found: 2,
            expected: 1
        })
    ));
}

#[test]
fn hidden_size_mismatch_is_a_shape_error() {
    let wide = encoder(300);
    let ck = Checkpoint::from_dual_encoder(&wide, RngState::default());
    let mut narrow = wide.config.clone();
    narrow.gin.hidden_dim = 128;
    match restore_dual_encoder(&ck, &narrow) {
        Err(CheckpointError::ShapeMismatch {
            expected, found, ..
        }) => {
            assert_ne!(expected, found);
        }
        other => panic!("expected ShapeMismatch, got {:?}", other.map(|_| ())),
    }
    assert!(restore_dual_encoder(&ck, &wide.config).is_ok());
}

fn record(stderr: &[u8]) -> serde_json::Value {
    let text = String::from_utf8_lossy(stderr);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {text}");
    serde_json::from_str(lines[0]).unwrap()
}

#[test]
fn errors_exit_2_with_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = moltext(
        dir.path(),
        &["pretrain", "--data", "missing.jsonl", "--out", "m.ckpt"],
    );
    assert_eq!(out.status.code(), Some(2));
    let r = record(&out.stderr);
    assert_eq!(r["error"], "io");
    assert_eq!(r["path"], "missing.jsonl");

    let out = moltext(
        dir.path(),
        &["synth-corpus", "--out", "d.jsonl", "--set", "synth.nope=1"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(record(&out.stderr)["error"], "config");

    let out = moltext(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(record(&out.stderr)["error"], "usage");

    std::fs::write(dir.path().join("bad.ckpt"), b"not a checkpoint\n").unwrap();
    std::fs::write(dir.path().join("d.jsonl"), b"").unwrap();
    let out = moltext(
        dir.path(),
        &[
            "retrieve-eval",
            "--model",
            "bad.ckpt",
            "--data",
            "d.jsonl",
            "--out",
            "r.json",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(record(&out.stderr)["error"], "corrupt_file");
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn embed_dump_writes_one_row_per_molecule() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d);
    let smiles = "CCO\nc1ccccc1\nCC(=O)O\nCN\nOCCO\nCCCl\nC=CC\nC#N\nCC(C)C\nFC(F)F\n";
    std::fs::write(d.join("mols.smi"), smiles).unwrap();
    ok(
        d,
        &["synth-corpus", "--config", "run.toml", "--out", "d.jsonl"],
    );
    ok(
        d,
        &[
            "pretrain",
            "--config",
            "run.toml",
            "--set",
            "model.proj_dim=256",
            "--set",
            "pretrain.epochs=1",
            "--data",
            "d.jsonl",
            "--out",
            "m.ckpt",
        ],
    );
    ok(
        d,
        &[
            "embed-dump",
            "--config",
            "run.toml",
            "--model",
            "m.ckpt",
            "--data",
            "mols.smi",
            "--out",
            "e.tsv",
        ],
    );
    let rows: Vec<Vec<f64>> = read(d, "e.tsv")
        .lines()
        .map(|l| l.split('\t').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r.len() == 256));
    let manifest: serde_json::Value =
        serde_json::from_str(&read(d, "e.tsv.manifest.json")).unwrap();
    assert_eq!(manifest["summary"]["rows"], 10);
    assert_eq!(manifest["command"], "embed-dump");
}

#[test]
fn generate_writes_molecule_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d);
    ok(
        d,
        &["synth-corpus", "--config", "run.toml", "--out", "d.jsonl"],
    );
    ok(
        d,
        &[
            "pretrain", "--config", "run.toml", "--data", "d.jsonl", "--out", "m.ckpt",
        ],
    );
    ok(
        d,
        &[
            "train-flow",
            "--config",
            "run.toml",
            "--data",
            "d.jsonl",
            "--out",
            "f.ckpt",
        ],
    );
    ok(
        d,
        &[
            "generate",
            "--config",
            "run.toml",
            "--model",
            "m.ckpt",
            "--flow",
            "f.ckpt",
            "--text",
            "The molecule contains a hydroxyl group",
            "--out",
            "g.smi",
        ],
    );
    let smi = read(d, "g.smi");
    let g = moltext::smiles::parse_smiles(smi.trim()).unwrap();
    assert!(g.is_valence_valid() && g.is_connected());
    let trace: Vec<serde_json::Value> = read(d, "g.smi.trace.jsonl")
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(trace.len(), 6);
    assert!(trace
        .iter()
        .all(|t| t["loss"].is_f64() && t["cosine"].is_f64()));

    ok(
        d,
        &[
            "sample", "--config", "run.toml", "--flow", "f.ckpt", "--count", "20", "--out", "s.smi",
        ],
    );
    assert_eq!(read(d, "s.smi").lines().count(), 20);

    // an encoder checkpoint where a flow is expected
    let out = moltext(d, &["sample", "--flow", "m.ckpt", "--out", "x.smi"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn identical_runs_give_identical_bytes() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        write_config(d);
        ok(
            d,
            &["synth-corpus", "--config", "run.toml", "--out", "d.jsonl"],
        );
        ok(
            d,
            &[
                "pretrain", "--config", "run.toml", "--data", "d.jsonl", "--out", "m.ckpt",
            ],
        );
        ok(
            d,
            &[
                "retrieve-eval",
                "--config",
                "run.toml",
                "--model",
                "m.ckpt",
                "--data",
                "d.jsonl",
                "--out",
                "r.json",
            ],
        );
        let names = [
            "d.jsonl",
            "d.jsonl.manifest.json",
            "m.ckpt",
            "m.ckpt.log.jsonl",
            "m.ckpt.manifest.json",
            "r.json",
            "r.json.manifest.json",
        ];
        names.map(|n| std::fs::read(d.join(n)).unwrap())
    };
    assert_eq!(run(), run());
}
