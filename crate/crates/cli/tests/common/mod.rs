#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

/// Small models so end-to-end runs take seconds.
pub const TOY_CONFIG: &str = r#"
seed = 5

[model]
proj_dim = 16

[model.gin]
num_layers = 2
hidden_dim = 16

[model.text]
dim = 16
layers = 1
heads = 2
ff_dim = 32
max_len = 48

[pretrain]
epochs = 2
batch_size = 16

[retrieval]
batch_size = 16
recall_k = 5

[synth]
count = 48

[synth.molecules]
max_atoms = 8

[flow]
coupling_layers = 2
edge_hidden = 16
atom_hidden = 8

[flow.dims]
n_max = 8

[flow_train]
epochs = 2
batch_size = 16

[generate]
max_iters = 5
"#;

pub fn moltext(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moltext"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn ok(dir: &Path, args: &[&str]) {
    let out = moltext(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn write_config(dir: &Path) {
    std::fs::write(dir.join("run.toml"), TOY_CONFIG).unwrap();
}
