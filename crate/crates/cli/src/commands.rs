use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use moltext::corpusminer::{build_dataset, read_corpus, read_molecules, synth_dataset};
use moltext::encoders::{DualEncoder, Vocab};
use moltext::flowgen::{encode_molecule, generate_from_text, sample_raw, train_flow, Flow};
use moltext::pretrain::{
    parse_dataset, pretrain_run, sample_sentences, PairedSample,
};
use moltext::proppred::{finetune_eval, PropDataset};
use moltext::retrieval::{evaluate, RetrievalMode};
use moltext::rng;
use moltext::smiles::{parse_smiles, write_smiles, MolGraph};
use moltext::tensor::Tensor;
use serde_json::json;

use crate::checkpoint::{restore_dual_encoder, restore_flow, Checkpoint, ModelSnapshot, RngState};
use crate::config::RunConfig;
use crate::manifest::Manifest;
use crate::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "moltext",
    version,
    about = "Graph-text molecule pretraining and generation"
)]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set pretrain.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Modality {
    Graph,
    Text,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mine molecule-paragraph pairs from a paper corpus.
    Mine {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        molecules: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic captioned-molecule dataset.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Contrastive pretraining of the graph and text encoders.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Graph-to-text and text-to-graph retrieval metrics.
    RetrieveEval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Maximum-likelihood training of the molecule flow.
    TrainFlow {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unconditioned molecules from the flow.
    Sample {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Text-guided generation by latent optimization.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Property-prediction fine-tuning of the graph encoder.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Projected embeddings as a tab-separated matrix.
    EmbedDump {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Modality::Graph)]
        modality: Modality,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Mine { .. } => "mine",
            Command::SynthCorpus { .. } => "synth-corpus",
            Command::Pretrain { .. } => "pretrain",
            Command::RetrieveEval { .. } => "retrieve-eval",
            Command::TrainFlow { .. } => "train-flow",
            Command::Sample { .. } => "sample",
            Command::Generate { .. } => "generate",
            Command::Finetune { .. } => "finetune",
            Command::EmbedDump { .. } => "embed-dump",
        }
    }
}

/// Runs one command; returns the manifest path.
pub fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let mut m = Manifest::new(cli.command.name(), &cfg);
    let primary = match cli.command {
        Command::Mine {
            corpus,
            molecules,
            out,
        } => mine(&cfg, &mut m, &corpus, &molecules, &out)?,
        Command::SynthCorpus { out, count } => synth(&cfg, &mut m, count, &out)?,
        Command::Pretrain { data, out } => pretrain(&cfg, &mut m, &data, &out)?,
        Command::RetrieveEval { model, data, out } => {
            retrieve_eval(&cfg, &mut m, &model, &data, &out)?
        }
        Command::TrainFlow { data, out } => flow_train(&cfg, &mut m, &data, &out)?,
        Command::Sample { flow, count, out } => sample(&cfg, &mut m, &flow, count, &out)?,
        Command::Generate {
            model,
            flow,
            text,
            count,
            out,
        } => generate(&cfg, &mut m, &model, &flow, &text, count, &out)?,
        Command::Finetune { model, data, out } => finetune(&cfg, &mut m, &model, &data, &out)?,
        Command::EmbedDump {
            model,
            data,
            modality,
            out,
        } => embed_dump(&mut m, &model, &data, modality, &out)?,
    };
    m.arg("out", primary.display());
    m.finish(&primary)
}

fn jsonl<T: serde::Serialize>(items: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(&it).expect("record serializes"));
        out.push('\n');
    }
    out.into_bytes()
}

fn pretty(v: &impl serde::Serialize) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s.into_bytes()
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_pairs(m: &mut Manifest, path: &Path) -> Result<Vec<PairedSample>, CliError> {
    let text = m.read_input_text("data", path)?;
    parse_dataset(&text).map_err(|e| CliError::stage("dataset", format!("{}: {e}", path.display())))
}

/// Dataset JSONL (`smiles` field) or one SMILES per line.
/// Any JSON object with a `smiles` field.
#[derive(serde::Deserialize)]
struct SmilesLine {
    smiles: String,
}

fn load_molecules(m: &mut Manifest, path: &Path) -> Result<Vec<MolGraph>, CliError> {
    let text = m.read_input_text("data", path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fail =
            |e: String| CliError::stage("molecules", format!("{}:{}: {e}", path.display(), i + 1));
        let smiles = if line.starts_with('{') {
            serde_json::from_str::<SmilesLine>(line)
                .map_err(|e| fail(e.to_string()))?
                .smiles
        } else {
            line.split_whitespace()
                .next()
                .expect("non-empty")
                .to_string()
        };
        out.push(parse_smiles(&smiles).map_err(|e| fail(e.to_string()))?);
    }
    Ok(out)
}

fn load_model(m: &mut Manifest, path: &Path) -> Result<DualEncoder, CliError> {
    let bytes = m.read_input("model", path)?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    match &ck.config {
        ModelSnapshot::DualEncoder { model } => Ok(restore_dual_encoder(&ck, model)?),
        ModelSnapshot::Flow { .. } => Err(CliError::Usage(format!(
            "{} holds a flow, not an encoder",
            path.display()
        ))),
    }
}

fn load_flow(m: &mut Manifest, path: &Path) -> Result<Flow, CliError> {
    let bytes = m.read_input("flow", path)?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    match &ck.config {
        ModelSnapshot::Flow { flow } => Ok(restore_flow(&ck, flow)?),
        ModelSnapshot::DualEncoder { .. } => Err(CliError::Usage(format!(
            "{} holds an encoder, not a flow",
            path.display()
        ))),
    }
}

fn mine(
    cfg: &RunConfig,
    m: &mut Manifest,
    corpus: &Path,
    molecules: &Path,
    out: &Path,
) -> Result<PathBuf, CliError> {
    let c = m.read_input("corpus", corpus)?;
    let mols = m.read_input("molecules", molecules)?;
    let docs = read_corpus(BufReader::new(c.as_slice())).map_err(|e| CliError::stage("mine", e))?;
    let mols =
        read_molecules(BufReader::new(mols.as_slice())).map_err(|e| CliError::stage("mine", e))?;
    let (records, stats) =
        build_dataset(&mols, &docs, &cfg.miner).map_err(|e| CliError::stage("mine", e))?;
    m.write_output(out, &jsonl(&records))?;
    m.summary = serde_json::to_value(stats).expect("stats serialize");
    Ok(out.to_path_buf())
}

fn synth(
    cfg: &RunConfig,
    m: &mut Manifest,
    count: Option<usize>,
    out: &Path,
) -> Result<PathBuf, CliError> {
    let n = count.unwrap_or(cfg.synth.count);
    m.arg("count", n);
    let records = synth_dataset(n, &cfg.synth.molecules, &cfg.synth.captions, cfg.seed);
    m.write_output(out, &jsonl(&records))?;
    m.summary = json!({ "records": records.len() });
    Ok(out.to_path_buf())
}

fn pretrain(
    cfg: &RunConfig,
    m: &mut Manifest,
    data: &Path,
    out: &Path,
) -> Result<PathBuf, CliError> {
    let pairs = load_pairs(m, data)?;
    let vocab = Vocab::build(
        pairs
            .iter()
            .flat_map(|p| p.sentences.iter().map(String::as_str)),
        cfg.vocab.min_count,
        cfg.vocab.max_size,
    );
    let mut model = DualEncoder::new(cfg.model.clone(), vocab, &mut rng::stream(cfg.seed, "init"))
        .map_err(|e| CliError::stage("pretrain", e))?;
    let start = Instant::now();
    let logs = pretrain_run(&mut model, &pairs, &cfg.pretrain, &cfg.augment, |log, _| {
        eprintln!(
            "epoch {} loss {:.4} ({:.1}s)",
            log.epoch,
            log.total,
            start.elapsed().as_secs_f64()
        );
        Ok(())
    })
    .map_err(|e| CliError::stage("pretrain", e))?;
    // wall time varies run to run; it goes to stderr only
    let log_rows = logs.iter().map(
        |l| json!({ "epoch": l.epoch, "terms": l.terms, "total": l.total, "batches": l.batches }),
    );
    m.write_output(&sibling(out, ".log.jsonl"), &jsonl(log_rows))?;
    let ck = Checkpoint::from_dual_encoder(
        &model,
        RngState {
            seed: cfg.seed,
            epochs_done: logs.len(),
        },
    );
    m.write_output(out, &ck.to_bytes())?;
    m.summary = json!({
        "pairs": pairs.len(),
        "vocab": model.vocab.len(),
        "epochs": logs.len(),
        "final_loss": logs.last().map(|l| l.total),
    });
    Ok(out.to_path_buf())
}

fn retrieve_eval(
    cfg: &RunConfig,
    m: &mut Manifest,
    model: &Path,
    data: &Path,
    out: &Path,
) -> Result<PathBuf, CliError> {
    let model = load_model(m, model)?;
    let pairs = load_pairs(m, data)?;
    let texts: Vec<String> = match cfg.retrieval.mode {
        RetrievalMode::ParagraphLevel => pairs.iter().map(PairedSample::document).collect(),
        RetrievalMode::SentenceLevel => pairs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let s = rng::derive_seed(cfg.seed, "sentences", i as u64);
                let (a, _) = sample_sentences(p.sentences.len(), s).expect("non-empty");
                p.sentences[a].clone()
            })
            .collect(),
    };
    let graphs: Vec<&MolGraph> = pairs.iter().map(|p| &p.mol).collect();
    let zg = model
        .embed_graphs(&graphs)
        .map_err(|e| CliError::stage("retrieve-eval", e))?;
    let zt = model
        .embed_texts(&texts.iter().map(String::as_str).collect::<Vec<_>>())
        .map_err(|e| CliError::stage("retrieve-eval", e))?;
    let reports =
        evaluate(&zg, &zt, &cfg.retrieval).map_err(|e| CliError::stage("retrieve-eval", e))?;
    m.write_output(out, &pretty(&reports))?;
    m.summary = serde_json::to_value(&reports).expect("reports serialize");
    Ok(out.to_path_buf())
}

fn flow_train(
    cfg: &RunConfig,
    m: &mut Manifest,
    data: &Path,
    out: &Path,
) -> Result<PathBuf, CliError> {
    let all = load_molecules(m, data)?;
    let total = all.len();
    let mols: Vec<MolGraph> = all
        .into_iter()
        .filter(|g| encode_molecule(g, &cfg.flow).is_ok())
        .collect();
    let mut flow = Flow::new(cfg.flow.clone(), &mut rng::stream(cfg.seed, "init"))
        .map_err(|e| CliError::stage("train-flow", e))?;
    let start = Instant::now();
    let nll = train_flow(&mut flow, &mols, &cfg.flow_train, |epoch, v| {
        eprintln!(
            "epoch {epoch} nll {v:.5} ({:.1}s)",
            start.elapsed().as_secs_f64()
        );
    })
    .map_err(|e| CliError::stage("train-flow", e))?;
    let rows = nll
        .iter()
        .enumerate()
        .map(|(e, v)| json!({ "epoch": e + 1, "nll": v }));
    m.write_output(&sibling(out, ".log.jsonl"), &jsonl(rows))?;
    let ck = Checkpoint::from_flow(
        &flow,
        RngState {
            seed: cfg.seed,
            epochs_done: nll.len(),
        },
    );
    m.write_output(out, &ck.to_bytes())?;
    m.summary = json!({
        "molecules": mols.len(),
        "skipped": total - mols.len(),
        "final_nll": nll.last(),
    });
    Ok(out.to_path_buf())
}

fn sample(
    cfg: &RunConfig,
    m: &mut Manifest,
    flow: &Path,
    count: usize,
    out: &Path,
) -> Result<PathBuf, CliError> {
    let flow = load_flow(m, flow)?;
    m.arg("count", count);
    let mut lines = String::new();
    let mut raw_valid = 0;
    for i in 0..count {
        let (raw, fixed) = sample_raw(&flow, rng::derive_seed(cfg.seed, "sample", i as u64))
            .map_err(|e| CliError::stage("sample", e))?;
        raw_valid += usize::from(raw.is_valence_valid());
        lines.push_str(&write_smiles(&fixed));
        lines.push('\n');
    }
    m.write_output(out, lines.as_bytes())?;
    m.summary = json!({
        "count": count,
        "raw_valid_fraction": if count == 0 { 0.0 } else { raw_valid as f64 / count as f64 },
    });
    Ok(out.to_path_buf())
}

fn generate(
    cfg: &RunConfig,
    m: &mut Manifest,
    model: &Path,
    flow: &Path,
    text: &str,
    count: usize,
    out: &Path,
) -> Result<PathBuf, CliError> {
    let model = load_model(m, model)?;
    let flow = load_flow(m, flow)?;
    m.arg("text", text);
    m.arg("count", count);
    let mut lines = String::new();
    let mut trace = Vec::new();
    let mut summary = Vec::new();
    for i in 0..count {
        let mut opt = cfg.generate.clone();
        if count > 1 {
            opt.seed = rng::derive_seed(cfg.seed, "generate", i as u64);
        }
        let r = generate_from_text(text, &model, &flow, &opt)
            .map_err(|e| CliError::stage("generate", e))?;
        let smiles = write_smiles(&r.mol);
        lines.push_str(&smiles);
        lines.push('\n');
        summary.push(json!({
            "seed": opt.seed,
            "smiles": smiles,
            "initial_loss": r.trace.first().map(|t| t.loss),
            "final_loss": r.trace.last().map(|t| t.loss),
        }));
        trace.extend(r.trace.into_iter().map(|t| {
            json!({ "sample": i, "iteration": t.iteration, "loss": t.loss, "cosine": t.cosine })
        }));
    }
    m.write_output(&sibling(out, ".trace.jsonl"), &jsonl(trace))?;
    m.write_output(out, lines.as_bytes())?;
    m.summary = json!(summary);
    Ok(out.to_path_buf())
}

fn finetune(
    cfg: &RunConfig,
    m: &mut Manifest,
    model: &Path,
    data: &Path,
    out: &Path,
) -> Result<PathBuf, CliError> {
    let model = load_model(m, model)?;
    let text = m.read_input_text("data", data)?;
    let ds = PropDataset::parse(&text)
        .map_err(|e| CliError::stage("finetune", format!("{}: {e}", data.display())))?;
    let name = data
        .file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let report = finetune_eval(&name, &model.config.gin, &model.store, &ds, &cfg.finetune)
        .map_err(|e| CliError::stage("finetune", e))?;
    m.write_output(out, &pretty(&report))?;
    m.summary = json!({ "mean_auc": report.mean_auc, "std_auc": report.std_auc });
    Ok(out.to_path_buf())
}

fn embed_dump(
    m: &mut Manifest,
    model: &Path,
    data: &Path,
    modality: Modality,
    out: &Path,
) -> Result<PathBuf, CliError> {
    let model = load_model(m, model)?;
    let z: Tensor = match modality {
        Modality::Graph => {
            let mols = load_molecules(m, data)?;
            model
                .embed_graphs(&mols.iter().collect::<Vec<_>>())
                .map_err(|e| CliError::stage("embed-dump", e))?
        }
        Modality::Text => {
            let pairs = load_pairs(m, data)?;
            let docs: Vec<String> = pairs.iter().map(PairedSample::document).collect();
            model
                .embed_texts(&docs.iter().map(String::as_str).collect::<Vec<_>>())
                .map_err(|e| CliError::stage("embed-dump", e))?
        }
    };
    m.arg("modality", format!("{modality:?}").to_lowercase());
    let mut text = String::new();
    for row in z.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        text.push_str(&cells.join("\t"));
        text.push('\n');
    }
    m.write_output(out, text.as_bytes())?;
    m.summary = json!({ "rows": z.shape()[0], "cols": z.shape()[1] });
    Ok(out.to_path_buf())
}
