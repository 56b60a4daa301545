//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails. Runs without the libtest harness so the lines
//! are always visible.

mod common;

use std::time::Instant;

use moltext::augment::AugmentConfig;
use moltext::corpusminer::{
    retrieve_paragraphs, synth_captions, synth_dataset, CorpusDoc, FieldTag, MinerConfig,
    MoleculeRecord, SectionText, Sections, SynthConfig,
};
use moltext::encoders::{DualEncoder, GinConfig, ModelConfig, TextConfig, Vocab};
use moltext::flowgen::{
    generate_from_text, sample_raw, train_flow, Flow, FlowError, FlowTrainConfig, GenConfig,
    GenOptConfig,
};
use moltext::pretrain::{
    batch_loss, cross_modal_loss, info_nce, intra_graph_loss, pretrain_run, tokenize_dataset,
    total_pretrain_loss, BatchViews, LossFlags, PairedSample, PretrainConfig,
};
use moltext::proppred::{finetune_eval, roc_auc, FinetuneConfig, PropDataset, PropRecord};
use moltext::retrieval::{eval_batched_top1, eval_recall_at_k, evaluate, RetrievalConfig};
use moltext::rng;
use moltext::smiles::random::{random_molecule, RandomMolConfig};
use moltext::smiles::{
    detect_functional_groups, parse_smiles, write_smiles, BondOrder, DenseDims, Element,
    FunctionalGroup, MolGraph,
};
use moltext::tensor::{grad_check, normal_tensor, op_suite, Graph, ParamStore, Tensor, Var};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// Models shared between criteria: the pretrained dual encoder from 3 and
/// the trained flow from 4 feed criterion 5.
#[derive(Default)]
struct Shared {
    model: Option<DualEncoder>,
    flow: Option<Flow>,
    unconditioned_hydroxyl: Option<f64>,
}

fn main() {
    let criteria: [(&str, fn(&mut Shared) -> Outcome); 9] = [
        ("gradient suite", gradient_suite),
        ("loss oracles", loss_oracles),
        ("contrastive trainability", contrastive_trainability),
        ("flow suite", flow_suite),
        ("text-guided generation", guided_generation),
        ("retrieval metric oracles", retrieval_oracles),
        ("corpus miner", corpus_miner),
        ("property prediction", property_prediction),
        ("determinism", determinism),
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let out = check(&mut shared);
        let secs = t0.elapsed().as_secs_f64();
        println!(
            "criterion {} {name}: {} ({}; {secs:.1}s)",
            k + 1,
            if out.pass { "PASS" } else { "FAIL" },
            out.detail
        );
        failed += usize::from(!out.pass);
    }
    if failed > 0 {
        println!("{failed} of 9 criteria failed");
        std::process::exit(1);
    }
    println!("all 9 criteria passed");
}

// ---------------------------------------------------------------- 1

fn tiny_model(data: &[PairedSample], seed: u64) -> DualEncoder {
    let texts: Vec<String> = data.iter().flat_map(|s| s.sentences.clone()).collect();
    let vocab = Vocab::build(texts.iter().map(String::as_str), 1, 200);
    let cfg = ModelConfig {
        gin: GinConfig {
            num_layers: 2,
            hidden_dim: 6,
            ..Default::default()
        },
        text: TextConfig {
            vocab_size: 0,
            dim: 6,
            layers: 1,
            heads: 2,
            ff_dim: 8,
            max_len: 24,
        },
        proj_dim: 5,
    };
    DualEncoder::new(cfg, vocab, &mut rng::from_seed(seed)).unwrap()
}

fn paired(records: &[moltext::pretrain::DatasetRecord]) -> Vec<PairedSample> {
    records
        .iter()
        .map(|r| PairedSample::new(parse_smiles(&r.smiles).unwrap(), r.sentences.clone()).unwrap())
        .collect()
}

/// Worst relative error of the full pretraining loss (all ten terms) with
/// respect to every model parameter tensor, up to 12 entries per tensor.
fn composite_loss_error() -> f64 {
    let mols = RandomMolConfig {
        min_atoms: 3,
        max_atoms: 7,
        ..Default::default()
    };
    let data = paired(&synth_dataset(3, &mols, &SynthConfig::default(), 40));
    let model = tiny_model(&data, 41);
    let tokens = tokenize_dataset(&model, &data).unwrap();
    let cfg = PretrainConfig {
        temperature: 0.5,
        symmetric: true,
        intra_text: true,
        ..Default::default()
    };
    let aug = AugmentConfig::default();
    let batch = [0, 1, 2];
    let eval = |m: &DualEncoder| {
        let g = Graph::inference();
        batch_loss(&g, m, &data, &tokens, &batch, 0, &cfg, &aug)
            .unwrap()
            .0
            .item()
    };
    let g = Graph::new();
    let (loss, _) = batch_loss(&g, &model, &data, &tokens, &batch, 0, &cfg, &aug).unwrap();
    let grads = g.backward(loss).unwrap().for_store(&model.store);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for id in model.store.ids() {
        let len = model.store.get(id).numel();
        let analytic = grads[id.index()]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(model.store.get(id).shape()));
        for k in (0..len).step_by(len.div_ceil(12).max(1)) {
            let orig = model.store.get(id).data()[k];
            probe.store.get_mut(id).data_mut()[k] = orig + h;
            let up = eval(&probe);
            probe.store.get_mut(id).data_mut()[k] = orig - h;
            let down = eval(&probe);
            probe.store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((analytic.data()[k] - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    worst
}

fn toy_flow_config(n_max: usize) -> GenConfig {
    GenConfig {
        dims: DenseDims::new(
            n_max,
            vec![Element::C, Element::N, Element::O, Element::F],
            BondOrder::ALL.to_vec(),
        )
        .unwrap(),
        coupling_layers: 8,
        atom_hidden: 96,
        dequant: 0.3,
        bond_sharpness: 20.0,
        ..Default::default()
    }
}

/// A flow with every coupling active: fresh flows start as the identity.
fn perturbed_flow(cfg: GenConfig, std: f64, seed: u64) -> Flow {
    let mut flow = Flow::new(cfg, &mut rng::from_seed(seed)).unwrap();
    let mut r = rng::from_seed(seed + 1);
    let ids: Vec<_> = flow.store.ids().collect();
    for id in ids {
        let shape = flow.store.get(id).shape().to_vec();
        let scale = if shape.len() == 2 {
            std / (shape[0] as f64).sqrt()
        } else {
            std
        };
        for x in flow.store.get_mut(id).data_mut() {
            *x += scale * normal_tensor(&[1], &mut r).data()[0];
        }
    }
    flow
}

fn flow_reverse_error(seed: u64) -> f64 {
    let mut cfg = toy_flow_config(4);
    cfg.coupling_layers = 4;
    cfg.edge_hidden = 8;
    cfg.atom_hidden = 6;
    let flow = perturbed_flow(cfg, 0.4, seed);
    let (dv, de) = (flow.config.atom_dim(), flow.config.edge_dim());
    let mut r = rng::from_seed(seed + 2);
    let q = normal_tensor(&[1, dv + de], &mut r);
    let n_out = 4 * flow.config.dims.c_a() + 6 * flow.config.dims.c_b();
    let w = normal_tensor(&[n_out], &mut r);
    grad_check(
        |g, q: Var<'_>| {
            let (vhat, slots) = flow
                .reverse_flow(g, &q.slice(1, 0, dv)?, &q.slice(1, dv, de)?)
                .map_err(|e| match e {
                    FlowError::Tensor(t) => t,
                    other => panic!("{other}"),
                })?;
            let nv = vhat.shape().iter().product();
            let ns = slots.shape().iter().product();
            let all = Var::concat(&[vhat.reshape(&[nv])?, slots.reshape(&[ns])?], 0)?;
            Ok(all.mul(&g.constant(w.clone()))?.sum())
        },
        &q,
        1e-5,
    )
    .unwrap()
}

fn gradient_suite(_: &mut Shared) -> Outcome {
    let t0 = Instant::now();
    let mut r = rng::from_seed(1);
    let cases = op_suite(&mut r);
    let mut op_worst: f64 = 0.0;
    let mut worst_name = "";
    for case in &cases {
        for _ in 0..5 {
            let p = normal_tensor(&case.shape, &mut r);
            let e = grad_check(|g, x| (case.f)(g, x), &p, 1e-5).unwrap();
            if e > op_worst {
                op_worst = e;
                worst_name = case.name;
            }
        }
    }
    let loss_err = composite_loss_error();
    let flow_err = (0..3).map(|s| flow_reverse_error(10 + s)).fold(0.0, f64::max);
    let secs = t0.elapsed().as_secs_f64();
    Outcome::new(
        op_worst < 1e-5 && loss_err < 1e-5 && flow_err < 1e-4 && secs < 120.0,
        format!(
            "{} ops worst {op_worst:.1e} ({worst_name}), composite loss {loss_err:.1e}, \
             flow reverse {flow_err:.1e}",
            cases.len()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn rows(n: usize, d: usize, seed: u64) -> Tensor {
    normal_tensor(&[n, d], &mut rng::from_seed(seed))
}

fn loss_oracles(_: &mut Shared) -> Outcome {
    let g = Graph::inference();
    let (a, b) = (g.constant(rows(1, 8, 1)), g.constant(rows(1, 8, 2)));
    let cross = cross_modal_loss(&a, &b, 0.1).unwrap().item();
    let intra = intra_graph_loss(&a, &b, 0.1).unwrap().item();
    let views = BatchViews {
        z_g: a,
        z_g_aug: g.constant(rows(1, 8, 3)),
        z_t: b,
        z_t_aug: g.constant(rows(1, 8, 4)),
    };
    let flags = LossFlags {
        tau: 0.1,
        symmetric: true,
        intra_text: true,
    };
    let total = total_pretrain_loss(&views, flags).unwrap().0.item();
    let single = cross == 0.0 && intra == 0.0 && total == 0.0;
    // Adding +0 prints a negative zero as 0.
    let (cross, intra, total) = (cross + 0.0, intra + 0.0, total + 0.0);

    let eye = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let hand = info_nce(&eye, &eye, 1.0).unwrap().item();
    let hand_ok = (hand - (1.0 + (-1.0f64).exp()).ln()).abs() <= 1e-9;

    let mean = (0..20)
        .map(|s| {
            let (x, y) = (g.constant(rows(64, 256, 100 + s)), g.constant(rows(64, 256, 200 + s)));
            info_nce(&x, &y, 1.0).unwrap().item()
        })
        .sum::<f64>()
        / 20.0;
    let random_ok = (mean - 64f64.ln()).abs() <= 0.1;
    Outcome::new(
        single && hand_ok && random_ok,
        format!(
            "N=1 losses {cross}/{intra}/{total}, hand case {hand:.12}, \
             random N=64 mean {mean:.4} vs {:.4}",
            64f64.ln()
        ),
    )
}

// ---------------------------------------------------------------- 3

const PRETRAIN_PAIRS: usize = 4000;
const HELD_OUT: usize = 400;
const PRETRAIN_EPOCHS: usize = 40;
const PRETRAIN_HIDDEN: usize = 96;

fn contrastive_trainability(shared: &mut Shared) -> Outcome {
    let t0 = Instant::now();
    let records = synth_dataset(
        PRETRAIN_PAIRS + HELD_OUT,
        &RandomMolConfig::default(),
        &SynthConfig::default(),
        1,
    );
    let data = paired(&records);
    let (train, test) = data.split_at(PRETRAIN_PAIRS);
    let texts: Vec<String> = train.iter().flat_map(|s| s.sentences.clone()).collect();
    let vocab = Vocab::build(texts.iter().map(String::as_str), 1, 1000);
    let h = PRETRAIN_HIDDEN;
    let cfg = ModelConfig {
        gin: GinConfig {
            num_layers: 3,
            hidden_dim: h,
            ..Default::default()
        },
        text: TextConfig {
            vocab_size: 0,
            dim: h,
            layers: 2,
            heads: 4,
            ff_dim: 2 * h,
            max_len: 96,
        },
        proj_dim: 256,
    };
    let mut model = DualEncoder::new(cfg, vocab, &mut rng::from_seed(2)).unwrap();
    let pc = PretrainConfig {
        epochs: PRETRAIN_EPOCHS,
        lr: 1e-3,
        batch_size: 64,
        seed: 3,
        symmetric: true,
        ..Default::default()
    };
    pretrain_run(&mut model, train, &pc, &AugmentConfig::default(), |_, _| Ok(())).unwrap();
    let graphs: Vec<&MolGraph> = test.iter().map(|s| &s.mol).collect();
    let docs: Vec<String> = test.iter().map(PairedSample::document).collect();
    let doc_refs: Vec<&str> = docs.iter().map(String::as_str).collect();
    let zg = model.embed_graphs(&graphs).unwrap();
    let zt = model.embed_texts(&doc_refs).unwrap();
    let rc = RetrievalConfig {
        batch_size: 64,
        recall_k: 20,
        ..Default::default()
    };
    let [g2t, t2g] = evaluate(&zg, &zt, &rc).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    shared.model = Some(model);
    let pass = g2t.top1_batched >= 0.5
        && t2g.top1_batched >= 0.5
        && g2t.recall_at_k >= 0.6
        && t2g.recall_at_k >= 0.6
        && secs < 1800.0;
    Outcome::new(
        pass,
        format!(
            "{PRETRAIN_PAIRS} pairs, {PRETRAIN_EPOCHS} epochs; graph->text top-1 {:.3} \
             recall@20 {:.3}; text->graph top-1 {:.3} recall@20 {:.3}",
            g2t.top1_batched, g2t.recall_at_k, t2g.top1_batched, t2g.recall_at_k
        ),
    )
}

// ---------------------------------------------------------------- 4

const FLOW_MOLECULES: usize = 2000;
const FLOW_EPOCHS: usize = 60;

fn toy_molecules(forbid: Vec<FunctionalGroup>) -> RandomMolConfig {
    RandomMolConfig {
        min_atoms: 3,
        max_atoms: 9,
        elements: vec![
            (Element::C, 6.0),
            (Element::N, 1.2),
            (Element::O, 1.5),
            (Element::F, 0.3),
        ],
        forbid,
        ..Default::default()
    }
}

fn round_trip_error() -> f64 {
    let flow = perturbed_flow(toy_flow_config(9), 0.3, 4);
    let cfg = &flow.config;
    let mut worst: f64 = 0.0;
    for s in 0..10 {
        let xv = rows(10, cfg.atom_dim(), 100 + s);
        let xe = rows(10, cfg.edge_dim(), 200 + s);
        let g = Graph::inference();
        let fwd = flow
            .forward_flow(&g, &g.constant(xv.clone()), &g.constant(xe.clone()))
            .unwrap();
        let (bv, be) = flow.reverse_raw(&g, &fwd.q_v, &fwd.q_e).unwrap();
        worst = worst
            .max(bv.value().max_abs_diff(&xv))
            .max(be.value().max_abs_diff(&xe));
    }
    worst
}

fn flow_suite(shared: &mut Shared) -> Outcome {
    let round_trip = round_trip_error();
    let mut r = rng::from_seed(5);
    // The flow never sees a hydroxyl, which gives criterion 5 its baseline.
    let cfg = toy_molecules(vec![FunctionalGroup::Hydroxyl]);
    let mols: Vec<MolGraph> = (0..FLOW_MOLECULES)
        .map(|_| random_molecule(&mut r, &cfg))
        .collect();
    let mut flow = Flow::new(toy_flow_config(9), &mut rng::from_seed(7)).unwrap();
    let tc = FlowTrainConfig {
        epochs: FLOW_EPOCHS,
        lr: 2e-3,
        seed: 8,
        ..Default::default()
    };
    let history = train_flow(&mut flow, &mols, &tc, |_, _| {}).unwrap();
    let decreasing = history.windows(2).all(|w| w[1] < w[0]);
    let (mut raw_ok, mut fixed_ok, mut hydroxyl) = (0, 0, 0);
    for seed in 0..1000 {
        let (raw, fixed) = sample_raw(&flow, seed).unwrap();
        raw_ok += usize::from(raw.is_valence_valid());
        fixed_ok += usize::from(fixed.is_valence_valid() && fixed.is_connected());
        hydroxyl += usize::from(detect_functional_groups(&fixed).contains(&FunctionalGroup::Hydroxyl));
    }
    shared.flow = Some(flow);
    shared.unconditioned_hydroxyl = Some(hydroxyl as f64 / 1000.0);
    Outcome::new(
        round_trip <= 1e-8 && decreasing && raw_ok >= 800 && fixed_ok == 1000,
        format!(
            "round trip {round_trip:.1e}; NLL {:.3} -> {:.3} strictly decreasing {decreasing}; \
             raw valid {raw_ok}/1000, corrected valid {fixed_ok}/1000",
            history[0],
            history.last().unwrap()
        ),
    )
}

// ---------------------------------------------------------------- 5

const PROMPT: &str = "contains a hydroxyl group";

fn guided_generation(shared: &mut Shared) -> Outcome {
    let (Some(model), Some(flow)) = (&shared.model, &shared.flow) else {
        return Outcome::new(false, "needs the models from criteria 3 and 4");
    };
    let baseline = shared.unconditioned_hydroxyl.unwrap_or(1.0);
    let (mut reduced, mut hydroxyl, mut clean) = (0, 0, 0);
    let mut slowest: f64 = 0.0;
    for seed in 0..50 {
        let t0 = Instant::now();
        let res = generate_from_text(
            PROMPT,
            model,
            flow,
            &GenOptConfig {
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        slowest = slowest.max(t0.elapsed().as_secs_f64());
        let first = res.trace.first().unwrap().loss;
        let last = res.trace.last().unwrap().loss;
        reduced += usize::from(last < first);
        hydroxyl += usize::from(detect_functional_groups(&res.mol).contains(&FunctionalGroup::Hydroxyl));
        // The graph model has no formal charges; the written form must not
        // grow any either.
        let smiles = write_smiles(&res.mol);
        let charge_free = !smiles.contains('+') && !smiles.contains("-]");
        clean += usize::from(res.mol.is_valence_valid() && res.mol.is_connected() && charge_free);
    }
    Outcome::new(
        reduced >= 45 && hydroxyl >= 20 && baseline <= 0.10 && clean == 50 && slowest < 60.0,
        format!(
            "loss reduced {reduced}/50; hydroxyl {hydroxyl}/50 vs unconditioned {:.1}%; \
             valid and charge-free {clean}/50; slowest {slowest:.1}s",
            100.0 * baseline
        ),
    )
}

// ---------------------------------------------------------------- 6

fn retrieval_oracles(_: &mut Shared) -> Outcome {
    let mean = (0..50)
        .map(|s| {
            let q = rows(640, 32, 1000 + s);
            let c = rows(640, 32, 2000 + s);
            eval_batched_top1(&q, &c, 64, s).unwrap()
        })
        .sum::<f64>()
        / 50.0;
    let small = (1..=20).all(|n| {
        let q = rows(n, 16, n as u64);
        let c = rows(n, 16, 100 + n as u64);
        eval_recall_at_k(&q, &c, 20).unwrap() == 1.0
    });
    Outcome::new(
        (mean - 1.0 / 64.0).abs() <= 0.01 && small,
        format!("random top-1 mean {mean:.4} vs {:.4}; recall@20 on pools of 1..=20 is 1.0: {small}", 1.0 / 64.0),
    )
}

// ---------------------------------------------------------------- 7

fn miner_doc(id: &str, field: FieldTag, sections: [Vec<String>; 2]) -> CorpusDoc {
    let [abs, intro] = sections;
    CorpusDoc {
        paper_id: id.into(),
        field,
        sections: Sections {
            abstract_: Some(SectionText::Sentences(abs)),
            introduction: Some(SectionText::Sentences(intro)),
            conclusion: None,
        },
    }
}

fn corpus_miner(_: &mut Shared) -> Outcome {
    // Fixture: filler sentences with the name planted at known positions.
    let filler = |tag: &str, n: usize| -> Vec<String> {
        (0..n).map(|i| format!("Filler {tag} sentence {i}.")).collect()
    };
    let plant = |mut s: Vec<String>, at: &[usize]| {
        for &i in at {
            s[i] = format!("Sample {i} contained zorbanol in trace amounts.");
        }
        s
    };
    let hits: [(&str, FieldTag, [Vec<usize>; 2]); 4] = [
        ("p1", FieldTag::Chemistry, [vec![0, 3], vec![5]]),
        ("p2", FieldTag::Biology, [vec![], vec![2, 3]]),
        ("p3", FieldTag::Other, [vec![1], vec![]]),
        ("p4", FieldTag::Medicine, [vec![4], vec![0]]),
    ];
    let mut corpus = Vec::new();
    let mut expected = Vec::new();
    for (id, field, at) in &hits {
        let sections = [
            plant(filler(&format!("{id}a"), 5), &at[0]),
            plant(filler(&format!("{id}b"), 6), &at[1]),
        ];
        if *field != FieldTag::Other {
            for (si, positions) in at.iter().enumerate() {
                for &h in positions {
                    let lo = h.saturating_sub(1);
                    let hi = (h + 1).min(sections[si].len() - 1);
                    expected.push(sections[si][lo..=hi].join(" "));
                }
            }
        }
        corpus.push(miner_doc(id, *field, sections));
    }
    let mol = MoleculeRecord {
        cid: None,
        name: "Zorbanol".into(),
        synonyms: vec![],
        smiles: "CCO".into(),
    };
    let texts = |cfg: &MinerConfig| -> Vec<String> {
        retrieve_paragraphs(&mol, &corpus, cfg)
            .iter()
            .map(|p| p.text())
            .collect()
    };
    let windows_ok = texts(&MinerConfig::default()) == expected;

    let capped = MinerConfig {
        max_paragraphs: 3,
        ..Default::default()
    };
    let count_ok = texts(&capped) == expected[..3];

    // Room for exactly the first four paragraphs, one byte short of five.
    let four: usize = expected[..4].iter().map(String::len).sum();
    let budget = four + expected[4].len() - 1;
    let by_bytes = texts(&MinerConfig {
        max_bytes: budget,
        ..Default::default()
    });
    let bytes_ok = by_bytes == expected[..4];
    let exact = texts(&MinerConfig {
        max_bytes: four + expected[4].len(),
        ..Default::default()
    }) == expected[..5];
    Outcome::new(
        windows_ok && count_ok && bytes_ok && exact,
        format!(
            "{} expected windows match {windows_ok}; paragraph cap {count_ok}; \
             byte cap {bytes_ok} (boundary inclusive {exact})",
            expected.len()
        ),
    )
}

// ---------------------------------------------------------------- 8

fn nitrogen_dataset(n: usize, seed: u64) -> PropDataset {
    let mut r = rng::stream(seed, "molecules");
    let cfg = RandomMolConfig {
        max_atoms: 9,
        ..Default::default()
    };
    let records = (0..n)
        .map(|_| {
            let g = random_molecule(&mut r, &cfg);
            PropRecord {
                smiles: write_smiles(&g),
                labels: vec![Some(u8::from(g.count_element(Element::N) > 0))],
            }
        })
        .collect();
    PropDataset::new(records).unwrap()
}

fn property_prediction(_: &mut Shared) -> Outcome {
    let gin = GinConfig {
        num_layers: 2,
        hidden_dim: 16,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    moltext::encoders::GinEncoder::new(gin.clone(), &mut store, "gin", &mut rng::from_seed(3))
        .unwrap();
    let data = nitrogen_dataset(1000, 4);
    let ft = FinetuneConfig {
        runs: 10,
        epochs: 15,
        lr_encoder: 1e-3,
        lr_head: 1e-2,
        seed: 5,
        ..Default::default()
    };
    let separable = finetune_eval("nitrogen", &gin, &store, &data, &ft).unwrap();
    // A fresh permutation of the labels for each run.
    let shuffled: Vec<f64> = (0..10u64)
        .map(|k| {
            let one = FinetuneConfig {
                runs: 1,
                seed: 5,
                ..ft.clone()
            };
            finetune_eval("shuffled", &gin, &store, &data.shuffled_labels(100 + k), &one)
                .unwrap()
                .mean_auc
        })
        .collect();
    let shuffled_mean = shuffled.iter().sum::<f64>() / shuffled.len() as f64;
    let hand = roc_auc(&[0.9, 0.8, 0.3, 0.2], &[true, false, true, false]).unwrap();
    Outcome::new(
        separable.mean_auc >= 0.95 && (shuffled_mean - 0.5).abs() <= 0.05 && hand == 0.75,
        format!(
            "separable mean AUC {:.3} (std {:.3}, 10 runs); shuffled {shuffled_mean:.3}; hand case {hand}",
            separable.mean_auc, separable.std_auc
        ),
    )
}

// ---------------------------------------------------------------- 9

fn pipeline_fixture(dir: &std::path::Path) {
    let mut r = rng::from_seed(9);
    let cfg = RandomMolConfig {
        max_atoms: 8,
        elements: vec![(Element::C, 6.0), (Element::N, 1.2), (Element::O, 1.5)],
        ..Default::default()
    };
    let mut molecules = String::new();
    let mut corpus = String::new();
    let mut flow_set = String::new();
    for i in 0..40u64 {
        let g = random_molecule(&mut r, &cfg);
        let name = format!("zorb{}", (b'a' + (i % 26) as u8) as char).repeat(1 + i as usize / 26);
        let smiles = write_smiles(&g);
        molecules.push_str(
            &serde_json::json!({ "name": name, "smiles": smiles, "cid": i.to_string() }).to_string(),
        );
        molecules.push('\n');
        flow_set.push_str(&smiles);
        flow_set.push('\n');
        let facts = synth_captions(&g, rng::derive_seed(9, "facts", i), &SynthConfig::default());
        let mut sentences = vec![format!("We studied {name} in detail.")];
        sentences.extend(facts);
        let doc = CorpusDoc {
            paper_id: format!("paper-{i:03}"),
            field: FieldTag::Chemistry,
            sections: Sections {
                abstract_: Some(SectionText::Sentences(sentences)),
                ..Default::default()
            },
        };
        corpus.push_str(&serde_json::to_string(&doc).unwrap());
        corpus.push('\n');
        // A second mention keeps some molecules with two paragraphs.
        if i % 3 == 0 {
            let doc = CorpusDoc {
                paper_id: format!("paper-{i:03}-b"),
                field: FieldTag::Biology,
                sections: Sections {
                    introduction: Some(SectionText::Text(format!(
                        "Earlier reports used {name} as a reference. It behaved as expected."
                    ))),
                    ..Default::default()
                },
            };
            corpus.push_str(&serde_json::to_string(&doc).unwrap());
            corpus.push('\n');
        }
    }
    std::fs::write(dir.join("molecules.jsonl"), molecules).unwrap();
    std::fs::write(dir.join("corpus.jsonl"), corpus).unwrap();
    std::fs::write(dir.join("flow.smi"), flow_set).unwrap();
    common::write_config(dir);
}

fn pipeline_run() -> Result<Vec<(String, Vec<u8>)>, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    pipeline_fixture(d);
    let steps: [&[&str]; 5] = [
        &["mine", "--corpus", "corpus.jsonl", "--molecules", "molecules.jsonl", "--out", "pairs.jsonl"],
        &["pretrain", "--data", "pairs.jsonl", "--out", "model.ckpt"],
        &["retrieve-eval", "--model", "model.ckpt", "--data", "pairs.jsonl", "--out", "retrieval.json"],
        &["train-flow", "--data", "flow.smi", "--out", "flow.ckpt"],
        &["generate", "--model", "model.ckpt", "--flow", "flow.ckpt", "--text", PROMPT, "--out", "gen.json"],
    ];
    for step in steps {
        let mut args = step.to_vec();
        args.extend(["--config", "run.toml"]);
        let out = common::moltext(d, &args);
        if !out.status.success() {
            return Err(format!(
                "{} failed: {}",
                step[0],
                String::from_utf8_lossy(&out.stderr).trim()
            ));
        }
    }
    let mut names: Vec<String> = std::fs::read_dir(d)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    Ok(names
        .into_iter()
        .map(|n| {
            let bytes = std::fs::read(d.join(&n)).unwrap();
            (n, bytes)
        })
        .collect())
}

fn determinism(_: &mut Shared) -> Outcome {
    let (a, b) = match (pipeline_run(), pipeline_run()) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Outcome::new(false, e),
    };
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    Outcome::new(
        a.len() == b.len() && differing.is_empty(),
        format!(
            "{} artifacts compared, differing: {differing:?}",
            a.len()
        ),
    )
}
