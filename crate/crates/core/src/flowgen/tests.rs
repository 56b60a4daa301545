use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::encoders::{GinConfig, ModelConfig, TextConfig, Vocab};
use crate::smiles::{parse_smiles, BondOrder, DenseDims, Element};
use crate::tensor::{grad_check, Var};

fn small_cfg(n_max: usize) -> GenConfig {
    GenConfig {
        dims: DenseDims::new(
            n_max,
            vec![Element::C, Element::N, Element::O],
            BondOrder::ALL.to_vec(),
        )
        .unwrap(),
        coupling_layers: 4,
        dequant: 0.6,
        edge_hidden: 8,
        atom_hidden: 6,
        scale_limit: 2.0,
        bond_sharpness: 10.0,
    }
}

/// A flow whose couplings are all active (random instead of zero outputs).
/// Noise on matrices is scaled by `1/sqrt(fan_in)`.
fn perturbed(cfg: GenConfig, std: f64, seed: u64) -> Flow {
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
            *x += scale * r.sample::<f64, _>(StandardNormal);
        }
    }
    flow
}

fn random_rows(b: usize, d: usize, seed: u64) -> Tensor {
    let mut r = rng::from_seed(seed);
    Tensor::new(
        &[b, d],
        (0..b * d).map(|_| r.sample(StandardNormal)).collect(),
    )
    .unwrap()
}

#[test]
fn fresh_flow_is_identity() {
    let flow = Flow::new(GenConfig::default(), &mut rng::from_seed(1)).unwrap();
    let cfg = &flow.config;
    let xv = random_rows(3, cfg.atom_dim(), 2);
    let xe = random_rows(3, cfg.edge_dim(), 3);
    let g = Graph::inference();
    let out = flow
        .forward_flow(&g, &g.constant(xv.clone()), &g.constant(xe.clone()))
        .unwrap();
    assert_eq!(out.q_v.value(), xv);
    assert_eq!(out.q_e.value(), xe);
    assert!(out.logdet.value().data().iter().all(|&x| x == 0.0));
}

#[test]
fn round_trip_and_logdet_antisymmetry() {
    let flow = perturbed(GenConfig::default(), 0.3, 4);
    let cfg = &flow.config;
    let mut worst: f64 = 0.0;
    let mut worst_ld: f64 = 0.0;
    for s in 0..10 {
        let xv = random_rows(10, cfg.atom_dim(), 100 + s);
        let xe = random_rows(10, cfg.edge_dim(), 200 + s);
        let g = Graph::inference();
        let fwd = flow
            .forward_flow(&g, &g.constant(xv.clone()), &g.constant(xe.clone()))
            .unwrap();
        assert!(fwd.logdet.value().data().iter().any(|&x| x.abs() > 1e-3));
        let back = flow.reverse_with_logdet(&g, &fwd.q_v, &fwd.q_e).unwrap();
        worst = worst
            .max(back.q_v.value().max_abs_diff(&xv))
            .max(back.q_e.value().max_abs_diff(&xe));
        let sum = fwd.logdet.add(&back.logdet).unwrap().value();
        worst_ld = worst_ld.max(sum.data().iter().map(|x| x.abs()).fold(0.0, f64::max));
    }
    assert!(worst <= 1e-8, "round trip {worst}");
    assert!(worst_ld <= 1e-8, "logdet {worst_ld}");
}

/// `ln |det J|` of `f: R^d -> R^d` by central differences and Gaussian
/// elimination with partial pivoting.
fn numeric_log_det(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> f64 {
    let d = x.len();
    let h = 1e-6;
    let mut jac = vec![vec![0.0; d]; d];
    for k in 0..d {
        let mut up = x.to_vec();
        up[k] += h;
        let mut down = x.to_vec();
        down[k] -= h;
        let (fu, fd) = (f(&up), f(&down));
        for r in 0..d {
            jac[r][k] = (fu[r] - fd[r]) / (2.0 * h);
        }
    }
    let mut log_det = 0.0;
    for c in 0..d {
        let p = (c..d)
            .max_by(|&a, &b| jac[a][c].abs().total_cmp(&jac[b][c].abs()))
            .unwrap();
        jac.swap(c, p);
        let pivot = jac[c][c];
        log_det += pivot.abs().ln();
        for r in c + 1..d {
            let f = jac[r][c] / pivot;
            for k in c..d {
                jac[r][k] -= f * jac[c][k];
            }
        }
    }
    log_det
}

#[test]
fn logdet_matches_numeric_jacobian() {
    // Two atoms with one atom type: 4 atom entries and 2 bond-slot entries.
    let cfg = GenConfig {
        dims: DenseDims::new(2, vec![Element::C], vec![BondOrder::Single]).unwrap(),
        coupling_layers: 3,
        edge_hidden: 5,
        atom_hidden: 4,
        ..Default::default()
    };
    let flow = perturbed(cfg, 0.5, 7);
    let (dv, de) = (flow.config.atom_dim(), flow.config.edge_dim());
    let map = |x: &[f64]| -> Vec<f64> {
        let g = Graph::inference();
        let xv = g.constant(Tensor::new(&[1, dv], x[..dv].to_vec()).unwrap());
        let xe = g.constant(Tensor::new(&[1, de], x[dv..].to_vec()).unwrap());
        let out = flow.forward_flow(&g, &xv, &xe).unwrap();
        [out.q_v.value().into_data(), out.q_e.value().into_data()].concat()
    };
    for s in 0..5 {
        let x = random_rows(1, dv + de, 30 + s).into_data();
        let g = Graph::inference();
        let out = flow
            .forward_flow(
                &g,
                &g.constant(Tensor::new(&[1, dv], x[..dv].to_vec()).unwrap()),
                &g.constant(Tensor::new(&[1, de], x[dv..].to_vec()).unwrap()),
            )
            .unwrap();
        let numeric = numeric_log_det(map, &x);
        assert!(
            (out.logdet.item() - numeric).abs() < 1e-6,
            "{} vs {numeric}",
            out.logdet.item()
        );
    }
}

#[test]
fn probabilities_satisfy_invariants() {
    let flow = perturbed(GenConfig::default(), 0.3, 9);
    let cfg = &flow.config;
    let g = Graph::inference();
    let qv = random_rows(100, cfg.atom_dim(), 10);
    let qe = random_rows(100, cfg.edge_dim(), 11);
    let (vhat, slots) = flow
        .reverse_flow(&g, &g.constant(qv), &g.constant(qe))
        .unwrap();
    for t in [vhat.value(), slots.value()] {
        for row in t.rows() {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    let dense = flow.dense_bonds(&g, &slots).unwrap();
    let n = cfg.dims.n_max;
    for a in dense {
        let v = a.value();
        for b in 0..100 {
            for i in 0..n {
                assert_eq!(v.data()[(b * n + i) * n + i], 0.0);
                for j in 0..n {
                    assert!(
                        (v.data()[(b * n + i) * n + j] - v.data()[(b * n + j) * n + i]).abs()
                            < 1e-9
                    );
                }
            }
        }
    }
}

#[test]
fn reverse_outputs_are_differentiable() {
    let flow = perturbed(small_cfg(4), 0.4, 12);
    let (dv, de) = (flow.config.atom_dim(), flow.config.edge_dim());
    let weights = random_rows(1, 4 * 4 + 6 * 4, 13).into_data();
    let q = random_rows(1, dv + de, 14);
    let err = grad_check(
        |g, q: Var<'_>| {
            let (vhat, slots) = flow
                .reverse_flow(g, &q.slice(1, 0, dv).unwrap(), &q.slice(1, dv, de).unwrap())
                .map_err(|e| match e {
                    FlowError::Tensor(t) => t,
                    other => panic!("{other}"),
                })?;
            let all = Var::concat(&[vhat.reshape(&[16])?, slots.reshape(&[24])?], 0)?;
            all.mul(&g.constant(Tensor::vector(weights.clone())))
                .map(|v| v.sum())
        },
        &q,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn argmax_round_trip_through_flow() {
    let flow = perturbed(GenConfig::default(), 0.2, 15);
    let cfg = flow.config.clone();
    let mut r = rng::from_seed(16);
    for s in ["CCO", "C1CC1N", "OC(=O)C#N", "FC(F)=CC"] {
        let m = parse_smiles(s).unwrap();
        let (v, e) = encode_molecule(&m, &cfg).unwrap();
        let noisy = |x: &[f64], r: &mut crate::rng::Rng| -> Tensor {
            Tensor::new(
                &[1, x.len()],
                x.iter().map(|&a| a + 0.05 * r.random::<f64>()).collect(),
            )
            .unwrap()
        };
        let g = Graph::inference();
        let out = flow
            .forward_flow(
                &g,
                &g.constant(noisy(&v, &mut r)),
                &g.constant(noisy(&e, &mut r)),
            )
            .unwrap();
        let back = decode_latent(&flow, &out.q_v.value(), &out.q_e.value()).unwrap();
        assert_eq!(back.atoms(), m.atoms(), "{s}");
        let bonds = |g: &MolGraph| {
            let mut b: Vec<_> = g.bonds().iter().map(|b| (b.i, b.j, b.order)).collect();
            b.sort();
            b
        };
        assert_eq!(bonds(&back), bonds(&m), "{s}");
    }
}

#[test]
fn encode_rejects_large_and_unknown() {
    let cfg = small_cfg(4);
    assert!(matches!(
        encode_molecule(&parse_smiles("CCCCC").unwrap(), &cfg),
        Err(FlowError::Mol(crate::smiles::MolError::TooManyAtoms { .. }))
    ));
    assert!(encode_molecule(&parse_smiles("CF").unwrap(), &cfg).is_err());
}

fn chains(n: usize, seed: u64) -> Vec<MolGraph> {
    let mut r = rng::from_seed(seed);
    let cfg = crate::smiles::random::RandomMolConfig {
        min_atoms: 2,
        max_atoms: 4,
        elements: vec![(Element::C, 4.0), (Element::N, 1.0), (Element::O, 1.0)],
        ring_rate: 0.0,
        benzene_prob: 0.0,
        ..Default::default()
    };
    (0..n)
        .map(|_| crate::smiles::random::random_molecule(&mut r, &cfg))
        .collect()
}

#[test]
fn training_lowers_nll_and_is_deterministic() {
    let mols = chains(64, 17);
    let tcfg = FlowTrainConfig {
        epochs: 8,
        batch_size: 16,
        lr: 5e-3,
        seed: 18,
        ..Default::default()
    };
    let run = || {
        let mut f = Flow::new(small_cfg(4), &mut rng::from_seed(19)).unwrap();
        let hist = train_flow(&mut f, &mols, &tcfg, |_, _| {}).unwrap();
        (f, hist)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(ha, hb);
    assert!(ha.last().unwrap() < &ha[0], "{ha:?}");
    for ((_, x), (_, y)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(x.data(), y.data());
    }
    let fresh = Flow::new(small_cfg(4), &mut rng::from_seed(19)).unwrap();
    assert!(evaluate_nll(&a, &mols, 1).unwrap() < evaluate_nll(&fresh, &mols, 1).unwrap());
}

#[test]
fn samples_are_deterministic_and_valid() {
    let flow = perturbed(small_cfg(5), 0.3, 20);
    for seed in 0..50 {
        let a = sample_molecule(&flow, seed).unwrap();
        assert_eq!(a, sample_molecule(&flow, seed).unwrap());
        assert!(a.is_valence_valid());
        assert!(a.is_connected());
    }
}

fn tiny_model(seed: u64) -> DualEncoder {
    let vocab = Vocab::build(
        ["the molecule contains a hydroxyl group", "an amine"],
        1,
        50,
    );
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
            max_len: 16,
        },
        proj_dim: 8,
    };
    DualEncoder::new(cfg, vocab, &mut rng::from_seed(seed)).unwrap()
}

use crate::encoders::DualEncoder;

/// `ℓ_q` as a function of the full latent with the hard structure held at
/// its value for `q0`.
fn latent_loss<'g>(
    g: &'g Graph,
    q: Var<'g>,
    flow: &Flow,
    model: &DualEncoder,
    soft: &crate::encoders::SoftGraph,
    rows: &[usize],
    z_t: &Tensor,
) -> Var<'g> {
    let (dv, de) = (flow.config.atom_dim(), flow.config.edge_dim());
    let (vhat, _) = flow
        .reverse_flow(g, &q.slice(1, 0, dv).unwrap(), &q.slice(1, dv, de).unwrap())
        .unwrap();
    let h = model
        .gin
        .encode_soft(g, &model.store, &vhat, rows, soft)
        .unwrap();
    let z = model.graph_head.forward(g, &model.store, &h).unwrap();
    z.cosine(&g.constant(z_t.clone()))
        .unwrap()
        .sum()
        .scale(-10.0)
}

#[test]
fn latent_gradient_reaches_both_blocks_and_matches_fd() {
    // Seed 21 lands on a point where the 6-wide GIN has dead ReLUs for
    // most rows, which zeroes the atom block exactly; 30 is generic.
    let flow = perturbed(small_cfg(4), 0.4, 30);
    let model = tiny_model(22);
    let (dv, de) = (flow.config.atom_dim(), flow.config.edge_dim());
    let q0 = random_rows(1, dv + de, 23);
    let z_t = random_rows(1, 8, 24);
    let gin = model.gin.config();
    let rows = vec![
        gin.atom_row(Element::C).unwrap(),
        gin.atom_row(Element::N).unwrap(),
        gin.atom_row(Element::O).unwrap(),
        gin.pad_row(),
    ];
    let soft = crate::encoders::SoftGraph {
        rows: vec![0, 1, 2, 3],
        edges: vec![(0, 1, 0), (1, 2, 1), (2, 3, 0)],
    };
    let g = Graph::new().with_frozen_params();
    let q = g.variable(q0.clone());
    let loss = latent_loss(&g, q, &flow, &model, &soft, &rows, &z_t);
    let grads = g.backward(loss).unwrap();
    let grad = grads.wrt(q).unwrap().data().to_vec();
    assert!(grad[..dv].iter().any(|x| x.abs() > 1e-8));
    assert!(grad[dv..].iter().any(|x| x.abs() > 1e-8));
    assert!(g.is_recording());

    let err = grad_check(
        |g, q| Ok(latent_loss(g, q, &flow, &model, &soft, &rows, &z_t)),
        &q0,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn generation_contracts() {
    let flow = perturbed(small_cfg(4), 0.3, 25);
    let model = tiny_model(26);
    let zero = GenOptConfig {
        max_iters: 0,
        seed: 27,
        ..Default::default()
    };
    let r0 = generate_from_text("contains a hydroxyl group", &model, &flow, &zero).unwrap();
    assert_eq!(r0.trace.len(), 1);
    assert_eq!(r0.mol, sample_molecule(&flow, 27).unwrap());

    let cfg = GenOptConfig {
        max_iters: 40,
        seed: 28,
        ..Default::default()
    };
    let a = generate_from_text("contains a hydroxyl group", &model, &flow, &cfg).unwrap();
    let b = generate_from_text("contains a hydroxyl group", &model, &flow, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.trace.len(), 41);
    assert!(a.mol.is_valence_valid());
    assert!(a
        .trace
        .iter()
        .all(|t| (t.loss + t.cosine / cfg.temperature).abs() < 1e-12));

    assert!(matches!(
        generate_from_text("zzz qqq", &model, &flow, &cfg),
        Err(FlowError::EmptyText)
    ));
    let mut wide = small_cfg(4);
    wide.dims.atom_types = vec![Element::C, Element::Br];
    let other = Flow::new(wide, &mut rng::from_seed(1)).unwrap();
    let mut narrow = tiny_model(29);
    narrow.gin = crate::encoders::GinEncoder::new(
        GinConfig {
            num_layers: 1,
            hidden_dim: 6,
            atom_types: vec![Element::C, Element::N, Element::O],
            ..Default::default()
        },
        &mut narrow.store,
        "gin_small",
        &mut rng::from_seed(2),
    )
    .unwrap();
    assert!(matches!(
        generate_from_text("hydroxyl", &narrow, &other, &cfg),
        Err(FlowError::Incompatible(_))
    ));
}

#[test]
fn checkpoint_shapes_are_validated() {
    let flow = Flow::new(small_cfg(4), &mut rng::from_seed(30)).unwrap();
    let rebuilt = Flow::from_store(flow.config.clone(), flow.store.clone()).unwrap();
    assert_eq!(rebuilt.store.num_values(), flow.store.num_values());
    let mut bigger = small_cfg(4);
    bigger.edge_hidden = 9;
    assert!(matches!(
        Flow::from_store(bigger, flow.store.clone()),
        Err(FlowError::ShapeMismatch(_))
    ));
}


#[test]
fn masks_separate_every_channel_pair() {
    for c1 in 0..5 {
        for c2 in c1 + 1..5 {
            for slot in 0..6 {
                assert!(
                    (0..3).any(|l| super::flow::mask_bit(l, slot, c1) != super::flow::mask_bit(l, slot, c2)),
                    "channels {c1} and {c2} of slot {slot}"
                );
            }
        }
    }
    for l in 0..6 {
        let bits: Vec<f64> = (0..4).flat_map(|s| (0..4).map(move |c| super::flow::mask_bit(l, s, c))).collect();
        assert_eq!(bits.iter().sum::<f64>(), 8.0);
    }
}

#[test]
fn conditioning_degrees_are_soft_bond_counts() {
    let flow = perturbed(small_cfg(4), 0.3, 31);
    let g = Graph::inference();
    let xe = g.constant(random_rows(2, flow.config.edge_dim(), 32));
    let cond = flow.conditioning(&g, &xe).unwrap();
    let dense = flow.dense_bonds(&g, &flow.edge_probs(&xe).unwrap()).unwrap();
    let deg = cond.degree.value();
    assert_eq!(deg.shape(), &[8, 3]);
    for (c, a) in dense.iter().enumerate() {
        let a = a.value();
        for r in 0..8 {
            let sum: f64 = a.data()[r * 4..r * 4 + 4].iter().sum();
            assert!((deg.data()[r * 3 + c] - sum).abs() < 1e-12);
        }
    }
}

#[test]
fn train_config_is_validated() {
    let mut f = Flow::new(small_cfg(4), &mut rng::from_seed(33)).unwrap();
    let mols = chains(4, 34);
    let bad = FlowTrainConfig {
        ema_decay: 1.0,
        ..Default::default()
    };
    assert!(matches!(train_flow(&mut f, &mols, &bad, |_, _| {}), Err(FlowError::Config(_))));
    let sharp = GenConfig {
        bond_sharpness: 0.0,
        ..small_cfg(4)
    };
    assert!(Flow::new(sharp, &mut rng::from_seed(35)).is_err());
}
