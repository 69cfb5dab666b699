mod common;

use ismaf::autodiff::{ParamStore, Tape, Tensor};
use ismaf::bridging::{
    cmca_loss, co_attention, init_co_attention, init_mutual_params, init_self_attention,
    kl_divergence, kl_divergence_values, label_distributions, mutual_learning_loss, project_common,
    scl_loss, self_attention, AttentionConfig, Modality,
};
use proptest::prelude::*;

use common::{
    add_bias, attention_oracle, cmca_oracle, kl_oracle, matmul, max_abs_diff, param_rows,
    random_rows, rng, rows_of, scl_oracle, softmax, tensor, Rows,
};

fn scl_value(feats: &Rows, labels: &[u8], tau: f64) -> f64 {
    let tape = Tape::new();
    let f = tape.constant(tensor(feats));
    tape.scalar(scl_loss(&tape, f, labels, tau).unwrap().loss)
}

fn cmca_value(z: &Rows, r: &Rows, tau: f64) -> f64 {
    let tape = Tape::new();
    let (zv, rv) = (tape.constant(tensor(z)), tape.constant(tensor(r)));
    tape.scalar(cmca_loss(&tape, zv, rv, tau).unwrap())
}

#[test]
fn scl_matches_frozen_oracle_value() {
    let feats = vec![
        vec![0.5, -1.2, 0.3],
        vec![1.1, 0.4, -0.7],
        vec![-0.2, 0.9, 0.8],
        vec![0.6, 0.6, -1.5],
    ];
    assert!((scl_value(&feats, &[0, 1, 0, 1], 0.5) - 0.8871212417873687).abs() < 1e-12);
}

#[test]
fn scl_matches_double_loop_oracle() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let feats = random_rows(&mut r, 4, 9);
        let labels = [0, 1, 1, 0];
        let got = scl_value(&feats, &labels, 0.5);
        assert!((got - scl_oracle(&feats, &labels, 0.5)).abs() < 1e-6);
        let odd = [1, 1, 1, 0];
        assert!((scl_value(&feats, &odd, 0.3) - scl_oracle(&feats, &odd, 0.3)).abs() < 1e-6);
    }
}

#[test]
fn cmca_matches_frozen_oracle_values() {
    let z = vec![
        vec![1.0, 0.2, -0.3],
        vec![0.1, -1.0, 0.5],
        vec![-0.4, 0.3, 0.9],
    ];
    let r = vec![
        vec![0.8, 0.1, 0.0],
        vec![0.3, -0.7, 0.2],
        vec![0.0, 0.5, 1.2],
    ];
    assert!((cmca_value(&z, &r, 0.5) - 0.4452427375060873).abs() < 1e-12);

    // Mutually orthogonal vectors: every similarity is 0, so each anchor
    // sees 1 / (1 + 2) and the loss is ln 3 at any temperature.
    let z = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]];
    let r = vec![vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]];
    for tau in [1.0, 0.5] {
        assert!((cmca_value(&z, &r, tau) - 1.0986122886681098).abs() < 1e-12);
    }
}

#[test]
fn cmca_matches_double_loop_oracle() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let z = random_rows(&mut r, 4, 5);
        let g = random_rows(&mut r, 4, 5);
        assert!((cmca_value(&z, &g, 0.5) - cmca_oracle(&z, &g, 0.5)).abs() < 1e-6);
    }
}

#[test]
fn cmca_single_pair_collapses() {
    let mut r = rng(3);
    let (z, g) = (random_rows(&mut r, 1, 4), random_rows(&mut r, 1, 4));
    assert!(cmca_value(&z, &g, 0.5).abs() < 1e-15);
}

#[test]
fn cmca_decreases_as_positive_similarity_grows() {
    // Only sim(z_0, r_0) = cos φ varies; every other pair stays orthogonal.
    let value = |phi: f64| {
        let z = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]];
        let r = vec![
            vec![phi.cos(), 0.0, phi.sin(), 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ];
        cmca_value(&z, &r, 0.5)
    };
    let mut prev = f64::INFINITY;
    for k in 0..=20 {
        let v = value(std::f64::consts::PI * (1.0 - k as f64 / 20.0));
        assert!(v < prev, "step {k}: {v} >= {prev}");
        prev = v;
    }
}

fn permuted(rows: &Rows, perm: &[usize]) -> Rows {
    perm.iter().map(|&i| rows[i].clone()).collect()
}

proptest! {
    #[test]
    fn contrastive_losses_are_permutation_invariant(seed in 0u64..10_000, n in 2usize..7, shift in 1usize..6) {
        let mut r = rng(seed);
        let feats = random_rows(&mut r, n, 5);
        let other = random_rows(&mut r, n, 5);
        let labels: Vec<u8> = (0..n).map(|i| ((seed >> i) & 1) as u8).collect();
        let perm: Vec<usize> = (0..n).map(|i| (i * (2 * shift + 1) + shift) % n).collect();
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        prop_assume!(sorted == (0..n).collect::<Vec<_>>());
        let plabels: Vec<u8> = perm.iter().map(|&i| labels[i]).collect();
        let a = scl_value(&feats, &labels, 0.5);
        let b = scl_value(&permuted(&feats, &perm), &plabels, 0.5);
        prop_assert!((a - b).abs() < 1e-9);
        let a = cmca_value(&feats, &other, 0.5);
        let b = cmca_value(&permuted(&feats, &perm), &permuted(&other, &perm), 0.5);
        prop_assert!((a - b).abs() < 1e-9);
    }
}

fn attention_store(cfg: &AttentionConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new(seed);
    init_self_attention(&mut store, Modality::Text, cfg).unwrap();
    init_self_attention(&mut store, Modality::Visual, cfg).unwrap();
    init_co_attention(&mut store, cfg).unwrap();
    let mut r = rng(seed ^ 0xb1a5);
    let names: Vec<String> = store
        .names()
        .filter(|n| n.ends_with(".b"))
        .cloned()
        .collect();
    for name in names {
        let width = store.get(&name).unwrap().numel();
        store
            .set(&name, tensor(&random_rows(&mut r, 1, width)))
            .unwrap();
    }
    store
}

#[test]
fn self_attention_matches_enumeration_with_six_token_lift() {
    for (d, heads) in [(12, 2), (13, 4), (32, 8)] {
        let cfg = AttentionConfig::new(d, heads, 6).unwrap();
        for seed in 0..5 {
            let store = attention_store(&cfg, seed);
            let mut r = rng(seed + 50);
            let x = random_rows(&mut r, 3, d);
            for (m, prefix) in [(Modality::Text, "sa.t"), (Modality::Visual, "sa.v")] {
                let tape = Tape::new();
                let bound = store.bind(&tape);
                let out =
                    self_attention(&tape, tape.constant(tensor(&x)), m, &bound, &cfg).unwrap();
                let want = attention_oracle(
                    &x,
                    &x,
                    &store,
                    prefix,
                    prefix,
                    &format!("{prefix}.out"),
                    heads,
                    6,
                );
                assert!(
                    max_abs_diff(&rows_of(&tape.value(out)), &want) < 1e-10,
                    "d={d} seed={seed}"
                );
            }
        }
    }
}

#[test]
fn co_attention_matches_enumeration() {
    let cfg = AttentionConfig::new(12, 3, 6).unwrap();
    for seed in 0..5 {
        let store = attention_store(&cfg, seed);
        let mut r = rng(seed + 7);
        let (zt, zv) = (random_rows(&mut r, 4, 12), random_rows(&mut r, 4, 12));
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let (tv, vt) = co_attention(
            &tape,
            tape.constant(tensor(&zt)),
            tape.constant(tensor(&zv)),
            &bound,
            &cfg,
        )
        .unwrap();
        let want_tv = attention_oracle(&zt, &zv, &store, "co.t", "co.v", "co.tv.out", 3, 6);
        let want_vt = attention_oracle(&zv, &zt, &store, "co.v", "co.t", "co.vt.out", 3, 6);
        assert!(max_abs_diff(&rows_of(&tape.value(tv)), &want_tv) < 1e-10);
        assert!(max_abs_diff(&rows_of(&tape.value(vt)), &want_vt) < 1e-10);
    }
}

#[test]
fn single_token_attention_is_linear() {
    let cfg = AttentionConfig::new(5, 1, 1).unwrap();
    let store = attention_store(&cfg, 9);
    let mut r = rng(1);
    let x = random_rows(&mut r, 3, 5);
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let out = self_attention(
        &tape,
        tape.constant(tensor(&x)),
        Modality::Text,
        &bound,
        &cfg,
    )
    .unwrap();
    let v = add_bias(
        &matmul(&x, &param_rows(&store, "sa.t.v.w")),
        &param_rows(&store, "sa.t.v.b")[0],
    );
    let want = add_bias(
        &matmul(&v, &param_rows(&store, "sa.t.out.w")),
        &param_rows(&store, "sa.t.out.b")[0],
    );
    assert!(max_abs_diff(&rows_of(&tape.value(out)), &want) < 1e-12);
}

#[test]
fn zero_input_and_zero_biases_give_zero() {
    let cfg = AttentionConfig::new(12, 2, 6).unwrap();
    let mut store = ParamStore::new(0);
    init_self_attention(&mut store, Modality::Visual, &cfg).unwrap();
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let out = self_attention(
        &tape,
        tape.constant(Tensor::zeros(&[2, 12])),
        Modality::Visual,
        &bound,
        &cfg,
    )
    .unwrap();
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn co_attention_symmetry_with_shared_parameters() {
    let cfg = AttentionConfig::new(12, 2, 6).unwrap();
    let mut store = attention_store(&cfg, 4);
    for part in ["q.w", "q.b", "k.w", "v.w", "v.b"] {
        let t = store.get(&format!("co.t.{part}")).unwrap().clone();
        store.set(&format!("co.v.{part}"), t).unwrap();
    }
    for part in ["w", "b"] {
        let t = store.get(&format!("co.tv.out.{part}")).unwrap().clone();
        store.set(&format!("co.vt.out.{part}"), t).unwrap();
    }
    let mut r = rng(8);
    let z = tensor(&random_rows(&mut r, 3, 12));
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let (tv, vt) = co_attention(
        &tape,
        tape.constant(z.clone()),
        tape.constant(z),
        &bound,
        &cfg,
    )
    .unwrap();
    assert_eq!(tape.value(tv), tape.value(vt));
}

#[test]
fn zero_visual_values_leave_only_the_output_bias() {
    let cfg = AttentionConfig::new(12, 2, 6).unwrap();
    let mut store = attention_store(&cfg, 2);
    store.set("co.v.v.w", Tensor::zeros(&[2, 12])).unwrap();
    store.set("co.v.v.b", Tensor::zeros(&[1, 12])).unwrap();
    let mut r = rng(3);
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let zt = tape.constant(tensor(&random_rows(&mut r, 2, 12)));
    let zv = tape.constant(tensor(&random_rows(&mut r, 2, 12)));
    let (tv, _) = co_attention(&tape, zt, zv, &bound, &cfg).unwrap();
    let bias = param_rows(&store, "co.tv.out.b")[0].clone();
    assert!(max_abs_diff(&rows_of(&tape.value(tv)), &vec![bias.clone(), bias]) < 1e-15);
}

fn mutual_store(d: usize, seed: u64) -> ParamStore {
    let mut store = ParamStore::new(seed);
    init_mutual_params(&mut store, d).unwrap();
    let mut r = rng(seed + 1);
    for name in ["ml.z.b", "ml.g.b", "ml.z.fc.b", "ml.g.fc.b"] {
        let w = store.get(name).unwrap().numel();
        store.set(name, tensor(&random_rows(&mut r, 1, w))).unwrap();
    }
    store
}

#[test]
fn common_projection_cases() {
    let d = 4;
    let mut store = ParamStore::new(0);
    for b in ["z", "g"] {
        store
            .insert(format!("ml.{b}.w"), Tensor::zeros(&[d, d]))
            .unwrap();
        store.init_zeros(&format!("ml.{b}.b"), &[1, d]).unwrap();
    }
    let mut r = rng(0);
    let x = random_rows(&mut r, 2, d);
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let (ez, eg) = project_common(
        &tape,
        tape.constant(tensor(&x)),
        tape.constant(tensor(&x)),
        &bound,
    )
    .unwrap();
    assert!(tape
        .value(ez)
        .data()
        .iter()
        .chain(tape.value(eg).data())
        .all(|&v| v == 0.0));

    for b in ["z", "g"] {
        store.set(&format!("ml.{b}.w"), Tensor::eye(d)).unwrap();
    }
    let pos: Rows = x
        .iter()
        .map(|row| row.iter().map(|v| v.abs()).collect())
        .collect();
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let (ez, _) = project_common(
        &tape,
        tape.constant(tensor(&pos)),
        tape.constant(tensor(&pos)),
        &bound,
    )
    .unwrap();
    assert_eq!(rows_of(&tape.value(ez)), pos);

    for seed in 0..5 {
        let store = mutual_store(d, seed);
        let mut r = rng(seed);
        let (z, g) = (random_rows(&mut r, 3, d), random_rows(&mut r, 3, d));
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let (ez, eg) = project_common(
            &tape,
            tape.constant(tensor(&z)),
            tape.constant(tensor(&g)),
            &bound,
        )
        .unwrap();
        let relu = |m: Rows| -> Rows {
            m.into_iter()
                .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
                .collect()
        };
        let want_z = relu(add_bias(
            &matmul(&z, &param_rows(&store, "ml.z.w")),
            &param_rows(&store, "ml.z.b")[0],
        ));
        let want_g = relu(add_bias(
            &matmul(&g, &param_rows(&store, "ml.g.w")),
            &param_rows(&store, "ml.g.b")[0],
        ));
        assert!(max_abs_diff(&rows_of(&tape.value(ez)), &want_z) < 1e-12);
        assert!(max_abs_diff(&rows_of(&tape.value(eg)), &want_g) < 1e-12);

        let (pz, pg) = label_distributions(&tape, ez, eg, &bound).unwrap();
        let soft = |e: &Rows, b: &str| -> Rows {
            let logits = add_bias(
                &matmul(e, &param_rows(&store, &format!("ml.{b}.fc.w"))),
                &param_rows(&store, &format!("ml.{b}.fc.b"))[0],
            );
            logits.iter().map(|l| softmax(l)).collect()
        };
        assert!(max_abs_diff(&rows_of(&tape.value(pz)), &soft(&want_z, "z")) < 1e-12);
        assert!(max_abs_diff(&rows_of(&tape.value(pg)), &soft(&want_g, "g")) < 1e-12);
        for p in [tape.value(pz), tape.value(pg)] {
            for i in 0..p.rows() {
                assert!((p.row_slice(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn label_distribution_closed_forms() {
    let mut store = ParamStore::new(0);
    for b in ["z", "g"] {
        store
            .insert(format!("ml.{b}.fc.w"), Tensor::zeros(&[2, 2]))
            .unwrap();
    }
    store.insert("ml.z.fc.b", Tensor::row(&[0.0, 0.0])).unwrap();
    store
        .insert("ml.g.fc.b", Tensor::row(&[3f64.ln(), 0.0]))
        .unwrap();
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let e = tape.constant(Tensor::row(&[0.3, 1.2]));
    let (pz, pg) = label_distributions(&tape, e, e, &bound).unwrap();
    assert_eq!(tape.value(pz).data(), &[0.5, 0.5]);
    let pg = tape.value(pg);
    assert!((pg.data()[0] - 0.75).abs() < 1e-15 && (pg.data()[1] - 0.25).abs() < 1e-15);
}

fn distribution(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

#[test]
fn kl_matches_direct_sum_oracle() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let a: Vec<f64> = random_rows(&mut r, 1, 5)[0]
            .iter()
            .map(|v| v.abs() + 0.01)
            .collect();
        let b: Vec<f64> = random_rows(&mut r, 1, 5)[0]
            .iter()
            .map(|v| v.abs() + 0.01)
            .collect();
        let (p, q) = (distribution(&a), distribution(&b));
        assert!((kl_divergence_values(&p, &q).unwrap() - kl_oracle(&p, &q)).abs() < 1e-10);
        let tape = Tape::new();
        let kl = kl_divergence(
            &tape,
            tape.constant(Tensor::row(&p)),
            tape.constant(Tensor::row(&q)),
        )
        .unwrap();
        assert!((tape.scalar(kl) - kl_oracle(&p, &q)).abs() < 1e-10);
    }
}

#[test]
fn mutual_learning_closed_form() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::row(&[0.9, 0.1]));
    let b = tape.constant(Tensor::row(&[0.5, 0.5]));
    let v = tape.scalar(mutual_learning_loss(&tape, a, b).unwrap());
    assert!((v - 0.43944491546724385).abs() < 1e-12);
}

proptest! {
    #[test]
    fn mutual_learning_properties(rows in prop::collection::vec((0.01f64..1.0, 0.01f64..1.0, 0.01f64..1.0, 0.01f64..1.0), 1..5)) {
        let p: Rows = rows.iter().map(|r| distribution(&[r.0, r.1])).collect();
        let q: Rows = rows.iter().map(|r| distribution(&[r.2, r.3])).collect();
        let tape = Tape::new();
        let (pv, qv) = (tape.constant(tensor(&p)), tape.constant(tensor(&q)));
        let pq = tape.scalar(mutual_learning_loss(&tape, pv, qv).unwrap());
        let qp = tape.scalar(mutual_learning_loss(&tape, qv, pv).unwrap());
        let pp = tape.scalar(mutual_learning_loss(&tape, pv, pv).unwrap());
        prop_assert!(pq >= 0.0);
        prop_assert!((pq - qp).abs() < 1e-15);
        prop_assert!(pp.abs() < 1e-15);
        let mean: f64 = p.iter().zip(&q).map(|(a, b)| (kl_oracle(a, b) + kl_oracle(b, a)) / 2.0).sum::<f64>() / p.len() as f64;
        prop_assert!((pq - mean).abs() < 1e-10);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!(kl_divergence_values(a, b).unwrap() >= 0.0);
        }
    }
}
