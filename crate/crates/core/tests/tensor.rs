use std::rc::Rc;

use persearch::rng::stream;
use persearch::tensor::{
    adam_step, grad_check, AdamConfig, Linear, ListSpec, Mlp, Mmoe, MmoeConfig, MultiHeadAttention, ParameterStore,
    SparseRows, Tape, Tensor, XentRow,
};
use proptest::prelude::*;

fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = stream(seed, 99, 0);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn matvec_row(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (k, m) = (w.rows(), w.cols());
    (0..m).map(|j| b.data()[j] + (0..k).map(|i| x[i] * w.data()[i * m + j]).sum::<f64>()).collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = v.iter().map(|x| x.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

#[test]
fn mlp_identity_layer_passes_input_through() {
    let mut store = ParameterStore::new();
    let mut rng = stream(1, 0, 0);
    let mlp = Mlp::new(&mut store, "m", 3, &[3], false, false, &mut rng).unwrap();
    let w = mlp.layers[0].weight;
    *store.value_mut(w) = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let mut tape = Tape::new(&store);
    let x = tape.constant(Tensor::matrix(1, 3, vec![0.5, 1.25, 2.0]).unwrap()).unwrap();
    let y = mlp.forward(&mut tape, x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 1.25, 2.0]);
}

#[test]
fn mlp_matches_straight_line_recomputation() {
    let mut store = ParameterStore::new();
    let mut rng = stream(2, 0, 0);
    let mlp = Mlp::new(&mut store, "m", 5, &[8, 4], false, false, &mut rng).unwrap();
    // perturb the zero-initialised biases so they participate
    for l in &mlp.layers {
        let b = store.value_mut(l.bias);
        b.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64 - 0.2);
    }
    let x = rand_matrix(3, 5, 7);
    let mut tape = Tape::new(&store);
    let xv = tape.constant(x.clone()).unwrap();
    let y = mlp.forward(&mut tape, xv).unwrap();
    let (l1, l2) = (&mlp.layers[0], &mlp.layers[1]);
    for r in 0..3 {
        let h: Vec<f64> = matvec_row(x.row(r), store.value(l1.weight), store.value(l1.bias))
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let o = matvec_row(&h, store.value(l2.weight), store.value(l2.bias));
        for (a, b) in tape.value(y).row(r).iter().zip(&o) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn mlp_rejects_wrong_width() {
    let mut store = ParameterStore::new();
    let mlp = Mlp::new(&mut store, "m", 4, &[2], false, false, &mut stream(3, 0, 0)).unwrap();
    let mut tape = Tape::new(&store);
    let x = tape.constant(rand_matrix(2, 3, 1)).unwrap();
    assert_eq!(mlp.forward(&mut tape, x).unwrap_err().kind(), persearch::ErrorKind::Shape);
}

#[test]
fn attention_single_key_returns_value_projection() {
    let mut store = ParameterStore::new();
    let mha = MultiHeadAttention::new(&mut store, "a", 4, 4, 4, 2, &mut stream(4, 0, 0)).unwrap();
    let mut tape = Tape::new(&store);
    let q = tape.constant(rand_matrix(2, 4, 1)).unwrap();
    let k = tape.constant(rand_matrix(1, 4, 2)).unwrap();
    let out = mha.forward(&mut tape, q, k, k, None).unwrap();
    for w in &out.weights {
        assert!(tape.value(*w).data().iter().all(|&v| v == 1.0));
    }
    let vp = mha.value.forward(&mut tape, k).unwrap();
    let expect = mha.out.forward(&mut tape, vp).unwrap();
    for r in 0..2 {
        for (a, b) in tape.value(out.output).row(r).iter().zip(tape.value(expect).row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_identical_keys_split_evenly() {
    let mut store = ParameterStore::new();
    let mha = MultiHeadAttention::new(&mut store, "a", 3, 3, 4, 2, &mut stream(5, 0, 0)).unwrap();
    let row = rand_matrix(1, 3, 3);
    let keys = Tensor::from_rows(&[row.data().to_vec(), row.data().to_vec()]).unwrap();
    let mut tape = Tape::new(&store);
    let q = tape.constant(rand_matrix(1, 3, 4)).unwrap();
    let k = tape.constant(keys).unwrap();
    let out = mha.forward(&mut tape, q, k, k, None).unwrap();
    for w in &out.weights {
        for &v in tape.value(*w).data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_matches_brute_force() {
    let (heads, d) = (2, 6);
    let mut store = ParameterStore::new();
    let mha = MultiHeadAttention::new(&mut store, "a", 5, 4, d, heads, &mut stream(6, 0, 0)).unwrap();
    let qm = rand_matrix(2, 5, 11);
    let km = rand_matrix(3, 4, 12);
    let vm = rand_matrix(3, 4, 13);
    let mut tape = Tape::new(&store);
    let (q, k, v) = (
        tape.constant(qm.clone()).unwrap(),
        tape.constant(km.clone()).unwrap(),
        tape.constant(vm.clone()).unwrap(),
    );
    let out = mha.forward(&mut tape, q, k, v, None).unwrap();
    let proj = |l: &Linear, m: &Tensor| -> Vec<Vec<f64>> {
        (0..m.rows()).map(|r| matvec_row(m.row(r), store.value(l.weight), store.value(l.bias))).collect()
    };
    let (qp, kp, vp) = (proj(&mha.query, &qm), proj(&mha.key, &km), proj(&mha.value, &vm));
    let dh = d / heads;
    for i in 0..2 {
        let mut concat = Vec::new();
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let scores: Vec<f64> = (0..3)
                .map(|j| cols.clone().map(|c| qp[i][c] * kp[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let w = softmax(&scores);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (j, wj) in w.iter().enumerate() {
                assert!((tape.value(out.weights[h]).row(i)[j] - wj).abs() < 1e-12);
            }
            for c in cols {
                concat.push((0..3).map(|j| w[j] * vp[j][c]).sum::<f64>());
            }
        }
        let o = matvec_row(&concat, store.value(mha.out.weight), store.value(mha.out.bias));
        for (a, b) in tape.value(out.output).row(i).iter().zip(&o) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rejects_empty_keys_and_bad_heads() {
    let mut store = ParameterStore::new();
    assert!(MultiHeadAttention::new(&mut store, "a", 4, 4, 5, 2, &mut stream(7, 0, 0)).is_err());
    let mha = MultiHeadAttention::new(&mut store, "b", 4, 4, 4, 2, &mut stream(7, 0, 0)).unwrap();
    let mut tape = Tape::new(&store);
    let q = tape.constant(rand_matrix(1, 4, 1)).unwrap();
    let k = tape.constant(rand_matrix(2, 4, 1)).unwrap();
    let err = mha.forward(&mut tape, q, k, k, Some(&[false, false])).unwrap_err();
    assert_eq!(err.kind(), persearch::ErrorKind::Attention);
}

fn small_mmoe(experts: usize, seed: u64) -> (ParameterStore, Mmoe) {
    let mut store = ParameterStore::new();
    let cfg = MmoeConfig { input: 5, experts, expert_dims: vec![6, 4], tower_dims: vec![3], tasks: 2 };
    let m = Mmoe::new(&mut store, "mmoe", &cfg, &mut stream(seed, 0, 0)).unwrap();
    (store, m)
}

fn mlp_brute(store: &ParameterStore, mlp: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, l) in mlp.layers.iter().enumerate() {
        h = matvec_row(&h, store.value(l.weight), store.value(l.bias));
        if i + 1 < mlp.layers.len() || mlp.relu_last {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    h
}

#[test]
fn mmoe_single_expert_has_unit_gates() {
    let (store, m) = small_mmoe(1, 8);
    let x = rand_matrix(3, 5, 2);
    let mut tape = Tape::new(&store);
    let xv = tape.constant(x.clone()).unwrap();
    let out = m.forward(&mut tape, xv).unwrap();
    for g in &out.gates {
        assert!(tape.value(*g).data().iter().all(|&v| v == 1.0));
    }
    for r in 0..3 {
        let e = mlp_brute(&store, &m.experts[0], x.row(r));
        for t in 0..2 {
            let logit = mlp_brute(&store, &m.towers[t], &e)[0];
            let p = 1.0 / (1.0 + (-logit).exp());
            assert!((tape.value(out.probs).row(r)[t] - p).abs() < 1e-12);
        }
    }
}

#[test]
fn mmoe_matches_brute_force_mixture() {
    let (store, m) = small_mmoe(2, 9);
    let x = rand_matrix(4, 5, 3);
    let mut tape = Tape::new(&store);
    let xv = tape.constant(x.clone()).unwrap();
    let out = m.forward(&mut tape, xv).unwrap();
    for r in 0..4 {
        let experts: Vec<Vec<f64>> = m.experts.iter().map(|e| mlp_brute(&store, e, x.row(r))).collect();
        for t in 0..2 {
            let gate = softmax(&matvec_row(x.row(r), store.value(m.gates[t].weight), store.value(m.gates[t].bias)));
            assert!((tape.value(out.gates[t]).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let mixed: Vec<f64> = (0..4).map(|c| gate[0] * experts[0][c] + gate[1] * experts[1][c]).collect();
            let logit = mlp_brute(&store, &m.towers[t], &mixed)[0];
            let p = 1.0 / (1.0 + (-logit).exp());
            assert!((tape.value(out.probs).row(r)[t] - p).abs() < 1e-12);
            assert!(p > 0.0 && p < 1.0);
        }
    }
}

#[test]
fn grad_check_quadratic_is_exact() {
    let mut store = ParameterStore::new();
    let x = store.add("x", rand_matrix(1, 6, 5)).unwrap();
    let err = grad_check(&mut store, 1e-4, 1000, 1, |t| {
        let v = t.param(x)?;
        let sq = t.mul(v, v)?;
        let s = t.sum(sq)?;
        t.scale(s, 0.5)
    })
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn grad_check_validates_eps() {
    let mut store = ParameterStore::new();
    let x = store.add("x", Tensor::scalar(1.0)).unwrap();
    assert!(grad_check(&mut store, 1e-2, 10, 1, |t| t.param(x)).is_err());
}

/// Every op of the vocabulary chained into one scalar.
#[test]
fn grad_check_covers_op_vocabulary() {
    let mut store = ParameterStore::new();
    let mut rng = stream(10, 0, 0);
    let emb = store.add_uniform("emb", &[6, 4], 0.5, &mut rng).unwrap();
    let tok = store.add_uniform("tok", &[7, 4], 0.5, &mut rng).unwrap();
    let mha = MultiHeadAttention::new(&mut store, "att", 4, 4, 4, 2, &mut rng).unwrap();
    let cfg = MmoeConfig { input: 8, experts: 2, expert_dims: vec![5], tower_dims: vec![3], tasks: 2 };
    let mmoe = Mmoe::new(&mut store, "mmoe", &cfg, &mut rng).unwrap();
    let sparse = Rc::new(SparseRows {
        width: 7,
        rows: vec![vec![(0, 0.5), (3, 1.0)], vec![(2, 1.0)], vec![(6, 0.3), (1, 0.7)]],
    });
    let err = grad_check(&mut store, 1e-5, 400, 3, |t| {
        let e = t.gather(emb, &[1, 4, 4])?;
        let s = t.sparse_linear(tok, sparse.clone())?;
        let sum = t.add(e, s)?;
        let q = t.select_rows(sum, &[0])?;
        let att = mha.forward(t, q, sum, sum, Some(&[true, true, false]))?;
        let rep = t.repeat_row(att.output, 3)?;
        let feat = t.concat_cols(&[rep, s])?;
        let out = mmoe.forward(t, feat)?;
        let bce = t.bce(out.probs, vec![1., 0., 0., 1., 1., 1.], vec![1.0; 6])?;
        let lce = t.list_ce(out.probs, 1, vec![ListSpec { items: vec![0, 1, 2], labels: vec![1., 0., 1.], weight: 1.0 }])?;
        let normed = t.l2_normalize_rows(sum)?;
        let half = t.slice_cols(normed, 1, 3)?;
        let logits = t.matmul_bt(half, half)?;
        let logits = t.scale(logits, 2.0)?;
        let xent = t.softmax_xent(
            logits,
            vec![XentRow { row: 0, pos_col: 0, neg_cols: vec![1, 2], weight: 0.5 }, XentRow {
                row: 2,
                pos_col: 1,
                neg_cols: vec![0],
                weight: 1.0,
            }],
        )?;
        let stacked = t.concat_rows(&[bce, lce, xent])?;
        let sig = t.sigmoid(stacked)?;
        let all = t.add(sig, stacked)?;
        t.sum(all)
    })
    .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

/// Per-row key lists reproduce the dense masked path row by row.
#[test]
fn sparse_attention_matches_masked_forward() {
    let mut store = ParameterStore::new();
    let mha = MultiHeadAttention::new(&mut store, "a", 5, 4, 6, 2, &mut stream(12, 0, 0)).unwrap();
    let qm = rand_matrix(3, 5, 31);
    let km = rand_matrix(6, 4, 32);
    let keys = vec![vec![0, 1, 2], vec![3], vec![2, 4, 5]];
    let mut tape = Tape::new(&store);
    let (q, k) = (tape.constant(qm.clone()).unwrap(), tape.constant(km.clone()).unwrap());
    let sparse = mha.forward_sparse(&mut tape, q, k, k, Rc::new(keys.clone())).unwrap();
    for (i, list) in keys.iter().enumerate() {
        let qi = tape.constant(Tensor::matrix(1, 5, qm.row(i).to_vec()).unwrap()).unwrap();
        let mask: Vec<bool> = (0..6).map(|j| list.contains(&j)).collect();
        let dense = mha.forward(&mut tape, qi, k, k, Some(&mask)).unwrap();
        for (a, b) in tape.value(sparse).row(i).iter().zip(tape.value(dense.output).row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn sparse_attention_gradients() {
    let mut store = ParameterStore::new();
    let mut rng = stream(13, 0, 0);
    let mha = MultiHeadAttention::new(&mut store, "a", 4, 4, 4, 2, &mut rng).unwrap();
    let x = store.add_uniform("x", &[5, 4], 0.8, &mut rng).unwrap();
    let keys = Rc::new(vec![vec![1, 2, 3], vec![0], vec![4, 0]]);
    let err = grad_check(&mut store, 1e-4, 400, 4, |t| {
        let xv = t.param(x)?;
        let q = t.select_rows(xv, &[0, 1, 2])?;
        let out = mha.forward_sparse(t, q, xv, xv, keys.clone())?;
        let sq = t.mul(out, out)?;
        t.sum(sq)
    })
    .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn sparse_attention_rejects_empty_and_out_of_range_lists() {
    let mut store = ParameterStore::new();
    let mha = MultiHeadAttention::new(&mut store, "a", 4, 4, 4, 2, &mut stream(14, 0, 0)).unwrap();
    let mut tape = Tape::new(&store);
    let q = tape.constant(rand_matrix(2, 4, 1)).unwrap();
    let k = tape.constant(rand_matrix(3, 4, 2)).unwrap();
    for keys in [vec![vec![0], vec![]], vec![vec![0], vec![3]]] {
        let err = mha.forward_sparse(&mut tape, q, k, k, Rc::new(keys)).unwrap_err();
        assert_eq!(err.kind(), persearch::ErrorKind::Attention);
    }
}

#[test]
fn overfit_tiny_batch_halves_loss() {
    let mut store = ParameterStore::new();
    let mlp = Mlp::new(&mut store, "m", 4, &[16, 1], false, false, &mut stream(11, 0, 0)).unwrap();
    let x = rand_matrix(8, 4, 21);
    let targets: Vec<f64> = (0..8).map(|i| (i % 2) as f64).collect();
    let loss_of = |store: &ParameterStore| {
        let mut t = Tape::new(store);
        let xv = t.constant(x.clone()).unwrap();
        let h = mlp.forward(&mut t, xv).unwrap();
        let p = t.sigmoid(h).unwrap();
        let l = t.bce(p, targets.clone(), vec![1.0 / 8.0; 8]).unwrap();
        let g = t.backward(l).unwrap();
        (t.value(l).item(), g)
    };
    let (initial, _) = loss_of(&store);
    let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
    for _ in 0..200 {
        let (_, g) = loss_of(&store);
        store.accumulate(&g);
        adam_step(&mut store, &cfg);
    }
    let (fin, _) = loss_of(&store);
    assert!(fin <= 0.5 * initial, "{initial} -> {fin}");
}

#[test]
fn sampled_softmax_reference_value() {
    use persearch::tensor::sampled_softmax_loss;
    let l = sampled_softmax_loss(&[0.9], &[vec![0.1, -0.2]], 0.05).unwrap();
    // −log(e^18 / (e^18 + e^2 + e^-4)) = ln(1 + e^-16 + e^-22)
    let x = (-16f64).exp() + (-22f64).exp();
    let expect = x - x * x / 2.0 + x * x * x / 3.0;
    assert!((l - expect).abs() <= 1e-12 * expect, "{l} vs {expect}");
}

#[test]
fn forward_is_bit_deterministic() {
    let (store, m) = small_mmoe(3, 12);
    let run = || {
        let mut t = Tape::new(&store);
        let xv = t.constant(rand_matrix(5, 5, 4)).unwrap();
        let o = m.forward(&mut t, xv).unwrap();
        t.value(o.probs).data().to_vec()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-40.0f64..40.0, 12)) {
        let store = ParameterStore::new();
        let mut t = Tape::new(&store);
        let x = t.constant(Tensor::matrix(3, 4, vals).unwrap()).unwrap();
        let s = t.softmax_rows(x, None).unwrap();
        for r in 0..3 {
            prop_assert!((t.value(s).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn l2_rows_have_unit_norm(vals in proptest::collection::vec(-5.0f64..5.0, 8)) {
        prop_assume!(vals[..4].iter().any(|v| v.abs() > 1e-3) && vals[4..].iter().any(|v| v.abs() > 1e-3));
        let store = ParameterStore::new();
        let mut t = Tape::new(&store);
        let x = t.constant(Tensor::matrix(2, 4, vals).unwrap()).unwrap();
        let s = t.l2_normalize_rows(x).unwrap();
        for r in 0..2 {
            let n: f64 = t.value(s).row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mlp_normalized_output_is_unit(seed in 0u64..1000) {
        let mut store = ParameterStore::new();
        let mlp = Mlp::new(&mut store, "m", 3, &[5, 4], false, true, &mut stream(seed, 0, 0)).unwrap();
        let mut t = Tape::new(&store);
        let x = t.constant(rand_matrix(2, 3, seed)).unwrap();
        let y = mlp.forward(&mut t, x).unwrap();
        let raw = Mlp { l2_normalize: false, ..mlp.clone() }.forward(&mut t, x).unwrap();
        for r in 0..2 {
            // a row whose hidden units are all cut by the ReLU has no direction
            if t.value(raw).row(r).iter().all(|&v| v == 0.0) {
                continue;
            }
            let n: f64 = t.value(y).row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
        }
    }
}
