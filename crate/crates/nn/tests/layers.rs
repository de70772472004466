use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topocl_nn::gradcheck::{check_gradients, Coordinates};
use topocl_nn::{Graph, Mlp, MultiHeadAttention, ParameterSet, Result, Tensor, Var};

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn probe(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.shape(out);
    let w = g.constant(random(&mut ChaCha8Rng::seed_from_u64(seed), r, c));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

#[test]
fn attention_with_one_key_returns_its_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut set = ParameterSet::new();
    let mha = MultiHeadAttention::new(&mut set, "a", 8, 4, &mut rng).unwrap();
    for p in [mha.wq, mha.wk, mha.wv, mha.wo] {
        *set.get_mut(p.weight) = Tensor::identity(8);
    }
    let mut g = Graph::new();
    let q = g.constant(random(&mut rng, 1, 8));
    let kv = g.constant(random(&mut rng, 1, 8));
    let out = mha.forward(&mut g, &set, q, kv, None).unwrap();
    assert_eq!(g.value(out), g.value(kv));
}

#[test]
fn masking_all_but_one_key_selects_that_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut set = ParameterSet::new();
    let mha = MultiHeadAttention::new(&mut set, "a", 12, 3, &mut rng).unwrap();
    let mut g = Graph::new();
    let q = g.constant(random(&mut rng, 4, 12));
    let kv = g.constant(random(&mut rng, 5, 12));
    let mask = [false, false, true, false, false];
    let out = mha.forward(&mut g, &set, q, kv, Some(&mask)).unwrap();
    // expected: the projected value of key 2, W_o (W_v kv_2), for every query
    let kv2 = Tensor::row_vector(g.value(kv).row(2).to_vec());
    let wv = set.get(mha.wv.weight);
    let wo = set.get(mha.wo.weight);
    let expect = kv2.matmul(wv).unwrap().matmul(wo).unwrap();
    for r in 0..4 {
        for (a, b) in g.value(out).row(r).iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn masked_key_values_do_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut set = ParameterSet::new();
    let mha = MultiHeadAttention::new(&mut set, "a", 8, 2, &mut rng).unwrap();
    let q = random(&mut rng, 3, 8);
    let kv = random(&mut rng, 6, 8);
    let mask = [true, false, true, true, false, true];
    let run = |kv: Tensor| {
        let mut g = Graph::new();
        let (qv, kvv) = (g.constant(q.clone()), g.constant(kv));
        let out = mha.forward(&mut g, &set, qv, kvv, Some(&mask)).unwrap();
        g.value(out).clone()
    };
    let base = run(kv.clone());
    let mut changed = kv;
    for c in 0..8 {
        changed.set(1, c, 1e3);
        changed.set(4, c, -7.0);
    }
    assert_eq!(run(changed), base);
}

#[test]
fn self_attention_gradients_at_full_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut set = ParameterSet::new();
    let mha = MultiHeadAttention::new(&mut set, "a", 384, 4, &mut rng).unwrap();
    let x = random(&mut rng, 5, 384);
    let mut sets = vec![set];
    let report = check_gradients(&mut sets, Coordinates::Sample { count: 400, seed: 5 }, 1e-5, |g, s| {
        let xv = g.constant(x.clone());
        let out = mha.forward(g, &s[0], xv, xv, None)?;
        probe(g, out, 6)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
    // every projection matrix was sampled
    for p in [mha.wq, mha.wk, mha.wv, mha.wo] {
        assert!(sets[0].get(p.weight).len() == 384 * 384);
    }
}

#[test]
fn each_projection_matrix_passes_the_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut set = ParameterSet::new();
    let mha = MultiHeadAttention::new(&mut set, "a", 16, 4, &mut rng).unwrap();
    let x = random(&mut rng, 5, 16);
    let mut sets = vec![set];
    let report = check_gradients(&mut sets, Coordinates::All, 1e-5, |g, s| {
        let xv = g.constant(x.clone());
        let out = mha.forward(g, &s[0], xv, xv, None)?;
        probe(g, out, 8)
    })
    .unwrap();
    assert_eq!(report.checked, 4 * 16 * 16);
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

#[test]
fn ph_encoder_stack_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut set = ParameterSet::new();
    let mlp = Mlp::new(&mut set, "ph", &[4, 64, 128, 256, 384], &mut rng).unwrap();
    let x = Tensor::row_vector(vec![0.2, 0.7, 1.0, 0.0]);
    let mut sets = vec![set];
    let report = check_gradients(&mut sets, Coordinates::Sample { count: 500, seed: 10 }, 1e-5, |g, s| {
        let xv = g.constant(x.clone());
        let out = mlp.forward(g, &s[0], xv)?;
        probe(g, out, 11)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

#[test]
fn zero_mlp_gives_zero_and_single_layer_is_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut set = ParameterSet::new();
    let mlp = Mlp::new(&mut set, "m", &[3, 5, 2], &mut rng).unwrap();
    for (_, t) in set.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut g = Graph::new();
    let x = g.constant(random(&mut rng, 4, 3));
    let y = mlp.forward(&mut g, &set, x).unwrap();
    assert_eq!(g.value(y), &Tensor::zeros(4, 2));

    let mut set = ParameterSet::new();
    let single = Mlp::new(&mut set, "s", &[3, 2], &mut rng).unwrap();
    *set.get_mut(single.last().bias.unwrap()) = Tensor::row_vector(vec![0.5, -1.0]);
    let xin = random(&mut rng, 4, 3);
    let mut g = Graph::new();
    let x = g.constant(xin.clone());
    let y = single.forward(&mut g, &set, x).unwrap();
    let mut expect = xin.matmul(set.get(single.last().weight)).unwrap();
    for r in 0..4 {
        expect.row_mut(r)[0] += 0.5;
        expect.row_mut(r)[1] -= 1.0;
    }
    assert_eq!(g.value(y), &expect);
}

#[test]
fn shape_errors_are_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut set = ParameterSet::new();
    let mlp = Mlp::new(&mut set, "m", &[3, 2], &mut rng).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(1, 4));
    assert!(mlp.forward(&mut g, &set, x).is_err());
    let a = g.constant(Tensor::zeros(2, 3));
    assert!(g.matmul(a, a).is_err());
    assert!(MultiHeadAttention::new(&mut set, "bad", 10, 4, &mut rng).is_err());
}

#[test]
fn forward_is_deterministic_for_a_seed() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut set = ParameterSet::new();
        let mha = MultiHeadAttention::new(&mut set, "a", 8, 2, &mut rng).unwrap();
        let x = random(&mut rng, 3, 8);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = mha.forward(&mut g, &set, xv, xv, None).unwrap();
        g.value(out).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(build(), build());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-50.0..50.0f64, 1..20)) {
        let n = values.len();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(1, n, values).unwrap());
        let y = g.softmax_rows(x);
        let total: f64 = g.value(y).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(g.value(y).data().iter().all(|&p| p >= 0.0));
    }
}
