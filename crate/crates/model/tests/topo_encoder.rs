mod common;

use common::{jitter, nn, random_diagram, random_pairs, rng, zero_param};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use topocl_core::{PersistenceDiagram, PersistencePair};
use topocl_model::{select_points, Error, SelectedPoints, TopoConfig, TopoEncoder};
use topocl_nn::gradcheck::{check_gradients, Coordinates};
use topocl_nn::{Graph, ParameterSet, Tensor};

fn encoder(config: &TopoConfig, seed: u64) -> (TopoEncoder, ParameterSet) {
    let mut set = ParameterSet::new();
    let mut r = rng(seed);
    let enc = TopoEncoder::new(&mut set, "topo", config, &mut r).unwrap();
    jitter(&mut set, 0.05, &mut r);
    (enc, set)
}

#[test]
fn top_48_of_60_match_a_sort_oracle() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let pairs = random_pairs(60, &mut r);
        let pd = PersistenceDiagram {
            dim0: pairs.clone(),
            ..Default::default()
        };
        let sel = select_points(&pd, 48, 96);

        // oracle: rank every pair by how many pairs beat it
        let beats = |a: &PersistencePair, b: &PersistencePair| {
            let (pa, pb) = (a.death - a.birth, b.death - b.birth);
            pa > pb || (pa == pb && a.birth < b.birth)
        };
        let mut kept: Vec<(f64, f64)> = pairs
            .iter()
            .filter(|p| pairs.iter().filter(|q| beats(q, p)).count() < 48)
            .map(|p| (p.birth, p.death))
            .collect();
        let mut got: Vec<(f64, f64)> = sel.rows[..48].iter().map(|r| (r[0], r[1])).collect();
        kept.sort_by(|a, b| a.partial_cmp(b).unwrap());
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, kept);
        assert_eq!(sel.num_valid(), 48);
        // block ordering: persistence descending
        let pers: Vec<f64> = sel.rows[..48].iter().map(|r| r[1] - r[0]).collect();
        assert!(pers.windows(2).all(|w| w[0] >= w[1]));
    }
}

#[test]
fn full_architecture_meets_the_shape_contract() {
    let config = TopoConfig::full();
    let (enc, set) = encoder(&config, 1);
    let pd = random_diagram(10, 7, &mut rng(2));
    let trace = enc.trace(&set, &enc.select(&pd)).unwrap();
    assert_eq!(trace.h0.shape(), (48, 384));
    assert_eq!(trace.h1.shape(), (96, 384));
    assert_eq!(trace.h0_self.shape(), (48, 384));
    assert_eq!(trace.h1_self.shape(), (96, 384));
    assert_eq!(trace.h_cross.shape(), (144, 384));
    assert_eq!(trace.pooled.shape(), (6, 384));
    assert_eq!(trace.flat.shape(), (1, 2304));
    assert_eq!(trace.t.shape(), (1, 256));
    let dims: Vec<usize> = enc.ph.layers.iter().map(|l| l.fan_out).collect();
    assert_eq!(dims, vec![64, 128, 256, 384]);
    let dims: Vec<usize> = enc.proj.layers.iter().map(|l| l.fan_out).collect();
    assert_eq!(dims, vec![768, 512, 256]);
}

#[test]
fn points_beyond_the_block_size_are_a_shape_error_for_the_encoder() {
    let (enc, set) = encoder(&TopoConfig::toy(), 1);
    let wrong = SelectedPoints::from_blocks(4, 4, &[(0.1, 0.5)], &[]);
    assert!(matches!(enc.encode(&set, &wrong), Err(Error::ShapeContract(_))));
}

#[test]
fn zeroed_final_projection_gives_the_bias() {
    let (enc, mut set) = encoder(&TopoConfig::full(), 3);
    let last = *enc.proj.last();
    zero_param(&mut set, last.weight);
    let bias = set.get(last.bias.unwrap()).clone();
    let t = enc.encode_diagram(&set, &random_diagram(5, 3, &mut rng(4))).unwrap();
    assert_eq!(t.data(), bias.data());
}

#[test]
fn permuting_valid_rows_within_a_block_leaves_t_unchanged() {
    let (enc, set) = encoder(&TopoConfig::full(), 5);
    let mut r = rng(6);
    let pd = random_diagram(12, 9, &mut r);
    let base = enc.select(&pd);
    let t = enc.encode(&set, &base).unwrap();
    for _ in 0..3 {
        let mut h0: Vec<(f64, f64)> = base.valid_rows(0).iter().map(|&i| (base.rows[i][0], base.rows[i][1])).collect();
        let mut h1: Vec<(f64, f64)> = base.valid_rows(1).iter().map(|&i| (base.rows[i][0], base.rows[i][1])).collect();
        h0.shuffle(&mut r);
        h1.shuffle(&mut r);
        let perm = SelectedPoints::from_blocks(48, 96, &h0, &h1);
        let tp = enc.encode(&set, &perm).unwrap();
        assert!(t.max_abs_diff(&tp) < 1e-9, "{}", t.max_abs_diff(&tp));
    }
}

#[test]
fn padding_values_never_reach_t() {
    let (enc, set) = encoder(&TopoConfig::full(), 7);
    let base = enc.select(&random_diagram(6, 4, &mut rng(8)));
    let t = enc.encode(&set, &base).unwrap();
    let mut dirty = base.clone();
    let mut r = rng(9);
    for i in 0..dirty.len() {
        if !dirty.valid[i] {
            dirty.rows[i][0] = r.random_range(-1e3..1e3);
            dirty.rows[i][1] = r.random_range(-1e3..1e3);
        }
    }
    assert_eq!(enc.encode(&set, &dirty).unwrap().data(), t.data());
}

#[test]
fn the_homology_tag_is_live() {
    let (enc, set) = encoder(&TopoConfig::full(), 10);
    let h0 = [(0.0, 1.0), (0.1, 0.4)];
    let h1 = [(0.3, 0.7)];
    let a = SelectedPoints::from_blocks(48, 96, &h0, &h1);
    let b = SelectedPoints::from_blocks(48, 96, &h0[..1], &[(0.1, 0.4), (0.3, 0.7)]);
    let (ta, tb) = (enc.encode(&set, &a).unwrap(), enc.encode(&set, &b).unwrap());
    assert!(ta.max_abs_diff(&tb) > 0.0);
}

#[test]
fn empty_blocks_are_handled() {
    let (enc, set) = encoder(&TopoConfig::full(), 11);
    let empty = enc.encode_diagram(&set, &PersistenceDiagram::default()).unwrap();
    assert!(empty.data().iter().all(|v| v.is_finite()));
    let trace = enc.trace(&set, &select_points(&PersistenceDiagram::default(), 48, 96)).unwrap();
    assert!(trace.pooled.data().iter().all(|&v| v == 0.0));
    // no H1 points: cross-attention of H0 passes h0' through
    let h0_only = SelectedPoints::from_blocks(48, 96, &[(0.0, 1.0), (0.2, 0.5)], &[]);
    let trace = enc.trace(&set, &h0_only).unwrap();
    assert_eq!(trace.h0_cross.row(0), trace.h0_self.row(0));
    assert_eq!(trace.h0_cross.row(1), trace.h0_self.row(1));
}

#[test]
fn batched_encoding_equals_one_at_a_time() {
    let (enc, set) = encoder(&TopoConfig::toy(), 12);
    let mut r = rng(13);
    let batch: Vec<SelectedPoints> = [(4, 2), (0, 0), (9, 0), (1, 5)]
        .iter()
        .map(|&(a, b)| enc.select(&random_diagram(a, b, &mut r)))
        .collect();
    let mut g = Graph::new();
    let t = enc.forward(&mut g, &set, &batch).unwrap().t;
    let t = g.value(t).clone();
    for (i, p) in batch.iter().enumerate() {
        let single = enc.encode(&set, p).unwrap();
        let row = Tensor::row_vector(t.row(i).to_vec());
        assert!(row.max_abs_diff(&single) < 1e-12);
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let config = TopoConfig::full();
    let (enc, set) = encoder(&config, 14);
    let mut r = rng(15);
    let batch = vec![
        enc.select(&random_diagram(7, 4, &mut r)),
        enc.select(&random_diagram(3, 6, &mut r)),
    ];
    let probe = Tensor::from_fn(2, config.out, |_, _| r.random_range(-1.0..1.0));
    let mut sets = [set];
    let check = check_gradients(&mut sets, Coordinates::Sample { count: 60, seed: 16 }, 1e-5, |g, s| {
        let t = nn(enc.forward(g, &s[0], &batch))?.t;
        let p = g.constant(probe.clone());
        let prod = g.mul(t, p)?;
        Ok(g.sum(prod))
    })
    .unwrap();
    assert!(check.max_rel_err < 1e-4, "{check:?}");
}

#[test]
fn ablations_drop_their_modules() {
    let mut config = TopoConfig::toy();
    config.self_attention = false;
    let (enc, set) = encoder(&config, 17);
    assert!(enc.self0.is_none() && enc.self1.is_none());
    let p = enc.select(&random_diagram(3, 2, &mut rng(18)));
    let trace = enc.trace(&set, &p).unwrap();
    assert_eq!(trace.h0_self.data(), trace.h0.data());

    let mut config = TopoConfig::toy();
    config.cross_attention = false;
    let (enc, set) = encoder(&config, 19);
    assert!(enc.cross01.is_none() && enc.cross10.is_none());
    let trace = enc.trace(&set, &p).unwrap();
    assert_eq!(trace.h0_cross.data(), trace.h0_self.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn selection_keeps_blocks_sorted(n0 in 0usize..70, n1 in 0usize..110, seed in 0u64..1000) {
        let pd = random_diagram(n0, n1, &mut rng(seed));
        let sel = select_points(&pd, 48, 96);
        prop_assert_eq!(sel.len(), 144);
        prop_assert_eq!(sel.valid_rows(0).len(), n0.min(48));
        prop_assert_eq!(sel.valid_rows(1).len(), n1.min(96));
        for q in 0..2 {
            let rows = sel.valid_rows(q);
            // valid rows come first in each block
            prop_assert!(rows.iter().enumerate().all(|(i, &r)| r == sel.block(q).start + i));
            let pers: Vec<f64> = rows.iter().map(|&r| sel.rows[r][1] - sel.rows[r][0]).collect();
            prop_assert!(pers.windows(2).all(|w| w[0] >= w[1]));
            for r in sel.block(q) {
                let tag = if q == 0 { [1.0, 0.0] } else { [0.0, 1.0] };
                prop_assert_eq!(&sel.rows[r][2..], &tag[..]);
            }
        }
    }
}
