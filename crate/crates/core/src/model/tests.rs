use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn series(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn test_model(seed: u64) -> Model<f64> {
    let mut c = ModelConfig::tiny();
    c.init_std = 0.3;
    Model::new(c, seed).unwrap()
}

fn forward_heads(m: &Model<f64>, values: &[f64], ids: &[u64]) -> Vec<Tensor<f64>> {
    let mut g = Graph::new();
    let layout = SeqLayout::from_ids(ids).unwrap();
    let out = m.forward_graph(&mut g, values, &layout, None).unwrap();
    out.heads.iter().map(|&h| g.tensor(h)).collect()
}

#[test]
fn output_shapes_follow_horizons() {
    let m = test_model(1);
    let heads = m.head_predictions(&series(37, 2)).unwrap();
    assert_eq!(heads.len(), 4);
    for (h, p) in heads.iter().zip([1, 8, 32, 64]) {
        assert_eq!(h.shape(), &[37, p]);
    }
}

#[test]
fn causality_is_exact() {
    let m = test_model(2);
    let x = series(24, 3);
    let base = m.head_predictions(&x).unwrap();
    for t in [0, 5, 22] {
        let mut y = x.clone();
        y[t + 1] += 3.7;
        let pert = m.head_predictions(&y).unwrap();
        for (a, b) in base.iter().zip(&pert) {
            for pos in 0..=t {
                assert_eq!(a.row(pos), b.row(pos), "position {pos} changed after perturbing {}", t + 1);
            }
        }
    }
}

#[test]
fn packed_sequences_are_isolated() {
    let m = test_model(3);
    let a = series(11, 4);
    let b = series(9, 5);
    let ids: Vec<u64> = std::iter::repeat_n(0, 9).chain(std::iter::repeat_n(1, 11)).collect();
    let packed: Vec<f64> = b.iter().chain(&a).copied().collect();
    let zeroed: Vec<f64> = std::iter::repeat_n(0.0, 9).chain(a.iter().copied()).collect();
    let p1 = forward_heads(&m, &packed, &ids);
    let p2 = forward_heads(&m, &zeroed, &ids);
    let alone = m.head_predictions(&a).unwrap();
    for ((x, y), z) in p1.iter().zip(&p2).zip(&alone) {
        for pos in 0..11 {
            assert_eq!(x.row(9 + pos), y.row(9 + pos));
            assert_eq!(x.row(9 + pos), z.row(pos));
        }
    }
}

#[test]
fn single_token_attention_is_value_projection() {
    let m = test_model(4);
    let x = Tensor::<f64>::from_f64(&series(8, 6), &[1, 8]).unwrap();
    let got = m.causal_self_attention(0, &x, &[0]).unwrap();
    let blk = m.block_ids(0);
    let p = m.params();
    let d = 8;
    let mut v = vec![0.0; d];
    for i in 0..d {
        v[i] = p.get(blk.bv).data()[i] + (0..d).map(|j| p.get(blk.wv).row(i)[j] * x.data()[j]).sum::<f64>();
    }
    for i in 0..d {
        let want: f64 = (0..d).map(|j| p.get(blk.wo).row(i)[j] * v[j]).sum();
        assert!((got.data()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn zeroed_sublayers_pass_residual_through() {
    let mut m = test_model(5);
    let blk = m.block_ids(0).clone();
    let d = m.config().d_model;
    *m.params_mut().get_mut(blk.wo) = Tensor::zeros(&[d, d]);
    if let FfnIds::Moe { experts, shared, .. } = &blk.ffn {
        for e in experts.iter().chain([shared]) {
            let shape = m.params().get(e.down).shape().to_vec();
            *m.params_mut().get_mut(e.down) = Tensor::zeros(&shape);
        }
    }
    let h = HiddenState {
        values: Tensor::from_f64(&series(6 * d, 7), &[6, d]).unwrap(),
        layer_index: 0,
        seq_ids: vec![0; 6],
    };
    let out = m.block_forward(&h).unwrap();
    assert_eq!(out.values, h.values);
    assert_eq!(out.layer_index, 1);
    assert!(m.block_forward(&HiddenState { layer_index: 2, ..h }).is_err());
}

#[test]
fn dense_variant_equals_single_expert_mixture() {
    let mut dense_cfg = ModelConfig::tiny();
    dense_cfg.use_moe = false;
    dense_cfg.d_ff = 12;
    dense_cfg.init_std = 0.3;
    let dense = Model::<f64>::new(dense_cfg.clone(), 8).unwrap();

    let mut moe_cfg = dense_cfg.clone();
    moe_cfg.use_moe = true;
    moe_cfg.num_experts = 1;
    moe_cfg.top_k = 1;
    moe_cfg.d_expert = 12;
    let mut moe = Model::<f64>::new(moe_cfg, 9).unwrap();

    let mut named = Vec::new();
    for (name, t) in moe.params().iter() {
        let mapped = name.replace(".moe.experts.0.", ".ffn.");
        let src = if name.contains(".moe.shared.down") {
            Tensor::zeros(t.shape())
        } else if let Some(id) = dense.params().find(&mapped) {
            dense.params().get(id).clone()
        } else {
            t.clone()
        };
        named.push((name.to_string(), src));
    }
    moe.load_named(named).unwrap();

    let x = series(30, 10);
    let a = dense.head_predictions(&x).unwrap();
    let b = moe.head_predictions(&x).unwrap();
    for (p, q) in a.iter().zip(&b) {
        for (u, v) in p.data().iter().zip(q.data()) {
            assert!((u - v).abs() < 1e-5);
        }
    }
}

#[test]
fn long_context_forward_is_finite() {
    let mut c = ModelConfig::tiny();
    c.max_context = 1024;
    let m = Model::<f32>::new(c, 11).unwrap();
    let x: Vec<f32> = (0..1024).map(|i| (i as f32 * 0.05).sin() * 10.0).collect();
    for h in m.head_predictions(&x).unwrap() {
        assert!(h.is_finite());
    }
    let too_long = vec![0.0f32; 1025];
    assert!(m.head_predictions(&too_long).is_err());
}

#[test]
fn non_finite_input_is_a_data_error() {
    let m = test_model(12);
    assert!(matches!(m.head_predictions(&[1.0, f64::INFINITY]), Err(Error::Data(_))));
}

#[test]
fn tiny_count_matches_hand_enumeration() {
    let c = ModelConfig::tiny();
    // embed 2·8; per layer: norms 2·8, q/k/v/o 4·64, qkv bias 3·8,
    // router 5·8, five experts of 3·8·16; final norm 8; heads 105·8
    let layer = 16 + 256 + 24 + 40 + 5 * 384;
    let total = 16 + 2 * layer + 8 + 105 * 8;
    let activated = total - 2 * 2 * 384;
    assert_eq!(count_params(&c), ParamCount { total: 5376, activated: 3840 });
    assert_eq!((total, activated), (5376, 3840));
    let m = Model::<f32>::new(c, 0).unwrap();
    assert_eq!(m.params().num_elements(), 5376);
}

#[test]
fn full_routing_activates_everything() {
    let mut c = ModelConfig::tiny();
    c.top_k = c.num_experts;
    let n = count_params(&c);
    assert_eq!(n.total, n.activated);
    c.use_moe = false;
    let d = count_params(&c);
    assert_eq!(d.total, d.activated);
    assert_eq!(Model::<f32>::new(c, 0).unwrap().params().num_elements(), d.total);
}

#[test]
fn sparse_forward_evaluates_k_plus_one_experts() {
    let m = test_model(13);
    let mut g = Graph::new();
    let x = series(21, 14);
    let out = m.forward_graph(&mut g, &x, &SeqLayout::single(21), None).unwrap();
    assert_eq!(out.expert_evaluations, 2 * 21 * 3);
    assert_eq!(out.routing.len(), 2);
}

#[test]
fn cast_round_trip_preserves_f32_values() {
    let m = Model::<f32>::new(ModelConfig::tiny(), 3).unwrap();
    let back = m.cast::<f64>().cast::<f32>();
    for ((_, a), (_, b)) in m.params().iter().zip(back.params().iter()) {
        assert_eq!(a.data(), b.data());
    }
}
