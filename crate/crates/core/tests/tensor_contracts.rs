//! Contract tests for the tensor kernel: pinned hand values, closed forms,
//! and an independent scalar-loop oracle for multi-head attention.

use proptest::prelude::*;
use vefusion_core::rng::Rng;
use vefusion_core::tensor::{multi_head_attention, AttentionVars, Graph, ParamSet, Tensor};
use vefusion_core::CoreError;

#[test]
fn matmul_identity_zero_and_hand_case() {
    let mut g = Graph::<f64>::new();
    let eye = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
    let a = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let zero = g.leaf(Tensor::zeros(vec![2, 2]));
    let b = g.leaf(Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]));

    let id_a = g.matmul(eye, a).unwrap();
    assert_eq!(g.data(id_a), &[1.0, 2.0, 3.0, 4.0]);

    let annihilated = g.matmul(a, zero).unwrap();
    assert_eq!(g.data(annihilated), &[0.0, 0.0, 0.0, 0.0]);

    let ab = g.matmul(a, b).unwrap();
    assert_eq!(g.data(ab), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::zeros(vec![2, 3]));
    let b = g.leaf(Tensor::zeros(vec![4, 2]));
    match g.matmul(a, b) {
        Err(CoreError::Dimension { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![4, 2]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn softmax_closed_forms() {
    let mut g = Graph::<f64>::new();
    let c = g.leaf(Tensor::new(vec![4], vec![3.7, 3.7, 3.7, 3.7]));
    let sym = g.softmax_rows(c).unwrap();
    for &v in g.data(sym) {
        assert!((v - 0.25).abs() < 1e-15);
    }

    let single = g.leaf(Tensor::new(vec![1], vec![42.0]));
    let s = g.softmax_rows(single).unwrap();
    assert_eq!(g.data(s), &[1.0]);

    let two = g.leaf(Tensor::new(vec![2], vec![0.0, 2.0f64.ln()]));
    let t = g.softmax_rows(two).unwrap();
    assert!((g.data(t)[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((g.data(t)[1] - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn layer_norm_closed_forms() {
    let mut g = Graph::<f64>::new();
    let gain1 = g.leaf(Tensor::new(vec![4], vec![1.0; 4]));
    let bias0 = g.leaf(Tensor::new(vec![4], vec![0.0; 4]));

    // constant slice maps to the bias
    let constant = g.leaf(Tensor::new(vec![1, 4], vec![5.0; 4]));
    let y = g.layer_norm(constant, gain1, bias0, 1e-5).unwrap();
    for &v in g.data(y) {
        assert!(v.abs() < 1e-9, "constant slice should normalize to bias, got {v}");
    }

    // already normalized input is a fixed point at epsilon = 0
    let gain2 = g.leaf(Tensor::new(vec![2], vec![1.0, 1.0]));
    let bias2 = g.leaf(Tensor::new(vec![2], vec![0.0, 0.0]));
    let pm = g.leaf(Tensor::new(vec![1, 2], vec![-1.0, 1.0]));
    let y = g.layer_norm(pm, gain2, bias2, 0.0).unwrap();
    assert!((g.data(y)[0] + 1.0).abs() < 1e-12);
    assert!((g.data(y)[1] - 1.0).abs() < 1e-12);

    // [0,2], gain 2, bias 1 -> [-1, 3]
    let gain = g.leaf(Tensor::new(vec![2], vec![2.0, 2.0]));
    let bias = g.leaf(Tensor::new(vec![2], vec![1.0, 1.0]));
    let x = g.leaf(Tensor::new(vec![1, 2], vec![0.0, 2.0]));
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    assert!((g.data(y)[0] + 1.0).abs() < 1e-5);
    assert!((g.data(y)[1] - 3.0).abs() < 1e-5);
}

#[test]
fn layer_norm_rejects_single_feature() {
    let mut g = Graph::<f64>::new();
    let gain = g.leaf(Tensor::new(vec![1], vec![1.0]));
    let bias = g.leaf(Tensor::new(vec![1], vec![0.0]));
    let x = g.leaf(Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]));
    assert!(matches!(
        g.layer_norm(x, gain, bias, 1e-5),
        Err(CoreError::Dimension { .. })
    ));
}

#[test]
fn cross_entropy_closed_forms() {
    let mut g = Graph::<f64>::new();

    let uniform = g.leaf(Tensor::new(vec![1, 4], vec![0.3; 4]));
    let loss = g.cross_entropy(uniform, &[1]).unwrap();
    assert!((g.data(loss)[0] - 4.0f64.ln()).abs() < 1e-12);

    let single = g.leaf(Tensor::new(vec![1, 1], vec![7.0]));
    let loss = g.cross_entropy(single, &[0]).unwrap();
    assert!(g.data(loss)[0].abs() < 1e-12);

    let two = g.leaf(Tensor::new(vec![1, 2], vec![2.0, 0.0]));
    let loss = g.cross_entropy(two, &[0]).unwrap();
    assert!((g.data(loss)[0] - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let mut g = Graph::<f64>::new();
    let logits = g.leaf(Tensor::new(vec![1, 3], vec![0.0; 3]));
    assert!(matches!(g.cross_entropy(logits, &[3]), Err(CoreError::Data(_))));
}

fn attention_fixture(l: usize, d: usize, seed: u64) -> (Tensor<f64>, ParamSet<f64>, [&'static str; 8]) {
    let mut rng = Rng::new(seed);
    let names = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"];
    let mut set = ParamSet::new();
    for n in names {
        let t = if n.starts_with('w') {
            Tensor::new(vec![d, d], (0..d * d).map(|_| rng.normal() * 0.5).collect())
        } else {
            Tensor::new(vec![d], (0..d).map(|_| rng.normal() * 0.1).collect())
        };
        set.add(n, t);
    }
    let x = Tensor::new(vec![l, d], (0..l * d).map(|_| rng.normal()).collect());
    (x, set, names)
}

fn run_attention(
    x: &Tensor<f64>,
    set: &ParamSet<f64>,
    heads: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let vars = AttentionVars {
        wq: g.param(set, set.id("wq").unwrap()),
        bq: g.param(set, set.id("bq").unwrap()),
        wk: g.param(set, set.id("wk").unwrap()),
        bk: g.param(set, set.id("bk").unwrap()),
        wv: g.param(set, set.id("wv").unwrap()),
        bv: g.param(set, set.id("bv").unwrap()),
        wo: g.param(set, set.id("wo").unwrap()),
        bo: g.param(set, set.id("bo").unwrap()),
    };
    let (out, attn_node) = multi_head_attention(&mut g, xv, heads, &vars).unwrap();
    // weight tensor is [H, L, L]; slice per head for the oracle comparison
    let (flat, h, l) = g.attention_weights(attn_node).unwrap();
    let w = (0..h).map(|i| flat[i * l * l..(i + 1) * l * l].to_vec()).collect();
    (g.data(out).to_vec(), w)
}

/// Straight-line scalar reference: QKᵀ/sqrt(d/H) then softmax, no tensor
/// machinery shared with the implementation.
fn attention_weights_oracle(
    x: &Tensor<f64>,
    set: &ParamSet<f64>,
    heads: usize,
) -> Vec<Vec<f64>> {
    let l = x.shape()[0];
    let d = x.shape()[1];
    let dh = d / heads;
    let get = |name: &str| set.get(set.id(name).unwrap()).value.clone();
    let (wq, bq, wk, bk) = (get("wq"), get("bq"), get("wk"), get("bk"));

    let mut q = vec![0.0; l * d];
    let mut k = vec![0.0; l * d];
    for i in 0..l {
        for j in 0..d {
            let mut sq = bq.data()[j];
            let mut sk = bk.data()[j];
            for p in 0..d {
                sq += x.data()[i * d + p] * wq.data()[p * d + j];
                sk += x.data()[i * d + p] * wk.data()[p * d + j];
            }
            q[i * d + j] = sq;
            k[i * d + j] = sk;
        }
    }

    let mut per_head = Vec::new();
    for h in 0..heads {
        let mut w = vec![0.0; l * l];
        for i in 0..l {
            let mut row = vec![0.0; l];
            for j in 0..l {
                let mut dot = 0.0;
                for p in 0..dh {
                    dot += q[i * d + h * dh + p] * k[j * d + h * dh + p];
                }
                row[j] = dot / (dh as f64).sqrt();
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..l {
                w[i * l + j] = exps[j] / sum;
            }
        }
        per_head.push(w);
    }
    per_head
}

#[test]
fn single_token_attention_is_trivially_one() {
    let (x, set, _) = attention_fixture(1, 4, 7);
    let (_, weights) = run_attention(&x, &set, 2);
    for head in weights {
        assert_eq!(head, vec![1.0]);
    }
}

#[test]
fn attention_weights_match_scalar_loop_oracle() {
    let (x, set, _) = attention_fixture(3, 4, 42);
    let (_, weights) = run_attention(&x, &set, 2);
    let oracle = attention_weights_oracle(&x, &set, 2);
    assert_eq!(weights.len(), oracle.len());
    for (w, o) in weights.iter().zip(&oracle) {
        for (a, b) in w.iter().zip(o) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn attention_rejects_indivisible_heads() {
    let (x, set, _) = attention_fixture(2, 4, 9);
    let mut g = Graph::new();
    let xv = g.leaf(x);
    let vars = AttentionVars {
        wq: g.param(&set, set.id("wq").unwrap()),
        bq: g.param(&set, set.id("bq").unwrap()),
        wk: g.param(&set, set.id("wk").unwrap()),
        bk: g.param(&set, set.id("bk").unwrap()),
        wv: g.param(&set, set.id("wv").unwrap()),
        bv: g.param(&set, set.id("bv").unwrap()),
        wo: g.param(&set, set.id("wo").unwrap()),
        bo: g.param(&set, set.id("bo").unwrap()),
    };
    assert!(matches!(
        multi_head_attention(&mut g, xv, 3, &vars),
        Err(CoreError::Config(_))
    ));
}

proptest! {
    /// Softmax rows are valid probability distributions even for inputs
    /// with magnitude up to 1e4.
    #[test]
    fn softmax_rows_are_distributions(
        vals in proptest::collection::vec(-1e4f64..1e4, 1..40),
    ) {
        let n = vals.len();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![n], vals));
        let y = g.softmax_rows(x).unwrap();
        let row = g.data(y);
        let sum: f64 = row.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(row.iter().all(|v| *v >= 0.0 && v.is_finite()));
    }

    /// Softmax preserves the ordering of its inputs.
    #[test]
    fn softmax_is_order_preserving(
        vals in proptest::collection::vec(-50.0f64..50.0, 2..20),
    ) {
        let n = vals.len();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![n], vals.clone()));
        let y = g.softmax_rows(x).unwrap();
        let row = g.data(y);
        for i in 0..n {
            for j in 0..n {
                if vals[i] < vals[j] {
                    prop_assert!(row[i] <= row[j]);
                }
            }
        }
    }

    /// Attention weight rows sum to one for any small random configuration.
    #[test]
    fn attention_rows_are_stochastic(seed in 0u64..500, l in 1usize..6) {
        let (x, set, _) = attention_fixture(l, 8, seed);
        let (_, weights) = run_attention(&x, &set, 4);
        for head in weights {
            for row in head.chunks(l) {
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }
}
