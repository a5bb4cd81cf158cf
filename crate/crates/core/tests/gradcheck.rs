//! Central finite-difference checks for every differentiable operation.
//!
//! The oracle perturbs each input entry by ±h and compares the resulting
//! slope of a scalar objective against the analytic gradient from the
//! tape. It never touches the backward implementations it verifies.

use vefusion_core::rng::Rng;
use vefusion_core::tensor::{multi_head_attention, AttentionVars, Graph, ParamSet, Tensor};

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

/// Scalar objective: weighted sum of the output values, with fixed
/// pseudo-random weights so every output entry influences the loss.
fn weighted_sum(g: &mut Graph<f64>, out: vefusion_core::tensor::Var) -> vefusion_core::tensor::Var {
    let n = g.data(out).len();
    let weights: Vec<f64> = (0..n).map(|i| 0.37 + 0.11 * (i as f64).sin()).collect();
    let (r, c) = match g.shape(out) {
        [c] => (1usize, *c),
        [r, c] => (*r, *c),
        s => panic!("unexpected shape {s:?}"),
    };
    let w = g.leaf(Tensor::new(vec![r, c], weights));
    // reshape rank-1 outputs by treating them as [1, c]
    let prod = g.mul_elem(out, w).unwrap_or_else(|_| {
        panic!("weighted_sum shape mismatch");
    });
    // sum via ones matmul: [1,r] x [r,c] x [c,1]
    let ones_left = g.leaf(Tensor::new(vec![1, r], vec![1.0; r]));
    let ones_right = g.leaf(Tensor::new(vec![c, 1], vec![1.0; c]));
    let s = g.matmul(ones_left, prod).unwrap();
    g.matmul(s, ones_right).unwrap()
}

/// Run forward under `build`, take gradient of the weighted-sum objective
/// w.r.t. the tracked input, and compare against central differences.
fn check_unary(
    input: Tensor<f64>,
    build: impl Fn(&mut Graph<f64>, vefusion_core::tensor::Var) -> vefusion_core::tensor::Var,
) {
    let eval = |t: &Tensor<f64>| -> f64 {
        let mut g = Graph::new();
        let x = g.leaf(t.clone());
        let y = build(&mut g, x);
        let loss = weighted_sum(&mut g, y);
        g.data(loss)[0]
    };

    let mut g = Graph::new();
    let x = g.tracked_leaf(input.clone());
    let y = build(&mut g, x);
    let loss = weighted_sum(&mut g, y);
    g.backward(loss);
    let analytic = g.grad_of(x).expect("gradient must flow to tracked leaf").to_vec();

    for i in 0..input.numel() {
        let mut plus = input.clone();
        plus.data_mut()[i] += H;
        let mut minus = input.clone();
        minus.data_mut()[i] -= H;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
        let denom = numeric.abs().max(analytic[i].abs()).max(1.0);
        let rel = (numeric - analytic[i]).abs() / denom;
        assert!(
            rel < REL_TOL,
            "entry {i}: analytic {} vs numeric {} (rel {rel:.2e})",
            analytic[i],
            numeric
        );
    }
}

fn random_tensor(shape: Vec<usize>, rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect())
}

#[test]
fn matmul_gradients_both_sides() {
    let mut rng = Rng::new(101);
    let a = random_tensor(vec![3, 4], &mut rng);
    let b = random_tensor(vec![4, 2], &mut rng);

    // left input
    let b_fixed = b.clone();
    check_unary(a.clone(), move |g, x| {
        let bv = g.leaf(b_fixed.clone());
        g.matmul(x, bv).unwrap()
    });
    // right input
    let a_fixed = a;
    check_unary(b, move |g, x| {
        let av = g.leaf(a_fixed.clone());
        g.matmul(av, x).unwrap()
    });
}

#[test]
fn softmax_gradient() {
    let mut rng = Rng::new(102);
    let x = random_tensor(vec![3, 5], &mut rng);
    check_unary(x, |g, x| g.softmax_rows(x).unwrap());
}

#[test]
fn layer_norm_gradients_all_inputs() {
    let mut rng = Rng::new(103);
    let x = random_tensor(vec![4, 6], &mut rng);
    let gain = random_tensor(vec![6], &mut rng);
    let bias = random_tensor(vec![6], &mut rng);

    let (gc, bc) = (gain.clone(), bias.clone());
    check_unary(x.clone(), move |g, x| {
        let gv = g.leaf(gc.clone());
        let bv = g.leaf(bc.clone());
        g.layer_norm(x, gv, bv, 1e-5).unwrap()
    });
    let (xc, bc) = (x.clone(), bias.clone());
    check_unary(gain.clone(), move |g, gv| {
        let xv = g.leaf(xc.clone());
        let bv = g.leaf(bc.clone());
        g.layer_norm(xv, gv, bv, 1e-5).unwrap()
    });
    let (xc, gc) = (x, gain);
    check_unary(bias, move |g, bv| {
        let xv = g.leaf(xc.clone());
        let gv = g.leaf(gc.clone());
        g.layer_norm(xv, gv, bv, 1e-5).unwrap()
    });
}

#[test]
fn gelu_tanh_scale_add_sub_mul_gradients() {
    let mut rng = Rng::new(104);
    let x = random_tensor(vec![2, 7], &mut rng);
    check_unary(x.clone(), |g, x| g.gelu(x));
    check_unary(x.clone(), |g, x| g.tanh(x));
    check_unary(x.clone(), |g, x| g.scale(x, -1.7));

    let other = random_tensor(vec![2, 7], &mut rng);
    let oc = other.clone();
    check_unary(x.clone(), move |g, x| {
        let o = g.leaf(oc.clone());
        g.add(x, o).unwrap()
    });
    let oc = other.clone();
    check_unary(x.clone(), move |g, x| {
        let o = g.leaf(oc.clone());
        g.sub(x, o).unwrap()
    });
    let oc = other;
    check_unary(x, move |g, x| {
        let o = g.leaf(oc.clone());
        g.mul_elem(x, o).unwrap()
    });
}

#[test]
fn add_row_vec_gradients() {
    let mut rng = Rng::new(105);
    let x = random_tensor(vec![3, 4], &mut rng);
    let v = random_tensor(vec![4], &mut rng);
    let vc = v.clone();
    check_unary(x.clone(), move |g, x| {
        let vv = g.leaf(vc.clone());
        g.add_row_vec(x, vv).unwrap()
    });
    let xc = x;
    check_unary(v, move |g, vv| {
        let xv = g.leaf(xc.clone());
        g.add_row_vec(xv, vv).unwrap()
    });
}

#[test]
fn gather_concat_narrow_transpose_gradients() {
    let mut rng = Rng::new(106);
    let table = random_tensor(vec![5, 3], &mut rng);
    check_unary(table, |g, t| g.gather_rows(t, &[4, 0, 0, 2]).unwrap());

    let x = random_tensor(vec![4, 6], &mut rng);
    check_unary(x.clone(), |g, x| g.narrow_rows(x, 1, 2).unwrap());
    check_unary(x.clone(), |g, x| g.narrow_cols(x, 2, 3).unwrap());
    check_unary(x.clone(), |g, x| g.transpose(x));
    check_unary(x.clone(), |g, x| {
        let a = g.narrow_rows(x, 0, 2).unwrap();
        let b = g.narrow_rows(x, 2, 2).unwrap();
        g.concat_rows(&[a, b]).unwrap()
    });
    check_unary(x, |g, x| {
        let a = g.narrow_cols(x, 0, 2).unwrap();
        let b = g.narrow_cols(x, 2, 4).unwrap();
        g.concat_cols(&[b, a]).unwrap()
    });
}

#[test]
fn dropout_gradient_with_fixed_mask() {
    let mut rng = Rng::new(107);
    let x = random_tensor(vec![3, 4], &mut rng);
    let keep: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
    let kc = keep;
    check_unary(x, move |g, x| g.dropout(x, kc.clone(), 0.9).unwrap());
}

#[test]
fn fused_linear_gradients_all_inputs() {
    let mut rng = Rng::new(111);
    let x = random_tensor(vec![3, 4], &mut rng);
    let w = random_tensor(vec![4, 5], &mut rng);
    let b = random_tensor(vec![5], &mut rng);

    let (wc, bc) = (w.clone(), b.clone());
    check_unary(x.clone(), move |g, x| {
        let wv = g.leaf(wc.clone());
        let bv = g.leaf(bc.clone());
        g.linear(x, wv, bv).unwrap()
    });
    let (xc, bc) = (x.clone(), b.clone());
    check_unary(w.clone(), move |g, wv| {
        let xv = g.leaf(xc.clone());
        let bv = g.leaf(bc.clone());
        g.linear(xv, wv, bv).unwrap()
    });
    let (xc, wc) = (x, w);
    check_unary(b, move |g, bv| {
        let xv = g.leaf(xc.clone());
        let wv = g.leaf(wc.clone());
        g.linear(xv, wv, bv).unwrap()
    });
}

#[test]
fn fused_attention_gradients_all_inputs() {
    let mut rng = Rng::new(112);
    let (l, d, heads) = (4, 6, 2);
    let q = random_tensor(vec![l, d], &mut rng);
    let k = random_tensor(vec![l, d], &mut rng);
    let v = random_tensor(vec![l, d], &mut rng);

    let (kc, vc) = (k.clone(), v.clone());
    check_unary(q.clone(), move |g, qv| {
        let kv = g.leaf(kc.clone());
        let vv = g.leaf(vc.clone());
        g.attention(qv, kv, vv, heads).unwrap()
    });
    let (qc, vc) = (q.clone(), v.clone());
    check_unary(k.clone(), move |g, kv| {
        let qv = g.leaf(qc.clone());
        let vv = g.leaf(vc.clone());
        g.attention(qv, kv, vv, heads).unwrap()
    });
    let (qc, kc) = (q, k);
    check_unary(v, move |g, vv| {
        let qv = g.leaf(qc.clone());
        let kv = g.leaf(kc.clone());
        g.attention(qv, kv, vv, heads).unwrap()
    });
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut rng = Rng::new(108);
    let logits = random_tensor(vec![3, 5], &mut rng);
    let targets = [2usize, 0, 4];

    let mut g = Graph::new();
    let x = g.tracked_leaf(logits.clone());
    let loss = g.cross_entropy(x, &targets).unwrap();
    g.backward(loss);
    let analytic = g.grad_of(x).unwrap().to_vec();

    // analytic formula check
    for (i, row) in logits.data().chunks(5).enumerate() {
        let mut p = row.to_vec();
        let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = p.iter().map(|v| (v - m).exp()).sum();
        for v in p.iter_mut() {
            *v = (*v - m).exp() / s;
        }
        for j in 0..5 {
            let onehot = if targets[i] == j { 1.0 } else { 0.0 };
            let expect = (p[j] - onehot) / 3.0;
            assert!((analytic[i * 5 + j] - expect).abs() < 1e-12);
        }
    }

    // finite differences
    let eval = |t: &Tensor<f64>| {
        let mut g = Graph::new();
        let x = g.leaf(t.clone());
        let loss = g.cross_entropy(x, &targets).unwrap();
        g.data(loss)[0]
    };
    for i in 0..logits.numel() {
        let mut plus = logits.clone();
        plus.data_mut()[i] += H;
        let mut minus = logits.clone();
        minus.data_mut()[i] -= H;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
        let denom = numeric.abs().max(analytic[i].abs()).max(1.0);
        assert!((numeric - analytic[i]).abs() / denom < REL_TOL);
    }
}

#[test]
fn multi_head_attention_gradient_through_params() {
    let mut rng = Rng::new(109);
    let (l, d, heads) = (3, 4, 2);
    let x = random_tensor(vec![l, d], &mut rng);

    let names = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"];
    let make_params = |rng: &mut Rng| {
        let mut set = ParamSet::<f64>::new();
        for n in names {
            let t = if n.starts_with('w') {
                random_tensor(vec![d, d], rng)
            } else {
                random_tensor(vec![d], rng)
            };
            set.add(n, t);
        }
        set
    };
    let params = make_params(&mut rng);

    let run = |set: &ParamSet<f64>| -> (f64, Vec<f64>, usize) {
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
        let (out, _weights) = multi_head_attention(&mut g, xv, heads, &vars).unwrap();
        let loss = weighted_sum(&mut g, out);
        g.backward(loss);
        let mut grads = ParamSet::clone(set);
        grads.zero_grads();
        g.accumulate_param_grads(&mut grads);
        (g.data(loss)[0], grads.flat_grads(), grads.total_values())
    };

    let (_, analytic, total) = run(&params);
    assert_eq!(total, analytic.len());

    // finite differences over every parameter entry
    let mut flat_index = 0;
    for name in names {
        let id = params.id(name).unwrap();
        let n = params.get(id).value.numel();
        for i in 0..n {
            let mut plus = params.clone();
            plus.get_mut(id).value.data_mut()[i] += H;
            let mut minus = params.clone();
            minus.get_mut(id).value.data_mut()[i] -= H;
            let numeric = (run(&plus).0 - run(&minus).0) / (2.0 * H);
            let a = analytic[flat_index + i];
            let denom = numeric.abs().max(a.abs()).max(1.0);
            assert!(
                (numeric - a).abs() / denom < REL_TOL,
                "{name}[{i}]: analytic {a} vs numeric {numeric}"
            );
        }
        flat_index += n;
    }
}

#[test]
fn untracked_leaves_receive_no_gradient() {
    let mut rng = Rng::new(110);
    let x = random_tensor(vec![2, 3], &mut rng);
    let w = random_tensor(vec![3, 2], &mut rng);

    let mut g = Graph::new();
    let xv = g.leaf(x); // frozen input, e.g. vision-encoder features
    let wv = g.tracked_leaf(w);
    let y = g.matmul(xv, wv).unwrap();
    let loss = weighted_sum(&mut g, y);
    g.backward(loss);

    assert!(g.grad_of(xv).is_none(), "frozen leaf must accumulate nothing");
    assert!(g.grad_of(wv).is_some());
}
