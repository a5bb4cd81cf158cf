//! Manual timing probe (ignored by default): run with
//! `cargo test -p vefusion-core --test bench_probe -- --ignored --nocapture`

use std::time::Instant;

use vefusion_core::encoders::{FrozenEncoders, VeKind};
use vefusion_core::model::{ForwardOptions, FusionModel};
use vefusion_core::scene::AttributeSpace;
use vefusion_core::tensor::{gemm_acc, gemm_nt_acc, Graph};
use vefusion_core::train::{model_config_for, Corpus, EncodedCorpus, ExperimentConfig};

#[test]
#[ignore]
fn timing_breakdown() {
    // raw gemm throughput at model-typical sizes
    let (m, k, n) = (44, 64, 64);
    let a = vec![1.0f64; m * k];
    let b = vec![1.0f64; k * n];
    let mut c = vec![0.0f64; m * n];
    let reps = 20_000;
    let t0 = Instant::now();
    for _ in 0..reps {
        gemm_acc(&a, &b, m, k, n, &mut c);
    }
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "gemm_acc {m}x{k}x{n}: {:.2} GF/s",
        (2.0 * (m * k * n * reps) as f64) / dt / 1e9
    );
    let t0 = Instant::now();
    for _ in 0..reps {
        gemm_nt_acc(&a, &b, m, k, n, &mut c);
    }
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "gemm_nt_acc {m}x{k}x{n}: {:.2} GF/s",
        (2.0 * (m * k * n * reps) as f64) / dt / 1e9
    );

    // end-to-end single-example forward / forward+backward
    let cfg = ExperimentConfig {
        train_examples: 32,
        val_examples: 8,
        test_examples: 8,
        ..ExperimentConfig::default()
    };
    let corpus = Corpus::generate(&cfg).unwrap();
    let encoders = FrozenEncoders::new(AttributeSpace::default(), cfg.ve_config.clone()).unwrap();
    let encoded = EncodedCorpus::build(&corpus, &encoders, &[VeKind::Region]).unwrap();
    let mc = model_config_for(&cfg, &[VeKind::Region], corpus.vocab.len());
    let model = FusionModel::init(mc, 1, &cfg.ve_config).unwrap();
    let ex = &corpus.train[0];
    let sets = encoded.sets_for(ex.image_scene_id, &model.config.active_ves).unwrap();

    let reps = 300;
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let out = model
            .forward(&mut g, &ex.text, &sets, ForwardOptions::default())
            .unwrap();
        std::hint::black_box(g.data(out.logits)[0]);
    }
    println!("forward only: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / reps as f64);

    let mut flat = vec![0.0; model.params.total_values()];
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let out = model
            .forward(&mut g, &ex.text, &sets, ForwardOptions::default())
            .unwrap();
        let loss = model.task_loss(&mut g, out.logits, ex.label).unwrap();
        g.backward(loss);
        g.accumulate_param_grads_flat(&model.params, &mut flat);
    }
    println!(
        "forward+backward+accumulate: {:.2} ms",
        t0.elapsed().as_secs_f64() * 1e3 / reps as f64
    );

    // in-situ phase breakdown over one example, hot graph
    {
        let mut g = Graph::new();
        let reps = 300;
        let mut t_fwd = 0.0;
        let mut t_loss = 0.0;
        let mut t_bwd = 0.0;
        let mut t_acc = 0.0;
        let mut flat2 = vec![0.0; model.params.total_values()];
        for _ in 0..reps {
            g.clear();
            let t = Instant::now();
            let out = model
                .forward(&mut g, &ex.text, &sets, ForwardOptions::default())
                .unwrap();
            t_fwd += t.elapsed().as_secs_f64();
            let t = Instant::now();
            let loss = model.task_loss(&mut g, out.logits, ex.label).unwrap();
            t_loss += t.elapsed().as_secs_f64();
            let t = Instant::now();
            g.backward(loss);
            t_bwd += t.elapsed().as_secs_f64();
            let t = Instant::now();
            g.accumulate_param_grads_flat(&model.params, &mut flat2);
            t_acc += t.elapsed().as_secs_f64();
        }
        let scale = 1e3 / reps as f64;
        println!(
            "hot-graph phases: fwd {:.2} ms, loss {:.3} ms, bwd {:.2} ms, acc {:.2} ms",
            t_fwd * scale,
            t_loss * scale,
            t_bwd * scale,
            t_acc * scale
        );
    }

    // per-op costs at model-typical shapes
    use vefusion_core::tensor::Tensor;
    let reps = 5_000;
    let x_ffn = Tensor::new(vec![44, 256], vec![0.3; 44 * 256]);
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(x_ffn.clone());
    let t0 = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(g.gelu(xv));
    }
    println!("gelu [44,256]: {:.1} us", t0.elapsed().as_secs_f64() * 1e6 / reps as f64);

    let x_seq = Tensor::new(vec![44, 64], vec![0.3; 44 * 64]);
    let gain = Tensor::new(vec![64], vec![1.0; 64]);
    let bias = Tensor::new(vec![64], vec![0.0; 64]);
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(x_seq.clone());
    let gv = g.leaf(gain);
    let bv = g.leaf(bias);
    let t0 = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(g.layer_norm(xv, gv, bv, 1e-5).unwrap());
    }
    println!("layer_norm [44,64]: {:.1} us", t0.elapsed().as_secs_f64() * 1e6 / reps as f64);

    let q = Tensor::new(vec![44, 64], vec![0.1; 44 * 64]);
    let mut g = Graph::<f64>::new();
    let qv = g.leaf(q.clone());
    let kv = g.leaf(q.clone());
    let vv = g.leaf(q.clone());
    let t0 = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(g.attention(qv, kv, vv, 4).unwrap());
    }
    println!("attention fwd [44,64]x4h: {:.1} us", t0.elapsed().as_secs_f64() * 1e6 / reps as f64);

    let w = Tensor::new(vec![64, 64], vec![0.05; 64 * 64]);
    let b = Tensor::new(vec![64], vec![0.0; 64]);
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(x_seq);
    let wv = g.leaf(w);
    let bv = g.leaf(b);
    let t0 = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(g.linear(xv, wv, bv).unwrap());
    }
    println!("linear [44,64]x[64,64]: {:.1} us", t0.elapsed().as_secs_f64() * 1e6 / reps as f64);

    // parameter injection cost for the whole model
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::<f64>::new();
        for (id, _) in model.params.iter() {
            std::hint::black_box(g.param(&model.params, id));
        }
    }
    println!("inject all params: {:.1} us", t0.elapsed().as_secs_f64() * 1e6 / reps as f64);
}
