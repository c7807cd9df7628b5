//! Central finite-difference oracle for the autodiff kernels, the LoRA
//! adapter and the full model loss. Shared by the core tests and the
//! acceptance suite.

use nphd_core::lora::{BaseLinear, BiasMode, ForwardMode, LoraAdapter, LoraConfig, Projection};
use nphd_core::model::{ModelConfig, ModelInput, Seq2SeqModel};
use nphd_core::numerics::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::sync::Arc;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

pub fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

/// Builds the graph with every input as a named parameter, reduces the
/// output through a fixed random projection, and compares each analytic
/// partial derivative with `(f(x+h) - f(x-h)) / 2h`. Returns the largest
/// relative error.
pub fn check(inputs: &[Tensor<f64>], build: &Build, seed: u64) -> f64 {
    let loss_of = |vals: &[Tensor<f64>]| -> (f64, BTreeMap<String, Tensor<f64>>) {
        let mut g = Graph::new().with_finite_checks(true);
        let vars: Vec<Var> = vals
            .iter()
            .enumerate()
            .map(|(i, t)| g.param(format!("p{i}"), t.clone()))
            .collect();
        let y = build(&mut g, &vars);
        let shape = g.value(y).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        let numel: usize = shape.iter().product();
        let proj = Tensor::new(shape, (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let p = g.constant(proj);
        let prod = g.mul(y, p).unwrap();
        let loss = g.sum(prod).unwrap();
        let value = g.value(loss).data()[0];
        (value, g.backward(loss).unwrap())
    };
    let (_, grads) = loss_of(inputs);
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(&format!("p{i}"));
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * STEP);
            let a = analytic.map_or(0.0, |g| g.data()[j]);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

/// Max relative error per kernel over `instances` random small cases.
pub fn kernel_report(instances: u64) -> Vec<(&'static str, f64)> {
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let mut run = |name: &'static str, case: &dyn Fn(&mut ChaCha8Rng, u64) -> f64| {
        let worst = (0..instances)
            .map(|s| case(&mut ChaCha8Rng::seed_from_u64(s * 7919 + name.len() as u64), s))
            .fold(0.0f64, f64::max);
        out.push((name, worst));
    };
    let dims = |rng: &mut ChaCha8Rng| (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));

    run("matmul", &|rng, s| {
        let (m, k, n) = dims(rng);
        check(&[rand_tensor(rng, m, k), rand_tensor(rng, k, n)], &|g, v| g.matmul(v[0], v[1]).unwrap(), s)
    });
    run("matmul_nt", &|rng, s| {
        let (m, k, n) = dims(rng);
        check(&[rand_tensor(rng, m, k), rand_tensor(rng, n, k)], &|g, v| g.matmul_nt(v[0], v[1]).unwrap(), s)
    });
    run("frozen_linear", &|rng, s| {
        let (m, k, n) = dims(rng);
        let w = Arc::new(rand_tensor(rng, n, k));
        check(&[rand_tensor(rng, m, k)], &move |g, v| g.frozen_linear(v[0], w.clone()).unwrap(), s)
    });
    run("add", &|rng, s| {
        let (m, n, _) = dims(rng);
        check(&[rand_tensor(rng, m, n), rand_tensor(rng, m, n)], &|g, v| g.add(v[0], v[1]).unwrap(), s)
    });
    run("add_row", &|rng, s| {
        let (m, n, _) = dims(rng);
        check(&[rand_tensor(rng, m, n), rand_tensor(rng, 1, n)], &|g, v| g.add_row(v[0], v[1]).unwrap(), s)
    });
    run("mul", &|rng, s| {
        let (m, n, _) = dims(rng);
        check(&[rand_tensor(rng, m, n), rand_tensor(rng, m, n)], &|g, v| g.mul(v[0], v[1]).unwrap(), s)
    });
    run("scale", &|rng, s| {
        let (m, n, _) = dims(rng);
        let c: f64 = rng.gen_range(-2.0..2.0);
        check(&[rand_tensor(rng, m, n)], &move |g, v| g.scale(v[0], c).unwrap(), s)
    });
    run("embed", &|rng, s| {
        let (rows, d, _) = dims(rng);
        let ids: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..rows)).collect();
        check(&[rand_tensor(rng, rows, d)], &move |g, v| g.embed(v[0], &ids).unwrap(), s)
    });
    run("softmax", &|rng, s| {
        let (m, n, _) = dims(rng);
        let n = n + 1;
        // Keep at least one live entry per row; one row may be fully masked.
        let mut mask: Vec<bool> = (0..m * n).map(|i| i % n != 0 && rng.gen_bool(0.3)).collect();
        if m > 1 && rng.gen_bool(0.5) {
            mask[..n].iter_mut().for_each(|b| *b = true);
        }
        let x = rand_tensor(rng, m, n).scale(3.0);
        check(&[x], &move |g, v| g.softmax(v[0], Some(&mask)).unwrap(), s)
    });
    run("layer_norm", &|rng, s| {
        let (m, n, _) = dims(rng);
        // Rows with near-zero variance make the third derivative blow up and
        // the central difference itself inaccurate, so rows are spread out.
        let n = n + 2;
        let x = Tensor::from_fn(m, n, |_, j| j as f64 + rng.gen_range(-0.4..0.4));
        check(
            &[x, rand_tensor(rng, 1, n), rand_tensor(rng, 1, n)],
            &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
            s,
        )
    });
    run("dropout", &|rng, s| {
        let (m, n, _) = dims(rng);
        check(&[rand_tensor(rng, m, n)], &move |g, v| g.dropout(v[0], 0.3, s, 5, 2, true).unwrap(), s)
    });
    run("gelu", &|rng, s| {
        let (m, n, _) = dims(rng);
        check(&[rand_tensor(rng, m, n).scale(3.0)], &|g, v| g.gelu(v[0]).unwrap(), s)
    });
    run("slice", &|rng, s| {
        let (m, n, _) = dims(rng);
        let (r0, c0) = (rng.gen_range(0..m), rng.gen_range(0..n));
        let (rs, cs) = (rng.gen_range(1..=m - r0), rng.gen_range(1..=n - c0));
        check(&[rand_tensor(rng, m, n)], &move |g, v| g.slice(v[0], r0, rs, c0, cs).unwrap(), s)
    });
    run("concat_cols", &|rng, s| {
        let (m, a, b) = dims(rng);
        check(&[rand_tensor(rng, m, a), rand_tensor(rng, m, b)], &|g, v| g.concat_cols(v).unwrap(), s)
    });
    run("concat_rows", &|rng, s| {
        let (a, b, n) = dims(rng);
        check(&[rand_tensor(rng, a, n), rand_tensor(rng, b, n)], &|g, v| g.concat_rows(v).unwrap(), s)
    });
    run("cross_entropy", &|rng, s| {
        let (m, n, _) = dims(rng);
        let n = n + 1;
        let targets: Vec<i64> = (0..m)
            .map(|_| if rng.gen_bool(0.2) { -100 } else { rng.gen_range(0..n as i64) })
            .collect();
        check(&[rand_tensor(rng, m, n).scale(2.0)], &move |g, v| g.cross_entropy(v[0], &targets, -100).unwrap(), s)
    });
    run("sum", &|rng, s| {
        let (m, n, _) = dims(rng);
        check(&[rand_tensor(rng, m, n)], &|g, v| g.sum(v[0]).unwrap(), s)
    });
    out
}

/// Adapter gradients against finite differences of `sum(y ⊙ U)` over
/// A, B and the trainable bias, with adapter dropout active.
pub fn lora_report(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for s in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + s);
        let (d_in, d_out, r, n) = (rng.gen_range(2..6), rng.gen_range(2..6), rng.gen_range(1..4), rng.gen_range(1..4));
        let cfg = LoraConfig {
            r,
            alpha: 2.0 * r as f64,
            dropout: 0.25,
            bias_mode: BiasMode::LoraOnly,
            target_projections: vec![Projection::Query],
        };
        let base = BaseLinear::dense(rand_tensor(&mut rng, d_out, d_in), Some(rand_tensor(&mut rng, 1, d_out).reshape(vec![d_out]).unwrap()));
        let mut ad = LoraAdapter::new(base, &cfg, &mut rng).unwrap();
        // Non-zero B so every path carries gradient.
        ad.set_param("lora_b", rand_tensor(&mut rng, d_out, r)).unwrap();
        let x = rand_tensor(&mut rng, n, d_in);
        let u = rand_tensor(&mut rng, n, d_out);
        let mode = ForwardMode::train(s, 3);
        let grads = ad.backward(&x, &u, mode).unwrap();
        let objective = |ad: &LoraAdapter<f64>| -> f64 {
            let y = ad.forward(&x, mode).unwrap();
            y.data().iter().zip(u.data()).map(|(a, b)| a * b).sum()
        };
        for name in ["lora_a", "lora_b", "bias"] {
            let t = ad.params().into_iter().find(|(k, _)| *k == name).unwrap().1.clone();
            for j in 0..t.numel() {
                let mut plus = ad.clone();
                let mut tp = t.clone();
                tp.data_mut()[j] += STEP;
                plus.set_param(name, tp).unwrap();
                let mut minus = ad.clone();
                let mut tm = t.clone();
                tm.data_mut()[j] -= STEP;
                minus.set_param(name, tm).unwrap();
                let numeric = (objective(&plus) - objective(&minus)) / (2.0 * STEP);
                worst = worst.max(rel_err(grads[name].data()[j], numeric));
            }
        }
    }
    worst
}

/// Whole-model check: teacher-forced loss gradients of a tiny f64 model
/// with adapters on every projection, in eval mode, against finite
/// differences on a sample of adapter entries.
pub fn model_report(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for s in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + s);
        let cfg = ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            d_ffn: 12,
            dropout: 0.0,
            init_seed: s,
            ..ModelConfig::default()
        };
        let mut model: Seq2SeqModel<f64> = Seq2SeqModel::new(cfg).unwrap();
        let lcfg = LoraConfig {
            r: 2,
            alpha: 4.0,
            dropout: 0.0,
            bias_mode: BiasMode::All,
            target_projections: vec![
                Projection::Query,
                Projection::Key,
                Projection::Value,
                Projection::Output,
                Projection::FfnIn,
                Projection::FfnOut,
            ],
        };
        model.attach_lora(&lcfg, s).unwrap();
        for (name, t) in model.trainable_params() {
            let mut noisy = t.clone();
            noisy.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
            model.set_trainable(&name, noisy).unwrap();
        }
        let src = vec![vec![2u32, 5, 6, 7, 3], vec![2, 8, 3, 0, 0]];
        let mask = vec![vec![1u8, 1, 1, 1, 1], vec![1, 1, 1, 0, 0]];
        let dec = vec![vec![2u32, 4, 9], vec![2, 10, 0]];
        let labels = vec![vec![4i64, 9, 3], vec![10, 3, -100]];
        let loss_of = |m: &Seq2SeqModel<f64>| {
            let mut g = Graph::new();
            let l = m
                .loss_graph(
                    &mut g,
                    ModelInput { input_ids: &src, attention_mask: &mask, decoder_input_ids: &dec },
                    &labels,
                    -100,
                    ForwardMode::EVAL,
                )
                .unwrap();
            (g.value(l).data()[0], g.backward(l).unwrap())
        };
        let (_, grads) = loss_of(&model);
        let params = model.trainable_params();
        assert_eq!(grads.keys().collect::<Vec<_>>(), params.keys().collect::<Vec<_>>());
        for (name, t) in &params {
            for _ in 0..2 {
                let j = rng.gen_range(0..t.numel());
                let mut plus = model.clone();
                let mut tp = t.clone();
                tp.data_mut()[j] += STEP;
                plus.set_trainable(name, tp).unwrap();
                let mut minus = model.clone();
                let mut tm = t.clone();
                tm.data_mut()[j] -= STEP;
                minus.set_trainable(name, tm).unwrap();
                let numeric = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * STEP);
                worst = worst.max(rel_err(grads[name].data()[j], numeric));
            }
        }
    }
    worst
}
