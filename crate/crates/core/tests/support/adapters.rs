//! Merge equivalence, step-0 transparency and base immutability checks,
//! shared with the acceptance suite.

use nphd_core::corpus::make_synthetic_corpus;
use nphd_core::lora::{BaseLinear, BaseWeight, BiasMode, ForwardMode, LoraAdapter, LoraConfig, Projection};
use nphd_core::model::{ModelConfig, ModelInput, Seq2SeqModel};
use nphd_core::numerics::Tensor;
use nphd_core::quant::{QuantScheme, QuantizedMatrix};
use nphd_core::tokenizer::train_tokenizer;
use nphd_core::trainer::{finetune, EvalStrategy, NoHook, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn random_adapter(rng: &mut ChaCha8Rng, quant: Option<QuantScheme>) -> LoraAdapter<f32> {
    let (d_in, d_out, r) = (24, 16, 4);
    let w = Tensor::from_fn(d_out, d_in, |_, _| rng.gen_range(-0.5f32..0.5));
    let bias = Tensor::new(vec![d_out], (0..d_out).map(|_| rng.gen_range(-0.1f32..0.1)).collect()).unwrap();
    let weight = match quant {
        None => BaseWeight::Dense(Arc::new(w)),
        Some(s) => BaseWeight::Quantized(Arc::new(QuantizedMatrix::quantize(&w, s, 8).unwrap())),
    };
    let base = BaseLinear { weight, bias: Some(Arc::new(bias)) };
    let cfg = LoraConfig { r, alpha: 8.0, ..LoraConfig::default() };
    let mut ad = LoraAdapter::new(base, &cfg, rng).unwrap();
    ad.set_param("lora_b", Tensor::from_fn(d_out, r, |_, _| rng.gen_range(-0.3f32..0.3))).unwrap();
    ad
}

/// Largest `|merged·x + b − adapter(x)|` over `inputs` random vectors for
/// a dense base and each quantized scheme.
pub fn merge_report(inputs: usize) -> Vec<(&'static str, f64)> {
    let cases: [(&'static str, Option<QuantScheme>); 4] = [
        ("dense", None),
        ("int8", Some(QuantScheme::Int8Row)),
        ("int4", Some(QuantScheme::Int4Block)),
        ("nf4", Some(QuantScheme::Nf4Block)),
    ];
    cases
        .iter()
        .map(|(name, q)| {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let ad = random_adapter(&mut rng, *q);
            let (w, b) = ad.merge().unwrap();
            let b = b.unwrap();
            let mut worst = 0.0f64;
            for _ in 0..inputs {
                let x = Tensor::from_fn(1, w.cols(), |_, _| rng.gen_range(-1.0f32..1.0));
                let y = ad.forward(&x, ForwardMode::EVAL).unwrap();
                let merged = x.matmul(&w.transpose()).unwrap();
                for j in 0..w.rows() {
                    let want = merged.at(0, j) + b.data()[j];
                    worst = worst.max((want - y.at(0, j)).abs() as f64);
                }
            }
            (*name, worst)
        })
        .collect()
}

pub struct FrozenReport {
    /// Adapted-model logits bit-equal to base logits before training.
    pub step0_exact: bool,
    pub steps: usize,
    /// Base bytes identical after training.
    pub base_unchanged: bool,
    /// Adapters actually moved.
    pub adapters_moved: bool,
}

/// Default toy model, optionally with a quantized base: compares logits
/// before and after attaching adapters, then trains for `steps` steps and
/// byte-compares every frozen tensor.
pub fn frozen_report(steps: usize, quant: Option<QuantScheme>) -> FrozenReport {
    let recs = make_synthetic_corpus(10, 5);
    let texts: Vec<&str> = recs.iter().flat_map(|r| [r.headline.as_str(), r.body.as_str()]).collect();
    let tok = train_tokenizer(&texts, 300, "सारांश: ").unwrap();
    let cfg = ModelConfig { vocab_size: tok.vocab_size(), ..ModelConfig::default() };
    let mut model: Seq2SeqModel<f32> = Seq2SeqModel::new(cfg).unwrap();
    if let Some(s) = quant {
        model.quantize_base(s, 64).unwrap();
    }
    let train: Vec<_> = recs.iter().map(|r| tok.encode_example(&r.body, &r.headline, 24, 8)).collect();
    let src = vec![train[0].input_ids.clone(), train[1].input_ids.clone()];
    let mask: Vec<Vec<u8>> = src.iter().map(|s| vec![1u8; s.len()]).collect();
    let dec = vec![vec![2u32, 5, 6, 7], vec![2, 8, 9, 10]];
    let input = ModelInput { input_ids: &src, attention_mask: &mask, decoder_input_ids: &dec };
    let before = model.forward(input, ForwardMode::EVAL).unwrap();
    let bytes_before = model.base_tensors();
    let lcfg = LoraConfig {
        bias_mode: BiasMode::LoraOnly,
        target_projections: vec![Projection::Query, Projection::Value, Projection::FfnIn],
        ..LoraConfig::default()
    };
    model.attach_lora(&lcfg, 9).unwrap();
    let after = model.forward(input, ForwardMode::EVAL).unwrap();
    let step0_exact = before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    let params_before = model.trainable_params();
    // Batch size 1 over 10 examples: one epoch is 10 optimizer steps.
    let tc = TrainConfig {
        batch_size: 1,
        epochs: steps.div_ceil(train.len()),
        eval_strategy: EvalStrategy::No,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    finetune(&mut model, &tok, &train, &[], &tc, &mut NoHook).unwrap();
    let adapters_moved = model.trainable_params() != params_before;
    FrozenReport {
        step0_exact,
        steps: tc.total_steps(train.len()),
        base_unchanged: model.base_tensors() == bytes_before,
        adapters_moved,
    }
}
