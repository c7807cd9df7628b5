//! Overfit smoke fixture: the default toy model memorizes 32 synthetic
//! headline pairs.

use nphd_core::corpus::make_synthetic_corpus;
use nphd_core::lora::LoraConfig;
use nphd_core::model::{ModelConfig, Seq2SeqModel};
use nphd_core::tokenizer::{train_tokenizer, EncodedExample, SubwordTokenizer, DEFAULT_TASK_PREFIX, MAX_TARGET_LEN};
use nphd_core::trainer::{dataset_loss, finetune, greedy_config, EpochHook, EpochReport, EvalStrategy, LrSchedule, TrainConfig};

pub const PAIRS: usize = 32;
pub const STEPS: usize = 200;
pub const CORPUS_SEED: u64 = 11;
pub const VOCAB: usize = 512;
/// Sources are cut to 64 ids; headlines are always within the first 12
/// body words, so the answer survives truncation.
pub const SOURCE_LEN: usize = 64;
pub const BATCH: usize = 16;

pub struct OverfitOutcome {
    /// Eval-mode mean loss over the training pairs after training.
    pub loss: f64,
    pub exact: usize,
    /// Batch loss after every optimizer step.
    pub curve: Vec<f64>,
    pub seconds: f64,
}

#[derive(Default)]
struct Curve(Vec<f64>);

impl EpochHook<f32> for Curve {
    fn on_epoch_end(&mut self, _: &mut EpochReport, _: &Seq2SeqModel<f32>) -> Result<(), String> {
        Ok(())
    }

    fn on_step(&mut self, _: usize, loss: f64) {
        self.0.push(loss);
    }
}

pub fn fixture() -> (SubwordTokenizer, Vec<EncodedExample>) {
    let recs = make_synthetic_corpus(PAIRS, CORPUS_SEED);
    let texts: Vec<&str> = recs.iter().flat_map(|r| [r.headline.as_str(), r.body.as_str()]).collect();
    let tok = train_tokenizer(&texts, VOCAB, DEFAULT_TASK_PREFIX).unwrap();
    let pairs = recs
        .iter()
        .map(|r| tok.encode_example(&r.body, &r.headline, SOURCE_LEN, MAX_TARGET_LEN))
        .collect();
    (tok, pairs)
}

pub fn train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        batch_size: BATCH,
        epochs: STEPS / PAIRS.div_ceil(BATCH),
        eval_strategy: EvalStrategy::No,
        lr_schedule: LrSchedule::Constant,
        ..TrainConfig::default()
    }
}

pub fn run(seed: u64) -> OverfitOutcome {
    let start = std::time::Instant::now();
    let (tok, pairs) = fixture();
    let mut model: Seq2SeqModel<f32> = Seq2SeqModel::new(ModelConfig {
        vocab_size: tok.vocab_size(),
        ..ModelConfig::default()
    })
    .unwrap();
    model
        .attach_lora(&LoraConfig { dropout: 0.0, ..LoraConfig::default() }, seed)
        .unwrap();
    let config = TrainConfig { seed, ..train_config() };
    assert_eq!(config.total_steps(PAIRS), STEPS);
    let mut curve = Curve::default();
    finetune(&mut model, &tok, &pairs, &[], &config, &mut curve).unwrap();
    let gen = greedy_config(&tok, MAX_TARGET_LEN);
    let exact = pairs
        .iter()
        .filter(|p| model.generate(&p.input_ids, &gen).unwrap() == p.label_ids)
        .count();
    OverfitOutcome {
        loss: dataset_loss(&model, &pairs, &tok, BATCH).unwrap(),
        exact,
        curve: curve.0,
        seconds: start.elapsed().as_secs_f64(),
    }
}
