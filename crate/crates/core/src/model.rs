//! Toy pre-norm encoder–decoder transformer.
//!
//! Learned positions, multi-head self and cross attention, GELU feed-forward
//! blocks and (by default) a single token embedding shared by encoder input,
//! decoder input and the output head. Every weight is frozen; training only
//! touches the LoRA adapters and trainable biases attached on top.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::lora::{
    BaseLinear, BaseWeight, BiasMode, ForwardMode, LoraAdapter, LoraConfig, LoraError, Projection,
};
use crate::numerics::{FrozenLinear, Graph, NumericsError, Real, Tensor, Var};
use crate::quant::{QuantError, QuantScheme, QuantizedMatrix};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ffn: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub tie_embeddings: bool,
    /// Seed for the frozen base weights.
    pub init_seed: u64,
    /// Standard deviation of token and position embeddings. Embeddings are
    /// tied to the output head, so this also sets the logit range.
    pub embed_init_std: f64,
    /// Projection weights are drawn with std `linear_init_gain / sqrt(d_in)`.
    pub linear_init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 128,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            d_ffn: 256,
            max_positions: 1024,
            dropout: 0.1,
            tie_embeddings: true,
            init_seed: 0,
            embed_init_std: 0.2,
            linear_init_gain: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("position {pos} exceeds max_positions {max}")]
    Position { pos: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenId { id: u32, vocab: usize },
    #[error("batch layout: {0}")]
    Batch(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

pub type Result<T, E = ModelError> = core::result::Result<T, E>;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_positions < 1024 {
            return Err(ModelError::Config(format!(
                "max_positions {} below the 1024-token input cap",
                self.max_positions
            )));
        }
        if self.vocab_size == 0 || self.d_ffn == 0 {
            return Err(ModelError::Config(String::from("vocab_size and d_ffn must be positive")));
        }
        if !(self.embed_init_std > 0.0 && self.linear_init_gain > 0.0) {
            return Err(ModelError::Config(String::from("init scales must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Closed-form count of every base parameter.
    pub fn base_parameter_count(&self) -> usize {
        let (d, f, v, p) = (self.d_model, self.d_ffn, self.vocab_size, self.max_positions);
        let linear = |i: usize, o: usize| i * o + o;
        let ln = 2 * d;
        let ffn = linear(d, f) + linear(f, d);
        let enc = 4 * linear(d, d) + 2 * ln + ffn;
        let dec = 8 * linear(d, d) + 3 * ln + ffn;
        let head = if self.tie_embeddings { 0 } else { v * d };
        v * d + 2 * p * d + self.n_encoder_layers * enc + self.n_decoder_layers * dec + 2 * ln + head
    }
}

/// A projection slot: frozen, frozen with a trainable bias, or adapted.
#[derive(Debug, Clone)]
pub enum Linear<F: Real> {
    Frozen {
        base: BaseLinear<F>,
        trainable_bias: Option<Tensor<F>>,
    },
    Adapted(LoraAdapter<F>),
}

impl<F: Real> Linear<F> {
    pub fn base(&self) -> &BaseLinear<F> {
        match self {
            Linear::Frozen { base, .. } => base,
            Linear::Adapted(a) => a.base(),
        }
    }

    fn forward(&self, g: &mut Graph<F>, x: Var, name: &str, site: u64, mode: ForwardMode) -> Result<Var> {
        match self {
            Linear::Adapted(adapter) => Ok(adapter.forward_graph(g, x, name, site, mode)?),
            Linear::Frozen {
                base,
                trainable_bias,
            } => {
                let y = g.frozen_linear(x, base.weight.as_frozen())?;
                let y = match (trainable_bias, &base.bias) {
                    (Some(b), _) => {
                        let bv = g.param(format!("{name}.bias"), b.clone());
                        g.add_row(y, bv)?
                    }
                    (None, Some(b0)) => {
                        let bv = g.constant((**b0).clone());
                        g.add_row(y, bv)?
                    }
                    (None, None) => y,
                };
                Ok(y)
            }
        }
    }

    fn params(&self) -> Vec<(&'static str, &Tensor<F>)> {
        match self {
            Linear::Adapted(a) => a.params(),
            Linear::Frozen {
                trainable_bias: Some(b),
                ..
            } => vec![("bias", b)],
            Linear::Frozen { .. } => Vec::new(),
        }
    }

    fn set_param(&mut self, local: &str, value: Tensor<F>) -> Result<()> {
        match self {
            Linear::Adapted(a) => Ok(a.set_param(local, value)?),
            Linear::Frozen {
                trainable_bias: Some(b),
                ..
            } if local == "bias" && b.shape() == value.shape() => {
                *b = value;
                Ok(())
            }
            _ => Err(ModelError::UnknownParam(String::from(local))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Norm<F: Real> {
    gain: Tensor<F>,
    shift: Tensor<F>,
}

impl<F: Real> Norm<F> {
    fn new(d: usize) -> Self {
        Self {
            gain: Tensor::full(&[d], F::one()),
            shift: Tensor::zeros(&[d]),
        }
    }

    fn forward(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let gain = g.constant(self.gain.clone());
        let shift = g.constant(self.shift.clone());
        Ok(g.layer_norm(x, gain, shift, F::of(LAYER_NORM_EPS))?)
    }
}

#[derive(Debug, Clone)]
struct Attention<F: Real> {
    q: Linear<F>,
    k: Linear<F>,
    v: Linear<F>,
    o: Linear<F>,
}

#[derive(Debug, Clone)]
struct FeedForward<F: Real> {
    fc_in: Linear<F>,
    fc_out: Linear<F>,
}

#[derive(Debug, Clone)]
struct EncoderLayer<F: Real> {
    ln_attn: Norm<F>,
    attn: Attention<F>,
    ln_ffn: Norm<F>,
    ffn: FeedForward<F>,
}

#[derive(Debug, Clone)]
struct DecoderLayer<F: Real> {
    ln_self: Norm<F>,
    self_attn: Attention<F>,
    ln_cross: Norm<F>,
    cross_attn: Attention<F>,
    ln_ffn: Norm<F>,
    ffn: FeedForward<F>,
}

/// Batch view handed to the model. All rows of a field share one length.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub input_ids: &'a [Vec<u32>],
    pub attention_mask: &'a [Vec<u8>],
    pub decoder_input_ids: &'a [Vec<u32>],
}

/// Dropout site counter; sites are numbered in forward order.
struct Sites(u64);

impl Sites {
    fn next(&mut self) -> u64 {
        self.0 += 1;
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Seq2SeqModel<F: Real> {
    config: ModelConfig,
    tok_emb: Arc<Tensor<F>>,
    enc_pos: Tensor<F>,
    dec_pos: Tensor<F>,
    encoder: Vec<EncoderLayer<F>>,
    enc_norm: Norm<F>,
    decoder: Vec<DecoderLayer<F>>,
    dec_norm: Norm<F>,
    lm_head: Option<Arc<Tensor<F>>>,
    lora: Option<LoraConfig>,
}

fn normal_matrix<F: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor<F> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(rows, cols, |_, _| F::of(normal.sample(rng)))
}

fn linear<F: Real>(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, gain: f64) -> Linear<F> {
    let std = gain / libm::sqrt(d_in as f64);
    Linear::Frozen {
        base: BaseLinear::dense(normal_matrix(rng, d_out, d_in, std), Some(Tensor::zeros(&[d_out]))),
        trainable_bias: None,
    }
}

fn attention<F: Real>(rng: &mut ChaCha8Rng, d: usize, gain: f64) -> Attention<F> {
    Attention {
        q: linear(rng, d, d, gain),
        k: linear(rng, d, d, gain),
        v: linear(rng, d, d, gain),
        o: linear(rng, d, d, gain),
    }
}

fn ffn<F: Real>(rng: &mut ChaCha8Rng, d: usize, f: usize, gain: f64) -> FeedForward<F> {
    FeedForward {
        fc_in: linear(rng, d, f, gain),
        fc_out: linear(rng, f, d, gain),
    }
}

impl<F: Real> Seq2SeqModel<F> {
    /// Builds the frozen base from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let (d, f, v, p) = (config.d_model, config.d_ffn, config.vocab_size, config.max_positions);
        let (es, gain) = (config.embed_init_std, config.linear_init_gain);
        let tok_emb = Arc::new(normal_matrix(&mut rng, v, d, es));
        let enc_pos = normal_matrix(&mut rng, p, d, es);
        let dec_pos = normal_matrix(&mut rng, p, d, es);
        let encoder = (0..config.n_encoder_layers)
            .map(|_| EncoderLayer {
                ln_attn: Norm::new(d),
                attn: attention(&mut rng, d, gain),
                ln_ffn: Norm::new(d),
                ffn: ffn(&mut rng, d, f, gain),
            })
            .collect();
        let decoder = (0..config.n_decoder_layers)
            .map(|_| DecoderLayer {
                ln_self: Norm::new(d),
                self_attn: attention(&mut rng, d, gain),
                ln_cross: Norm::new(d),
                cross_attn: attention(&mut rng, d, gain),
                ln_ffn: Norm::new(d),
                ffn: ffn(&mut rng, d, f, gain),
            })
            .collect();
        let lm_head = if config.tie_embeddings {
            None
        } else {
            Some(Arc::new(normal_matrix(&mut rng, v, d, es)))
        };
        Ok(Self {
            config,
            tok_emb,
            enc_pos,
            dec_pos,
            encoder,
            enc_norm: Norm::new(d),
            decoder,
            dec_norm: Norm::new(d),
            lm_head,
            lora: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn lora_config(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    /// Every projection slot with its dotted name, in a fixed order.
    pub fn linears(&self) -> Vec<(String, Projection, &Linear<F>)> {
        let mut out = Vec::new();
        fn attn<'a, F: Real>(out: &mut Vec<(String, Projection, &'a Linear<F>)>, pre: String, a: &'a Attention<F>) {
            out.push((format!("{pre}.q"), Projection::Query, &a.q));
            out.push((format!("{pre}.k"), Projection::Key, &a.k));
            out.push((format!("{pre}.v"), Projection::Value, &a.v));
            out.push((format!("{pre}.o"), Projection::Output, &a.o));
        }
        for (i, l) in self.encoder.iter().enumerate() {
            attn(&mut out, format!("enc.{i}.self_attn"), &l.attn);
            out.push((format!("enc.{i}.ffn.in"), Projection::FfnIn, &l.ffn.fc_in));
            out.push((format!("enc.{i}.ffn.out"), Projection::FfnOut, &l.ffn.fc_out));
        }
        for (i, l) in self.decoder.iter().enumerate() {
            attn(&mut out, format!("dec.{i}.self_attn"), &l.self_attn);
            attn(&mut out, format!("dec.{i}.cross_attn"), &l.cross_attn);
            out.push((format!("dec.{i}.ffn.in"), Projection::FfnIn, &l.ffn.fc_in));
            out.push((format!("dec.{i}.ffn.out"), Projection::FfnOut, &l.ffn.fc_out));
        }
        out
    }

    fn linears_mut(&mut self) -> Vec<(String, Projection, &mut Linear<F>)> {
        let mut out = Vec::new();
        fn attn<'a, F: Real>(out: &mut Vec<(String, Projection, &'a mut Linear<F>)>, pre: String, a: &'a mut Attention<F>) {
            out.push((format!("{pre}.q"), Projection::Query, &mut a.q));
            out.push((format!("{pre}.k"), Projection::Key, &mut a.k));
            out.push((format!("{pre}.v"), Projection::Value, &mut a.v));
            out.push((format!("{pre}.o"), Projection::Output, &mut a.o));
        }
        for (i, l) in self.encoder.iter_mut().enumerate() {
            attn(&mut out, format!("enc.{i}.self_attn"), &mut l.attn);
            out.push((format!("enc.{i}.ffn.in"), Projection::FfnIn, &mut l.ffn.fc_in));
            out.push((format!("enc.{i}.ffn.out"), Projection::FfnOut, &mut l.ffn.fc_out));
        }
        for (i, l) in self.decoder.iter_mut().enumerate() {
            attn(&mut out, format!("dec.{i}.self_attn"), &mut l.self_attn);
            attn(&mut out, format!("dec.{i}.cross_attn"), &mut l.cross_attn);
            out.push((format!("dec.{i}.ffn.in"), Projection::FfnIn, &mut l.ffn.fc_in));
            out.push((format!("dec.{i}.ffn.out"), Projection::FfnOut, &mut l.ffn.fc_out));
        }
        out
    }

    /// Replaces every projection weight with its quantized form. Must run
    /// before adapters are attached.
    pub fn quantize_base(&mut self, scheme: QuantScheme, block_size: usize) -> Result<()> {
        if self.lora.is_some() {
            return Err(ModelError::Config(String::from(
                "quantize the base before attaching adapters",
            )));
        }
        for (_, _, lin) in self.linears_mut() {
            if let Linear::Frozen { base, .. } = lin {
                if let BaseWeight::Dense(w) = &base.weight {
                    let q = QuantizedMatrix::quantize(w.as_ref(), scheme, block_size)?;
                    base.weight = BaseWeight::Quantized(Arc::new(q));
                }
            }
        }
        Ok(())
    }

    /// Attaches adapters to the targeted projections. Adapter `A` matrices
    /// are drawn from `seed` in projection order.
    pub fn attach_lora(&mut self, config: &LoraConfig, seed: u64) -> Result<()> {
        config.validate()?;
        if self.lora.is_some() {
            return Err(ModelError::Config(String::from("adapters already attached")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, proj, lin) in self.linears_mut() {
            let base = lin.base().clone();
            if config.targets(proj) {
                *lin = Linear::Adapted(LoraAdapter::new(base, config, &mut rng)?);
            } else if config.bias_mode == BiasMode::All {
                let b = match &base.bias {
                    Some(b0) => (**b0).clone(),
                    None => Tensor::zeros(&[base.d_out()]),
                };
                *lin = Linear::Frozen {
                    base,
                    trainable_bias: Some(b),
                };
            }
        }
        self.lora = Some(config.clone());
        Ok(())
    }

    /// Trainable tensors keyed `{projection}.{lora_a|lora_b|bias}`.
    pub fn trainable_params(&self) -> BTreeMap<String, Tensor<F>> {
        let mut out = BTreeMap::new();
        for (name, _, lin) in self.linears() {
            for (local, t) in lin.params() {
                out.insert(format!("{name}.{local}"), t.clone());
            }
        }
        out
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.linears()
            .iter()
            .flat_map(|(_, _, l)| l.params())
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn set_trainable(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let (layer, local) = name
            .rsplit_once('.')
            .ok_or_else(|| ModelError::UnknownParam(String::from(name)))?;
        for (n, _, lin) in self.linears_mut() {
            if n == layer {
                return lin.set_param(local, value);
            }
        }
        Err(ModelError::UnknownParam(String::from(name)))
    }

    pub fn adapters(&self) -> Vec<(String, &LoraAdapter<F>)> {
        self.linears()
            .into_iter()
            .filter_map(|(n, _, l)| match l {
                Linear::Adapted(a) => Some((n, a)),
                _ => None,
            })
            .collect()
    }

    /// Frozen tensors as `(name, canonical bytes)` in a fixed order.
    pub fn base_tensors(&self) -> Vec<(String, Vec<u8>)> {
        let mut out = vec![
            (String::from("tok_emb"), self.tok_emb.to_le_f32_bytes()),
            (String::from("enc_pos"), self.enc_pos.to_le_f32_bytes()),
            (String::from("dec_pos"), self.dec_pos.to_le_f32_bytes()),
        ];
        let norm = |out: &mut Vec<(String, Vec<u8>)>, name: String, n: &Norm<F>| {
            let mut bytes = n.gain.to_le_f32_bytes();
            bytes.extend(n.shift.to_le_f32_bytes());
            out.push((name, bytes));
        };
        for (i, l) in self.encoder.iter().enumerate() {
            norm(&mut out, format!("enc.{i}.ln_attn"), &l.ln_attn);
            norm(&mut out, format!("enc.{i}.ln_ffn"), &l.ln_ffn);
        }
        norm(&mut out, String::from("enc.ln"), &self.enc_norm);
        for (i, l) in self.decoder.iter().enumerate() {
            norm(&mut out, format!("dec.{i}.ln_self"), &l.ln_self);
            norm(&mut out, format!("dec.{i}.ln_cross"), &l.ln_cross);
            norm(&mut out, format!("dec.{i}.ln_ffn"), &l.ln_ffn);
        }
        norm(&mut out, String::from("dec.ln"), &self.dec_norm);
        for (name, _, lin) in self.linears() {
            let base = lin.base();
            let mut bytes = base.weight.to_bytes();
            if let Some(b) = &base.bias {
                bytes.extend(b.to_le_f32_bytes());
            }
            out.push((name, bytes));
        }
        if let Some(h) = &self.lm_head {
            out.push((String::from("lm_head"), h.to_le_f32_bytes()));
        }
        out
    }

    /// SHA-256 over every frozen tensor.
    pub fn base_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, bytes) in self.base_tensors() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        h.finalize().into()
    }

    /// Hash of the adapter layout (names and shapes of trainable tensors).
    pub fn shape_signature(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.trainable_params() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update([0xff]);
        }
        h.finalize().into()
    }

    fn check_ids(&self, rows: &[Vec<u32>]) -> Result<(usize, usize)> {
        let b = rows.len();
        let len = rows.first().map_or(0, |r| r.len());
        if b == 0 || len == 0 {
            return Err(ModelError::Batch(String::from("empty batch or sequence")));
        }
        if rows.iter().any(|r| r.len() != len) {
            return Err(ModelError::Batch(String::from("ragged rows")));
        }
        if len > self.config.max_positions {
            return Err(ModelError::Position {
                pos: len - 1,
                max: self.config.max_positions,
            });
        }
        for r in rows {
            for &id in r {
                if id as usize >= self.config.vocab_size {
                    return Err(ModelError::TokenId {
                        id,
                        vocab: self.config.vocab_size,
                    });
                }
            }
        }
        Ok((b, len))
    }

    /// Token plus position embeddings for `[b, len]` ids, flattened to
    /// `[b·len, d]`.
    fn embed(&self, g: &mut Graph<F>, rows: &[Vec<u32>], pos: &Tensor<F>) -> Result<Var> {
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(rows.len() * rows[0].len() * d);
        for r in rows {
            for (p, &id) in r.iter().enumerate() {
                let t = self.tok_emb.row(id as usize);
                let q = pos.row(p);
                data.extend(t.iter().zip(q).map(|(&a, &b)| a + b));
            }
        }
        Ok(g.constant(Tensor::new(vec![rows.len() * rows[0].len(), d], data)?))
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        g: &mut Graph<F>,
        attn: &Attention<F>,
        name: &str,
        x: Var,
        kv: Var,
        batch: usize,
        q_len: usize,
        kv_len: usize,
        key_pad: &[Vec<u8>],
        causal: bool,
        sites: &mut Sites,
        mode: ForwardMode,
    ) -> Result<Var> {
        let heads = self.config.n_heads;
        let dh = self.config.d_model / heads;
        let q = attn.q.forward(g, x, &format!("{name}.q"), sites.next(), mode)?;
        let k = attn.k.forward(g, kv, &format!("{name}.k"), sites.next(), mode)?;
        let v = attn.v.forward(g, kv, &format!("{name}.v"), sites.next(), mode)?;
        let inv = F::of(1.0 / libm::sqrt(dh as f64));
        let mut rows = Vec::with_capacity(batch);
        for b in 0..batch {
            let mask: Vec<bool> = (0..q_len)
                .flat_map(|i| (0..kv_len).map(move |j| (i, j)))
                .map(|(i, j)| key_pad[b][j] == 0 || (causal && j > i))
                .collect();
            let mut parts = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = g.slice(q, b * q_len, q_len, h * dh, dh)?;
                let kh = g.slice(k, b * kv_len, kv_len, h * dh, dh)?;
                let vh = g.slice(v, b * kv_len, kv_len, h * dh, dh)?;
                let scores = g.matmul_nt(qh, kh)?;
                let scores = g.scale(scores, inv)?;
                let probs = g.softmax(scores, Some(&mask))?;
                parts.push(g.matmul(probs, vh)?);
            }
            rows.push(g.concat_cols(&parts)?);
        }
        let ctx = g.concat_rows(&rows)?;
        attn.o.forward(g, ctx, &format!("{name}.o"), sites.next(), mode)
    }

    fn feed_forward(
        &self,
        g: &mut Graph<F>,
        f: &FeedForward<F>,
        name: &str,
        x: Var,
        sites: &mut Sites,
        mode: ForwardMode,
    ) -> Result<Var> {
        let h = f.fc_in.forward(g, x, &format!("{name}.in"), sites.next(), mode)?;
        let h = g.gelu(h)?;
        f.fc_out.forward(g, h, &format!("{name}.out"), sites.next(), mode)
    }

    fn residual_dropout(&self, g: &mut Graph<F>, x: Var, sites: &mut Sites, mode: ForwardMode) -> Result<Var> {
        Ok(g.dropout(x, self.config.dropout, mode.seed, sites.next(), mode.step, mode.training)?)
    }

    /// Encoder output `[b·src_len, d]`.
    pub fn encode(
        &self,
        g: &mut Graph<F>,
        input_ids: &[Vec<u32>],
        attention_mask: &[Vec<u8>],
        mode: ForwardMode,
    ) -> Result<Var> {
        let (b, s) = self.check_ids(input_ids)?;
        if attention_mask.len() != b || attention_mask.iter().any(|m| m.len() != s) {
            return Err(ModelError::Batch(String::from("attention mask shape")));
        }
        let mut sites = Sites(0);
        let mut h = self.embed(g, input_ids, &self.enc_pos)?;
        h = self.residual_dropout(g, h, &mut sites, mode)?;
        for (i, layer) in self.encoder.iter().enumerate() {
            let n = layer.ln_attn.forward(g, h)?;
            let a = self.attend(
                g,
                &layer.attn,
                &format!("enc.{i}.self_attn"),
                n,
                n,
                b,
                s,
                s,
                attention_mask,
                false,
                &mut sites,
                mode,
            )?;
            let a = self.residual_dropout(g, a, &mut sites, mode)?;
            h = g.add(h, a)?;
            let n = layer.ln_ffn.forward(g, h)?;
            let f = self.feed_forward(g, &layer.ffn, &format!("enc.{i}.ffn"), n, &mut sites, mode)?;
            let f = self.residual_dropout(g, f, &mut sites, mode)?;
            h = g.add(h, f)?;
        }
        self.enc_norm.forward(g, h)
    }

    /// Decoder logits `[b·tgt_len, vocab]` given encoder output.
    pub fn decode(
        &self,
        g: &mut Graph<F>,
        enc_out: Var,
        attention_mask: &[Vec<u8>],
        decoder_input_ids: &[Vec<u32>],
        mode: ForwardMode,
    ) -> Result<Var> {
        let (b, t) = self.check_ids(decoder_input_ids)?;
        let s = attention_mask.first().map_or(0, |m| m.len());
        if attention_mask.len() != b || g.value(enc_out).rows() != b * s {
            return Err(ModelError::Batch(String::from("encoder output does not match batch")));
        }
        // Decoder sites start far from encoder sites so both streams differ.
        let mut sites = Sites(1 << 20);
        let self_mask: Vec<Vec<u8>> = vec![vec![1u8; t]; b];
        let mut h = self.embed(g, decoder_input_ids, &self.dec_pos)?;
        h = self.residual_dropout(g, h, &mut sites, mode)?;
        for (i, layer) in self.decoder.iter().enumerate() {
            let n = layer.ln_self.forward(g, h)?;
            let a = self.attend(
                g,
                &layer.self_attn,
                &format!("dec.{i}.self_attn"),
                n,
                n,
                b,
                t,
                t,
                &self_mask,
                true,
                &mut sites,
                mode,
            )?;
            let a = self.residual_dropout(g, a, &mut sites, mode)?;
            h = g.add(h, a)?;
            let n = layer.ln_cross.forward(g, h)?;
            let c = self.attend(
                g,
                &layer.cross_attn,
                &format!("dec.{i}.cross_attn"),
                n,
                enc_out,
                b,
                t,
                s,
                attention_mask,
                false,
                &mut sites,
                mode,
            )?;
            let c = self.residual_dropout(g, c, &mut sites, mode)?;
            h = g.add(h, c)?;
            let n = layer.ln_ffn.forward(g, h)?;
            let f = self.feed_forward(g, &layer.ffn, &format!("dec.{i}.ffn"), n, &mut sites, mode)?;
            let f = self.residual_dropout(g, f, &mut sites, mode)?;
            h = g.add(h, f)?;
        }
        let h = self.dec_norm.forward(g, h)?;
        let head: Arc<dyn FrozenLinear<F>> = match &self.lm_head {
            Some(w) => w.clone(),
            None => self.tok_emb.clone(),
        };
        Ok(g.frozen_linear(h, head)?)
    }

    /// Records a full forward pass; returns logits `[b·tgt_len, vocab]`.
    pub fn forward_graph(&self, g: &mut Graph<F>, input: ModelInput<'_>, mode: ForwardMode) -> Result<Var> {
        let enc = self.encode(g, input.input_ids, input.attention_mask, mode)?;
        self.decode(g, enc, input.attention_mask, input.decoder_input_ids, mode)
    }

    /// Logits shaped `[batch, tgt_len, vocab]`.
    pub fn forward(&self, input: ModelInput<'_>, mode: ForwardMode) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let logits = self.forward_graph(&mut g, input, mode)?;
        let b = input.decoder_input_ids.len();
        let t = input.decoder_input_ids[0].len();
        let out = g.value(logits).clone();
        Ok(out.reshape(vec![b, t, self.config.vocab_size])?)
    }

    /// Teacher-forced loss for a batch; `labels` use `ignore` on padding.
    pub fn loss_graph(
        &self,
        g: &mut Graph<F>,
        input: ModelInput<'_>,
        labels: &[Vec<i64>],
        ignore: i64,
        mode: ForwardMode,
    ) -> Result<Var> {
        let logits = self.forward_graph(g, input, mode)?;
        let flat: Vec<i64> = labels.iter().flatten().copied().collect();
        Ok(g.cross_entropy(logits, &flat, ignore)?)
    }
}

/// Teacher-forcing decoder inputs: `[begin, l₀, …, l_{T-2}]` with sentinel
/// labels replaced by `pad`.
pub fn shift_right(labels: &[i64], begin: u32, pad: u32, ignore: i64) -> Vec<u32> {
    if labels.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(labels.len());
    out.push(begin);
    for &l in &labels[..labels.len() - 1] {
        out.push(if l == ignore { pad } else { l as u32 });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub max_len: usize,
    pub strategy: Strategy,
    pub begin_id: u32,
    pub end_id: u32,
}

fn log_softmax<F: Real>(row: &[F]) -> Vec<f64> {
    let r: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
    let lse = crate::numerics::kernels::log_sum_exp(&r);
    r.iter().map(|v| v - lse).collect()
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    log_prob: f64,
}

impl Hypothesis {
    fn normalized(&self) -> f64 {
        self.log_prob / (self.tokens.len().max(1) as f64)
    }
}

impl<F: Real> Seq2SeqModel<F> {
    fn next_log_probs(&self, enc: &Tensor<F>, mask: &[Vec<u8>], prefix: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let e = g.constant(enc.clone());
        let logits = self.decode(&mut g, e, mask, &[prefix.to_vec()], ForwardMode::EVAL)?;
        let lv = g.value(logits);
        Ok(log_softmax(lv.row(lv.rows() - 1)))
    }

    /// Decodes a headline for one source sequence. The returned ids exclude
    /// the begin token and include the end token when one was produced; the
    /// length never exceeds `max_len`.
    pub fn generate(&self, input_ids: &[u32], cfg: &GenerateConfig) -> Result<Vec<u32>> {
        if cfg.max_len == 0 {
            return Err(ModelError::Config(String::from("max_len must be >= 1")));
        }
        if let Strategy::Beam(0) = cfg.strategy {
            return Err(ModelError::Config(String::from("beam width must be >= 1")));
        }
        let src = [input_ids.to_vec()];
        let mask = [vec![1u8; input_ids.len()]];
        let mut g = Graph::new();
        let enc = self.encode(&mut g, &src, &mask, ForwardMode::EVAL)?;
        let enc = g.value(enc).clone();
        drop(g);
        match cfg.strategy {
            Strategy::Greedy => {
                let mut prefix = vec![cfg.begin_id];
                while prefix.len() <= cfg.max_len {
                    let lp = self.next_log_probs(&enc, &mask, &prefix)?;
                    let tok = argmax(&lp) as u32;
                    prefix.push(tok);
                    if tok == cfg.end_id {
                        break;
                    }
                }
                Ok(prefix[1..].to_vec())
            }
            Strategy::Beam(k) => self.beam_search(&enc, &mask, cfg, k),
        }
    }

    fn beam_search(&self, enc: &Tensor<F>, mask: &[Vec<u8>], cfg: &GenerateConfig, k: usize) -> Result<Vec<u32>> {
        let mut live = vec![Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
        }];
        let mut done: Vec<Hypothesis> = Vec::new();
        while !live.is_empty() {
            let mut cands: Vec<Hypothesis> = Vec::new();
            for h in &live {
                let mut prefix = vec![cfg.begin_id];
                prefix.extend(&h.tokens);
                let lp = self.next_log_probs(enc, mask, &prefix)?;
                let mut order: Vec<usize> = (0..lp.len()).collect();
                order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
                for &tok in order.iter().take(k) {
                    let mut tokens = h.tokens.clone();
                    tokens.push(tok as u32);
                    cands.push(Hypothesis {
                        tokens,
                        log_prob: h.log_prob + lp[tok],
                    });
                }
            }
            cands.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens)));
            cands.truncate(k);
            live.clear();
            for c in cands {
                if c.tokens.last() == Some(&cfg.end_id) || c.tokens.len() >= cfg.max_len {
                    done.push(c);
                } else {
                    live.push(c);
                }
            }
        }
        let best = done
            .into_iter()
            .reduce(|best, h| if h.normalized() > best.normalized() { h } else { best })
            .expect("at least one finished hypothesis");
        Ok(best.tokens)
    }
}
