//! Low-rank adapters over frozen linear maps.
//!
//! An adapted layer computes `y = x·W₀ᵀ + s·(drop(x)·Aᵀ)·Bᵀ + b` where `W₀`
//! is the frozen base (dense or quantized), `A: [r, d_in]`, `B: [d_out, r]`,
//! `s = alpha / r`, and `b` is either the frozen base bias or a trainable
//! copy of it depending on [`BiasMode`]. `B` starts at zero so a fresh
//! adapter leaves the base output untouched.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{FrozenLinear, Gradients, Graph, NumericsError, Real, Tensor, Var};
use crate::quant::{QuantizedLinear, QuantizedMatrix};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    None,
    LoraOnly,
    All,
}

/// Linear maps inside a transformer block that can carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
    FfnIn,
    FfnOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub bias_mode: BiasMode,
    pub target_projections: Vec<Projection>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            r: 32,
            alpha: 32.0,
            dropout: 0.1,
            bias_mode: BiasMode::LoraOnly,
            target_projections: vec![Projection::Query, Projection::Value],
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LoraError {
    #[error("invalid LoRA config: {0}")]
    Config(String),
    #[error("adapter shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T, E = LoraError> = core::result::Result<T, E>;

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r < 1 {
            return Err(LoraError::Config(format!("rank must be >= 1, got {}", self.r)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(LoraError::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(LoraError::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.r as f64
    }

    pub fn targets(&self, p: Projection) -> bool {
        self.target_projections.contains(&p)
    }
}

/// Frozen weight storage.
#[derive(Debug, Clone)]
pub enum BaseWeight<F: Real> {
    Dense(Arc<Tensor<F>>),
    Quantized(Arc<QuantizedMatrix>),
}

impl<F: Real> BaseWeight<F> {
    /// `(d_out, d_in)`.
    pub fn shape(&self) -> (usize, usize) {
        match self {
            BaseWeight::Dense(t) => (t.rows(), t.cols()),
            BaseWeight::Quantized(q) => q.shape(),
        }
    }

    pub fn dense(&self) -> Tensor<F> {
        match self {
            BaseWeight::Dense(t) => (**t).clone(),
            BaseWeight::Quantized(q) => q.dequantize(),
        }
    }

    pub fn as_frozen(&self) -> Arc<dyn FrozenLinear<F>> {
        match self {
            BaseWeight::Dense(t) => t.clone(),
            BaseWeight::Quantized(q) => Arc::new(QuantizedLinear(q.clone())),
        }
    }

    /// Canonical bytes of the stored representation.
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            BaseWeight::Dense(t) => t.to_le_f32_bytes(),
            BaseWeight::Quantized(q) => {
                let mut out = vec![q.scheme().tag()];
                for a in q.absmax() {
                    out.extend_from_slice(&a.to_le_bytes());
                }
                out.extend_from_slice(q.packed_codes());
                out
            }
        }
    }
}

/// A frozen linear map with an optional frozen bias.
#[derive(Debug, Clone)]
pub struct BaseLinear<F: Real> {
    pub weight: BaseWeight<F>,
    pub bias: Option<Arc<Tensor<F>>>,
}

impl<F: Real> BaseLinear<F> {
    pub fn dense(weight: Tensor<F>, bias: Option<Tensor<F>>) -> Self {
        Self {
            weight: BaseWeight::Dense(Arc::new(weight)),
            bias: bias.map(Arc::new),
        }
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape().0
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape().1
    }
}

/// Dropout settings for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardMode {
    pub training: bool,
    pub seed: u64,
    pub step: u64,
}

impl ForwardMode {
    pub const EVAL: ForwardMode = ForwardMode {
        training: false,
        seed: 0,
        step: 0,
    };

    pub fn train(seed: u64, step: u64) -> Self {
        Self {
            training: true,
            seed,
            step,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoraAdapter<F: Real> {
    base: BaseLinear<F>,
    a: Tensor<F>,
    b: Tensor<F>,
    bias: Option<Tensor<F>>,
    scaling: F,
    dropout: f64,
}

/// Parameter names used in gradient maps and checkpoints.
pub const A_SUFFIX: &str = "lora_a";
pub const B_SUFFIX: &str = "lora_b";
pub const BIAS_SUFFIX: &str = "bias";

impl<F: Real> LoraAdapter<F> {
    /// Fresh adapter: `A ~ N(0, 0.02²)`, `B = 0`. A trainable bias is created
    /// when `bias_mode` is not `None`, initialized from the base bias (or
    /// zeros when the base has none).
    pub fn new<R: Rng + ?Sized>(base: BaseLinear<F>, config: &LoraConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d_out, d_in) = base.weight.shape();
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let a_data = (0..config.r * d_in).map(|_| F::of(normal.sample(rng))).collect();
        let a = Tensor::new(vec![config.r, d_in], a_data)?;
        let b = Tensor::zeros(&[d_out, config.r]);
        let bias = match config.bias_mode {
            BiasMode::None => None,
            _ => Some(match &base.bias {
                Some(b0) => (**b0).clone(),
                None => Tensor::zeros(&[d_out]),
            }),
        };
        Ok(Self {
            base,
            a,
            b,
            bias,
            scaling: F::of(config.scaling()),
            dropout: config.dropout,
        })
    }

    pub fn from_parts(
        base: BaseLinear<F>,
        a: Tensor<F>,
        b: Tensor<F>,
        bias: Option<Tensor<F>>,
        scaling: F,
        dropout: f64,
    ) -> Result<Self> {
        let (d_out, d_in) = base.weight.shape();
        let r = a.rows();
        if a.shape() != [r, d_in] || b.shape() != [d_out, r] {
            return Err(LoraError::Shape(format!(
                "base {d_out}x{d_in}, A {:?}, B {:?}",
                a.shape(),
                b.shape()
            )));
        }
        if let Some(bias) = &bias {
            if bias.numel() != d_out {
                return Err(LoraError::Shape(format!("bias {:?} for d_out {d_out}", bias.shape())));
            }
        }
        Ok(Self {
            base,
            a,
            b,
            bias,
            scaling,
            dropout,
        })
    }

    pub fn base(&self) -> &BaseLinear<F> {
        &self.base
    }

    pub fn a(&self) -> &Tensor<F> {
        &self.a
    }

    pub fn b(&self) -> &Tensor<F> {
        &self.b
    }

    pub fn bias(&self) -> Option<&Tensor<F>> {
        self.bias.as_ref()
    }

    pub fn scaling(&self) -> F {
        self.scaling
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// Trainable tensors with their local names.
    pub fn params(&self) -> Vec<(&'static str, &Tensor<F>)> {
        let mut out = vec![(A_SUFFIX, &self.a), (B_SUFFIX, &self.b)];
        if let Some(b) = &self.bias {
            out.push((BIAS_SUFFIX, b));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<F>)> {
        let mut out = vec![(A_SUFFIX, &mut self.a), (B_SUFFIX, &mut self.b)];
        if let Some(b) = &mut self.bias {
            out.push((BIAS_SUFFIX, b));
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records the adapted layer on `graph`. Parameters are registered as
    /// `{prefix}.lora_a`, `{prefix}.lora_b` and `{prefix}.bias`; the base
    /// weight never becomes a gradient leaf.
    pub fn forward_graph(
        &self,
        graph: &mut Graph<F>,
        x: Var,
        prefix: &str,
        site: u64,
        mode: ForwardMode,
    ) -> Result<Var> {
        let base_out = graph.frozen_linear(x, self.base.weight.as_frozen())?;
        let a = graph.param(format!("{prefix}.{A_SUFFIX}"), self.a.clone());
        let b = graph.param(format!("{prefix}.{B_SUFFIX}"), self.b.clone());
        let dropped = graph.dropout(x, self.dropout, mode.seed, site, mode.step, mode.training)?;
        let low = graph.matmul_nt(dropped, a)?;
        let up = graph.matmul_nt(low, b)?;
        let up = graph.scale(up, self.scaling)?;
        let mut y = graph.add(base_out, up)?;
        if let Some(bias) = &self.bias {
            let bv = graph.param(format!("{prefix}.{BIAS_SUFFIX}"), bias.clone());
            y = graph.add_row(y, bv)?;
        } else if let Some(b0) = &self.base.bias {
            let bv = graph.constant((**b0).clone());
            y = graph.add_row(y, bv)?;
        }
        Ok(y)
    }

    /// Forward pass for `x: [n, d_in]`.
    pub fn forward(&self, x: &Tensor<F>, mode: ForwardMode) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.forward_graph(&mut g, xv, "adapter", 0, mode)?;
        Ok(g.value(y).clone())
    }

    /// Gradients of `sum(y ⊙ upstream)` with respect to the trainable
    /// tensors, keyed by local name (`lora_a`, `lora_b`, `bias`).
    pub fn backward(&self, x: &Tensor<F>, upstream: &Tensor<F>, mode: ForwardMode) -> Result<Gradients<F>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.forward_graph(&mut g, xv, "adapter", 0, mode)?;
        let u = g.constant(upstream.clone());
        let prod = g.mul(y, u)?;
        let loss = g.sum(prod)?;
        let grads = g.backward(loss)?;
        Ok(grads
            .into_iter()
            .map(|(k, v)| (String::from(k.trim_start_matches("adapter.")), v))
            .collect())
    }

    /// Dense `W₀ + s·B·A` for inference. The effective bias is returned
    /// alongside.
    pub fn merge(&self) -> Result<(Tensor<F>, Option<Tensor<F>>)> {
        let mut w = self.base.weight.dense();
        let delta = self.b.matmul(&self.a)?;
        for (o, &d) in w.data_mut().iter_mut().zip(delta.data()) {
            *o = *o + self.scaling * d;
        }
        let bias = self
            .bias
            .clone()
            .or_else(|| self.base.bias.as_ref().map(|b| (**b).clone()));
        Ok((w, bias))
    }

    /// Replaces trainable tensors after an optimizer step or checkpoint load.
    pub fn set_param(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let slot = match name {
            A_SUFFIX => &mut self.a,
            B_SUFFIX => &mut self.b,
            BIAS_SUFFIX => match &mut self.bias {
                Some(b) => b,
                None => return Err(LoraError::Shape(String::from("adapter has no trainable bias"))),
            },
            other => return Err(LoraError::Shape(format!("unknown adapter tensor {other}"))),
        };
        if slot.shape() != value.shape() {
            return Err(LoraError::Shape(format!(
                "{name}: expected {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }
}
